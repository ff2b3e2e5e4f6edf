"""Encoder, decoder and segmentation network built on :mod:`raterseg.autodiff`.

All three networks are pure functions of a :class:`ParamSet` and their
inputs. Inputs may be unbatched (``[1,H,W]`` images, ``[N]`` latents) or
batched (``[B,1,H,W]``, ``[B,N]``); outputs follow the input convention.
"""
from __future__ import annotations

import dataclasses
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, as_tensor


class InputError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    height: int = 64
    width: int = 64
    in_channels: int = 1
    base_width: int = 16
    depth: int = 2
    latent_dim: int = 6

    def __post_init__(self):
        if self.base_width < 1 or self.depth < 1 or self.in_channels < 1 or self.latent_dim < 0:
            raise ConfigError(f"invalid architecture {self}")
        step = 2 ** self.depth
        if self.height % step or self.width % step:
            raise ConfigError(f"{self.height}x{self.width} not divisible by 2**depth={step}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchConfig":
        return cls(**{f.name: int(d[f.name]) for f in dataclasses.fields(cls)})


class ParamSet(Mapping):
    """Ordered name -> Tensor map that remembers which names were read."""

    def __init__(self, tensors=None, seed=None):
        self._tensors: dict[str, Tensor] = dict(tensors or {})
        self.seed = seed
        self.accessed: set[str] = set()

    def __getitem__(self, name) -> Tensor:
        t = self._tensors[name]
        self.accessed.add(name)
        return t

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def raw(self, name) -> Tensor:
        """Lookup that does not count as an access."""
        return self._tensors[name]

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        new = dict(self._tensors)
        for k, v in updates.items():
            new[k] = Tensor(v, requires_grad=True)
        return ParamSet(new, self.seed)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({k: Tensor(t.data, requires_grad=True, dtype=dtype)
                         for k, t in self._tensors.items()}, self.seed)


@dataclass
class ModelTriple:
    encoder: ParamSet
    decoder: ParamSet
    segnet: ParamSet
    arch: ArchConfig

    def __post_init__(self):
        if self.arch.latent_dim < 1:
            raise ConfigError("a ModelTriple needs latent_dim >= 1")

    @property
    def latent_dim(self) -> int:
        return self.arch.latent_dim


# -- initialisation -------------------------------------------------------

class _Init:
    def __init__(self, rng, dtype):
        self.rng, self.dtype, self.params = rng, dtype, {}

    def conv(self, name, cin, cout, k=3, zero=False):
        fan_in = cin * k * k
        w = np.zeros((cout, cin, k, k)) if zero else \
            self.rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True, dtype=self.dtype)
        self.params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, dtype=self.dtype)

    def dense(self, name, cin, cout, zero=False):
        w = np.zeros((cin, cout)) if zero else self.rng.standard_normal((cin, cout)) * np.sqrt(2.0 / cin)
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True, dtype=self.dtype)
        self.params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, dtype=self.dtype)


def _widths(arch):
    return [arch.base_width * 2 ** level for level in range(arch.depth + 1)]


def init_encoder(arch: ArchConfig, rng, dtype=np.float32) -> dict:
    ini = _Init(rng, dtype)
    w = _widths(arch)
    ini.conv("enc.in", 2 * arch.in_channels, w[0])
    for level in range(1, arch.depth + 1):
        ini.conv(f"enc.down{level}", w[level - 1], w[level])
    ini.dense("enc.hidden", w[-1], 2 * w[-1])
    ini.dense("enc.mu", 2 * w[-1], arch.latent_dim, zero=True)
    ini.dense("enc.log_sigma", 2 * w[-1], arch.latent_dim, zero=True)
    return ini.params


def init_decoder(arch: ArchConfig, rng, dtype=np.float32) -> dict:
    ini = _Init(rng, dtype)
    w = _widths(arch)
    h, wd = arch.height >> arch.depth, arch.width >> arch.depth
    ini.dense("dec.in", arch.latent_dim, w[-1] * h * wd)
    for level in range(arch.depth, 0, -1):
        ini.conv(f"dec.up{level}", w[level], w[level - 1])
    ini.conv("dec.out", w[0], arch.in_channels, k=1)
    return ini.params


def init_segnet(arch: ArchConfig, rng, dtype=np.float32) -> dict:
    ini = _Init(rng, dtype)
    w = _widths(arch)
    ini.conv("seg.in", arch.in_channels + arch.latent_dim, w[0])
    ini.conv("seg.in2", w[0], w[0])
    for level in range(1, arch.depth + 1):
        ini.conv(f"seg.down{level}a", w[level - 1], w[level])
        ini.conv(f"seg.down{level}b", w[level], w[level])
    for level in range(arch.depth, 0, -1):
        ini.conv(f"seg.up{level}a", w[level] + w[level - 1], w[level - 1])
        ini.conv(f"seg.up{level}b", w[level - 1], w[level - 1])
    ini.conv("seg.out", w[0], 1, k=1)
    return ini.params


def init_params(arch: ArchConfig, seed: int, dtype=np.float32) -> ModelTriple:
    """Deterministic He-normal init; the encoder's mu/log-sigma heads start at zero."""
    if not isinstance(arch, ArchConfig):
        raise ConfigError(f"expected ArchConfig, got {type(arch).__name__}")
    if arch.latent_dim < 1:
        raise ConfigError("the joint model needs latent_dim >= 1")
    enc_ss, dec_ss, seg_ss = np.random.SeedSequence(seed).spawn(3)
    return ModelTriple(
        ParamSet(init_encoder(arch, np.random.default_rng(enc_ss), dtype), seed),
        ParamSet(init_decoder(arch, np.random.default_rng(dec_ss), dtype), seed),
        ParamSet(init_segnet(arch, np.random.default_rng(seg_ss), dtype), seed),
        arch,
    )


def init_standalone_segnet(arch: ArchConfig, seed: int, dtype=np.float32) -> ParamSet:
    """Segmentation net without latent input (``arch.latent_dim`` is ignored)."""
    arch = dataclasses.replace(arch, latent_dim=0)
    return ParamSet(init_segnet(arch, np.random.default_rng(np.random.SeedSequence(seed)), dtype), seed)


# -- layers ----------------------------------------------------------------

def conv(tape: Tape, p: ParamSet, name: str, x: Tensor, stride=1, relu=True) -> Tensor:
    w = p[f"{name}.w"]
    pad = w.shape[-1] // 2
    y = tape.conv2d(x, w, p[f"{name}.b"], stride=stride, padding=pad)
    return tape.relu(y) if relu else y


def dense(tape: Tape, p: ParamSet, name: str, x: Tensor, relu=False) -> Tensor:
    y = tape.add(tape.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])
    return tape.relu(y) if relu else y


def _dropout(tape: Tape, x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return tape.mul(x, Tensor(keep, dtype=x.dtype))


# -- input handling --------------------------------------------------------

def _batched_image(tape: Tape, x, name: str, in_channels: int = 1) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.data.ndim == 3 and x.shape[0] == in_channels:
        return tape.reshape(x, (1,) + x.shape), True
    if x.data.ndim != 4 or x.shape[1] != in_channels:
        raise InputError(f"{name}: expected [{in_channels},H,W] or [B,{in_channels},H,W], got {x.shape}")
    return x, False


def _batched_latent(tape: Tape, z, latent_dim: int, name: str) -> tuple[Tensor, bool]:
    z = as_tensor(z)
    if z.data.ndim == 1 and z.shape[0] == latent_dim:
        return tape.reshape(z, (1, latent_dim)), True
    if z.data.ndim != 2 or z.shape[1] != latent_dim:
        raise InputError(f"{name}: expected latent [{latent_dim}] or [B,{latent_dim}], got {z.shape}")
    return z, False


# -- networks --------------------------------------------------------------

def encoder_forward(tape: Tape, params: ParamSet, arch: ArchConfig, x, s) -> tuple[Tensor, Tensor]:
    """q(z | x, s): returns (mu, log_sigma), each [N] or [B,N]."""
    x, single = _batched_image(tape, x, "encoder x", arch.in_channels)
    s, _ = _batched_image(tape, s, "encoder s", arch.in_channels)
    if x.shape != s.shape:
        raise InputError(f"encoder: image {x.shape} and mask {s.shape} differ")
    h = conv(tape, params, "enc.in", tape.concat([x, s], axis=1))
    for level in range(1, arch.depth + 1):
        h = conv(tape, params, f"enc.down{level}", h, stride=2)
    h = tape.mean(h, axis=(2, 3))
    h = dense(tape, params, "enc.hidden", h, relu=True)
    mu = dense(tape, params, "enc.mu", h)
    log_sigma = dense(tape, params, "enc.log_sigma", h)
    if single:
        mu, log_sigma = tape.reshape(mu, (arch.latent_dim,)), tape.reshape(log_sigma, (arch.latent_dim,))
    return mu, log_sigma


def decoder_forward(tape: Tape, params: ParamSet, arch: ArchConfig, z) -> Tensor:
    """p(x | z): reconstruction in [0,1], [1,H,W] or [B,1,H,W]."""
    z, single = _batched_latent(tape, z, arch.latent_dim, "decoder")
    B = z.shape[0]
    w = _widths(arch)
    h = dense(tape, params, "dec.in", z, relu=True)
    h = tape.reshape(h, (B, w[-1], arch.height >> arch.depth, arch.width >> arch.depth))
    for level in range(arch.depth, 0, -1):
        h = conv(tape, params, f"dec.up{level}", tape.upsample2x(h))
    out = tape.sigmoid(conv(tape, params, "dec.out", h, relu=False))
    return tape.reshape(out, out.shape[1:]) if single else out


def segnet_forward(tape: Tape, params: ParamSet, arch: ArchConfig, x, z=None,
                   dropout: float = 0.0, rng=None) -> Tensor:
    """p(s | x, z): per-pixel logits with the spatial shape of x.

    ``z`` is tiled to an N-channel map and concatenated to the input. Pass
    ``z=None`` for a latent-free net built by :func:`init_standalone_segnet`.
    ``dropout`` > 0 drops activations after every block using ``rng``.
    """
    x, single = _batched_image(tape, x, "segnet x", arch.in_channels)
    B, _, H, W = x.shape
    h = x
    if z is not None:
        z, _ = _batched_latent(tape, z, arch.latent_dim, "segnet")
        if z.shape[0] != B:
            if z.shape[0] != 1:
                raise InputError(f"segnet: batch of x ({B}) and z ({z.shape[0]}) differ")
            z = tape.broadcast(z, (B, arch.latent_dim))
        zmap = tape.broadcast(tape.reshape(z, (B, arch.latent_dim, 1, 1)), (B, arch.latent_dim, H, W))
        h = tape.concat([x, zmap], axis=1)
    elif params.raw("seg.in.w").shape[1] != arch.in_channels:
        raise InputError("segnet: this network expects a latent z")
    if dropout > 0 and rng is None:
        raise InputError("segnet: dropout needs an rng")
    h = conv(tape, params, "seg.in2", conv(tape, params, "seg.in", h))
    skips = []
    for level in range(1, arch.depth + 1):
        skips.append(h)
        h = conv(tape, params, f"seg.down{level}a", h, stride=2)
        h = _dropout(tape, conv(tape, params, f"seg.down{level}b", h), dropout, rng)
    for level in range(arch.depth, 0, -1):
        h = tape.concat([tape.upsample2x(h), skips[level - 1]], axis=1)
        h = conv(tape, params, f"seg.up{level}a", h)
        h = _dropout(tape, conv(tape, params, f"seg.up{level}b", h), dropout, rng)
    logits = conv(tape, params, "seg.out", h, relu=False)
    return tape.reshape(logits, logits.shape[1:]) if single else logits
