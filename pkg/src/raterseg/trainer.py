"""Training loops for the latent-variable model and the two baselines, plus checkpoints."""
from __future__ import annotations

import dataclasses
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import vstn
from .autodiff import Tape, Tensor
from .nets import (ArchConfig, ModelTriple, ParamSet, decoder_forward, encoder_forward,
                   init_standalone_segnet, segnet_forward)
from .objective import LatentPosterior, LossWeights, reparameterize, seg_ce_loss, total_loss
from .synthetic import AnnotatedSample

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised when a loss term or parameter stops being finite."""


class ContractError(ValueError):
    pass


# -- optimizer -------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamSet, grads: dict, state: OptimState, prefix: str = "") -> ParamSet:
    """One bias-corrected Adam update. ``grads`` maps name -> array.

    Names missing from ``grads`` are left untouched. Moment buffers are keyed
    by ``prefix + name`` so one state can serve several parameter sets; the
    caller advances ``state.step`` once per iteration via :func:`adam_tick`.
    """
    t = max(state.step, 1)
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    updates = {}
    for name, g in grads.items():
        p = params.raw(name).data
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        key = prefix + name
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_hat)
        updates[name] = (p - step).astype(p.dtype)
    return params.replace(updates)


def adam_tick(state: OptimState) -> None:
    state.step += 1


# -- configuration ---------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    seed: int = 0
    weights: LossWeights = LossWeights()
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    dropout: float = 0.5
    train_samples: int = 1
    target: str = "single"     # "single": one random rater per step; "average": rater mean

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.train_samples < 1:
            raise ContractError("epochs, batch_size and train_samples must be positive")
        if not self.lr > 0:
            raise ContractError("lr must be positive")
        if self.target not in ("single", "average"):
            raise ContractError(f"unknown target mode {self.target!r}")

    def optimizer(self) -> OptimState:
        return OptimState(lr=self.lr, beta1=self.beta1, beta2=self.beta2)


@dataclass
class BaselineNet:
    """Latent-free segmentation network; ``dropout`` > 0 stays active at test time."""
    params: ParamSet
    arch: ArchConfig
    dropout: float = 0.0


# -- helpers -----------------------------------------------------------------

def _stack(samples: Sequence[AnnotatedSample], idx, raters):
    x = np.stack([samples[i].image for i in idx])
    s = np.stack([samples[i].masks[k] for i, k in zip(idx, raters)]).astype(x.dtype)
    return x, s


def _check_dataset(samples, need_raters=1):
    if not samples:
        raise ContractError("dataset is empty")
    if min(s.num_raters for s in samples) < need_raters:
        raise ContractError(f"every sample needs at least {need_raters} masks")


def _check_finite_params(*sets: ParamSet, epoch: int):
    for ps in sets:
        for name in ps:
            if not np.isfinite(ps.raw(name).data).all():
                raise TrainingAborted(f"epoch {epoch}: parameter {name} is not finite")


def _grads_by_name(params: ParamSet, grads) -> dict:
    return {name: grads[params.raw(name)] for name in params if params.raw(name) in grads}


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _abort_if_nan(epoch, step, **terms):
    for name, value in terms.items():
        if not np.isfinite(value):
            raise TrainingAborted(f"epoch {epoch} step {step}: loss term {name} is {value}")


# -- joint latent-variable model -----------------------------------------------

def train_joint(model: ModelTriple, samples: Sequence[AnnotatedSample], cfg: TrainConfig,
                callback=None) -> tuple[ModelTriple, list[dict]]:
    """Minimise w_seg*CE + w_rec*L_rec + w_kl*KL over the dataset.

    Each step picks one rater per sample, encodes (x, s_k), draws
    z = mu + sigma*eps, reconstructs x from z and segments x given z.
    """
    _check_dataset(samples)
    rng = np.random.default_rng(cfg.seed)
    state = cfg.optimizer()
    arch = model.arch
    enc, dec, seg = model.encoder, model.decoder, model.segnet
    history = []
    for epoch in range(cfg.epochs):
        sums = np.zeros(4)
        n_steps = 0
        for step, idx in enumerate(_batches(rng, len(samples), cfg.batch_size)):
            raters = [rng.integers(samples[i].num_raters) for i in idx]
            x, s = _stack(samples, idx, raters)
            target = s
            if cfg.target == "average":
                target = np.stack([samples[i].rater_mean() for i in idx])
            for _ in range(cfg.train_samples):
                eps = rng.standard_normal((len(idx), arch.latent_dim)).astype(x.dtype)
                tape = Tape()
                mu, log_sigma = encoder_forward(tape, enc, arch, x, s)
                post = LatentPosterior(mu, log_sigma)
                z = reparameterize(tape, post, eps).z
                x_hat = decoder_forward(tape, dec, arch, z)
                logits = segnet_forward(tape, seg, arch, x, z)
                loss, parts = total_loss(tape, logits, target, x_hat, x, post, cfg.weights,
                                         soft_targets=cfg.target == "average")
                _abort_if_nan(epoch, step, ce=parts.ce, rec=parts.rec, kl=parts.kl)
                grads = tape.backward(loss)
                adam_tick(state)
                enc = adam_step(enc, _grads_by_name(enc, grads), state, "enc/")
                dec = adam_step(dec, _grads_by_name(dec, grads), state, "dec/")
                seg = adam_step(seg, _grads_by_name(seg, grads), state, "seg/")
                sums += (parts.ce, parts.rec, parts.kl, parts.total)
                n_steps += 1
        _check_finite_params(enc, dec, seg, epoch=epoch)
        ce, rec, kl, total = sums / n_steps
        history.append({"epoch": epoch, "ce": ce, "rec": rec, "kl": kl, "total": total})
        log.debug("joint epoch %d ce=%.4f rec=%.4f kl=%.4f", epoch, ce, rec, kl)
        if callback is not None:
            callback(epoch, ModelTriple(enc, dec, seg, arch))
    return ModelTriple(enc, dec, seg, arch), history


# -- baselines ---------------------------------------------------------------

def _train_segnet(net: BaselineNet, samples, cfg: TrainConfig, rater_of, rng) -> tuple[BaselineNet, list]:
    state = cfg.optimizer()
    params = net.params
    history = []
    for epoch in range(cfg.epochs):
        total, n_steps = 0.0, 0
        for step, idx in enumerate(_batches(rng, len(samples), cfg.batch_size)):
            x, s = _stack(samples, idx, [rater_of(i) for i in idx])
            tape = Tape()
            logits = segnet_forward(tape, params, net.arch, x, None, dropout=net.dropout, rng=rng)
            loss = seg_ce_loss(tape, logits, s)
            ce = loss.item()
            _abort_if_nan(epoch, step, ce=ce)
            grads = tape.backward(loss)
            adam_tick(state)
            params = adam_step(params, _grads_by_name(params, grads), state)
            total += ce
            n_steps += 1
        _check_finite_params(params, epoch=epoch)
        ce = total / n_steps
        history.append({"epoch": epoch, "ce": ce, "rec": 0.0, "kl": 0.0, "total": ce})
    return dataclasses.replace(net, params=params), history


def train_independent_baseline(samples: Sequence[AnnotatedSample], K: int, cfg: TrainConfig,
                               arch: ArchConfig) -> tuple[list[BaselineNet], list[list[dict]]]:
    """K deterministic nets; net k only ever sees rater k's masks."""
    _check_dataset(samples, K)
    seeds = np.random.SeedSequence(cfg.seed).spawn(K)
    nets, logs = [], []
    for k in range(K):
        init_seed, train_seed = seeds[k].generate_state(2)
        net = BaselineNet(init_standalone_segnet(arch, int(init_seed)), arch, 0.0)
        net, history = _train_segnet(net, samples, cfg, lambda i, k=k: k,
                                     np.random.default_rng(int(train_seed)))
        nets.append(net)
        logs.append(history)
    return nets, logs


def train_mc_dropout_baseline(samples: Sequence[AnnotatedSample], cfg: TrainConfig,
                              arch: ArchConfig) -> tuple[BaselineNet, list[dict]]:
    """One net with dropout at train and test time, on randomly paired (x, s_k)."""
    _check_dataset(samples)
    if not 0 < cfg.dropout < 1:
        raise ContractError(f"dropout rate must lie in (0,1), got {cfg.dropout}")
    init_seed, train_seed = np.random.SeedSequence(cfg.seed).generate_state(2)
    rng = np.random.default_rng(int(train_seed))
    net = BaselineNet(init_standalone_segnet(arch, int(init_seed)), arch, cfg.dropout)
    return _train_segnet(net, samples, cfg, lambda i: rng.integers(samples[i].num_raters), rng)


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"VSCK"
CKPT_VERSION = 1


def _param_sets(model) -> tuple[dict, dict]:
    if isinstance(model, ModelTriple):
        meta = {"kind": "joint"}
        sets = {"encoder": model.encoder, "decoder": model.decoder, "segnet": model.segnet}
    elif isinstance(model, BaselineNet):
        meta = {"kind": "baseline", "dropout": repr(float(model.dropout))}
        sets = {"segnet": model.params}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    meta.update({k: str(v) for k, v in model.arch.to_dict().items()})
    return meta, sets


def save_checkpoint(model, path) -> None:
    meta, sets = _param_sets(model)
    text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<B", CKPT_VERSION), struct.pack("<I", len(text)), text]
    named = [(f"{set_name}/{name}", ps.raw(name).data) for set_name, ps in sets.items() for name in ps]
    chunks.append(struct.pack("<I", len(named)))
    for name, arr in named:
        raw = name.encode("utf-8")
        chunks += [struct.pack("<H", len(raw)), raw, vstn.encode(np.asarray(arr, dtype=np.float32))]
    body = b"".join(chunks)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    fail = lambda why: vstn.FormatError(f"{path}: {why}")  # noqa: E731
    if buf[:4] != CKPT_MAGIC:
        raise fail("not a checkpoint (bad magic)")
    if len(buf) > 4 and buf[4] != CKPT_VERSION:
        raise fail(f"unsupported checkpoint version {buf[4]}")
    if len(buf) < 9 or struct.unpack_from("<I", buf, len(buf) - 4)[0] != zlib.crc32(buf[:-4]):
        raise fail("checksum mismatch (truncated or corrupted)")
    buf = buf[:-4]
    try:
        (version,) = struct.unpack_from("<B", buf, 4)
        if version != CKPT_VERSION:
            raise fail(f"unsupported checkpoint version {version}")
        (tlen,) = struct.unpack_from("<I", buf, 5)
        off = 9 + tlen
        if off > len(buf):
            raise fail("truncated header")
        meta = dict(line.split("=", 1) for line in buf[9:off].decode("utf-8").splitlines() if line)
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        sets: dict[str, dict] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2:off + 2 + nlen].decode("utf-8")
            off += 2 + nlen
            arr, used = vstn.decode(buf[off:], f"{path}:{name}")
            off += used
            set_name, _, pname = name.partition("/")
            sets.setdefault(set_name, {})[pname] = Tensor(arr, requires_grad=True)
        arch = ArchConfig.from_dict(meta)
    except (struct.error, UnicodeDecodeError, ValueError, KeyError) as exc:
        if isinstance(exc, vstn.FormatError):
            raise
        raise fail(f"corrupt checkpoint ({exc})") from exc
    if off != len(buf):
        raise fail("trailing bytes")
    kind = meta.get("kind")
    try:
        if kind == "joint":
            return ModelTriple(ParamSet(sets["encoder"]), ParamSet(sets["decoder"]),
                               ParamSet(sets["segnet"]), arch)
        if kind == "baseline":
            return BaselineNet(ParamSet(sets["segnet"]), arch, float(meta["dropout"]))
    except KeyError as exc:
        raise fail(f"missing parameter set {exc}") from exc
    raise fail(f"unknown model kind {kind!r}")
