"""Test-time sampling, confidence maps and continuous Dice scoring."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .nets import ArchConfig, ModelTriple, ParamSet, segnet_forward
from .synthetic import AnnotatedSample
from .trainer import BaselineNet


class InputError(ValueError):
    pass


class ModelStateError(RuntimeError):
    pass


@dataclass
class ConfidenceMap:
    values: np.ndarray   # [1,H,W] in [0,1]
    M: int


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_params(params: ParamSet, what: str):
    for name in params:
        if not np.isfinite(params.raw(name).data).all():
            raise ModelStateError(f"{what}: parameter {name} is not finite")


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    return x[None] if x.ndim == 3 else x


def sample_segmentations(segnet: ParamSet, arch: ArchConfig, x, M: int = 7, seed=0) -> list[np.ndarray]:
    """M soft segmentations sigmoid(Seg(x, z)) with z drawn from N(0, I).

    Touches only the segmentation network.
    """
    if M < 1:
        raise InputError(f"M must be >= 1, got {M}")
    _check_params(segnet, "segnet")
    xb = _as_batch(x)
    if xb.shape[0] != 1:
        raise InputError("sample_segmentations takes a single image")
    z = np.random.default_rng(seed).standard_normal((M, arch.latent_dim)).astype(np.float32)
    logits = segnet_forward(Tape(), segnet, arch, np.repeat(xb, M, axis=0), z)
    return list(_sigmoid(logits.data))


def baseline_predictions(net: BaselineNet, x, passes: int = 1, seed=0) -> list[np.ndarray]:
    """Soft maps from a latent-free net; ``passes`` stochastic passes when it has dropout."""
    _check_params(net.params, "baseline")
    xb = _as_batch(x)
    n = passes if net.dropout > 0 else 1
    rng = np.random.default_rng(seed)
    logits = segnet_forward(Tape(), net.params, net.arch, np.repeat(xb, n, axis=0), None,
                            dropout=net.dropout, rng=rng)
    return list(_sigmoid(logits.data))


def confidence_map(maps: Sequence[np.ndarray]) -> ConfidenceMap:
    if len(maps) == 0:
        raise InputError("confidence_map needs at least one map")
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in maps])
    return ConfidenceMap(stack.mean(axis=0), len(maps))


def continuous_dice(a, b) -> float:
    """2 sum(a*b) / (sum(a) + sum(b)); two empty maps score 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"continuous_dice: shapes {a.shape} and {b.shape} differ")
    for m in (a, b):
        if m.size and (m.min() < 0 or m.max() > 1 or np.isnan(m).any()):
            raise InputError("continuous_dice: values must lie in [0,1]")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (a * b).sum() / denom)


def disagreement_map(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Pixelwise population variance across maps."""
    if len(maps) < 2:
        raise InputError("disagreement_map needs at least two maps")
    return np.stack([np.asarray(m, dtype=np.float64) for m in maps]).var(axis=0)


def predict_maps(model, x, M: int = 7, seed=0) -> list[np.ndarray]:
    """The soft maps that get averaged into a confidence map for any model kind.

    ModelTriple: M prior samples. List of BaselineNets: one map per net.
    BaselineNet with dropout: M stochastic passes.
    """
    if isinstance(model, ModelTriple):
        return sample_segmentations(model.segnet, model.arch, x, M, seed)
    if isinstance(model, BaselineNet):
        return baseline_predictions(model, x, M, seed)
    if isinstance(model, (list, tuple)) and model and all(isinstance(m, BaselineNet) for m in model):
        return [baseline_predictions(m, x)[0] for m in model]
    raise TypeError(f"don't know how to predict with {type(model).__name__}")


@dataclass
class EvalResult:
    scores: list[tuple[str, float]]

    @property
    def mean(self) -> float:
        return float(np.mean([s for _, s in self.scores]))

    @property
    def std(self) -> float:
        return float(np.std([s for _, s in self.scores]))

    def table(self) -> str:
        lines = ["sample_id\tscore"]
        lines += [f"{sid}\t{score:.6f}" for sid, score in self.scores]
        lines.append(f"mean_dice={self.mean:.6f} std={self.std:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_model(model, samples: Sequence[AnnotatedSample], M: int = 7, seed=0) -> EvalResult:
    """Continuous Dice between each confidence map and the rater average."""
    if not samples:
        raise InputError("evaluation split is empty")
    seeds = np.random.SeedSequence(seed).spawn(len(samples))
    scores = []
    for sample, ss in zip(samples, seeds):
        conf = confidence_map(predict_maps(model, sample.image, M, ss))
        scores.append((sample.sample_id, continuous_dice(conf.values, sample.rater_mean())))
    return EvalResult(scores)


def uncertainty_correlation(model: ModelTriple, samples: Sequence[AnnotatedSample],
                            M: int = 32, seed=0) -> float:
    """Pearson r between sampled-prediction variance and rater variance over all pixels."""
    seeds = np.random.SeedSequence(seed).spawn(len(samples))
    pred, rater = [], []
    for sample, ss in zip(samples, seeds):
        pred.append(disagreement_map(sample_segmentations(model.segnet, model.arch, sample.image, M, ss)).ravel())
        rater.append(disagreement_map(list(sample.masks.astype(np.float64))).ravel())
    return float(np.corrcoef(np.concatenate(pred), np.concatenate(rater))[0, 1])
