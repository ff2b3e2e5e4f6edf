"""Loss terms of the conditional ELBO and an exact discrete check of its derivation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, as_tensor


class InputError(ValueError):
    pass


class DegenerateQueryError(ValueError):
    pass


@dataclass
class LatentPosterior:
    mu: Tensor
    log_sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise InputError(f"mu {self.mu.shape} and log_sigma {self.log_sigma.shape} differ")

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)


@dataclass
class LatentSample:
    z: Tensor
    epsilon: Tensor


@dataclass(frozen=True)
class LossWeights:
    seg: float = 1.0
    rec: float = 1.0
    kl: float = 1.0

    def __post_init__(self):
        for v in (self.seg, self.rec, self.kl):
            if not np.isfinite(v) or v < 0:
                raise InputError(f"loss weights must be finite and >= 0, got {self}")


def reparameterize(tape: Tape, post: LatentPosterior, epsilon) -> LatentSample:
    """z = mu + exp(log_sigma) * epsilon, differentiable in mu and log_sigma."""
    eps = as_tensor(epsilon, dtype=post.mu.dtype)
    if eps.shape != post.mu.shape:
        raise InputError(f"epsilon shape {eps.shape} != latent shape {post.mu.shape}")
    z = tape.add(post.mu, tape.mul(tape.exp(post.log_sigma), eps))
    return LatentSample(z, eps)


def kl_gaussian_standard(tape: Tape, post: LatentPosterior) -> Tensor:
    """KL[N(mu, sigma^2) || N(0, I)] = 1/2 sum(mu^2 + sigma^2 - log sigma^2 - 1).

    Summed over the latent axis and averaged over a leading batch axis, if any.
    """
    mu, ls = post.mu, post.log_sigma
    sigma2 = tape.exp(tape.scale(ls, 2.0))
    per = tape.sub(tape.add(tape.mul(mu, mu), sigma2), tape.scale(ls, 2.0))
    total = tape.scale(tape.sum(per), 0.5)
    batch = mu.shape[0] if len(mu.shape) == 2 else 1
    n = mu.shape[-1]
    # the -1 per dimension is a constant; added after the reduction
    return tape.add(tape.scale(total, 1.0 / batch), Tensor(-0.5 * n, dtype=mu.dtype))


def recon_loss(tape: Tape, x, x_hat: Tensor, batched: bool = False) -> Tensor:
    """1/2 ||x - x_hat||^2 (per sample; averaged over the batch when ``batched``)."""
    x = as_tensor(x, dtype=x_hat.dtype)
    if x.shape != x_hat.shape:
        raise InputError(f"recon_loss: shapes {x.shape} and {x_hat.shape} differ")
    d = tape.sub(x_hat, x)
    total = tape.scale(tape.sum(tape.mul(d, d)), 0.5)
    return tape.scale(total, 1.0 / x.shape[0]) if batched else total


def seg_ce_loss(tape: Tape, logits: Tensor, s, soft_targets: bool = False) -> Tensor:
    """Mean per-pixel binary cross-entropy of sigmoid(logits) against s.

    Written as softplus(l) - l*s, which stays finite for huge |l|.
    ``soft_targets`` admits targets anywhere in [0,1] (e.g. rater averages).
    """
    s = as_tensor(s, dtype=logits.dtype)
    if s.shape != logits.shape:
        raise InputError(f"seg_ce_loss: logits {logits.shape} and target {s.shape} differ")
    if soft_targets:
        if ((s.data < 0) | (s.data > 1)).any():
            raise InputError("seg_ce_loss: target values must lie in [0,1]")
    elif not np.isin(s.data, (0, 1)).all():
        raise InputError("seg_ce_loss: target mask must be binary")
    return tape.mean(tape.sub(tape.softplus(logits), tape.mul(logits, s)))


@dataclass
class LossBreakdown:
    ce: float
    rec: float
    kl: float
    total: float


def total_loss(tape: Tape, logits: Tensor, s, x_hat: Tensor, x, post: LatentPosterior,
               weights: LossWeights = LossWeights(),
               soft_targets: bool = False) -> tuple[Tensor, LossBreakdown]:
    """Negative ELBO surrogate: w_seg*CE + w_rec*L_rec + w_kl*KL."""
    batched = len(x_hat.shape) == 4
    ce = seg_ce_loss(tape, logits, s, soft_targets)
    rec = recon_loss(tape, x, x_hat, batched=batched)
    kl = kl_gaussian_standard(tape, post)
    total = tape.add(tape.add(tape.scale(ce, weights.seg), tape.scale(rec, weights.rec)),
                     tape.scale(kl, weights.kl))
    return total, LossBreakdown(ce.item(), rec.item(), kl.item(), total.item())


# -- exact discrete oracle ---------------------------------------------------

@dataclass
class DiscreteJoint:
    """p[x, s, z] joint table and q[x, s, z] = q(z | x, s)."""
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.p.ndim != 3 or self.q.shape != self.p.shape:
            raise InputError(f"p {self.p.shape} and q {self.q.shape} must be equal 3-d tables")
        if (self.p < 0).any() or (self.q < 0).any():
            raise InputError("probabilities must be non-negative")
        if abs(self.p.sum() - 1) > 1e-9:
            raise InputError(f"p sums to {self.p.sum()}, not 1")
        if np.abs(self.q.sum(axis=2) - 1).max() > 1e-9:
            raise InputError("each q(.|x,s) must sum to 1")

    @classmethod
    def random(cls, rng, nx=2, ns=3, nz=4) -> "DiscreteJoint":
        p = rng.random((nx, ns, nz)) + 1e-3
        q = rng.random((nx, ns, nz)) + 1e-3
        return cls(p / p.sum(), q / q.sum(axis=2, keepdims=True))

    def true_posterior(self) -> np.ndarray:
        """p(z | x, s)."""
        return self.p / self.p.sum(axis=2, keepdims=True)


def _expect(q, values):
    # E_q[values], with 0 * log 0 taken as 0
    mask = q > 0
    return float(np.sum(q[mask] * values[mask]))


def discrete_elbo_decomposition(dj: DiscreteJoint, x: int, s: int) -> dict[str, float]:
    """Every term of the log p(s|x) decomposition by exact summation over z."""
    p = dj.p
    p_xs = p[x, s].sum()
    if p_xs <= 0:
        raise DegenerateQueryError(f"p(x={x}, s={s}) = 0")
    p_x = p[x].sum()
    p_z = p.sum(axis=(0, 1))                 # p(z)
    p_xz = p[x].sum(axis=0)                  # p(x, z)
    p_s_given_xz = p[x, s] / p_xz            # p(s | x, z)
    p_x_given_z = p_xz / p_z                 # p(x | z)
    post = p[x, s] / p_xs                    # p(z | x, s)
    q = dj.q[x, s]
    with np.errstate(divide="ignore"):
        terms = {
            "lhs": float(np.log(p_xs / p_x)),
            "kl_posterior": _expect(q, np.log(q) - np.log(post)),
            "neg_log_px": float(-np.log(p_x)),
            "e_log_s_given_xz": _expect(q, np.log(p_s_given_xz)),
            "e_log_x_given_z": _expect(q, np.log(p_x_given_z)),
            "kl_prior": _expect(q, np.log(q) - np.log(p_z)),
        }
    terms["elbo"] = terms["e_log_s_given_xz"] + terms["e_log_x_given_z"] - terms["kl_prior"]
    terms["gap"] = terms["kl_posterior"] + terms["neg_log_px"]
    terms["residual"] = terms["lhs"] - (terms["gap"] + terms["elbo"])
    return terms


def bayes_identity_residual(dj: DiscreteJoint) -> float:
    """max |p(z|x,s) p(s|x) - p(s|x,z) p(z|x)| over all cells."""
    p = dj.p
    p_x = p.sum(axis=(1, 2))[:, None, None]
    p_xz = p.sum(axis=1, keepdims=True)
    lhs = dj.true_posterior() * (p.sum(axis=2, keepdims=True) / p_x)
    rhs = (p / p_xz) * (p_xz / p_x)
    return float(np.abs(lhs - rhs).max())
