"""Built-in gradient checks and the discrete ELBO oracle, for ``raterseg selftest``."""
from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor, finite_diff_check
from .nets import ArchConfig, decoder_forward, encoder_forward, init_params, segnet_forward
from .objective import (DiscreteJoint, LatentPosterior, discrete_elbo_decomposition, reparameterize,
                        total_loss)

GRAD_TOL = 1e-4
ELBO_TOL = 1e-10


def _leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def op_cases(rng) -> dict:
    """One scalar-valued probe per op kind, inputs in [-1, 1]."""
    u = lambda *s: _leaf(rng.uniform(-1, 1, s))  # noqa: E731
    return {
        "add": (lambda t, a, b: t.sum(t.mul(t.add(a, b), t.add(a, b))), [u(3, 4), u(4)]),
        "sub": (lambda t, a, b: t.sum(t.mul(t.sub(a, b), a)), [u(3, 4), u(3, 4)]),
        "mul": (lambda t, a, b: t.sum(t.mul(a, b)), [u(2, 3), u(3)]),
        "scale": (lambda t, a: t.sum(t.mul(t.scale(a, 1.7), a)), [u(4)]),
        "matmul": (lambda t, a, b: t.sum(t.sigmoid(t.matmul(a, b))), [u(3, 4), u(4, 2)]),
        "conv2d": (lambda t, x, w, b: t.sum(t.sigmoid(t.conv2d(x, w, b, stride=2, padding=1))),
                   [u(1, 2, 5, 5), u(3, 2, 3, 3), u(3)]),
        "relu": (lambda t, a: t.sum(t.mul(t.relu(a), a)), [u(8)]),
        "sigmoid": (lambda t, a: t.sum(t.sigmoid(a)), [u(5)]),
        "softplus": (lambda t, a: t.sum(t.softplus(a)), [u(5)]),
        "exp": (lambda t, a: t.sum(t.exp(a)), [u(5)]),
        "log": (lambda t, a: t.sum(t.log(t.add(t.mul(a, a), 1.0))), [u(5)]),
        "sum": (lambda t, a: t.sum(t.exp(t.sum(a, axis=0))), [u(3, 2)]),
        "mean": (lambda t, a: t.sum(t.exp(t.mean(a, axis=1))), [u(3, 2)]),
        "concat": (lambda t, a, b: t.sum(t.exp(t.concat([a, b], axis=0))), [u(2, 2), u(1, 2)]),
        "slice": (lambda t, a: t.sum(t.exp(t.slice(a, (slice(1, 3),)))), [u(4, 2)]),
        "broadcast": (lambda t, a: t.sum(t.exp(t.broadcast(a, (3, 2, 2)))), [u(2, 1)]),
        "reshape": (lambda t, a: t.sum(t.exp(t.reshape(a, (2, 3)))), [u(3, 2)]),
    }


def composed_loss_error(seed: int = 0, eps: float = 1e-5) -> float:
    """Gradient check of the full training loss on an 8x8 input with base width 4."""
    arch = ArchConfig(height=8, width=8, base_width=4, depth=1, latent_dim=6)
    model = init_params(arch, seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # nonzero heads so every path carries gradient
    enc = model.encoder.replace({
        "enc.mu.w": rng.normal(0, 0.3, model.encoder.raw("enc.mu.w").shape),
        "enc.log_sigma.w": rng.normal(0, 0.3, model.encoder.raw("enc.log_sigma.w").shape),
    })
    x = rng.random((1, 8, 8))
    s = (rng.random((1, 8, 8)) > 0.5).astype(np.float64)
    noise = rng.standard_normal(6)
    names = {part: list(ps) for part, ps in (("enc", enc), ("dec", model.decoder), ("seg", model.segnet))}
    leaves = [enc.raw(n) for n in names["enc"]] + [model.decoder.raw(n) for n in names["dec"]] + \
             [model.segnet.raw(n) for n in names["seg"]]
    counts = [len(names["enc"]), len(names["dec"]), len(names["seg"])]

    def loss(tape, *params):
        e = dict(zip(names["enc"], params[:counts[0]]))
        d = dict(zip(names["dec"], params[counts[0]:counts[0] + counts[1]]))
        g = dict(zip(names["seg"], params[counts[0] + counts[1]:]))
        mu, log_sigma = encoder_forward(tape, e, arch, x, s)
        post = LatentPosterior(mu, log_sigma)
        z = reparameterize(tape, post, noise).z
        x_hat = decoder_forward(tape, d, arch, z)
        logits = segnet_forward(tape, g, arch, x, z)
        return total_loss(tape, logits, s, x_hat, x, post)[0]

    return finite_diff_check(loss, leaves, eps)


def elbo_oracle(instances: int = 100, seed: int = 0) -> tuple[float, float]:
    """(max |identity residual|, min gap) over random 2x3x4 joints and all queries."""
    rng = np.random.default_rng(seed)
    worst, min_gap = 0.0, np.inf
    for _ in range(instances):
        dj = DiscreteJoint.random(rng, 2, 3, 4)
        for x in range(2):
            for s in range(3):
                terms = discrete_elbo_decomposition(dj, x, s)
                worst = max(worst, abs(terms["residual"]))
                min_gap = min(min_gap, terms["gap"])
    return worst, min_gap


def run() -> list[tuple[str, bool, str]]:
    results = []
    for kind, (fn, params) in op_cases(np.random.default_rng(0)).items():
        err = finite_diff_check(fn, params, 1e-6)
        results.append((f"grad {kind}", err < GRAD_TOL, f"max_rel_err={err:.2e}"))
    err = composed_loss_error()
    results.append(("grad training loss", err < GRAD_TOL, f"max_rel_err={err:.2e}"))
    worst, gap = elbo_oracle()
    results.append(("elbo identity", worst < ELBO_TOL, f"max_residual={worst:.2e}"))
    results.append(("elbo bound", gap >= -1e-12, f"min_gap={gap:.3e}"))
    return results
