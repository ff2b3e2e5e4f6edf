"""Acceptance criteria, one test per criterion.

Each test appends a PASS/FAIL line to the summary printed at the end of the
pytest run, then asserts. Criterion 1 and 8 share one benchmark run (about
ten minutes on one core).
"""
import filecmp
import hashlib
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import norm

from raterseg import selftest
from raterseg.autodiff import Tape, Tensor, finite_diff_check
from raterseg.benchmark import METHODS, localisation_r, run_benchmark
from raterseg.evaluation import continuous_dice, evaluate_model
from raterseg.nets import ModelTriple, ParamSet
from raterseg.objective import LatentPosterior, kl_gaussian_standard, reparameterize
from raterseg.synthetic import DatasetManifest, generate_dataset, read_dataset, write_dataset
from raterseg.trainer import load_checkpoint, save_checkpoint

from .conftest import ACCEPTANCE_LINES


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def benchmark():
    return run_benchmark(seeds=(0, 1, 2), log=print)


# 1 -------------------------------------------------------------------------------

def test_c1_joint_model_beats_baselines(benchmark):
    means = {m: benchmark.mean(m) for m in METHODS}
    per_seed = " ".join(f"{m}={[round(d, 4) for d in benchmark.dice[m]]}" for m in METHODS)
    minutes = {m: benchmark.seconds[m] / 60 for m in METHODS}
    beats = means["joint"] > means["independent"] and means["joint"] > means["dropout"]
    stable = benchmark.joint_wins_every_seed()
    in_budget = all(v < 10 for v in minutes.values())
    detail = (f"mean dice joint={means['joint']:.4f} independent={means['independent']:.4f} "
              f"dropout={means['dropout']:.4f}; per seed {per_seed}; ordering stable={stable}; "
              "minutes " + " ".join(f"{m}={v:.1f}" for m, v in minutes.items()))
    report(1, beats and stable and in_budget, detail)


# 2 -------------------------------------------------------------------------------

def test_c2_elbo_identity_oracle():
    worst, gap = selftest.elbo_oracle(instances=100, seed=0)
    report(2, worst < 1e-10 and gap >= -1e-12, f"max residual={worst:.2e} min remainder={gap:.3e}")


# 3 -------------------------------------------------------------------------------

def test_c3_gradient_checks():
    start = time.perf_counter()
    errors = {kind: finite_diff_check(fn, params, 1e-6)
              for kind, (fn, params) in selftest.op_cases(np.random.default_rng(0)).items()}
    errors["training loss"] = selftest.composed_loss_error(seed=0)
    seconds = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = all(e < 1e-4 for e in errors.values()) and seconds < 60
    report(3, ok, f"{len(errors)} checks, worst {worst}={errors[worst]:.2e}, {seconds:.1f} s")


# 4 -------------------------------------------------------------------------------

def _kl(mu, log_sigma):
    post = LatentPosterior(Tensor(np.asarray(mu, np.float64)), Tensor(np.asarray(log_sigma, np.float64)))
    return float(kl_gaussian_standard(Tape(), post).data)


def test_c4_kl_against_monte_carlo():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        mu, log_sigma = rng.normal(0, 1, 6), rng.uniform(-1, 1, 6)
        sigma = np.exp(log_sigma)
        z = mu + sigma * rng.standard_normal((10 ** 6, 6))
        mc = np.mean(np.sum(norm.logpdf(z, mu, sigma) - norm.logpdf(z), axis=1))
        worst = max(worst, abs(_kl(mu, log_sigma) - mc) / abs(mc))
    zero, half = _kl(np.zeros(6), np.zeros(6)), _kl([1.0], [0.0])
    report(4, worst < 0.01 and zero == 0.0 and half == 0.5,
           f"max relative gap={worst:.2e} KL(0,1)={zero!r} KL(N=1,mu=1)={half!r}")


# 5 -------------------------------------------------------------------------------

def test_c5_reparameterization_distribution():
    n = 10 ** 5
    eps = np.random.default_rng(0).standard_normal(n)
    post = LatentPosterior(Tensor(np.ones(n)), Tensor(np.full(n, np.log(2.0))))
    z = reparameterize(Tape(), post, eps).z.data
    mean, var = z.mean(), z.var()
    ok = abs(mean - 1) < 3 * 2 / np.sqrt(n) and abs(var - 4) < 0.05 * 4
    report(5, ok, f"mean={mean:.4f} (tol {3 * 2 / np.sqrt(n):.4f}) var={var:.4f}")


# 6 -------------------------------------------------------------------------------

def test_c6_continuous_dice_suite():
    rng = np.random.default_rng(0)
    a = (rng.random((16, 16)) > 0.5).astype(float)
    checks = {
        "self": continuous_dice(a, a) == 1.0,
        "disjoint": continuous_dice(a, 1 - a) == 0.0,
        "hand": continuous_dice([1, 0], [0.5, 0.5]) == 0.5,
    }
    sym = rng_ok = True
    for _ in range(1000):
        u, v = rng.random((8, 8)), rng.random((8, 8))
        d = continuous_dice(u, v)
        sym &= d == continuous_dice(v, u)
        rng_ok &= 0.0 <= d <= 1.0
    checks["symmetry"], checks["range"] = sym, rng_ok
    report(6, all(checks.values()), " ".join(f"{k}={v}" for k, v in checks.items()))


# 7 -------------------------------------------------------------------------------

def test_c7_test_time_purity(benchmark):
    trained = benchmark.models[("joint", 0)]
    fresh = ModelTriple(*(ParamSet({k: ps.raw(k) for k in ps}) for ps in
                          (trained.encoder, trained.decoder, trained.segnet)), trained.arch)
    evaluate_model(fresh, benchmark.data["val"], 7, 0)
    touched = {name: sorted(getattr(fresh, name).accessed) for name in ("encoder", "decoder", "segnet")}
    ok = not touched["encoder"] and not touched["decoder"] and len(touched["segnet"]) == len(fresh.segnet)
    report(7, ok, f"encoder reads={len(touched['encoder'])} decoder reads={len(touched['decoder'])} "
                  f"segnet reads={len(touched['segnet'])}/{len(fresh.segnet)}")


# 8 -------------------------------------------------------------------------------

def test_c8_uncertainty_localisation(benchmark):
    r = localisation_r(benchmark, seed=0, M=32)
    report(8, r > 0.3, f"pearson r={r:.3f}")


# 9 -------------------------------------------------------------------------------

def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode() + path.read_bytes())
    return h.hexdigest()


def _cli(*args):
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    return subprocess.run([sys.executable, "-m", "raterseg", *args], env=env, capture_output=True,
                          text=True, check=True)


def test_c9_determinism_and_round_trips(tmp_path):
    config = tmp_path / "tiny.cfg"
    config.write_text("n_train=4\nn_val=2\nn_test=1\nheight=16\nwidth=16\nbase_width=4\n", encoding="utf-8")
    checks = {}

    _cli("gen", "--config", str(config), "--seed", "3", "--out", str(tmp_path / "d1"))
    _cli("gen", "--config", str(config), "--seed", "3", "--out", str(tmp_path / "d2"))
    checks["dataset regenerated identically"] = _tree_digest(tmp_path / "d1") == _tree_digest(tmp_path / "d2")

    for run in ("r1", "r2"):
        _cli("train", "--config", str(config), "--seed", "5", "--epochs", "3", "--method", "joint",
             "--data", str(tmp_path / "d1"), "--out", str(tmp_path / run))
    checks["metric log identical"] = filecmp.cmp(tmp_path / "r1" / "metrics.csv", tmp_path / "r2" / "metrics.csv",
                                                 shallow=False)
    checks["checkpoint identical"] = filecmp.cmp(tmp_path / "r1" / "joint.ckpt", tmp_path / "r2" / "joint.ckpt",
                                                 shallow=False)

    model = load_checkpoint(tmp_path / "r1" / "joint.ckpt")
    save_checkpoint(model, tmp_path / "again.ckpt")
    checks["checkpoint round trip"] = (tmp_path / "again.ckpt").read_bytes() == \
        (tmp_path / "r1" / "joint.ckpt").read_bytes()

    manifest = DatasetManifest(n_train=4, n_val=2, n_test=1, height=16, width=16, seed=3)
    data = generate_dataset(manifest)
    write_dataset(manifest, data, tmp_path / "d3")
    loaded_manifest, loaded = read_dataset(tmp_path / "d3")
    checks["dataset round trip"] = loaded_manifest == manifest and all(
        a.sample_id == b.sample_id and a.image.tobytes() == b.image.tobytes() and a.masks.tobytes() == b.masks.tobytes()
        for split in data for a, b in zip(data[split], loaded[split]))
    report(9, all(checks.values()), " ".join(f"[{k}: {v}]" for k, v in checks.items()))
