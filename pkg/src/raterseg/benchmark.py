"""The desk-scale synthetic benchmark: joint latent model vs two baselines.

The dataset follows the default manifest (34/5/10 split, seven raters, seed 0,
threshold spread 0.15) at 32x32 pixels so that every method trains in a few
minutes on one CPU core.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

from .evaluation import evaluate_model, uncertainty_correlation
from .nets import ArchConfig, init_params
from .synthetic import DatasetManifest, generate_dataset
from .trainer import TrainConfig, train_independent_baseline, train_joint, train_mc_dropout_baseline

BENCHMARK_MANIFEST = DatasetManifest(height=32, width=32, blur_sigma=1.0)
BENCHMARK_ARCH = ArchConfig(height=32, width=32, base_width=4)
METHODS = ("joint", "independent", "dropout")


@dataclass
class BenchmarkResult:
    seeds: list[int]
    dice: dict[str, list[float]] = field(default_factory=lambda: {m: [] for m in METHODS})
    seconds: dict[str, float] = field(default_factory=lambda: {m: 0.0 for m in METHODS})
    models: dict[tuple[str, int], object] = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    def mean(self, method: str) -> float:
        return sum(self.dice[method]) / len(self.dice[method])

    def joint_wins_every_seed(self) -> bool:
        return all(j > max(i, d) for j, i, d in zip(*(self.dice[m] for m in METHODS)))


def run_benchmark(seeds=(0, 1, 2), epochs: int = 200, manifest: DatasetManifest = BENCHMARK_MANIFEST,
                  arch: ArchConfig = BENCHMARK_ARCH, samples: int = 7, log=None) -> BenchmarkResult:
    """Train every method once per seed and score it on the validation split."""
    data = generate_dataset(manifest)
    result = BenchmarkResult(list(seeds), data=data)
    for seed in seeds:
        cfg = TrainConfig(epochs=epochs, seed=seed)
        trainers = {
            "joint": lambda: train_joint(init_params(arch, seed), data["train"], cfg)[0],
            "independent": lambda: train_independent_baseline(data["train"], manifest.num_raters, cfg, arch)[0],
            "dropout": lambda: train_mc_dropout_baseline(data["train"], cfg, arch)[0],
        }
        for method, train in trainers.items():
            start = time.perf_counter()
            model = train()
            score = evaluate_model(model, data["val"], samples, seed).mean
            result.seconds[method] += time.perf_counter() - start
            result.dice[method].append(score)
            result.models[(method, seed)] = model
            if log:
                log(f"seed {seed} {method}: dice {score:.4f}")
    return result


def localisation_r(result: BenchmarkResult, seed: int = 0, M: int = 32) -> float:
    """Pearson r between the joint model's sample variance and rater variance on validation."""
    return uncertainty_correlation(result.models[("joint", seed)], result.data["val"], M, seed)
