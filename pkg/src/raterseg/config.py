"""Run configuration: one flat key=value namespace shared by every command."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .nets import ArchConfig
from .objective import LossWeights
from .synthetic import DatasetManifest
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


# key -> (type, default)
SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    # dataset
    "n_train": (int, 34), "n_val": (int, 5), "n_test": (int, 10), "num_raters": (int, 7),
    "height": (int, 64), "width": (int, 64), "blur_sigma": (float, 2.0),
    "noise_level": (float, 0.05), "threshold_spread": (float, 0.15), "max_radius": (int, 1),
    # architecture
    "base_width": (int, 16), "depth": (int, 2), "latent_dim": (int, 6),
    # training
    "method": (str, "joint"), "epochs": (int, 200), "batch_size": (int, 4), "lr": (float, 1e-3),
    "beta1": (float, 0.9), "beta2": (float, 0.999), "dropout": (float, 0.5),
    "train_samples": (int, 1), "target": (str, "single"),
    "w_seg": (float, 1.0), "w_rec": (float, 1.0), "w_kl": (float, 1.0),
    # evaluation
    "samples": (int, 7), "split": (str, "val"),
}

METHODS = ("joint", "independent", "dropout")


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def set(self, key: str, raw) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        kind = SCHEMA[key][0]
        try:
            value = kind(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None
        if key == "method" and value not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}")
        self.values[key] = value

    def update_from_file(self, path) -> None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            self.set(key.strip(), raw.strip())

    def manifest(self) -> DatasetManifest:
        v = self.values
        return DatasetManifest(v["n_train"], v["n_val"], v["n_test"], v["num_raters"], v["height"],
                               v["width"], v["seed"], v["blur_sigma"], v["noise_level"],
                               v["threshold_spread"], v["max_radius"])

    def arch(self, manifest: DatasetManifest) -> ArchConfig:
        v = self.values
        return ArchConfig(manifest.height, manifest.width, 1, v["base_width"], v["depth"], v["latent_dim"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(epochs=v["epochs"], batch_size=v["batch_size"], seed=v["seed"],
                           weights=LossWeights(v["w_seg"], v["w_rec"], v["w_kl"]), lr=v["lr"],
                           beta1=v["beta1"], beta2=v["beta2"], dropout=v["dropout"],
                           train_samples=v["train_samples"], target=v["target"])
