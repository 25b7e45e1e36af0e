"""Run configuration: JSON file + CLI overrides, mirroring the dataclass field names."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .attacks import AttackConfig
from .data import Dataset, gen_synthetic, load_idx
from .exceptions import ContractError
from .nn import DEFENSES, Model, apply_defense, build_cnn, build_mlp
from .training import TrainConfig

# Desk-scale defaults tuned for the synthetic blobs (see README).
DEFAULTS = {
    "seed": 0,
    "defense": "cni-w",
    "rank": 5,
    "data": {
        "source": "synthetic",
        "classes": 10,
        "dim": 64,
        "per_class": 100,
        "val_per_class": 30,
        "test_per_class": 50,
        "separation": 1.0,
        "std": 0.1,
        "seed": 0,
        "train_images": None,
        "test_images": None,
        "val_fraction": 0.1,
    },
    "model": {"arch": "mlp", "hidden": [64], "channels": [8, 16]},
    "train": {
        "epochs": 30,
        "batch_size": 64,
        "lr": 0.01,
        "momentum": 0.9,
        "lr_milestones": None,
        "weight_decay": 1e-4,
        "v_weight_decay": 1e-3,
        "attack": {"epsilon": 8 / 255, "k": 7, "step": None, "random_start": True, "eot_samples": 1,
                   "input_bounds": [0.0, 1.0]},
        "loss_mix": 0.5,
        "val_draws": 1,
    },
    "attack": {"epsilon": 8 / 255, "k": 7, "step": None, "random_start": True, "eot_samples": 1,
               "input_bounds": [0.0, 1.0]},
    "eval": {"n_noise_draws": 3, "batch_size": 512},
    "blackbox": {"sigma": 0.001, "n_samples": 20, "k": 10, "max_examples": 200},
    "sweep": {"variable": "rank", "values": [0, 2, 5], "repetitions": 3},
}


def parse_epsilon(text) -> float:
    """Accept ``0.0314`` or ``8/255``."""
    if isinstance(text, (int, float)):
        return float(text)
    return float(Fraction(str(text).strip()))


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "ExperimentConfig":
        raw = copy.deepcopy(DEFAULTS)
        if path:
            with open(path) as fh:
                raw = _merge(raw, json.load(fh))
        if overrides:
            raw = _merge(raw, overrides)
        cfg = cls(raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.defense not in DEFENSES:
            raise ContractError(f"unknown defense {self.defense!r}; choose from {DEFENSES}")
        if self.rank < 0:
            raise ContractError("rank must be >= 0")
        self.train_config()
        self.attack_config()

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        cfg = ExperimentConfig(_merge(self.raw, overrides))
        cfg.validate()
        return cfg

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def defense(self) -> str:
        return self.raw["defense"]

    @property
    def rank(self) -> int:
        return int(self.raw["rank"])

    def train_config(self, seed: int | None = None) -> TrainConfig:
        d = copy.deepcopy(self.raw["train"])
        d["seed"] = self.seed if seed is None else seed
        if self.defense == "none":
            d["loss_mix"] = 0.0
        return TrainConfig.from_dict(d)

    def attack_config(self, **changes) -> AttackConfig:
        d = copy.deepcopy(self.raw["attack"])
        d.update(changes)
        return AttackConfig.from_dict(d)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    # -- data and model ----------------------------------------------------
    def datasets(self) -> tuple[Dataset, Dataset, Dataset]:
        """(train, val, test) splits."""
        d = self.raw["data"]
        if d["source"] == "synthetic":
            common = dict(classes=d["classes"], dim=d["dim"], separation=d["separation"], seed=d["seed"], std=d["std"])
            return (
                gen_synthetic(per_class=d["per_class"], split="train", **common),
                gen_synthetic(per_class=d["val_per_class"], split="val", **common),
                gen_synthetic(per_class=d["test_per_class"], split="test", **common),
            )
        if d["source"] == "idx":
            full = load_idx(d["train_images"], split="train")
            test = load_idx(d["test_images"], n_classes=full.n_classes, split="test")
            order = np.random.default_rng(d["seed"]).permutation(len(full))
            n_val = int(round(d["val_fraction"] * len(full)))
            val = full.take(order[:n_val])
            val.split = "val"
            return full.take(order[n_val:]), val, test
        raise ContractError(f"unknown data source {d['source']!r}")

    def build_model(self, input_shape, n_classes: int, seed: int, rank: int | None = None,
                    defense: str | None = None) -> Model:
        m = self.raw["model"]
        defense = defense or self.defense
        rank = self.rank if rank is None else rank
        if m["arch"] == "mlp":
            in_dim = 1
            for s in input_shape:
                in_dim *= s
            model = build_mlp(in_dim, m["hidden"], n_classes, seed=seed)
        elif m["arch"] == "cnn":
            model = build_cnn(tuple(input_shape), n_classes, tuple(m["channels"]), seed=seed)
        else:
            raise ContractError(f"unknown arch {m['arch']!r}")
        return apply_defense(model, defense, rank, seed=seed)

    def estimator(self, seed: int | None = None, rank: int | None = None, defense: str | None = None):
        """A :class:`NoiseInjectedClassifier` carrying this configuration."""
        from .estimator import NoiseInjectedClassifier

        t = self.raw["train"]
        a = t["attack"]
        m = self.raw["model"]
        defense = defense or self.defense
        return NoiseInjectedClassifier(
            defense=defense,
            rank=self.rank if rank is None else int(rank),
            arch=m["arch"],
            hidden=tuple(m["hidden"]),
            channels=tuple(m["channels"]),
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            lr=t["lr"],
            momentum=t["momentum"],
            lr_milestones=t["lr_milestones"],
            weight_decay=t["weight_decay"],
            v_weight_decay=t["v_weight_decay"],
            epsilon=a["epsilon"],
            k=a["k"],
            step=a["step"],
            random_start=a["random_start"],
            eot_samples=a["eot_samples"],
            loss_mix=t["loss_mix"],
            val_draws=t["val_draws"],
            random_state=self.seed if seed is None else int(seed),
        )

    def shape_for_model(self, ds: Dataset) -> Dataset:
        """MLPs take flat inputs."""
        return ds.flat() if self.raw["model"]["arch"] == "mlp" else ds
