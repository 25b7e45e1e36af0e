"""Adversarial training, momentum SGD, evaluation of randomized models and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import AttackConfig, pgd
from .data import Dataset
from .exceptions import ContractError, FormatError, TrainingError
from .nn import Model, build_from_spec
from .rng import SeedStreams, as_streams
from .tensor import Tensor, backward, scale, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    lr_milestones: list[int] | None = None
    lr_factor: float = 0.1
    weight_decay: float = 1e-4
    v_weight_decay: float = 1e-3
    attack: AttackConfig = field(default_factory=AttackConfig)
    loss_mix: float = 0.5
    seed: int = 0
    val_draws: int = 1

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig.from_dict(self.attack)
        if not 0.0 <= self.loss_mix <= 1.0:
            raise ContractError(f"loss_mix must lie in [0, 1], got {self.loss_mix}")
        for name in ("lr", "momentum", "weight_decay", "v_weight_decay", "lr_factor"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")

    @property
    def milestones(self) -> list[int]:
        if self.lr_milestones is not None:
            return sorted(self.lr_milestones)
        return [int(round(0.6 * self.epochs)), int(round(0.8 * self.epochs))]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = self.attack.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Base rate times ``lr_factor`` for every milestone already reached."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    passed = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.lr * cfg.lr_factor ** passed


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def decay_coefficient(kind: str, weight_decay: float, v_weight_decay: float) -> float:
    # biases and noise scales are exempt; V gets the extra term on top of the global one
    if kind == "weight":
        return weight_decay
    if kind == "noise_factor":
        return weight_decay + v_weight_decay
    return 0.0


class SGD:
    """Classical momentum SGD with per-kind weight decay.

    ``buf = momentum * buf + (grad + decay * p)``; ``p -= lr * buf``.  The
    first step initializes ``buf`` to the decayed gradient.
    """

    def __init__(self, registry, momentum=0.9, weight_decay=1e-4, v_weight_decay=0.0):
        self.registry = list(registry)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.v_weight_decay = v_weight_decay
        self.buffers: dict[str, np.ndarray] = {}
        self.last_decay: dict[str, float] = {}

    def step(self, lr: float) -> None:
        self.last_decay = sgd_update(
            self.registry, lr, self.momentum, self.weight_decay, self.v_weight_decay, self.buffers
        )

    def zero_grad(self) -> None:
        for _, t, _ in self.registry:
            t.zero_grad()


def sgd_update(registry, lr, momentum, weight_decay, v_weight_decay, buffers=None) -> dict[str, float]:
    """Apply one update in place; returns the decay coefficient used per tensor."""
    buffers = {} if buffers is None else buffers
    applied = {}
    for name, t, kind in registry:
        decay = decay_coefficient(kind, weight_decay, v_weight_decay)
        applied[name] = decay
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        d_p = grad + decay * t.data if decay else grad
        if momentum:
            buf = buffers.get(name)
            if buf is None:
                buf = d_p.copy()
            else:
                buf = momentum * buf + d_p
            buffers[name] = buf
            d_p = buf
        t.data = t.data - lr * d_p
    return applied


# ---------------------------------------------------------------------------
# Training step
# ---------------------------------------------------------------------------

def adversarial_train_step(model, x, y, cfg: TrainConfig, optimizer: SGD, lr: float, rng=None) -> dict:
    """One optimizer step on ``(1 - mix) * clean_loss + mix * adversarial_loss``.

    Terms with zero weight are skipped entirely (no forward pass, no attack),
    so ``mix = 0`` is plain training.
    """
    streams = as_streams(rng)
    mix = cfg.loss_mix
    metrics = {}
    x_adv = pgd(model, x, y, cfg.attack, streams) if mix > 0 else None
    optimizer.zero_grad()
    total = None
    if mix < 1:
        clean = softmax_cross_entropy(model.forward(Tensor(x), streams), y)
        metrics["clean_loss"] = clean.item()
        total = scale(clean, 1.0 - mix)
    if mix > 0:
        adv = softmax_cross_entropy(model.forward(Tensor(x_adv), streams), y)
        metrics["adv_loss"] = adv.item()
        total = scale(adv, mix) if total is None else total + scale(adv, mix)
    metrics["loss"] = total.item()
    if not np.isfinite(metrics["loss"]):
        bad = [n for n, t, _ in model.named_parameters() if not np.all(np.isfinite(t.data))]
        raise TrainingError(f"non-finite loss {metrics} at lr={lr}; non-finite parameters: {bad or 'none'}")
    backward(total)
    optimizer.step(lr)
    if x_adv is not None:
        metrics["adv_linf"] = float(np.max(np.abs(x_adv - x))) if x.size else 0.0
    return metrics


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


def predict_logits(model, x, rng=None, batch_size: int = 512) -> np.ndarray:
    streams = as_streams(rng) if rng is not None else model.streams
    outs = []
    with model.frozen():
        for start in range(0, x.shape[0], batch_size):
            outs.append(model.forward(Tensor(x[start:start + batch_size]), streams).data)
    return np.concatenate(outs) if outs else np.zeros((0, model.n_classes))


def evaluate(model, dataset: Dataset, attack: AttackConfig | None = None, n_noise_draws: int = 1, rng=None,
             batch_size: int = 512) -> EvalResult:
    """Accuracy over ``n_noise_draws`` full passes, regenerating attacks on each pass."""
    if n_noise_draws < 1:
        raise ContractError("n_noise_draws must be >= 1")
    streams = as_streams(rng) if rng is not None else model.streams
    accs = []
    for _ in range(n_noise_draws):
        correct = 0
        for start in range(0, len(dataset), batch_size):
            x = dataset.inputs[start:start + batch_size]
            y = dataset.labels[start:start + batch_size]
            if attack is not None:
                x = pgd(model, x, y, attack, streams)
            logits = predict_logits(model, x, streams, batch_size)
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
        accs.append(correct / max(len(dataset), 1))
    return EvalResult(accs)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CNICKPT\x00"
VERSION = 1


@dataclass
class Checkpoint:
    arrays: "OrderedDict[str, np.ndarray]"
    model_spec: dict
    config: TrainConfig
    epoch: int
    val_accuracy: float
    rng_state: dict = field(default_factory=dict)

    def to_model(self) -> Model:
        model = build_from_spec(self.model_spec, seed=self.config.seed)
        model.load_arrays(self.arrays)
        if self.rng_state:
            model.streams = SeedStreams.from_state(self.rng_state)
        return model


def snapshot(model: Model, cfg: TrainConfig, epoch: int, val_accuracy: float, streams: SeedStreams) -> Checkpoint:
    return Checkpoint(model.state_arrays(), model.spec(), cfg, epoch, float(val_accuracy), streams.get_state())


def select_checkpoint(history: list[Checkpoint]) -> Checkpoint:
    """Highest clean validation accuracy; the earliest epoch wins ties."""
    if not history:
        raise ContractError("checkpoint history is empty")
    best = history[0]
    for ck in history[1:]:
        if ck.val_accuracy > best.val_accuracy:
            best = ck
    return best


def dump_checkpoint(ck: Checkpoint) -> bytes:
    """Serialize to the versioned little-endian container."""
    cfg_json = json.dumps(ck.config.to_dict(), sort_keys=True).encode()
    meta = {
        "config": ck.config.to_dict(),
        "model_spec": ck.model_spec,
        "epoch": ck.epoch,
        "val_accuracy": ck.val_accuracy,
        "rng_state": ck.rng_state,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), hashlib.sha256(cfg_json).digest()]
    parts.append(struct.pack("<I", len(meta_bytes)))
    parts.append(meta_bytes)
    parts.append(struct.pack("<I", len(ck.arrays)))
    for name, arr in ck.arrays.items():
        nb = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def parse_checkpoint(raw: bytes) -> Checkpoint:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"checkpoint truncated: need {n} bytes, {len(raw) - pos} left", offset=pos)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(8) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", offset=0)
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=8)
    digest = take(32)
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len))
    cfg_json = json.dumps(meta["config"], sort_keys=True).encode()
    if hashlib.sha256(cfg_json).digest() != digest:
        raise FormatError("config digest does not match stored config", offset=12)
    (count,) = struct.unpack("<I", take(4))
    arrays = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after tensors", offset=pos)
    return Checkpoint(
        arrays,
        meta["model_spec"],
        TrainConfig.from_dict(meta["config"]),
        meta["epoch"],
        meta["val_accuracy"],
        meta["rng_state"],
    )


def save_checkpoint(ck: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best: Checkpoint
    history: list[Checkpoint]
    steps: int


HISTORY_FIELDS = ["epoch", "lr", "train_loss", "val_accuracy"]


def train(model: Model, train_set: Dataset, val_set: Dataset, cfg: TrainConfig, rng=None,
          metrics_path=None) -> TrainResult:
    """Run the full schedule and leave ``model`` holding the selected checkpoint."""
    streams = as_streams(rng) if rng is not None else model.streams
    optimizer = SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay, cfg.v_weight_decay)
    history: list[Checkpoint] = []
    steps = 0
    n = len(train_set)
    writer = None
    fh = None
    if metrics_path is not None:
        new = not os.path.exists(metrics_path)
        fh = open(metrics_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(HISTORY_FIELDS)
    try:
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            order = streams.stream("data/shuffle").permutation(n)
            losses = []
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                m = adversarial_train_step(
                    model, train_set.inputs[idx], train_set.labels[idx], cfg, optimizer, lr, streams
                )
                losses.append(m["loss"])
                steps += 1
            val_acc = evaluate(model, val_set, None, cfg.val_draws, streams).mean
            history.append(snapshot(model, cfg, epoch, val_acc, streams))
            train_loss = float(np.mean(losses)) if losses else float("nan")
            log.debug("epoch %d lr %.4g loss %.4f val %.4f", epoch, lr, train_loss, val_acc)
            if writer is not None:
                writer.writerow([epoch, f"{lr:.6g}", f"{train_loss:.6f}", f"{val_acc:.6f}"])
    finally:
        if fh is not None:
            fh.close()
    if not history:
        val_acc = evaluate(model, val_set, None, cfg.val_draws, streams).mean
        history.append(snapshot(model, cfg, 0, val_acc, streams))
    best = select_checkpoint(history)
    model.load_arrays(best.arrays)
    return TrainResult(best, history, steps)
