"""Staged training: age pretraining, head refinement, fine-tuning, scratch.

Each stage trains under its own schedule and fresh Adam state, then snapshots
the model into a Checkpoint carrying a stage tag that the next stage checks:
refine accepts only pretrained checkpoints, finetune only refined ones.
Checkpoints serialize to the A2H1 container bit-exactly.

All randomness flows through streams derived from the caller's seed with
fixed tags, so a (data, seed) pair reproduces byte-identical checkpoints:
model init 201, replacement head 202, scratch init 203, epoch shuffling 301.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from age2hie.data import Dataset
from age2hie.models import (
    Model,
    ModelConfig,
    build_model,
    replace_head,
    set_trainable,
    trainable_params,
)
from age2hie.ops import mae_loss, softmax_cross_entropy, softmax_probs
from age2hie.optim import AdamState, StageSchedule, clip_check
from age2hie.tensor import Tensor, backward, recording

A2H1_MAGIC = b"A2H1"
A2H1_VERSION = 1
STAGES = ("pretrained", "refined", "finetuned", "scratch")
DEFAULT_BATCH = 16

MODEL_INIT_STREAM = 201
HEAD_INIT_STREAM = 202
SCRATCH_INIT_STREAM = 203
SHUFFLE_STREAM = 301

_METADATA_KEYS = ("variant", "in_channels", "out_dim", "width",
                  "stage", "seed", "epochs", "final_loss")


class PipelineError(RuntimeError):
    """Stage misuse or a malformed checkpoint file."""


@dataclass
class Checkpoint:
    """Immutable snapshot of a model plus how it was trained.

    tensors holds every parameter then every batch-norm buffer, in model
    declaration order, as f32 arrays decoupled from any live model.
    loss_trace is the in-memory per-epoch mean training loss; it is not
    serialized.
    """

    config: ModelConfig
    stage: str
    seed: int
    epochs: int
    final_loss: float
    tensors: list
    loss_trace: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise PipelineError(f"unknown stage tag {self.stage!r}")


def checkpoint_from_model(model: Model, stage: str, seed: int, epochs: int,
                          final_loss: float, loss_trace=None) -> Checkpoint:
    tensors = [(name, t.data.astype(np.float32, copy=True))
               for name, t in model.named_params()]
    tensors += [(name, b.astype(np.float32, copy=True))
                for name, b in model.named_buffers()]
    return Checkpoint(replace(model.config), stage, int(seed), int(epochs),
                      float(final_loss), tensors,
                      list(loss_trace) if loss_trace else [])


def model_from_checkpoint(ck: Checkpoint) -> Model:
    model = build_model(replace(ck.config), seed=0)
    stored = dict(ck.tensors)
    if len(stored) != len(ck.tensors):
        raise PipelineError("checkpoint holds duplicate tensor names")
    expected = ([n for n, _ in model.named_params()]
                + [n for n, _ in model.named_buffers()])
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise PipelineError(
            f"checkpoint tensors do not match model: missing {missing}, "
            f"unexpected {extra}"
        )
    for name, t in model.named_params():
        if stored[name].shape != t.data.shape:
            raise PipelineError(
                f"tensor {name}: stored shape {stored[name].shape} != "
                f"model shape {t.data.shape}"
            )
        t.data[...] = stored[name]
    for name, b in model.named_buffers():
        b[...] = stored[name]
    return model


# ---------------------------------------------------------------------------
# A2H1 container
# ---------------------------------------------------------------------------

def save_checkpoint(path, ck: Checkpoint) -> None:
    meta = {
        "variant": ck.config.variant,
        "in_channels": str(ck.config.in_channels),
        "out_dim": str(ck.config.out_dim),
        "width": str(ck.config.width),
        "stage": ck.stage,
        "seed": str(ck.seed),
        "epochs": str(ck.epochs),
        "final_loss": repr(float(ck.final_loss)),
    }
    parts = [A2H1_MAGIC, struct.pack("<I", A2H1_VERSION),
             struct.pack("<I", len(_METADATA_KEYS))]
    for key in _METADATA_KEYS:
        pair = f"{key}={meta[key]}".encode()
        parts.append(struct.pack("<H", len(pair)))
        parts.append(pair)
    parts.append(struct.pack("<I", len(ck.tensors)))
    for name, arr in ck.tensors:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise PipelineError(
                f"{self.path}: truncated checkpoint, needed {self.off + n} "
                f"bytes but file has {len(self.raw)}"
            )
        chunk = self.raw[self.off:self.off + n]
        self.off += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != A2H1_MAGIC:
        raise PipelineError(f"{path}: bad magic, not an A2H1 checkpoint")
    version = r.u32()
    if version != A2H1_VERSION:
        raise PipelineError(
            f"{path}: unsupported checkpoint version {version}, "
            f"reader supports {A2H1_VERSION}"
        )
    meta = {}
    for _ in range(r.u32()):
        pair = r.take(r.u16()).decode()
        key, sep, value = pair.partition("=")
        if not sep:
            raise PipelineError(f"{path}: malformed metadata entry {pair!r}")
        meta[key] = value
    missing = [k for k in _METADATA_KEYS if k not in meta]
    if missing:
        raise PipelineError(f"{path}: metadata missing keys {missing}")
    if meta["stage"] not in STAGES:
        raise PipelineError(f"{path}: unknown stage tag {meta['stage']!r}")

    tensors = []
    for _ in range(r.u32()):
        name = r.take(r.u16()).decode()
        rank = r.u8()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(4 * count)
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(
            np.float32, copy=True)
        tensors.append((name, arr))
    if r.off != len(r.raw):
        raise PipelineError(
            f"{path}: {len(r.raw) - r.off} trailing bytes after last tensor"
        )
    config = ModelConfig(variant=meta["variant"],
                         in_channels=int(meta["in_channels"]),
                         out_dim=int(meta["out_dim"]),
                         width=int(meta["width"]))
    return Checkpoint(config, meta["stage"], int(meta["seed"]),
                      int(meta["epochs"]), float(meta["final_loss"]), tensors)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _check_task(dataset: Dataset, task: str) -> None:
    if dataset.task != task:
        raise PipelineError(f"expected a {task}-task dataset, got {dataset.task!r}")
    if len(dataset) == 0:
        raise PipelineError("dataset is empty")


def _train(model: Model, volumes: np.ndarray, labels: np.ndarray, task: str,
           schedule: StageSchedule, seed: int, batch: int) -> list:
    """Shuffled minibatch Adam over the schedule; returns per-epoch mean loss."""
    params = trainable_params(model)
    opt = AdamState(params)
    shuffle_rng = np.random.default_rng([int(seed), SHUFFLE_STREAM])
    n = volumes.shape[0]
    trace = []
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            x = Tensor(volumes[idx])
            with recording() as rec:
                out = model.forward(x, training=True)
                if task == "age":
                    loss = mae_loss(out, labels[idx].astype(np.float32))
                else:
                    loss = softmax_cross_entropy(out, labels[idx])
            backward(loss, rec)
            clip_check(params)
            opt.step(lr)
            loss_sum += loss.item() * len(idx)
        trace.append(loss_sum / n)
    return trace


def pretrain(age_data: Dataset, config: ModelConfig, schedule: StageSchedule,
             seed: int, batch: int = DEFAULT_BATCH) -> Checkpoint:
    """Train all layers on age regression (MAE) from a seeded init."""
    _check_task(age_data, "age")
    if config.out_dim != 1:
        raise PipelineError(f"age pretraining needs out_dim=1, got {config.out_dim}")
    model = build_model(replace(config),
                        np.random.default_rng([int(seed), MODEL_INIT_STREAM]))
    trace = _train(model, age_data.volumes(), age_data.labels(), "age",
                   schedule, seed, batch)
    final = trace[-1] if trace else float("nan")
    return checkpoint_from_model(model, "pretrained", seed, schedule.epochs,
                                 final, trace)


def refine(ck: Checkpoint, hie_train: Dataset, schedule: StageSchedule,
           seed: int, batch: int = DEFAULT_BATCH) -> Checkpoint:
    """Swap in a 2-way head and train it alone; the extractor stays frozen."""
    if ck.stage != "pretrained":
        raise PipelineError(f"refine needs a pretrained checkpoint, got {ck.stage!r}")
    _check_task(hie_train, "outcome")
    model = model_from_checkpoint(ck)
    replace_head(model, 2, np.random.default_rng([int(seed), HEAD_INIT_STREAM]))
    set_trainable(model, "head_only")
    trace = _train(model, hie_train.volumes(), hie_train.labels(), "outcome",
                   schedule, seed, batch)
    final = trace[-1] if trace else float("nan")
    return checkpoint_from_model(model, "refined", seed, schedule.epochs,
                                 final, trace)


def finetune(ck: Checkpoint, hie_train: Dataset, schedule: StageSchedule,
             seed: int, batch: int = DEFAULT_BATCH) -> Checkpoint:
    """Unfreeze everything and keep training at the low constant rate."""
    if ck.stage != "refined":
        raise PipelineError(f"finetune needs a refined checkpoint, got {ck.stage!r}")
    _check_task(hie_train, "outcome")
    model = model_from_checkpoint(ck)
    set_trainable(model, "all")
    trace = _train(model, hie_train.volumes(), hie_train.labels(), "outcome",
                   schedule, seed, batch)
    final = trace[-1] if trace else float("nan")
    return checkpoint_from_model(model, "finetuned", seed, schedule.epochs,
                                 final, trace)


def train_scratch(hie_train: Dataset, config: ModelConfig,
                  schedule: StageSchedule, seed: int,
                  batch: int = DEFAULT_BATCH) -> Checkpoint:
    """No-transfer baseline: random init, all layers, equal epoch budget."""
    _check_task(hie_train, "outcome")
    if config.out_dim != 2:
        raise PipelineError(f"outcome training needs out_dim=2, got {config.out_dim}")
    model = build_model(replace(config),
                        np.random.default_rng([int(seed), SCRATCH_INIT_STREAM]))
    set_trainable(model, "all")
    trace = _train(model, hie_train.volumes(), hie_train.labels(), "outcome",
                   schedule, seed, batch)
    final = trace[-1] if trace else float("nan")
    return checkpoint_from_model(model, "scratch", seed, schedule.epochs,
                                 final, trace)


def predict(ck: Checkpoint, samples: Dataset, batch: int = DEFAULT_BATCH) -> list:
    """Eval-mode classification: (id, argmax class with ties to 0, P(class 1))."""
    if ck.stage not in ("refined", "finetuned", "scratch"):
        raise PipelineError(
            f"predict needs an outcome-stage checkpoint, got {ck.stage!r}"
        )
    _check_task(samples, "outcome")
    model = model_from_checkpoint(ck)
    volumes = samples.volumes()
    ids = samples.ids()
    results = []
    for start in range(0, len(ids), batch):
        x = Tensor(volumes[start:start + batch])
        logits = model.forward(x, training=False).data
        probs = softmax_probs(logits.astype(np.float64))
        classes = np.argmax(logits, axis=1)  # ties resolve to class 0
        for j, sid in enumerate(ids[start:start + batch]):
            results.append((sid, int(classes[j]), float(probs[j, 1])))
    return results
