"""FixMatch-style training: supervised cross-entropy on weak views of labeled
images plus a confidence-masked consistency loss between weak-view
pseudo-labels and strong-view predictions on unlabeled images.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import augment
from .datasets import LabeledDataset, SplitPartition, compute_normalization
from .evaluation import MetricsReport, compute_metrics
from .model import Classifier, ClassifierConfig, build_classifier, save_checkpoint

logger = logging.getLogger(__name__)

MODES = ("ssl", "supervised")
SCHEDULES = ("cosine", "fixmatch_cosine")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, ids: list[str], value: float):
        super().__init__(f"non-finite loss {value} at step {step}; batch ids: {ids}")
        self.step = step
        self.ids = ids


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.03
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 7.5e-4
    batch_labeled: int = 32
    unlabeled_ratio: int = 7
    threshold: float = 0.95
    epochs: int = 500
    iters_per_epoch: int = 1000
    mode: str = "ssl"
    seed: int = 0
    n_labels_per_class: int = 5
    lambda_u: float = 1.0
    schedule: str = "cosine"
    ops_per_image: int = augment.DEFAULT_OPS_PER_IMAGE
    ema_decay: float = 0.0  # 0 disables the EMA evaluation model
    log_every: int = 1
    eval_every: int = 0  # steps; 0 evaluates only at the end
    eval_batch: int = 256

    def __post_init__(self):
        if not 0 < self.threshold:
            raise ValueError("threshold must be > 0")
        if self.unlabeled_ratio < 0:
            raise ValueError("unlabeled_ratio must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.batch_labeled < 1 or self.epochs < 1 or self.iters_per_epoch < 1:
            raise ValueError("batch_labeled, epochs and iters_per_epoch must be >= 1")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must be in [0, 1)")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.iters_per_epoch

    @property
    def batch_unlabeled(self) -> int:
        return 0 if self.mode == "supervised" else self.batch_labeled * self.unlabeled_ratio


# --------------------------------------------------------------------------
# losses


def supervised_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the labeled batch."""
    return F.cross_entropy(logits, labels, reduction="mean")


@torch.no_grad()
def pseudo_label(weak_logits: torch.Tensor, threshold: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Hard pseudo-labels and a 0/1 mask of rows whose max probability >= threshold."""
    probs = torch.softmax(weak_logits.detach(), dim=-1)
    max_probs, labels = probs.max(dim=-1)
    return labels, (max_probs >= threshold).to(weak_logits.dtype)


def unsupervised_loss(strong_logits: torch.Tensor, pseudo: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    # divided by the full unlabeled batch size, not by the surviving count
    ce = F.cross_entropy(strong_logits, pseudo, reduction="none")
    return (ce * mask).sum() / strong_logits.shape[0]


def total_loss(ls: torch.Tensor, lu: torch.Tensor, mode: str, lambda_u: float = 1.0):
    if mode == "supervised":
        return ls
    if mode != "ssl":
        raise ValueError(f"unknown mode {mode!r}")
    return ls + lu if lambda_u == 1.0 else ls + lambda_u * lu


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def fixmatch_cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Alternative form lr0 * cos(7 pi k / 16 K) from the FixMatch reference code."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * math.cos(7 * math.pi * step / (16 * total_steps))


def learning_rate(cfg: TrainConfig, step: int) -> float:
    fn = cosine_lr if cfg.schedule == "cosine" else fixmatch_cosine_lr
    return fn(step, cfg.total_steps, cfg.lr0)


# --------------------------------------------------------------------------
# state and batching


@dataclass
class TrainState:
    model: Classifier
    optimizer: torch.optim.Optimizer
    step: int = 0
    history: list[dict] = field(default_factory=list)
    ema: Classifier | None = None


def init_state(model_cfg: ClassifierConfig, cfg: TrainConfig) -> TrainState:
    model = build_classifier(model_cfg, seed=cfg.seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr0, momentum=cfg.momentum, nesterov=cfg.nesterov,
                          weight_decay=cfg.weight_decay)
    ema = copy.deepcopy(model) if cfg.ema_decay > 0 else None
    return TrainState(model, opt, ema=ema)


def _torch_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0] >> 1)


class IndexStream:
    """Endless batches of indices; a fresh seeded permutation every pass."""

    def __init__(self, n: int, batch: int, seed: int, stream: int):
        if n <= 0:
            raise ValueError("cannot stream an empty dataset")
        self.n, self.batch = n, batch
        self.rng = np.random.default_rng([seed, 0xB47C, stream])
        self.buffer = np.empty(0, dtype=np.int64)
        self.epoch = 0

    def next(self) -> np.ndarray:
        while len(self.buffer) < self.batch:
            self.buffer = np.concatenate([self.buffer, self.rng.permutation(self.n)])
            self.epoch += 1
        out, self.buffer = self.buffer[: self.batch], self.buffer[self.batch :]
        return out


def _to_tensor(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> torch.Tensor:
    x = (x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


@dataclass(frozen=True)
class Batch:
    """Rows drawn from one partition; ids may repeat."""

    pixels: np.ndarray
    labels: np.ndarray
    ids: tuple[str, ...]

    @classmethod
    def take(cls, ds: LabeledDataset, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        return cls(ds.pixels[idx], ds.labels[idx], tuple(ds.ids[i] for i in idx))

    def __len__(self) -> int:
        return len(self.ids)


class BatchBuilder:
    """Augment raw-unit batches and normalize them into model inputs."""

    def __init__(self, value_range, stats, channels: int, seed: int, ops_per_image: int):
        self.value_range = value_range
        self.mean = np.asarray(stats[0], dtype=np.float32)
        self.std = np.asarray(stats[1], dtype=np.float32)
        self.seed = seed
        self.policy = augment.policy_for_channels(channels, ops_per_image)

    def _rngs(self, ids, step, stream):
        # repeated ids in one batch (tiny labeled sets) get distinct streams
        seen: dict[str, int] = {}
        rngs = []
        for i in ids:
            k = seen.get(i, 0)
            seen[i] = k + 1
            rngs.append(augment.sample_rng(self.seed, i, step, stream + 16 * k))
        return rngs

    def weak(self, batch: Batch, step: int, stream: int) -> torch.Tensor:
        x = batch.pixels.astype(np.float32)
        x = augment.weak_augment_batch(x, self._rngs(batch.ids, step, stream), self.value_range)
        return _to_tensor(x, self.mean, self.std)

    def strong(self, batch: Batch, step: int, stream: int) -> torch.Tensor:
        x = batch.pixels.astype(np.float32)
        x = augment.strong_augment_batch(x, self.policy, self._rngs(batch.ids, step, stream), self.value_range)
        return _to_tensor(x, self.mean, self.std)

    def plain(self, pixels: np.ndarray) -> torch.Tensor:
        return _to_tensor(pixels.astype(np.float32), self.mean, self.std)


STREAM_LABELED, STREAM_UNLAB_WEAK, STREAM_UNLAB_STRONG = 0, 1, 2


def train_step(state: TrainState, labeled: Batch, unlabeled: Batch | None,
               cfg: TrainConfig, builder: BatchBuilder) -> dict:
    """One optimization step; returns (and appends) the step record.

    The labeled forward runs on its own so BatchNorm statistics and dropout
    masks of the supervised branch do not depend on the unlabeled batch.
    """
    if cfg.mode == "supervised" and unlabeled is not None and len(unlabeled):
        raise ValueError("supervised mode takes no unlabeled batch")
    if cfg.mode == "ssl" and cfg.unlabeled_ratio > 0 and (unlabeled is None or len(unlabeled) == 0):
        raise ValueError("ssl mode needs an unlabeled batch")
    model, step = state.model, state.step
    model.train()
    lr = learning_rate(cfg, step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    x_l = builder.weak(labeled, step, STREAM_LABELED)
    y_l = torch.as_tensor(np.array(labeled.labels, dtype=np.int64))
    torch.manual_seed(_torch_seed(cfg.seed, step, STREAM_LABELED))
    ls = supervised_loss(model(x_l), y_l)

    record = {"step": step, "Ls": ls.item(), "Lu": 0.0, "mask_rate": 0.0, "lr": lr, "pseudo_acc": None}
    lu = torch.zeros((), dtype=ls.dtype)
    if cfg.mode == "ssl" and unlabeled is not None and len(unlabeled):
        x_w = builder.weak(unlabeled, step, STREAM_UNLAB_WEAK)
        x_s = builder.strong(unlabeled, step, STREAM_UNLAB_STRONG)
        torch.manual_seed(_torch_seed(cfg.seed, step, STREAM_UNLAB_WEAK))
        with torch.no_grad():
            weak_logits = model(x_w)
        pseudo, mask = pseudo_label(weak_logits, cfg.threshold)
        torch.manual_seed(_torch_seed(cfg.seed, step, STREAM_UNLAB_STRONG))
        lu = unsupervised_loss(model(x_s), pseudo, mask)
        # hidden labels are read for this diagnostic only
        hidden = torch.as_tensor(np.array(unlabeled.labels, dtype=np.int64))
        record.update(Lu=lu.item(), mask_rate=float(mask.mean()),
                      pseudo_acc=float((pseudo == hidden).double().mean()))

    loss = total_loss(ls, lu, cfg.mode, cfg.lambda_u)
    if not torch.isfinite(loss):
        ids = list(labeled.ids) + (list(unlabeled.ids) if unlabeled is not None else [])
        raise TrainingDiverged(step, ids, float(loss.detach()))
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    if state.ema is not None:
        _ema_update(state.ema, model, cfg.ema_decay)
    state.step += 1
    state.history.append(record)
    return record


@torch.no_grad()
def _ema_update(ema: Classifier, model: Classifier, decay: float) -> None:
    for e, p in zip(ema.parameters(), model.parameters()):
        e.mul_(decay).add_(p, alpha=1 - decay)
    for e, b in zip(ema.buffers(), model.buffers()):
        e.copy_(b)


# --------------------------------------------------------------------------
# evaluation and the full loop


@torch.no_grad()
def predict(model: Classifier, ds: LabeledDataset, builder: BatchBuilder, batch: int = 256) -> np.ndarray:
    model.eval()
    preds = []
    for start in range(0, len(ds), batch):
        logits = model(builder.plain(ds.pixels[start:start + batch]))
        preds.append(logits.argmax(dim=1).numpy())
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


def evaluate(model: Classifier, ds: LabeledDataset, builder: BatchBuilder, batch: int = 256) -> MetricsReport:
    pred = predict(model, ds, builder, batch)
    return compute_metrics(pred, ds.labels, ds.num_classes, ds.class_names)


def partition_stats(partition: SplitPartition) -> tuple[np.ndarray, np.ndarray]:
    for member in (partition.test, partition.train_labeled, partition.train_unlabeled):
        if member.channel_stats is not None:
            return member.channel_stats
    parts = [p for p in (partition.train_labeled, partition.train_unlabeled, partition.test) if len(p)]
    union = LabeledDataset(np.concatenate([p.pixels for p in parts]), np.concatenate([p.labels for p in parts]),
                           [i for p in parts for i in p.ids], parts[0].class_names, parts[0].value_range)
    return compute_normalization(union)


@dataclass
class TrainResult:
    report: MetricsReport
    history: list[dict]
    state: TrainState
    checkpoint: Path | None = None
    best_test_acc: float | None = None


def write_history(history: list[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")


def _window_record(window: list[dict]) -> dict:
    last = dict(window[-1])
    for key in ("Ls", "Lu", "mask_rate"):
        last[key] = float(np.mean([r[key] for r in window]))
    accs = [r["pseudo_acc"] for r in window if r["pseudo_acc"] is not None]
    last["pseudo_acc"] = float(np.mean(accs)) if accs else None
    return last


def train(cfg: TrainConfig, partition: SplitPartition, model_cfg: ClassifierConfig | None = None,
          out_dir=None, manifest_hash: str = "") -> TrainResult:
    """Run ``epochs * iters_per_epoch`` steps and evaluate on the test split.

    The returned history holds one record per ``log_every`` steps; loss and
    mask-rate fields of a record are means over its window. With ``out_dir``
    set, ``history.jsonl`` and ``checkpoint.pt`` are written there.
    """
    labeled, unlabeled, test = partition.train_labeled, partition.train_unlabeled, partition.test
    if len(labeled) == 0:
        raise ValueError("partition has no labeled samples")
    if model_cfg is None:
        model_cfg = ClassifierConfig(labeled.channels, labeled.num_classes, "desk_tiny", 0.0)
    if model_cfg.input_channels != labeled.channels or model_cfg.num_classes != labeled.num_classes:
        raise ValueError("model config does not match the partition's channels / classes")
    use_unlabeled = cfg.mode == "ssl" and cfg.batch_unlabeled > 0
    if use_unlabeled and len(unlabeled) == 0:
        raise ValueError("ssl mode needs unlabeled samples")

    stats = partition_stats(partition)
    builder = BatchBuilder(labeled.value_range, stats, labeled.channels, cfg.seed, cfg.ops_per_image)
    state = init_state(model_cfg, cfg)
    lab_stream = IndexStream(len(labeled), cfg.batch_labeled, cfg.seed, 0)
    unl_stream = IndexStream(len(unlabeled), cfg.batch_unlabeled, cfg.seed, 1) if use_unlabeled else None

    history: list[dict] = []
    window: list[dict] = []
    best = None
    eval_model = lambda: state.ema if state.ema is not None else state.model  # noqa: E731
    for _ in range(cfg.total_steps):
        lb = Batch.take(labeled, lab_stream.next())
        ub = Batch.take(unlabeled, unl_stream.next()) if unl_stream is not None else None
        rec = train_step(state, lb, ub, cfg, builder)
        window.append(rec)
        done = state.step
        if done % cfg.log_every == 0 or done == cfg.total_steps:
            out = _window_record(window)
            window = []
            if cfg.eval_every and (done % cfg.eval_every == 0) and len(test):
                acc = evaluate(eval_model(), test, builder, cfg.eval_batch).accuracy
                out["test_acc"] = acc
                best = acc if best is None else max(best, acc)
            history.append(out)
    state.history = history

    report = evaluate(eval_model(), test, builder, cfg.eval_batch)
    best = report.accuracy if best is None else max(best, report.accuracy)
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_history(history, out_dir / "history.jsonl")
        ckpt = out_dir / "checkpoint.pt"
        save_checkpoint(ckpt, eval_model(), state.optimizer, state.step, manifest_hash,
                        extra={"train_config": asdict(cfg), "final_test_acc": report.accuracy,
                               "best_test_acc": best})
    return TrainResult(report, history, state, ckpt, best)

