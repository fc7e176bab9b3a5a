"""Mini-batch CTC training with Adam, validation, early stopping and checkpointing."""
from __future__ import annotations

import copy
import csv
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ctc
from . import tensor as T
from .alphabet import Alphabet
from .checkpoint import AdamState, Checkpoint, load_checkpoint, save_checkpoint
from .data.augment import AugmentationConfig, augment
from .data.dataset import Sample
from .evaluate import char_accuracy, decode_log_probs, word_accuracy
from .model import ModelConfig, ModelParams, build, forward_batch

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "val_loss", "val_char_acc", "val_word_acc", "seconds"]
PRECISIONS = {"float32": np.float32, "float64": np.float64}


class TrainingError(RuntimeError):
    pass


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    early_stop_patience: int = 10
    gradient_clip_norm: float = 5.0
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    augment: bool = True
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise TrainConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.epsilon <= 0:
            raise TrainConfigError("adam betas must lie in [0, 1) and epsilon must be positive")
        if self.early_stop_patience < 0:
            raise TrainConfigError(f"early_stop_patience must be non-negative, got {self.early_stop_patience}")
        if not self.gradient_clip_norm > 0:
            raise TrainConfigError(f"gradient_clip_norm must be positive, got {self.gradient_clip_norm}")
        if self.precision not in PRECISIONS:
            raise TrainConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_char_acc: float
    val_word_acc: float
    seconds: float

    def row(self) -> list[str]:
        return [
            str(self.epoch),
            repr(self.train_loss),
            repr(self.val_loss),
            repr(self.val_char_acc),
            repr(self.val_word_acc),
            f"{self.seconds:.3f}",
        ]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curve: list[EpochRecord]
    last: Checkpoint
    stopped_early: bool = False

    @property
    def best_epoch(self) -> int:
        return int(self.checkpoint.metadata["epoch"])


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= factor
    return norm


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> bool:
    """One clipped, bias-corrected Adam update applied in place.

    A non-finite gradient skips the update, leaving ``params`` and ``state``
    untouched; the return value says whether the step was applied.
    """
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {grads[name].shape}, parameter {p.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("non-finite gradient; skipping batch")
        return False
    grads = {k: np.array(g, copy=True) for k, g in grads.items()}
    clip_gradients(grads, config.gradient_clip_norm)
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)).astype(p.dtype)
    return True


def label_feasible(label: Sequence[int], steps: int) -> bool:
    """A label needs one frame per character plus one per adjacent repeat."""
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats <= steps


def sample_seed(global_seed: int, epoch: int, index: int) -> list[int]:
    return [global_seed, epoch, index]


def _prepare_images(samples: Sequence[Sample], indices, config: TrainConfig, epoch: int, train: bool) -> np.ndarray:
    images = []
    for i in indices:
        img = samples[i].image
        if train and config.augment:
            img = augment(img, config.augmentation, sample_seed(config.seed, epoch, int(i)))
        images.append(img)
    return np.stack(images)


def evaluate_split(
    params: ModelParams,
    samples: Sequence[Sample],
    alphabet: Alphabet,
    batch_size: int = 64,
) -> tuple[float, float, float]:
    """Mean CTC loss, char accuracy and word accuracy (greedy) without augmentation."""
    losses, pairs = [], []
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            lp = forward_batch(params, np.stack([s.image for s in chunk])).data.astype(np.float64)
            for i, s in enumerate(chunk):
                frames = lp[:, i, :]
                loss = ctc.ctc_loss(frames, alphabet.encode(s.label), alphabet.blank).loss
                if math.isfinite(loss):
                    losses.append(loss)
                pairs.append((decode_log_probs(frames, alphabet), s.label))
    mean_loss = float(np.mean(losses)) if losses else math.inf
    return mean_loss, char_accuracy(pairs), word_accuracy(pairs)


def _snapshot(params: ModelParams) -> ModelParams:
    return ModelParams(
        params.config,
        {k: T.Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in params.items()},
    )


class MetricsWriter:
    """Appends one ``metrics.csv`` row per completed epoch."""

    def __init__(self, path: Path, append: bool = False):
        self.path = path
        if not append or not path.exists():
            with path.open("w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)

    def write(self, record: EpochRecord) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(record.row())


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _stderr(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def train(
    model_config: ModelConfig,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    alphabet: Alphabet,
    config: TrainConfig = TrainConfig(),
    *,
    out_dir=None,
    resume: Checkpoint | None = None,
    progress: Callable[[str], None] | None = _stderr,
) -> TrainResult:
    """Train a CRNN; returns the best-validation checkpoint and the loss curve.

    With ``out_dir`` set, ``metrics.csv`` grows one row per epoch and
    ``checkpoint.bin`` (best) / ``last.bin`` (latest, with optimizer state) are
    rewritten as training goes.
    """
    if not train_samples:
        raise TrainConfigError("training split is empty")
    if model_config.alphabet_size != alphabet.size:
        raise TrainConfigError(
            f"model expects {model_config.alphabet_size} characters, alphabet has {alphabet.size}"
        )
    train_samples = list(train_samples)
    val_samples = list(val_samples)
    labels = [alphabet.encode(s.label) for s in train_samples]
    steps = model_config.time_steps
    feasible = [label_feasible(lab, steps) for lab in labels]
    if not any(feasible):
        raise TrainingError(
            f"no training label fits in {steps} time-steps; widen the input (input_width) or use fewer pooling stages"
        )
    if not all(feasible):
        log.warning("%d of %d training labels are infeasible for T=%d and will be skipped",
                    feasible.count(False), len(feasible), steps)
    model_config.check_label_capacity(max(len(lab) for lab in labels))

    dtype = PRECISIONS[config.precision]
    if resume is not None:
        params = ModelParams(model_config, {k: T.Tensor(t.data.astype(dtype), requires_grad=True, name=k)
                                            for k, t in resume.params.items()})
        state = copy.deepcopy(resume.optimizer) if resume.optimizer is not None else AdamState()
        meta = resume.metadata
        start_epoch = int(meta.get("epoch", 0)) + 1
        best_loss = float(meta.get("best_val_loss", math.inf))
        best_epoch = int(meta.get("best_epoch", 0))
        wait = int(meta.get("wait", 0))
        best_params = _snapshot(params)
    else:
        params = build(model_config, config.seed, dtype=dtype)
        state = AdamState()
        start_epoch, best_loss, best_epoch, wait = 1, math.inf, 0, 0
        best_params = _snapshot(params)

    writer = None
    best_path = last_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        writer = MetricsWriter(out / "metrics.csv", append=resume is not None)
        best_path, last_path = out / "checkpoint.bin", out / "last.bin"
        if resume is not None and best_path.exists():
            best_params = load_checkpoint(best_path, alphabet).params

    def make_checkpoint(p: ModelParams, epoch: int, with_state: bool) -> Checkpoint:
        meta = {
            "epoch": epoch,
            "best_val_loss": best_loss,
            "best_epoch": best_epoch,
            "wait": wait,
            "seed": config.seed,
            "precision": config.precision,
        }
        return Checkpoint(model_config, alphabet, p, copy.deepcopy(state) if with_state else None, meta)

    curve: list[EpochRecord] = []
    names = list(params.tensors)
    arrays = params.arrays()
    stopped_early = False
    for epoch in range(start_epoch, config.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_samples))
        order = [i for i in order if feasible[i]]
        batch_losses: list[float] = []
        skipped = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            images = _prepare_images(train_samples, idx, config, epoch, train=True)
            log_probs = forward_batch(params, images)
            node, losses = ctc.batch_ctc_loss(log_probs, [labels[i] for i in idx], alphabet.blank)
            skipped += int(np.sum(~np.isfinite(losses)))
            if node is None:
                continue
            grads = T.backward(node, params.tensors.values())
            if adam_step(arrays, {n: grads[params[n]] for n in names}, state, config):
                batch_losses.extend(float(x) for x in losses if math.isfinite(x))
        if skipped:
            log.warning("epoch %d: skipped %d infeasible samples", epoch, skipped)
        if not batch_losses:
            raise TrainingError(f"epoch {epoch}: every batch was skipped (infeasible labels or non-finite gradients)")
        train_loss = float(np.mean(batch_losses))
        if val_samples:
            val_loss, val_char, val_word = evaluate_split(params, val_samples, alphabet)
        else:
            val_loss, val_char, val_word = train_loss, math.nan, math.nan
        record = EpochRecord(epoch, train_loss, val_loss, val_char, val_word, time.perf_counter() - t0)
        curve.append(record)
        if writer is not None:
            writer.write(record)

        if val_loss < best_loss:
            best_loss, best_epoch, wait = val_loss, epoch, 0
            best_params = _snapshot(params)
            if best_path is not None:
                save_checkpoint(make_checkpoint(best_params, epoch, with_state=False), best_path)
        else:
            wait += 1
        if last_path is not None:
            save_checkpoint(make_checkpoint(params, epoch, with_state=True), last_path)
        if progress is not None:
            progress(
                f"epoch {epoch:3d}  train {train_loss:.4f}  val {val_loss:.4f}  "
                f"char {val_char:.4f}  word {val_word:.4f}  {record.seconds:.1f}s"
                + ("  *" if best_epoch == epoch else "")
            )
        if wait > 0 and wait >= config.early_stop_patience:
            stopped_early = True
            break

    last_epoch = curve[-1].epoch if curve else start_epoch - 1
    best = make_checkpoint(best_params, best_epoch, with_state=False)
    last = make_checkpoint(params, last_epoch, with_state=True)
    return TrainResult(checkpoint=best, curve=curve, last=last, stopped_early=stopped_early)
