"""Character- and word-level accuracy over (prediction, reference) pairs."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ctc
from .alphabet import Alphabet
from .model import ModelParams, forward_batch
from .tensor import no_grad


class EvalError(ValueError):
    pass


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _check_pairs(pairs) -> list[tuple[str, str]]:
    pairs = [(str(p), str(r)) for p, r in pairs]
    if not pairs:
        raise EvalError("cannot score an empty list of (prediction, reference) pairs")
    if any(not r for _, r in pairs):
        raise EvalError("references must be non-empty strings")
    return pairs


def char_accuracy(pairs) -> float:
    """``1 - Σ edit_distance / Σ reference length``, clamped to [0, 1]."""
    pairs = _check_pairs(pairs)
    errors = sum(edit_distance(p, r) for p, r in pairs)
    total = sum(len(r) for _, r in pairs)
    return min(1.0, max(0.0, 1.0 - errors / total))


def word_accuracy(pairs) -> float:
    pairs = _check_pairs(pairs)
    return sum(p == r for p, r in pairs) / len(pairs)


@dataclass
class SampleResult:
    source_id: str
    reference: str
    prediction: str
    edit_distance: int


@dataclass
class EvalReport:
    n_samples: int
    char_accuracy: float
    word_accuracy: float
    mean_edit_distance: float
    decoder: str = "greedy"
    records: list[SampleResult] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("records")
        return d

    def write(self, out_dir) -> tuple[Path, Path]:
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        summary = root / "eval.json"
        summary.write_text(json.dumps(self.summary(), indent=2) + "\n")
        details = root / "eval_details.tsv"
        with details.open("w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["source_id", "reference", "prediction", "edit_distance"])
            for r in self.records:
                w.writerow([r.source_id, r.reference, r.prediction, r.edit_distance])
        return summary, details


def decode_log_probs(frames: np.ndarray, alphabet: Alphabet, decoder: str = "greedy", beam_width: int = 10) -> str:
    if decoder == "greedy":
        return alphabet.decode(ctc.ctc_greedy_decode(frames, alphabet.blank))
    if decoder == "beam":
        return alphabet.decode(ctc.ctc_beam_decode(frames, alphabet.blank, beam_width))
    raise EvalError(f"unknown decoder {decoder!r}; expected 'greedy' or 'beam'")


def predict_texts(
    params: ModelParams,
    alphabet: Alphabet,
    images: Sequence[np.ndarray],
    *,
    decoder: str = "greedy",
    beam_width: int = 10,
    batch_size: int = 64,
) -> list[str]:
    out: list[str] = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            batch = np.stack(images[start:start + batch_size])
            lp = forward_batch(params, batch).data
            for i in range(lp.shape[1]):
                out.append(decode_log_probs(lp[:, i, :], alphabet, decoder, beam_width))
    return out


def report_from_predictions(samples, predictions: Sequence[str], decoder: str = "greedy") -> EvalReport:
    records = [
        SampleResult(s.source_id, s.label, p, edit_distance(p, s.label)) for s, p in zip(samples, predictions)
    ]
    pairs = [(r.prediction, r.reference) for r in records]
    return EvalReport(
        n_samples=len(records),
        char_accuracy=char_accuracy(pairs),
        word_accuracy=word_accuracy(pairs),
        mean_edit_distance=float(np.mean([r.edit_distance for r in records])),
        decoder=decoder,
        records=records,
    )


def evaluate(
    checkpoint,
    samples,
    decoder: str = "greedy",
    beam_width: int = 10,
    *,
    predictor: Callable[[object], str] | None = None,
) -> EvalReport:
    """Decode every sample with the checkpoint's model and score the results.

    ``predictor`` replaces the model (one sample in, text out), e.g. for stubs.
    """
    samples = list(samples)
    if not samples:
        raise EvalError("no samples to evaluate")
    alphabet: Alphabet = checkpoint.alphabet
    bad = sorted({c for s in samples for c in s.label if c not in alphabet})
    if bad:
        raise EvalError(f"sample labels use characters missing from the checkpoint alphabet: {bad}")
    label = decoder if decoder == "greedy" else f"beam({beam_width})"
    if predictor is not None:
        predictions = [predictor(s) for s in samples]
    else:
        predictions = predict_texts(
            checkpoint.params, alphabet, [s.image for s in samples], decoder=decoder, beam_width=beam_width
        )
    return report_from_predictions(samples, predictions, label)
