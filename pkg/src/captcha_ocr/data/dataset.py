"""Samples, corpus loading/writing, splitting, and class-balance reporting."""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from ..alphabet import Alphabet
from .preprocess import DEFAULT_HEIGHT, DEFAULT_WIDTH, preprocess

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MANIFEST = "manifest.tsv"


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    """One image with its ground-truth text.

    ``label`` is the text itself; ``Alphabet.encode`` gives the index sequence.
    ``boxes`` holds per-character ``(x0, y0, x1, y1)`` boxes for synthetic images.
    """

    image: np.ndarray
    label: str
    source_id: str
    boxes: list[tuple[int, int, int, int]] | None = field(default=None, repr=False)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(not (0.0 < f < 1.0) for f in fracs):
            raise DatasetError(f"split fractions must each lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise DatasetError(f"split fractions must sum to 1, got {sum(fracs)!r}")


def load_dataset(
    directory,
    alphabet: Alphabet,
    *,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
    skipped: list | None = None,
    **preprocess_options,
) -> list[Sample]:
    """One sample per image file in ``directory``, labelled by the filename stem.

    Files whose stem uses characters outside ``alphabet`` or that cannot be
    decoded are skipped; ``(filename, reason)`` pairs are appended to
    ``skipped`` when given.
    """
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    samples = []
    for path in sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        label = path.stem
        bad = alphabet.unknown_characters(label)
        reason = None
        if not label:
            reason = "empty label"
        elif bad:
            reason = f"characters {bad} not in alphabet"
        else:
            try:
                with Image.open(path) as im:
                    im.load()
                    image = preprocess(im, height, width, **preprocess_options)
            except Exception as exc:  # any decode failure is per-file
                reason = f"unreadable image: {exc}"
        if reason is not None:
            log.warning("skipping %s: %s", path.name, reason)
            if skipped is not None:
                skipped.append((path.name, reason))
            continue
        samples.append(Sample(image=image, label=label, source_id=label))
    return samples


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def write_corpus(samples: Sequence[Sample], directory, style_seeds: Sequence[int] | None = None) -> Path:
    """Write ``<label>.png`` per sample plus ``manifest.tsv`` (source_id, label, style_seed).

    Labels must be unique because the filename stem is the label.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    labels = [s.label for s in samples]
    dupes = sorted({x for x, n in Counter(labels).items() if n > 1})
    if dupes:
        raise DatasetError(f"duplicate labels cannot share a flat directory: {dupes[:5]}")
    seeds = list(style_seeds) if style_seeds is not None else [""] * len(samples)
    for s in samples:
        Image.fromarray(to_uint8(s.image)).save(root / f"{s.label}.png")
    manifest = root / MANIFEST
    with manifest.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["source_id", "label", "style_seed"])
        for s, seed in zip(samples, seeds):
            w.writerow([s.source_id, s.label, seed])
    return manifest


def read_manifest(directory) -> list[dict]:
    with (Path(directory) / MANIFEST).open(newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def split_dataset(samples: Sequence[Sample], spec: SplitSpec):
    """Seeded shuffle, then contiguous train/val/test slices (remainder to train)."""
    n = len(samples)
    order = np.random.default_rng(spec.seed).permutation(n)
    n_val = math.floor(n * spec.val_fraction)
    n_test = math.floor(n * spec.test_fraction)
    n_train = n - n_val - n_test
    pick = [samples[i] for i in order]
    return pick[:n_train], pick[n_train:n_train + n_val], pick[n_train + n_val:]


@dataclass
class BalanceReport:
    counts: dict[str, int]
    imbalance_ratio: float

    def rows(self):
        return sorted(self.counts.items())


def class_balance_report(samples: Sequence[Sample], alphabet: Alphabet) -> BalanceReport:
    counts = Counter({c: 0 for c in alphabet.characters})
    for s in samples:
        counts.update(s.label)
    values = [counts[c] for c in alphabet.characters]
    ratio = max(values) / max(1, min(values))
    return BalanceReport(counts={c: counts[c] for c in alphabet.characters}, imbalance_ratio=float(ratio))


def oversample_minority(
    samples: Sequence[Sample],
    alphabet: Alphabet,
    *,
    target_ratio: float = 1.25,
    max_extra_fraction: float = 0.5,
) -> list[Sample]:
    """Duplicate samples containing the rarest character until the imbalance
    ratio reaches ``target_ratio`` or the extra-sample budget runs out."""
    out = list(samples)
    if not out:
        return out
    counts = Counter({c: 0 for c in alphabet.characters})
    for s in out:
        counts.update(s.label)
    budget = int(len(out) * max_extra_fraction)
    by_char = {c: [s for s in samples if c in s.label] for c in alphabet.characters}
    cursor = Counter()
    for _ in range(budget):
        present = [c for c in alphabet.characters if by_char[c]]
        rare = min(present, key=lambda c: (counts[c], c))
        if max(counts.values()) / max(1, counts[rare]) <= target_ratio:
            break
        pool = by_char[rare]
        s = pool[cursor[rare] % len(pool)]
        cursor[rare] += 1
        out.append(s)
        counts.update(s.label)
    return out
