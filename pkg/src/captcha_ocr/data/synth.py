"""Synthetic distorted-text captcha rendered from the built-in bitmap glyphs."""
from __future__ import annotations

import math
import zlib

import numpy as np
from scipy import ndimage

from ..alphabet import Alphabet
from .dataset import Sample
from .glyphs import glyph
from .preprocess import DEFAULT_HEIGHT, DEFAULT_WIDTH, preprocess

MARGIN = 4
MAX_NOISE_DENSITY = 0.02


class SynthesisError(ValueError):
    pass


def _render_glyph(ch: str, sy: float, sx: float, angle: float) -> np.ndarray:
    padded = np.pad(glyph(ch), 1)
    mask = ndimage.zoom(padded, (sy, sx), order=1, grid_mode=True, mode="grid-constant")
    mask = np.clip((mask - 0.25) * 2.0, 0.0, 1.0)
    if angle:
        mask = ndimage.rotate(mask, angle, reshape=True, order=1, mode="constant", cval=0.0)
    # trim empty border so boxes hug the ink
    rows = np.flatnonzero(mask.max(axis=1) > 0.05)
    cols = np.flatnonzero(mask.max(axis=0) > 0.05)
    return mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def _segment_ink(h: int, w: int, p0, p1, thickness: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / (dy * dy + dx * dx), 0.0, 1.0)
    dist = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
    return np.clip(thickness / 2.0 + 0.5 - dist, 0.0, 1.0)


def synthesize_captcha(
    text: str,
    style_seed: int,
    alphabet: Alphabet,
    *,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
    clean: bool = False,
) -> Sample:
    """Render ``text`` as a distorted captcha; deterministic in ``(text, style_seed)``.

    ``clean=True`` turns off jitter, rotation, warp, line and noise, giving a
    seed-independent reference rendering.
    """
    if not text:
        raise SynthesisError("cannot synthesize an empty text")
    alphabet.encode(text)
    rng = np.random.default_rng([int(style_seed) & 0xFFFFFFFF, zlib.crc32(text.encode("utf-8"))])

    # glyph scale is tuned for 50-pixel-tall images and follows the height
    unit = height / DEFAULT_HEIGHT
    if clean:
        sy, sx, spacing = 4.0 * unit, 4.0 * unit, 3.0 * unit
    else:
        sy = rng.uniform(3.6, 4.4) * unit
        sx = rng.uniform(3.2, 4.2) * unit
        spacing = rng.uniform(1.0, 4.0) * unit

    glyphs = []
    for ch in text:
        angle = 0.0 if clean else rng.uniform(-10.0, 10.0)
        glyphs.append(_render_glyph(ch, sy, sx, angle))
    tallest = max(g.shape[0] for g in glyphs)
    if tallest > height:
        raise SynthesisError(f"glyphs need {tallest}px of height but the image has {height}px")
    nominal = sum(g.shape[1] for g in glyphs) + spacing * (len(text) - 1)
    room = width - 2 * MARGIN - (0 if clean else 4)
    if nominal > room:
        raise SynthesisError(f"text {text!r} needs {nominal:.0f}px but only {room}px fit in width {width}")

    slack = room - nominal
    x = MARGIN + (slack / 2.0 if clean else rng.uniform(0.0, slack)) + (0 if clean else 2)
    ink = np.zeros((height, width))
    boxes = []
    for g in glyphs:
        gh, gw = g.shape
        jx = 0 if clean else int(rng.integers(-2, 3))
        jy = 0 if clean else int(rng.integers(-2, 3))
        x0 = int(round(x)) + jx
        y0 = (height - gh) // 2 + jy
        x0 = min(max(x0, 0), width - gw)
        y0 = min(max(y0, 0), height - gh)
        region = ink[y0:y0 + gh, x0:x0 + gw]
        np.maximum(region, g, out=region)
        boxes.append((x0, y0, x0 + gw, y0 + gh))
        x += gw + spacing

    if not clean:
        amp = rng.uniform(0.0, 2.5)
        period = rng.uniform(60.0, 140.0)
        phase = rng.uniform(0.0, 2 * math.pi)
        rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
        shift = amp * np.sin(2 * math.pi * cols / period + phase)
        ink = ndimage.map_coordinates(ink, [rows - shift, cols], order=1, mode="constant", cval=0.0)
        y_start, y_end = rng.uniform(0.3 * height, 0.7 * height, size=2)
        x_start = rng.uniform(0.0, 0.2 * width)
        x_end = rng.uniform(0.8 * width, width)
        line = _segment_ink(height, width, (y_start, x_start), (y_end, x_end), rng.uniform(1.0, 2.0))
        ink = np.maximum(ink, line * rng.uniform(0.6, 1.0))

    darkness = 1.0 if clean else rng.uniform(0.75, 1.0)
    image = 1.0 - darkness * ink

    if not clean:
        density = rng.uniform(0.005, MAX_NOISE_DENSITY)
        count = int(density * height * width)
        flat = rng.choice(height * width, size=count, replace=False)
        image.ravel()[flat] = rng.integers(0, 2, size=count).astype(np.float64)

    image = preprocess(image, height, width)
    return Sample(image=image, label=text, source_id=f"synth-{style_seed}", boxes=boxes)


def random_texts(
    count: int,
    alphabet: Alphabet,
    min_length: int,
    max_length: int,
    seed: int,
    *,
    unique: bool = True,
) -> list[str]:
    """Texts with lengths and characters drawn uniformly; duplicates redrawn when ``unique``."""
    if min_length < 1 or max_length < min_length:
        raise SynthesisError(f"invalid length range {min_length}-{max_length}")
    capacity = sum(alphabet.size ** n for n in range(min_length, max_length + 1))
    if unique and count > capacity:
        raise SynthesisError(f"only {capacity} distinct texts of length {min_length}-{max_length} exist")
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    out: list[str] = []
    while len(out) < count:
        n = int(rng.integers(min_length, max_length + 1))
        text = "".join(alphabet.characters[i] for i in rng.integers(0, alphabet.size, size=n))
        if unique and text in seen:
            continue
        seen.add(text)
        out.append(text)
    return out


def synthesize_corpus(
    count: int,
    alphabet: Alphabet,
    *,
    min_length: int = 4,
    max_length: int = 6,
    seed: int = 0,
    height: int = DEFAULT_HEIGHT,
    width: int = DEFAULT_WIDTH,
) -> tuple[list[Sample], list[int]]:
    """``count`` samples with distinct texts; returns ``(samples, style_seeds)``."""
    texts = random_texts(count, alphabet, min_length, max_length, seed)
    seed_rng = np.random.default_rng([seed, 1])
    style_seeds = [int(s) for s in seed_rng.integers(0, 2**31 - 1, size=count)]
    samples = [
        synthesize_captcha(t, s, alphabet, height=height, width=width) for t, s in zip(texts, style_seeds)
    ]
    return samples, style_seeds


def glyph_order_matches(sample: Sample) -> bool:
    """Glyph boxes run left to right in label order."""
    if sample.boxes is None or len(sample.boxes) != len(sample.label):
        return False
    lefts = [b[0] for b in sample.boxes]
    centers = [(b[0] + b[2]) / 2 for b in sample.boxes]
    return lefts == sorted(lefts) and centers == sorted(centers)

