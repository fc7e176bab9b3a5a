"""Geometric and photometric augmentation with per-call seeding."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

BACKGROUND = 1.0


@dataclass(frozen=True)
class AugmentationConfig:
    rotation_degrees: tuple[float, float] = (-5.0, 5.0)
    translate_fraction: tuple[float, float] = (-0.05, 0.05)
    zoom_factor: tuple[float, float] = (0.95, 1.05)
    shear_degrees: tuple[float, float] = (-5.0, 5.0)
    brightness_delta: tuple[float, float] = (-0.1, 0.1)
    contrast_factor: tuple[float, float] = (0.9, 1.1)
    flip_enabled: bool = False

    def __post_init__(self):
        for f in fields(self):
            if f.name == "flip_enabled":
                continue
            lo, hi = (float(v) for v in getattr(self, f.name))
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValueError(f"{f.name} must be a finite (low, high) range, got {(lo, hi)}")
            object.__setattr__(self, f.name, (lo, hi))
        if self.zoom_factor[0] <= 0:
            raise ValueError(f"zoom_factor must be positive, got {self.zoom_factor}")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls((0, 0), (0, 0), (1, 1), (0, 0), (0, 0), (1, 1), False)

    @classmethod
    def fixed(cls, **values) -> "AugmentationConfig":
        """Every range collapsed to the given value (identity where omitted)."""
        base = {f.name: getattr(cls.identity(), f.name) for f in fields(cls)}
        for k, v in values.items():
            base[k] = v if k == "flip_enabled" else (v, v)
        return cls(**base)


@dataclass(frozen=True)
class AugmentParams:
    rotation: float
    tx: float
    ty: float
    zoom: float
    shear: float
    brightness: float
    contrast: float
    flip: bool


def sample_params(config: AugmentationConfig, rng: np.random.Generator) -> AugmentParams:
    def draw(r):
        lo, hi = r
        return lo if lo == hi else float(rng.uniform(lo, hi))

    return AugmentParams(
        rotation=draw(config.rotation_degrees),
        tx=draw(config.translate_fraction),
        ty=draw(config.translate_fraction),
        zoom=draw(config.zoom_factor),
        shear=draw(config.shear_degrees),
        brightness=draw(config.brightness_delta),
        contrast=draw(config.contrast_factor),
        flip=bool(config.flip_enabled and rng.random() < 0.5),
    )


def affine_matrix(p: AugmentParams, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Forward map ``out = A @ (in - c) + c + t`` in (row, col) coordinates."""
    h, w = shape
    th = math.radians(p.rotation)
    sh = math.radians(p.shear)
    # built in (x, y) then permuted to (row, col)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    shear = np.array([[1.0, math.tan(sh)], [0.0, 1.0]])
    flip = np.diag([-1.0 if p.flip else 1.0, 1.0])
    a_xy = p.zoom * rot @ shear @ flip
    perm = np.array([[0.0, 1.0], [1.0, 0.0]])
    a_rc = perm @ a_xy @ perm
    t_rc = np.array([p.ty * h, p.tx * w])
    return a_rc, t_rc


def apply_params(image: np.ndarray, p: AugmentParams) -> np.ndarray:
    out = np.asarray(image, dtype=np.float64)
    a, t = affine_matrix(p, out.shape)
    if not (np.allclose(a, np.eye(2), atol=0, rtol=0) and not t.any()):
        c = (np.array(out.shape, dtype=np.float64) - 1.0) / 2.0
        inv = np.linalg.inv(a)
        offset = c - inv @ (c + t)
        out = ndimage.affine_transform(out, inv, offset=offset, order=1, mode="constant", cval=BACKGROUND)
    if p.brightness:
        out = out + p.brightness
    if p.contrast != 1.0:
        mean = out.mean()
        out = (out - mean) * p.contrast + mean
    return np.clip(out, 0.0, 1.0)


def augment(image: np.ndarray, config: AugmentationConfig, rng_seed) -> np.ndarray:
    """Randomly transformed copy of ``image``; deterministic in ``rng_seed``."""
    rng = np.random.default_rng(rng_seed)
    return apply_params(image, sample_params(config, rng))
