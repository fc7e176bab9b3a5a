"""Convolutional-recurrent network producing per-frame CTC log-probabilities."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

KERNEL = 3
POOL = 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_height: int = 50
    input_width: int = 200
    conv_channels: tuple[int, ...] = (32, 64)
    rnn_hidden: int = 128
    rnn_kind: str = "gru"
    bidirectional: bool = True
    alphabet_size: int = 19

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.rnn_kind not in ("simple", "gru"):
            raise ConfigError(f"rnn_kind must be 'simple' or 'gru', got {self.rnn_kind!r}")
        if self.alphabet_size < 1 or self.rnn_hidden < 1 or not self.conv_channels:
            raise ConfigError(f"invalid model config {self}")
        if any(c < 1 for c in self.conv_channels):
            raise ConfigError(f"conv channel counts must be positive: {self.conv_channels}")
        if self.feature_height < 1 or self.time_steps < 1:
            raise ConfigError(
                f"{len(self.conv_channels)} pooling stages reduce {self.input_height}×{self.input_width} to nothing"
            )

    @property
    def num_classes(self) -> int:
        return self.alphabet_size + 1

    def _reduce(self, size: int) -> int:
        for _ in self.conv_channels:
            size = size // POOL
        return size

    @property
    def feature_height(self) -> int:
        return self._reduce(self.input_height)

    @property
    def time_steps(self) -> int:
        return self.time_steps_for_width(self.input_width)

    def time_steps_for_width(self, width: int) -> int:
        return self._reduce(width)

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1] * self.feature_height

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1

    def check_label_capacity(self, max_label_length: int) -> bool:
        """Warn when labels this long may not fit into ``time_steps`` frames."""
        ok = self.time_steps >= 2 * max_label_length + 1
        if not ok:
            log.warning(
                "only %d time-steps for labels up to %d characters; repeated characters may be infeasible",
                self.time_steps, max_label_length,
            )
        return ok

    def to_dict(self) -> dict:
        return {
            "input_height": self.input_height,
            "input_width": self.input_width,
            "conv_channels": list(self.conv_channels),
            "rnn_hidden": self.rnn_hidden,
            "rnn_kind": self.rnn_kind,
            "bidirectional": self.bidirectional,
            "alphabet_size": self.alphabet_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: (tuple(v) if k == "conv_channels" else v) for k, v in d.items()})


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, c_out in enumerate(config.conv_channels):
        shapes[f"conv{i}.weight"] = (c_out, c_in, KERNEL, KERNEL)
        shapes[f"conv{i}.bias"] = (c_out,)
        c_in = c_out
    gates = 3 if config.rnn_kind == "gru" else 1
    h = config.rnn_hidden
    for d in ("fwd", "bwd")[: config.directions]:
        shapes[f"rnn.{d}.w_ih"] = (config.feature_dim, gates * h)
        shapes[f"rnn.{d}.w_hh"] = (h, gates * h)
        shapes[f"rnn.{d}.b_ih"] = (gates * h,)
        shapes[f"rnn.{d}.b_hh"] = (gates * h,)
    shapes["proj.weight"] = (config.directions * h, config.num_classes)
    shapes["proj.bias"] = (config.num_classes,)
    return shapes


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def build(config: ModelConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Initialize parameters deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    params = ModelParams(config)
    h = config.rnn_hidden
    for name, shape in parameter_shapes(config).items():
        if name.endswith("bias") or ".b_" in name:
            arr = np.zeros(shape)
        elif name.startswith("conv"):
            c_out, c_in, kh, kw = shape
            arr = _glorot(rng, shape, c_in * kh * kw, c_out * kh * kw)
        elif name.endswith("w_hh"):
            # one orthogonal block per gate
            arr = np.concatenate([_orthogonal(rng, h) for _ in range(shape[1] // h)], axis=1)
        else:
            arr = _glorot(rng, shape, shape[0], shape[1])
        params.tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


def map_to_sequence(features: Tensor) -> Tensor:
    """``C×H×W`` feature map to a ``W×(C·H)`` sequence (channel-major, then height).

    A batched ``N×C×H×W`` map becomes ``W×N×(C·H)``.
    """
    if features.ndim == 3:
        c, h, w = features.shape
        return T.reshape(T.transpose(features, (2, 0, 1)), (w, c * h))
    if features.ndim == 4:
        n, c, h, w = features.shape
        return T.reshape(T.transpose(features, (3, 0, 1, 2)), (w, n, c * h))
    raise ShapeError(f"map_to_sequence: expected a 3-D or 4-D feature map, got {features.shape}")


def sequence_to_map(sequence: np.ndarray, channels: int, height: int) -> np.ndarray:
    """Inverse of :func:`map_to_sequence` for a single ``W×(C·H)`` sequence."""
    w = sequence.shape[0]
    return sequence.reshape(w, channels, height).transpose(1, 2, 0)


def _run_direction(params: ModelParams, prefix: str, xs: Tensor, kind: str, reverse: bool) -> list[Tensor]:
    """Recurrent pass over ``xs`` (``T×N×F``); returns hidden states in time order."""
    steps, n, feat = xs.shape
    w_ih = params[f"{prefix}.w_ih"]
    w_hh = params[f"{prefix}.w_hh"]
    b_hh = params[f"{prefix}.b_hh"]
    hsz = w_hh.shape[0]
    proj = T.bias_add(T.matmul(T.reshape(xs, (steps * n, feat)), w_ih), params[f"{prefix}.b_ih"])
    proj = T.reshape(proj, (steps, n, w_ih.shape[1]))
    h = Tensor(np.zeros((n, hsz), dtype=xs.dtype))
    outputs: list[Tensor | None] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    if kind == "simple":
        for t in order:
            h = T.tanh(T.add(T.index(proj, t), T.bias_add(T.matmul(h, w_hh), b_hh)))
            outputs[t] = h
        return outputs
    px = [T.slice_last(proj, g * hsz, (g + 1) * hsz) for g in range(3)]
    for t in order:
        gh = T.bias_add(T.matmul(h, w_hh), b_hh)
        r = T.sigmoid(T.add(T.index(px[0], t), T.slice_last(gh, 0, hsz)))
        z = T.sigmoid(T.add(T.index(px[1], t), T.slice_last(gh, hsz, 2 * hsz)))
        cand = T.tanh(T.add(T.index(px[2], t), T.mul(r, T.slice_last(gh, 2 * hsz, 3 * hsz))))
        # h' = (1 - z) * cand + z * h  ==  cand + z * (h - cand)
        h = T.add(cand, T.mul(z, T.sub(h, cand)))
        outputs[t] = h
    return outputs


def features(params: ModelParams, images: Tensor) -> Tensor:
    """Convolutional stack; ``N×1×H×W`` in, ``N×C×H'×W'`` out."""
    x = images
    for i in range(len(params.config.conv_channels)):
        x = T.conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride=1, padding=KERNEL // 2)
        x = T.relu(x)
        x = T.max_pool2d(x, POOL, POOL)
    return x


def forward_batch(params: ModelParams, images: np.ndarray) -> Tensor:
    """Log-probabilities ``T×N×(K+1)`` for a stack of ``N×H×W`` images."""
    cfg = params.config
    images = np.asarray(images)
    if images.ndim != 3:
        raise ShapeError(f"forward_batch: expected N×H×W images, got {images.shape}")
    if images.shape[1] != cfg.input_height:
        raise ShapeError(f"image height {images.shape[1]} does not match configured {cfg.input_height}")
    if images.shape[2] < POOL ** len(cfg.conv_channels):
        raise ShapeError(f"image width {images.shape[2]} is too narrow for {len(cfg.conv_channels)} pooling stages")
    dtype = params["proj.weight"].dtype
    x = Tensor(images[:, None].astype(dtype, copy=False))
    seq = map_to_sequence(features(params, x))
    steps, n, _ = seq.shape
    dirs = [_run_direction(params, "rnn.fwd", seq, cfg.rnn_kind, reverse=False)]
    if cfg.bidirectional:
        dirs.append(_run_direction(params, "rnn.bwd", seq, cfg.rnn_kind, reverse=True))
    hidden = [T.stack(d, axis=0) for d in dirs]
    hidden = T.concat(hidden, axis=-1) if len(hidden) > 1 else hidden[0]
    width = hidden.shape[-1]
    logits = T.linear(T.reshape(hidden, (steps * n, width)), params["proj.weight"], params["proj.bias"])
    return T.log_softmax_rows(T.reshape(logits, (steps, n, cfg.num_classes)))


def forward(params: ModelParams, image: np.ndarray) -> Tensor:
    """Log-probabilities ``T×(K+1)`` for a single ``H×W`` image."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"forward: expected an H×W image, got {image.shape}")
    out = forward_batch(params, image[None])
    return T.reshape(out, (out.shape[0], out.shape[2]))
