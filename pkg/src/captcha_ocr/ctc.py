"""Connectionist Temporal Classification: loss, gradient, decoders, and a brute-force oracle.

All dynamic programming runs in log space. Impossible states hold a genuine
``-inf``; an infeasible label yields ``loss = +inf`` instead of raising.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -np.inf
NORMALIZATION_TOL = 1e-6
ORACLE_MAX_T = 8
ORACLE_MAX_K = 3


class CtcError(ValueError):
    pass


class CtcDomainError(CtcError):
    """An index is outside ``[0, K]`` or a label contains the blank."""


class CtcPreconditionError(CtcError):
    """Frames are not log-normalized, or the instance is malformed."""


class GradientUndefinedError(CtcError):
    """The label cannot be produced in ``T`` frames, so the loss is infinite."""


@dataclass
class CtcResult:
    loss: float
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.loss)


def _frames(log_probs) -> np.ndarray:
    arr = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 2:
        raise CtcPreconditionError(f"expected a T×(K+1) frame matrix with T ≥ 1, got shape {arr.shape}")
    return arr


def _check_label(label: Sequence[int], blank: int, num_classes: int) -> np.ndarray:
    lab = np.asarray(label, dtype=np.int64).reshape(-1)
    if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
        raise CtcDomainError(f"label {list(lab)} has indices outside [0, {num_classes})")
    if np.any(lab == blank):
        raise CtcDomainError(f"label {list(lab)} contains the blank index {blank}")
    return lab


def _check_normalized(lp: np.ndarray) -> None:
    with np.errstate(over="ignore"):
        m = lp.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(lp - m).sum(axis=1, keepdims=True))).ravel()
    bad = np.abs(lse) > NORMALIZATION_TOL
    if np.any(bad):
        t = int(np.argmax(bad))
        raise CtcPreconditionError(f"frame {t} is not log-normalized (logsumexp = {lse[t]:.3g})")


def collapse(path: Sequence[int], blank: int) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out: list[int] = []
    prev = None
    for p in path:
        p = int(p)
        if not 0 <= p <= blank:
            raise CtcDomainError(f"path index {p} outside [0, {blank}]")
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def extend_label(label: Sequence[int], blank: int) -> np.ndarray:
    """Blank-interleaved label of length ``2L+1``."""
    ext = np.full(2 * len(label) + 1, blank, dtype=np.int64)
    ext[1::2] = label
    return ext


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    """``allowed[s]``: the transition ``s-2 → s`` is legal."""
    allowed = np.zeros(len(ext), dtype=bool)
    allowed[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return allowed


def _forward_backward(lp: np.ndarray, ext: np.ndarray, blank: int):
    steps = lp.shape[0]
    size = len(ext)
    allowed = _skip_allowed(ext, blank)
    emit = lp[:, ext]  # T×S
    alpha = np.full((steps, size), NEG_INF)
    beta = np.full((steps, size), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if size > 1:
        alpha[0, 1] = emit[0, 1]
    shifted1 = np.full(size, NEG_INF)
    shifted2 = np.full(size, NEG_INF)
    for t in range(1, steps):
        prev = alpha[t - 1]
        shifted1[1:] = prev[:-1]
        shifted2[2:] = np.where(allowed[2:], prev[:-2], NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(prev, shifted1), shifted2) + emit[t]
    beta[steps - 1, size - 1] = 0.0
    if size > 1:
        beta[steps - 1, size - 2] = 0.0
    # allowed shifted so that next_allowed[s] says s → s+2 is legal
    next_allowed = np.zeros(size, dtype=bool)
    next_allowed[:-2] = allowed[2:]
    for t in range(steps - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        shifted1[:] = NEG_INF
        shifted2[:] = NEG_INF
        shifted1[:-1] = nxt[1:]
        shifted2[:-2] = np.where(next_allowed[:-2], nxt[2:], NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(nxt, shifted1), shifted2)
    if size > 1:
        log_p = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        log_p = alpha[-1, -1]
    return alpha, beta, float(log_p)


def ctc_loss(log_probs, label: Sequence[int], blank: int) -> CtcResult:
    """Negative log-probability of ``label`` summed over all alignments."""
    lp = _frames(log_probs)
    if not 0 <= blank < lp.shape[1]:
        raise CtcDomainError(f"blank index {blank} outside [0, {lp.shape[1]})")
    lab = _check_label(label, blank, lp.shape[1])
    _check_normalized(lp)
    ext = extend_label(lab, blank)
    with np.errstate(invalid="ignore"):
        alpha, beta, log_p = _forward_backward(lp, ext, blank)
    loss = -log_p if log_p > NEG_INF else math.inf
    # exact zero can come out as -0.0
    return CtcResult(loss=loss + 0.0, alpha=alpha, beta=beta)


def _occupancy(lp: np.ndarray, lab: np.ndarray, blank: int, result: CtcResult) -> np.ndarray:
    """Posterior probability of emitting each class at each frame."""
    ext = extend_label(lab, blank)
    occ = np.exp(result.alpha + result.beta + result.loss)
    gamma = np.zeros_like(lp)
    for k in np.unique(ext):
        gamma[:, k] = occ[:, ext == k].sum(axis=1)
    return gamma


def ctc_gradient(log_probs, label: Sequence[int], blank: int) -> np.ndarray:
    """Gradient of the CTC loss with respect to the pre-softmax logits.

    ``log_probs`` must be log-normalized; since softmax is shift-invariant the
    result is also the gradient with respect to any logits producing them.
    """
    lp = _frames(log_probs)
    result = ctc_loss(lp, label, blank)
    if not result.feasible:
        raise GradientUndefinedError(
            f"label of length {len(label)} cannot be emitted in {lp.shape[0]} frames; gradient undefined"
        )
    lab = _check_label(label, blank, lp.shape[1])
    return np.exp(lp) - _occupancy(lp, lab, blank, result)


def ctc_loss_node(log_probs: Tensor, label: Sequence[int], blank: int) -> tuple[Tensor, float]:
    """CTC loss of one ``T×(K+1)`` frame matrix as a graph node.

    Returns ``(node, loss)``. The node's backward passes ``-posterior`` to the
    log-probabilities, which the log-softmax turns into ``softmax - posterior``.
    """
    lp = _frames(log_probs)
    lab = _check_label(label, blank, lp.shape[1])
    result = ctc_loss(lp, lab, blank)
    if not result.feasible:
        raise GradientUndefinedError(f"label of length {len(lab)} is infeasible for {lp.shape[0]} frames")
    gamma = _occupancy(lp, lab, blank, result)

    def backward(g):
        T._accumulate(log_probs, (-g * gamma).astype(log_probs.dtype))

    node = T._result(np.array(result.loss, dtype=log_probs.dtype), "ctc_loss", (log_probs,), backward)
    return node, result.loss


def batch_ctc_loss(log_probs: Tensor, labels: Sequence[Sequence[int]], blank: int):
    """Mean CTC loss over a ``T×N×(K+1)`` batch, skipping infeasible samples.

    Returns ``(node, losses)`` where ``losses[i]`` is ``inf`` for skipped
    samples; ``node`` is ``None`` when every sample was infeasible.
    """
    steps, n, classes = log_probs.shape
    if len(labels) != n:
        raise CtcPreconditionError(f"{len(labels)} labels for a batch of {n}")
    lp_all = np.asarray(log_probs.data, dtype=np.float64)
    losses = np.full(n, math.inf)
    gamma = np.zeros((steps, n, classes))
    for i, label in enumerate(labels):
        lab = _check_label(label, blank, classes)
        lp = lp_all[:, i, :]
        result = ctc_loss(lp, lab, blank)
        if result.feasible:
            losses[i] = result.loss
            gamma[:, i, :] = _occupancy(lp, lab, blank, result)
    ok = np.isfinite(losses)
    count = int(ok.sum())
    if count == 0:
        return None, losses
    mean = float(losses[ok].mean())

    def backward(g):
        T._accumulate(log_probs, (-g / count * gamma).astype(log_probs.dtype))

    node = T._result(np.array(mean, dtype=log_probs.dtype), "ctc_batch_loss", (log_probs,), backward)
    return node, losses


def ctc_greedy_decode(log_probs, blank: int) -> list[int]:
    """Best-path decoding: per-frame argmax (lowest index on ties), then collapse."""
    lp = _frames(log_probs)
    return collapse(lp.argmax(axis=1), blank)


def ctc_beam_decode(log_probs, blank: int, beam_width: int) -> list[int]:
    """Prefix beam search keeping blank- and non-blank-ending mass per prefix."""
    if beam_width < 1:
        raise ValueError(f"beam_width must be positive, got {beam_width}")
    lp = _frames(log_probs)
    classes = [k for k in range(lp.shape[1]) if k != blank]
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(lp.shape[0]):
        row = lp[t]
        nxt: dict[tuple[int, ...], list[float]] = {}

        def bucket(prefix):
            b = nxt.get(prefix)
            if b is None:
                b = nxt[prefix] = [NEG_INF, NEG_INF]
            return b

        for prefix, (p_b, p_nb) in beams.items():
            total = np.logaddexp(p_b, p_nb)
            b = bucket(prefix)
            b[0] = np.logaddexp(b[0], total + row[blank])
            last = prefix[-1] if prefix else None
            for c in classes:
                p = row[c]
                ext = bucket(prefix + (c,))
                if c == last:
                    # a repeat needs a blank in between; staying on c collapses
                    ext[1] = np.logaddexp(ext[1], p_b + p)
                    b[1] = np.logaddexp(b[1], p_nb + p)
                else:
                    ext[1] = np.logaddexp(ext[1], total + p)
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = {k: (v[0], v[1]) for k, v in ranked[:beam_width]}
    best = min(beams.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
    return list(best[0])


def _oracle_frames(probs) -> np.ndarray:
    p = _frames(probs)
    steps, classes = p.shape
    if steps > ORACLE_MAX_T or classes - 1 > ORACLE_MAX_K:
        raise CtcPreconditionError(
            f"oracle enumeration limited to T ≤ {ORACLE_MAX_T}, K ≤ {ORACLE_MAX_K}; got T={steps}, K={classes - 1}"
        )
    return p


def ctc_oracle(probs, label: Sequence[int], blank: int) -> float:
    """Probability of ``label`` by summing over every one of the ``(K+1)^T`` paths."""
    p = _oracle_frames(probs)
    target = [int(i) for i in label]
    steps, classes = p.shape
    total = 0.0
    for path in itertools.product(range(classes), repeat=steps):
        if collapse(path, blank) == target:
            total += math.prod(p[t, k] for t, k in enumerate(path))
    return total


def ctc_oracle_distribution(probs, blank: int) -> dict[tuple[int, ...], float]:
    """Probability of every label reachable in ``T`` frames, by path enumeration."""
    p = _oracle_frames(probs)
    steps, classes = p.shape
    dist: dict[tuple[int, ...], float] = {}
    for path in itertools.product(range(classes), repeat=steps):
        key = tuple(collapse(path, blank))
        dist[key] = dist.get(key, 0.0) + math.prod(p[t, k] for t, k in enumerate(path))
    return dist
