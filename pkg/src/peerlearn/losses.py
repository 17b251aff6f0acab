"""Long-tail classification losses with analytic gradients w.r.t. the logits.

All four losses share one vectorized kernel, :func:`batch_loss`, which works on
a ``(n_samples, n_classes)`` logit matrix and returns the mean loss together
with the gradient of that mean. The single-sample functions
(:func:`cross_entropy`, :func:`focal_loss`, :func:`ldam_loss`) are thin
wrappers returning a :class:`LossValue`.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .exceptions import ConfigError, InputError, NumericError
from .taxonomy import FrequencyTable

CROSS_ENTROPY = "cross_entropy"
FOCAL = "focal"
LDAM = "ldam"
CLASS_BALANCED = "class_balanced"
LOSS_KINDS = (CROSS_ENTROPY, FOCAL, LDAM, CLASS_BALANCED)

_ALIASES = {
    "ce": CROSS_ENTROPY, "crossentropy": CROSS_ENTROPY, "cross_entropy": CROSS_ENTROPY,
    "focal": FOCAL,
    "ldam": LDAM,
    "cb": CLASS_BALANCED, "classbalanced": CLASS_BALANCED, "class_balanced": CLASS_BALANCED,
}

DEFAULT_GAMMA = 2.0
DEFAULT_BETA = 0.9999
DEFAULT_LOGIT_SCALE = 30.0
DEFAULT_MAX_MARGIN = 0.5


@dataclass(frozen=True)
class LossValue:
    loss: float
    grad: np.ndarray


@dataclass(frozen=True)
class LossSpec:
    """Loss kind plus the hyperparameters that kind uses.

    ``margin_scale`` (LDAM's C) may be left as None, in which case it is set
    per peer so that the largest margin over the peer's classes equals
    ``DEFAULT_MAX_MARGIN``.
    """

    kind: str = CROSS_ENTROPY
    gamma: Optional[float] = None
    beta: Optional[float] = None
    margin_scale: Optional[float] = None
    logit_scale: Optional[float] = None

    def __post_init__(self):
        kind = normalize_kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind == FOCAL:
            if self.gamma is None:
                object.__setattr__(self, "gamma", DEFAULT_GAMMA)
            if self.gamma < 0:
                raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")
        elif self.gamma is not None:
            raise ConfigError(f"gamma is not a parameter of {kind}")
        if kind == CLASS_BALANCED:
            if self.beta is None:
                object.__setattr__(self, "beta", DEFAULT_BETA)
            if not 0 <= self.beta < 1:
                raise ConfigError(f"class-balanced beta must lie in [0, 1), got {self.beta}")
        elif self.beta is not None:
            raise ConfigError(f"beta is not a parameter of {kind}")
        if kind == LDAM:
            if self.logit_scale is None:
                object.__setattr__(self, "logit_scale", DEFAULT_LOGIT_SCALE)
            if self.logit_scale <= 0:
                raise ConfigError("LDAM logit_scale must be > 0")
            if self.margin_scale is not None and self.margin_scale <= 0:
                raise ConfigError("LDAM margin_scale must be > 0")
        elif self.margin_scale is not None or self.logit_scale is not None:
            raise ConfigError(f"margin_scale/logit_scale are not parameters of {kind}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for name in ("gamma", "beta", "margin_scale", "logit_scale"):
            value = getattr(self, name)
            if value is not None:
                d[name] = value
        return d

    @classmethod
    def from_dict(cls, d) -> "LossSpec":
        if isinstance(d, str):
            return cls(d)
        d = dict(d)
        return cls(**d)

    def with_margin_scale(self, margin_scale: float) -> "LossSpec":
        return replace(self, margin_scale=margin_scale)


def normalize_kind(kind: str) -> str:
    key = str(kind).lower().replace("-", "_").replace(" ", "")
    if key not in _ALIASES:
        raise ConfigError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return _ALIASES[key]


def _counts_array(freq, classes=None) -> np.ndarray:
    counts = freq.as_array() if isinstance(freq, FrequencyTable) else np.asarray(freq)
    if classes is not None:
        counts = counts[np.asarray(classes, dtype=np.int64)]
    return counts.astype(np.float64)


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise InputError("softmax needs at least one logit")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax received non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _target_log_prob(z, y):
    """log p_y with full relative precision when p_y is close to 1.

    Writing the normaliser as exp(max) * (1 + rest) and taking log1p(rest)
    avoids the cancellation in ``logsumexp(z) - z_y`` for near-zero losses.
    """
    rows = np.arange(z.shape[0])
    top = z.argmax(axis=1)
    zmax = z[rows, top]
    e = np.exp(z - zmax[:, None])
    e[rows, top] = 0.0
    return (z[rows, y] - zmax) - np.log1p(e.sum(axis=1))


def batch_loss(spec: LossSpec, logits, labels, margins=None, class_weights=None):
    """Mean loss over rows and its gradient w.r.t. ``logits``.

    ``margins`` is required for LDAM and ``class_weights`` for the
    class-balanced loss; both are indexed by column. ``class_weights`` is also
    honoured by plain cross entropy.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise InputError("logits must be (n, k) and labels (n,)")
    m, k = z.shape
    if m == 0:
        raise InputError("batch is empty")
    if np.any((y < 0) | (y >= k)):
        bad = int(np.flatnonzero((y < 0) | (y >= k))[0])
        raise InputError(f"label {y[bad]} of row {bad} outside [0, {k})")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    rows = np.arange(m)
    onehot = np.zeros_like(z)
    onehot[rows, y] = 1.0

    if spec.kind == LDAM:
        if margins is None:
            raise ConfigError("LDAM needs per-class margins")
        margins = np.asarray(margins, dtype=np.float64)
        if margins.shape != (k,):
            raise InputError(f"expected {k} margins, got shape {margins.shape}")
        s = spec.logit_scale
        z = s * (z - onehot * margins)

    logp = _log_softmax(z)
    p = np.exp(logp)
    logp_y = _target_log_prob(z, y)

    if spec.kind == FOCAL:
        gamma = spec.gamma
        # 1 - p_y without cancellation
        q = (p * (1.0 - onehot)).sum(axis=1)
        qg = q ** gamma
        per_row = -qg * logp_y
        if gamma == 0:
            coef = -np.ones(m)
        else:
            safe_q = np.where(q > 0, q, 1.0)
            lead = np.where(q > 0, gamma * safe_q ** (gamma - 1.0) * p[rows, y] * logp_y, 0.0)
            coef = lead - qg
        grad = -coef[:, None] * (p - onehot)
    else:
        if spec.kind == CLASS_BALANCED and class_weights is None:
            raise ConfigError("class-balanced loss needs per-class weights")
        if class_weights is not None:
            class_weights = np.asarray(class_weights, dtype=np.float64)
            if class_weights.shape != (k,):
                raise InputError(f"expected {k} class weights, got shape {class_weights.shape}")
            if np.any(class_weights <= 0):
                raise InputError("class weights must be positive")
            w = class_weights[y]
        else:
            w = np.ones(m)
        per_row = -(w * logp_y)
        grad = w[:, None] * (p - onehot)
        if spec.kind == LDAM:
            grad = spec.logit_scale * grad

    return float(per_row.mean()), grad / m


def _single(spec, logits, label, margins=None, class_weights=None) -> LossValue:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise InputError("logits must be a nonempty vector")
    if not 0 <= int(label) < z.size:
        raise InputError(f"label {label} outside [0, {z.size})")
    loss, grad = batch_loss(spec, z[None, :], [int(label)], margins, class_weights)
    return LossValue(loss, grad[0])


def cross_entropy(logits, label, class_weights=None) -> LossValue:
    return _single(LossSpec(CROSS_ENTROPY), logits, label, class_weights=class_weights)


def focal_loss(logits, label, gamma=DEFAULT_GAMMA) -> LossValue:
    """Focal loss ``-(1 - p_y)**gamma * log(p_y)``; gamma=0 is cross entropy."""
    return _single(LossSpec(FOCAL, gamma=gamma), logits, label)


def ldam_loss(logits, label, margins, s=DEFAULT_LOGIT_SCALE) -> LossValue:
    """Cross entropy on ``s * z`` with ``s * margins[label]`` taken off the true logit."""
    return _single(LossSpec(LDAM, logit_scale=s), logits, label, margins=margins)


def class_balanced_loss(logits, label, weights) -> LossValue:
    return _single(LossSpec(CLASS_BALANCED, beta=0.0), logits, label, class_weights=weights)


def ldam_margins(freq, C, classes=None) -> np.ndarray:
    """Per-class margins ``C / n_j**0.25``.

    ``classes`` restricts the computation to a peer's class subset; the result
    is then aligned with that subset.
    """
    if C <= 0:
        raise ConfigError(f"LDAM margin scale must be > 0, got {C}")
    n = _counts_array(freq, classes)
    if np.any(n <= 0):
        zero = np.flatnonzero(n <= 0).tolist()
        raise ConfigError(
            f"LDAM margins undefined for zero-count classes at positions {zero}; "
            "exclude those classes from the peer or smooth the counts")
    return C * n ** -0.25


def ldam_default_scale(freq, classes=None, max_margin=DEFAULT_MAX_MARGIN) -> float:
    """The C for which the rarest class in ``classes`` gets margin ``max_margin``."""
    n = _counts_array(freq, classes)
    if np.any(n <= 0):
        raise ConfigError("LDAM margin scale undefined with zero-count classes")
    return float(max_margin * n.min() ** 0.25)


def class_balanced_weights(freq, beta, classes=None, normalize=True) -> np.ndarray:
    """Effective-number weights ``(1 - beta) / (1 - beta**n_j)``.

    With ``normalize`` the weights are rescaled to have mean 1 over the
    active classes.
    """
    if not 0 <= beta < 1:
        raise ConfigError(f"class-balanced beta must lie in [0, 1), got {beta}")
    n = _counts_array(freq, classes)
    if n.size == 0:
        raise InputError("no classes to weight")
    if np.any(n < 1):
        raise ConfigError("class-balanced weights need counts >= 1 on every active class")
    if beta == 0:
        raw = np.ones_like(n)
    else:
        raw = (1.0 - beta) / -np.expm1(n * np.log(beta))
    return raw / raw.mean() if normalize else raw
