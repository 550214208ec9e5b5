"""Dense float64 kernels with analytic gradients.

Matrices are plain 2-D ``numpy.float64`` arrays; vectors are 1-D arrays.
Layer normalization, GELU and their backward passes operate along the last
axis so the same code serves single rows and whole k x N tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf

from .errors import DimensionError, ParameterError

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check.

    Vectors are accepted on either side (numpy semantics) so the model code
    can use the same entry point for matrix-vector products.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inner_a = a.shape[-1]
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.ndim == 0 or b.ndim == 0 or inner_a != inner_b:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
               eps: float = LN_EPS) -> np.ndarray:
    """Normalize along the last axis using the population variance."""
    y, _ = layer_norm_forward(x, gain, bias, eps)
    return y


@dataclass
class LayerNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gain: np.ndarray


def layer_norm_forward(x, gain, bias, eps: float = LN_EPS):
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 1:
        raise DimensionError("layer_norm needs at least one channel")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            f"layer_norm affine terms {gain.shape}/{bias.shape} do not match "
            f"channel count {n}")
    if eps <= 0:
        raise ParameterError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, LayerNormCache(xhat, inv_std, gain)


def layer_norm_backward(dy: np.ndarray, cache: LayerNormCache):
    """Return ``(dx, dgain, dbias)``; gain/bias grads are summed over rows."""
    xhat = cache.xhat
    lead = tuple(range(dy.ndim - 1))
    dgain = np.sum(dy * xhat, axis=lead)
    dbias = np.sum(dy, axis=lead)
    dxhat = dy * cache.gain
    dx = cache.inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def norm_cdf(x):
    return 0.5 * (1.0 + erf(np.asarray(x, dtype=np.float64) / _SQRT2))


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    x = np.asarray(x, dtype=np.float64)
    return x * norm_cdf(x)


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return norm_cdf(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target: int) -> tuple[float, np.ndarray]:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError(f"logits must be a vector, got shape {z.shape}")
    c = z.shape[0]
    if not 0 <= int(target) < c:
        raise IndexError(f"target {target} out of range for {c} classes")
    shifted = z - z.max()
    lse = math.log(float(np.sum(np.exp(shifted))))
    loss = lse - float(shifted[target])
    grad = np.exp(shifted - lse)
    grad[target] -= 1.0
    return loss, grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    location: tuple[str, tuple[int, ...]] | None
    per_block: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"grad check {status}: max rel err {self.max_rel_error:.3e} "
                f"at {self.location} over {self.checked} coordinates")


def finite_diff_check(
    f: Callable[[], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    names=None,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f`` is re-evaluated after perturbing each coordinate of ``params`` in
    place (the original value is restored afterwards). The relative error of
    a coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``. Central
    differences of an O(1) loss carry roundoff near ``eps / h ~ 1e-11``, so
    gradients that are structurally zero (e.g. a bias whose effect a later
    layer norm cancels) are judged against the floor instead of dividing
    noise by zero.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ParameterError(f"step h={h} outside [1e-6, 1e-4]")
    worst = 0.0
    where = None
    per_block = {}
    count = 0
    for name in (names if names is not None else list(params)):
        p = params[name]
        g = np.asarray(analytic[name])
        if g.shape != p.shape:
            raise DimensionError(
                f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        block_worst = 0.0
        flat = p.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f()
            flat[idx] = orig - h
            fm = f()
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(g.reshape(-1)[idx])
            denom = max(abs(a), abs(numeric), abs_floor)
            rel = abs(a - numeric) / denom
            count += 1
            if rel > block_worst:
                block_worst = rel
            if rel > worst:
                worst = rel
                where = (name, tuple(int(i) for i in np.unravel_index(idx, p.shape)))
        per_block[name] = block_worst
    return GradCheckReport(worst, where, per_block, tol, count)
