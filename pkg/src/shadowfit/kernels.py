"""Kernel functions, bandwidth rules and kernel density estimates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class KernelSpec:
    shape: str = "epanechnikov"
    order_m: int = 2

    def __post_init__(self):
        if self.shape != "epanechnikov":
            raise ValueError(f"unsupported kernel shape {self.shape!r}")
        if self.order_m != 2:
            raise ValueError("the Epanechnikov kernel has order 2")


def kernel_eval(spec: KernelSpec, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.where(np.abs(v) <= 1.0, 0.75 * (1.0 - v * v), 0.0)


def product_kernel(spec: KernelSpec, v, h: float) -> np.ndarray:
    """``h**-d * prod_j K(v_j / h)`` over the trailing axis of ``v``."""
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = v[None]
    d = v.shape[-1]
    return np.prod(kernel_eval(spec, v / h), axis=-1) / h**d


@dataclass(frozen=True)
class BandwidthRule:
    """``c_n_third``: C N^(-1/3); ``c_n_two_sevenths``: C N^(-2/7); ``explicit``: h."""

    rule: str = "c_n_third"
    C: float = 1.5
    h: Optional[float] = None

    def __post_init__(self):
        if self.rule not in ("c_n_third", "c_n_two_sevenths", "explicit"):
            raise ValueError(f"unknown bandwidth rule {self.rule!r}")
        if self.rule == "explicit" and self.h is None:
            raise ValueError("explicit bandwidth needs h")

    @classmethod
    def default_for(cls, d: int) -> "BandwidthRule":
        if d <= 1:
            return cls("c_n_third", 1.5)
        return cls("c_n_two_sevenths", 2.0)


def bandwidth(rule: BandwidthRule, N: int, d: int = 1) -> float:
    if N < 2:
        raise ValueError("bandwidth rules need N >= 2")
    if rule.rule == "c_n_third":
        h = rule.C * N ** (-1.0 / 3.0)
    elif rule.rule == "c_n_two_sevenths":
        h = rule.C * N ** (-2.0 / 7.0)
    else:
        h = float(rule.h)
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    return float(h)


def kde(x_data, spec: KernelSpec, h: float, x0) -> np.ndarray:
    """``N^-1 sum_i K_h(x_i - x0)``; ``x0`` may be a single point or ``(M, d)``."""
    x_data = np.asarray(x_data, dtype=float)
    if x_data.ndim == 1:
        x_data = x_data[:, None]
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim <= 1
    x0 = np.atleast_1d(x0).reshape(-1, x_data.shape[1])
    out = np.empty(x0.shape[0])
    # chunked to bound the (M, N, d) difference array
    step = max(1, 2_000_000 // max(1, x_data.size))
    for s in range(0, x0.shape[0], step):
        diff = x_data[None, :, :] - x0[s : s + step, None, :]
        out[s : s + step] = product_kernel(spec, diff, h).mean(axis=1)
    return out[0] if single else out
