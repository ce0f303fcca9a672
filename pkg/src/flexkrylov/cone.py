"""
Cones of SPD images: the set ``{C x : C SPD, kappa(C) <= kappa_max}`` is the
circular cone ``sin angle(x, y) <= (kappa_max - 1) / (kappa_max + 1)``.

Everything is parametrized by a :class:`~flexkrylov.linalg.Metric`, so the
same constructions work in the A-inner product.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import InputError
from .linalg import Metric, _check_pair

__all__ = ["SpdMapResult", "spectral_bound", "construct_spd_map", "cone_membership",
           "metric_sin"]

# Slack used when classifying points on the cone boundary.
BOUNDARY_SLACK = 1e-12


@dataclass(frozen=True)
class SpdMapResult:
    """An SPD map ``C`` (self-adjoint in the metric) realizing ``C x || y``."""

    C: np.ndarray
    achieved_sin: float
    kappa: float


def spectral_bound(kappa_max: float) -> float:
    """Worst-case per-step error reduction ``(kappa_max - 1) / (kappa_max + 1)``."""
    if not kappa_max >= 1.0:
        raise InputError(f"kappa_max must be >= 1, got {kappa_max}")
    if math.isinf(kappa_max):
        return 1.0
    return (kappa_max - 1.0) / (kappa_max + 1.0)


def _cos_sin(metric: Metric, x, y):
    My = metric.apply(y)
    nx = metric.norm(x)
    ny = math.sqrt(max(float(np.dot(y, My)), 0.0))
    if nx == 0.0 or ny == 0.0:
        raise InputError("zero vector")
    c = min(1.0, max(-1.0, float(np.dot(x, My)) / (nx * ny)))
    # sin from the residual of the projection; stays accurate for tiny angles
    proj = x - (float(np.dot(x, My)) / (ny * ny)) * y
    s = min(1.0, metric.norm(proj) / nx)
    return c, s


def metric_sin(metric: Metric, x, y) -> float:
    """``sin`` of the metric angle between ``x`` and ``y``."""
    x, y = _check_pair(metric, x, y)
    return _cos_sin(metric, x, y)[1]


def construct_spd_map(metric: Metric, x, y) -> SpdMapResult:
    """
    Build ``C = I + sin(alpha) H`` with ``C x`` parallel to ``y``.

    ``y`` is first rescaled to the metric projection of ``x`` onto
    ``span{y}``; ``H`` is the metric Householder reflection taking
    ``sin(alpha) x`` to ``y - x``. ``C`` is self-adjoint in the metric with
    eigenvalues ``1 - sin(alpha)`` (once) and ``1 + sin(alpha)``.

    Raises
    ------
    InputError
        If either vector is zero or the angle is not acute.
    """
    x, y = _check_pair(metric, x, y)
    n = x.shape[0]
    c, s = _cos_sin(metric, x, y)
    if c <= 0.0:
        raise InputError("y lies outside the open half-space around x (angle >= pi/2)")
    eye = np.eye(n)
    if s == 0.0:
        return SpdMapResult(eye, 0.0, 1.0)
    My = metric.apply(y)
    y_proj = (float(np.dot(x, My)) / float(np.dot(y, My))) * y
    v = s * x
    w = v - (y_proj - x)
    wn = metric.norm(w)
    if wn == 0.0:
        return SpdMapResult(eye, 0.0, 1.0)
    w = w / wn
    Mw = metric.apply(w)
    # H z = z - 2 (w, z)_M w
    H = eye - 2.0 * np.outer(w, Mw)
    C = eye + s * H
    return SpdMapResult(C, s, (1.0 + s) / (1.0 - s))


def cone_membership(metric: Metric, x, y, kappa_max: float) -> bool:
    """True iff ``y`` lies in the cone of SPD images of ``x`` with condition <= kappa_max."""
    x, y = _check_pair(metric, x, y)
    bound = spectral_bound(kappa_max)
    c, s = _cos_sin(metric, x, y)
    return c > 0.0 and s <= bound + BOUNDARY_SLACK
