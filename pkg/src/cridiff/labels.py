"""Decouple a binary mask into soft boundary/core labels via distance transform.

The core label weights interior pixels (high normalized distance to
background), the boundary label weights rim pixels; they always sum back to
the original mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_INF = 1e20


@dataclass(frozen=True)
class DecoupledLabels:
    g_p: np.ndarray  # binary mask, float64 {0,1}
    i_prime: np.ndarray  # normalized distance map in [0,1]
    g_b: np.ndarray  # soft boundary label g_p * (1 - I')
    g_c: np.ndarray  # soft core label g_p * I'


def _edt_1d_sq(f: np.ndarray) -> np.ndarray:
    """Felzenszwalb-Huttenlocher 1D squared distance transform of f."""
    n = f.shape[0]
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    z[0] = -_INF
    z[1] = _INF
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = _INF
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each foreground pixel to nearest background.

    Background pixels map to 0. An all-foreground mask has no background to
    measure against; distances saturate at the _INF sentinel's square root,
    which never occurs for the nonempty-background masks used here.
    """
    m = _as_binary(mask)
    # Squared distance to nearest background: background cells cost 0.
    f = np.where(m > 0, _INF, 0.0)
    # Column pass then row pass of the 1D transform.
    col = np.empty_like(f)
    for j in range(f.shape[1]):
        col[:, j] = _edt_1d_sq(f[:, j])
    out = np.empty_like(f)
    for i in range(f.shape[0]):
        out[i, :] = _edt_1d_sq(col[i, :])
    return np.sqrt(out)


def normalize01(dt_map: np.ndarray) -> np.ndarray:
    """Divide by the global maximum; an all-zero map stays all-zero."""
    dt_map = np.asarray(dt_map, dtype=np.float64)
    if (dt_map < 0).any():
        raise ValueError("distance map must be non-negative")
    peak = dt_map.max()
    if peak == 0:
        return np.zeros_like(dt_map)
    return dt_map / peak


def decouple_labels(g_p: np.ndarray) -> DecoupledLabels:
    """Split a binary mask into soft core (g_p*I') and boundary (g_p*(1-I'))."""
    g = _as_binary(g_p)
    i_prime = normalize01(distance_transform(g))
    g_c = g * i_prime
    g_b = g * (1.0 - i_prime)
    return DecoupledLabels(g_p=g, i_prime=i_prime, g_b=g_b, g_c=g_c)


def _as_binary(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    vals = np.unique(m)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"mask must be binary {{0,1}}, found values {vals[:8]}")
    return m.astype(np.float64)
