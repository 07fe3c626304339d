"""Exact kNN kernels: pairwise distances, k-th neighbour radii, ball membership.

``KERNELS[backend]`` holds the three functions for ``"numba"`` and ``"numpy"``.
"""
from __future__ import annotations

import numpy as np

from ._accel import HAVE_NUMBA, default_backend, njit


# -- numba ---------------------------------------------------------------

@njit
def _pairwise_nb(a, b):
    na, nb, f = a.shape[0], b.shape[0], a.shape[1]
    out = np.empty((na, nb))
    for i in range(na):
        for j in range(nb):
            acc = 0.0
            for t in range(f):
                d = a[i, t] - b[j, t]
                acc += d * d
            out[i, j] = np.sqrt(acc)
    return out


@njit
def _radii_nb(dist, k):
    # keep the k smallest off-diagonal entries of each row in a sorted buffer
    n = dist.shape[0]
    out = np.empty(n)
    buf = np.empty(k)
    for i in range(n):
        m = 0
        for j in range(n):
            if j == i:
                continue
            v = dist[i, j]
            if m < k:
                p = m
                m += 1
            elif v < buf[k - 1]:
                p = k - 1
            else:
                continue
            while p > 0 and buf[p - 1] > v:
                buf[p] = buf[p - 1]
                p -= 1
            buf[p] = v
        out[i] = buf[k - 1]
    return out


@njit
def _ball_nb(dist, radii):
    nq, nc = dist.shape
    counts = np.zeros(nq, dtype=np.int64)
    covered = np.zeros(nc, dtype=np.bool_)
    for q in range(nq):
        for c in range(nc):
            if dist[q, c] <= radii[c]:
                counts[q] += 1
                covered[c] = True
    return counts, covered


# -- numpy ---------------------------------------------------------------

def _pairwise_np(a, b):
    acc = np.zeros((a.shape[0], b.shape[0]))
    for t in range(a.shape[1]):
        d = a[:, t][:, None] - b[:, t][None, :]
        acc += d * d
    return np.sqrt(acc)


def _radii_np(dist, k):
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def _ball_np(dist, radii):
    inside = dist <= radii[None, :]
    return inside.sum(1).astype(np.int64), inside.any(0)


KERNELS = {"numpy": (_pairwise_np, _radii_np, _ball_np)}
if HAVE_NUMBA:
    KERNELS["numba"] = (_pairwise_nb, _radii_nb, _ball_nb)


def get_kernels(backend: str | None = None):
    backend = backend or default_backend()
    if backend not in KERNELS:
        raise ValueError(f"unknown or unavailable backend {backend!r}; have {sorted(KERNELS)}")
    return KERNELS[backend]


def pairwise_distances(a, b, backend=None):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return get_kernels(backend)[0](a, b)


def kth_radii(dist, k, backend=None):
    return get_kernels(backend)[1](np.ascontiguousarray(dist, dtype=np.float64), int(k))


def ball_membership(dist, radii, backend=None):
    return get_kernels(backend)[2](np.ascontiguousarray(dist, dtype=np.float64),
                                   np.ascontiguousarray(radii, dtype=np.float64))
