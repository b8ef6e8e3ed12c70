"""Orthogonal multiple-access schedules on the delay-Doppler grid.

Four deterministic schemes assign disjoint resource blocks to K users:
contiguous delay rows (DDMA), contiguous Doppler columns (DoDMA),
rectangular tiles (DDoDMA) and periodic interleaving (DDoIDMA).  Tile
and comb indexing is 0-based and reproduces the reference 4-user, 4x4
layouts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .grid import FrameParams
from .linkmodel import PowerGrid


@dataclass(frozen=True)
class ScheduleMask:
    """Binary occupancy tensor s[l, k, i]; at most one user per block."""

    s: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s)
        if s.ndim != 3:
            raise ValueError(f"mask must be M x N x K, got shape {s.shape}")
        if not np.all((s == 0) | (s == 1)):
            raise ValueError("mask entries must be 0 or 1")
        if np.any(s.sum(axis=2) > 1):
            raise ValueError("each resource block may carry at most one user")
        object.__setattr__(self, "s", s.astype(np.int8))

    @property
    def num_users(self) -> int:
        return self.s.shape[2]

    def blocks_per_user(self) -> np.ndarray:
        return self.s.sum(axis=(0, 1))


def _require_divides(a: int, b: int, what: str):
    if b % a != 0:
        raise ValueError(f"{what}: {a} does not divide {b}")


def ddma_mask(params: FrameParams, K: int) -> ScheduleMask:
    """User i owns the contiguous delay rows [i*M/K, (i+1)*M/K) across all k."""
    _require_divides(K, params.M, "DDMA needs K | M")
    s = np.zeros((params.M, params.N, K), dtype=np.int8)
    step = params.M // K
    for i in range(K):
        s[i * step:(i + 1) * step, :, i] = 1
    return ScheduleMask(s)


def dodma_mask(params: FrameParams, K: int) -> ScheduleMask:
    """User i owns the contiguous Doppler columns [i*N/K, (i+1)*N/K) across all l."""
    _require_divides(K, params.N, "DoDMA needs K | N")
    s = np.zeros((params.M, params.N, K), dtype=np.int8)
    step = params.N // K
    for i in range(K):
        s[:, i * step:(i + 1) * step, i] = 1
    return ScheduleMask(s)


def ddodma_mask(params: FrameParams, K: int) -> ScheduleMask:
    """User i owns one (M/sqrt(K)) x (N/sqrt(K)) tile; tiles are indexed
    (i // sqrt(K), i mod sqrt(K)) in 0-based (delay-block, Doppler-block) order."""
    root = math.isqrt(K)
    if root * root != K:
        raise ValueError(f"DDoDMA needs a square user count, got K={K}")
    _require_divides(root, params.M, "DDoDMA needs sqrt(K) | M")
    _require_divides(root, params.N, "DDoDMA needs sqrt(K) | N")
    s = np.zeros((params.M, params.N, K), dtype=np.int8)
    dl, dk = params.M // root, params.N // root
    for i in range(K):
        r, c = divmod(i, root)
        s[r * dl:(r + 1) * dl, c * dk:(c + 1) * dk, i] = 1
    return ScheduleMask(s)


def ddoidma_mask(params: FrameParams, K: int, g1: int = None, g2: int = None) -> ScheduleMask:
    """Periodic interleaving: user i owns blocks l = (i mod g1) + g1*v,
    k = (i // g1) + g2*u, with K = g1*g2 (defaults g1 = g2 = sqrt(K))."""
    if g1 is None and g2 is None:
        root = math.isqrt(K)
        if root * root != K:
            raise ValueError(
                f"DDoIDMA needs explicit g1, g2 when K={K} is not a perfect square"
            )
        g1 = g2 = root
    if g1 is None or g2 is None or g1 * g2 != K:
        raise ValueError(f"DDoIDMA needs g1*g2 = K, got g1={g1}, g2={g2}, K={K}")
    _require_divides(g1, params.M, "DDoIDMA needs g1 | M")
    _require_divides(g2, params.N, "DDoIDMA needs g2 | N")
    s = np.zeros((params.M, params.N, K), dtype=np.int8)
    for i in range(K):
        s[(i % g1)::g1, (i // g1)::g2, i] = 1
    return ScheduleMask(s)


SCHEME_BUILDERS = {
    "ddma": ddma_mask,
    "dodma": dodma_mask,
    "ddodma": ddodma_mask,
    "ddoidma": ddoidma_mask,
}


def oma_mask(scheme: str, params: FrameParams, K: int) -> ScheduleMask:
    """Mask by scheme name (ddma, dodma, ddodma, ddoidma)."""
    try:
        builder = SCHEME_BUILDERS[scheme.lower()]
    except KeyError:
        raise ValueError(f"unknown access scheme {scheme!r}") from None
    return builder(params, K)


def uniform_power(mask: ScheduleMask, P0: float, domain: str = "DD") -> PowerGrid:
    """Spread P0 evenly over the active blocks of a mask."""
    active = int(mask.s.sum())
    if active == 0:
        raise ValueError("mask has no active blocks")
    return PowerGrid(mask.s * (P0 / active), domain=domain)


def mask_to_csv(mask: ScheduleMask, path):
    """Dump the active blocks as (l, k, user) triples."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["l", "k", "user"])
        for l, k, i in np.argwhere(mask.s == 1):
            writer.writerow([l, k, i])
