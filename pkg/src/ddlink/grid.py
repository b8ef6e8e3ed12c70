"""Delay-Doppler grid geometry and the OTFS transform chain.

One frame is an M x N lattice (M delay bins / subcarriers, N Doppler
bins / time slots).  This module provides the four lattice transforms
between its delay-Doppler (DD), time-frequency (TF) and time-domain
(TD) representations -- ISFFT/SFFT and Heisenberg/Wigner -- plus the
end-to-end modulate/demodulate chain with diagonal pulse shaping.

Conventions (fixed across the package):
  * all DFT matrices are unitary (1/sqrt(n) scaling),
  * vec() stacks columns (column-major), so sample q = n*M + m,
  * grids are indexed [l, k] (DD), [m, n] (TF/TD).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import dft


@dataclass(frozen=True)
class FrameParams:
    """Grid geometry shared by every module.

    M, N are the delay/Doppler bin counts, delta_f the subcarrier
    spacing in Hz and T the slot duration in seconds (T*delta_f = 1).
    """

    M: int
    N: int
    delta_f: float = 15e3
    T: float = None  # defaults to 1/delta_f

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ValueError(f"M, N must be >= 1, got M={self.M}, N={self.N}")
        if self.delta_f <= 0:
            raise ValueError(f"delta_f must be positive, got {self.delta_f}")
        if self.T is None:
            object.__setattr__(self, "T", 1.0 / self.delta_f)
        elif abs(self.T * self.delta_f - 1.0) > 1e-12:
            raise ValueError(f"T*delta_f must equal 1, got {self.T * self.delta_f}")

    @property
    def grid_size(self) -> int:
        return self.M * self.N

    @property
    def sample_rate(self) -> float:
        """TD sampling rate f_s = M*delta_f."""
        return self.M * self.delta_f


def _check_grid(data: np.ndarray, params: FrameParams, name: str):
    data = np.asarray(data)
    if data.shape != (params.M, params.N):
        raise ValueError(
            f"{name} shape {data.shape} does not match grid "
            f"({params.M}, {params.N})"
        )
    return data.astype(np.complex128, copy=False)


@dataclass(frozen=True)
class DDGrid:
    """M x N delay-Doppler grid; entry [l, k] sits at delay bin l, Doppler bin k."""

    data: np.ndarray
    params: FrameParams

    def __post_init__(self):
        object.__setattr__(self, "data", _check_grid(self.data, self.params, "DDGrid"))


@dataclass(frozen=True)
class TFGrid:
    """M x N time-frequency grid; entry [m, n] sits at subcarrier m, slot n."""

    data: np.ndarray
    params: FrameParams

    def __post_init__(self):
        object.__setattr__(self, "data", _check_grid(self.data, self.params, "TFGrid"))


@dataclass(frozen=True)
class TDGrid:
    """M x N time-domain grid; column n holds the M samples of slot n."""

    data: np.ndarray
    params: FrameParams

    def __post_init__(self):
        object.__setattr__(self, "data", _check_grid(self.data, self.params, "TDGrid"))


@dataclass(frozen=True)
class PulseShape:
    """Diagonal transmit/receive pulse samples (length M each)."""

    g_tx: np.ndarray
    g_rx: np.ndarray

    @classmethod
    def rectangular(cls, M: int) -> "PulseShape":
        """All-ones pulse, G_tx = G_rx = I_M."""
        return cls(np.ones(M), np.ones(M))

    def validated(self, params: FrameParams) -> "PulseShape":
        if len(self.g_tx) != params.M or len(self.g_rx) != params.M:
            raise ValueError("pulse sample vectors must have length M")
        return self


# ---------------------------------------------------------------------------
# vectorization and DFT matrices
# ---------------------------------------------------------------------------


def vec(X: np.ndarray) -> np.ndarray:
    """Column-major stacking of a matrix into a vector."""
    return np.asarray(X).flatten(order="F")


def unvec(x: np.ndarray, M: int, N: int) -> np.ndarray:
    """Inverse of vec: reshape a length-M*N vector into an M x N matrix."""
    x = np.asarray(x)
    if x.size != M * N:
        raise ValueError(f"vector length {x.size} does not match {M}x{N}")
    return x.reshape((M, N), order="F")


def dft_matrix(n: int) -> np.ndarray:
    """Unitary n-point DFT matrix F with F[a, b] = exp(-2j*pi*a*b/n)/sqrt(n)."""
    return dft(n, scale="sqrtn")


# ---------------------------------------------------------------------------
# lattice transforms
# ---------------------------------------------------------------------------


def isfft(dd: DDGrid) -> TFGrid:
    """DD -> TF: X_TF = F_M X_DD F_N^H."""
    p = dd.params
    F_M = dft_matrix(p.M)
    F_N = dft_matrix(p.N)
    return TFGrid(F_M @ dd.data @ F_N.conj().T, p)


def sfft(tf: TFGrid) -> DDGrid:
    """TF -> DD, the exact inverse of isfft: Y_DD = F_M^H Y_TF F_N."""
    p = tf.params
    F_M = dft_matrix(p.M)
    F_N = dft_matrix(p.N)
    return DDGrid(F_M.conj().T @ tf.data @ F_N, p)


def heisenberg(x_tf: np.ndarray, params: FrameParams) -> np.ndarray:
    """TF -> TD on vectors: applies I_N kron F_M^H (per-slot IDFT)."""
    X = unvec(x_tf, params.M, params.N)
    F_M = dft_matrix(params.M)
    return vec(F_M.conj().T @ X)


def wigner(x_td: np.ndarray, params: FrameParams) -> np.ndarray:
    """TD -> TF on vectors: applies I_N kron F_M (per-slot DFT)."""
    X = unvec(x_td, params.M, params.N)
    F_M = dft_matrix(params.M)
    return vec(F_M @ X)


# ---------------------------------------------------------------------------
# modulate / demodulate
# ---------------------------------------------------------------------------


def otfs_modulate(dd: DDGrid, pulse: PulseShape = None) -> np.ndarray:
    """DD grid -> TD sample vector s = vec(G_tx * X_TD).

    The ISFFT and Heisenberg steps collapse to X_TD = X_DD F_N^H, i.e.
    s = (F_N^H kron I_M) x_DD before pulse shaping.  Per-user grids may
    be summed before or after this call (the chain is linear).
    """
    p = dd.params
    pulse = (pulse or PulseShape.rectangular(p.M)).validated(p)
    F_N = dft_matrix(p.N)
    X_td = dd.data @ F_N.conj().T
    return vec(pulse.g_tx[:, None] * X_td)


def otfs_demodulate(r: np.ndarray, params: FrameParams, pulse: PulseShape = None) -> DDGrid:
    """TD sample vector -> DD grid (Wigner transform then SFFT)."""
    r = np.asarray(r)
    if r.size != params.grid_size:
        raise ValueError(f"sample vector length {r.size} != M*N = {params.grid_size}")
    pulse = (pulse or PulseShape.rectangular(params.M)).validated(params)
    Y_td = pulse.g_rx[:, None] * unvec(r, params.M, params.N)
    F_N = dft_matrix(params.N)
    # (F_N kron I_M) vec(Y_TD) = vec(Y_TD F_N) since F_N is symmetric
    return DDGrid(Y_td @ F_N, params)
