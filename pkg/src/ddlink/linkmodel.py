"""Symbol-wise link analytics: interference decomposition, SINR, sum rates.

For OTFS the received DD symbol splits into desired signal (the first,
strongest path of the user's own grid), multipath self-interference
(MPSI, the user's remaining paths) and multiuser interference (MUI,
other users' grids through the receiver's paths), plus noise.  With
i.i.d. Gaussian symbols of per-block power rho the split yields a
closed-form SINR and sum rate.

For OFDM the same accounting happens in the TF domain on M x M blocks
sliced from the effective TF channel: per-subcarrier desired gain, ICI
from the same block, ISI from the previous block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .channel import EffectiveChannel, UserChannel, raw_taps
from .grid import FrameParams

LOG2 = np.log(2.0)


@dataclass(frozen=True)
class LinkBudget:
    """Total transmit power P0 and per-sample noise PSD N0."""

    P0: float
    N0: float

    def __post_init__(self):
        if self.P0 <= 0 or self.N0 <= 0:
            raise ValueError("P0 and N0 must be positive")

    def snr(self, params: FrameParams) -> float:
        """Symbol SNR = P0 / (M*N*N0)."""
        return self.P0 / (params.grid_size * self.N0)

    @classmethod
    def from_snr_db(cls, snr_db: float, params: FrameParams, P0: float = None) -> "LinkBudget":
        """Budget with unit mean symbol power (P0 = M*N) unless P0 is given."""
        if P0 is None:
            P0 = float(params.grid_size)
        snr = 10.0 ** (snr_db / 10.0)
        return cls(P0, P0 / (params.grid_size * snr))


@dataclass(frozen=True)
class PowerGrid:
    """Per-user symbol powers rho[l, k, i] (DD) or rho[m, n, i] (TF)."""

    rho: np.ndarray
    domain: str = "DD"

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        if rho.ndim != 3:
            raise ValueError(f"rho must be M x N x K, got shape {rho.shape}")
        if np.any(rho < 0):
            raise ValueError("symbol powers must be nonnegative")
        if self.domain not in ("DD", "TF"):
            raise ValueError(f"unknown power domain {self.domain!r}")
        object.__setattr__(self, "rho", rho)

    @property
    def num_users(self) -> int:
        return self.rho.shape[2]

    def total(self) -> float:
        return float(self.rho.sum())


@dataclass(frozen=True)
class InterferenceBreakdown:
    """Received-power split at one DD resource block."""

    desired: float
    mpsi: float
    mui: float
    noise: float


@dataclass(frozen=True)
class OfdmInterferenceBreakdown:
    """Received-power split at one TF resource block."""

    desired: float
    ici: float
    isi: float
    noise: float


# ---------------------------------------------------------------------------
# symbol-wise effective coefficients (DD domain)
# ---------------------------------------------------------------------------


def effective_coeff(l: int, k: int, path, params: FrameParams) -> complex:
    """Symbol-wise coefficient g at receive block (l, k) for one path.

    g = h * exp(j*2*pi*k_p*(l-l_p)/MN) when l >= l_p, otherwise the
    delay index wraps and the coefficient picks up exp(-j*2*pi*k/N).
    """
    gain, lp, kp = path.gain, path.delay_tap, path.doppler_tap
    mn = params.grid_size
    d = l - lp
    if d >= 0:
        return gain * np.exp(2j * np.pi * kp * d / mn)
    return gain * np.exp(2j * np.pi * kp * (d % params.M) / mn) * np.exp(-2j * np.pi * k / params.N)


def _coeff_grid(gain, lp, kp, params: FrameParams) -> np.ndarray:
    """effective_coeff evaluated on the whole (l, k) grid for one raw tap."""
    M, N, mn = params.M, params.N, params.grid_size
    ll = np.arange(M)
    wrap = ll < lp
    phase_l = np.where(
        wrap,
        np.exp(2j * np.pi * kp * ((ll - lp) % M) / mn),
        np.exp(2j * np.pi * kp * (ll - lp) / mn),
    )
    g = gain * np.repeat(phase_l[:, None], N, axis=1)
    g[wrap, :] *= np.exp(-2j * np.pi * np.arange(N) / N)[None, :]
    return g


def symbolwise_output(grids, channels, i: int, l: int, k: int, params: FrameParams,
                      N0: float = 0.0):
    """Noiseless Y_DD^{(i)}[l, k] plus its desired/MPSI/MUI power split.

    grids is one M x N symbol matrix per user, channels one UserChannel
    per user; interference is classified with user i's paths (first path
    desired, the rest MPSI; every path of other users' grids is MUI).
    """
    grids = [np.asarray(g) for g in grids]
    if len(grids) != len(channels):
        raise ValueError("need one grid per user channel")
    for g in grids:
        if g.shape != (params.M, params.N):
            raise ValueError(f"grid shape {g.shape} does not match frame")
    ch = channels[i]
    desired = mpsi = mui = 0.0 + 0.0j
    for p_idx, path in enumerate(ch.paths):
        g = effective_coeff(l, k, path, params)
        src = ((l - path.delay_tap) % params.M, (k - path.doppler_tap) % params.N)
        for j, grid in enumerate(grids):
            term = g * grid[src]
            if j != i:
                mui += term
            elif p_idx == 0:
                desired += term
            else:
                mpsi += term
    y = desired + mpsi + mui
    split = InterferenceBreakdown(
        abs(desired) ** 2, abs(mpsi) ** 2, abs(mui) ** 2, float(N0)
    )
    return y, split


def assemble_H_DD(taps, params: FrameParams) -> sp.csr_matrix:
    """Sparse effective DD channel assembled row-by-row from the
    symbol-wise relation (independent of the TD-matrix conjugation route).

    taps are raw (gain, delay_tap, doppler_tap) triples; the Doppler
    exponent may be any integer (unreduced), as needed for CFO-composed
    channels.
    """
    M, N, mn = params.M, params.N, params.grid_size
    ll, kk = np.meshgrid(np.arange(M), np.arange(N), indexing="ij")
    row = kk * M + ll  # vec index of receive block (l, k)
    rows, cols, vals = [], [], []
    for gain, lp, kp in taps:
        col = ((kk - kp) % N) * M + (ll - lp) % M
        rows.append(row.ravel())
        cols.append(col.ravel())
        vals.append(_coeff_grid(gain, lp, kp, params).ravel())
    H = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mn, mn),
    )
    return H.tocsr()


def assemble_H_DD_for(ch: UserChannel, params: FrameParams) -> sp.csr_matrix:
    return assemble_H_DD(raw_taps(ch), params)


# ---------------------------------------------------------------------------
# OTFS SINR and sum rate
# ---------------------------------------------------------------------------


def interference_power_grids(rho: PowerGrid, channels, params: FrameParams):
    """Analytic desired/MPSI/MUI power grids, each M x N x K.

    Entry [l, k, i] is the mean received power of that class at user i's
    block (l, k) for i.i.d. symbols with variances rho.
    """
    if rho.domain != "DD":
        raise ValueError("OTFS analytics need a DD-domain power grid")
    K = len(channels)
    if rho.num_users != K:
        raise ValueError("power grid user count does not match channels")
    shape = (params.M, params.N, K)
    if rho.rho.shape != shape:
        raise ValueError(f"rho shape {rho.rho.shape} != {shape}")
    desired = np.zeros(shape)
    mpsi = np.zeros(shape)
    mui = np.zeros(shape)
    total = rho.rho.sum(axis=2)
    for i, ch in enumerate(channels):
        own = rho.rho[:, :, i]
        others = total - own
        for p_idx, path in enumerate(ch.paths):
            w = abs(path.gain) ** 2
            shift = (path.delay_tap, path.doppler_tap)
            own_shifted = np.roll(own, shift, axis=(0, 1))
            mui[:, :, i] += w * np.roll(others, shift, axis=(0, 1))
            if p_idx == 0:
                desired[:, :, i] = w * own_shifted
            else:
                mpsi[:, :, i] += w * own_shifted
    return desired, mpsi, mui


def otfs_sinr_grid(rho: PowerGrid, channels, params: FrameParams, N0: float) -> np.ndarray:
    """Gamma[l, k, i] for every user and resource block."""
    if N0 <= 0:
        raise ValueError("N0 must be positive")
    desired, mpsi, mui = interference_power_grids(rho, channels, params)
    return desired / (mpsi + mui + N0)


def otfs_sinr(i: int, l: int, k: int, rho: PowerGrid, channels, params: FrameParams,
              N0: float) -> float:
    return float(otfs_sinr_grid(rho, channels, params, N0)[l, k, i])


def otfs_sum_rate(rho: PowerGrid, channels, params: FrameParams, N0: float) -> float:
    """R = sum over (i, l, k) of 0.5*log2(1 + Gamma)."""
    gamma = otfs_sinr_grid(rho, channels, params, N0)
    return float(0.5 * np.log2(1.0 + gamma).sum())


# ---------------------------------------------------------------------------
# OFDM blocks and sum rate (TF domain)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OfdmBlocks:
    """Per-slot M x M channel blocks sliced from an MN x MN TF matrix.

    diag_blocks[n] is block (n, n); isi_blocks[n] is block (n, n-1)
    (zero for n = 0).  residual_energy is the total squared Frobenius
    norm of every other block -- reported as a diagnostic, not used in
    the rate formulas.
    """

    diag_blocks: np.ndarray
    isi_blocks: np.ndarray
    residual_energy: float


def ofdm_block_channels(H_tf: EffectiveChannel) -> OfdmBlocks:
    if H_tf.domain != "TF":
        raise ValueError(f"expected a TF-domain channel, got {H_tf.domain}")
    M, N = H_tf.params.M, H_tf.params.N
    H4 = H_tf.matrix.reshape(N, M, N, M)
    diag = np.array([H4[n, :, n, :] for n in range(N)])
    isi = np.zeros_like(diag)
    for n in range(1, N):
        isi[n] = H4[n, :, n - 1, :]
    total = float(np.sum(np.abs(H_tf.matrix) ** 2))
    kept = float(np.sum(np.abs(diag) ** 2) + np.sum(np.abs(isi) ** 2))
    return OfdmBlocks(diag, isi, max(total - kept, 0.0))


def ofdm_interference_power_grids(rho: PowerGrid, blocks_per_user, params: FrameParams):
    """Analytic desired/ICI/ISI power grids for OFDM, each M x N x K."""
    if rho.domain != "TF":
        raise ValueError("OFDM analytics need a TF-domain power grid")
    K = len(blocks_per_user)
    shape = (params.M, params.N, K)
    if rho.rho.shape != shape:
        raise ValueError(f"rho shape {rho.rho.shape} != {shape}")
    total = rho.rho.sum(axis=2)  # (M, N)
    desired = np.zeros(shape)
    ici = np.zeros(shape)
    isi = np.zeros(shape)
    for i, blocks in enumerate(blocks_per_user):
        for n in range(params.N):
            A = np.abs(blocks.diag_blocks[n]) ** 2
            diagA = np.diag(A)
            desired[:, n, i] = diagA * rho.rho[:, n, i]
            ici[:, n, i] = A @ total[:, n] - diagA * total[:, n]
            if n >= 1:
                B = np.abs(blocks.isi_blocks[n]) ** 2
                isi[:, n, i] = B @ total[:, n - 1]
    return desired, ici, isi


def ofdm_sum_rate(rho: PowerGrid, blocks_per_user, params: FrameParams, N0: float) -> float:
    """Sum of 0.5*log2(1 + desired/(ICI + ISI + N0)) over users and TF blocks."""
    if N0 <= 0:
        raise ValueError("N0 must be positive")
    desired, ici, isi = ofdm_interference_power_grids(rho, blocks_per_user, params)
    return float(0.5 * np.log2(1.0 + desired / (ici + isi + N0)).sum())
