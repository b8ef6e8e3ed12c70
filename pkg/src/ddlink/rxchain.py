"""Detection chains and Monte-Carlo BER.

OTFS frames are detected with LMMSE on the exact (genie) effective DD
channel, CFO included.  OFDM frames over the same shared-RCP structure
get two receivers: an idealized one-tap equalizer with genie
per-subcarrier gains, and a practical chain that estimates the CFO from
a repeated Zadoff-Chu pilot symbol (Moose), compensates, and equalizes
with least-squares channel estimates from the pilot.

All Monte-Carlo loops draw from per-frame seeded substreams, so results
are bit-for-bit reproducible and order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .access import ddma_mask
from .channel import (
    CfoModel,
    ChannelProfile,
    build_H_DD,
    build_H_TD,
    cfo_shifted_taps,
    raw_taps,
    realize_channel,
)
from .grid import DDGrid, FrameParams, dft_matrix, otfs_modulate, unvec, vec
from .linkmodel import assemble_H_DD

QPSK = "qpsk"
QAM16 = "16qam"


@dataclass(frozen=True)
class Constellation:
    """Unit-energy Gray-labeled constellation."""

    name: str
    points: np.ndarray
    bits_per_symbol: int

    @classmethod
    def make(cls, name: str) -> "Constellation":
        name = name.lower()
        if name == QPSK:
            bits = np.array([[b0, b1] for b0 in (0, 1) for b1 in (0, 1)])
            pts = ((1 - 2 * bits[:, 0]) + 1j * (1 - 2 * bits[:, 1])) / np.sqrt(2)
            return cls(QPSK, pts, 2)
        if name == QAM16:
            gray_level = {0b00: -3, 0b01: -1, 0b11: 1, 0b10: 3}
            pts = np.empty(16, dtype=complex)
            for idx in range(16):
                i_bits, q_bits = idx >> 2, idx & 0b11
                pts[idx] = (gray_level[i_bits] + 1j * gray_level[q_bits]) / np.sqrt(10)
            return cls(QAM16, pts, 4)
        raise ValueError(f"unknown constellation {name!r}")

    def map_bits(self, bits: np.ndarray) -> np.ndarray:
        """Pack groups of bits_per_symbol bits into symbols."""
        bits = np.asarray(bits).reshape(-1, self.bits_per_symbol)
        idx = np.zeros(len(bits), dtype=int)
        for b in range(self.bits_per_symbol):
            idx = (idx << 1) | bits[:, b]
        return self.points[idx]

    def demap_hard(self, symbols: np.ndarray) -> np.ndarray:
        """Nearest-point decision back to bits."""
        symbols = np.asarray(symbols).reshape(-1)
        idx = np.argmin(np.abs(symbols[:, None] - self.points[None, :]), axis=1)
        out = np.empty((len(symbols), self.bits_per_symbol), dtype=np.int8)
        for b in range(self.bits_per_symbol):
            out[:, b] = (idx >> (self.bits_per_symbol - 1 - b)) & 1
        return out.reshape(-1)


@dataclass(frozen=True)
class BerResult:
    scheme: str
    snr_db: float
    epsilon: float
    frames: int
    bits: int
    errors: int
    seed: int

    @property
    def ber(self) -> float:
        return self.errors / self.bits if self.bits else float("nan")


# ---------------------------------------------------------------------------
# detectors
# ---------------------------------------------------------------------------


def lmmse_detect(y: np.ndarray, H, N0: float, symbol_power: float = 1.0) -> np.ndarray:
    """x_hat = H^H (H H^H + (N0/rho) I)^{-1} y.

    H may be dense or scipy-sparse; integer-tap DD channels are sparse
    (P entries per row), which keeps full-size frames fast.
    """
    y = np.asarray(y)
    n = y.size
    reg = N0 / symbol_power
    if sp.issparse(H):
        if H.shape != (n, n):
            raise ValueError(f"channel is {H.shape}, signal length {n}")
        A = (H @ H.conj().T + reg * sp.identity(n, format="csr", dtype=complex)).tocsc()
        z = spla.splu(A).solve(y)
        return np.asarray(H.conj().T @ z)
    H = np.asarray(H)
    if H.shape != (n, n):
        raise ValueError(f"channel is {H.shape}, signal length {n}")
    A = H @ H.conj().T + reg * np.eye(n)
    return H.conj().T @ np.linalg.solve(A, y)


def matched_filter_detect(y: np.ndarray, H) -> np.ndarray:
    """Per-symbol matched filter H^H y with unit-gain normalization."""
    if sp.issparse(H):
        num = np.asarray(H.conj().T @ y)
        gain = np.asarray((H.multiply(H.conj())).sum(axis=0)).reshape(-1).real
    else:
        num = H.conj().T @ y
        gain = np.sum(np.abs(H) ** 2, axis=0)
    return num / np.maximum(gain, 1e-30)


def ofdm_onetap_detect(Y_tf: np.ndarray, diag_gains: np.ndarray, erasure_eps: float = 1e-12):
    """Per-subcarrier division by the (genie) one-tap gains.

    Returns (x_hat, erasure mask); near-zero gains are flagged and
    equalized to zero rather than dividing by ~0.
    """
    Y_tf = np.asarray(Y_tf)
    diag_gains = np.asarray(diag_gains)
    if Y_tf.shape != diag_gains.shape:
        raise ValueError("grid and gain shapes differ")
    erased = np.abs(diag_gains) < erasure_eps
    x_hat = np.where(erased, 0.0, Y_tf / np.where(erased, 1.0, diag_gains))
    return x_hat, erased


# ---------------------------------------------------------------------------
# pilots and synchronization
# ---------------------------------------------------------------------------


def zc_pilot(M: int, root: int = 1) -> np.ndarray:
    """Zadoff-Chu sequence: constant amplitude, zero cyclic autocorrelation."""
    if math.gcd(root, M) != 1:
        raise ValueError(f"root {root} must be coprime with M={M}")
    m = np.arange(M)
    if M % 2 == 0:
        phase = -np.pi * root * m**2 / M
    else:
        phase = -np.pi * root * m * (m + 1) / M
    return np.exp(1j * phase)


def ls_channel_estimate(y_pilot: np.ndarray, pilot: np.ndarray) -> np.ndarray:
    """Per-subcarrier least squares: H_hat[m] = Y[m] / pilot[m]."""
    y_pilot = np.asarray(y_pilot)
    pilot = np.asarray(pilot)
    if y_pilot.shape != pilot.shape:
        raise ValueError("pilot and observation shapes differ")
    return y_pilot / pilot


def moose_cfo_estimate(y1: np.ndarray, y2: np.ndarray) -> float:
    """CFO from two repeated pilot symbols spaced M samples apart:
    eps_hat = arg(sum y2 conj(y1)) / (2 pi), valid on (-0.5, 0.5]."""
    corr = np.vdot(np.asarray(y1), np.asarray(y2))  # sum conj(y1) * y2
    if abs(corr) == 0.0:
        raise ValueError("zero correlation between pilot repetitions")
    return float(np.angle(corr) / (2.0 * np.pi))


def cfo_compensate(r: np.ndarray, eps_hat: float, params: FrameParams) -> np.ndarray:
    """Undo a frame-long CFO phase ramp; exact inverse of apply_cfo."""
    if abs(eps_hat) > 1.0:
        raise ValueError("|eps_hat| must be <= 1")
    q = np.arange(np.asarray(r).size)
    return np.asarray(r) * np.exp(-2j * np.pi * eps_hat * q / params.M)


def ofdm_genie_gains(ch, cfo: CfoModel, params: FrameParams) -> np.ndarray:
    """Diagonal entries of the (n, n) TF blocks of the CFO-composed
    channel, i.e. the ideal one-tap gains, shape (M, N)."""
    M, N, mn = params.M, params.N, params.grid_size
    eps = cfo.epsilon if cfo is not None else 0.0
    m = np.arange(M)
    gains = np.zeros((M, N), dtype=complex)
    for gain, lp, kp in raw_taps(ch) if hasattr(ch, "paths") else ch:
        a = np.arange(lp, M)
        for n in range(N):
            q = n * M + a
            inner = np.sum(
                np.exp(2j * np.pi * kp * (q - lp) / mn) * np.exp(2j * np.pi * eps * q / M)
            )
            gains[:, n] += gain * np.exp(-2j * np.pi * m * lp / M) * inner / M
    return gains


# ---------------------------------------------------------------------------
# frame pipelines
# ---------------------------------------------------------------------------


def _user_masks(params: FrameParams, K: int) -> np.ndarray:
    """Boolean (M, N, K) data masks: contiguous delay rows per user for
    OTFS; the same split read as subcarrier rows for OFDM."""
    return ddma_mask(params, K).s.astype(bool)


def _draw_frame_bits(rng, masks, constellation):
    """Per-user bits for the active blocks of each mask."""
    return [
        rng.integers(0, 2, size=int(masks[:, :, i].sum()) * constellation.bits_per_symbol)
        for i in range(masks.shape[2])
    ]


def _otfs_frame(channels, params, budget_N0, cfo, masks, constellation, rng):
    """One OTFS frame through every user's channel; returns (errors, bits)."""
    K = len(channels)
    X = np.zeros((params.M, params.N), dtype=complex)
    bits = _draw_frame_bits(rng, masks, constellation)
    for i in range(K):
        X[masks[:, :, i]] = constellation.map_bits(bits[i])
    s = otfs_modulate(DDGrid(X, params))
    errors = 0
    total_bits = 0
    for i, ch in enumerate(channels):
        r = build_H_TD(ch, params, cfo).matrix @ s
        if budget_N0 > 0:
            w = math.sqrt(budget_N0 / 2) * (
                rng.standard_normal(params.grid_size) + 1j * rng.standard_normal(params.grid_size)
            )
            r = r + w
        shift = cfo.epsilon * params.N
        if abs(shift - round(shift)) <= 1e-9:
            # integer-bin CFO folds into the taps; the genie channel stays sparse
            taps = cfo_shifted_taps(ch, cfo, params) if cfo.epsilon else raw_taps(ch)
            H_eff = assemble_H_DD(taps, params)
        else:
            # fractional eps*N spreads across Doppler bins; fall back to the
            # dense conjugated channel
            H_eff = build_H_DD(ch, params, cfo).matrix
        y = vec(unvec(r, params.M, params.N) @ dft_matrix(params.N))
        x_hat = lmmse_detect(y, H_eff, budget_N0, symbol_power=1.0)
        X_hat = unvec(x_hat, params.M, params.N)
        got = constellation.demap_hard(X_hat[masks[:, :, i]])
        errors += int(np.sum(got != bits[i]))
        total_bits += bits[i].size
    return errors, total_bits


def _ofdm_frame(channels, params, budget_N0, cfo, masks, constellation, rng,
                practical: bool, zc_root: int = 1, n_pilot_symbols: int = 2):
    """One OFDM frame (shared RCP, N slots x M subcarriers).

    Idealized mode: genie one-tap gains on every slot, all slots data.
    Practical mode: slots 0 and 1 carry a repeated full-band ZC pilot
    (Moose CFO estimate + LS channel estimate), the rest data.
    """
    M, N = params.M, params.N
    K = len(channels)
    F_M = dft_matrix(M)
    data_slots = np.arange(n_pilot_symbols if practical else 0, N)
    X_tf = np.zeros((M, N), dtype=complex)
    pilot = zc_pilot(M, zc_root)
    if practical:
        X_tf[:, 0] = pilot
        X_tf[:, 1] = pilot
    bits = []
    for i in range(K):
        rows = masks[:, 0, i]
        user_bits = rng.integers(
            0, 2, size=int(rows.sum()) * data_slots.size * constellation.bits_per_symbol
        )
        bits.append(user_bits)
        X_tf[np.ix_(rows, data_slots)] = constellation.map_bits(user_bits).reshape(
            int(rows.sum()), data_slots.size
        )
    s = vec(F_M.conj().T @ X_tf)  # Heisenberg transform, one RCP per frame

    errors = 0
    total_bits = 0
    for i, ch in enumerate(channels):
        r = build_H_TD(ch, params, cfo).matrix @ s
        if budget_N0 > 0:
            w = math.sqrt(budget_N0 / 2) * (
                rng.standard_normal(params.grid_size) + 1j * rng.standard_normal(params.grid_size)
            )
            r = r + w
        rows = masks[:, 0, i]
        if practical:
            eps_hat = moose_cfo_estimate(r[:M], r[M:2 * M])
            r = cfo_compensate(r, eps_hat, params)
            Y_tf = F_M @ unvec(r, M, N)
            h_hat = ls_channel_estimate(Y_tf[:, 1], pilot)
            x_hat, _ = ofdm_onetap_detect(
                Y_tf[:, data_slots], np.repeat(h_hat[:, None], data_slots.size, axis=1)
            )
        else:
            Y_tf = F_M @ unvec(r, M, N)
            gains = ofdm_genie_gains(ch, cfo, params)
            x_hat, _ = ofdm_onetap_detect(Y_tf[:, data_slots], gains[:, data_slots])
        got = constellation.demap_hard(x_hat[rows, :])
        errors += int(np.sum(got != bits[i]))
        total_bits += bits[i].size
    return errors, total_bits


SCHEMES = ("otfs-lmmse", "ofdm-1tap", "ofdm-practical")


def ber_monte_carlo(
    scheme: str,
    params: FrameParams,
    profile: ChannelProfile,
    snr_db_list,
    epsilon_list,
    frames: int,
    seed: int,
    K: int = 1,
    constellation: str = QPSK,
    zc_root: int = 1,
    los_doppler_hz: float = None,
) -> list:
    """Seeded BER sweep over (SNR, epsilon) for one detection scheme.

    Each frame draws fresh channel realizations for every user from a
    per-(point, frame) substream, runs the full TX -> channel(+CFO) ->
    RX pipeline and accumulates hard-decision bit errors.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r} (expected one of {SCHEMES})")
    if frames < 1:
        raise ValueError("frames must be >= 1")
    const = Constellation.make(constellation)
    masks = _user_masks(params, K)
    results = []
    for snr_idx, snr_db in enumerate(snr_db_list):
        for eps in epsilon_list:
            # the substream key excludes eps: CFO points share channel,
            # symbol and noise draws (common random numbers)
            N0 = 1.0 / 10 ** (snr_db / 10.0)  # unit symbol power
            cfo = CfoModel(eps)
            errors = 0
            bits = 0
            for frame in range(frames):
                rng = np.random.default_rng(np.random.SeedSequence((seed, snr_idx, frame)))
                try:
                    channels = [
                        realize_channel(profile, params, rng, user_id=u,
                                        los_doppler_hz=los_doppler_hz)
                        for u in range(K)
                    ]
                    if scheme == "otfs-lmmse":
                        e, b = _otfs_frame(channels, params, N0, cfo, masks, const, rng)
                    else:
                        e, b = _ofdm_frame(
                            channels, params, N0, cfo, masks, const, rng,
                            practical=(scheme == "ofdm-practical"), zc_root=zc_root,
                        )
                except Exception as exc:
                    raise RuntimeError(f"{scheme} frame {frame} failed: {exc}") from exc
                errors += e
                bits += b
            results.append(
                BerResult(scheme, float(snr_db), float(eps), frames, bits, errors, seed)
            )
    return results
