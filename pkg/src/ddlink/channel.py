"""Linear time-varying channels on the delay-Doppler lattice.

Channel realizations follow the 3GPP NTN tapped-delay-line profiles
(NTN-TDL-B: four Rayleigh taps; NTN-TDL-D: a Ricean LOS tap plus two
Rayleigh taps).  Each realized path is an integer (delay, Doppler) tap
pair with a complex gain; fractional taps are rejected.  From a path
list the module builds the MN x MN effective channel matrix in the TD,
DD or TF representation, injects carrier frequency offset as a
frame-long progressive phase, and applies the channel with AWGN.

Tap power normalization: total mean path power is 1, so the symbol SNR
P0/(M*N*N0) is interpretable directly.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .grid import FrameParams, dft_matrix

# Worst-case terminal Doppler for the reference scenario: 500 km/h UE under a
# 2 GHz S-band carrier.
DEFAULT_MAX_DOPPLER_HZ = (500.0 / 3.6) / 299_792_458.0 * 2e9

RAYLEIGH = "rayleigh"
RICEAN_LOS = "ricean-los"


def db_to_linear(x_db: float) -> float:
    return 10.0 ** (x_db / 10.0)


# ---------------------------------------------------------------------------
# path / channel containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Path:
    """One channel path: complex gain, integer delay tap, integer Doppler tap."""

    gain: complex
    delay_tap: int
    doppler_tap: int

    def __post_init__(self):
        for name in ("delay_tap", "doppler_tap"):
            v = getattr(self, name)
            if v != int(v):
                raise ValueError(f"{name} must be an integer bin, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.delay_tap < 0:
            raise ValueError(f"delay_tap must be >= 0, got {self.delay_tap}")


@dataclass(frozen=True)
class UserChannel:
    """Per-user path list; the first entry is the designated desired path."""

    paths: tuple
    user_id: int = 0

    def __post_init__(self):
        paths = tuple(self.paths)
        if not paths:
            raise ValueError("a channel needs at least one path")
        seen = {(p.delay_tap, p.doppler_tap) for p in paths}
        if len(seen) != len(paths):
            raise ValueError("paths must have distinct (delay, Doppler) tap pairs")
        object.__setattr__(self, "paths", paths)

    @classmethod
    def from_taps(cls, gains, delay_taps, doppler_taps, params: FrameParams, user_id=0):
        """Build a channel from parallel tap arrays, normalizing Doppler mod N."""
        paths = []
        for h, l, k in zip(gains, delay_taps, doppler_taps):
            if l != int(l) or k != int(k):
                raise ValueError(f"fractional tap ({l}, {k}) rejected")
            if not 0 <= int(l) < params.M:
                raise ValueError(f"delay tap {l} outside [0, {params.M})")
            paths.append(Path(complex(h), int(l), int(k) % params.N))
        return cls(tuple(paths), user_id)

    @property
    def num_paths(self) -> int:
        return len(self.paths)


@dataclass(frozen=True)
class CfoModel:
    """Normalized carrier frequency offset epsilon = f_offset / delta_f."""

    epsilon: float

    def __post_init__(self):
        if abs(self.epsilon) > 1.0:
            raise ValueError(f"|epsilon| must be <= 1, got {self.epsilon}")


@dataclass(frozen=True)
class EffectiveChannel:
    """MN x MN channel matrix in one representation (TD, DD or TF)."""

    matrix: np.ndarray
    domain: str
    params: FrameParams

    def __post_init__(self):
        mn = self.params.grid_size
        m = np.asarray(self.matrix, dtype=np.complex128)
        if m.shape != (mn, mn):
            raise ValueError(f"channel matrix must be {mn}x{mn}, got {m.shape}")
        if self.domain not in ("TD", "DD", "TF"):
            raise ValueError(f"unknown domain {self.domain!r}")
        object.__setattr__(self, "matrix", m)


# ---------------------------------------------------------------------------
# NTN-TDL profiles (power delay profiles + fading distribution per tap)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProfileTap:
    normalized_delay: float
    power_db: float
    fading: str

    def __post_init__(self):
        if self.fading not in (RAYLEIGH, RICEAN_LOS):
            raise ValueError(f"unknown fading kind {self.fading!r}")


@dataclass(frozen=True)
class ChannelProfile:
    """Named tap table plus the scaling constants (delay spread, max Doppler)."""

    name: str
    taps: tuple
    delay_spread: float
    max_doppler: float

    def __post_init__(self):
        if not self.taps:
            raise ValueError("profile needs at least one tap")
        if self.delay_spread <= 0 or self.max_doppler < 0:
            raise ValueError("delay_spread must be > 0 and max_doppler >= 0")
        object.__setattr__(self, "taps", tuple(self.taps))


NTN_TDL_B_TAPS = (
    ProfileTap(0.0, 0.0, RAYLEIGH),
    ProfileTap(0.7429, -1.973, RAYLEIGH),
    ProfileTap(0.7410, -4.332, RAYLEIGH),
    ProfileTap(5.792, -11.914, RAYLEIGH),
)

NTN_TDL_D_TAPS = (
    ProfileTap(0.0, -0.284, RICEAN_LOS),
    ProfileTap(0.0, -11.991, RAYLEIGH),
    ProfileTap(0.5596, -9.887, RAYLEIGH),
    ProfileTap(7.3340, -16.771, RAYLEIGH),
)


def default_delay_spread(params: FrameParams, factor: float = 8.0) -> float:
    """Delay spread mapping the largest NTN-TDL normalized delay inside the grid
    at M=64: tau_spread = factor / (M * delta_f)."""
    return factor / (params.M * params.delta_f)


def make_profile(name, params=None, delay_spread=None, max_doppler=DEFAULT_MAX_DOPPLER_HZ,
                 tau_spread_factor=8.0) -> ChannelProfile:
    """Built-in profile by name ('ntn-tdl-b' or 'ntn-tdl-d')."""
    key = name.strip().lower().replace("_", "-")
    taps = {"ntn-tdl-b": NTN_TDL_B_TAPS, "ntn-tdl-d": NTN_TDL_D_TAPS}.get(key)
    if taps is None:
        raise ValueError(f"unknown profile {name!r} (expected ntn-tdl-b or ntn-tdl-d)")
    if delay_spread is None:
        if params is None:
            raise ValueError("need FrameParams or an explicit delay_spread")
        delay_spread = default_delay_spread(params, tau_spread_factor)
    return ChannelProfile(key, taps, delay_spread, max_doppler)


def load_profile(path) -> ChannelProfile:
    """Parse a profile from a key-value text file.

    Format (one item per line, '#' starts a comment)::

        name = my-profile
        delay_spread = 5.3333e-05      # seconds
        max_doppler = 926.6            # Hz
        tap 1 normalized_delay=0      power_db=0      fading=rayleigh
        tap 2 normalized_delay=0.7429 power_db=-1.973 fading=rayleigh
    """
    scalars = {}
    taps = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                if line.startswith("tap"):
                    fields = dict(
                        kv.split("=", 1) for kv in re.split(r"\s+", line)[2:]
                    )
                    taps.append(
                        ProfileTap(
                            float(fields.pop("normalized_delay")),
                            float(fields.pop("power_db")),
                            fields.pop("fading").lower(),
                        )
                    )
                    if fields:
                        raise ValueError(f"unknown tap fields {sorted(fields)}")
                else:
                    key, value = (s.strip() for s in line.split("=", 1))
                    scalars[key] = value
            except Exception as exc:
                raise ValueError(f"{path}:{lineno}: cannot parse {raw.rstrip()!r}: {exc}") from exc
    unknown = set(scalars) - {"name", "delay_spread", "max_doppler"}
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        return ChannelProfile(
            scalars.get("name", "custom"),
            tuple(taps),
            float(scalars["delay_spread"]),
            float(scalars.get("max_doppler", DEFAULT_MAX_DOPPLER_HZ)),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing required key {exc}") from exc


def save_profile(profile: ChannelProfile, path):
    """Write a profile in the load_profile text format."""
    with open(path, "w") as fh:
        fh.write(f"name = {profile.name}\n")
        fh.write(f"delay_spread = {profile.delay_spread!r}\n")
        fh.write(f"max_doppler = {profile.max_doppler!r}\n")
        for idx, tap in enumerate(profile.taps, start=1):
            fh.write(
                f"tap {idx} normalized_delay={tap.normalized_delay!r} "
                f"power_db={tap.power_db!r} fading={tap.fading}\n"
            )


# ---------------------------------------------------------------------------
# channel realization
# ---------------------------------------------------------------------------


def _merged_taps(profile: ChannelProfile):
    """Group profile rows by delay; a Ricean LOS row merges with co-located
    Rayleigh rows into one Ricean tap (specular + diffuse power)."""
    groups = {}
    order = []
    for tap in profile.taps:
        key = tap.normalized_delay
        if key not in groups:
            groups[key] = {"specular": 0.0, "diffuse": 0.0}
            order.append(key)
        part = "specular" if tap.fading == RICEAN_LOS else "diffuse"
        groups[key][part] += db_to_linear(tap.power_db)
    return [(delay, groups[delay]["specular"], groups[delay]["diffuse"]) for delay in order]


def realize_channel(
    profile: ChannelProfile,
    params: FrameParams,
    rng,
    user_id: int = 0,
    los_doppler_hz: float = None,
    max_retries: int = 8,
) -> UserChannel:
    """Draw one channel realization from a profile.

    Gains are Rayleigh (circular Gaussian with variance equal to the
    linear tap power) or Ricean for the LOS tap, normalized to unit
    total mean power.  Delay taps are round(normalized_delay *
    delay_spread * M * delta_f); Doppler taps follow a Jakes-style
    f_d*cos(theta) draw rounded to the nearest bin, except the LOS tap
    whose Doppler is fixed (defaults to the maximum f_d, worst case).
    Colliding (delay, Doppler) pairs trigger a bounded Doppler re-draw.
    """
    rng = np.random.default_rng(rng)
    merged = _merged_taps(profile)
    total_power = sum(spec + diff for _, spec, diff in merged)
    nt = params.N * params.T
    if los_doppler_hz is None:
        los_doppler_hz = profile.max_doppler
    los_tap = int(round(los_doppler_hz * nt))

    taps = []
    for norm_delay, spec, diff in merged:
        delay_tap = int(round(norm_delay * profile.delay_spread * params.M * params.delta_f))
        if delay_tap >= params.M:
            raise ValueError(
                f"normalized delay {norm_delay} maps to tap {delay_tap} >= M={params.M}; "
                "reduce the profile delay_spread"
            )
        taps.append((delay_tap, spec / total_power, diff / total_power))

    # strongest tap first: it carries the desired signal downstream
    taps.sort(key=lambda t: -(t[1] + t[2]))

    def draw_doppler():
        theta = rng.uniform(0.0, 2.0 * np.pi)
        return int(round(profile.max_doppler * math.cos(theta) * nt)) % params.N

    used = set()
    paths = []
    for delay_tap, spec, diff in taps:
        gain = 0.0 + 0.0j
        if spec > 0.0:
            gain += math.sqrt(spec) * np.exp(1j * rng.uniform(0.0, 2.0 * np.pi))
        if diff > 0.0:
            gain += math.sqrt(diff / 2.0) * (rng.standard_normal() + 1j * rng.standard_normal())
        doppler_tap = los_tap % params.N if spec > 0.0 else draw_doppler()
        retries = 0
        while (delay_tap, doppler_tap) in used:
            if spec > 0.0 or retries >= max_retries:
                raise RuntimeError(
                    f"could not place tap at delay {delay_tap} with a distinct "
                    f"Doppler bin after {retries} re-draws"
                )
            doppler_tap = draw_doppler()
            retries += 1
        used.add((delay_tap, doppler_tap))
        paths.append(Path(complex(gain), delay_tap, doppler_tap))

    return UserChannel(tuple(paths), user_id)


# ---------------------------------------------------------------------------
# effective channel matrices
# ---------------------------------------------------------------------------


def raw_taps(ch: UserChannel):
    """Tap triples (gain, delay_tap, doppler_tap) of a channel."""
    return tuple((p.gain, p.delay_tap, p.doppler_tap) for p in ch.paths)


def build_H_TD_from_taps(taps, params: FrameParams) -> EffectiveChannel:
    """H_TD = sum h Pi^l Delta^k from raw (gain, l, k) triples.

    k may be any integer here: Delta^k and Delta^{k mod N} differ by a
    progressive per-sample phase, so composite channels (e.g. CFO folded
    into the taps) need the unreduced exponent.
    """
    mn = params.grid_size
    H = np.zeros((mn, mn), dtype=np.complex128)
    rows = np.arange(mn)
    for gain, l, k in taps:
        cols = (rows - l) % mn
        H[rows, cols] += gain * np.exp(2j * np.pi * k * cols / mn)
    return EffectiveChannel(H, "TD", params)


def build_H_TD(ch: UserChannel, params: FrameParams, cfo: "CfoModel" = None) -> EffectiveChannel:
    """H_TD = sum_p h_p Pi^{l_p} Delta^{k_p} (cyclic shift + progressive phase).

    With a CfoModel the frame-long offset phase is composed on the left,
    Delta_cfo H_TD; this supports fractional eps (the phase is just a
    diagonal).
    """
    if any(p.delay_tap >= params.M for p in ch.paths):
        raise ValueError("delay tap outside [0, M)")
    H = build_H_TD_from_taps(raw_taps(ch), params).matrix
    if cfo is not None and cfo.epsilon != 0.0:
        H = cfo_phase(cfo, params)[:, None] * H
    return EffectiveChannel(H, "TD", params)


def _conjugate_blocks(H: np.ndarray, params: FrameParams, left: np.ndarray, axis: str) -> np.ndarray:
    """Apply (A kron I_M) . H . (A^H kron I_M) for axis='slot' (A acts on the
    slot index n) or (I_N kron A) . H . (I_N kron A^H) for axis='subcarrier'."""
    M, N = params.M, params.N
    H4 = H.reshape(N, M, N, M)
    if axis == "slot":
        H4 = np.einsum("ab,bmcd->amcd", left, H4)
        H4 = np.einsum("abcd,ce->abed", H4, left.conj().T)
    else:
        H4 = np.einsum("ab,nbcd->nacd", left, H4)
        H4 = np.einsum("abcd,de->abce", H4, left.conj().T)
    return H4.reshape(N * M, N * M)


def build_H_DD(ch: UserChannel, params: FrameParams, cfo: "CfoModel" = None) -> EffectiveChannel:
    """H_DD = (F_N kron I_M) H_TD (F_N^H kron I_M)."""
    H_td = build_H_TD(ch, params, cfo).matrix
    F_N = dft_matrix(params.N)
    return EffectiveChannel(_conjugate_blocks(H_td, params, F_N, "slot"), "DD", params)


def build_H_TF(ch: UserChannel, params: FrameParams, cfo: "CfoModel" = None) -> EffectiveChannel:
    """H_TF = (I_N kron F_M) H_TD (I_N kron F_M^H) for the shared-RCP frame."""
    H_td = build_H_TD(ch, params, cfo).matrix
    F_M = dft_matrix(params.M)
    return EffectiveChannel(_conjugate_blocks(H_td, params, F_M, "subcarrier"), "TF", params)


def build_H_TF_per_symbol_cp(ch: UserChannel, params: FrameParams) -> EffectiveChannel:
    """Block-diagonal TF channel for the per-symbol-CP variant.

    Each slot n sees a circular convolution with per-path phase
    h_p * exp(j*2*pi*k_p*(n*M + m')/MN) continuing across the frame;
    there is no inter-symbol leakage by construction.
    """
    M, N = params.M, params.N
    mn = params.grid_size
    F_M = dft_matrix(M)
    H = np.zeros((mn, mn), dtype=np.complex128)
    rows = np.arange(M)
    for n in range(N):
        Hn = np.zeros((M, M), dtype=np.complex128)
        for p in ch.paths:
            cols = (rows - p.delay_tap) % M
            phase = np.exp(2j * np.pi * p.doppler_tap * (n * M + cols) / mn)
            Hn[rows, cols] += p.gain * phase
        H[n * M:(n + 1) * M, n * M:(n + 1) * M] = F_M @ Hn @ F_M.conj().T
    return EffectiveChannel(H, "TF", params)


# ---------------------------------------------------------------------------
# CFO and noisy application
# ---------------------------------------------------------------------------


def cfo_phase(cfo: CfoModel, params: FrameParams) -> np.ndarray:
    """Per-sample progressive phase exp(j*2*pi*eps*q/M) over the whole frame."""
    q = np.arange(params.grid_size)
    return np.exp(2j * np.pi * cfo.epsilon * q / params.M)


def apply_cfo(s: np.ndarray, cfo: CfoModel, params: FrameParams) -> np.ndarray:
    """Multiply sample q by exp(j*2*pi*eps*q/M); composes with any H_TD on the left."""
    s = np.asarray(s)
    if s.size != params.grid_size:
        raise ValueError("sample vector length does not match the frame")
    return s * cfo_phase(cfo, params)


def cfo_shifted_taps(ch: UserChannel, cfo: CfoModel, params: FrameParams):
    """Exact raw taps of Delta^{eps*N} H_TD for integer-bin CFO (eps*N integer).

    Delta^{eps*N} Pi^l Delta^k = gamma^{eps*N*l} Pi^l Delta^{k+eps*N}, so the
    composite channel has Doppler exponents shifted by eps*N (left unreduced)
    and per-path gain rotations.
    """
    shift = cfo.epsilon * params.N
    if abs(shift - round(shift)) > 1e-9:
        raise ValueError(
            f"eps*N = {shift} is not an integer; the delay-Doppler analytics "
            "require integer-bin CFO"
        )
    a = int(round(shift))
    mn = params.grid_size
    return tuple(
        (p.gain * np.exp(2j * np.pi * a * p.delay_tap / mn), p.delay_tap, p.doppler_tap + a)
        for p in ch.paths
    )


def cfo_equivalent_channel(ch: UserChannel, cfo: CfoModel, params: FrameParams) -> UserChannel:
    """Integer-bin CFO folded into the tap list, Doppler reduced mod N.

    The mod-N reduction keeps the UserChannel invariant but rescales
    per-path phases, so this view is for the rate analytics (which only
    use |gain| and the index shifts); sample-exact matrices come from
    cfo_shifted_taps + build_H_TD_from_taps.
    """
    paths = [
        Path(gain, l, k % params.N) for gain, l, k in cfo_shifted_taps(ch, cfo, params)
    ]
    return UserChannel(tuple(paths), ch.user_id)


def apply_channel(s: np.ndarray, H_td: EffectiveChannel, N0: float, rng) -> np.ndarray:
    """r = H_TD s + w with circular complex AWGN of per-sample variance N0."""
    s = np.asarray(s)
    mn = H_td.params.grid_size
    if s.size != mn:
        raise ValueError(f"signal length {s.size} != {mn}")
    if N0 < 0:
        raise ValueError("N0 must be >= 0")
    r = H_td.matrix @ s
    if N0 > 0:
        rng = np.random.default_rng(rng)
        w = math.sqrt(N0 / 2.0) * (rng.standard_normal(mn) + 1j * rng.standard_normal(mn))
        r = r + w
    return r
