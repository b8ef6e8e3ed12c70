"""Experiment harness: scenario configuration, experiment families, reports.

Configuration is a strict TOML file (unknown sections or keys are
rejected by name); the defaults reproduce the reference LEO downlink
scenario: M=64 delay bins, N=16 Doppler bins, K=4 users, 15 kHz
subcarrier spacing, a 2 GHz S-band carrier and normalized CFO values in
[0.25, 0.5].  Every experiment consumes (config, seed) only, draws all
randomness from per-point substreams, and emits plot-ready CSV plus a
provenance sidecar, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .access import SCHEME_BUILDERS, oma_mask, uniform_power
from .allocator import (
    CcpConfig,
    default_init,
    evaluate_allocation,
    penalty_ccp,
    penalty_ccp_multistart,
)
from .channel import (
    DEFAULT_MAX_DOPPLER_HZ,
    CfoModel,
    build_H_TF,
    cfo_equivalent_channel,
    load_profile,
    make_profile,
    realize_channel,
)
from .grid import FrameParams
from .linkmodel import (
    LinkBudget,
    PowerGrid,
    ofdm_block_channels,
    ofdm_sum_rate,
    otfs_sum_rate,
)
from .rxchain import SCHEMES as BER_SCHEMES
from .rxchain import ber_monte_carlo


class ConfigError(ValueError):
    """Bad configuration file (parse error, unknown key, invalid value)."""


@dataclass(frozen=True)
class ScenarioConstants:
    """LEO scenario geometry, carried as documentation metadata only."""

    earth_radius_km: float = 6371.0
    satellite_height_km: float = 1500.0
    elevation_deg: float = 50.0
    satellite_speed_kmps: float = 7.11
    terminal_speed_kmh: float = 500.0
    carrier_hz: float = 2e9


@dataclass(frozen=True)
class BerSettings:
    snr_db: tuple = (15.0,)
    epsilon: tuple = (0.25, 0.5)
    frames: int = 500
    schemes: tuple = BER_SCHEMES
    constellation: str = "qpsk"
    zc_root: int = 1
    num_users: int = 1


@dataclass(frozen=True)
class OptimizerSettings:
    """Reduced-grid settings for the scheduling experiments (the full
    frame is reachable by setting m, n to the frame values)."""

    m: int = 16
    n: int = 8
    k: int = 4
    tau_spread_factor: float = 2.0
    max_doppler_hz: float = None  # None: scaled to keep the frame-normalized spread
    snr_db: tuple = (10.0, 20.0, 30.0)
    epsilon: float = 0.25
    n_realizations: int = 3
    multistart: bool = False
    jitter: float = 0.05
    xi0: float = 1.0
    mu: float = 3.0
    xi_max: float = 1e4
    m_max: int = 50
    delta1: float = None
    delta2: float = None
    eps_bigm: float = None
    solver_tol: float = 1e-7
    round_threshold: float = 0.5

    def ccp_config(self) -> CcpConfig:
        return CcpConfig(
            xi0=self.xi0, mu=self.mu, xi_max=self.xi_max, m_max=self.m_max,
            delta1=self.delta1, delta2=self.delta2, eps_bigm=self.eps_bigm,
            solver_tol=self.solver_tol, round_threshold=self.round_threshold,
        )


@dataclass(frozen=True)
class ScenarioConfig:
    frame: FrameParams = FrameParams(M=64, N=16, delta_f=15e3)
    num_users: int = 4
    profile_name: str = "ntn-tdl-b"
    profile_file: str = None
    tau_spread_factor: float = 8.0
    max_doppler_hz: float = DEFAULT_MAX_DOPPLER_HZ
    los_doppler_hz: float = None
    max_tap_retries: int = 32
    snr_db: tuple = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    epsilon: tuple = (0.25, 0.3125, 0.375, 0.4375, 0.5)
    seed: int = 12345
    n_realizations: int = 100
    ber: BerSettings = BerSettings()
    optimizer: OptimizerSettings = OptimizerSettings()
    constants: ScenarioConstants = ScenarioConstants()

    def __post_init__(self):
        if self.num_users < 1:
            raise ConfigError("users.k must be >= 1")
        if not self.snr_db or not self.epsilon:
            raise ConfigError("link.snr_db and link.epsilon must be nonempty")
        if any(abs(e) > 1 for e in self.epsilon):
            raise ConfigError("link.epsilon values must satisfy |eps| <= 1")
        if self.n_realizations < 1:
            raise ConfigError("sim.n_realizations must be >= 1")

    def channel_profile(self, params: FrameParams = None, tau_spread_factor=None):
        params = params or self.frame
        if self.profile_file:
            return load_profile(self.profile_file)
        return make_profile(
            self.profile_name,
            params,
            max_doppler=self.max_doppler_hz,
            tau_spread_factor=tau_spread_factor or self.tau_spread_factor,
        )

    def config_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# strict TOML loading
# ---------------------------------------------------------------------------

_SECTION_KEYS = {
    "frame": {"m", "n", "delta_f_hz"},
    "users": {"k"},
    "channel": {
        "profile", "profile_file", "tau_spread_factor", "max_doppler_hz",
        "los_doppler_hz", "max_tap_retries",
    },
    "link": {"snr_db", "epsilon"},
    "sim": {"seed", "n_realizations"},
    "ber": {"snr_db", "epsilon", "frames", "schemes", "constellation", "zc_root", "k"},
    "optimizer": {
        "m", "n", "k", "tau_spread_factor", "max_doppler_hz", "snr_db", "epsilon",
        "n_realizations",
        "multistart", "jitter", "xi0", "mu", "xi_max", "m_max", "delta1", "delta2",
        "eps_bigm", "solver_tol", "round_threshold",
    },
    "scenario": {
        "earth_radius_km", "satellite_height_km", "elevation_deg",
        "satellite_speed_kmps", "terminal_speed_kmh", "carrier_hz",
    },
}


def _check_keys(section: str, table: dict):
    unknown = set(table) - _SECTION_KEYS[section]
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}"
        )


def load_config(path) -> ScenarioConfig:
    """Parse and validate a scenario TOML file (strict: unknown keys rejected)."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    unknown = set(raw) - set(_SECTION_KEYS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    for section, table in raw.items():
        if not isinstance(table, dict):
            raise ConfigError(f"top-level entry {section!r} must be a section")
        _check_keys(section, table)

    defaults = ScenarioConfig()
    frame_tbl = raw.get("frame", {})
    frame = FrameParams(
        M=int(frame_tbl.get("m", defaults.frame.M)),
        N=int(frame_tbl.get("n", defaults.frame.N)),
        delta_f=float(frame_tbl.get("delta_f_hz", defaults.frame.delta_f)),
    )
    ch = raw.get("channel", {})
    link = raw.get("link", {})
    sim = raw.get("sim", {})
    ber_tbl = raw.get("ber", {})
    ber_defaults = BerSettings()
    ber = BerSettings(
        snr_db=tuple(float(x) for x in ber_tbl.get("snr_db", ber_defaults.snr_db)),
        epsilon=tuple(float(x) for x in ber_tbl.get("epsilon", ber_defaults.epsilon)),
        frames=int(ber_tbl.get("frames", ber_defaults.frames)),
        schemes=tuple(ber_tbl.get("schemes", ber_defaults.schemes)),
        constellation=str(ber_tbl.get("constellation", ber_defaults.constellation)),
        zc_root=int(ber_tbl.get("zc_root", ber_defaults.zc_root)),
        num_users=int(ber_tbl.get("k", ber_defaults.num_users)),
    )
    opt_tbl = raw.get("optimizer", {})
    opt_defaults = OptimizerSettings()
    opt_kwargs = {}
    for f in dataclasses.fields(OptimizerSettings):
        key = f.name
        if key in opt_tbl:
            value = opt_tbl[key]
            opt_kwargs[key] = tuple(float(x) for x in value) if key == "snr_db" else value
    opt = dataclasses.replace(opt_defaults, **opt_kwargs)
    const_tbl = raw.get("scenario", {})
    constants = dataclasses.replace(ScenarioConstants(), **const_tbl)

    try:
        return ScenarioConfig(
            frame=frame,
            num_users=int(raw.get("users", {}).get("k", defaults.num_users)),
            profile_name=str(ch.get("profile", defaults.profile_name)),
            profile_file=ch.get("profile_file"),
            tau_spread_factor=float(ch.get("tau_spread_factor", defaults.tau_spread_factor)),
            max_doppler_hz=float(ch.get("max_doppler_hz", defaults.max_doppler_hz)),
            los_doppler_hz=ch.get("los_doppler_hz"),
            max_tap_retries=int(ch.get("max_tap_retries", defaults.max_tap_retries)),
            snr_db=tuple(float(x) for x in link.get("snr_db", defaults.snr_db)),
            epsilon=tuple(float(x) for x in link.get("epsilon", defaults.epsilon)),
            seed=int(sim.get("seed", defaults.seed)),
            n_realizations=int(sim.get("n_realizations", defaults.n_realizations)),
            ber=ber,
            optimizer=opt,
            constants=constants,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    experiment: str
    columns: tuple
    rows: list
    meta: dict = field(default_factory=dict)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()


def emit_report(report: ExperimentReport, outdir) -> tuple:
    """Write <experiment>.csv and the <experiment>.meta provenance sidecar."""
    import os

    os.makedirs(outdir, exist_ok=True)
    csv_path = os.path.join(outdir, f"{report.experiment}.csv")
    meta_path = os.path.join(outdir, f"{report.experiment}.meta")
    with open(csv_path, "w", newline="") as fh:
        fh.write(report.to_csv_text())
    with open(meta_path, "w") as fh:
        for key in sorted(report.meta):
            fh.write(f"{key} = {report.meta[key]}\n")
    return csv_path, meta_path


def _base_meta(cfg: ScenarioConfig, experiment: str, rows: int) -> dict:
    return {
        "experiment": experiment,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "rows": rows,
        "version": __version__,
    }


def _point_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed,) + tags))


def _draw_users(cfg: ScenarioConfig, params, profile, rng):
    return [
        realize_channel(
            profile, params, rng, user_id=u,
            los_doppler_hz=cfg.los_doppler_hz, max_retries=cfg.max_tap_retries,
        )
        for u in range(cfg.num_users)
    ]


# ---------------------------------------------------------------------------
# experiment families
# ---------------------------------------------------------------------------

_EXP_OMA, _EXP_CFO, _EXP_BER, _EXP_OPT = 1, 2, 3, 4


def run_sumrate_oma(cfg: ScenarioConfig) -> ExperimentReport:
    """Average OTFS sum rate of the four orthogonal access schemes vs SNR
    (CFO fixed to the first configured epsilon)."""
    params = cfg.frame
    profile = cfg.channel_profile()
    eps = cfg.epsilon[0]
    schemes = tuple(SCHEME_BUILDERS)
    totals = {(snr, sch): 0.0 for snr in cfg.snr_db for sch in schemes}
    for r in range(cfg.n_realizations):
        rng = _point_rng(cfg.seed, _EXP_OMA, r)
        channels = _draw_users(cfg, params, profile, rng)
        shifted = [
            cfo_equivalent_channel(ch, CfoModel(eps), params) for ch in channels
        ]
        for snr in cfg.snr_db:
            budget = LinkBudget.from_snr_db(snr, params)
            for sch in schemes:
                power = uniform_power(oma_mask(sch, params, cfg.num_users), budget.P0)
                totals[(snr, sch)] += otfs_sum_rate(power, shifted, params, budget.N0)
    rows = [
        (snr, sch, totals[(snr, sch)] / cfg.n_realizations, cfg.seed)
        for snr in sorted(cfg.snr_db)
        for sch in schemes
    ]
    report = ExperimentReport(
        "sumrate-oma", ("snr_db", "scheme", "sum_rate_bits", "seed"), rows
    )
    report.meta = _base_meta(cfg, "sumrate-oma", len(rows))
    report.meta["epsilon"] = eps
    return report


def run_sumrate_cfo(cfg: ScenarioConfig) -> ExperimentReport:
    """OTFS vs OFDM sum rate across the CFO grid, plus the single-path
    no-channel bound both modulations share."""
    params = cfg.frame
    profile = cfg.channel_profile()
    mn = params.grid_size
    totals = {}
    for r in range(cfg.n_realizations):
        rng = _point_rng(cfg.seed, _EXP_CFO, r)
        channels = _draw_users(cfg, params, profile, rng)
        for snr in cfg.snr_db:
            budget = LinkBudget.from_snr_db(snr, params)
            dd_power = uniform_power(
                oma_mask("ddma", params, cfg.num_users), budget.P0
            )
            tf_power = PowerGrid(dd_power.rho, domain="TF")  # same contiguous split
            for eps in cfg.epsilon:
                cfo = CfoModel(eps)
                shifted = [cfo_equivalent_channel(ch, cfo, params) for ch in channels]
                r_otfs = otfs_sum_rate(dd_power, shifted, params, budget.N0)
                blocks = [
                    ofdm_block_channels(build_H_TF(ch, params, cfo)) for ch in channels
                ]
                r_ofdm = ofdm_sum_rate(tf_power, blocks, params, budget.N0)
                key = (eps, snr)
                acc = totals.setdefault(key, [0.0, 0.0])
                acc[0] += r_otfs
                acc[1] += r_ofdm
    rows = []
    for eps in sorted(cfg.epsilon):
        for snr in sorted(cfg.snr_db):
            snr_lin = 10 ** (snr / 10)
            ideal = mn / 2 * float(np.log2(1 + snr_lin))
            acc = totals[(eps, snr)]
            rows.append((eps, snr, "otfs", acc[0] / cfg.n_realizations, cfg.seed))
            rows.append((eps, snr, "ofdm", acc[1] / cfg.n_realizations, cfg.seed))
            rows.append((eps, snr, "ideal", ideal, cfg.seed))
    report = ExperimentReport(
        "sumrate-cfo", ("epsilon", "snr_db", "modulation", "sum_rate_bits", "seed"), rows
    )
    report.meta = _base_meta(cfg, "sumrate-cfo", len(rows))
    return report


def run_ber(cfg: ScenarioConfig) -> ExperimentReport:
    """Monte-Carlo BER for the configured schemes over (SNR, epsilon)."""
    params = cfg.frame
    profile = cfg.channel_profile()
    rows = []
    for sch_idx, scheme in enumerate(cfg.ber.schemes):
        results = ber_monte_carlo(
            scheme,
            params,
            profile,
            cfg.ber.snr_db,
            cfg.ber.epsilon,
            cfg.ber.frames,
            seed=cfg.seed + sch_idx,
            K=cfg.ber.num_users,
            constellation=cfg.ber.constellation,
            zc_root=cfg.ber.zc_root,
            los_doppler_hz=cfg.los_doppler_hz,
        )
        for res in results:
            rows.append(
                (res.scheme, res.snr_db, res.epsilon, res.frames, res.bits,
                 res.errors, res.ber, res.seed)
            )
    rows.sort(key=lambda r: (r[1], r[2], r[0]))
    report = ExperimentReport(
        "ber",
        ("scheme", "snr_db", "epsilon", "frames", "bits", "errors", "ber", "seed"),
        rows,
    )
    report.meta = _base_meta(cfg, "ber", len(rows))
    return report


def run_optimizer(cfg: ScenarioConfig):
    """Penalty-CCP sum rate vs the four OMA baselines on the reduced grid.

    Returns (summary report, convergence-trace report).
    """
    opt = cfg.optimizer
    params = FrameParams(M=opt.m, N=opt.n, delta_f=cfg.frame.delta_f)
    profile = cfg.channel_profile(params, tau_spread_factor=opt.tau_spread_factor)
    if opt.max_doppler_hz is not None:
        fd = opt.max_doppler_hz
    else:
        # keep the per-frame normalized Doppler spread of the main frame
        fd = cfg.max_doppler_hz * (cfg.frame.N * cfg.frame.T) / (params.N * params.T)
    profile = dataclasses.replace(profile, max_doppler=fd)
    ccp_cfg = opt.ccp_config()
    schemes = tuple(SCHEME_BUILDERS)
    totals = {(snr, sch): 0.0 for snr in opt.snr_db for sch in ("ccp",) + schemes}
    conv_rows = []
    cfo = CfoModel(opt.epsilon)
    for snr in opt.snr_db:
        budget = LinkBudget.from_snr_db(snr, params)
        for r in range(opt.n_realizations):
            rng = _point_rng(cfg.seed, _EXP_OPT, int(snr * 1000), r)
            channels = [
                realize_channel(profile, params, rng, user_id=u,
                                los_doppler_hz=cfg.los_doppler_hz,
                                max_retries=cfg.max_tap_retries)
                for u in range(opt.k)
            ]
            shifted = [cfo_equivalent_channel(ch, cfo, params) for ch in channels]
            if opt.multistart:
                result = penalty_ccp_multistart(
                    shifted, params, budget, ccp_cfg, jitter=opt.jitter
                )
            else:
                init = default_init(params, opt.k, budget.P0, jitter=opt.jitter)
                result = penalty_ccp(shifted, params, budget, ccp_cfg, init)
            totals[(snr, "ccp")] += evaluate_allocation(
                result.mask, result.power, shifted, params, budget.N0
            )
            for sch in schemes:
                power = uniform_power(oma_mask(sch, params, opt.k), budget.P0)
                totals[(snr, sch)] += otfs_sum_rate(power, shifted, params, budget.N0)
            for row in result.trace:
                conv_rows.append(
                    (snr, r, row.iteration, row.objective, row.sum_a, row.xi,
                     row.drho_l1, cfg.seed)
                )
    rows = [
        (snr, sch, totals[(snr, sch)] / opt.n_realizations, cfg.seed)
        for snr in sorted(opt.snr_db)
        for sch in ("ccp",) + schemes
    ]
    report = ExperimentReport(
        "optimize", ("snr_db", "scheme", "sum_rate_bits", "seed"), rows
    )
    report.meta = _base_meta(cfg, "optimize", len(rows))
    trace = ExperimentReport(
        "optimize_trace",
        ("snr_db", "realization", "iteration", "objective", "sum_a", "xi",
         "drho_l1", "seed"),
        conv_rows,
    )
    trace.meta = _base_meta(cfg, "optimize_trace", len(conv_rows))
    return report, trace
