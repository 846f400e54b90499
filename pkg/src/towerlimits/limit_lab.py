"""Statistical verification of distributional limit laws for Birkhoff sums.

run_clt and run_berry_esseen sample sums from invariant starts and measure
Kolmogorov distance to the Gaussian limit and its decay rate; run_llt counts
interval hits at the sqrt(n) scale for aperiodic observables; run_lattice_llt
evaluates point probabilities of an integer-valued observable on a finite
tower by exact dynamic programming; run_charfn_compare tests the
characteristic-function product estimate that drives all of them.

Monte Carlo statistics are reproducible bit for bit from (config, seed): one
ensemble of independent invariant starts is walked once, with Birkhoff sums
recorded at the configured checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtr

from . import __version__
from .errors import NumericalError, PreconditionError
from .tower_core import FiniteTower, LsvSystem, TowerObservable
from .transfer_ops import (
    analyze_spectrum,
    build_quadrature,
    greenkubo_variance,
    periodicity_scan,
)

# q95 of the Kolmogorov statistic is ~1.36/sqrt(N); the gate below uses a
# slightly conservative coefficient so noise never enters a rate fit
NOISE_FLOOR_COEFF = 1.63

_KINDS = ("clt", "berry_esseen", "llt", "lattice_llt", "charfn")
_SIGMA_SOURCES = ("curvature", "greenkubo", "both", "configured")
_SIGMA_T_GRID = (0.0125, 0.025, 0.05, 0.1, 0.2)
_DEFAULT_SCAN_T = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)


class IidSurrogate:
    """System whose step redraws an independent uniform state.

    Birkhoff sums become sums of i.i.d. variables, giving classical-rate
    targets that calibrate the sampling and fitting pipeline itself.
    """

    def sample_invariant(self, seed: int, count: int) -> np.ndarray:
        self._rng = np.random.default_rng((int(seed), 0x11D))
        return self._rng.random(count)

    def step_inplace(self, x: np.ndarray) -> np.ndarray:
        x[:] = self._rng.random(x.shape)
        return x


def iid_exponential_observable() -> TowerObservable:
    """Centered unit exponential: -log(U) - 1 has mean 0 and third moment 2."""
    return TowerObservable(
        "holder_on_interval",
        lambda x: -np.log(np.maximum(np.asarray(x, dtype=float), 1e-300)) - 1.0,
        mean_removed=True,
        label="exp-1",
    )


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a limit-law experiment needs, hashable for provenance."""

    system: object
    observable: TowerObservable
    n_grid: tuple
    samples: int
    seed: int
    kind: str
    sigma2_source: str = "curvature"
    sigma2_value: float = float("nan")
    interval: tuple = (-0.5, 0.5)
    kappa: float = 0.0
    shift_u: TowerObservable | None = None
    shift_v: TowerObservable | None = None
    t_grid: tuple = ()
    expected_exponent: float = float("nan")
    rho: float = 0.0
    K: int = 1024
    scan_t_grid: tuple | None = None
    gk_orbit: int = 1_000_000

    def __post_init__(self):
        ns = tuple(int(n) for n in self.n_grid)
        object.__setattr__(self, "n_grid", ns)
        if len(ns) == 0 or any(b <= a for a, b in zip(ns, ns[1:])):
            raise PreconditionError("n_grid must be strictly increasing")
        if any(n < 1 for n in ns):
            raise PreconditionError("n_grid entries must be positive")
        if self.samples < 1000:
            raise PreconditionError("need at least 10^3 samples per n")
        if self.kind not in _KINDS:
            raise PreconditionError(f"unknown experiment kind {self.kind!r}")
        if self.sigma2_source not in _SIGMA_SOURCES:
            raise PreconditionError(f"unknown sigma2 source {self.sigma2_source!r}")

    def config_hash(self) -> str:
        payload = {
            "system": _describe_system(self.system),
            "observable": _describe_observable(self.observable),
            "u": _describe_observable(self.shift_u),
            "v": _describe_observable(self.shift_v),
            "n_grid": list(self.n_grid),
            "samples": self.samples,
            "seed": self.seed,
            "kind": self.kind,
            "sigma2_source": self.sigma2_source,
            "sigma2_value": repr(self.sigma2_value),
            "interval": list(self.interval),
            "kappa": self.kappa,
            "t_grid": [repr(t) for t in self.t_grid],
            "expected_exponent": repr(self.expected_exponent),
            "rho": self.rho,
            "K": self.K,
            "gk_orbit": self.gk_orbit,
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Provenance:
    config_hash: str
    seed: int
    code_version: str


def _describe_system(system) -> dict:
    if isinstance(system, LsvSystem):
        return {"kind": "lsv", "alpha": system.alpha, "n_max": system.n_max,
                "k_density": system.k_density}
    if isinstance(system, FiniteTower):
        blob = np.ascontiguousarray(system.transfer_rows).tobytes()
        return {"kind": "finite_tower",
                "masses": [repr(m) for m in system.masses],
                "return_times": [int(p) for p in system.return_times],
                "rows": hashlib.sha256(blob).hexdigest()[:16]}
    if isinstance(system, IidSurrogate):
        return {"kind": "iid_surrogate"}
    raise PreconditionError(f"unsupported system type {type(system).__name__}")


def _describe_observable(f: TowerObservable | None) -> dict | None:
    if f is None:
        return None
    d = {"kind": f.kind, "label": f.label, "mean_removed": f.mean_removed,
         "holder_exponent": f.holder_exponent}
    if f.kind == "cellwise_constant":
        d["values"] = [repr(v) for v in np.asarray(f.evaluator, dtype=float)]
    return d


def _provenance(cfg: ExperimentConfig) -> Provenance:
    return Provenance(cfg.config_hash(), cfg.seed, __version__)


# --- sampling engine -----------------------------------------------------------


def _start_walker(system, seed: int, count: int):
    """Initial ensemble plus an in-place step closure for any system kind."""
    if isinstance(system, FiniteTower):
        rng = np.random.default_rng((int(seed), 0x70))
        pi = system.state_masses() / system.state_masses().sum()
        x = rng.choice(len(pi), size=count, p=pi)
        cum = np.cumsum(system.transition_matrix(), axis=1)

        def step(states: np.ndarray) -> np.ndarray:
            r = rng.random(len(states))
            states[:] = np.minimum(
                (r[:, None] > cum[states]).sum(axis=1), len(pi) - 1)
            return states

        return x, step
    return system.sample_invariant(seed, count), system.step_inplace


def _value_fn(system, f: TowerObservable | None):
    """Pointwise evaluation on ensemble coordinates (states or points)."""
    if f is None:
        return lambda x: np.zeros(len(x))
    if f.kind == "cellwise_constant":
        vals = np.asarray(f.evaluator, dtype=float)
        return lambda x: vals[x]
    return lambda x: np.asarray(f(x), dtype=float)


def _mean_of(system, f: TowerObservable | None) -> float:
    if f is None:
        return 1.0
    if f.kind == "cellwise_constant":
        vals = np.asarray(f.evaluator, dtype=float)
        pi = system.state_masses() / system.state_masses().sum()
        return float(np.dot(pi, vals))
    if isinstance(system, LsvSystem):
        return system.mean_of(f)
    raise PreconditionError("no deterministic mean available for this system")


def center_observable(system, f: TowerObservable) -> TowerObservable:
    """Subtract the invariant mean, computed from the system itself."""
    if f.mean_removed:
        return f
    if f.kind == "cellwise_constant":
        vals = np.asarray(f.evaluator, dtype=float)
        pi = system.state_masses() / system.state_masses().sum()
        vals = vals - float(np.dot(pi, vals))
        return replace(f, evaluator=vals, mean_removed=True)
    m = _mean_of(system, f)
    base = f.evaluator
    return replace(
        f, evaluator=lambda x, _b=base, _m=m: np.asarray(_b(x), dtype=float) - _m,
        mean_removed=True,
    )


def _birkhoff_checkpoints(system, f, n_grid, samples, seed):
    """Yield (n, S_n array, current ensemble, initial ensemble) per checkpoint.

    One pass over a single ensemble: sums at successive n share orbits, which
    leaves each per-n statistic unbiased while halving the walk cost.
    """
    x, step = _start_walker(system, seed, samples)
    feval = _value_fn(system, f)
    x0 = x.copy()
    s = np.zeros(samples)
    done = 0
    for n in n_grid:
        for _ in range(done, n):
            s += feval(x)
            step(x)
        done = n
        yield n, s, x, x0


# --- variance resolution -------------------------------------------------------


def _tower_sigma2(tower: FiniteTower, values: np.ndarray) -> float:
    """Exact Green-Kubo variance of a cellwise observable on the state chain."""
    q = tower.transition_matrix()
    pi = tower.state_masses() / tower.state_masses().sum()
    v = np.asarray(values, dtype=float)
    v = v - float(np.dot(pi, v))
    m = np.vstack([np.eye(len(pi)) - q, pi])
    g, *_ = np.linalg.lstsq(m, np.concatenate([v, [0.0]]), rcond=None)
    return float(np.dot(pi, v * (2.0 * g - v)))


@dataclass(frozen=True)
class VarianceInfo:
    sigma2: float
    stderr: float
    source: str
    cross_value: float
    disagreement_flag: bool


def _resolve_sigma2(cfg: ExperimentConfig) -> VarianceInfo:
    if not math.isnan(cfg.sigma2_value):
        return VarianceInfo(cfg.sigma2_value, 0.0, "configured", float("nan"), False)
    system, f = cfg.system, cfg.observable
    if isinstance(system, FiniteTower):
        if f.kind != "cellwise_constant":
            raise PreconditionError("finite towers need cellwise observables")
        s2 = _tower_sigma2(system, np.asarray(f.evaluator, dtype=float))
        return VarianceInfo(s2, 0.0, "exact_chain", float("nan"), False)
    if isinstance(system, LsvSystem) and cfg.sigma2_source in ("curvature", "both"):
        sd = analyze_spectrum(system, f, cfg.K, list(_SIGMA_T_GRID))
        cross, flagged = float("nan"), False
        if cfg.sigma2_source == "both":
            gk = greenkubo_variance(system, f, cfg.gk_orbit, seed=cfg.seed + 101)
            cross = gk.sigma2
            tol = 2.0 * math.hypot(gk.stderr, 0.05 * abs(sd.sigma2))
            flagged = abs(cross - sd.sigma2) > tol
        return VarianceInfo(sd.sigma2, sd.sigma2_stderr, "curvature", cross, flagged)
    gk = greenkubo_variance(system, f, cfg.gk_orbit, seed=cfg.seed + 101)
    return VarianceInfo(gk.sigma2, gk.stderr, "greenkubo", float("nan"), False)


# --- distances -----------------------------------------------------------------


def _ks_to_normal(samples: np.ndarray, sigma: float) -> float:
    n = len(samples)
    if sigma <= 1e-9:
        # point-mass target: the sup is reached just below or at the atom
        below = np.count_nonzero(samples < 0.0) / n
        at = np.count_nonzero(samples <= 0.0) / n
        return max(below, 1.0 - at)
    s = np.sort(samples)
    grid = np.arange(1, n + 1) / n
    target = ndtr(s / sigma)
    d = max(float(np.max(grid - target)), float(np.max(target - (grid - 1.0 / n))))
    return min(d, 1.0)


# --- CLT -----------------------------------------------------------------------


@dataclass(frozen=True)
class CltReport:
    n_grid: tuple
    ks: np.ndarray
    ks_se: float
    noise_floor: float
    sigma2: float
    variance: VarianceInfo
    degenerate: bool
    trend_ok: bool
    provenance: Provenance


def run_clt(cfg: ExperimentConfig) -> CltReport:
    """Kolmogorov distance of S_n f / sqrt(n) to Normal(0, sigma^2) per n."""
    f = cfg.observable
    if not f.mean_removed:
        raise PreconditionError("observable must be mean-removed (center_observable)")
    var = _resolve_sigma2(cfg)
    sigma = math.sqrt(max(var.sigma2, 0.0))
    degenerate = var.sigma2 < 1e-8
    ks = np.empty(len(cfg.n_grid))
    for i, (n, s, _, _) in enumerate(
            _birkhoff_checkpoints(cfg.system, f, cfg.n_grid, cfg.samples, cfg.seed)):
        ks[i] = _ks_to_normal(s / math.sqrt(n), sigma)
    return CltReport(
        n_grid=cfg.n_grid, ks=ks, ks_se=0.5 / math.sqrt(cfg.samples),
        noise_floor=NOISE_FLOOR_COEFF / math.sqrt(cfg.samples),
        sigma2=var.sigma2, variance=var, degenerate=degenerate,
        trend_ok=bool(ks[-1] <= ks[0]) and not degenerate,
        provenance=_provenance(cfg),
    )


# --- Berry-Esseen --------------------------------------------------------------


@dataclass(frozen=True)
class BeReport:
    n_grid: tuple
    ks: np.ndarray
    ks_se: float
    noise_floor: float
    window_mask: np.ndarray
    exponent: float
    exponent_ci: tuple
    predicted: float
    inconclusive: bool
    sigma2: float
    variance: VarianceInfo
    tail_z: np.ndarray
    tail_curve: np.ndarray
    provenance: Provenance


def _induced_tail_curve(system, f, K: int):
    """Empirical z -> integral of |f_B|^2 over {|f_B| > z} on the base."""
    quad = build_quadrature(system, f, min(K, 1024))
    a = np.abs(quad.fB)
    hi = max(float(a.max()), 1e-9)
    z = np.geomspace(max(hi * 1e-3, 1e-6), hi, 40)
    curve = np.array([float(np.sum(quad.mu * a * a * (a > zz))) for zz in z])
    return z, curve / max(float(np.sum(quad.mu)), 1e-300)


def run_berry_esseen(cfg: ExperimentConfig) -> BeReport:
    """Fit the decay rate of the Kolmogorov distance over the signal window.

    Only n with distance above 3x the Monte Carlo noise floor enter the
    weighted log-log fit; with fewer than two such points the report is
    inconclusive rather than a silent pass.
    """
    f = cfg.observable
    if not f.mean_removed:
        raise PreconditionError("observable must be mean-removed (center_observable)")
    var = _resolve_sigma2(cfg)
    if var.sigma2 <= 0:
        raise PreconditionError("degenerate variance: no rate to fit")
    sigma = math.sqrt(var.sigma2)
    ks = np.empty(len(cfg.n_grid))
    for i, (n, s, _, _) in enumerate(
            _birkhoff_checkpoints(cfg.system, f, cfg.n_grid, cfg.samples, cfg.seed)):
        ks[i] = _ks_to_normal(s / math.sqrt(n), sigma)
    floor = NOISE_FLOOR_COEFF / math.sqrt(cfg.samples)
    se = 0.5 / math.sqrt(cfg.samples)
    mask = ks > 3.0 * floor
    if mask.sum() < 2:
        exponent, ci, inconclusive = float("nan"), (float("nan"), float("nan")), True
    else:
        logn = np.log(np.asarray(cfg.n_grid, dtype=float)[mask])
        logk = np.log(ks[mask])
        w = ks[mask] / se  # 1/sigma of each log-distance
        if mask.sum() == 2:
            slope = (logk[1] - logk[0]) / (logn[1] - logn[0])
            exponent, ci = -float(slope), (float("nan"), float("nan"))
        else:
            (slope, _), cov = np.polyfit(logn, logk, 1, w=w, cov="unscaled")
            halfwidth = 2.0 * math.sqrt(max(cov[0, 0], 0.0))
            exponent = -float(slope)
            ci = (exponent - halfwidth, exponent + halfwidth)
        inconclusive = False
    if isinstance(cfg.system, LsvSystem):
        tail_z, tail_curve = _induced_tail_curve(cfg.system, f, cfg.K)
    else:
        tail_z, tail_curve = np.array([]), np.array([])
    return BeReport(
        n_grid=cfg.n_grid, ks=ks, ks_se=se, noise_floor=floor, window_mask=mask,
        exponent=exponent, exponent_ci=ci, predicted=cfg.expected_exponent,
        inconclusive=inconclusive, sigma2=var.sigma2, variance=var,
        tail_z=tail_z, tail_curve=tail_curve, provenance=_provenance(cfg),
    )


# --- aperiodic local limit theorem ---------------------------------------------


@dataclass(frozen=True)
class LltReport:
    n_grid: tuple
    counts: np.ndarray
    stat: np.ndarray
    target: float
    ratio: np.ndarray
    ratio_se: np.ndarray
    kappa: float
    interval: tuple
    sigma2: float
    variance: VarianceInfo
    scan_group: str
    provenance: Provenance


def run_llt(cfg: ExperimentConfig) -> LltReport:
    """sqrt(n) P(S_n f + u + v after n steps lands in J + kappa sqrt(n)).

    Refuses to run when the periodicity scan detects a near-eigenvalue 1 on
    the configured (t, z) grid; pass scan_t_grid=() to bypass for systems
    without a discretized operator.
    """
    f = cfg.observable
    if not f.mean_removed:
        raise PreconditionError("observable must be mean-removed (center_observable)")
    scan_group = "not_scanned"
    scan_ts = _DEFAULT_SCAN_T if cfg.scan_t_grid is None else cfg.scan_t_grid
    if len(scan_ts) > 0:
        if not isinstance(cfg.system, LsvSystem):
            raise PreconditionError("periodicity scan needs the interval map system")
        scan = periodicity_scan(cfg.system, f, list(scan_ts), K=cfg.K)
        if scan.detections:
            d = scan.detections[0]
            raise PreconditionError(
                f"aperiodicity scan detected eigenvalue near 1 at t={d.t:.6g}, "
                f"z={d.z:.6g} (group {scan.inferred_group}); experiment refused")
        scan_group = scan.inferred_group
    var = _resolve_sigma2(cfg)
    if var.sigma2 <= 0:
        raise PreconditionError("degenerate variance: no local limit density")
    sigma = math.sqrt(var.sigma2)
    lo, hi = float(cfg.interval[0]), float(cfg.interval[1])
    if hi <= lo:
        raise PreconditionError("interval must have positive length")
    target = (hi - lo) * math.exp(-cfg.kappa**2 / (2.0 * var.sigma2)) \
        / (sigma * math.sqrt(2.0 * math.pi))
    u_eval = _value_fn(cfg.system, cfg.shift_u)
    v_eval = _value_fn(cfg.system, cfg.shift_v)
    counts = np.empty(len(cfg.n_grid))
    stat = np.empty(len(cfg.n_grid))
    stat_se = np.empty(len(cfg.n_grid))
    walk = _birkhoff_checkpoints(cfg.system, f, cfg.n_grid, cfg.samples, cfg.seed)
    for i, (n, s, x, x0) in enumerate(walk):
        k_n = cfg.kappa * math.sqrt(n)
        total = s + u_eval(x0) + v_eval(x)
        hits = float(np.count_nonzero((total > k_n + lo) & (total <= k_n + hi)))
        p = hits / cfg.samples
        counts[i] = hits
        stat[i] = math.sqrt(n) * p
        stat_se[i] = math.sqrt(n) * math.sqrt(max(p * (1 - p), 0.0) / cfg.samples)
    return LltReport(
        n_grid=cfg.n_grid, counts=counts, stat=stat, target=target,
        ratio=stat / target, ratio_se=stat_se / target, kappa=cfg.kappa,
        interval=(lo, hi), sigma2=var.sigma2, variance=var,
        scan_group=scan_group, provenance=_provenance(cfg),
    )


# --- lattice local limit theorem (exact) ---------------------------------------


@dataclass(frozen=True)
class LatticeReport:
    n_grid: tuple
    k_values: np.ndarray
    point_prob: np.ndarray
    stat: np.ndarray
    target: np.ndarray
    abs_error: np.ndarray
    span: int
    sigma2: float
    degenerate: bool
    mass_defect: float
    exact: bool
    provenance: Provenance


def _lattice_span(support_vals: np.ndarray) -> int:
    if len(support_vals) < 2:
        return 0
    diffs = np.diff(np.sort(support_vals)).astype(np.int64)
    g = 0
    for d in diffs:
        g = math.gcd(g, int(d))
    return g


def run_lattice_llt(cfg: ExperimentConfig) -> LatticeReport:
    """Exact point probabilities of an integer lattice Birkhoff sum.

    The observable splits as f = rho + q with q integer cellwise; the
    distribution of S_n q is propagated by dynamic programming over
    (state, accumulated value), so every reported probability is exact.
    """
    tower = cfg.system
    if not isinstance(tower, FiniteTower):
        raise PreconditionError("lattice runs need a finite tower system")
    f = cfg.observable
    if f.kind != "cellwise_constant":
        raise PreconditionError("lattice runs need a cellwise observable")
    vals = np.asarray(f.evaluator, dtype=float) - cfg.rho
    q = np.rint(vals).astype(np.int64)
    if np.max(np.abs(vals - q)) > 1e-9:
        raise PreconditionError("observable minus rho must be integer on every state")
    n_states = len(tower.states)
    if len(q) != n_states:
        raise PreconditionError("observable length must match the tower state count")
    n_max = cfg.n_grid[-1]
    q_lo, q_hi = int(q.min()), int(q.max())
    width = n_max * (q_hi - q_lo) + 1
    if n_states * width > 200_000_000:
        cap = 200_000_000 // max(n_states * (q_hi - q_lo), 1)
        raise NumericalError(
            f"DP table needs {n_states * width} entries; chunked-range limit "
            f"exceeded, cap n at {cap}")
    sigma2 = _tower_sigma2(tower, q.astype(float))
    degenerate = sigma2 < 1e-12
    pi = tower.state_masses() / tower.state_masses().sum()
    trans = tower.transition_matrix()
    offset = -n_max * min(q_lo, 0)
    dist = np.zeros((n_states, width))
    dist[:, offset] = pi

    k_values = np.empty(len(cfg.n_grid), dtype=np.int64)
    point_prob = np.empty(len(cfg.n_grid))
    lattice_rep = np.zeros(len(cfg.n_grid), dtype=np.int64)
    mass_defect = 0.0
    span_votes: list[int] = []
    grid_pos = 0
    for n in range(1, n_max + 1):
        shifted = np.zeros_like(dist)
        for s in range(n_states):  # accumulate q at the source, then move
            dq = int(q[s])
            if dq >= 0:
                shifted[s, dq:] = dist[s, : width - dq] if dq else dist[s]
            else:
                shifted[s, :dq] = dist[s, -dq:]
        dist = trans.T @ shifted
        if n == cfg.n_grid[grid_pos]:
            marginal = dist.sum(axis=0)
            mass_defect = max(mass_defect, abs(float(marginal.sum()) - 1.0))
            support = np.flatnonzero(marginal > 0.0) - offset
            span_votes.append(_lattice_span(support))
            lattice_rep[grid_pos] = support[0] if len(support) else 0
            k_n = int(round(cfg.kappa * math.sqrt(n)))
            k_values[grid_pos] = k_n
            idx = k_n + offset
            point_prob[grid_pos] = float(marginal[idx]) if 0 <= idx < width else 0.0
            grid_pos += 1
            if grid_pos == len(cfg.n_grid):
                break
    span = 0
    for g in span_votes:
        span = math.gcd(span, g)
    ns = np.asarray(cfg.n_grid, dtype=float)
    stat = np.sqrt(ns) * point_prob
    if degenerate:
        target = np.full(len(ns), float("nan"))
    else:
        sigma = math.sqrt(sigma2)
        kappa_eff = k_values / np.sqrt(ns)
        target = max(span, 1) * np.exp(-kappa_eff**2 / (2.0 * sigma2)) \
            / (sigma * math.sqrt(2.0 * math.pi))
        # off-lattice k_n can only ever see probability zero
        reachable = (k_values - lattice_rep) % max(span, 1) == 0
        target = np.where(reachable, target, 0.0)
    return LatticeReport(
        n_grid=cfg.n_grid, k_values=k_values, point_prob=point_prob, stat=stat,
        target=target, abs_error=np.abs(stat - target), span=int(span),
        sigma2=sigma2, degenerate=degenerate, mass_defect=mass_defect,
        exact=True, provenance=_provenance(cfg),
    )


def lattice_distribution(cfg: ExperimentConfig, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact (values, probabilities) of S_n q for cross-checks against
    closed-form walks; support restricted to positive-probability entries."""
    sub = replace(cfg, n_grid=(max(n, 1),))
    tower = sub.system
    q = np.rint(np.asarray(sub.observable.evaluator, dtype=float) - sub.rho).astype(np.int64)
    n_states = len(tower.states)
    q_lo, q_hi = int(q.min()), int(q.max())
    width = n * (q_hi - q_lo) + 1
    offset = -n * min(q_lo, 0)
    pi = tower.state_masses() / tower.state_masses().sum()
    dist = np.zeros((n_states, width))
    dist[:, offset] = pi
    trans = tower.transition_matrix()
    for _ in range(n):
        shifted = np.zeros_like(dist)
        for s in range(n_states):
            dq = int(q[s])
            if dq >= 0:
                shifted[s, dq:] = dist[s, : width - dq] if dq else dist[s]
            else:
                shifted[s, :dq] = dist[s, -dq:]
        dist = trans.T @ shifted
    marginal = dist.sum(axis=0)
    keep = marginal > 0.0
    return np.flatnonzero(keep) - offset, marginal[keep]


# --- characteristic-function comparison ----------------------------------------


@dataclass(frozen=True)
class CharfnReport:
    n_grid: tuple
    t_grid: np.ndarray
    empirical: np.ndarray
    target: np.ndarray
    deviation: np.ndarray
    mc_se: np.ndarray
    flagged: np.ndarray
    envelope_C: float
    envelope_d: float
    beta: float
    sigma2: float
    provenance: Provenance


def run_charfn_compare(cfg: ExperimentConfig) -> CharfnReport:
    """Monte Carlo E(e^{itS_n f} u v after n steps) against the product law.

    The target is (1 - sigma^2 L(t)/2)^n (mean u)(mean v) with L(t) taken
    from the discretized eigenvalue curve; deviations are fitted to the
    polynomial-plus-geometric envelope and points whose Monte Carlo error
    exceeds half the observed deviation are flagged unusable.
    """
    system, f = cfg.system, cfg.observable
    if not isinstance(system, LsvSystem):
        raise PreconditionError("the eigenvalue curve needs the interval map system")
    if not f.mean_removed:
        raise PreconditionError("observable must be mean-removed (center_observable)")
    ts = np.asarray([float(t) for t in cfg.t_grid])
    if len(ts) == 0:
        raise PreconditionError("charfn runs need a nonempty t_grid")
    # the variance extrapolation needs its own small-t samples; lambda(1,-t)
    # is the conjugate of lambda(1,t), so only |t| values are computed
    pos = sorted({float(abs(t)) for t in ts if t != 0.0} | set(_SIGMA_T_GRID))
    sd = analyze_spectrum(system, f, cfg.K, pos)
    if sd.sigma2 <= 0:
        raise PreconditionError("degenerate variance: trivial product law")
    l_of_t = dict(zip(sd.t_grid, sd.L_curve))
    l_vals = np.array([
        0.0 if t == 0.0
        else (complex(l_of_t[abs(t)]) if t > 0 else np.conj(l_of_t[abs(t)]))
        for t in ts], dtype=complex)
    mean_u = _mean_of(system, cfg.shift_u)
    mean_v = _mean_of(system, cfg.shift_v)
    u_eval = _value_fn(system, cfg.shift_u) if cfg.shift_u is not None else None
    v_eval = _value_fn(system, cfg.shift_v) if cfg.shift_v is not None else None

    shape = (len(cfg.n_grid), len(ts))
    emp = np.empty(shape, dtype=complex)
    mc_se = np.empty(shape)
    walk = _birkhoff_checkpoints(system, f, cfg.n_grid, cfg.samples, cfg.seed)
    for i, (n, s, x, x0) in enumerate(walk):
        uv = np.ones(cfg.samples)
        if u_eval is not None:
            uv = uv * u_eval(x0)
        if v_eval is not None:
            uv = uv * v_eval(x)
        for j, t in enumerate(ts):
            w = np.exp(1j * t * s) * uv
            emp[i, j] = np.mean(w)
            mc_se[i, j] = float(np.std(w)) / math.sqrt(cfg.samples)

    ns = np.asarray(cfg.n_grid, dtype=float)
    base = 1.0 - sd.sigma2 * l_vals / 2.0
    target = (base[None, :] ** ns[:, None]) * (mean_u * mean_v)
    deviation = np.abs(emp - target)
    flagged = mc_se > 0.5 * deviation

    beta = 1.0 / system.alpha
    nz = ts != 0.0
    d_fit = 1e-12
    if np.any(nz):
        deficits = (1.0 - np.abs(base[nz])) / ts[nz] ** 2
        d_fit = max(0.5 * float(np.min(deficits)), 1e-12)
    w_poly = ns ** (-(beta - 1.0))
    c_fit = 0.0
    for j, t in enumerate(ts):
        geo = 1.0 - d_fit * t * t
        conv = np.array([
            sum((k + 1.0) ** (-(beta - 1.0)) * geo ** (n - 1 - k)
                for k in range(int(n))) for n in cfg.n_grid])
        env = w_poly + abs(t) * conv
        usable = ~flagged[:, j]
        if np.any(usable):
            c_fit = max(c_fit, float(np.max(deviation[usable, j] / env[usable])))
    return CharfnReport(
        n_grid=cfg.n_grid, t_grid=ts, empirical=emp, target=target,
        deviation=deviation, mc_se=mc_se, flagged=flagged,
        envelope_C=c_fit, envelope_d=d_fit, beta=beta, sigma2=sd.sigma2,
        provenance=_provenance(cfg),
    )


# --- persistence ---------------------------------------------------------------


def report_rows(rep) -> list:
    """One (n, statistic, value, stderr_or_exact) row per recorded number."""
    rows = []
    if isinstance(rep, (CltReport, BeReport)):
        for i, n in enumerate(rep.n_grid):
            rows.append((n, "ks_distance", float(rep.ks[i]), rep.ks_se))
    elif isinstance(rep, LltReport):
        for i, n in enumerate(rep.n_grid):
            rows.append((n, "sqrt_n_hit_fraction", float(rep.stat[i]),
                         float(rep.ratio_se[i] * rep.target)))
            rows.append((n, "ratio_to_target", float(rep.ratio[i]),
                         float(rep.ratio_se[i])))
    elif isinstance(rep, LatticeReport):
        for i, n in enumerate(rep.n_grid):
            rows.append((n, "sqrt_n_point_prob", float(rep.stat[i]), 0.0))
            rows.append((n, "abs_error", float(rep.abs_error[i]), 0.0))
    elif isinstance(rep, CharfnReport):
        for i, n in enumerate(rep.n_grid):
            for j, t in enumerate(rep.t_grid):
                rows.append((n, f"deviation_t={t:.6g}", float(rep.deviation[i, j]),
                             float(rep.mc_se[i, j])))
    else:
        raise PreconditionError(f"unknown report type {type(rep).__name__}")
    return rows


def report_summary(rep) -> dict:
    out = {"type": type(rep).__name__,
           "config_hash": rep.provenance.config_hash,
           "seed": rep.provenance.seed,
           "code_version": rep.provenance.code_version}
    if isinstance(rep, CltReport):
        out.update(sigma2=rep.sigma2, degenerate=rep.degenerate,
                   trend_ok=rep.trend_ok, noise_floor=rep.noise_floor)
    elif isinstance(rep, BeReport):
        out.update(exponent=rep.exponent, exponent_ci=list(rep.exponent_ci),
                   predicted=rep.predicted, inconclusive=rep.inconclusive,
                   sigma2=rep.sigma2, noise_floor=rep.noise_floor)
    elif isinstance(rep, LltReport):
        out.update(target=rep.target, kappa=rep.kappa, sigma2=rep.sigma2,
                   final_ratio=float(rep.ratio[-1]),
                   final_ratio_se=float(rep.ratio_se[-1]),
                   scan_group=rep.scan_group)
    elif isinstance(rep, LatticeReport):
        out.update(span=rep.span, sigma2=rep.sigma2, degenerate=rep.degenerate,
                   mass_defect=rep.mass_defect, exact=rep.exact,
                   final_abs_error=float(rep.abs_error[-1]))
    elif isinstance(rep, CharfnReport):
        out.update(envelope_C=rep.envelope_C, envelope_d=rep.envelope_d,
                   beta=rep.beta, sigma2=rep.sigma2,
                   flagged_points=int(np.count_nonzero(rep.flagged)))
    return out


def save_report(rep, csv_path: str, json_path: str) -> None:
    with open(csv_path, "w") as fh:
        fh.write("n,statistic,value,stderr\n")
        for n, name, value, se in report_rows(rep):
            fh.write(f"{n},{name},{value!r},{se!r}\n")
    with open(json_path, "w") as fh:
        json.dump(report_summary(rep), fh, indent=2, sort_keys=True)
        fh.write("\n")
