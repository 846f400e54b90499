"""Operator renewal calculus on first-return sequences and finite towers.

A renewal spec packages a causal sequence R_n (first-return operators, R_0 =
0) whose sum R(1) has a simple leading eigenvalue 1.  The all-returns
sequence T_n solves the renewal recursion T_n = sum R_k T_{n-k} and converges
to P/mu at the polynomial rate set by the tail exponent of R.  On exact
finite towers the full iterate decomposition through boundary operators
(first arrival B_b, returns T_k, final excursion A_a, never-in-base C_n) is
checked in plain matrix arithmetic.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, PreconditionError
from .seq_algebra import CAUSAL, WeightedSeq
from .tower_core import FiniteTower, TowerObservable


# --- specs ---------------------------------------------------------------------


@dataclass(frozen=True)
class RenewalSpec:
    """A truncated first-return sequence with its limit data.

    R holds R_1..R_nmax as a causal WeightedSeq with R_0 = 0; beta is the
    design tail exponent (sum_{k>n} |R_k| = O(1/n^beta)); mu the mean return
    coefficient with P R'(1) P = mu P; projection the rank-one spectral
    projection of R(1) at eigenvalue 1.
    """

    R: WeightedSeq
    beta: float
    mu: float
    projection: np.ndarray
    label: str = ""

    @property
    def dim(self) -> int:
        return self.R.dim

    def coeff(self, n: int):
        return self.R.entry(n)


def _leading_pair(mat: np.ndarray):
    vals, vecs = np.linalg.eig(mat)
    i = int(np.argmin(np.abs(vals - 1.0)))
    lam = vals[i]
    if abs(lam - 1.0) > 1e-8:
        raise PreconditionError(f"R(1) leading eigenvalue {lam} is not 1")
    rest = np.delete(np.abs(vals), i)
    if len(rest) and rest.max() > 1.0 - 1e-8:
        raise PreconditionError("leading eigenvalue of R(1) is not simple")
    right = np.real(vecs[:, i])
    lvals, lvecs = np.linalg.eig(mat.T)
    j = int(np.argmin(np.abs(lvals - 1.0)))
    left = np.real(lvecs[:, j])
    proj = np.outer(right, left) / np.dot(left, right)
    return proj


def _finalize_spec(coeffs: np.ndarray, beta: float, label: str) -> RenewalSpec:
    if coeffs.ndim == 1:
        r1 = float(coeffs.sum())
        if abs(r1 - 1.0) > 1e-10:
            raise PreconditionError(f"R(1) = {r1} must be 1 for a scalar spec")
        proj = np.array(1.0)
        mu = float(np.dot(np.arange(len(coeffs)), coeffs))
    else:
        r1 = coeffs.sum(axis=0)
        proj = _leading_pair(r1)
        rp = np.tensordot(np.arange(len(coeffs), dtype=float), coeffs, axes=(0, 0))
        # P R'(1) P = mu P; extract the scalar through the trace
        prp = proj @ rp @ proj
        mu = float(np.trace(prp) / np.trace(proj))
    if mu <= 0:
        raise PreconditionError("mean return coefficient mu must be positive")
    gamma = max(beta, 1.5)
    seq = WeightedSeq(0, len(coeffs) - 1, coeffs, gamma, CAUSAL)
    return RenewalSpec(R=seq, beta=beta, mu=mu, projection=proj, label=label)


def make_scalar_spec(beta: float, n_trunc: int, label: str = "") -> RenewalSpec:
    """Stochastic scalar spec with R_n proportional to 1/n^{beta+1}."""
    if beta <= 2:
        raise PreconditionError("tail exponent beta must exceed 2")
    if n_trunc < 4:
        raise PreconditionError("n_trunc must be at least 4")
    n = np.arange(n_trunc + 1, dtype=float)
    coeffs = np.zeros(n_trunc + 1)
    coeffs[1:] = n[1:] ** (-(beta + 1.0))
    coeffs /= coeffs.sum()
    return _finalize_spec(coeffs, beta, label or f"scalar beta={beta}")


def spec_from_tower(tower: FiniteTower, beta: float = 4.0) -> RenewalSpec:
    """First-return matrices of a finite tower, in function coordinates.

    R_n maps base functions through the cells with return time n; the sum
    over n is the induced transfer matrix, which fixes constants.
    """
    d = tower.n_cells
    phi = tower.return_times
    m = tower.masses
    n_max = int(phi.max())
    coeffs = np.zeros((n_max + 1, d, d))
    for i in range(d):
        for k in range(d):
            coeffs[phi[i], k, i] += m[i] * tower.transfer_rows[i, k] / m[k]
    return _finalize_spec(coeffs, beta, label=f"tower d={d}")


# --- renewal recursion -----------------------------------------------------------


def renewal_solve(spec: RenewalSpec, n_out: int) -> WeightedSeq:
    """All-returns coefficients: T_0 = I, T_n = sum_{k=1}^n R_k T_{n-k}."""
    if n_out < 0:
        raise PreconditionError("n_out must be nonnegative")
    d = spec.dim
    r = spec.R.coeffs
    kmax_all = len(r) - 1
    if d == 1:
        T = np.zeros(n_out + 1)
        T[0] = 1.0
        for n in range(1, n_out + 1):
            kmax = min(n, kmax_all)
            T[n] = np.dot(r[1 : kmax + 1], T[n - kmax : n][::-1])
        coeffs = T
    else:
        T = np.zeros((n_out + 1, d, d))
        T[0] = np.eye(d)
        for n in range(1, n_out + 1):
            kmax = min(n, kmax_all)
            acc = np.zeros((d, d))
            for k in range(1, kmax + 1):
                acc += r[k] @ T[n - k]
            T[n] = acc
        coeffs = T
    return WeightedSeq(0, n_out, coeffs, spec.R.gamma, CAUSAL)


def _twisted_coeffs(spec: RenewalSpec, t: float, c_seq: np.ndarray | None):
    """R_n(t): scalar twist e^{itc_n} per return time (default c_n = n)."""
    r = spec.R.coeffs
    if c_seq is None:
        c_seq = np.arange(len(r), dtype=float)
    c_seq = np.asarray(c_seq, dtype=float)
    if len(c_seq) != len(r):
        raise PreconditionError("c_seq must align with the R support")
    tw = np.exp(1j * t * c_seq)
    return r * tw if spec.dim == 1 else r * tw[:, None, None]


def _renewal_solve_coeffs(r: np.ndarray, n_out: int) -> np.ndarray:
    d = 1 if r.ndim == 1 else r.shape[1]
    kmax_all = len(r) - 1
    if d == 1:
        T = np.zeros(n_out + 1, dtype=r.dtype)
        T[0] = 1.0
        for n in range(1, n_out + 1):
            kmax = min(n, kmax_all)
            T[n] = np.dot(r[1 : kmax + 1], T[n - kmax : n][::-1])
        return T
    T = np.zeros((n_out + 1, d, d), dtype=r.dtype)
    T[0] = np.eye(d)
    for n in range(1, n_out + 1):
        kmax = min(n, kmax_all)
        acc = np.zeros((d, d), dtype=r.dtype)
        for k in range(1, kmax + 1):
            acc += r[k] @ T[n - k]
        T[n] = acc
    return T


# --- rate verification ------------------------------------------------------------


@dataclass(frozen=True)
class RateReport:
    exponent: float
    expected: float
    residual_rms: float
    window: tuple
    errors: np.ndarray


def verify_renewal_limit(spec: RenewalSpec, n_out: int, fit_window: tuple | None = None) -> RateReport:
    """Fit the decay exponent of ||T_n - P/mu|| against beta - 1."""
    T = renewal_solve(spec, n_out)
    limit = spec.projection / spec.mu
    if spec.dim == 1:
        e = np.abs(T.coeffs - float(limit))
    else:
        e = np.max(np.abs(T.coeffs - limit[None, :, :]), axis=(1, 2))
    if e[-1] > e[max(1, n_out // 10)]:
        raise NumericalError("renewal errors are not decaying; spec violates its hypotheses")
    if fit_window is None:
        fit_window = (max(10, n_out // 100), int(0.9 * n_out))
    lo, hi = fit_window
    ns = np.arange(lo, hi + 1)
    vals = e[lo : hi + 1]
    mask = vals > 1e-13
    if np.count_nonzero(mask) < 10:
        # finitely supported specs hit the float floor exponentially fast
        return RateReport(exponent=float("inf"), expected=spec.beta - 1.0,
                          residual_rms=0.0, window=fit_window, errors=e)
    slope, icept = np.polyfit(np.log(ns[mask]), np.log(vals[mask]), 1)
    fitres = np.log(vals[mask]) - (slope * np.log(ns[mask]) + icept)
    return RateReport(
        exponent=-float(slope), expected=spec.beta - 1.0,
        residual_rms=float(np.sqrt(np.mean(fitres**2))), window=fit_window, errors=e,
    )


@dataclass(frozen=True)
class EnvelopeFitReport:
    C: float
    d: float
    t_grid: np.ndarray
    M_curve: np.ndarray
    max_ratio_at: tuple
    C_half: float
    circle_min_gap: float


def _leading_eigenvalue(mat) -> complex:
    if np.ndim(mat) == 0:
        return complex(mat)
    vals = np.linalg.eigvals(mat)
    return complex(vals[np.argmax(np.abs(vals))])


def verify_perturbed_envelope(
    spec: RenewalSpec,
    t_grid,
    n_out: int,
    c_seq: np.ndarray | None = None,
    circle_grid: int = 256,
) -> EnvelopeFitReport:
    """Fit C, d in ||T_n(t) - (1-M(t)/mu)^n P / mu|| <= C/n^{b-1} + C|t| (w * geo)_n.

    M(t) = 1 - lam(t) where lam(t) is the leading eigenvalue of R(1,t);
    d comes from the modulus deficit of the prediction base 1 - M(t)/mu and
    C is the maximal observed ratio, making the margin zero by construction.
    Stability of C is probed by refitting on the first half of the range;
    instability signals a twist violating Re M(t) ~ c t^2 > 0 (e.g. an
    uncentered lattice twist, where the left side saturates at 1/mu instead
    of decaying).  I - R(z) invertibility off z = 1 is checked on a finite
    circle grid and the minimal gap reported.
    """
    t_grid = np.asarray([float(t) for t in t_grid])
    if np.any(t_grid == 0.0):
        t_grid = t_grid[t_grid != 0.0]
    if len(t_grid) == 0:
        raise PreconditionError("need nonzero t values")
    beta = spec.beta
    P = np.atleast_2d(np.asarray(spec.projection, dtype=float))
    d_dim = spec.dim

    # invertibility of I - R(z) on the unit circle, away from z = 1
    gap = math.inf
    for j in range(1, circle_grid):
        z = np.exp(2j * np.pi * j / circle_grid)
        rz = np.tensordot(z ** np.arange(len(spec.R.coeffs)), spec.R.coeffs, axes=(0, 0))
        lam = _leading_eigenvalue(rz)
        gap = min(gap, abs(1.0 - lam))
    if gap < 1e-6:
        raise NumericalError(f"I - R(z) nearly singular off z=1 (gap {gap:.2e}); spec not mixing")

    lam_prev = 1.0 + 0.0j
    n = np.arange(1, n_out + 1, dtype=float)
    w = n ** (-(beta - 1.0))
    worst = 0.0
    worst_half = 0.0
    worst_at = (0.0, 0)
    lams = np.empty(len(t_grid), dtype=complex)
    d_fit = math.inf
    for i, t in enumerate(np.sort(np.abs(t_grid))):
        rt = _twisted_coeffs(spec, t, c_seq)
        r1t = rt.sum(axis=0)
        lam = _leading_eigenvalue(r1t)
        if abs(lam - lam_prev) > 0.5:
            raise NumericalError(f"eigenvalue branch lost at t={t}: {lam_prev} -> {lam}")
        lam_prev = lam
        lams[i] = lam
        base = 1.0 - (1.0 - lam) / spec.mu
        d_fit = min(d_fit, max((1.0 - abs(base)) / (t * t), 1e-12) * 0.5)
    for i, t in enumerate(np.sort(np.abs(t_grid))):
        rt = _twisted_coeffs(spec, t, c_seq)
        Tt = _renewal_solve_coeffs(rt, n_out)
        base = 1.0 - (1.0 - lams[i]) / spec.mu
        if d_dim == 1:
            lhs = np.abs(Tt[1:] - P[0, 0] / spec.mu * base**n)
        else:
            pred = (base**n)[:, None, None] * (P / spec.mu)[None, :, :]
            lhs = np.max(np.abs(Tt[1:] - pred), axis=(1, 2))
        geo = (1.0 - d_fit * t * t) ** n
        conv = np.empty(n_out)
        s = 0.0
        q = 1.0 - d_fit * t * t
        for k in range(n_out):  # (w * geo)_n by the geometric recursion
            s = q * s + w[k]
            conv[k] = s
        env = w + abs(t) * conv
        ratio = lhs / env
        j = int(np.argmax(ratio))
        if ratio[j] > worst:
            worst = float(ratio[j])
            worst_at = (float(t), j + 1)
        half = float(np.max(ratio[: n_out // 2]))
        worst_half = max(worst_half, half)
    if not np.isfinite(worst):
        raise NumericalError("envelope ratio diverged")
    return EnvelopeFitReport(
        C=worst, d=float(d_fit), t_grid=t_grid, M_curve=1.0 - lams,
        max_ratio_at=worst_at, C_half=worst_half, circle_min_gap=float(gap),
    )


# --- exact tower decompositions ---------------------------------------------------


def _state_observable(tower: FiniteTower, f: TowerObservable | np.ndarray | None) -> np.ndarray:
    if f is None:
        return np.zeros(tower.n_states)
    if isinstance(f, TowerObservable):
        if f.kind != "cellwise_constant":
            raise PreconditionError("finite towers need cellwise_constant observables")
        vals = np.asarray(f.evaluator, dtype=float)
    else:
        vals = np.asarray(f, dtype=float)
    if vals.shape != (tower.n_states,):
        raise PreconditionError("observable must supply one value per tower state")
    return vals


def tower_operator_family(tower: FiniteTower, f=None, t: float = 0.0):
    """The masked building blocks of the iterate decomposition.

    Returns (That, D_B, D_c) with That the twisted transfer matrix
    That(t) = That diag(e^{itf}) and the base/complement state masks.
    """
    vals = _state_observable(tower, f)
    that = tower.transfer_matrix().astype(complex if t != 0.0 else float)
    if t != 0.0:
        that = that * np.exp(1j * t * vals)[None, :]
    bm = tower.base_state_mask()
    return that, bm


def decompose_iterate(tower: FiniteTower, f, t: float, n: int) -> float:
    """Max-entry residual of That(t)^n = C_n + sum_{a+k+b=n} A_a T_k B_b.

    All operators are built as masked products of the twisted transfer
    matrix: R_k starts and ends in the base avoiding it in between, T_k is
    base-to-base, A_a leaves the base for good, B_b reaches it for the first
    time, C_n never touches it.
    """
    if n < 0:
        raise PreconditionError("n must be nonnegative")
    that, bm = tower_operator_family(tower, f, t)
    dB = np.diag(bm.astype(that.dtype))
    dC = np.diag((~bm).astype(that.dtype))
    dim = that.shape[0]

    # A_a = (dC That)^a dB, B_b = dB (That dC)^b, C_n = (dC That)^n dC
    A = [dB.copy()]
    B = [dB.copy()]
    CM = np.eye(dim, dtype=that.dtype)
    for _ in range(n):
        A.append(dC @ that @ A[-1])
        B.append(B[-1] @ that @ dC)
        CM = dC @ that @ CM
    C_n = CM @ dC

    # T_k = dB That^k dB
    T = [dB.copy()]
    power = np.eye(dim, dtype=that.dtype)
    for _ in range(n):
        power = that @ power
        T.append(dB @ power @ dB)

    total = C_n.copy()
    for a in range(n + 1):
        for k in range(n + 1 - a):
            b = n - a - k
            total += A[a] @ T[k] @ B[b]
    return float(np.max(np.abs(power - total)))


def renewal_matches_masked_products(tower: FiniteTower, n: int = 12) -> float:
    """Residual between T_k = dB That^k dB and the renewal sums of masked R_k."""
    that, bm = tower_operator_family(tower)
    dB = np.diag(bm.astype(float))
    dC = np.diag((~bm).astype(float))
    dim = that.shape[0]
    R = [np.zeros((dim, dim))]
    cur = dB.copy()
    for _ in range(n):
        R.append(dB @ that @ cur)
        cur = dC @ that @ cur
    T = [dB.copy()]
    worst = 0.0
    power = np.eye(dim)
    for k in range(1, n + 1):
        acc = sum(R[j] @ T[k - j] for j in range(1, k + 1))
        T.append(acc)
        power = that @ power
        worst = max(worst, float(np.max(np.abs(acc - dB @ power @ dB))))
    return worst


@dataclass(frozen=True)
class BoundaryReport:
    max_A_error: float
    max_B_error: float
    max_C_excess: float


def boundary_identities(tower: FiniteTower, n_panel: int = 8, seed: int = 0) -> BoundaryReport:
    """Exact boundary-mass identities on a finite tower.

    sum_a int A_a(1_B) v = int v and sum_b int_B B_b u = int u for a panel of
    random state functions; and the L1 norm of C_n(u) is bounded by the mass
    of the levels above n times the sup of u.
    """
    that, bm = tower_operator_family(tower)
    dB = np.diag(bm.astype(float))
    dC = np.diag((~bm).astype(float))
    masses = tower.state_masses()
    levels = np.concatenate([np.arange(p) for p in tower.return_times])
    h_max = int(tower.return_times.max())
    rng = np.random.default_rng(seed)
    us = np.concatenate([np.ones((1, tower.n_states)),
                         rng.standard_normal((n_panel, tower.n_states))])

    A = [dB.copy()]
    B = [dB.copy()]
    for _ in range(h_max + 1):  # (dC That)^a vanishes beyond the tower height
        A.append(dC @ that @ A[-1])
        B.append(B[-1] @ that @ dC)
    a_img = sum(mat @ bm.astype(float) for mat in A)  # sum_a A_a(1_B)
    errA = max(abs(np.dot(masses, a_img * v) - np.dot(masses, v)) for v in us)
    errB = 0.0
    for u in us:
        total = sum(np.dot(masses[bm], (mat @ u)[bm]) for mat in B)
        errB = max(errB, abs(total - np.dot(masses, u)))

    excess = 0.0
    CM = dC.copy()
    for n in range(1, h_max + 1):
        CM = dC @ that @ CM
        bound_mass = float(masses[levels >= n + 1].sum())
        for u in us:
            l1 = float(np.dot(masses, np.abs(CM @ u)))
            excess = max(excess, l1 - bound_mass * float(np.max(np.abs(u))))
    return BoundaryReport(max_A_error=float(errA), max_B_error=float(errB),
                          max_C_excess=float(excess))


# --- persistence -------------------------------------------------------------------


def save_renewal_spec(spec: RenewalSpec, path) -> None:
    """Structured text: header with the limit data, one row of entries per n."""
    coeffs = spec.R.coeffs
    d = spec.dim
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# beta={spec.beta!r} mu={spec.mu!r} d={d} nmax={len(coeffs) - 1} label={spec.label}\n")
        flat = coeffs.reshape(len(coeffs), -1)
        for n, row in enumerate(flat):
            fh.write(" ".join([str(n)] + [f"{v:.17g}" for v in row]) + "\n")


def load_renewal_spec(path) -> RenewalSpec:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise PreconditionError("missing renewal spec header")
        fields = dict(tok.split("=", 1) for tok in header[1:].split() if "=" in tok)
        beta = float(fields["beta"])
        d = int(fields["d"])
        n_max = int(fields["nmax"])
        coeffs = np.zeros((n_max + 1, d * d))
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            coeffs[int(parts[0])] = [float(v) for v in parts[1:]]
    coeffs = coeffs[:, 0] if d == 1 else coeffs.reshape(n_max + 1, d, d)
    return _finalize_spec(coeffs, beta, label=fields.get("label", ""))


def save_rate_report(rep: RateReport, csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "error"])
        for n, e in enumerate(rep.errors):
            w.writerow([n, f"{e:.17g}"])
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump({"exponent": rep.exponent, "expected": rep.expected,
                       "residual_rms": rep.residual_rms, "window": list(rep.window)},
                      fh, indent=2)
