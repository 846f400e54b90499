"""Discretized first-return transfer operators for the intermittent map.

The induced map on the base B = (1/2, 1] is uniformly expanding with full
branches, so a piecewise-constant discretization on a uniform K-grid of B
converges.  The operator is assembled by point deposits: every (cell, branch)
intersection carries q Gauss points, each point is iterated to its first
return and deposits its Lebesgue weight into the image cell, twisted by
z^phi e^{it f_B} when perturbed.  Columns are exactly stochastic at t = 0,
z = 1, so constants are fixed up to float roundoff rather than up to a
truncation lump.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import minimize_scalar

from .errors import NumericalError, PreconditionError
from .tower_core import LsvSystem, TowerObservable, lsv_map_inplace

_GAUSS_Q = 8
_DEFAULT_GAP = 0.05
_TAIL_TARGET = 1e-9


# --- quadrature skeleton ------------------------------------------------------


@dataclass(frozen=True)
class InducedQuadrature:
    """Point-deposit data of the induced map on the uniform K-grid of B.

    Per quadrature point: source cell, image cell, Lebesgue deposit weight
    (columns of the untwisted matrix sum to 1), return time phi, induced
    observable value f_B, and the point itself.  h is the fixed density of
    the untwisted operator (mean 1 over cells) and mu are the invariant
    point weights, normalized to total mass 1 on the base.
    """

    alpha: float
    K: int
    n_max: int
    src: np.ndarray
    img: np.ndarray
    deposit: np.ndarray
    phi: np.ndarray
    fB: np.ndarray
    points: np.ndarray
    h: np.ndarray
    mean_shift: float

    @property
    def mu(self) -> np.ndarray:
        return self.deposit / self.K * self.h[self.src]

    def matrix(self, t: float = 0.0, z: complex = 1.0):
        """Sparse K x K twisted operator in function coordinates.

        Entries are deposit * h(src)/h(img) * z^phi e^{it fB}; at t = 0, z = 1
        the constant vector is fixed and the invariant cell masses h/K form
        the left fixed functional.
        """
        vals = self.deposit * self.h[self.src] / self.h[self.img]
        if t != 0.0 or z != 1.0:
            vals = vals.astype(complex)
        if t != 0.0:
            vals = vals * np.exp(1j * t * self.fB)
        if z != 1.0:
            vals = vals * np.asarray(z) ** self.phi
        return sparse.coo_matrix((vals, (self.img, self.src)), shape=(self.K, self.K)).tocsr()

    def expectation(self, values: np.ndarray) -> complex:
        """Base integral E_B of a per-point array against the invariant weights."""
        return complex(np.sum(self.mu * values))

    def cell_average(self, values: np.ndarray) -> np.ndarray:
        """Invariant-measure average of a per-point array over each cell."""
        mu = self.mu
        num = np.bincount(self.src, weights=mu * values, minlength=self.K)
        den = np.bincount(self.src, weights=mu, minlength=self.K)
        return num / den

    def deposited_rhs(self, values: np.ndarray) -> np.ndarray:
        """Transfer of a per-point array in function coordinates.

        Returns (1/h_i) sum_q deposit_q h(src_q) values_q over img_q = i, the
        quadrature-accurate version of T_B-hat applied to the function whose
        point values are given.
        """
        w = self.deposit * self.h[self.src] * values
        out = np.bincount(self.img, weights=w.real, minlength=self.K).astype(
            complex if np.iscomplexobj(values) else float
        )
        if np.iscomplexobj(values):
            out = out + 1j * np.bincount(self.img, weights=w.imag, minlength=self.K)
        return out / self.h

    def density_matrix(self, t: float = 0.0, z: complex = 1.0):
        """The twisted operator acting on densities (column-stochastic at t=0)."""
        vals = self.deposit.astype(complex if (t != 0.0 or z != 1.0) else float)
        if t != 0.0:
            vals = vals * np.exp(1j * t * self.fB)
        if z != 1.0:
            vals = vals * np.asarray(z) ** self.phi
        return sparse.coo_matrix((vals, (self.img, self.src)), shape=(self.K, self.K)).tocsr()


def _adaptive_n_max(sys: LsvSystem, target: float = _TAIL_TARGET) -> int:
    ys = sys.branch_points_y
    tails = 2.0 * (ys[2:] - 0.5)  # relative Lebesgue mass of {phi > n}, n = 1..
    hits = np.nonzero(tails < target)[0]
    if len(hits) == 0:
        return sys.n_max - 1
    return int(hits[0]) + 1


def build_quadrature(
    sys: LsvSystem,
    f: TowerObservable,
    K: int,
    n_max: int | None = None,
    mean_remove: bool = True,
    max_steps: int = 1_000_000,
) -> InducedQuadrature:
    """Assemble the point-deposit skeleton for (sys, f) at resolution K.

    Every point is iterated to its literal first return, including the points
    of the unresolved sliver next to 1/2, so no Lebesgue mass is dropped.
    With mean_remove the induced values are shifted by c * phi with c chosen
    so the invariant mean of f_B vanishes exactly in quadrature (this is the
    mean removal of f itself, by the return-time identity).
    """
    if K < 64 or K & (K - 1):
        raise PreconditionError("K must be a power of two, at least 64")
    if n_max is None:
        n_max = _adaptive_n_max(sys)
    if n_max >= sys.n_max:
        raise PreconditionError(
            f"branch cutoff {n_max} needs branch points beyond n_max={sys.n_max}; "
            "rebuild the system with a larger n_max"
        )
    ys = sys.branch_points_y
    edges = 0.5 + np.arange(K + 1) / (2.0 * K)
    cuts = np.unique(np.concatenate([edges, ys[2 : n_max + 2]]))
    cuts = cuts[(cuts >= 0.5) & (cuts <= 1.0)]
    a = cuts[:-1]
    b = cuts[1:]
    keep = b - a > 1e-16
    a, b = a[keep], b[keep]

    nodes, gw = np.polynomial.legendre.leggauss(_GAUSS_Q)
    x = (0.5 * (b - a))[:, None] * nodes[None, :] + (0.5 * (a + b))[:, None]
    w = (0.5 * (b - a))[:, None] * gw[None, :] * 2.0  # base Lebesgue mass 1
    x = x.ravel()
    w = w.ravel()
    src = np.minimum(((x - 0.5) * 2.0 * K).astype(int), K - 1)

    # iterate every point to its first return, accumulating f along the way
    cur = x.copy()
    fB = np.zeros_like(x)
    phi = np.zeros(len(x), dtype=np.int64)
    alive = np.arange(len(x))
    y_final = np.empty_like(x)
    steps = 0
    while len(alive):
        if steps >= max_steps:
            raise NumericalError(f"first-return iteration exceeded {max_steps} steps")
        fB[alive] += np.asarray(f(cur[alive]), dtype=float)
        sub = cur[alive]
        lsv_map_inplace(sub, sys.alpha)
        cur[alive] = sub
        phi[alive] += 1
        back = sub > 0.5
        done = alive[back]
        y_final[done] = sub[back]
        alive = alive[~back]
        steps += 1

    img = np.minimum(((y_final - 0.5) * 2.0 * K).astype(int), K - 1)
    img = np.maximum(img, 0)
    deposit = w * K  # columns of the untwisted matrix sum to 1

    col_mass = np.bincount(src, weights=deposit, minlength=K)
    if np.max(np.abs(col_mass - 1.0)) > 1e-10:
        raise NumericalError("column mass conservation broken; tail lump too coarse, raise n_max")

    quad = InducedQuadrature(
        alpha=sys.alpha, K=K, n_max=n_max, src=src, img=img, deposit=deposit,
        phi=phi, fB=fB, points=x, h=np.ones(K), mean_shift=0.0,
    )
    mat = quad.matrix()
    h, _ = _power_iteration(mat, np.ones(K))
    h = np.real(h)
    h *= K / h.sum()  # density with cell mean 1, total base mass 1
    if np.any(h <= 0):
        raise NumericalError("fixed density of the induced operator not positive")

    shift = 0.0
    if mean_remove:
        mu = deposit / K * h[src]
        shift = float(np.sum(mu * fB) / np.sum(mu * phi))
        fB = fB - shift * phi
    return InducedQuadrature(
        alpha=sys.alpha, K=K, n_max=n_max, src=src, img=img, deposit=deposit,
        phi=phi, fB=fB, points=x, h=h, mean_shift=shift,
    )


# --- operators and spectra ----------------------------------------------------


@dataclass(frozen=True)
class UlamOperator:
    """A twisted induced operator at fixed (t, z) over a shared quadrature."""

    quad: InducedQuadrature
    t: float
    z: complex = 1.0
    matrix: sparse.csr_matrix = field(default=None)

    @property
    def K(self) -> int:
        return self.quad.K

    def retwist(self, t: float, z: complex = 1.0) -> "UlamOperator":
        return UlamOperator(quad=self.quad, t=t, z=z, matrix=self.quad.matrix(t, z))


def build_induced_operator(
    sys: LsvSystem, f: TowerObservable, K: int, t: float,
    n_max: int | None = None, mean_remove: bool = True,
) -> UlamOperator:
    quad = build_quadrature(sys, f, K, n_max=n_max, mean_remove=mean_remove)
    return UlamOperator(quad=quad, t=t, matrix=quad.matrix(t))


def _power_iteration(mat, v0, tol: float = 1e-13, max_iter: int = 20_000):
    v = np.asarray(v0, dtype=complex if np.issubdtype(mat.dtype, np.complexfloating) else float)
    v = v / np.linalg.norm(v)
    lam = 0.0
    for it in range(max_iter):
        w = mat @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            raise NumericalError("power iteration hit the zero vector")
        lam = np.vdot(v, w) / np.vdot(v, v)
        v_new = w / nw
        resid = np.linalg.norm(w - lam * v) / max(abs(lam), 1e-300)
        v = v_new
        if resid < tol:
            return v, complex(lam)
    raise NumericalError(
        f"power iteration stalled after {max_iter} steps, residual {resid:.3e}"
    )


def leading_eigen(op: UlamOperator, check_gap: bool | None = None, gap: float = _DEFAULT_GAP):
    """Dominant eigentriple (lambda, right, left) of a twisted operator.

    The left/right vectors are normalized so that left . right = 1 and the
    right vector has unit cell mean.  At t = 0, z = 1 the spectral gap is
    estimated by deflated iteration and must exceed the configured gap.
    """
    mat = op.matrix if op.matrix is not None else op.quad.matrix(op.t, op.z)
    complex_case = np.iscomplexobj(mat)
    v0 = np.ones(op.K, dtype=complex if complex_case else float)
    right, lam = _power_iteration(mat, v0, tol=1e-13)
    left, lam_l = _power_iteration(mat.conj().T.tocsr(), v0, tol=1e-13)
    left = left.conj()
    if abs(lam - np.conj(lam_l)) > 1e-8 * max(abs(lam), 1.0):
        raise NumericalError(f"left/right eigenvalues disagree: {lam} vs {np.conj(lam_l)}")
    mean = right.mean()
    if abs(mean) < 1e-14:
        raise NumericalError("right eigenvector has no mass on constants")
    right = right / mean
    inner = np.dot(left, right)
    if abs(inner) < 1e-14:
        raise NumericalError("left and right eigenvectors nearly orthogonal")
    left = left / inner

    do_gap = check_gap if check_gap is not None else (op.t == 0.0 and op.z == 1.0)
    if do_gap:
        lam2 = _second_eigenvalue_modulus(mat, lam, right, left)
        if abs(lam) - lam2 < gap:
            raise NumericalError(
                f"no usable spectral gap: |lambda2| = {lam2:.4f} vs |lambda1| = {abs(lam):.4f}"
            )
    return complex(lam), right, left


def _second_eigenvalue_modulus(mat, lam, right, left, iters: int = 400) -> float:
    rng = np.random.default_rng(0)
    v = rng.standard_normal(mat.shape[0]).astype(complex)
    v -= right * np.dot(left, v)
    v /= np.linalg.norm(v)
    mod = 0.0
    for _ in range(iters):
        w = mat @ v
        w = w - right * np.dot(left, w)  # deflate the leading direction
        nw = np.linalg.norm(w)
        if nw < 1e-300:
            return 0.0
        mod = abs(np.vdot(v, w) / np.vdot(v, v))
        v = w / nw
    return mod


def solve_poisson(
    op0: UlamOperator,
    fB_cells: np.ndarray | None = None,
    method: str = "direct",
    tol: float = 1e-11,
) -> np.ndarray:
    """Solve (I - T_B-hat) a = T_B-hat f_B on the mean-zero subspace.

    With fB_cells omitted, the right-hand side is the quadrature-accurate
    transfer of the per-point induced values stored in the operator, which
    keeps the small-t eigenvalue expansion consistent to cubic order.  A
    cellwise array uses the plain matrix product instead.  The solution has
    zero invariant mean.
    """
    quad = op0.quad
    P = quad.matrix()
    pi = quad.h / quad.K  # invariant cell masses, sum 1
    if fB_cells is None:
        rhs = quad.deposited_rhs(quad.fB)
    else:
        vals = np.asarray(fB_cells, dtype=float)
        if vals.shape != (quad.K,):
            raise PreconditionError("fB_cells must be a K-vector")
        rhs = P @ vals
    return solve_poisson_system(P, pi, rhs, method=method, tol=tol)


def solve_poisson_system(P, pi, rhs, method: str = "direct", tol: float = 1e-11) -> np.ndarray:
    """Solve (I - P) a = rhs on the mean-zero subspace of a Markov operator.

    P must fix constants with invariant functional pi (pi P = pi, sum pi = 1)
    and rhs must be pi-mean-zero; the returned a has zero pi-mean.
    """
    pi = np.asarray(pi, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    n = len(pi)
    mean = np.dot(pi, rhs)
    if abs(mean) > 1e-8:
        raise PreconditionError(f"right-hand side must be mean-zero, got mean {mean:.3e}")
    rhs = rhs - mean

    if method == "direct":
        if sparse.issparse(P):
            A = (sparse.identity(n, format="csr") - P).tolil()
            A[0, :] = pi  # pin the invariant mean in place of one redundant row
            b = rhs.copy()
            b[0] = 0.0
            a = sparse.linalg.spsolve(A.tocsr(), b)
        else:
            A = np.eye(n) - np.asarray(P)
            A[0, :] = pi
            b = rhs.copy()
            b[0] = 0.0
            a = np.linalg.solve(A, b)
    elif method == "neumann":
        a = rhs.copy()
        term = rhs.copy()
        for _ in range(100_000):
            term = P @ term
            term -= np.dot(pi, term)
            a += term
            if np.linalg.norm(term) < 0.1 * tol * max(np.linalg.norm(a), 1.0):
                break
        else:
            raise NumericalError("Neumann summation for the Poisson equation did not converge")
    else:
        raise PreconditionError(f"unknown method {method!r}")
    a = a - np.dot(pi, a)
    resid = np.linalg.norm(a - P @ a - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if resid > 1e-9:
        raise NumericalError(f"Poisson residual {resid:.3e} above 1e-9")
    return a


@dataclass
class SpectralData:
    """Leading-eigenvalue curve of R(1,t) with derived limit-law quantities.

    lambda_curve maps t to lambda(1,t); L_curve carries the normalized
    deficit L(t) with lambda = 1 - (sigma2/(2 m_B)) L(t); a_cells is the
    Poisson solution; projection the (right, left) pair at t = 0.
    """

    t_grid: np.ndarray
    lambda_curve: np.ndarray
    sigma2: float
    m_B: float
    a_cells: np.ndarray
    projection: tuple
    L_curve: np.ndarray = None
    sigma2_stderr: float = float("nan")
    condition_flag: str = ""

    def lam(self, t: float) -> complex:
        i = int(np.argmin(np.abs(self.t_grid - t)))
        if abs(self.t_grid[i] - t) > 1e-12 * max(abs(t), 1.0):
            raise PreconditionError(f"t={t} not on the sampled grid")
        return complex(self.lambda_curve[i])


def analyze_spectrum(
    sys: LsvSystem,
    f: TowerObservable,
    K: int,
    t_grid: Sequence[float],
    quad: InducedQuadrature | None = None,
) -> SpectralData:
    """Sample lambda(1,t) on a grid and extract variance and Poisson data."""
    if quad is None:
        quad = build_quadrature(sys, f, K)
    t_grid = np.asarray(sorted(set(float(t) for t in t_grid)))
    op0 = UlamOperator(quad=quad, t=0.0, matrix=quad.matrix())
    lam0, right0, left0 = leading_eigen(op0)
    if abs(lam0 - 1.0) > 1e-10:
        raise NumericalError(f"unperturbed eigenvalue {lam0} not 1 within 1e-10")
    lams = np.empty(len(t_grid), dtype=complex)
    for i, t in enumerate(t_grid):
        if t == 0.0:
            lams[i] = lam0
            continue
        lam, _, _ = leading_eigen(op0.retwist(t), check_gap=False)
        if abs(lam) > 1.0 + 1e-10:
            raise NumericalError(f"|lambda(1,{t})| = {abs(lam)} exceeds 1")
        lams[i] = lam
    a = solve_poisson(op0)
    m_B = sys.base_mass()
    sigma2, stderr, flag = _richardson_sigma2(t_grid, lams, m_B)
    L = np.full(len(t_grid), np.nan, dtype=complex)
    if sigma2 > 0:
        L = (1.0 - lams) * (2.0 * m_B / sigma2)
    else:
        flag = (flag + "; " if flag else "") + "sigma2 at noise floor, L-curve ill-conditioned"
    return SpectralData(
        t_grid=t_grid, lambda_curve=lams, sigma2=sigma2, m_B=m_B,
        a_cells=a, projection=(right0, left0), L_curve=L,
        sigma2_stderr=stderr, condition_flag=flag,
    )


def _richardson_sigma2(t_grid, lams, m_B):
    small = [(t, l) for t, l in zip(t_grid, lams) if 0 < t <= 0.2]
    if len(small) < 3:
        raise PreconditionError("need at least 3 small positive t samples for extrapolation")
    ts = np.array([t for t, _ in small])
    g = 2.0 * m_B * (1.0 - np.real([l for _, l in small])) / ts**2
    order = np.argsort(ts)[::-1]  # largest t first, extrapolate toward 0
    ts, g = ts[order], g[order]
    # one Richardson sweep assuming an even error expansion g = s + c t^2 + ...
    refined = (g[1:] * ts[:-1] ** 2 - g[:-1] * ts[1:] ** 2) / (ts[:-1] ** 2 - ts[1:] ** 2)
    est = float(refined[-1])
    spread = float(np.max(np.abs(np.diff(refined)))) if len(refined) > 1 else float("nan")
    flag = ""
    if not np.isfinite(est):
        raise NumericalError("variance extrapolation diverged")
    if est < 0:
        if abs(est) < 1e-6:  # coboundary-scale discretization noise
            est = 0.0
        else:
            raise NumericalError(f"negative curvature variance {est:.3e}")
    if spread > 0.05 * max(est, 1e-12):
        flag = f"extrapolation spread {spread:.2e} vs estimate {est:.2e}"
    return est, spread, flag


def variance_from_curvature(sd: SpectralData) -> float:
    return sd.sigma2


def eigenvalue_expansion_residual(
    sd: SpectralData, op0: UlamOperator, t: float,
) -> float:
    """Distance between lambda(1,t) and its quadratic characteristic expansion.

    The expansion is E_B(e^{it f_B}) - t^2 E_B(a f_B) with both base integrals
    evaluated at quadrature accuracy; the deficit decays like t^3.
    """
    quad = op0.quad
    lam = sd.lam(t) if t in sd.t_grid else leading_eigen(op0.retwist(t), check_gap=False)[0]
    e_char = quad.expectation(np.exp(1j * t * quad.fB))
    e_cross = quad.expectation(sd.a_cells[quad.src] * quad.fB)
    return abs(lam - (e_char - t * t * e_cross))


# --- Monte Carlo variance oracle ----------------------------------------------


@dataclass(frozen=True)
class GreenKuboReport:
    sigma2: float
    stderr: float
    plateau_lag: int
    plateau_found: bool
    orbit_length: int
    n_orbits: int
    seed: int


def greenkubo_variance(
    sys: LsvSystem,
    f: TowerObservable,
    orbit_length: int,
    seed: int,
    n_orbits: int | None = None,
    max_lag: int | None = None,
) -> GreenKuboReport:
    """Autocovariance-sum variance estimate from an ensemble of orbits.

    sigma2 = var(f) + 2 sum_k cov(f, f o T^k), summed to a plateau detected
    where increments fall below the cross-orbit noise level.  The standard
    error is a bootstrap over per-orbit estimates.
    """
    if orbit_length < 10**6:
        raise PreconditionError("orbit_length must be at least 1e6")
    if n_orbits is None:
        n_orbits = max(64, min(512, orbit_length // 50_000))
    seg = orbit_length // n_orbits
    if max_lag is None:
        max_lag = min(seg // 10, 4000)
    x = sys.sample_invariant(seed, n_orbits)
    vals = np.empty((n_orbits, seg))
    for k in range(seg):
        vals[:, k] = np.asarray(f(x))
        sys.step_inplace(x)
    vals -= vals.mean()
    # per-orbit autocovariance via FFT, then the cumulative (Green-Kubo) sums
    nfft = 1 << int(np.ceil(np.log2(2 * seg)))
    ft = np.fft.rfft(vals, nfft, axis=1)
    acov = np.fft.irfft(ft * np.conj(ft), nfft, axis=1)[:, : max_lag + 1]
    acov /= seg
    cum = acov[:, 0:1] + 2.0 * np.cumsum(acov[:, 1:], axis=1)
    cum = np.concatenate([acov[:, 0:1], cum], axis=1)  # index = lag cutoff
    mean_curve = cum.mean(axis=0)
    noise = cum.std(axis=0, ddof=1) / math.sqrt(n_orbits)
    # plateau: first window where successive increments drop below the noise
    inc = np.abs(np.diff(mean_curve))
    win = 10
    plateau, found = max_lag, False
    for lag in range(1, max_lag - win):
        if np.all(inc[lag : lag + win] < np.maximum(noise[lag : lag + win], 1e-12)):
            plateau, found = lag + win, True
            break
    est = float(mean_curve[plateau])
    rng = np.random.default_rng(seed + 1)
    boots = np.array([
        cum[rng.integers(0, n_orbits, n_orbits), plateau].mean() for _ in range(400)
    ])
    return GreenKuboReport(
        sigma2=est, stderr=float(boots.std(ddof=1)), plateau_lag=int(plateau),
        plateau_found=found, orbit_length=orbit_length, n_orbits=n_orbits, seed=seed,
    )


# --- periodicity scan -----------------------------------------------------------


@dataclass
class ScanDetection:
    t: float
    z: complex
    lam: complex


@dataclass
class PeriodicityReport:
    K: int
    tol: float
    t_grid: np.ndarray
    max_radius: np.ndarray
    best_z: np.ndarray
    detections: list
    inferred_group: str


def _scan_radius(quad: InducedQuadrature, t: float, z: complex) -> complex:
    mat = quad.matrix(t, z)
    try:
        _, lam = _power_iteration(mat, np.ones(quad.K, dtype=complex), tol=1e-10, max_iter=4000)
        return lam
    except NumericalError:
        vals = sparse.linalg.eigs(mat, k=2, which="LM", v0=np.ones(quad.K), return_eigenvectors=False)
        return vals[np.argmax(np.abs(vals))]


def periodicity_scan(
    sys: LsvSystem,
    f: TowerObservable,
    t_grid: Sequence[float],
    z_grid: Sequence[complex] | None = None,
    K: int = 1024,
    quad: InducedQuadrature | None = None,
    mean_remove: bool = True,
) -> PeriodicityReport:
    """Scan for eigenvalue 1 of the doubly twisted operator over (z, t).

    A detection at (z, t) witnesses e^{itf} cohomologous to z^{-1} on the
    tower; the detected set is reported together with a crude inference of
    the group it generates (everything / a linear-phase family / only t=0).
    """
    if quad is None:
        quad = build_quadrature(sys, f, K, mean_remove=mean_remove)
    K = quad.K
    t_grid = np.asarray([float(t) for t in t_grid])
    if z_grid is None:
        z_grid = np.exp(2j * np.pi * np.arange(32) / 32)
    z_grid = np.asarray(z_grid, dtype=complex)
    tol = 10.0 / K
    max_radius = np.empty(len(t_grid))
    best_z = np.empty(len(t_grid), dtype=complex)
    detections: list[ScanDetection] = []
    span = np.pi / len(z_grid)
    for i, t in enumerate(t_grid):
        lams = np.array([_scan_radius(quad, t, z) for z in z_grid])

        # spectral radius: refine the phase around the largest-modulus grid point
        j = int(np.argmax(np.abs(lams)))
        theta0 = float(np.angle(z_grid[j]))
        res = minimize_scalar(
            lambda th: -abs(_scan_radius(quad, t, np.exp(1j * th))),
            bounds=(theta0 - span, theta0 + span), method="bounded",
            options={"xatol": 1e-6},
        )
        z_star = np.exp(1j * float(res.x))
        lam_star = _scan_radius(quad, t, z_star)
        if abs(lam_star) < np.abs(lams[j]):
            z_star, lam_star = z_grid[j], lams[j]
        max_radius[i] = abs(lam_star)
        best_z[i] = z_star

        # eigenvalue-1 detection: refine toward the minimal distance to 1
        jd = int(np.argmin(np.abs(lams - 1.0)))
        theta0 = float(np.angle(z_grid[jd]))
        res = minimize_scalar(
            lambda th: abs(_scan_radius(quad, t, np.exp(1j * th)) - 1.0),
            bounds=(theta0 - span, theta0 + span), method="bounded",
            options={"xatol": 1e-6},
        )
        z_det = np.exp(1j * float(res.x))
        lam_det = _scan_radius(quad, t, z_det)
        if abs(lam_det - 1.0) > np.abs(lams[jd] - 1.0):
            z_det, lam_det = z_grid[jd], lams[jd]
        if abs(lam_det - 1.0) < tol:
            detections.append(ScanDetection(t=float(t), z=complex(z_det), lam=complex(lam_det)))
            best_z[i] = z_det
    group = _infer_group(t_grid, detections)
    return PeriodicityReport(
        K=K, tol=tol, t_grid=t_grid, max_radius=max_radius, best_z=best_z,
        detections=detections, inferred_group=group,
    )


def _infer_group(t_grid, detections) -> str:
    if len(detections) == 0:
        return "none"
    if len(detections) < len(t_grid):
        return "partial"
    zs = np.array([d.z for d in detections])
    ts = np.array([d.t for d in detections])
    if np.max(np.abs(zs - 1.0)) < 1e-3:
        return "all_reals"
    # linear phase z = e^{-itc} signals f cohomologous to the constant c
    phases = np.unwrap(np.angle(zs))
    c = -float(np.polyfit(ts, phases, 1)[0])
    if np.max(np.abs(phases + c * ts)) < 1e-2:
        return f"constant_shift c={c:.6g}"
    return "detected_unstructured"


# --- persistence ----------------------------------------------------------------


def save_lambda_curve(sd: SpectralData, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "re_lambda", "im_lambda", "deficit"])
        for t, lam in zip(sd.t_grid, sd.lambda_curve):
            w.writerow([f"{t:.17g}", f"{lam.real:.17g}", f"{lam.imag:.17g}", f"{1 - abs(lam):.17g}"])


def save_spectral_summary(sd: SpectralData, path) -> None:
    payload = {
        "sigma2": sd.sigma2,
        "sigma2_stderr": sd.sigma2_stderr,
        "m_B": sd.m_B,
        "t_min": float(sd.t_grid.min()),
        "t_max": float(sd.t_grid.max()),
        "condition_flag": sd.condition_flag,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)


def save_scan_report(rep: PeriodicityReport, csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "max_radius", "re_z", "im_z", "detected"])
        det_ts = {d.t for d in rep.detections}
        for t, r, z in zip(rep.t_grid, rep.max_radius, rep.best_z):
            w.writerow([f"{t:.17g}", f"{r:.17g}", f"{z.real:.17g}", f"{z.imag:.17g}",
                        int(float(t) in det_ts)])
    if json_path is not None:
        payload = {
            "K": rep.K,
            "tol": rep.tol,
            "n_detections": len(rep.detections),
            "inferred_group": rep.inferred_group,
        }
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
