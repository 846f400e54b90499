"""Tower models: the intermittent interval map and exact finite towers.

Two ground-truth objects live here.  ``LsvSystem`` wraps the intermittent
interval map with a neutral fixed point at 0, its first-return structure on
B = (1/2, 1] and a grid approximation of the absolutely continuous invariant
density.  ``FiniteTower`` is an exact finite-state tower (base cells with
masses, return times and a stochastic induced transition kernel) on which
operator identities can be checked in exact matrix arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .errors import NumericalError, PreconditionError


# --- the interval map --------------------------------------------------------


def lsv_map(x, alpha: float):
    """The intermittent map: x(1 + 2^a x^a) on [0, 1/2], 2x - 1 on (1/2, 1].

    Vectorized over x; rejects points outside [0, 1].
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise PreconditionError("lsv_map requires x in [0, 1]")
    left = x <= 0.5
    out = np.empty_like(x)
    xl = x[left]
    out[left] = xl * (1.0 + (2.0 * xl) ** alpha)
    out[~left] = 2.0 * x[~left] - 1.0
    return out if out.ndim else float(out)


def lsv_map_inplace(x: np.ndarray, alpha: float, scratch: np.ndarray | None = None) -> np.ndarray:
    """One map step on a float array, minimizing temporaries (hot MC path)."""
    left = x <= 0.5
    xl = x[left]
    x[left] = xl * (1.0 + (2.0 * xl) ** alpha)
    xr = x[~left]
    x[~left] = 2.0 * xr - 1.0
    return x


def lsv_derivative(x, alpha: float):
    """|T'|: 1 + (1+a) (2x)^a on the left branch, 2 on the right."""
    x = np.asarray(x, dtype=float)
    left = x <= 0.5
    out = np.full_like(x, 2.0)
    out[left] = 1.0 + (1.0 + alpha) * (2.0 * x[left]) ** alpha
    return out if out.ndim else float(out)


def _invert_left_branch(target: float, alpha: float) -> float:
    """Solve T(x) = target on [0, 1/2] by bisection plus Newton polish."""
    lo, hi = 0.0, 0.5
    f = lambda x: x * (1.0 + (2.0 * x) ** alpha) - target
    if f(hi) < 0:
        raise NumericalError(f"root bracket failure for target {target}")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    x = 0.5 * (lo + hi)
    for _ in range(6):
        fx = f(x)
        dfx = 1.0 + (1.0 + alpha) * (2.0 * x) ** alpha
        step = fx / dfx
        x -= step
        if abs(step) < 1e-16:
            break
    return min(max(x, 0.0), 0.5)


def lsv_branch_points(alpha: float, n_max: int):
    """Backward orbit x_n of 1 in [0, 1/2] and the base partition points y_n.

    x_0 = 1, T(x_{n+1}) = x_n with x_{n+1} in [0, 1/2]; y_{n+1} = (x_n + 1)/2.
    The base cell with return time n is B_n = (y_{n+1}, y_n].
    """
    if n_max < 2:
        raise PreconditionError("n_max must be at least 2")
    xs = np.empty(n_max + 2)
    xs[0] = 1.0
    xs[1] = 0.5
    for n in range(1, n_max + 1):
        xs[n + 1] = _invert_left_branch(xs[n], alpha)
    ys = np.empty(n_max + 2)
    ys[0] = np.nan  # y_0 undefined; partition starts at y_1 = 1
    ys[1:] = (xs[:-1] + 1.0) / 2.0
    return xs, ys


@dataclass
class TowerObservable:
    """An observable together with its regularity metadata.

    kind "holder_on_interval" wraps a pointwise evaluator on [0, 1];
    "cellwise_constant" carries one value per finite-tower state.
    """

    kind: str
    evaluator: Callable | np.ndarray
    holder_exponent: float = 1.0
    holder_constant: float = float("nan")
    mean_removed: bool = False
    label: str = ""

    def __call__(self, x):
        if self.kind != "holder_on_interval":
            raise PreconditionError("pointwise evaluation needs an interval observable")
        return self.evaluator(x)


def observable_identity() -> TowerObservable:
    return TowerObservable("holder_on_interval", lambda x: np.asarray(x, dtype=float), label="x")


def observable_log_deriv(alpha: float) -> TowerObservable:
    """log |T'| for the intermittent map (not yet mean-removed)."""
    return TowerObservable(
        "holder_on_interval",
        lambda x: np.log(lsv_derivative(x, alpha)),
        label="log|T'|",
    )


# --- the LSV system -----------------------------------------------------------


@dataclass
class LsvSystem:
    """The intermittent map with its induced first-return data on (1/2, 1]."""

    alpha: float
    n_max: int = 200
    k_density: int = 2**14
    branch_points_x: np.ndarray = field(init=False, repr=False)
    branch_points_y: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (0.0 < self.alpha < 0.5):
            raise PreconditionError("alpha must lie in (0, 1/2)")
        xs, ys = lsv_branch_points(self.alpha, self.n_max)
        self.branch_points_x = xs
        self.branch_points_y = ys

    # -- first-return structure

    def return_time(self, x) -> np.ndarray:
        """phi(x) = n for x in B_n = (y_{n+1}, y_n]; boundary goes left-open."""
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0.5) or np.any(x > 1.0):
            raise PreconditionError("return_time requires x in (1/2, 1]")
        ys = self.branch_points_y
        # ys[1:] is strictly decreasing from 1; B_n = (ys[n+1], ys[n]].
        desc = ys[1 : self.n_max + 2]
        n = np.searchsorted(-desc, -x, side="left")
        n = np.asarray(n)
        if np.any(n < 1) or np.any(n > self.n_max):
            raise PreconditionError("point beyond branch truncation depth n_max")
        return n if n.ndim else int(n)

    def map(self, x):
        return lsv_map(x, self.alpha)

    def step_inplace(self, x: np.ndarray) -> np.ndarray:
        return lsv_map_inplace(x, self.alpha)

    def tail_lebesgue(self, n: int) -> float:
        """Lebesgue mass of {phi > n} in B, i.e. y_{n+1} - 1/2."""
        if n >= self.n_max:
            raise PreconditionError(f"n={n} must be below n_max={self.n_max}")
        if n == 0:
            return 0.5
        return float(self.branch_points_y[n + 1] - 0.5)

    # -- invariant density by Ulam fixed vector on (0, 1]

    @cached_property
    def _density_grid(self) -> np.ndarray:
        return _ulam_full_map_density(self.alpha, self.k_density)

    @property
    def invariant_density(self) -> np.ndarray:
        """Cellwise density values on the uniform k_density-grid of (0, 1]."""
        return self._density_grid

    def density_cells(self) -> np.ndarray:
        """Cell midpoints of the density grid."""
        k = self.k_density
        return (np.arange(k) + 0.5) / k

    def measure_of_interval(self, a: float, b: float) -> float:
        """Invariant measure of (a, b] from the grid density."""
        k = self.k_density
        h = self._density_grid
        edges = np.arange(k + 1) / k
        lo = np.clip(edges[:-1], a, b)
        hi = np.clip(edges[1:], a, b)
        return float(np.dot(h, np.maximum(hi - lo, 0.0)))

    def base_mass(self) -> float:
        """m(B) for B = (1/2, 1]."""
        return self.measure_of_interval(0.5, 1.0)

    def mean_of(self, f: TowerObservable) -> float:
        """Quadrature of f against the grid density (2-point Gauss per cell)."""
        k = self.k_density
        h = self._density_grid
        edges = np.arange(k + 1) / k
        mid = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 / k
        off = half / math.sqrt(3.0)
        vals = 0.5 * (np.asarray(f(mid - off)) + np.asarray(f(mid + off)))
        return float(np.dot(h, vals) / k)

    def tail_measure(self, n: int, lebesgue: bool = False) -> float:
        """Invariant (or Lebesgue) mass of {phi > n} inside the base."""
        if lebesgue:
            return self.tail_lebesgue(n)
        if n >= self.n_max:
            raise PreconditionError(f"n={n} must be below n_max={self.n_max}")
        if n == 0:
            return self.base_mass()
        return self.measure_of_interval(0.5, float(self.branch_points_y[n + 1]))

    # -- sampling

    def sample_invariant(self, seed: int, count: int, decorrelation_steps: int = 32) -> np.ndarray:
        """Deterministic stream of approximately invariant-distributed points.

        Draws from the Ulam fixed density by inverse CDF, then applies a fixed
        number of decorrelation map iterations.  The stream is a pure function
        of (seed, index).
        """
        if count < 1:
            raise PreconditionError("count must be positive")
        rng = np.random.default_rng(seed)
        k = self.k_density
        h = self._density_grid
        cdf = np.cumsum(h) / k
        cdf /= cdf[-1]
        u = rng.random(count)
        cells = np.searchsorted(cdf, u, side="left")
        frac = rng.random(count)
        x = (cells + frac) / k
        np.clip(x, 1e-300, 1.0, out=x)
        for _ in range(decorrelation_steps):
            lsv_map_inplace(x, self.alpha)
        return x


def _ulam_full_map_density(alpha: float, k: int, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Ulam fixed density of the full map on a uniform grid of (0, 1].

    Per-cell Gauss quadrature deposits mass to image cells pointwise; the
    resulting column-stochastic matrix is power-iterated to its fixed vector.
    """
    from scipy import sparse

    q = 8
    nodes, weights = np.polynomial.legendre.leggauss(q)
    edges = np.arange(k + 1) / k
    # split cells at 1/2 so each quadrature piece lies in a single branch
    pieces = []
    for j in range(k):
        a, b = edges[j], edges[j + 1]
        if a < 0.5 < b:
            pieces.append((j, a, 0.5))
            pieces.append((j, 0.5, b))
        else:
            pieces.append((j, a, b))
    src, img, wts = [], [], []
    for j, a, b in pieces:
        xq = 0.5 * (b - a) * nodes + 0.5 * (a + b)
        wq = 0.5 * (b - a) * weights
        yq = lsv_map(xq, alpha)
        cells = np.minimum((yq * k).astype(int), k - 1)
        src.append(np.full(q, j))
        img.append(cells)
        wts.append(wq * k)  # column-normalized by cell width 1/k
    rows = np.concatenate(img)
    cols = np.concatenate(src)
    vals = np.concatenate(wts)
    mat = sparse.coo_matrix((vals, (rows, cols)), shape=(k, k)).tocsr()
    h = np.ones(k)
    for it in range(max_iter):
        h_new = mat @ h
        h_new *= k / h_new.sum()
        res = np.max(np.abs(h_new - h))
        h = h_new
        if res < tol:
            break
    else:
        raise NumericalError(f"Ulam density power iteration stalled at residual {res:.3e}")
    return h


# --- induced observables and orbit sums --------------------------------------


def birkhoff_sum(system, f: TowerObservable, x0: float, n: int) -> float:
    """sum_{k<n} f(T^k x0); n = 0 returns 0."""
    if n < 0:
        raise PreconditionError("n must be nonnegative")
    x = float(x0)
    total = 0.0
    for _ in range(n):
        total += float(f(x))
        x = float(lsv_map(x, system.alpha))
    return total


def induce_observable(sys: LsvSystem, f: TowerObservable, x: float) -> float:
    """f_B(x) = sum_{k < phi(x)} f(T^k x) from exact orbit evaluation."""
    if not (0.5 < x <= 1.0):
        raise PreconditionError("induce_observable requires x in (1/2, 1]")
    n = int(sys.return_time(x))
    return birkhoff_sum(sys, f, x, n)


# --- exact finite towers ------------------------------------------------------


@dataclass(frozen=True)
class FiniteTower:
    """Exact finite-state tower.

    masses are Kac-normalized base-cell masses (sum_i m_i phi_i = 1);
    return_times are the per-cell return times; transfer_rows[i, k] is the
    probability that the induced map sends base cell i to base cell k.
    """

    masses: np.ndarray
    return_times: np.ndarray
    transfer_rows: np.ndarray

    @property
    def n_cells(self) -> int:
        return len(self.masses)

    @property
    def states(self):
        """All (cell, level) pairs, level-major within a cell."""
        return [(i, j) for i in range(self.n_cells) for j in range(self.return_times[i])]

    @property
    def n_states(self) -> int:
        return int(self.return_times.sum())

    def state_masses(self) -> np.ndarray:
        """Mass of each (cell, level) state (each level copies the base mass)."""
        return np.repeat(self.masses, self.return_times)

    def base_state_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        offsets = np.concatenate(([0], np.cumsum(self.return_times)))[:-1]
        mask[offsets] = True
        return mask

    def transition_matrix(self) -> np.ndarray:
        """Forward Markov kernel Q[x, x'] on states."""
        n = self.n_states
        phi = self.return_times
        offsets = np.concatenate(([0], np.cumsum(phi)))
        q = np.zeros((n, n))
        for i in range(self.n_cells):
            for j in range(phi[i] - 1):
                q[offsets[i] + j, offsets[i] + j + 1] = 1.0
            top = offsets[i] + phi[i] - 1
            for k in range(self.n_cells):
                q[top, offsets[k]] = self.transfer_rows[i, k]
        return q

    def transfer_matrix(self) -> np.ndarray:
        """Transfer operator on state functions: fixes constants, preserves mass."""
        q = self.transition_matrix()
        m = self.state_masses()
        return (q * m[:, None] / m[None, :]).T


def build_finite_tower(masses, return_times, transfer_rows) -> FiniteTower:
    """Validate and Kac-normalize finite tower input data.

    Rejects towers with gcd of return times > 1 (the mixing precondition) and
    transfer kernels that fail to preserve the base masses.
    """
    m = np.asarray(masses, dtype=float)
    phi = np.asarray(return_times, dtype=int)
    rows = np.asarray(transfer_rows, dtype=float)
    if np.any(m <= 0):
        raise PreconditionError("cell masses must be positive")
    if np.any(phi < 1):
        raise PreconditionError("return times must be positive integers")
    g = int(np.gcd.reduce(phi))
    if g != 1:
        raise PreconditionError(
            f"gcd of return times is {g}; mixing precondition requires gcd 1"
        )
    if rows.shape != (len(m), len(m)):
        raise PreconditionError("transfer_rows must be square over the cells")
    if np.any(rows < -1e-15):
        raise PreconditionError("transfer rows must be nonnegative")
    row_sums = rows.sum(axis=1)
    if np.max(np.abs(row_sums - 1.0)) > 1e-12:
        raise PreconditionError("transfer rows must be stochastic")
    m = m / np.dot(m, phi)  # Kac normalization: total tower mass 1
    inflow = m @ rows
    if np.max(np.abs(inflow - m)) > 1e-12:
        raise PreconditionError(
            "transfer rows do not preserve base masses (induced operator would not fix constants)"
        )
    return FiniteTower(masses=m, return_times=phi, transfer_rows=rows)


def two_cell_tower(p: float = 0.5) -> FiniteTower:
    """The shipped two-cell tower with return times (1, 2) and uniform rows."""
    rows = np.array([[p, 1.0 - p], [p, 1.0 - p]])
    masses = np.array([p, 1.0 - p])
    return build_finite_tower(masses, [1, 2], rows)


def save_tower(tower: FiniteTower, path) -> None:
    """Structured text: cell count, then mass / return time / row per cell."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{tower.n_cells}\n")
        for i in range(tower.n_cells):
            row = " ".join(f"{v:.17g}" for v in tower.transfer_rows[i])
            fh.write(f"{tower.masses[i]:.17g} {tower.return_times[i]} {row}\n")


def load_tower(path) -> FiniteTower:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            n = int(fh.readline())
        except ValueError as exc:
            raise PreconditionError(f"bad tower file header: {exc}") from exc
        masses, phis, rows = [], [], []
        for _ in range(n):
            parts = fh.readline().split()
            if len(parts) != 2 + n:
                raise PreconditionError("bad tower file row")
            masses.append(float(parts[0]))
            phis.append(int(parts[1]))
            rows.append([float(v) for v in parts[2:]])
    return build_finite_tower(masses, phis, rows)
