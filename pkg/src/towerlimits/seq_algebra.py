"""Weighted-sequence Banach algebra with Wiener-style inversion.

Truncated one- or two-sided sequences of scalars or square matrices,
equipped with the weighted norm built from ``w_n = (n+1)^{-gamma}``:
convolution, norm evaluation, the convolution constant ``c`` with
``(w*w)_n <= c w_n``, power-series (disk) inversion, circle inversion by
Fourier synthesis, and the convolution-envelope diagnostic used by the
renewal-rate estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, PreconditionError

TWO_SIDED = "two_sided"
CAUSAL = "causal"


def weight(n, gamma: float):
    """w_n = (|n|+1)^{-gamma}, vectorized over integer index arrays."""
    return (np.abs(n) + 1.0) ** (-gamma)


def entry_norm(coeffs: np.ndarray) -> np.ndarray:
    """Per-index entry norm.

    Scalars: absolute value.  d x d matrices: the operator norm induced by the
    max-abs vector norm, i.e. the maximum absolute row sum.
    """
    c = np.asarray(coeffs)
    if c.ndim == 1:
        return np.abs(c)
    if c.ndim == 3:
        return np.abs(c).sum(axis=2).max(axis=1)
    raise PreconditionError(f"coeffs must have shape (L,) or (L,d,d), got {c.shape}")


@dataclass(frozen=True)
class WeightedSeq:
    """Truncated element of the gamma-weighted sequence algebra.

    coeffs is indexed by n in [n_min, n_max]; shape (L,) for scalar entries or
    (L, d, d) for matrix entries.  side is "two_sided" or "causal" (causal
    forces n_min = 0).
    """

    n_min: int
    n_max: int
    coeffs: np.ndarray
    gamma: float
    side: str = TWO_SIDED

    def __post_init__(self):
        c = np.asarray(self.coeffs)
        object.__setattr__(self, "coeffs", c)
        if c.ndim not in (1, 3):
            raise PreconditionError("coeffs must have shape (L,) or (L,d,d)")
        if c.ndim == 3 and c.shape[1] != c.shape[2]:
            raise PreconditionError("matrix entries must be square")
        if len(c) != self.n_max - self.n_min + 1:
            raise PreconditionError("coeffs length inconsistent with [n_min, n_max]")
        if self.gamma <= 1.0:
            raise PreconditionError(f"gamma must exceed 1, got {self.gamma}")
        if self.side == CAUSAL:
            if self.n_min != 0:
                raise PreconditionError("causal sequences must start at n=0")
        elif self.side == TWO_SIDED:
            if not (self.n_min <= 0 <= self.n_max):
                raise PreconditionError("two-sided sequences must cover index 0")
        else:
            raise PreconditionError(f"unknown side {self.side!r}")

    @property
    def dim(self) -> int:
        return 1 if self.coeffs.ndim == 1 else self.coeffs.shape[1]

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.n_min, self.n_max + 1)

    def entry(self, n: int):
        """Coefficient at index n (zero outside the stored support)."""
        if self.n_min <= n <= self.n_max:
            return self.coeffs[n - self.n_min]
        if self.coeffs.ndim == 1:
            return np.zeros((), dtype=self.coeffs.dtype)[()]
        d = self.dim
        return np.zeros((d, d), dtype=self.coeffs.dtype)

    def entry_norms(self) -> np.ndarray:
        return entry_norm(self.coeffs)

    def truncated(self, n_min: int, n_max: int) -> "WeightedSeq":
        """Restriction to [n_min, n_max], padding with zeros if needed."""
        idx = np.arange(n_min, n_max + 1)
        shape = (len(idx),) if self.coeffs.ndim == 1 else (len(idx), self.dim, self.dim)
        out = np.zeros(shape, dtype=self.coeffs.dtype)
        lo = max(n_min, self.n_min)
        hi = min(n_max, self.n_max)
        if lo <= hi:
            out[lo - n_min : hi - n_min + 1] = self.coeffs[lo - self.n_min : hi - self.n_min + 1]
        side = self.side if n_min == 0 else TWO_SIDED
        return WeightedSeq(n_min, n_max, out, self.gamma, side)


def delta(gamma: float, dim: int = 1, side: str = CAUSAL) -> WeightedSeq:
    """The convolution identity: entry I at n = 0."""
    if dim == 1:
        c = np.ones(1)
    else:
        c = np.eye(dim)[None, :, :].copy()
    return WeightedSeq(0, 0, c, gamma, side)


@dataclass(frozen=True)
class AlgebraConstant:
    """Certified constant c with (w*w)_n <= c w_n on [0, probe_horizon]."""

    gamma: float
    c: float
    probe_horizon: int


def compute_algebra_constant(gamma: float, probe_horizon: int = 10_000) -> AlgebraConstant:
    """Probe the ratio (w*w)_n / w_n and return its certified maximum.

    The ratio tends to 2 zeta(gamma) as n grows: the convolution sum splits
    into two ends, each converging to the zeta series, while the middle is
    O(n^{-gamma}).  For gamma near 1 the ratio climbs to that limit from
    below; for larger gamma it peaks at small n and then decays to the limit
    from above.  Either way max(probe sup, 2 zeta(gamma)) dominates the true
    supremum, and a 1.01 safety factor absorbs the finite-horizon slack.
    """
    from scipy.special import zeta

    if gamma <= 1.0:
        raise PreconditionError("gamma must exceed 1")
    if probe_horizon < 16:
        raise PreconditionError("probe_horizon must be at least 16")
    w = (np.arange(probe_horizon + 1) + 1.0) ** (-gamma)
    conv = np.convolve(w, w)[: probe_horizon + 1]
    ratio = conv / w
    c = max(float(ratio.max()), 2.0 * float(zeta(gamma))) * 1.01
    return AlgebraConstant(gamma=gamma, c=c, probe_horizon=probe_horizon)


def _check_dims(a: WeightedSeq, b: WeightedSeq):
    if a.dim != b.dim:
        raise PreconditionError(f"entry dimension mismatch: {a.dim} vs {b.dim}")


def convolve(a: WeightedSeq, b: WeightedSeq) -> WeightedSeq:
    """Convolution (a*b)_n = sum_k a_k b_{n-k}; matrix product order a then b.

    The result support is the full Minkowski sum of the input supports; no
    silent truncation.
    """
    _check_dims(a, b)
    n_min = a.n_min + b.n_min
    n_max = a.n_max + b.n_max
    if a.dim == 1:
        coeffs = np.convolve(a.coeffs, b.coeffs)
    else:
        la, lb = len(a.coeffs), len(b.coeffs)
        dtype = np.result_type(a.coeffs.dtype, b.coeffs.dtype)
        coeffs = np.zeros((la + lb - 1, a.dim, a.dim), dtype=dtype)
        for i in range(la):
            coeffs[i : i + lb] += np.matmul(a.coeffs[i], b.coeffs)
    side = CAUSAL if (a.side == CAUSAL and b.side == CAUSAL) else TWO_SIDED
    return WeightedSeq(n_min, n_max, coeffs, a.gamma, side)


def ogamma_norm(a: WeightedSeq, k: AlgebraConstant) -> float:
    """The algebra norm: both one-sided halves of the weighted sup + l1 sum.

    Returns (S + c sup_{n>=0} |A_n|/w_n) + (S + c sup_{n<=0} |A_n|/w_{|n|})
    where S is the total sum of entry norms over the truncated support.
    """
    if k.gamma != a.gamma:
        raise PreconditionError(f"gamma mismatch: sequence {a.gamma}, constant {k.gamma}")
    norms = a.entry_norms()
    idx = a.indices
    total = math.fsum(norms)
    w = weight(idx, a.gamma)
    ratios = norms / w
    pos = ratios[idx >= 0]
    neg = ratios[idx <= 0]
    sup_pos = pos.max() if len(pos) else 0.0
    sup_neg = neg.max() if len(neg) else 0.0
    return (total + k.c * float(sup_pos)) + (total + k.c * float(sup_neg))


def _invert_head(a0, cond_cap: float):
    if np.ndim(a0) == 0:
        if a0 == 0:
            raise NumericalError("head coefficient a_0 is zero; not invertible")
        return 1.0 / a0
    cond = np.linalg.cond(a0)
    if not np.isfinite(cond) or cond > cond_cap:
        raise NumericalError(f"head coefficient a_0 ill-conditioned: cond={cond:.3e} > cap {cond_cap:.3e}")
    return np.linalg.inv(a0)


def causal_invert(a: WeightedSeq, n_out: int, cond_cap: float = 1e12) -> WeightedSeq:
    """Power-series inverse of a causal sequence, up to index n_out.

    b_0 = a_0^{-1} and b_n = -a_0^{-1} sum_{k=1}^{n} a_k b_{n-k}.
    """
    if a.side != CAUSAL:
        raise PreconditionError("causal_invert requires a causal sequence")
    a0_inv = _invert_head(a.coeffs[0], cond_cap)
    d = a.dim
    dtype = np.result_type(a.coeffs.dtype, float)
    if d == 1:
        b = np.zeros(n_out + 1, dtype=dtype)
        b[0] = a0_inv
        for n in range(1, n_out + 1):
            kmax = min(n, a.n_max)
            acc = np.dot(a.coeffs[1 : kmax + 1], b[n - kmax : n][::-1])
            b[n] = -a0_inv * acc
    else:
        b = np.zeros((n_out + 1, d, d), dtype=dtype)
        b[0] = a0_inv
        for n in range(1, n_out + 1):
            kmax = min(n, a.n_max)
            acc = np.einsum("kij,kjl->il", a.coeffs[1 : kmax + 1], b[n - kmax : n][::-1])
            b[n] = -a0_inv @ acc
    return WeightedSeq(0, n_out, b, a.gamma, CAUSAL)


def circle_invert(
    a: WeightedSeq,
    m_samples: int | None = None,
    n_out: int = 256,
    sv_floor: float = 1e-8,
) -> WeightedSeq:
    """Inverse on the unit circle by discrete Fourier synthesis.

    Samples A(z) at the m-th roots of unity, inverts pointwise, and recovers
    the inverse coefficients on [-n_out, n_out].  The numerical surrogate for
    the circle-invertibility hypothesis is that the smallest singular value of
    every sample stays above sv_floor.
    """
    width = a.n_max - a.n_min
    if m_samples is None:
        m_samples = max(8 * max(width, 1), 4 * (2 * n_out + 1))
    if m_samples < 4 * max(width, 1):
        raise PreconditionError("m_samples must be at least 4x the support width")
    d = a.dim
    m = int(m_samples)
    idx = a.indices % m
    if d == 1:
        grid = np.zeros(m, dtype=complex)
        np.add.at(grid, idx, a.coeffs.astype(complex))
        vals = m * np.fft.ifft(grid)  # vals[j] = A(exp(2*pi*i*j/m))
        small = np.abs(vals)
        jmin = int(np.argmin(small))
        if small[jmin] < sv_floor:
            z = np.exp(2j * np.pi * jmin / m)
            raise NumericalError(
                f"circle inversion hypothesis fails near z={z:.6f}: |A(z)|={small[jmin]:.3e} < floor {sv_floor:.1e}"
            )
        inv_vals = 1.0 / vals
    else:
        grid = np.zeros((m, d, d), dtype=complex)
        np.add.at(grid, idx, a.coeffs.astype(complex))
        vals = m * np.fft.ifft(grid, axis=0)
        svmin = np.linalg.svd(vals, compute_uv=False)[:, -1]
        jmin = int(np.argmin(svmin))
        if svmin[jmin] < sv_floor:
            z = np.exp(2j * np.pi * jmin / m)
            raise NumericalError(
                f"circle inversion hypothesis fails near z={z:.6f}: smallest singular value "
                f"{svmin[jmin]:.3e} < floor {sv_floor:.1e}"
            )
        inv_vals = np.linalg.inv(vals)
    coeff_grid = np.fft.fft(inv_vals, axis=0) / m  # index n mod m
    ns = np.arange(-n_out, n_out + 1)
    out = coeff_grid[ns % m]
    if d == 1 and np.max(np.abs(out.imag)) < 1e-12 * max(np.max(np.abs(out)), 1.0) and np.isrealobj(a.coeffs):
        out = out.real
    return WeightedSeq(-n_out, n_out, out, a.gamma, TWO_SIDED)


@dataclass(frozen=True)
class EnvelopeReport:
    """Envelope-fit diagnostics for the weighted-times-geometric convolution."""

    gamma: float
    d_const: float
    t: float
    n_max: int
    c_fit: float
    min_margin: float
    argmax_n: int


def verify_convolution_envelope(gamma: float, d_const: float, t: float, n_max: int) -> EnvelopeReport:
    """Check that (1/(|n|+1)^g) * [1_{n>=0} t^2 (1-d t^2)^n] sits under its envelope.

    LHS_n is the exact convolution; the envelope is
    C (1/(|n|+1)^g + 1_{n>=0} t^2 (1-(d/2)t^2)^n) with C the maximal observed
    ratio.  Reports C and the (nonnegative) residual margin.
    """
    if gamma <= 1.0 or d_const <= 0:
        raise PreconditionError("need gamma > 1 and d_const > 0")
    if not (0 < t <= 1.0 / math.sqrt(d_const)):
        raise PreconditionError("need 0 < t <= 1/sqrt(d_const)")
    if n_max < 100:
        raise PreconditionError("n_max must be at least 100")
    q = 1.0 - d_const * t * t
    ns = np.arange(-n_max, n_max + 1)
    # LHS_n = sum_{k <= n, k >= -n_max} w_{|k|} t^2 q^{n-k}: geometric recursion.
    lhs = np.zeros_like(ns, dtype=float)
    s = 0.0
    for i, n in enumerate(ns):
        s = q * s + t * t * weight(n, gamma)
        lhs[i] = s
    bracket = weight(ns, gamma) + (ns >= 0) * t * t * (1.0 - 0.5 * d_const * t * t) ** np.maximum(ns, 0)
    ratio = lhs / bracket
    c_fit = float(ratio.max())
    if not np.isfinite(c_fit):
        raise NumericalError("envelope ratio diverged")
    margin = float((c_fit * bracket - lhs).min())
    return EnvelopeReport(
        gamma=gamma,
        d_const=d_const,
        t=t,
        n_max=n_max,
        c_fit=c_fit,
        min_margin=margin,
        argmax_n=int(ns[int(np.argmax(ratio))]),
    )


# --- columnar text serialization -------------------------------------------


def save_seq(seq: WeightedSeq, path) -> None:
    """Write the columnar text format with a one-line header."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"# gamma={seq.gamma!r} d={seq.dim} nmin={seq.n_min} nmax={seq.n_max} side={seq.side}\n"
        )
        for row in seq.coeffs:
            flat = np.atleast_1d(np.asarray(row)).reshape(-1)
            fh.write(" ".join(f"{v:.17g}" for v in flat) + "\n")


def load_seq(path) -> WeightedSeq:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise PreconditionError("missing sequence header line")
        fields = dict(tok.split("=", 1) for tok in header[1:].split())
        gamma = float(fields["gamma"])
        d = int(fields["d"])
        n_min = int(fields["nmin"])
        n_max = int(fields["nmax"])
        side = fields["side"]
        rows = [np.fromstring(line, sep=" ") for line in fh if line.strip()]
    data = np.array(rows)
    if d == 1:
        coeffs = data.reshape(-1)
    else:
        coeffs = data.reshape(-1, d, d)
    return WeightedSeq(n_min, n_max, coeffs, gamma, side)
