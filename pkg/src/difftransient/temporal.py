"""Temporal emission and sensor profiles and their cross-correlation.

All times are in nanoseconds.  A :class:`TemporalProfile` describes either the
emission ``L(t)`` of a light source or the response ``W(t)`` of a sensor.  The
renderer only ever needs the correlation

    S(t) = integral L(t') W(t' + t) dt'

evaluated at a path's time of flight, together with ``dS/dt``.  Every pair of
supported profile kinds correlates in closed form:

* piecewise polynomials (box, triangle) against each other give an exact
  piecewise polynomial;
* a Gaussian against a Gaussian gives a Gaussian;
* a Gaussian against a piecewise-linear profile gives an erf expression;
* an emitter delta simply shifts the sensor profile.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy.special import ndtr

# Gaussians are truncated where exp(-z^2/2) drops below ~1e-16.
GAUSS_TRUNCATION = 8.5
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

KINDS = ("delta", "box", "triangle", "gaussian")


@dataclass(frozen=True)
class TemporalProfile:
    """One temporal profile.

    ``params`` depends on ``kind``:

    * ``delta``: ``(t0,)``
    * ``box``: ``(t_start, t_end, amplitude)``
    * ``triangle``: ``(center, half_width, peak)``
    * ``gaussian``: ``(mean, sigma, amplitude)``
    """

    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown temporal profile kind {self.kind!r}")
        expected = 1 if self.kind == "delta" else 3
        if len(self.params) != expected:
            raise ValueError(f"{self.kind} profile takes {expected} parameters, got {len(self.params)}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.kind == "box" and not self.params[0] < self.params[1]:
            raise ValueError("box profile needs t_start < t_end")
        if self.kind == "triangle" and not self.params[1] > 0:
            raise ValueError("triangle profile needs half_width > 0")
        if self.kind == "gaussian" and not self.params[1] > 0:
            raise ValueError("gaussian profile needs sigma > 0")

    @staticmethod
    def delta(t0: float = 0.0) -> "TemporalProfile":
        return TemporalProfile("delta", (t0,))

    @staticmethod
    def box(t_start: float, t_end: float, amplitude: float = 1.0) -> "TemporalProfile":
        return TemporalProfile("box", (t_start, t_end, amplitude))

    @staticmethod
    def triangle(center: float, half_width: float, peak: float = 1.0) -> "TemporalProfile":
        return TemporalProfile("triangle", (center, half_width, peak))

    @staticmethod
    def gaussian(mean: float, sigma: float, amplitude: float = 1.0) -> "TemporalProfile":
        return TemporalProfile("gaussian", (mean, sigma, amplitude))

    def pieces(self):
        """Piecewise-polynomial form: list of ``(lo, hi, coeffs)``, coeffs lowest order first."""
        if self.kind == "box":
            a, b, amp = self.params
            return [(a, b, np.array([amp]))]
        if self.kind == "triangle":
            c, h, peak = self.params
            k = peak / h
            # rising: peak + k (t - c) ; falling: peak - k (t - c)
            return [(c - h, c, np.array([peak - k * c, k])),
                    (c, c + h, np.array([peak + k * c, -k]))]
        raise ValueError(f"{self.kind} profile is not piecewise polynomial")

    def __call__(self, t):
        """Pointwise value (a delta evaluates to zero everywhere)."""
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "delta":
            return np.zeros_like(t)
        if self.kind == "gaussian":
            m, s, a = self.params
            return a * _INV_SQRT_2PI / s * np.exp(-0.5 * ((t - m) / s) ** 2)
        out = np.zeros_like(t)
        for lo, hi, c in self.pieces():
            m = (t >= lo) & (t < hi)
            out = np.where(m, np.polynomial.polynomial.polyval(t, c), out)
        return out

    def integral(self) -> float:
        if self.kind == "delta":
            return 1.0
        if self.kind == "gaussian":
            return self.params[2]
        total = 0.0
        for lo, hi, c in self.pieces():
            ci = np.polynomial.polynomial.polyint(c)
            total += np.polynomial.polynomial.polyval(hi, ci) - np.polynomial.polynomial.polyval(lo, ci)
        return float(total)

    def to_dict(self) -> dict:
        names = {"delta": ("t0",), "box": ("t_start", "t_end", "amplitude"),
                 "triangle": ("center", "half_width", "peak"),
                 "gaussian": ("mean", "sigma", "amplitude")}[self.kind]
        d = {"kind": self.kind}
        d.update(zip(names, self.params))
        return d

    @staticmethod
    def from_dict(d: dict) -> "TemporalProfile":
        kind = d["kind"]
        names = {"delta": ("t0",), "box": ("t_start", "t_end", "amplitude"),
                 "triangle": ("center", "half_width", "peak"),
                 "gaussian": ("mean", "sigma", "amplitude")}.get(kind)
        if names is None:
            raise ValueError(f"unknown temporal profile kind {kind!r}")
        defaults = {"t0": 0.0, "amplitude": 1.0, "peak": 1.0}
        extra = set(d) - set(names) - {"kind"}
        if extra:
            raise ValueError(f"unknown keys for {kind} profile: {sorted(extra)}")
        vals = []
        for n in names:
            if n in d:
                vals.append(float(d[n]))
            elif n in defaults:
                vals.append(defaults[n])
            else:
                raise ValueError(f"{kind} profile requires {n!r}")
        return TemporalProfile(kind, tuple(vals))


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

class CorrelatedTimeKernel:
    """Correlation kernel ``S(t)``; evaluate with :meth:`evaluate`."""

    support: tuple[float, float]

    def evaluate(self, t):
        """Return ``(S(t), dS/dt)`` for an array of times."""
        raise NotImplementedError

    def __call__(self, t):
        return self.evaluate(t)[0]


@dataclass(frozen=True)
class ConstantKernel(CorrelatedTimeKernel):
    """Time-independent kernel, used for steady-state rendering."""

    value: float = 1.0
    support: tuple = (-math.inf, math.inf)

    def evaluate(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.full_like(t, self.value), np.zeros_like(t)


@dataclass(frozen=True)
class PiecewisePolynomialKernel(CorrelatedTimeKernel):
    """Sum of polynomial segments on half-open intervals ``[lo, hi)``."""

    breaks: np.ndarray      # (m+1,) sorted
    coeffs: np.ndarray      # (m, deg+1) lowest order first
    support: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "support", (float(self.breaks[0]), float(self.breaks[-1])))

    def _poly(self, t, c):
        return np.polynomial.polynomial.polyval(t, c.T, tensor=False)

    def evaluate(self, t):
        t = np.asarray(t, dtype=np.float64)
        b = self.breaks
        m = len(self.coeffs)
        idx = np.clip(np.searchsorted(b, t, side="right") - 1, 0, m - 1)
        inside = (t >= b[0]) & (t < b[-1])
        c = self.coeffs[idx]
        dc = c[..., 1:] * np.arange(1, c.shape[-1])
        val = np.where(inside, _polyval_rows(t, c), 0.0)
        der = np.where(inside, _polyval_rows(t, dc), 0.0)
        # one-sided mean at breakpoints
        at = np.searchsorted(b, t, side="left")
        on_break = (at < len(b)) & (b[np.minimum(at, len(b) - 1)] == t)
        if np.any(on_break):
            j = np.minimum(at, len(b) - 1)
            left_idx = np.clip(j - 1, 0, m - 1)
            right_idx = np.clip(j, 0, m - 1)
            has_left = j >= 1
            has_right = j <= m - 1
            cl = self.coeffs[left_idx]
            cr = self.coeffs[right_idx]
            dl = np.where(has_left, _polyval_rows(t, cl[..., 1:] * np.arange(1, cl.shape[-1])), 0.0)
            dr = np.where(has_right, _polyval_rows(t, cr[..., 1:] * np.arange(1, cr.shape[-1])), 0.0)
            der = np.where(on_break, 0.5 * (dl + dr), der)
        return val, der


def _polyval_rows(t, c):
    """Evaluate per-element polynomials ``c[..., k] t^k`` (Horner)."""
    out = np.zeros(np.shape(t))
    for k in range(c.shape[-1] - 1, -1, -1):
        out = out * t + c[..., k]
    return out


@dataclass(frozen=True)
class GaussianKernel(CorrelatedTimeKernel):
    mean: float
    sigma: float
    amplitude: float
    support: tuple = field(init=False)

    def __post_init__(self):
        w = GAUSS_TRUNCATION * self.sigma
        object.__setattr__(self, "support", (self.mean - w, self.mean + w))

    def evaluate(self, t):
        t = np.asarray(t, dtype=np.float64)
        z = (t - self.mean) / self.sigma
        inside = np.abs(z) < GAUSS_TRUNCATION
        v = self.amplitude * _INV_SQRT_2PI / self.sigma * np.exp(-0.5 * z * z)
        d = -v * z / self.sigma
        return np.where(inside, v, 0.0), np.where(inside, d, 0.0)


@dataclass(frozen=True)
class GaussianLinearKernel(CorrelatedTimeKernel):
    """Correlation of a Gaussian with a piecewise-linear profile.

    ``S(t) = sum_j int_{lo_j}^{hi_j} A N(x; mean0 + sign t, sigma) (w0_j + w1_j x) dx``.
    """

    pieces: tuple           # ((lo, hi, w0, w1), ...)
    mean0: float
    sign: float
    sigma: float
    amplitude: float
    support: tuple = field(init=False)

    def __post_init__(self):
        lo = min(p[0] for p in self.pieces)
        hi = max(p[1] for p in self.pieces)
        w = GAUSS_TRUNCATION * self.sigma
        # mean m = mean0 + sign t must lie within [lo - w, hi + w]
        a = (lo - w - self.mean0) * self.sign
        b = (hi + w - self.mean0) * self.sign
        object.__setattr__(self, "support", (min(a, b), max(a, b)))

    def evaluate(self, t):
        t = np.asarray(t, dtype=np.float64)
        m = self.mean0 + self.sign * t
        s = self.sigma
        val = np.zeros_like(t)
        dm = np.zeros_like(t)
        for lo, hi, w0, w1 in self.pieces:
            zl = (lo - m) / s
            zh = (hi - m) / s
            dphi_cdf = ndtr(zh) - ndtr(zl)
            pl = _INV_SQRT_2PI * np.exp(-0.5 * zl * zl)
            ph = _INV_SQRT_2PI * np.exp(-0.5 * zh * zh)
            lin = w0 + w1 * m
            val += lin * dphi_cdf - w1 * s * (ph - pl)
            dm += w1 * dphi_cdf - lin * (ph - pl) / s - w1 * (zh * ph - zl * pl)
        val *= self.amplitude
        dm *= self.amplitude
        inside = (t > self.support[0]) & (t < self.support[1])
        return np.where(inside, val, 0.0), np.where(inside, self.sign * dm, 0.0)


@dataclass(frozen=True)
class ShiftedKernel(CorrelatedTimeKernel):
    """``S(t) = base(t + shift)``; used for an emitter delta."""

    base: object
    shift: float
    support: tuple = field(init=False)

    def __post_init__(self):
        a, b = self.base.support
        object.__setattr__(self, "support", (a - self.shift, b - self.shift))

    def evaluate(self, t):
        return self.base.evaluate(np.asarray(t, dtype=np.float64) + self.shift)


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------

def _profile_kernel(w: TemporalProfile) -> CorrelatedTimeKernel:
    """Kernel that evaluates a profile itself (emitter delta at 0 correlated with ``w``)."""
    if w.kind == "gaussian":
        return GaussianKernel(*w.params)
    pcs = w.pieces()
    breaks = sorted({p[0] for p in pcs} | {p[1] for p in pcs})
    deg = max(len(p[2]) for p in pcs)
    coeffs = np.zeros((len(breaks) - 1, deg))
    for lo, hi, c in pcs:
        for j in range(len(breaks) - 1):
            if breaks[j] >= lo and breaks[j + 1] <= hi:
                coeffs[j, :len(c)] += c
    return PiecewisePolynomialKernel(np.array(breaks), coeffs)


def _correlate_pieces(p_lo, p_hi, p, q_lo, q_hi, q):
    """Exact correlation of two polynomial pieces.

    Returns a list of ``(t_lo, t_hi, coeffs)`` for ``S(t) = int p(x) q(x + t) dx``
    with ``x`` restricted to ``[p_lo, p_hi]`` and ``x + t`` to ``[q_lo, q_hi]``.
    """
    # bivariate integrand C[i, j] x^i t^j of p(x) q(x + t)
    dp, dq = len(p), len(q)
    C = np.zeros((dp + dq, dq))
    for k, qk in enumerate(q):
        for r in range(k + 1):  # (x + t)^k = sum comb(k, r) x^r t^(k - r)
            for i, pi in enumerate(p):
                C[i + r, k - r] += pi * qk * comb(k, r)
    # antiderivative in x
    A = np.zeros((C.shape[0] + 1, C.shape[1]))
    for i in range(C.shape[0]):
        A[i + 1] = C[i] / (i + 1)

    def substitute(alpha, beta):
        # evaluate A at x = alpha + beta t, giving a polynomial in t
        out = np.zeros(A.shape[0] + A.shape[1])
        for i in range(A.shape[0]):
            # (alpha + beta t)^i
            lin = np.zeros(i + 1)
            for r in range(i + 1):
                lin[r] = comb(i, r) * alpha ** (i - r) * beta ** r
            for j in range(A.shape[1]):
                if A[i, j] != 0.0:
                    out[j:j + i + 1] += A[i, j] * lin
        return out

    cuts = sorted({q_lo - p_hi, q_lo - p_lo, q_hi - p_hi, q_hi - p_lo})
    result = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b <= a:
            continue
        mid = 0.5 * (a + b)
        # lower limit max(p_lo, q_lo - t), upper min(p_hi, q_hi - t)
        lo = (p_lo, 0.0) if p_lo >= q_lo - mid else (q_lo, -1.0)
        hi = (p_hi, 0.0) if p_hi <= q_hi - mid else (q_hi, -1.0)
        coeffs = substitute(*hi) - substitute(*lo)
        result.append((a, b, coeffs))
    return result


def _correlate_polys(L: TemporalProfile, W: TemporalProfile) -> PiecewisePolynomialKernel:
    segs = []
    for pl, ph, pc in L.pieces():
        for ql, qh, qc in W.pieces():
            segs.extend(_correlate_pieces(pl, ph, pc, ql, qh, qc))
    breaks = sorted({s[0] for s in segs} | {s[1] for s in segs})
    deg = max(len(s[2]) for s in segs)
    coeffs = np.zeros((len(breaks) - 1, deg))
    for a, b, c in segs:
        for j in range(len(breaks) - 1):
            if breaks[j] >= a and breaks[j + 1] <= b:
                coeffs[j, :len(c)] += c
    # trim trailing zero orders
    while coeffs.shape[1] > 1 and np.all(np.abs(coeffs[:, -1]) == 0.0):
        coeffs = coeffs[:, :-1]
    return PiecewisePolynomialKernel(np.array(breaks, dtype=np.float64), coeffs)


def _linear_pieces(p: TemporalProfile):
    out = []
    for lo, hi, c in p.pieces():
        w0 = float(c[0])
        w1 = float(c[1]) if len(c) > 1 else 0.0
        out.append((lo, hi, w0, w1))
    return tuple(out)


def correlate(L: TemporalProfile, W: TemporalProfile) -> CorrelatedTimeKernel:
    """Closed-form correlation ``S(t) = int L(t') W(t' + t) dt'``."""
    if W.kind == "delta":
        raise ValueError("sensor response cannot be a Dirac delta")
    if L.kind == "delta":
        base = _profile_kernel(W)
        t0 = L.params[0]
        return base if t0 == 0.0 else ShiftedKernel(base, t0)
    if L.kind == "gaussian" and W.kind == "gaussian":
        m1, s1, a1 = L.params
        m2, s2, a2 = W.params
        var = s1 * s1 + s2 * s2
        return GaussianKernel(m2 - m1, math.sqrt(var), a1 * a2)
    if L.kind == "gaussian":
        # S(t) = int W(s) L(s - t) ds, a Gaussian of mean m1 + t
        m1, s1, a1 = L.params
        return GaussianLinearKernel(_linear_pieces(W), m1, 1.0, s1, a1)
    if W.kind == "gaussian":
        # S(t) = int L(x) W(x + t) dx, a Gaussian in x of mean m2 - t
        m2, s2, a2 = W.params
        return GaussianLinearKernel(_linear_pieces(L), m2, -1.0, s2, a2)
    return _correlate_polys(L, W)


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameSpec:
    """Frame layout: frame ``l`` sees the kernel shifted by ``t0 + l * dt``."""

    n_frames: int
    dt: float
    t0: float = 0.0
    width: int = 1
    height: int = 1

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if not self.dt > 0:
            raise ValueError("frame exposure dt must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")

    def frame_offsets(self, kernel: CorrelatedTimeKernel) -> int:
        """Maximum number of frames a single time of flight can touch."""
        a, b = kernel.support
        if not (math.isfinite(a) and math.isfinite(b)):
            return self.n_frames
        return min(self.n_frames, int(math.floor((b - a) / self.dt)) + 2)


def eval_kernel(S: CorrelatedTimeKernel, t):
    """Value and time derivative of ``S`` at ``t``."""
    return S.evaluate(t)


def eval_frame_kernel(S: CorrelatedTimeKernel, tof, frames: FrameSpec, l):
    """Value and derivative of the frame-``l`` kernel ``S(tof - t0 - l dt)``."""
    tau = np.asarray(tof, dtype=np.float64) - frames.t0 - np.asarray(l) * frames.dt
    return S.evaluate(tau)


def first_frame(S: CorrelatedTimeKernel, tof, frames: FrameSpec):
    """Smallest frame index whose shifted kernel may be non-zero at ``tof``."""
    a, b = S.support
    tof = np.asarray(tof, dtype=np.float64)
    if not math.isfinite(b):
        return np.zeros(tof.shape, dtype=np.int64)
    return np.ceil((tof - frames.t0 - b) / frames.dt).astype(np.int64)


def kernel_bin_range(S: CorrelatedTimeKernel, tof: float, frames: FrameSpec) -> range:
    """Contiguous range of frames ``l`` with ``S_l(tof) != 0``."""
    a, b = S.support
    if not (math.isfinite(a) and math.isfinite(b)):
        lo, hi = 0, frames.n_frames - 1
    else:
        lo = max(0, int(math.ceil((tof - frames.t0 - b) / frames.dt)) - 1)
        hi = min(frames.n_frames - 1, int(math.floor((tof - frames.t0 - a) / frames.dt)) + 1)
    if hi < lo:
        return range(0)
    ls = np.arange(lo, hi + 1)
    v, _ = eval_frame_kernel(S, np.full(ls.shape, tof), frames, ls)
    nz = np.nonzero(v)[0]
    if nz.size == 0:
        return range(0)
    return range(int(ls[nz[0]]), int(ls[nz[-1]]) + 1)
