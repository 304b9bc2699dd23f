"""Per-path transport terms with derivative channels.

Every function accepts batched inputs: a vertex position is a :class:`Dual`
of value shape ``(..., 3)``.  The same code therefore evaluates one path in a
unit test and a million paths inside the estimators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dual import Dual, dot, norm, normalize
from .temporal import CorrelatedTimeKernel, FrameSpec, eval_frame_kernel

C_LIGHT = 0.299792458  # metres per nanosecond

LAMBERTIAN = 0
ROUGH_CONDUCTOR = 1


class DegeneratePathError(ValueError):
    pass


# ---------------------------------------------------------------------------
# BSDFs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Bsdf:
    """Scalar material description.  Both kinds are two-sided reflectors."""

    kind: str = "lambertian"
    albedo: float = 0.8
    alpha: float = 0.3
    reflectance: float = 0.9

    def __post_init__(self):
        if self.kind not in ("lambertian", "roughconductor"):
            raise ValueError(f"unsupported BSDF kind {self.kind!r}")
        if not 0.0 <= self.albedo <= 1.0:
            raise ValueError("albedo must lie in [0, 1]")
        if self.kind == "roughconductor" and not (1e-3 <= self.alpha <= 1.0):
            raise ValueError("roughness alpha must lie in [1e-3, 1]")
        if not 0.0 <= self.reflectance <= 1.0:
            raise ValueError("reflectance must lie in [0, 1]")

    def arrays(self, shape=()) -> "MaterialArrays":
        k = LAMBERTIAN if self.kind == "lambertian" else ROUGH_CONDUCTOR
        return MaterialArrays(np.full(shape, k), np.full(shape, self.albedo),
                              np.full(shape, self.alpha), np.full(shape, self.reflectance))

    def eval(self, n: Dual, wi: Dual, wo: Dual) -> Dual:
        return bsdf_eval(self.arrays(n.v.shape[:-1]), n, wi, wo)

    def pdf(self, n, wi, wo):
        n, wi, wo = (np.asarray(a, dtype=np.float64) for a in (n, wi, wo))
        return bsdf_pdf(self.arrays(n.shape[:-1]), n, wi, wo)

    def sample(self, n, wi, u1, u2):
        n, wi = np.asarray(n, dtype=np.float64), np.asarray(wi, dtype=np.float64)
        return bsdf_sample(self.arrays(n.shape[:-1]), n, wi, np.asarray(u1), np.asarray(u2))


@dataclass
class MaterialArrays:
    kind: np.ndarray
    albedo: np.ndarray
    alpha: np.ndarray
    f0: np.ndarray

    def take(self, idx) -> "MaterialArrays":
        return MaterialArrays(self.kind[idx], self.albedo[idx], self.alpha[idx], self.f0[idx])


def _ggx_d(alpha, cos_h):
    a2 = alpha * alpha
    c2 = cos_h * cos_h
    den = c2 * (a2 - 1.0) + 1.0
    return a2 / (math.pi * den * den)


def _dual_ggx_d(alpha, cos_h: Dual) -> Dual:
    a2 = alpha * alpha
    den = cos_h * cos_h * (a2 - 1.0) + 1.0
    return a2 / (den * den * math.pi)


def _dual_smith_g1(alpha, c: Dual) -> Dual:
    a2 = alpha * alpha
    return (c * 2.0) / (c + (c * c * (1.0 - a2) + a2).sqrt())


def bsdf_eval(mat: MaterialArrays, n: Dual, wi: Dual, wo: Dual) -> Dual:
    """``rho(wi, wo)`` for unit directions pointing away from the surface."""
    ci = dot(n, wi)
    co = dot(n, wo)
    same = (ci.v * co.v) > 0.0
    s = np.where(ci.v >= 0.0, 1.0, -1.0)
    ci = ci.scale_by_sign(s)
    co = co.scale_by_sign(s)
    out = Dual(np.broadcast_to(mat.albedo / math.pi, ci.v.shape).copy(), n=n.n)
    rough = np.asarray(mat.kind == ROUGH_CONDUCTOR)
    if np.any(rough):
        alpha = np.broadcast_to(mat.alpha, ci.v.shape)
        f0 = np.broadcast_to(mat.f0, ci.v.shape)
        safe_ci = ci.where(same, 1.0)
        safe_co = co.where(same, 1.0)
        h = normalize(wi + wo)
        ch = dot(n, h).abs()
        D = _dual_ggx_d(alpha, ch)
        G = _dual_smith_g1(alpha, safe_ci) * _dual_smith_g1(alpha, safe_co)
        wh = dot(wi, h).abs()
        F = (1.0 - wh) ** 5 * (1.0 - f0) + f0
        f = D * G * F / (safe_ci * safe_co * 4.0)
        out = f.where(rough, out)
    return out.where(same, 0.0)


def bsdf_pdf(mat: MaterialArrays, n, wi, wo):
    """Solid-angle density of :func:`bsdf_sample` producing ``wo`` given ``wi``."""
    ci = np.einsum("...i,...i->...", n, wi)
    co = np.einsum("...i,...i->...", n, wo)
    same = ci * co > 0.0
    pdf = np.abs(co) / math.pi
    rough = np.asarray(mat.kind == ROUGH_CONDUCTOR)
    if np.any(rough):
        h = wi + wo
        h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-300)
        ch = np.abs(np.einsum("...i,...i->...", n, h))
        oh = np.abs(np.einsum("...i,...i->...", wo, h))
        with np.errstate(divide="ignore", invalid="ignore"):
            pr = _ggx_d(mat.alpha, ch) * ch / (4.0 * oh)
        pdf = np.where(rough, pr, pdf)
    return np.where(same, pdf, 0.0)


def _frame(n):
    """Orthonormal tangents for each normal (branchless construction)."""
    sign = np.where(n[..., 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t = np.stack([1.0 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], axis=-1)
    bt = np.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], axis=-1)
    return t, bt


def cosine_hemisphere(n, u1, u2):
    r = np.sqrt(u1)
    phi = 2.0 * math.pi * u2
    z = np.sqrt(np.maximum(0.0, 1.0 - u1))
    t, b = _frame(n)
    return (r * np.cos(phi))[..., None] * t + (r * np.sin(phi))[..., None] * b + z[..., None] * n


def bsdf_sample(mat: MaterialArrays, n, wi, u1, u2):
    """Sample an outgoing direction; returns ``(wo, pdf)`` (pdf 0 marks failure)."""
    ci = np.einsum("...i,...i->...", n, wi)
    nf = np.where((ci >= 0.0)[..., None], n, -n)
    wo = cosine_hemisphere(nf, u1, u2)
    rough = np.asarray(mat.kind == ROUGH_CONDUCTOR)
    if np.any(rough):
        a2 = np.broadcast_to(mat.alpha, u1.shape) ** 2
        c2 = (1.0 - u1) / (1.0 + (a2 - 1.0) * u1)
        ct = np.sqrt(np.clip(c2, 0.0, 1.0))
        st = np.sqrt(np.clip(1.0 - c2, 0.0, 1.0))
        phi = 2.0 * math.pi * u2
        t, b = _frame(nf)
        h = (st * np.cos(phi))[..., None] * t + (st * np.sin(phi))[..., None] * b + ct[..., None] * nf
        wr = 2.0 * np.einsum("...i,...i->...", wi, h)[..., None] * h - wi
        wo = np.where(rough[..., None], wr, wo)
    pdf = bsdf_pdf(mat, n, wi, wo)
    return wo, pdf


# ---------------------------------------------------------------------------
# path vertices
# ---------------------------------------------------------------------------

@dataclass
class PathVertex:
    """A path vertex with derivative channels.

    ``material`` is used at inner vertices; ``radiance``/``cos_power`` at an
    emitter vertex.  Camera vertices carry their optical axis as ``n``.
    """

    p: Dual
    n: Dual
    material: Bsdf | MaterialArrays | None = None
    radiance: float | np.ndarray = 0.0
    cos_power: float | np.ndarray = 0.0


def geometry_term(x: PathVertex, y: PathVertex) -> Dual:
    d = y.p - x.p
    r2 = dot(d, d)
    zero = r2.v == 0.0
    r2s = r2.where(~zero, 1.0)
    w = d / r2s.sqrt().expand()
    g = dot(x.n, w).abs() * dot(y.n, w).abs() / r2s
    return g.where(~zero, 0.0)


def direction(x: Dual, y: Dual) -> Dual:
    return normalize(y - x)


def tof_and_derivative(positions: list[Dual], eta, c: float = C_LIGHT) -> Dual:
    """Time of flight ``sum eta |x_i - x_{i-1}| / c`` with derivative channels."""
    if len(positions) < 2:
        raise DegeneratePathError("a path needs at least two vertices")
    n = positions[0].n
    if not isinstance(eta, Dual):
        eta = Dual(eta, n=n)
    total = None
    for a, b in zip(positions[:-1], positions[1:]):
        seg = norm(b - a)
        if np.any(seg.v == 0.0):
            raise DegeneratePathError("zero-length path segment")
        term = seg * eta
        total = term if total is None else total + term
    return total / c


def emitter_factor(x0: PathVertex, x1: Dual) -> Dual:
    """One-sided emitted radiance ``R cos^p`` from ``x0`` toward ``x1``."""
    cth = dot(x0.n, direction(x0.p, x1))
    front = cth.v > 0.0
    p = np.asarray(x0.cos_power, dtype=np.float64)
    safe = cth.where(front, 1.0)
    if np.all(p == 0.0):
        val = Dual(np.ones(cth.v.shape), n=cth.n)
    else:
        val = Dual(safe.v ** p, (p * safe.v ** np.where(p > 0, p - 1.0, 0.0))[..., None] * safe.g)
    return (val * x0.radiance).where(front, 0.0)


@dataclass(frozen=True)
class PinholeImportance:
    """Spatial sensor importance of a pinhole camera with a film at unit distance."""

    forward: np.ndarray
    pixel_area: float

    def __call__(self, cam: Dual, x: Dual) -> Dual:
        w = direction(cam, x)
        c = dot(w, self.forward)
        front = c.v > 0.0
        cs = c.where(front, 1.0)
        return (1.0 / ((cs * cs) * (cs * cs) * self.pixel_area)).where(front, 0.0)


def correlated_importance(positions: list[Dual], emitter: PathVertex, importance, kernel: CorrelatedTimeKernel,
                          frames: FrameSpec, frame: int, eta=1.0, c: float = C_LIGHT) -> Dual:
    """``S_e`` of a path for one frame: temporal kernel times spatial factors.

    ``positions`` runs from the emitter vertex to the sensor; ``importance`` is
    a callable ``(sensor_pos, x_{k-1}) -> Dual`` or ``None``.
    """
    tof = tof_and_derivative(positions, eta, c)
    v, dv = eval_frame_kernel(kernel, tof.v, frames, frame)
    S = Dual(v, dv[..., None] * tof.g)
    spatial = emitter_factor(emitter, positions[1])
    if importance is not None:
        spatial = spatial * importance(positions[-1], positions[-2])
    return S * spatial


def throughput_and_derivative(vertices: list[PathVertex]) -> Dual:
    """Product of inner-vertex BSDFs and all segment geometry terms."""
    if len(vertices) < 2:
        raise DegeneratePathError("a path needs at least two vertices")
    T = geometry_term(vertices[0], vertices[1])
    for i in range(1, len(vertices) - 1):
        prev, cur, nxt = vertices[i - 1], vertices[i], vertices[i + 1]
        mat = cur.material
        if isinstance(mat, Bsdf):
            mat = mat.arrays(cur.p.v.shape[:-1])
        rho = bsdf_eval(mat, cur.n, direction(cur.p, prev.p), direction(cur.p, nxt.p))
        T = T * rho * geometry_term(cur, nxt)
    return T


@dataclass
class PathState:
    """A complete path with its optical length ``d`` (metres) and derivative."""

    vertices: list
    eta: Dual | float = 1.0
    c: float = C_LIGHT
    throughput: Dual | None = None
    pdf: float | np.ndarray = 1.0
    d: np.ndarray = field(init=False)
    d_dot: np.ndarray = field(init=False)

    def __post_init__(self):
        tof = tof_and_derivative([v.p for v in self.vertices], self.eta, self.c)
        self.d = tof.v * self.c
        self.d_dot = tof.g * self.c
        if self.throughput is None:
            self.throughput = throughput_and_derivative(self.vertices)

    @property
    def tof(self):
        return self.d / self.c
