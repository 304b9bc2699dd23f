"""Transient rendering and gradient estimation.

Three Monte Carlo passes share one histogram layout:

* the camera pass builds bidirectional paths (camera subpath plus light
  subpath, every connection strategy with at least one camera-side surface
  vertex, balance-heuristic weights) and deposits intensity and, optionally,
  forward-mode derivatives of each path contribution;
* the scene-space boundary pass samples segments grazing silhouette edges and
  deposits the visibility-discontinuity derivative;
* the film-space boundary pass handles discontinuities of directly visible
  geometry on the image plane.

Path vertices are parameterized by their barycentric coordinates (they move
with the geometry) except the first camera-ray hit, which stays attached to
its film point.  Derivatives of one sample are computed by dual arithmetic on
the path contribution with the sampling density held fixed.
"""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import multiprocessing

import numpy as np

from .dual import Dual
from .geometry import silhouette_mask
from .scene import Scene
from .temporal import ConstantKernel, FrameSpec, eval_frame_kernel, first_frame
from .transport import (PathVertex, bsdf_eval, bsdf_pdf, bsdf_sample, cosine_hemisphere,
                        direction, emitter_factor, geometry_term, tof_and_derivative)

CHUNK = 1 << 14
EMITTER_DIRECTION_FRACTION = 0.5
_STREAM_CAMERA = 1
_STREAM_BOUNDARY = 2
_STREAM_FILM_EDGE = 3


# ---------------------------------------------------------------------------
# histogram
# ---------------------------------------------------------------------------

@dataclass
class TransientHistogram:
    """Per-pixel, per-frame intensity and gradient channels.

    ``intensity`` has shape ``(H, W, N_f)`` and ``grad`` ``(d, H, W, N_f)``
    with one plane per scene parameter.  ``channels`` holds the raw
    per-binding planes that ``grad`` was summed from.
    """

    intensity: np.ndarray
    grad: np.ndarray
    frames: FrameSpec
    c: float
    channels: np.ndarray | None = None
    stats: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.intensity.shape

    @property
    def d(self) -> int:
        return self.grad.shape[0]

    def __add__(self, other: "TransientHistogram") -> "TransientHistogram":
        if self.intensity.shape != other.intensity.shape or self.grad.shape != other.grad.shape:
            raise ValueError("histogram dimensions differ")
        ch = None
        if self.channels is not None and other.channels is not None:
            ch = self.channels + other.channels
        stats = dict(self.stats)
        for k, v in other.stats.items():
            stats[k] = stats.get(k, 0) + v if isinstance(v, (int, float)) else v
        return TransientHistogram(self.intensity + other.intensity, self.grad + other.grad,
                                  self.frames, self.c, ch, stats)


class _Accumulator:
    """Collects weighted contributions and bins them per pixel and frame."""

    def __init__(self, scene: Scene, n: int):
        self.scene = scene
        self.n = n
        self.P = scene.width * scene.height
        self.Nf = scene.frames.n_frames
        self.value = np.zeros(self.P * self.Nf)
        self.grad = np.zeros((n, self.P * self.Nf))
        self.pending = []
        self.nonfinite = 0

    def add(self, pix, kid, tof, tof_g=None, val=None, grad=None):
        """Queue contributions.

        ``val`` (N,) goes to the intensity channel; ``grad`` (N, n) to the
        gradient channels; ``tof_g`` (N, n) adds the temporal term
        ``val * dS/dt * dtof``.
        """
        self.pending.append((pix, kid, tof, tof_g, val, grad))

    def flush(self):
        if not self.pending:
            return
        cols = list(zip(*self.pending))
        self.pending = []
        pix = np.concatenate(cols[0])
        kid = np.concatenate(cols[1])
        tof = np.concatenate(cols[2])
        N = len(pix)
        n = self.n

        def cat(items, width):
            if all(x is None for x in items):
                return None
            parts = []
            for x, p in zip(items, cols[0]):
                if x is None:
                    parts.append(np.zeros((len(p),) + width))
                else:
                    parts.append(x)
            return np.concatenate(parts)

        tof_g = cat(cols[3], (n,))
        val = cat(cols[4], ())
        grad = cat(cols[5], (n,))
        ok = np.isfinite(tof)
        for arr in (tof_g, val, grad):
            if arr is not None:
                ok &= np.all(np.isfinite(arr.reshape(N, -1)), axis=1)
        bad = int(N - ok.sum())
        if bad:
            self.nonfinite += bad
            warnings.warn(f"dropped {bad} non-finite path contributions", RuntimeWarning, stacklevel=2)
        frames = self.scene.frames
        size = self.P * self.Nf
        for k in np.unique(kid[ok]):
            m = ok & (kid == k)
            kernel = self.scene.kernels[k]
            p, t = pix[m], tof[m]
            v = None if val is None else val[m]
            g = None if grad is None else grad[m]
            tg = None if tof_g is None else tof_g[m]
            if isinstance(kernel, ConstantKernel):
                starts = np.zeros(len(t), dtype=np.int64)
                n_off = self.Nf
            else:
                # offsets are capped at the frame count, so never start before frame 0
                starts = np.maximum(first_frame(kernel, t, frames), 0)
                n_off = frames.frame_offsets(kernel)
            for j in range(n_off):
                l = starts + j
                inside = (l >= 0) & (l < self.Nf)
                if not np.any(inside):
                    continue
                S, dS = eval_frame_kernel(kernel, t, frames, l)
                inside &= (S != 0.0) | (dS != 0.0)
                if not np.any(inside):
                    continue
                idx = p[inside] * self.Nf + l[inside]
                Si = S[inside]
                if v is not None:
                    self.value += np.bincount(idx, weights=v[inside] * Si, minlength=size)
                for c in range(n):
                    w = None
                    if g is not None:
                        w = g[inside, c] * Si
                    if tg is not None and v is not None:
                        extra = v[inside] * dS[inside] * tg[inside, c]
                        w = extra if w is None else w + extra
                    if w is not None:
                        self.grad[c] += np.bincount(idx, weights=w, minlength=size)


# ---------------------------------------------------------------------------
# path vertices
# ---------------------------------------------------------------------------

@dataclass
class _Verts:
    """A batch of surface vertices (one per sample)."""

    p: np.ndarray
    face: np.ndarray
    bary: np.ndarray
    alive: np.ndarray

    def take(self, idx) -> "_Verts":
        return _Verts(self.p[idx], self.face[idx], self.bary[idx], self.alive[idx])


def _normalize(v):
    # dead samples carry coincident placeholder points; leave them at zero
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def _trace_next(scene: Scene, cur: _Verts, wo, ok):
    """Trace from ``cur`` along ``wo`` for samples with ``ok``; return the new vertices."""
    B = len(cur.p)
    p = np.zeros((B, 3))
    face = np.full(B, -1, dtype=np.int64)
    bary = np.zeros((B, 3))
    alive = np.zeros(B, dtype=bool)
    idx = np.nonzero(ok)[0]
    if idx.size:
        hit, t, f, b = scene.intersect(cur.p[idx], wo[idx], ignore=cur.face[idx, None])
        h = idx[hit]
        face[h] = f[hit]
        bary[h] = b[hit]
        p[h] = np.einsum("bk,bki->bi", b[hit], scene.tri_p[f[hit]])
        alive[h] = True
    return _Verts(p, face, bary, alive)


def _camera_subpath(scene: Scene, fx, fy, rng, depth: int):
    B = len(fx)
    w = scene.film_to_dir(fx, fy)
    o = np.broadcast_to(scene.cam_pos, (B, 3))
    hit, t, f, b = scene.intersect(o, w)
    p = np.einsum("bk,bki->bi", b, scene.tri_p[np.maximum(f, 0)])
    z = [_Verts(p, f, b, hit)]
    prev_p = o
    for _ in range(depth - 1):
        cur = z[-1]
        u = rng.random((B, 2))
        ok = cur.alive
        fc = np.maximum(cur.face, 0)
        n = scene.face_n[fc]
        wi = _normalize(prev_p - cur.p)
        wo, pdf = bsdf_sample(scene.mats.take(fc), n, wi, u[:, 0], u[:, 1])
        ok = ok & (pdf > 0) & (scene.mats.albedo[fc] > 0)
        nxt = _trace_next(scene, cur, wo, ok)
        z.append(nxt)
        prev_p = cur.p
    return z


def _light_subpath(scene: Scene, B: int, rng, count: int):
    if count <= 0:
        return []
    u = rng.random((B, 5))
    face, bary, p = scene.sample_emitter(u[:, 0], u[:, 1], u[:, 2])
    y = [_Verts(p, face, bary, np.ones(B, dtype=bool))]
    if count == 1:
        return y
    wo = cosine_hemisphere(scene.face_n[face], u[:, 3], u[:, 4])
    y.append(_trace_next(scene, y[0], wo, np.ones(B, dtype=bool)))
    for _ in range(count - 2):
        prev, cur = y[-2], y[-1]
        u = rng.random((B, 2))
        fc = np.maximum(cur.face, 0)
        wi = _normalize(prev.p - cur.p)
        wo, pdf = bsdf_sample(scene.mats.take(fc), scene.face_n[fc], wi, u[:, 0], u[:, 1])
        ok = cur.alive & (pdf > 0) & (scene.mats.albedo[fc] > 0)
        y.append(_trace_next(scene, cur, wo, ok))
    return y


def _pdf_area(scene, face_cur, prev, cur, nxt, n_next):
    """Area density at ``nxt`` of BSDF-sampling from ``cur`` given the direction to ``prev``."""
    wi = _normalize(prev - cur)
    d = nxt - cur
    r2 = _dot(d, d)
    wo = d / np.sqrt(r2)[:, None]
    pdf = bsdf_pdf(scene.mats.take(face_cur), scene.face_n[face_cur], wi, wo)
    return pdf * np.abs(_dot(n_next, wo)) / r2


def mis_denominator(scene: Scene, pos, faces):
    """Sum over connection strategies of the area densities of a full path.

    ``pos`` lists the surface vertices ``x_0 .. x_{k-1}`` followed by the camera
    position; the density factor of the camera ray cancels and is left out.
    """
    k = len(pos) - 1
    if k == 1:
        return np.ones(len(pos[0]))
    PL = [np.full(len(pos[0]), 1.0 / scene.emitter_area)]
    d01 = pos[1] - pos[0]
    r2 = _dot(d01, d01)
    w01 = d01 / np.sqrt(r2)[:, None]
    PL.append(np.maximum(_dot(scene.face_n[faces[0]], w01), 0.0) / math.pi
              * np.abs(_dot(scene.face_n[faces[1]], w01)) / r2)
    for i in range(2, k - 1):
        PL.append(_pdf_area(scene, faces[i - 1], pos[i - 2], pos[i - 1], pos[i], scene.face_n[faces[i]]))
    PC = []
    for i in range(k - 1):
        PC.append(_pdf_area(scene, faces[i + 1], pos[i + 2], pos[i + 1], pos[i], scene.face_n[faces[i]]))
    total = np.zeros(len(pos[0]))
    for s in range(k):
        term = np.ones(len(pos[0]))
        for i in range(s):
            term = term * PL[i]
        for i in range(s, k - 1):
            term = term * PC[i]
        total += term
    return total


def path_contribution(scene: Scene, verts: list, derivs: bool = True):
    """Dual path contribution of ``x_0 .. x_{k-1}`` (the last one film-attached).

    Returns ``(A, tof)``: ``A`` excludes the camera-side factors absorbed by the
    film measure and includes the Jacobian-rate factors of material vertices.
    """
    k = len(verts)
    nch = scene.n if derivs else 0
    B = len(verts[0].p)
    X, N = [], []
    for i, v in enumerate(verts):
        if i == k - 1:
            x = scene.attached_dual(v.face, v.bary, v.p)
        else:
            x = scene.position_dual(v.face, v.bary, v.p)
        nr = scene.normal_dual(v.face)
        if not derivs:
            x = Dual(x.v, x.g[..., :0])
            nr = Dual(nr.v, nr.g[..., :0])
        X.append(x)
        N.append(nr)
    cam_g = scene.cam_vel if derivs else scene.cam_vel[:, :0]
    cam = Dual(np.broadcast_to(scene.cam_pos, (B, 3)), np.broadcast_to(cam_g, (B, 3, nch)))
    f0 = verts[0].face
    em = PathVertex(X[0], N[0], radiance=scene.face_emit[f0], cos_power=scene.face_cospow[f0])
    A = emitter_factor(em, X[1] if k > 1 else cam)
    for i in range(1, k):
        nxt = X[i + 1] if i + 1 < k else cam
        rho = bsdf_eval(scene.mats.take(verts[i].face), N[i], direction(X[i], X[i - 1]), direction(X[i], nxt))
        G = geometry_term(PathVertex(X[i - 1], N[i - 1]), PathVertex(X[i], N[i]))
        A = A * rho * G
    if derivs:
        for i in range(k - 1):
            A = A * Dual(np.ones(B), scene.face_rate[verts[i].face])
    eta = Dual(scene.eta, scene.eta_dot if derivs else np.zeros(0))
    tof = tof_and_derivative(X + [cam], eta, scene.c)
    return A, tof


def _camera_pass(scene: Scene, fx, fy, pix, rng, depth, acc: _Accumulator, weight,
                 derivs=True, temporal=True, chan_weight=None):
    """Bidirectional estimate of the radiance through film points ``(fx, fy)``."""
    B = len(fx)
    z = _camera_subpath(scene, fx, fy, rng, depth)
    y = _light_subpath(scene, B, rng, depth - 1)
    for k in range(1, depth + 1):
        for s in range(0, k):
            t = k + 1 - s
            cams = [z[j] for j in range(t - 2, -1, -1)]   # z_{t-1} .. z_1
            lights = y[:s]
            ok = np.ones(B, dtype=bool)
            for v in lights + cams:
                ok &= v.alive
            if s == 0:
                ok &= scene.face_emit[np.maximum(cams[0].face, 0)] > 0
            idx = np.nonzero(ok)[0]
            if idx.size == 0:
                continue
            path = [v.take(idx) for v in lights + cams]
            if s >= 1:
                a, b = path[s - 1], path[s]
                vis = ~scene.occluded(a.p, b.p, ignore=np.stack([a.face, b.face], axis=1))
                idx = idx[vis]
                if idx.size == 0:
                    continue
                path = [v.take(vis) for v in path]
            A, tof = path_contribution(scene, path, derivs=derivs and chan_weight is None)
            pos = [v.p for v in path] + [np.broadcast_to(scene.cam_pos, (len(idx), 3))]
            denom = mis_denominator(scene, pos, [v.face for v in path])
            good = (A.v != 0.0) & (denom > 0)
            if not np.any(good):
                continue
            inv = np.where(good, 1.0 / np.where(good, denom, 1.0), 0.0)
            kid = scene.face_kernel[path[0].face]
            val = A.v * inv
            w = weight[idx] if np.ndim(weight) else weight
            if chan_weight is not None:
                acc.add(pix[idx][good], kid[good], tof.v[good], None, None,
                        (val[:, None] * chan_weight[idx])[good])
                continue
            if derivs:
                acc.add(pix[idx][good], kid[good], tof.v[good],
                        tof.g[good] if temporal else None,
                        (val * w)[good], (A.g * (inv * w)[:, None])[good])
            else:
                acc.add(pix[idx][good], kid[good], tof.v[good], None, (val * w)[good], None)


# ---------------------------------------------------------------------------
# boundary segments
# ---------------------------------------------------------------------------

@dataclass
class BoundarySegmentSample:
    """A batch of boundary segments grazing silhouette edges.

    ``v_normal`` holds the per-channel scalar normal velocity with ``x_S``
    following the geometry; ``v_normal_attached`` the same with ``x_S``
    attached to its film point (used when ``x_S`` connects to the camera).
    """

    accepted: np.ndarray
    edge: np.ndarray
    x_b: np.ndarray
    omega: np.ndarray
    x_l: np.ndarray
    x_s: np.ndarray
    face_l: np.ndarray
    face_s: np.ndarray
    bary_l: np.ndarray
    bary_s: np.ndarray
    pdf: np.ndarray
    jacobian: np.ndarray
    cross_norm: np.ndarray
    v_normal: np.ndarray
    v_normal_attached: np.ndarray

    def take(self, idx) -> "BoundarySegmentSample":
        kw = {}
        for k, v in self.__dict__.items():
            kw[k] = v[idx]
        return BoundarySegmentSample(**kw)


def _sample_edges(scene: Scene, u0, u1):
    e = np.minimum(np.searchsorted(scene.edge_cdf, u0, side="right"), len(scene.edge_cdf) - 1)
    e0 = scene.edge_p[e, 0]
    e1 = scene.edge_p[e, 1]
    x_b = e0 + u1[:, None] * (e1 - e0)
    v_b = (1.0 - u1)[:, None, None] * scene.edge_vel[e, 0] + u1[:, None, None] * scene.edge_vel[e, 1]
    return e, x_b, v_b


def sample_boundary_segment(scene: Scene, rng, count: int) -> BoundarySegmentSample | None:
    """Sample ``count`` candidate segments; ``accepted`` marks the valid ones."""
    if scene.edge_total <= 0.0:
        return None
    u = rng.random((count, 8))
    e, x_b, v_b = _sample_edges(scene, u[:, 0], u[:, 1])
    # one-sample mixture of uniform sphere and emitter-area directions
    zc = 1.0 - 2.0 * u[:, 3]
    rr = np.sqrt(np.maximum(0.0, 1.0 - zc * zc))
    phi = 2.0 * math.pi * u[:, 4]
    omega = np.stack([rr * np.cos(phi), rr * np.sin(phi), zc], axis=1)
    if scene.emitter_area > 0.0:
        pick = u[:, 2] < EMITTER_DIRECTION_FRACTION
        _, _, y = scene.sample_emitter(u[:, 5], u[:, 6], u[:, 7])
        to_b = x_b - y
        ln = np.linalg.norm(to_b, axis=1)
        good = pick & (ln > 0)
        omega[good] = to_b[good] / ln[good, None]
        p_dir = (1.0 - EMITTER_DIRECTION_FRACTION) / (4.0 * math.pi) \
            + EMITTER_DIRECTION_FRACTION * scene.emitter_direction_pdf(x_b, -omega)
    else:
        p_dir = np.full(count, 1.0 / (4.0 * math.pi))
    ign = scene.edge_faces[e]
    hit_s, t_s, f_s, b_s = scene.intersect(x_b, omega, ignore=ign)
    hit_l, t_l, f_l, b_l = scene.intersect(x_b, -omega, ignore=ign)
    f0, f1 = ign[:, 0], ign[:, 1]
    n0 = scene.face_n[f0]
    n1 = scene.face_n[np.where(f1 >= 0, f1, f0)]
    sil = silhouette_mask(scene.edge_sharp[e], n0, n1, omega)
    accepted = hit_l & hit_s & sil
    fl = np.maximum(f_l, 0)
    fs = np.maximum(f_s, 0)
    x_l = np.einsum("bk,bki->bi", b_l, scene.tri_p[fl])
    x_s = np.einsum("bk,bki->bi", b_s, scene.tri_p[fs])
    edir = _normalize(scene.edge_p[e, 1] - scene.edge_p[e, 0])
    m = np.cross(omega, edir)
    mlen = np.linalg.norm(m, axis=1)
    accepted &= mlen > 0
    mhat = m / np.where(mlen > 0, mlen, 1.0)[:, None]
    sigma = np.sign(_dot(m, scene.edge_third[e, 0] - x_b))
    with np.errstate(invalid="ignore", divide="ignore"):
        tt = np.where(accepted, t_l + t_s, 1.0)
        lam = np.where(accepted, t_l / tt, 0.0)
    v_l = np.einsum("bk,bkic->bic", b_l, scene.tri_vel[fl])
    v_s = np.einsum("bk,bkic->bic", b_s, scene.tri_vel[fs])
    w_mat = v_b - (1.0 - lam)[:, None, None] * v_l - lam[:, None, None] * v_s
    v_norm = sigma[:, None] * np.einsum("bi,bic->bc", mhat, w_mat)
    # x_S attached to its film point
    n_s = scene.face_n[fs]
    wc = _normalize(x_s - scene.cam_pos)
    rel = v_s - scene.cam_vel[None]
    with np.errstate(invalid="ignore", divide="ignore"):
        tdot = np.einsum("bi,bic->bc", n_s, rel) / _dot(n_s, wc)[:, None]
    v_att = scene.cam_vel[None] + wc[:, :, None] * tdot[:, None, :]
    w_att = v_b - (1.0 - lam)[:, None, None] * v_l - lam[:, None, None] * v_att
    v_norm_att = sigma[:, None] * np.einsum("bi,bic->bc", mhat, w_att)
    cos_l = np.abs(_dot(scene.face_n[fl], omega))
    cos_s = np.abs(_dot(n_s, omega))
    with np.errstate(invalid="ignore", divide="ignore"):
        jac = mlen * tt * tt / (cos_l * cos_s)
    accepted &= np.isfinite(jac) & np.all(np.isfinite(v_norm_att), axis=1)
    pdf = p_dir / scene.edge_total
    return BoundarySegmentSample(accepted, e, x_b, omega, x_l, x_s, f_l, f_s, b_l, b_s, pdf,
                                 jac, mlen, v_norm, v_norm_att)


def _emitted(scene, face, n_face, w_out):
    c = _dot(n_face, w_out)
    R = scene.face_emit[face]
    p = scene.face_cospow[face]
    cpos = np.maximum(c, 0.0)
    return np.where(c > 0, R * np.where(p > 0, cpos ** p, 1.0), 0.0)


def _light_entries(scene: Scene, seg: BoundarySegmentSample, rng, max_m: int):
    """Radiance leaving ``x_L`` toward ``x_S``: list of ``(value, dist, m, kernel_id)``."""
    B = len(seg.x_l)
    out = []
    fl = seg.face_l
    nL = scene.face_n[fl]
    Le = _emitted(scene, fl, nL, seg.omega)
    out.append((Le, np.zeros(B), 0, scene.face_kernel[fl]))
    cur = _Verts(seg.x_l, fl, seg.bary_l, np.ones(B, dtype=bool))
    out_dir = seg.omega.copy()
    beta = np.ones(B)
    dist = np.zeros(B)
    p_nee = 1.0 / scene.emitter_area
    for m in range(1, max_m + 1):
        u = rng.random((B, 5))
        fc = cur.face
        n = scene.face_n[fc]
        mats = scene.mats.take(fc)
        # next-event estimation
        fe, be, ye = scene.sample_emitter(u[:, 0], u[:, 1], u[:, 2])
        d = ye - cur.p
        r2 = _dot(d, d)
        r = np.sqrt(r2)
        wy = d / r[:, None]
        Ley = _emitted(scene, fe, scene.face_n[fe], -wy)
        cos_y = np.abs(_dot(scene.face_n[fe], wy))
        rho = bsdf_eval(mats, Dual(n, n=0), Dual(wy, n=0), Dual(out_dir, n=0)).v
        G = np.abs(_dot(n, wy)) * cos_y / r2
        p_b = bsdf_pdf(mats, n, out_dir, wy) * cos_y / r2
        val = beta * Ley * rho * G / (p_nee + p_b)
        live = cur.alive & (val > 0)
        if np.any(live):
            idx = np.nonzero(live)[0]
            occ = scene.occluded(cur.p[idx], ye[idx], ignore=np.stack([fc[idx], fe[idx]], axis=1))
            live[idx[occ]] = False
        out.append((np.where(live, val, 0.0), dist + r, m, scene.face_kernel[fe]))
        # BSDF sampling
        wo, pdf = bsdf_sample(mats, n, out_dir, u[:, 3], u[:, 4])
        ok = cur.alive & (pdf > 0) & (mats.albedo > 0)
        nxt = _trace_next(scene, cur, wo, ok)
        fh = np.maximum(nxt.face, 0)
        dh = nxt.p - cur.p
        th2 = np.maximum(_dot(dh, dh), 1e-300)
        th = np.sqrt(th2)
        rho_s = bsdf_eval(mats, Dual(n, n=0), Dual(wo, n=0), Dual(out_dir, n=0)).v
        Leh = _emitted(scene, fh, scene.face_n[fh], -wo)
        cos_h = np.abs(_dot(scene.face_n[fh], wo))
        Gh = np.abs(_dot(n, wo)) * cos_h / th2
        p_area = pdf * cos_h / th2
        with np.errstate(invalid="ignore", divide="ignore"):
            valh = beta * Leh * rho_s * Gh / (p_nee + p_area)
        hit_e = nxt.alive & (Leh > 0)
        out.append((np.where(hit_e, valh, 0.0), dist + th, m, scene.face_kernel[fh]))
        with np.errstate(invalid="ignore", divide="ignore"):
            beta = np.where(nxt.alive, beta * rho_s * np.abs(_dot(n, wo)) / np.where(pdf > 0, pdf, 1.0), 0.0)
        dist = dist + np.where(nxt.alive, th, 0.0)
        out_dir = -wo
        cur = _Verts(nxt.p, fh, nxt.bary, nxt.alive)
    return out


def _sensor_entries(scene: Scene, seg: BoundarySegmentSample, rng, max_m: int):
    """Importance arriving at ``x_S`` from ``x_L``: ``(value, dist, m, pixel)``."""
    B = len(seg.x_s)
    out = []
    cur = _Verts(seg.x_s, seg.face_s, seg.bary_s, np.ones(B, dtype=bool))
    in_dir = -seg.omega
    beta = np.ones(B)
    dist = np.zeros(B)
    for m in range(1, max_m + 1):
        fc = cur.face
        n = scene.face_n[fc]
        mats = scene.mats.take(fc)
        d = scene.cam_pos - cur.p
        r2 = _dot(d, d)
        r = np.sqrt(r2)
        wc = d / r[:, None]
        _, _, pix, _ = scene.project(cur.p)
        cos_t = -_dot(wc, scene.cam_forward)
        rho = bsdf_eval(mats, Dual(n, n=0), Dual(in_dir, n=0), Dual(wc, n=0)).v
        with np.errstate(invalid="ignore", divide="ignore"):
            We = 1.0 / (scene.pixel_area * cos_t ** 4)
            val = beta * rho * np.abs(_dot(n, wc)) * cos_t / r2 * We
        live = cur.alive & (pix >= 0) & (cos_t > 0) & (val > 0)
        if np.any(live):
            idx = np.nonzero(live)[0]
            occ = scene.occluded(cur.p[idx], np.broadcast_to(scene.cam_pos, (idx.size, 3)),
                                 ignore=fc[idx, None])
            live[idx[occ]] = False
        out.append((np.where(live, val, 0.0), dist + r, m, np.where(live, pix, 0)))
        if m == max_m:
            break
        u = rng.random((B, 2))
        wo, pdf = bsdf_sample(mats, n, in_dir, u[:, 0], u[:, 1])
        ok = cur.alive & (pdf > 0) & (mats.albedo > 0)
        nxt = _trace_next(scene, cur, wo, ok)
        rho_s = bsdf_eval(mats, Dual(n, n=0), Dual(in_dir, n=0), Dual(wo, n=0)).v
        with np.errstate(invalid="ignore", divide="ignore"):
            beta = np.where(nxt.alive, beta * rho_s * np.abs(_dot(n, wo)) / np.where(pdf > 0, pdf, 1.0), 0.0)
        dh = nxt.p - cur.p
        dist = dist + np.where(nxt.alive, np.sqrt(_dot(dh, dh)), 0.0)
        in_dir = -wo
        cur = _Verts(nxt.p, np.maximum(nxt.face, 0), nxt.bary, nxt.alive)
    return out


def _boundary_chunk(scene: Scene, rng, count: int, depth: int, norm: float, acc: _Accumulator):
    seg = sample_boundary_segment(scene, rng, count)
    if seg is None:
        return 0
    idx = np.nonzero(seg.accepted)[0]
    if idx.size == 0:
        return 0
    seg = seg.take(idx)
    lights = _light_entries(scene, seg, rng, depth - 2)
    sensors = _sensor_entries(scene, seg, rng, depth - 1)
    r_ls = np.linalg.norm(seg.x_s - seg.x_l, axis=1)
    scale = seg.cross_norm / (seg.pdf * norm)
    for lv, ld, lm, lk in lights:
        for sv, sd, sm, sp in sensors:
            if lm + 1 + sm > depth:
                continue
            H = lv * sv
            good = H != 0.0
            if not np.any(good):
                continue
            vn = seg.v_normal_attached if sm == 1 else seg.v_normal
            grad = (H * scale)[:, None] * vn
            tof = (ld + r_ls + sd) * scene.eta / scene.c
            acc.add(sp[good], lk[good], tof[good], None, None, grad[good])
    return int(idx.size)


def _film_edge_chunk(scene: Scene, rng, count: int, depth: int, norm: float, acc: _Accumulator):
    """Discontinuities of directly visible geometry, integrated along projected edges."""
    if scene.edge_total <= 0.0 or scene.n == 0:
        return 0
    u = rng.random((count, 2))
    e, x_b, v_b = _sample_edges(scene, u[:, 0], u[:, 1])
    fx, fy, pix, z = scene.project(x_b)
    ok = pix >= 0
    idx = np.nonzero(ok)[0]
    if idx.size == 0:
        return 0
    x_b, v_b, e, fx, fy, pix = x_b[idx], v_b[idx], e[idx], fx[idx], fy[idx], pix[idx]
    d = x_b - scene.cam_pos
    dist = np.linalg.norm(d, axis=1)
    hit, _, _, _ = scene.intersect(np.broadcast_to(scene.cam_pos, d.shape), d / dist[:, None],
                                   tmax=dist * (1.0 - 1e-6), ignore=scene.edge_faces[e])
    vis = ~hit
    x_b, v_b, e, fx, fy, pix, d = x_b[vis], v_b[vis], e[vis], fx[vis], fy[vis], pix[vis], d[vis]
    if len(x_b) == 0:
        return 0
    f, r, up = scene.cam_forward, scene.cam_right, scene.cam_up
    zf = d @ f
    # Jacobian rows of the projection x -> (fx, fy)
    jx = (r[None] * zf[:, None] - (d @ r)[:, None] * f[None]) / (zf * zf)[:, None]
    jy = (up[None] * zf[:, None] - (d @ up)[:, None] * f[None]) / (zf * zf)[:, None]
    edir = _normalize(scene.edge_p[e, 1] - scene.edge_p[e, 0])
    tfx = _dot(jx, edir)
    tfy = _dot(jy, edir)
    tlen = np.sqrt(tfx * tfx + tfy * tfy)
    good = tlen > 0
    nfx = -tfy / np.where(good, tlen, 1.0)
    nfy = tfx / np.where(good, tlen, 1.0)
    rel = v_b - scene.cam_vel[None]
    udx = np.einsum("bi,bic->bc", jx, rel)
    udy = np.einsum("bi,bic->bc", jy, rel)
    vn = udx * nfx[:, None] + udy * nfy[:, None]
    w = vn * (tlen * scene.edge_total / (scene.pixel_area * norm))[:, None]
    w = np.where(good[:, None], w, 0.0)
    delta = 1e-4 * (2.0 * scene.half_h / scene.height)
    B = len(x_b)
    fx2 = np.concatenate([fx + delta * nfx, fx - delta * nfx])
    fy2 = np.concatenate([fy + delta * nfy, fy - delta * nfy])
    pix2 = np.concatenate([pix, pix])
    cw = np.concatenate([-w, w])
    _camera_pass(scene, fx2, fy2, pix2, rng, depth, acc, 1.0, derivs=False, chan_weight=cw)
    return int(B)


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def _chunk_rng(seed: int, stream: int, chunk: int):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream, chunk)))


def _interior_task(args):
    scene, seed, chunk, start, stop, spp, depth, derivs, temporal = args
    rng = _chunk_rng(seed, _STREAM_CAMERA, chunk)
    acc = _Accumulator(scene, scene.n if derivs else 0)
    P = scene.width * scene.height
    ids = np.arange(start, stop)
    pix = ids % P
    jit = rng.random((len(ids), 2))
    fx, fy = scene.pixel_film(pix, jit[:, 0], jit[:, 1])
    _camera_pass(scene, fx, fy, pix, rng, depth, acc, 1.0 / spp, derivs=derivs, temporal=temporal)
    acc.flush()
    return acc.value, acc.grad, {"camera_samples": len(ids), "nonfinite": acc.nonfinite}


def _boundary_task(args):
    scene, seed, chunk, count, depth, norm, film = args
    acc = _Accumulator(scene, scene.n)
    if film:
        n_acc = _film_edge_chunk(scene, _chunk_rng(seed, _STREAM_FILM_EDGE, chunk), count, depth, norm, acc)
        key = "film_edge_samples"
    else:
        n_acc = _boundary_chunk(scene, _chunk_rng(seed, _STREAM_BOUNDARY, chunk), count, depth, norm, acc)
        key = "boundary_accepted"
    acc.flush()
    return acc.value, acc.grad, {key: n_acc, "nonfinite": acc.nonfinite}


def default_workers() -> int:
    env = os.environ.get("TGRD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"TGRD_THREADS must be an integer, got {env!r}") from None
    return 1


def _run(tasks, fn, workers):
    if workers is None:
        workers = default_workers()
    if workers <= 1 or len(tasks) <= 1:
        results = [fn(t) for t in tasks]
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
            results = list(ex.map(fn, tasks))
    return results


def _merge(scene: Scene, results, n, stats=None):
    P = scene.width * scene.height
    Nf = scene.frames.n_frames
    value = np.zeros(P * Nf)
    grad = np.zeros((n, P * Nf))
    stats = dict(stats or {})
    # fixed summation order: chunk index, independent of worker count
    for v, g, st in results:
        value += v
        grad += g
        for k, x in st.items():
            stats[k] = stats.get(k, 0) + x
    H, W = scene.height, scene.width
    ch = grad.reshape(n, H, W, Nf)
    if n == scene.n:
        g = np.moveaxis(scene.channels_to_params(np.moveaxis(ch, 0, -1)), -1, 0).copy()
    else:
        g = np.zeros((len(scene.desc.parameters), H, W, Nf))
        ch = np.zeros((scene.n, H, W, Nf))
    hist = TransientHistogram(value.reshape(H, W, Nf), g, scene.frames, scene.c, ch, stats)
    if stats.get("nonfinite"):
        warnings.warn(f"{stats['nonfinite']} non-finite contributions were dropped", RuntimeWarning, stacklevel=3)
    return hist


def _as_scene(scene) -> Scene:
    if isinstance(scene, Scene):
        return scene
    return scene.build()


def _depth(scene: Scene, max_depth):
    d = scene.desc.defaults.max_depth if max_depth is None else int(max_depth)
    if d < 1:
        raise ValueError("max_depth must be >= 1")
    return d


def _interior(scene, spp, seed, max_depth, workers, derivs, temporal):
    scene = _as_scene(scene)
    if spp < 1:
        raise ValueError("spp must be >= 1")
    depth = _depth(scene, max_depth)
    total = scene.width * scene.height * spp
    tasks = []
    for c, start in enumerate(range(0, total, CHUNK)):
        tasks.append((scene, seed, c, start, min(total, start + CHUNK), spp, depth, derivs, temporal))
    res = _run(tasks, _interior_task, workers)
    hist = _merge(scene, res, scene.n if derivs else 0, {"spp_interior": spp})
    if not np.any(hist.intensity):
        warnings.warn("rendered histogram is entirely zero; check the temporal windows", RuntimeWarning, stacklevel=3)
    return hist


def render_forward(scene, frames: FrameSpec | None = None, spp: int = 16, seed: int = 0,
                   max_depth: int | None = None, workers: int | None = None) -> TransientHistogram:
    """Transient intensity histogram (gradient planes left at zero)."""
    scene = _with_frames(_as_scene(scene), frames)
    return _interior(scene, spp, seed, max_depth, workers, derivs=False, temporal=True)


def estimate_interior(scene, frames: FrameSpec | None = None, spp: int = 16, seed: int = 0,
                      max_depth: int | None = None, workers: int | None = None,
                      temporal: bool = True) -> TransientHistogram:
    """Intensity plus the interior derivative term.

    With ``temporal=False`` the contribution of the kernel's time derivative
    is omitted (used to check the steady-state limit).
    """
    scene = _with_frames(_as_scene(scene), frames)
    return _interior(scene, spp, seed, max_depth, workers, derivs=True, temporal=temporal)


def estimate_boundary(scene, frames: FrameSpec | None = None, spp: int = 16, seed: int = 0,
                      max_depth: int | None = None, workers: int | None = None,
                      film_edges: bool = True) -> TransientHistogram:
    """Boundary derivative term (intensity plane left at zero)."""
    scene = _with_frames(_as_scene(scene), frames)
    depth = _depth(scene, max_depth)
    P = scene.width * scene.height
    total = P * spp
    tasks = []
    if spp > 0 and scene.n > 0:
        for c, start in enumerate(range(0, total, CHUNK)):
            cnt = min(total, start + CHUNK) - start
            tasks.append((scene, seed, c, cnt, depth, float(total), False))
            if film_edges:
                tasks.append((scene, seed, c, cnt, depth, float(total), True))
    res = _run(tasks, _boundary_task, workers)
    hist = _merge(scene, res, scene.n, {"spp_boundary": spp, "boundary_samples": total if tasks else 0})
    return hist


def estimate_gradient(scene, frames: FrameSpec | None = None, spp_i: int = 16, spp_b: int = 16,
                      seed: int = 0, max_depth: int | None = None, workers: int | None = None,
                      boundary: bool = True) -> TransientHistogram:
    """Intensity with interior plus boundary gradients."""
    scene = _with_frames(_as_scene(scene), frames)
    h = estimate_interior(scene, None, spp_i, seed, max_depth, workers)
    if boundary and spp_b > 0:
        h = h + estimate_boundary(scene, None, spp_b, seed, max_depth, workers)
        # map summed channels once so parameter gradients stay exactly additive over bindings
        h.grad = np.moveaxis(scene.channels_to_params(np.moveaxis(h.channels, 0, -1)), -1, 0).copy()
    return h


def _with_frames(scene: Scene, frames: FrameSpec | None) -> Scene:
    if frames is None or frames == scene.frames:
        return scene
    desc = scene.desc.with_frames(frames)
    return Scene(desc, scene.theta)
