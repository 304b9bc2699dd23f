"""Scene description and its compiled, posed runtime form."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dual import Dual, cross, norm
from .geometry import (DEFAULT_DIHEDRAL_TOL, BindingKind, EdgeKind, Mesh, ParameterBinding,
                       classify_edges, pose_points)
from .temporal import ConstantKernel, CorrelatedTimeKernel, FrameSpec, TemporalProfile, correlate
from .transport import C_LIGHT, Bsdf, MaterialArrays

# Triangle block size for brute-force intersection.
_TRI_BLOCK = 64
_RAY_BLOCK = 16384


@dataclass(frozen=True)
class MeshInstance:
    mesh: Mesh
    material: Bsdf = Bsdf()
    radiance: float = 0.0
    cos_power: float = 0.0
    profile: TemporalProfile | None = None

    @property
    def is_emitter(self) -> bool:
        return self.radiance > 0.0


@dataclass(frozen=True)
class Camera:
    position: tuple
    look_at: tuple
    up: tuple = (0.0, 0.0, 1.0)
    fov: float = 45.0       # vertical, degrees
    width: int = 32
    height: int = 32

    def __post_init__(self):
        if not 0.0 < self.fov < 180.0:
            raise ValueError("fov must lie in (0, 180) degrees")
        if self.width < 1 or self.height < 1:
            raise ValueError("film resolution must be positive")
        f = np.subtract(self.look_at, self.position)
        if np.linalg.norm(f) == 0:
            raise ValueError("camera look_at coincides with its position")
        if np.linalg.norm(np.cross(f, self.up)) == 0:
            raise ValueError("camera up vector is parallel to the view direction")


@dataclass(frozen=True)
class Parameter:
    name: str
    value: float = 0.0
    lower: float = -math.inf
    upper: float = math.inf


@dataclass(frozen=True)
class EstimatorDefaults:
    spp_interior: int = 16
    spp_boundary: int = 16
    max_depth: int = 6
    seed: int = 0


@dataclass(frozen=True)
class SceneDescription:
    """Everything needed to build a :class:`Scene` for a given parameter vector."""

    meshes: tuple
    camera: Camera
    sensor_profile: TemporalProfile
    frames: FrameSpec
    parameters: tuple = ()
    bindings: tuple = ()
    eta: float = 1.0
    c: float = C_LIGHT
    defaults: EstimatorDefaults = EstimatorDefaults()
    dihedral_tol: float = DEFAULT_DIHEDRAL_TOL
    steady: bool = False

    def __post_init__(self):
        names = [m.mesh.name for m in self.meshes]
        if len(set(names)) != len(names):
            raise ValueError("mesh names must be unique")
        if not any(m.is_emitter for m in self.meshes):
            raise ValueError("scene needs at least one emitter")
        if self.sensor_profile.kind == "delta":
            raise ValueError("sensor response cannot be a Dirac delta")
        for b in self.bindings:
            if b.param < 0 or b.param >= len(self.parameters):
                raise ValueError(f"binding refers to unknown parameter {b.param}")
            if b.target not in names and b.target not in ("sensor", "medium"):
                raise ValueError(f"binding target {b.target!r} is not a mesh, 'sensor' or 'medium'")
        if self.frames.width != self.camera.width or self.frames.height != self.camera.height:
            raise ValueError("frame dimensions must match the camera film")

    @property
    def theta(self) -> np.ndarray:
        return np.array([p.value for p in self.parameters], dtype=np.float64)

    def with_theta(self, theta) -> "SceneDescription":
        theta = np.asarray(theta, dtype=np.float64)
        params = tuple(replace(p, value=float(t)) for p, t in zip(self.parameters, theta))
        return replace(self, parameters=params)

    def with_bindings(self, parameters, bindings) -> "SceneDescription":
        return replace(self, parameters=tuple(parameters), bindings=tuple(bindings))

    def with_frames(self, frames: FrameSpec, width=None, height=None) -> "SceneDescription":
        cam = replace(self.camera, width=width or frames.width, height=height or frames.height)
        return replace(self, camera=cam, frames=replace(frames, width=cam.width, height=cam.height))

    def steady_state(self) -> "SceneDescription":
        """Single-frame, time-independent variant.

        Each emitter contributes its total emitted energy (the integral of its
        profile) regardless of path length, which is the limit of summing a
        transient histogram whose frames tile the sensor response.
        """
        frames = FrameSpec(1, 1.0, 0.0, self.camera.width, self.camera.height)
        return replace(self, frames=frames, steady=True)

    def build(self, theta=None) -> "Scene":
        return Scene(self, self.theta if theta is None else np.asarray(theta, dtype=np.float64))


class Scene:
    """Posed scene at parameter vector ``theta`` with per-face derivative data.

    Derivative channels correspond one-to-one to bindings; a parameter's
    gradient is the sum of its bindings' channels (see :meth:`channels_to_params`).
    """

    def __init__(self, desc: SceneDescription, theta: np.ndarray):
        self.desc = desc
        self.theta = np.asarray(theta, dtype=np.float64)
        if self.theta.shape != (len(desc.parameters),):
            raise ValueError("theta has the wrong length")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta must be finite")
        self.bindings = list(desc.bindings)
        self.n = len(self.bindings)
        self.c = desc.c
        self.frames = desc.frames
        self._pose_meshes()
        self._pose_camera()
        self._pose_medium()
        self._build_edges()
        self._build_kernels()

    # -- construction --------------------------------------------------------
    def _pose_meshes(self):
        tri_p, tri_v, mats, emit, cpow, face_mesh = [], [], [], [], [], []
        self.meshes = []
        for mi, inst in enumerate(self.desc.meshes):
            ch = [i for i, b in enumerate(self.bindings) if b.target == inst.mesh.name]
            verts, vel = pose_points(inst.mesh.vertices, self.bindings, self.theta, ch)
            try:
                posed = inst.mesh.with_vertices(verts)
            except ValueError as exc:
                names = sorted({self.desc.parameters[self.bindings[c].param].name for c in ch})
                raise ValueError(f"posing mesh {inst.mesh.name!r} failed for parameters {names}: {exc}") from None
            self.meshes.append(posed)
            t = posed.triangles
            tri_p.append(verts[t])
            tri_v.append(vel[t])
            nf = len(t)
            mats.append(inst.material.arrays((nf,)))
            emit.append(np.full(nf, inst.radiance))
            cpow.append(np.full(nf, inst.cos_power))
            face_mesh.append(np.full(nf, mi))
        self.tri_p = np.concatenate(tri_p)
        self.tri_vel = np.concatenate(tri_v)
        self.face_mesh = np.concatenate(face_mesh)
        self.mats = MaterialArrays(*(np.concatenate([getattr(m, k) for m in mats])
                                     for k in ("kind", "albedo", "alpha", "f0")))
        self.face_emit = np.concatenate(emit)
        self.face_cospow = np.concatenate(cpow)
        self.n_faces = len(self.tri_p)
        a, b, c = (Dual(self.tri_p[:, k], self.tri_vel[:, k]) for k in range(3))
        cr = cross(b - a, c - a)
        J = norm(cr)
        nrm = cr / J.expand()
        self.face_n = nrm.v
        self.face_ngrad = nrm.g
        self.face_area = 0.5 * J.v
        self.face_rate = J.g / J.v[:, None]
        self.e1 = self.tri_p[:, 1] - self.tri_p[:, 0]
        self.e2 = self.tri_p[:, 2] - self.tri_p[:, 0]
        lo = self.tri_p.reshape(-1, 3).min(0)
        hi = self.tri_p.reshape(-1, 3).max(0)
        self.scale = float(max(np.linalg.norm(hi - lo), 1e-6))
        self.ray_eps = 1e-4 * self.scale
        em = np.nonzero(self.face_emit > 0)[0]
        self.emitter_faces = em
        ar = self.face_area[em]
        self.emitter_area = float(ar.sum())
        self.emitter_cdf = np.cumsum(ar) / ar.sum()

    def _pose_camera(self):
        cam = self.desc.camera
        ch = [i for i, b in enumerate(self.bindings) if b.target == "sensor"]
        base = np.asarray(cam.position, dtype=np.float64)
        pos, vel = pose_points(base, self.bindings, self.theta, ch)
        self.cam_pos = pos
        self.cam_vel = vel
        f = np.subtract(cam.look_at, cam.position).astype(np.float64)
        f /= np.linalg.norm(f)
        r = np.cross(f, np.asarray(cam.up, dtype=np.float64))
        r /= np.linalg.norm(r)
        u = np.cross(r, f)
        self.cam_forward, self.cam_right, self.cam_up = f, r, u
        self.width, self.height = cam.width, cam.height
        self.half_h = math.tan(math.radians(cam.fov) / 2.0)
        self.half_w = self.half_h * cam.width / cam.height
        self.pixel_area = (2 * self.half_w / cam.width) * (2 * self.half_h / cam.height)

    def _pose_medium(self):
        self.eta = float(self.desc.eta)
        self.eta_dot = np.zeros(self.n)
        for i, b in enumerate(self.bindings):
            if b.kind is BindingKind.REFRACTIVE_INDEX:
                self.eta = float(self.theta[b.param])
                self.eta_dot[i] = 1.0
        if not self.eta > 0:
            raise ValueError("refractive index must be positive")

    def _build_edges(self):
        ep, ev, ef, sharp, third = [], [], [], [], []
        offset = 0
        self.edge_classes = []
        for mi, (inst, mesh) in enumerate(zip(self.desc.meshes, self.meshes)):
            cls = classify_edges(mesh, self.desc.dihedral_tol)
            self.edge_classes.append(cls)
            ch = [i for i, b in enumerate(self.bindings) if b.target == inst.mesh.name]
            _, vel = pose_points(inst.mesh.vertices, self.bindings, self.theta, ch)
            for ec in cls:
                if ec.kind is EdgeKind.SMOOTH:
                    continue
                i0, i1 = mesh.edges[ec.edge]
                ep.append(mesh.vertices[[i0, i1]])
                ev.append(vel[[i0, i1]])
                faces = list(ec.faces) + [-1] * (2 - len(ec.faces))
                ef.append([f + offset if f >= 0 else -1 for f in faces])
                sharp.append(ec.kind is EdgeKind.SHARP)
                th = []
                for f in faces:
                    if f < 0:
                        th.append(np.full(3, np.nan))
                        continue
                    tri = mesh.triangles[f]
                    k = [v for v in tri if v != i0 and v != i1][0]
                    th.append(mesh.vertices[k])
                third.append(th)
            offset += mesh.n_faces
        if ep:
            self.edge_p = np.array(ep)
            self.edge_vel = np.array(ev)
            self.edge_faces = np.array(ef, dtype=np.int64)
            self.edge_sharp = np.array(sharp)
            self.edge_third = np.array(third)
            lens = np.linalg.norm(self.edge_p[:, 1] - self.edge_p[:, 0], axis=1)
            self.edge_len = lens
            self.edge_total = float(lens.sum())
            self.edge_cdf = np.cumsum(lens) / lens.sum()
        else:
            self.edge_p = np.zeros((0, 2, 3))
            self.edge_vel = np.zeros((0, 2, 3, self.n))
            self.edge_faces = np.zeros((0, 2), dtype=np.int64)
            self.edge_sharp = np.zeros(0, dtype=bool)
            self.edge_third = np.zeros((0, 2, 3))
            self.edge_len = np.zeros(0)
            self.edge_total = 0.0
            self.edge_cdf = np.zeros(0)

    def _build_kernels(self):
        self.kernels: list[CorrelatedTimeKernel] = []
        profiles = []
        self.face_kernel = np.full(self.n_faces, -1, dtype=np.int64)
        start = 0
        for inst, mesh in zip(self.desc.meshes, self.meshes):
            nf = mesh.n_faces
            if inst.is_emitter:
                prof = inst.profile or TemporalProfile.delta(0.0)
                if prof not in profiles:
                    profiles.append(prof)
                    if self.desc.steady:
                        self.kernels.append(ConstantKernel(prof.integral()))
                    else:
                        self.kernels.append(correlate(prof, self.desc.sensor_profile))
                self.face_kernel[start:start + nf] = profiles.index(prof)
            start += nf

    # -- parameters ------------------------------------------------------------
    def channels_to_params(self, grads: np.ndarray) -> np.ndarray:
        """Sum per-binding channels (last axis) into per-parameter gradients."""
        d = len(self.desc.parameters)
        out = np.zeros(grads.shape[:-1] + (d,))
        for i, b in enumerate(self.bindings):
            out[..., b.param] = out[..., b.param] + grads[..., i]
        return out

    # -- camera ----------------------------------------------------------------
    def camera_dual(self) -> Dual:
        return Dual(self.cam_pos, self.cam_vel)

    def film_to_dir(self, fx, fy):
        d = (self.cam_forward + fx[..., None] * self.cam_right + fy[..., None] * self.cam_up)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_film(self, pix, jx, jy):
        """Film coordinates of jittered points inside pixels (row-major index)."""
        row = pix // self.width
        col = pix % self.width
        fx = -self.half_w + (col + jx) * (2 * self.half_w / self.width)
        fy = self.half_h - (row + jy) * (2 * self.half_h / self.height)
        return fx, fy

    def project(self, x):
        """Film coordinates, pixel index (-1 outside) and depth of world points."""
        d = x - self.cam_pos
        z = d @ self.cam_forward
        with np.errstate(divide="ignore", invalid="ignore"):
            fx = (d @ self.cam_right) / z
            fy = (d @ self.cam_up) / z
        col = np.floor((fx + self.half_w) / (2 * self.half_w) * self.width)
        row = np.floor((self.half_h - fy) / (2 * self.half_h) * self.height)
        ok = (z > 0) & (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)
        pix = np.where(ok, row * self.width + col, -1)
        return fx, fy, np.nan_to_num(pix, nan=-1).astype(np.int64), z

    # -- surface data ----------------------------------------------------------
    def position_dual(self, face, bary, p=None) -> Dual:
        """Material-point position with its per-channel velocity."""
        vel = np.einsum("bk,bkic->bic", bary, self.tri_vel[face])
        if p is None:
            p = np.einsum("bk,bki->bi", bary, self.tri_p[face])
        return Dual(p, vel)

    def normal_dual(self, face) -> Dual:
        return Dual(self.face_n[face], self.face_ngrad[face])

    def attached_dual(self, face, bary, p) -> Dual:
        """Position of a camera-ray hit that stays attached to its film point."""
        v_mat = np.einsum("bk,bkic->bic", bary, self.tri_vel[face])
        n = self.face_n[face]
        w = p - self.cam_pos
        w = w / np.linalg.norm(w, axis=-1, keepdims=True)
        rel = v_mat - self.cam_vel[None]
        ndw = np.einsum("bi,bi->b", n, w)
        tdot = np.einsum("bi,bic->bc", n, rel) / ndw[:, None]
        return Dual(p, self.cam_vel[None] + w[:, :, None] * tdot[:, None, :])

    # -- ray queries -----------------------------------------------------------
    def intersect(self, o, d, tmax=None, ignore=None):
        """Closest hit along rays ``o + t d`` with ``eps < t < tmax``.

        ``ignore`` is an ``(N, m)`` array of face ids to skip (-1 for none).
        Returns ``(hit, t, face, bary)``.
        """
        o = np.asarray(o, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        N = len(o)
        best_t = np.full(N, np.inf) if tmax is None else np.asarray(tmax, dtype=np.float64).copy()
        best_f = np.full(N, -1, dtype=np.int64)
        best_u = np.zeros(N)
        best_v = np.zeros(N)
        eps = self.ray_eps
        for r0 in range(0, N, _RAY_BLOCK):
            rs = slice(r0, min(N, r0 + _RAY_BLOCK))
            ox, oy, oz = (o[rs, i:i + 1] for i in range(3))
            dx, dy, dz = (d[rs, i:i + 1] for i in range(3))
            ign = None if ignore is None else ignore[rs]
            bt = best_t[rs]
            for f0 in range(0, self.n_faces, _TRI_BLOCK):
                fs = slice(f0, min(self.n_faces, f0 + _TRI_BLOCK))
                p0 = self.tri_p[fs, 0]
                e1 = self.e1[fs]
                e2 = self.e2[fs]
                px = dy * e2[:, 2] - dz * e2[:, 1]
                py = dz * e2[:, 0] - dx * e2[:, 2]
                pz = dx * e2[:, 1] - dy * e2[:, 0]
                det = e1[:, 0] * px + e1[:, 1] * py + e1[:, 2] * pz
                with np.errstate(divide="ignore", invalid="ignore"):
                    inv = 1.0 / det
                    tx = ox - p0[:, 0]
                    ty = oy - p0[:, 1]
                    tz = oz - p0[:, 2]
                    u = (tx * px + ty * py + tz * pz) * inv
                    qx = ty * e1[:, 2] - tz * e1[:, 1]
                    qy = tz * e1[:, 0] - tx * e1[:, 2]
                    qz = tx * e1[:, 1] - ty * e1[:, 0]
                    v = (dx * qx + dy * qy + dz * qz) * inv
                    t = (e2[:, 0] * qx + e2[:, 1] * qy + e2[:, 2] * qz) * inv
                    ok = (det != 0.0) & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > eps) & (t < bt[:, None])
                if ign is not None:
                    fid = np.arange(fs.start, fs.stop)
                    for j in range(ign.shape[1]):
                        ok &= fid[None, :] != ign[:, j:j + 1]
                t = np.where(ok, t, np.inf)
                j = np.argmin(t, axis=1)
                tj = t[np.arange(len(j)), j]
                better = tj < bt
                if np.any(better):
                    idx = np.nonzero(better)[0]
                    gi = idx + r0
                    best_t[gi] = tj[idx]
                    best_f[gi] = j[idx] + f0
                    best_u[gi] = u[idx, j[idx]]
                    best_v[gi] = v[idx, j[idx]]
                    bt = best_t[rs]
        hit = best_f >= 0
        bary = np.stack([1.0 - best_u - best_v, best_u, best_v], axis=1)
        return hit, best_t, best_f, bary

    def occluded(self, a, b, ignore=None):
        """True where the open segment ``(a, b)`` is blocked."""
        d = b - a
        dist = np.linalg.norm(d, axis=1)
        w = d / np.where(dist > 0, dist, 1.0)[:, None]
        hit, _, _, _ = self.intersect(a, w, tmax=dist - self.ray_eps, ignore=ignore)
        return hit

    def visible(self, a, b, ignore=None):
        return ~self.occluded(np.atleast_2d(a), np.atleast_2d(b), ignore)

    def emitter_direction_pdf(self, o, d):
        """Solid-angle density of reaching direction ``d`` from ``o`` by uniform emitter-area sampling.

        Every emitter triangle crossed by the full ray counts, not just the first.
        """
        o = np.asarray(o, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        if self.emitter_area <= 0.0:
            return np.zeros(len(o))
        f = self.emitter_faces
        p0 = self.tri_p[f, 0]
        e1 = self.e1[f]
        e2 = self.e2[f]
        pv = np.cross(d[:, None, :], e2[None])
        det = np.einsum("fi,bfi->bf", e1, pv)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tv = o[:, None, :] - p0[None]
            u = np.einsum("bfi,bfi->bf", tv, pv) * inv
            qv = np.cross(tv, e1[None])
            v = np.einsum("bi,bfi->bf", d, qv) * inv
            t = np.einsum("fi,bfi->bf", e2, qv) * inv
            cos = np.abs(d @ self.face_n[f].T)
            ok = (det != 0.0) & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > self.ray_eps) & (cos > 0)
            dens = np.where(ok, t * t / np.where(ok, cos, 1.0), 0.0)
        return dens.sum(axis=1) / self.emitter_area

    def sample_emitter(self, u0, u1, u2):
        """Uniform-area point on the emitters: ``(face, bary, p)``; pdf is ``1/emitter_area``."""
        k = np.minimum(np.searchsorted(self.emitter_cdf, u0, side="right"), len(self.emitter_cdf) - 1)
        face = self.emitter_faces[k]
        su = np.sqrt(u1)
        bary = np.stack([1.0 - su, su * (1.0 - u2), su * u2], axis=1)
        p = np.einsum("bk,bki->bi", bary, self.tri_p[face])
        return face, bary, p
