"""Triangle meshes, edge classification and parameter-driven vertex motion."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dual import Dual


class MeshError(ValueError):
    pass


def _face_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = vertices[triangles]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


@dataclass
class Mesh:
    """Indexed triangle mesh with undirected edge adjacency.

    ``edge_faces[e]`` holds the one or two faces incident to ``edges[e]``; the
    second slot is ``-1`` for boundary edges.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    name: str = "mesh"
    face_normals: np.ndarray = field(init=False)
    edges: np.ndarray = field(init=False)
    edge_faces: np.ndarray = field(init=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        nv = len(self.vertices)
        if len(self.triangles) == 0:
            raise MeshError(f"mesh {self.name!r} has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= nv:
            raise MeshError(f"mesh {self.name!r} has out-of-range vertex indices")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError(f"mesh {self.name!r} has non-finite vertices")
        p = self.vertices[self.triangles]
        cr = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        area2 = np.linalg.norm(cr, axis=1)
        if np.any(area2 <= 1e-14 * max(1.0, float(np.abs(self.vertices).max()) ** 2)):
            bad = int(np.argmin(area2))
            raise MeshError(f"mesh {self.name!r}: triangle {bad} is degenerate")
        self.face_normals = cr / area2[:, None]
        self._build_edges()

    def _build_edges(self):
        t = self.triangles
        pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        faces = np.tile(np.arange(len(t)), 3)
        key = np.sort(pairs, axis=1)
        order = np.lexsort((key[:, 1], key[:, 0]))
        key, faces = key[order], faces[order]
        uniq, start, counts = np.unique(key, axis=0, return_index=True, return_counts=True)
        if np.any(counts > 2):
            e = uniq[np.argmax(counts)]
            raise MeshError(f"mesh {self.name!r}: edge ({e[0]}, {e[1]}) is shared by more than two faces")
        ef = np.full((len(uniq), 2), -1, dtype=np.int64)
        ef[:, 0] = faces[start]
        two = counts == 2
        ef[two, 1] = faces[start[two] + 1]
        self.edges = uniq.astype(np.int64)
        self.edge_faces = ef

    @property
    def n_faces(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.triangles, self.name)


def parse_obj(text: str, name: str = "mesh") -> Mesh:
    """Parse the ``v``/``f`` subset of Wavefront OBJ (triangles only)."""
    verts, tris = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) < 4:
                    raise ValueError
            elif tag == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise MeshError(f"{name}:{lineno}: only triangular faces are supported")
                tris.append([i - 1 if i > 0 else len(verts) + i for i in idx])
            elif tag in ("vn", "vt", "o", "g", "s", "usemtl", "mtllib"):
                continue
            else:
                raise MeshError(f"{name}:{lineno}: unsupported OBJ statement {tag!r}")
        except ValueError as exc:
            if isinstance(exc, MeshError):
                raise
            raise MeshError(f"{name}:{lineno}: malformed {tag!r} line") from None
    return Mesh(np.array(verts), np.array(tris), name)


def load_obj(path, name: str | None = None) -> Mesh:
    path = Path(path)
    return parse_obj(path.read_text(encoding="utf-8"), name or path.stem)


def write_obj(mesh: Mesh) -> str:
    lines = [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# edges
# ---------------------------------------------------------------------------

class EdgeKind(enum.Enum):
    BOUNDARY = "boundary"
    SHARP = "sharp"
    SMOOTH = "smooth"


@dataclass(frozen=True)
class EdgeClass:
    kind: EdgeKind
    edge: int
    faces: tuple
    normals: tuple          # one or two unit normals, matching ``faces``


DEFAULT_DIHEDRAL_TOL = 1e-4


def classify_edges(mesh: Mesh, dihedral_tol: float = DEFAULT_DIHEDRAL_TOL) -> list[EdgeClass]:
    out = []
    n = mesh.face_normals
    for e, (f0, f1) in enumerate(mesh.edge_faces):
        if f1 < 0:
            out.append(EdgeClass(EdgeKind.BOUNDARY, e, (int(f0),), (n[f0].copy(),)))
            continue
        c = float(np.clip(np.dot(n[f0], n[f1]), -1.0, 1.0))
        angle = math.acos(c)
        kind = EdgeKind.SHARP if angle > dihedral_tol else EdgeKind.SMOOTH
        out.append(EdgeClass(kind, e, (int(f0), int(f1)), (n[f0].copy(), n[f1].copy())))
    return out


def is_silhouette(edge: EdgeClass, x, y) -> bool:
    """Whether a segment ``x -> y`` grazing ``edge`` sees a visibility jump there."""
    if edge.kind is EdgeKind.BOUNDARY:
        return True
    if edge.kind is EdgeKind.SMOOTH:
        return False
    d = np.asarray(y, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return float(np.dot(edge.normals[0], d)) * float(np.dot(edge.normals[1], d)) <= 0.0


def silhouette_mask(kind_sharp, n0, n1, d):
    """Vectorized :func:`is_silhouette`; ``kind_sharp`` False means boundary edge."""
    s = (np.einsum("...i,...i->...", n0, d) * np.einsum("...i,...i->...", n1, d)) <= 0.0
    return np.where(kind_sharp, s, True)


# ---------------------------------------------------------------------------
# parameter bindings
# ---------------------------------------------------------------------------

class BindingKind(enum.Enum):
    TRANSLATION = "translation"
    ROTATION = "rotation"
    REFRACTIVE_INDEX = "refractive_index"


def rotation_matrix(axis, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


@dataclass(frozen=True)
class ParameterBinding:
    """How parameter ``param`` moves ``target``.

    ``target`` is a mesh name, ``"sensor"`` or ``"medium"``.  Translations move
    the target by ``theta * axis``; rotations turn it by ``theta`` radians about
    the line through ``point`` along ``axis``; refractive-index bindings set the
    ambient index to ``theta``.
    """

    param: int
    target: str
    kind: BindingKind
    axis: tuple = (0.0, 0.0, 0.0)
    point: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "kind", BindingKind(self.kind))
        ax = np.asarray(self.axis, dtype=np.float64)
        if self.kind in (BindingKind.TRANSLATION, BindingKind.ROTATION):
            nrm = np.linalg.norm(ax)
            if nrm == 0:
                raise ValueError("binding axis must be non-zero")
            if self.kind is BindingKind.ROTATION:
                ax = ax / nrm
        object.__setattr__(self, "axis", tuple(float(x) for x in ax))
        object.__setattr__(self, "point", tuple(float(x) for x in self.point))
        if self.kind is BindingKind.REFRACTIVE_INDEX and self.target != "medium":
            raise ValueError("refractive-index bindings must target the medium")
        if self.target == "sensor" and self.kind is not BindingKind.TRANSLATION:
            raise ValueError("the sensor supports translation bindings only")

    @property
    def geometric(self) -> bool:
        return self.kind is not BindingKind.REFRACTIVE_INDEX

    def apply(self, x: np.ndarray, theta: float) -> np.ndarray:
        if self.kind is BindingKind.TRANSLATION:
            return x + theta * np.asarray(self.axis)
        if self.kind is BindingKind.ROTATION:
            p = np.asarray(self.point)
            return (x - p) @ rotation_matrix(self.axis, theta).T + p
        return x

    def linear_part(self, theta: float) -> np.ndarray:
        if self.kind is BindingKind.ROTATION:
            return rotation_matrix(self.axis, theta)
        return np.eye(3)

    def velocity(self, x: np.ndarray) -> np.ndarray:
        """Velocity ``dx/dtheta`` at already-transformed positions ``x``."""
        if self.kind is BindingKind.TRANSLATION:
            return np.broadcast_to(np.asarray(self.axis), x.shape).copy()
        if self.kind is BindingKind.ROTATION:
            return np.cross(np.asarray(self.axis), x - np.asarray(self.point))
        return np.zeros_like(x)


def pose_points(base: np.ndarray, bindings, theta, channels) -> tuple[np.ndarray, np.ndarray]:
    """Apply bindings in order; return positions and per-channel velocities.

    ``bindings`` is the full binding list, ``channels`` the indices of those
    that act on this target.  The velocity array has shape ``base.shape + (n,)``
    with ``n = len(bindings)``; channels that do not act here stay zero.
    """
    x = np.asarray(base, dtype=np.float64).copy()
    vel = np.zeros(x.shape + (len(bindings),))
    for c in channels:
        b = bindings[c]
        th = float(theta[b.param])
        x = b.apply(x, th)
        M = b.linear_part(th)
        # earlier velocities are carried along by this transform's linear part
        vel = np.einsum("ij,...jc->...ic", M, vel)
        vel[..., c] = b.velocity(x)
    return x, vel


# ---------------------------------------------------------------------------
# surface points
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SurfacePoint:
    position: np.ndarray
    normal: np.ndarray
    face: int
    bary: np.ndarray

    @staticmethod
    def on_face(mesh: Mesh, face: int, bary) -> "SurfacePoint":
        b = np.asarray(bary, dtype=np.float64)
        if b.shape != (3,) or np.any(b < -1e-12) or abs(b.sum() - 1.0) > 1e-9:
            raise ValueError("barycentric coordinates must be non-negative and sum to one")
        p = b @ mesh.vertices[mesh.triangles[face]]
        return SurfacePoint(p, mesh.face_normals[face].copy(), int(face), b)


def mesh_velocities(mesh: Mesh, bindings, theta) -> np.ndarray:
    """Per-vertex velocities ``(V, 3, n)`` of an already-posed mesh."""
    ch = [i for i, b in enumerate(bindings) if b.target == mesh.name and b.geometric]
    n = len(bindings)
    vel = np.zeros(mesh.vertices.shape + (n,))
    if not ch:
        return vel
    # reconstruct the intermediate positions by inverting the later transforms
    x = mesh.vertices.copy()
    M_after = np.eye(3)
    for c in reversed(ch):
        b = bindings[c]
        th = float(theta[b.param])
        vel[..., c] = b.velocity(x) @ M_after.T
        M = b.linear_part(th)
        M_after = M_after @ M
        # undo transform c to get positions before it
        if b.kind is BindingKind.TRANSLATION:
            x = x - th * np.asarray(b.axis)
        else:
            p = np.asarray(b.point)
            x = (x - p) @ M + p
    return vel


def vertex_velocity(mesh: Mesh, p: SurfacePoint, bindings, theta=None) -> np.ndarray:
    """``3 x n`` velocity of a surface point, one column per binding."""
    if theta is None:
        theta = np.zeros(max((b.param for b in bindings), default=-1) + 1)
    vel = mesh_velocities(mesh, bindings, theta)
    tri = mesh.triangles[p.face]
    return np.einsum("k,kic->ic", p.bary, vel[tri])


def triangle_dual(p: np.ndarray, v: np.ndarray):
    """Triangle corners as duals: ``p`` is (..., 3, 3), ``v`` (..., 3, 3, n)."""
    return [Dual(p[..., k, :], v[..., k, :, :]) for k in range(3)]


def jacobian_and_derivative(mesh: Mesh, p: SurfacePoint, bindings, theta=None) -> Dual:
    """Barycentric-map Jacobian ``2 * area`` of ``p``'s face and its derivative."""
    from .dual import cross, norm
    if theta is None:
        theta = np.zeros(max((b.param for b in bindings), default=-1) + 1)
    vel = mesh_velocities(mesh, bindings, theta)
    tri = mesh.triangles[p.face]
    a, b, c = triangle_dual(mesh.vertices[tri], vel[tri])
    return norm(cross(b - a, c - a))
