"""Built-in scenes at desk scale.

The builders return :class:`~difftransient.scene.SceneDescription` objects.
``REFERENCE_SETTINGS`` records sample counts and frame layouts of the
full-size reference renders these scenes stand in for; they are far beyond a
desk budget and are kept for documentation and for the CLI ``--reference``
flag.
"""
from __future__ import annotations

import numpy as np

from .geometry import BindingKind, Mesh, ParameterBinding
from .scene import Camera, EstimatorDefaults, MeshInstance, Parameter, SceneDescription
from .temporal import FrameSpec, TemporalProfile
from .transport import Bsdf

REFERENCE_SETTINGS = {
    "egg": {"spp_interior": 410, "spp_boundary": 919, "frames": 1000, "dt": 20.0},
    "tower": {"spp_interior": 819, "spp_boundary": 1720, "frames": 500, "dt": 10.0},
    "teapot": {"spp_interior": 683, "spp_boundary": 1382, "frames": 600, "dt": 5.0},
    "coffee": {"spp_interior": 41, "spp_boundary": 0, "iterations": 19, "lr": 0.07},
}


def quad(name, center, u, v, flip=False) -> Mesh:
    """Rectangle ``center +- u +- v``; its normal is ``u x v`` (or the reverse)."""
    c, u, v = (np.asarray(a, dtype=np.float64) for a in (center, u, v))
    verts = np.array([c - u - v, c + u - v, c + u + v, c - u + v])
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    if flip:
        tris = tris[:, ::-1]
    return Mesh(verts, tris, name)


def box(name, center, half) -> Mesh:
    """Axis-aligned box with outward normals (12 triangles)."""
    c = np.asarray(center, dtype=np.float64)
    h = np.broadcast_to(np.asarray(half, dtype=np.float64), (3,))
    corners = np.array([[x, y, z] for z in (-1, 1) for y in (-1, 1) for x in (-1, 1)], dtype=np.float64)
    verts = c + corners * h
    # vertex index = x + 2y + 4z with x,y,z in {0,1}
    faces = [
        (0, 2, 3, 1),  # z-
        (4, 5, 7, 6),  # z+
        (0, 1, 5, 4),  # y-
        (2, 6, 7, 3),  # y+
        (0, 4, 6, 2),  # x-
        (1, 3, 7, 5),  # x+
    ]
    tris = []
    for a, b, cc, d in faces:
        tris += [[a, b, cc], [a, cc, d]]
    return Mesh(verts, np.array(tris), name)


def icosphere(name, center, radius, subdivisions=1) -> Mesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    pts = np.asarray(center) + radius * np.array(verts)
    return Mesh(pts, np.array(faces), name)


def _box_kernel_profiles(dt):
    """Emitter pulse and sensor window of width ``dt``; frames then tile exactly."""
    return TemporalProfile.box(0.0, dt, 1.0 / dt), TemporalProfile.box(0.0, dt, 1.0)


def smooth_scene(width=64, height=64, n_frames=100, max_depth=2) -> SceneDescription:
    """Floor lit by a small quad light above and behind the camera.

    One parameter translates the light along x.  No moving edge is visible
    and no occluder exists, so the boundary term vanishes.
    """
    dt = 0.04
    L = TemporalProfile.gaussian(0.0, dt, 1.0)
    W = TemporalProfile.box(0.0, dt, 1.0)
    floor = quad("floor", (0, 0, 0), (1.0, 0, 0), (0, 1.0, 0))
    # 10 cm light: its time-of-flight spread stays within a few pulse widths
    light = quad("light", (0.3, 0.0, 1.0), (0.05, 0, 0), (0, 0.05, 0), flip=True)
    meshes = (MeshInstance(floor, Bsdf("lambertian", 0.8)),
              MeshInstance(light, Bsdf("lambertian", 0.0), radiance=100.0, profile=L))
    cam = Camera((0.0, 0.0, 0.8), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 50.0, width, height)
    frames = FrameSpec(n_frames, dt, 5.6, width, height)
    params = (Parameter("light_x", 0.0),)
    binds = (ParameterBinding(0, "light", BindingKind.TRANSLATION, (1.0, 0.0, 0.0)),)
    return SceneDescription(meshes, cam, W, frames, params, binds,
                            defaults=EstimatorDefaults(64, 0, max_depth, 0))


def occluder_scene(width=32, height=32, n_frames=60, max_depth=2) -> SceneDescription:
    """Floor, downward-facing light and a square occluder translating along x."""
    dt = 0.05
    L = TemporalProfile.gaussian(0.0, dt, 1.0)
    W = TemporalProfile.box(0.0, dt, 1.0)
    floor = quad("floor", (0, 0, 0), (1.0, 0, 0), (0, 1.0, 0))
    light = quad("light", (0.0, 0.0, 2.0), (0.4, 0, 0), (0, 0.4, 0), flip=True)
    occ = quad("occluder", (0.0, 0.0, 1.0), (0.25, 0, 0), (0, 0.25, 0))
    meshes = (MeshInstance(floor, Bsdf("lambertian", 0.8)),
              MeshInstance(light, Bsdf("lambertian", 0.0), radiance=2.0, profile=L),
              MeshInstance(occ, Bsdf("lambertian", 0.5)))
    cam = Camera((0.0, 0.0, 0.9), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 70.0, width, height)
    tof_min = (2.0 + 0.9) / 0.299792458
    frames = FrameSpec(n_frames, dt, tof_min - 0.2, width, height)
    params = (Parameter("occluder_x", 0.0),)
    binds = (ParameterBinding(0, "occluder", BindingKind.TRANSLATION, (1.0, 0.0, 0.0)),)
    return SceneDescription(meshes, cam, W, frames, params, binds,
                            defaults=EstimatorDefaults(64, 64, max_depth, 0))


def cube_scene() -> SceneDescription:
    """Unit cube above a floor, used for silhouette checks."""
    floor = quad("floor", (0, 0, -1.0), (3.0, 0, 0), (0, 3.0, 0))
    cube = box("cube", (0.0, 0.0, 0.0), 0.5)
    light = quad("light", (0.0, 0.0, 3.0), (0.5, 0, 0), (0, 0.5, 0), flip=True)
    dt = 0.1
    L, W = _box_kernel_profiles(dt)
    meshes = (MeshInstance(floor, Bsdf("lambertian", 0.8)), MeshInstance(cube, Bsdf("lambertian", 0.6)),
              MeshInstance(light, Bsdf("lambertian", 0.0), radiance=3.0, profile=L))
    cam = Camera((3.0, -3.0, 2.5), (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 40.0, 16, 16)
    frames = FrameSpec(40, dt, 20.0, 16, 16)
    params = (Parameter("cube_z", 0.0),)
    binds = (ParameterBinding(0, "cube", BindingKind.TRANSLATION, (0.0, 0.0, 1.0)),)
    return SceneDescription(meshes, cam, W, frames, params, binds,
                            defaults=EstimatorDefaults(16, 16, 3, 0))


def light_translation_scene(width=16, height=16, n_frames=40, offset=0.2) -> tuple[SceneDescription, float]:
    """Toy inverse problem: recover a light's y position.

    Returns the scene at the perturbed start and the ground-truth parameter.
    """
    dt = 0.08
    L, W = _box_kernel_profiles(dt)
    floor = quad("floor", (0, 0, 0), (1.0, 0, 0), (0, 1.0, 0))
    light = quad("light", (0.0, 0.0, 1.0), (0.25, 0, 0), (0, 0.25, 0), flip=True)
    meshes = (MeshInstance(floor, Bsdf("lambertian", 0.8)),
              MeshInstance(light, Bsdf("lambertian", 0.0), radiance=4.0, profile=L))
    cam = Camera((0.0, 0.0, 0.8), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 60.0, width, height)
    frames = FrameSpec(n_frames, dt, 5.6, width, height)
    params = (Parameter("light_y", offset, -1.0, 1.0),)
    binds = (ParameterBinding(0, "light", BindingKind.TRANSLATION, (0.0, 1.0, 0.0)),)
    desc = SceneDescription(meshes, cam, W, frames, params, binds,
                            defaults=EstimatorDefaults(8, 0, 2, 0))
    return desc, 0.0


def nlos_scene(width=32, height=32, n_frames=200, start=(0.08, -0.08, 0.08), hidden_center=(0.55, -0.35, 0.0),
               hidden_half=0.25, light_x=-0.45, fov=36.0) -> tuple[SceneDescription, np.ndarray]:
    """Reduced non-line-of-sight tracking setup.

    The camera sees only the central part of a relay wall at ``y = 0``.  A
    small light sits in the wall plane outside the camera's view and faces
    away from it, so the visible wall is lit only by light returning from a
    hidden patch that lies outside the view frustum.  Three parameters
    translate the patch along x, y and z; the ground truth is the origin.
    """
    dt = 0.03
    L = TemporalProfile.gaussian(0.0, 0.2, 1.0)
    W = TemporalProfile.box(0.0, dt, 1.0)
    wall = quad("wall", (0, 0, 0), (1.0, 0, 0), (0, 0, 1.0), flip=True)
    light = quad("light", (light_x, -0.01, 0.0), (0.05, 0, 0), (0, 0, 0.05))
    c = np.asarray(hidden_center, dtype=np.float64)
    to_light = np.array([light_x, 0.0, 0.0]) - c
    n = to_light / np.linalg.norm(to_light) + np.array([0.0, 1.0, 0.0])
    n /= np.linalg.norm(n)
    u = np.cross(n, [0.0, 0.0, 1.0])
    u *= hidden_half / np.linalg.norm(u)
    v = np.array([0.0, 0.0, hidden_half])
    hidden = quad("hidden", c, u, v, flip=bool(np.dot(np.cross(u, v), n) < 0))
    meshes = (MeshInstance(wall, Bsdf("lambertian", 0.8)),
              MeshInstance(light, Bsdf("lambertian", 0.0), radiance=50.0, profile=L),
              MeshInstance(hidden, Bsdf("lambertian", 0.9)))
    cam = Camera((0.0, -1.2, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), fov, width, height)
    frames = FrameSpec(n_frames, dt, 7.5, width, height)
    truth = np.zeros(3)
    params = (Parameter("hidden_x", start[0], -0.3, 0.3), Parameter("hidden_y", start[1], -0.3, 0.3),
              Parameter("hidden_z", start[2], -0.3, 0.3))
    binds = (ParameterBinding(0, "hidden", BindingKind.TRANSLATION, (1.0, 0.0, 0.0)),
             ParameterBinding(1, "hidden", BindingKind.TRANSLATION, (0.0, 1.0, 0.0)),
             ParameterBinding(2, "hidden", BindingKind.TRANSLATION, (0.0, 0.0, 1.0)))
    desc = SceneDescription(meshes, cam, W, frames, params, binds,
                            defaults=EstimatorDefaults(64, 0, 3, 0))
    return desc, truth


_BUILDERS = {
    "smooth": smooth_scene,
    "occluder": occluder_scene,
    "cube": cube_scene,
    "light_translation": lambda: light_translation_scene()[0],
    "nlos": lambda: nlos_scene()[0],
}
_YAML = ("egg", "tower", "teapot", "coffee")
PRESET_NAMES = tuple(sorted(_YAML + tuple(_BUILDERS)))


def preset_path(name: str):
    """Filesystem path of a shipped YAML preset."""
    from importlib.resources import files

    return files("difftransient") / "presets" / f"{name}.yaml"


def load_preset(name: str) -> SceneDescription:
    """Scene description of a named preset (see ``PRESET_NAMES``)."""
    if name in _BUILDERS:
        return _BUILDERS[name]()
    if name in _YAML:
        from .scenefile import parse_scene

        p = preset_path(name)
        return parse_scene(p.read_text(encoding="utf-8"), f"preset:{name}")
    raise KeyError(name)
