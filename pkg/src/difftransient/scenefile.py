"""YAML scene files.

Example::

    version: 1
    medium: {eta: 1.0}
    materials:
      white: {type: lambertian, albedo: 0.8}
    meshes:
      - name: floor
        quad: {center: [0, 0, 0], u: [1, 0, 0], v: [0, 1, 0]}
        material: white
      - name: light
        quad: {center: [0, 0, 1], u: [0.25, 0, 0], v: [0, 0.25, 0], flip: true}
        emitter: {radiance: 4.0, profile: {kind: gaussian, mean: 0.0, sigma: 0.04}}
    sensor:
      camera: {position: [0, 0, 0.8], look_at: [0, 0, 0], up: [0, 1, 0], fov: 50, width: 32, height: 32}
      profile: {kind: box, t_start: 0.0, t_end: 0.04}
      frames: {count: 100, dt: 0.04, t0: 5.6}
    parameters:
      - name: light_x
        value: 0.0
        bindings:
          - {target: light, kind: translation, axis: [1, 0, 0]}
    estimator: {spp_interior: 64, spp_boundary: 64, max_depth: 2, seed: 0}

A mesh gives exactly one geometry source: ``file`` (OBJ path relative to the
scene file), ``quad``, ``box``, ``sphere`` or inline ``vertices`` plus
``triangles``.  An optional ``transform`` (``scale``, ``rotate``,
``translate``, applied in that order) is baked into the vertices.
"""
from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np
import yaml

from .geometry import BindingKind, Mesh, ParameterBinding, load_obj, rotation_matrix
from .scene import Camera, EstimatorDefaults, MeshInstance, Parameter, SceneDescription
from .temporal import FrameSpec, TemporalProfile
from .transport import C_LIGHT, Bsdf


class SceneFileError(ValueError):
    """Parse or schema error with file and line context."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = path or "<scene>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")


class _Map(dict):
    line: int = 0
    key_lines: dict


class _Seq(list):
    line: int = 0


class _Loader(yaml.SafeLoader):
    pass


def _construct_map(loader, node):
    loader.flatten_mapping(node)
    out = _Map()
    out.line = node.start_mark.line + 1
    out.key_lines = {}
    for kn, vn in node.value:
        key = loader.construct_object(kn, deep=True)
        if key in out:
            raise SceneFileError(f"duplicate key {key!r}", None, kn.start_mark.line + 1)
        out[key] = loader.construct_object(vn, deep=True)
        out.key_lines[key] = kn.start_mark.line + 1
    return out


def _construct_seq(loader, node):
    out = _Seq(loader.construct_object(n, deep=True) for n in node.value)
    out.line = node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)
_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _construct_seq)


class _Ctx:
    def __init__(self, path: str | None, base_dir: Path):
        self.path = path
        self.base_dir = base_dir

    def fail(self, msg, node=None, key=None):
        line = None
        if isinstance(node, _Map):
            line = node.key_lines.get(key, node.line) if key is not None else node.line
        elif isinstance(node, _Seq):
            line = node.line
        raise SceneFileError(msg, self.path, line)

    def mapping(self, node, what, required=(), optional=(), parent=None, key=None):
        if not isinstance(node, dict):
            self.fail(f"{what} must be a mapping", parent if parent is not None else node, key)
        unknown = set(node) - set(required) - set(optional)
        if unknown:
            k = sorted(unknown, key=str)[0]
            self.fail(f"unknown key {k!r} in {what}", node, k)
        for k in required:
            if k not in node:
                self.fail(f"{what} is missing required key {k!r}", node)
        return node

    def number(self, node, key, what, default=None, positive=False, integer=False):
        if key not in node:
            if default is None:
                self.fail(f"{what} is missing required key {key!r}", node)
            return default
        v = node[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(f"{what}.{key} must be a number", node, key)
        if integer and not isinstance(v, int):
            self.fail(f"{what}.{key} must be an integer", node, key)
        if not math.isfinite(v) and not (key in ("lower", "upper")):
            self.fail(f"{what}.{key} must be finite", node, key)
        if positive and v <= 0:
            self.fail(f"{what}.{key} must be positive", node, key)
        return int(v) if integer else float(v)

    def vector(self, node, key, what, n=3, default=None):
        if key not in node:
            if default is None:
                self.fail(f"{what} is missing required key {key!r}", node)
            return tuple(default)
        v = node[key]
        if not isinstance(v, list) or len(v) != n or not all(
                isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
            self.fail(f"{what}.{key} must be a list of {n} numbers", node, key)
        return tuple(float(x) for x in v)

    def wrap(self, node, key, fn):
        try:
            return fn()
        except SceneFileError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            self.fail(str(exc), node, key)


def _profile(ctx: _Ctx, node, what, parent=None, key=None):
    ctx.mapping(node, what, required=("kind",),
                optional=("t0", "t_start", "t_end", "amplitude", "center", "half_width", "peak", "mean", "sigma"),
                parent=parent, key=key)
    for k, v in node.items():
        if k != "kind" and (isinstance(v, bool) or not isinstance(v, (int, float))):
            ctx.fail(f"{what}.{k} must be a number", node, k)
    return ctx.wrap(node, "kind", lambda: TemporalProfile.from_dict(dict(node)))


def _material(ctx: _Ctx, node, what, parent=None, key=None):
    ctx.mapping(node, what, required=("type",), optional=("albedo", "alpha", "reflectance"), parent=parent, key=key)
    kind = node["type"]
    if kind not in ("lambertian", "roughconductor"):
        ctx.fail(f"{what}.type must be 'lambertian' or 'roughconductor'", node, "type")
    kw = {k: ctx.number(node, k, what) for k in ("albedo", "alpha", "reflectance") if k in node}
    return ctx.wrap(node, None, lambda: Bsdf(kind, **kw))


def _transform(ctx: _Ctx, node, verts, what, parent=None, key=None):
    ctx.mapping(node, what, optional=("scale", "rotate", "translate"), parent=parent, key=key)
    v = verts.copy()
    if "scale" in node:
        s = node["scale"]
        if isinstance(s, list):
            s = np.array(ctx.vector(node, "scale", what))
        else:
            s = ctx.number(node, "scale", what, positive=True)
        v = v * s
    if "rotate" in node:
        r = ctx.mapping(node["rotate"], f"{what}.rotate", required=("axis", "angle_deg"), optional=("point",), parent=node, key="rotate")
        ax = ctx.vector(r, "axis", f"{what}.rotate")
        if np.linalg.norm(ax) == 0:
            ctx.fail("rotation axis must be non-zero", r, "axis")
        pt = np.array(ctx.vector(r, "point", f"{what}.rotate", default=(0.0, 0.0, 0.0)))
        R = rotation_matrix(ax, math.radians(ctx.number(r, "angle_deg", f"{what}.rotate")))
        v = (v - pt) @ R.T + pt
    if "translate" in node:
        v = v + np.array(ctx.vector(node, "translate", what))
    return v


_GEOMETRY_KEYS = ("file", "quad", "box", "sphere", "vertices")


def _mesh(ctx: _Ctx, node, materials, idx, parent=None):
    what = f"meshes[{idx}]"
    ctx.mapping(node, what, parent=parent, required=("name",),
                optional=_GEOMETRY_KEYS + ("triangles", "transform", "material", "emitter"))
    name = node["name"]
    if not isinstance(name, str) or not name:
        ctx.fail(f"{what}.name must be a non-empty string", node, "name")
    if name in ("sensor", "medium"):
        ctx.fail(f"mesh name {name!r} is reserved", node, "name")
    sources = [k for k in _GEOMETRY_KEYS if k in node]
    if len(sources) != 1:
        ctx.fail(f"{what} needs exactly one of {', '.join(_GEOMETRY_KEYS)}", node)
    src = sources[0]
    from . import presets

    def build():
        if src == "file":
            p = Path(node["file"])
            if not p.is_absolute():
                p = ctx.base_dir / p
            return load_obj(p, name)
        if src == "quad":
            q = ctx.mapping(node["quad"], f"{what}.quad", required=("center", "u", "v"), optional=("flip",), parent=node, key="quad")
            return presets.quad(name, ctx.vector(q, "center", f"{what}.quad"), ctx.vector(q, "u", f"{what}.quad"),
                                ctx.vector(q, "v", f"{what}.quad"), bool(q.get("flip", False)))
        if src == "box":
            b = ctx.mapping(node["box"], f"{what}.box", required=("center", "half"), parent=node, key="box")
            half = b["half"]
            half = ctx.vector(b, "half", f"{what}.box") if isinstance(half, list) else \
                ctx.number(b, "half", f"{what}.box", positive=True)
            return presets.box(name, ctx.vector(b, "center", f"{what}.box"), half)
        if src == "sphere":
            s = ctx.mapping(node["sphere"], f"{what}.sphere", required=("center", "radius"),
                            optional=("subdivisions",), parent=node, key="sphere")
            return presets.icosphere(name, ctx.vector(s, "center", f"{what}.sphere"),
                                     ctx.number(s, "radius", f"{what}.sphere", positive=True),
                                     ctx.number(s, "subdivisions", f"{what}.sphere", default=1, integer=True))
        if "triangles" not in node:
            ctx.fail(f"{what} has vertices but no triangles", node, "vertices")
        return Mesh(np.array(node["vertices"], dtype=np.float64), np.array(node["triangles"], dtype=np.int64), name)

    mesh = ctx.wrap(node, src, build)
    if "transform" in node:
        verts = _transform(ctx, node["transform"], mesh.vertices, f"{what}.transform", node, "transform")
        mesh = ctx.wrap(node, "transform", lambda: Mesh(verts, mesh.triangles, name))
    mat = Bsdf()
    if "material" in node:
        m = node["material"]
        if isinstance(m, dict):
            mat = _material(ctx, m, f"{what}.material", node, "material")
        elif isinstance(m, str):
            if m not in materials:
                ctx.fail(f"unknown material {m!r}", node, "material")
            mat = materials[m]
        else:
            ctx.fail(f"{what}.material must be a name or a mapping", node, "material")
    radiance, cos_power, profile = 0.0, 0.0, None
    if "emitter" in node:
        e = ctx.mapping(node["emitter"], f"{what}.emitter", required=("radiance",), optional=("cos_power", "profile"), parent=node, key="emitter")
        radiance = ctx.number(e, "radiance", f"{what}.emitter", positive=True)
        cos_power = ctx.number(e, "cos_power", f"{what}.emitter", default=0.0)
        if cos_power < 0:
            ctx.fail("cos_power must be non-negative", e, "cos_power")
        if "profile" in e:
            profile = _profile(ctx, e["profile"], f"{what}.emitter.profile", e, "profile")
        else:
            profile = TemporalProfile.delta(0.0)
    return MeshInstance(mesh, mat, radiance, cos_power, profile)


def _binding(ctx: _Ctx, node, param_idx, what, parent=None):
    ctx.mapping(node, what, required=("target", "kind"), optional=("axis", "point"), parent=parent)
    kind = node["kind"]
    kinds = [k.value for k in BindingKind]
    if kind not in kinds:
        ctx.fail(f"{what}.kind must be one of {kinds}", node, "kind")
    axis = ctx.vector(node, "axis", what, default=(0.0, 0.0, 0.0))
    point = ctx.vector(node, "point", what, default=(0.0, 0.0, 0.0))
    return ctx.wrap(node, "kind", lambda: ParameterBinding(param_idx, str(node["target"]), kind, axis, point))


def description_from_dict(data, path: str | None = None, base_dir=None) -> SceneDescription:
    ctx = _Ctx(path, Path(base_dir) if base_dir is not None else Path.cwd())
    ctx.mapping(data, "scene", required=("meshes", "sensor"),
                optional=("version", "c", "medium", "materials", "parameters", "estimator", "dihedral_tol"))
    if data.get("version", 1) != 1:
        ctx.fail("unsupported scene version", data, "version")
    c = ctx.number(data, "c", "scene", default=C_LIGHT, positive=True)
    eta = 1.0
    if "medium" in data:
        med = ctx.mapping(data["medium"], "medium", optional=("eta",), parent=data, key="medium")
        eta = ctx.number(med, "eta", "medium", default=1.0, positive=True)
    materials = {}
    if "materials" in data:
        mats = ctx.mapping(data["materials"], "materials", optional=tuple(data["materials"]), parent=data, key="materials")
        for k, v in mats.items():
            materials[k] = _material(ctx, v, f"materials.{k}", mats, k)
    meshes = data["meshes"]
    if not isinstance(meshes, list) or not meshes:
        ctx.fail("meshes must be a non-empty list", data, "meshes")
    insts = tuple(_mesh(ctx, m, materials, i, meshes) for i, m in enumerate(meshes))
    names = [m.mesh.name for m in insts]
    for i, n in enumerate(names):
        if n in names[:i]:
            ctx.fail(f"duplicate mesh name {n!r}", meshes[i], "name")
    if not any(m.is_emitter for m in insts):
        ctx.fail("scene needs at least one emitter", data, "meshes")
    sensor = data["sensor"]
    if isinstance(sensor, list):
        ctx.fail("exactly one sensor is allowed", data, "sensor")
    ctx.mapping(sensor, "sensor", required=("camera", "profile", "frames"), parent=data, key="sensor")
    cam = ctx.mapping(sensor["camera"], "sensor.camera", required=("position", "look_at", "width", "height"),
                      optional=("up", "fov"), parent=sensor, key="camera")
    camera = ctx.wrap(sensor, "camera", lambda: Camera(
        ctx.vector(cam, "position", "sensor.camera"), ctx.vector(cam, "look_at", "sensor.camera"),
        ctx.vector(cam, "up", "sensor.camera", default=(0.0, 0.0, 1.0)),
        ctx.number(cam, "fov", "sensor.camera", default=45.0),
        ctx.number(cam, "width", "sensor.camera", integer=True, positive=True),
        ctx.number(cam, "height", "sensor.camera", integer=True, positive=True)))
    sprof = _profile(ctx, sensor["profile"], "sensor.profile", sensor, "profile")
    if sprof.kind == "delta":
        ctx.fail("sensor response cannot be a Dirac delta", sensor, "profile")
    fr = ctx.mapping(sensor["frames"], "sensor.frames", required=("count", "dt"), optional=("t0",), parent=sensor, key="frames")
    frames = ctx.wrap(sensor, "frames", lambda: FrameSpec(
        ctx.number(fr, "count", "sensor.frames", integer=True, positive=True),
        ctx.number(fr, "dt", "sensor.frames", positive=True),
        ctx.number(fr, "t0", "sensor.frames", default=0.0), camera.width, camera.height))
    params, binds = [], []
    plist = data.get("parameters", [])
    if not isinstance(plist, list):
        ctx.fail("parameters must be a list", data, "parameters")
    for i, p in enumerate(plist):
        what = f"parameters[{i}]"
        ctx.mapping(p, what, required=("name",), optional=("value", "lower", "upper", "bindings"), parent=plist)
        lo = ctx.number(p, "lower", what, default=-math.inf)
        hi = ctx.number(p, "upper", what, default=math.inf)
        val = ctx.number(p, "value", what, default=0.0)
        if lo > hi:
            ctx.fail("lower bound exceeds upper bound", p, "lower")
        if not lo <= val <= hi:
            ctx.fail("value lies outside its bounds", p, "value")
        if str(p["name"]) in [q.name for q in params]:
            ctx.fail(f"duplicate parameter name {p['name']!r}", p, "name")
        params.append(Parameter(str(p["name"]), val, lo, hi))
        bl = p.get("bindings", [])
        if not isinstance(bl, list):
            ctx.fail("bindings must be a list", p, "bindings")
        for j, b in enumerate(bl):
            bd = _binding(ctx, b, i, f"{what}.bindings[{j}]", bl)
            if bd.target not in names and bd.target not in ("sensor", "medium"):
                ctx.fail(f"binding target {bd.target!r} is not a mesh, 'sensor' or 'medium'", b, "target")
            binds.append(bd)
    defaults = EstimatorDefaults()
    if "estimator" in data:
        e = ctx.mapping(data["estimator"], "estimator", optional=("spp_interior", "spp_boundary", "max_depth", "seed"), parent=data, key="estimator")
        defaults = EstimatorDefaults(
            ctx.number(e, "spp_interior", "estimator", default=defaults.spp_interior, integer=True),
            ctx.number(e, "spp_boundary", "estimator", default=defaults.spp_boundary, integer=True),
            ctx.number(e, "max_depth", "estimator", default=defaults.max_depth, integer=True, positive=True),
            ctx.number(e, "seed", "estimator", default=defaults.seed, integer=True))
    kw = {}
    if "dihedral_tol" in data:
        kw["dihedral_tol"] = ctx.number(data, "dihedral_tol", "scene", positive=True)
    return ctx.wrap(data, None, lambda: SceneDescription(insts, camera, sprof, frames, tuple(params), tuple(binds),
                                                          eta, c, defaults, **kw))


def parse_scene(text: str, path: str | None = None, base_dir=None) -> SceneDescription:
    try:
        data = yaml.load(text, Loader=_Loader)
    except SceneFileError as exc:
        raise SceneFileError(str(exc).split(": ", 1)[1], path, exc.line) from None
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise SceneFileError(f"YAML syntax error: {exc.problem}", path, mark.line + 1 if mark else None) from None
    if data is None:
        raise SceneFileError("empty scene file", path, 1)
    return description_from_dict(data, path, base_dir)


def load_scene(path) -> SceneDescription:
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise SceneFileError(f"cannot read scene file: {exc.strerror}", path) from None
    return parse_scene(text, path, Path(path).parent)


def _floats(v):
    return [float(x) for x in v]


def description_to_dict(desc: SceneDescription) -> dict:
    """Plain-data form; meshes are written inline so the result is self-contained."""
    out = {"version": 1, "c": float(desc.c), "medium": {"eta": float(desc.eta)}}
    meshes = []
    for inst in desc.meshes:
        m = {"name": inst.mesh.name,
             "vertices": [_floats(v) for v in inst.mesh.vertices],
             "triangles": [[int(i) for i in t] for t in inst.mesh.triangles],
             "material": {"type": inst.material.kind, "albedo": float(inst.material.albedo),
                          "alpha": float(inst.material.alpha), "reflectance": float(inst.material.reflectance)}}
        if inst.is_emitter:
            e = {"radiance": float(inst.radiance), "cos_power": float(inst.cos_power)}
            if inst.profile is not None:
                e["profile"] = {k: (float(v) if k != "kind" else v) for k, v in inst.profile.to_dict().items()}
            m["emitter"] = e
        meshes.append(m)
    out["meshes"] = meshes
    cam = desc.camera
    out["sensor"] = {
        "camera": {"position": _floats(cam.position), "look_at": _floats(cam.look_at), "up": _floats(cam.up),
                   "fov": float(cam.fov), "width": int(cam.width), "height": int(cam.height)},
        "profile": {k: (float(v) if k != "kind" else v) for k, v in desc.sensor_profile.to_dict().items()},
        "frames": {"count": int(desc.frames.n_frames), "dt": float(desc.frames.dt), "t0": float(desc.frames.t0)},
    }
    params = []
    for i, p in enumerate(desc.parameters):
        d = {"name": p.name, "value": float(p.value)}
        if math.isfinite(p.lower):
            d["lower"] = float(p.lower)
        if math.isfinite(p.upper):
            d["upper"] = float(p.upper)
        d["bindings"] = [{"target": b.target, "kind": b.kind.value, "axis": _floats(b.axis), "point": _floats(b.point)}
                         for b in desc.bindings if b.param == i]
        params.append(d)
    out["parameters"] = params
    dd = desc.defaults
    out["estimator"] = {"spp_interior": dd.spp_interior, "spp_boundary": dd.spp_boundary,
                        "max_depth": dd.max_depth, "seed": dd.seed}
    out["dihedral_tol"] = float(desc.dihedral_tol)
    return out


def serialize_scene(desc: SceneDescription) -> str:
    return yaml.safe_dump(description_to_dict(desc), sort_keys=False, default_flow_style=None)


def save_scene(path, desc: SceneDescription) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_scene(desc))
