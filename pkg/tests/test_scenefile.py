import textwrap

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from difftransient import presets
from difftransient.estimators import render_forward
from difftransient.geometry import write_obj
from difftransient.scenefile import (SceneFileError, description_to_dict, load_scene, parse_scene,
                                     serialize_scene)
from difftransient.temporal import FrameSpec

MINIMAL = textwrap.dedent("""\
    version: 1
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
      camera: {position: [0, 0, 0.8], look_at: [0, 0, 0], up: [0, 1, 0], fov: 50, width: 8, height: 8}
      profile: {kind: box, t_start: 0.0, t_end: 0.04}
      frames: {count: 20, dt: 0.04, t0: 5.6}
    parameters:
      - name: light_x
        value: 0.0
        bindings:
          - {target: light, kind: translation, axis: [1, 0, 0]}
    estimator: {spp_interior: 4, spp_boundary: 4, max_depth: 2, seed: 0}
""")


def _same(a, b):
    assert description_to_dict(a) == description_to_dict(b)


def test_minimal_scene_parses():
    d = parse_scene(MINIMAL)
    assert [m.mesh.name for m in d.meshes] == ["floor", "light"]
    assert d.meshes[1].is_emitter and not d.meshes[0].is_emitter
    assert d.frames.n_frames == 20 and d.camera.width == 8
    assert d.parameters[0].name == "light_x" and d.defaults.spp_interior == 4


@pytest.mark.parametrize("name", presets.PRESET_NAMES)
def test_round_trip_is_structurally_identical(name):
    d = presets.load_preset(name)
    once = parse_scene(serialize_scene(d))
    _same(d, once)
    _same(once, parse_scene(serialize_scene(once)))


@pytest.mark.parametrize("text, line, msg", [
    (MINIMAL.replace("fov: 50", "fov: 50, zoom: 2"), 12, "unknown key 'zoom'"),
    (MINIMAL.replace("    material: white\n", "    material: white\n    colour: red\n", 1), 8, "unknown key"),
    (MINIMAL.replace("albedo: 0.8}", "albedo: 0.8"), None, "YAML syntax"),
    (MINIMAL.replace("count: 20", "count: -3"), 14, "positive"),
    (MINIMAL.replace("kind: box", "kind: sawtooth"), 13, "sawtooth"),
    (MINIMAL.replace("target: light", "target: lamp"), 19, "lamp"),
    (MINIMAL.replace("    emitter:", "    unused:"), None, "unknown key 'unused'"),
    (MINIMAL + "meshes: []\n", 21, "duplicate key"),
    ("- 1\n- 2\n", 1, "mapping"),
], ids=["camera", "mesh", "syntax", "count", "profile", "target", "emitter", "duplicate", "top"])
def test_errors_carry_line_numbers(text, line, msg):
    with pytest.raises(SceneFileError, match=msg) as info:
        parse_scene(text, path="scene.yaml")
    assert str(info.value).startswith("scene.yaml")
    if line is not None:
        assert info.value.line == line


def test_schema_rules():
    no_light = MINIMAL.replace("    emitter: {radiance: 4.0, profile: {kind: gaussian, mean: 0.0, sigma: 0.04}}\n", "")
    with pytest.raises(SceneFileError, match="emitter"):
        parse_scene(no_light)
    with pytest.raises(SceneFileError, match="one sensor"):
        parse_scene(MINIMAL.replace("sensor:\n  camera", "sensor:\n- camera"))
    with pytest.raises(SceneFileError, match="empty"):
        parse_scene("")
    with pytest.raises(SceneFileError, match="delta"):
        parse_scene(MINIMAL.replace("profile: {kind: box, t_start: 0.0, t_end: 0.04}", "profile: {kind: delta}"))


def test_obj_mesh_relative_to_scene_file(tmp_path):
    (tmp_path / "floor.obj").write_text(write_obj(presets.quad("floor", (0, 0, 0), (1, 0, 0), (0, 1, 0))))
    text = MINIMAL.replace("quad: {center: [0, 0, 0], u: [1, 0, 0], v: [0, 1, 0]}",
                           "file: floor.obj\n    transform: {scale: 2.0, translate: [0, 0, -0.5]}")
    p = tmp_path / "s.yaml"
    p.write_text(text)
    d = load_scene(p)
    v = d.meshes[0].mesh.vertices
    assert v[:, 2].max() == -0.5 and v[:, 0].max() == 2.0
    with pytest.raises(SceneFileError, match="missing.yaml"):
        load_scene(tmp_path / "missing.yaml")


@pytest.mark.parametrize("name", ["coffee", "egg", "teapot", "tower"])
def test_shipped_presets_render_signal(name):
    d = presets.load_preset(name)
    fr = d.frames
    small = d.with_frames(FrameSpec(fr.n_frames, fr.dt, fr.t0, 8, 8))
    h = render_forward(small.build(), spp=2, seed=0)
    assert h.intensity.shape == (8, 8, fr.n_frames)
    assert np.all(np.isfinite(h.intensity)) and h.intensity.sum() > 0


def test_minimal_scene_renders_deterministically():
    sc = parse_scene(MINIMAL).build()
    assert_array_equal(render_forward(sc, spp=2, seed=1).intensity, render_forward(sc, spp=2, seed=1).intensity)
