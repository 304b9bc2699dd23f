import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from difftransient import presets
from difftransient.geometry import BindingKind, ParameterBinding
from difftransient.scene import Camera, MeshInstance, Parameter, SceneDescription
from difftransient.temporal import ConstantKernel, TemporalProfile
from difftransient.transport import Bsdf


def _brute_intersect(tris, o, d, eps):
    """Plane hit then inside-test via signed sub-triangle areas, one ray and triangle at a time."""
    best_t, best_f = math.inf, -1
    for f, (a, b, c) in enumerate(tris):
        n = np.cross(b - a, c - a)
        den = np.dot(n, d)
        if den == 0:
            continue
        t = np.dot(n, a - o) / den
        if not (t > eps and t < best_t):
            continue
        x = o + t * d
        s = [np.dot(np.cross(q1 - x, q2 - x), n) for q1, q2 in ((a, b), (b, c), (c, a))]
        if min(s) >= -1e-12 * np.dot(n, n):
            best_t, best_f = t, f
    return best_t, best_f


def test_intersection_matches_brute_force():
    sc = presets.cube_scene().build()
    rng = np.random.default_rng(0)
    N = 400
    o = rng.uniform(-2.0, 2.0, size=(N, 3))
    d = rng.normal(size=(N, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    hit, t, face, bary = sc.intersect(o, d)
    for i in range(N):
        bt, bf = _brute_intersect(sc.tri_p, o[i], d[i], sc.ray_eps)
        assert hit[i] == (bf >= 0)
        if bf >= 0:
            assert t[i] == pytest.approx(bt, rel=1e-9)
            # shared edges may legitimately report either face at the same distance
            p = bary[i] @ sc.tri_p[face[i]]
            assert_allclose(p, o[i] + bt * d[i], atol=1e-9)
    assert hit.sum() > N // 4


def test_visibility_examples():
    sc = presets.occluder_scene(8, 8, 4).build()
    # segment crossing the occluder at its centre
    assert not sc.visible([0, 0, 0.5], [0, 0, 1.5])[0]
    # segment beside the occluder
    assert sc.visible([0.6, 0, 0.5], [0.6, 0, 1.5])[0]
    # segment ending exactly on the occluder is not blocked by it
    assert sc.visible([0, 0, 0.5], [0, 0, 1.0])[0]


def test_ignore_list_skips_faces():
    sc = presets.occluder_scene(8, 8, 4).build()
    o = np.array([[0.0, 0.0, 0.5]])
    d = np.array([[0.0, 0.0, 1.0]])
    hit, t, f, _ = sc.intersect(o, d)
    assert hit[0] and t[0] == pytest.approx(0.5)
    occ_faces = np.nonzero(sc.face_mesh == 2)[0]
    hit2, t2, f2, _ = sc.intersect(o, d, ignore=np.array([occ_faces]))
    assert hit2[0] and t2[0] == pytest.approx(1.5)


def test_projection_inverts_film_mapping():
    sc = presets.smooth_scene(12, 9, 2).build()
    pix = np.arange(12 * 9)
    rng = np.random.default_rng(1)
    jx, jy = rng.random(pix.size), rng.random(pix.size)
    fx, fy = sc.pixel_film(pix, jx, jy)
    d = sc.film_to_dir(fx, fy)
    x = sc.cam_pos + 2.0 * d
    gx, gy, gp, z = sc.project(x)
    assert_allclose(gx, fx, atol=1e-12)
    assert_allclose(gy, fy, atol=1e-12)
    np.testing.assert_array_equal(gp, pix)
    behind = sc.cam_pos - 2.0 * d
    assert np.all(sc.project(behind)[2] == -1)


def test_emitter_direction_pdf_integrates_to_one():
    sc = presets.occluder_scene(8, 8, 4).build()
    rng = np.random.default_rng(2)
    N = 400_000
    d = rng.normal(size=(N, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.tile([0.1, -0.2, 0.7], (N, 1))
    est = sc.emitter_direction_pdf(o, d) * 4 * math.pi
    assert est.mean() == pytest.approx(1.0, abs=4 * est.std() / math.sqrt(N))


def test_emitter_sampling_is_area_uniform():
    sc = presets.occluder_scene(8, 8, 4).build()
    rng = np.random.default_rng(3)
    N = 100_000
    face, bary, p = sc.sample_emitter(rng.random(N), rng.random(N), rng.random(N))
    assert np.all(sc.face_emit[face] > 0)
    assert_allclose(p[:, 2], 2.0)
    # quadrant counts on the 0.8 x 0.8 light
    q = (p[:, 0] > 0).astype(int) * 2 + (p[:, 1] > 0)
    counts = np.bincount(q, minlength=4) / N
    assert_allclose(counts, 0.25, atol=4 * math.sqrt(0.25 * 0.75 / N))


def test_channels_sum_into_parameters():
    desc = presets.load_preset("teapot")
    sc = desc.build()
    g = np.arange(sc.n, dtype=float)[None, :] * np.ones((2, 1))
    out = sc.channels_to_params(g)
    want = np.zeros((2, len(desc.parameters)))
    for i, b in enumerate(desc.bindings):
        want[:, b.param] += i
    assert_allclose(out, want)


def test_steady_state_uses_constant_kernels():
    desc = presets.smooth_scene(8, 8, 10).steady_state()
    sc = desc.build()
    assert sc.frames.n_frames == 1
    assert all(isinstance(k, ConstantKernel) for k in sc.kernels)
    assert sc.kernels[0].value == pytest.approx(1.0)


def _light():
    return MeshInstance(presets.quad("light", (0, 0, 1), (0.1, 0, 0), (0, 0.1, 0), flip=True),
                        Bsdf("lambertian", 0.0), radiance=1.0)


def test_description_validation():
    base = presets.smooth_scene(8, 8, 4)
    floor = MeshInstance(presets.quad("floor", (0, 0, 0), (1, 0, 0), (0, 1, 0)))
    with pytest.raises(ValueError, match="emitter"):
        replace(base, meshes=(floor,))
    with pytest.raises(ValueError, match="unique"):
        replace(base, meshes=(_light(), _light()))
    with pytest.raises(ValueError, match="delta"):
        replace(base, sensor_profile=TemporalProfile.delta())
    with pytest.raises(ValueError, match="unknown parameter"):
        replace(base, bindings=(ParameterBinding(3, "light", BindingKind.TRANSLATION, (1, 0, 0)),))
    with pytest.raises(ValueError, match="target"):
        replace(base, bindings=(ParameterBinding(0, "nope", BindingKind.TRANSLATION, (1, 0, 0)),))
    with pytest.raises(ValueError):
        Camera((0, 0, 0), (0, 0, 0))
    with pytest.raises(ValueError):
        Camera((0, 0, 0), (0, 0, 1), (0, 0, 1))
    with pytest.raises(ValueError):
        base.build(np.zeros(2))
    with pytest.raises(ValueError):
        base.build(np.array([np.nan]))


def test_with_theta_and_frames():
    desc = presets.smooth_scene(8, 8, 4)
    moved = desc.with_theta([0.25])
    assert moved.theta[0] == 0.25 and desc.theta[0] == 0.0
    sc = moved.build()
    assert_allclose(sc.tri_p[sc.face_mesh == 1].reshape(-1, 3)[:, 0].mean(), 0.55)
    small = desc.with_frames(replace(desc.frames, width=4, height=3))
    assert (small.camera.width, small.camera.height) == (4, 3)


def test_medium_binding_sets_index():
    desc = presets.load_preset("coffee")
    sc = desc.build()
    i = [p.name for p in desc.parameters].index("eta")
    assert sc.eta == pytest.approx(desc.parameters[i].value)
    assert sc.eta_dot.sum() == 1.0
    with pytest.raises(ValueError):
        desc.build(np.full(len(desc.parameters), -1.0))


def test_parameter_defaults():
    p = Parameter("a")
    assert p.value == 0.0 and math.isinf(p.lower) and math.isinf(p.upper)
    assert SceneDescription.__dataclass_fields__["steady"].default is False
