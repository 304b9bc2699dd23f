import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from difftransient.dual import Dual
from difftransient.temporal import FrameSpec, TemporalProfile, correlate
from difftransient.transport import (C_LIGHT, Bsdf, DegeneratePathError, PathState, PathVertex, bsdf_eval,
                                     correlated_importance, geometry_term, throughput_and_derivative,
                                     tof_and_derivative)
from pathprobe import finite_difference, quantities, random_path, relative_error


def _vertex(p, n, vel=(0, 0, 0), material=None, **kw):
    return PathVertex(Dual(np.asarray(p, float), np.asarray(vel, float)[:, None]),
                      Dual(np.asarray(n, float), n=1), material, **kw)


def test_geometry_term_examples():
    x = _vertex([0, 0, 0], [0, 0, 1])
    y = _vertex([0, 0, 1], [0, 0, -1], vel=[0, 0, 1])
    g = geometry_term(x, y)
    assert g.v == pytest.approx(1.0)
    assert g.g[0] == pytest.approx(-2.0)
    assert geometry_term(x, _vertex([0, 0, 0], [0, 0, 1])).v == 0.0


def test_tof_examples():
    a = Dual(np.zeros(3), n=1)
    b = Dual(np.array([1.0, 0, 0]), n=1)
    t = tof_and_derivative([a, b], 1.0)
    assert t.v == pytest.approx(1.0 / C_LIGHT)
    assert t.g[0] == 0.0
    moving = Dual(np.array([1.0, 0, 0]), np.array([[1.0], [0], [0]]))
    assert tof_and_derivative([a, moving], 1.3).g[0] == pytest.approx(1.3 / C_LIGHT)
    far = Dual(np.array([2.0, 0, 0]), n=1)
    eta = Dual(np.asarray(1.0), np.array([1.0]))
    assert tof_and_derivative([a, far], eta).g[0] == pytest.approx(2.0 / C_LIGHT)
    with pytest.raises(DegeneratePathError):
        tof_and_derivative([a, a], 1.0)
    with pytest.raises(DegeneratePathError):
        tof_and_derivative([a], 1.0)


def test_single_segment_throughput_is_geometry_term():
    x = _vertex([0, 0, 0], [0, 0.6, 0.8], vel=[0.1, 0.2, 0.3])
    y = _vertex([0.3, 0.1, 1.2], [0, 0, -1])
    T = throughput_and_derivative([x, y])
    G = geometry_term(x, y)
    assert T.v == G.v
    assert_allclose(T.g, G.g)


def test_static_path_has_zero_gradient():
    vs = [_vertex([0, 0, 0], [0, 0, 1], radiance=1.0),
          _vertex([0, 0, 1], [0, 0, -1], material=Bsdf()),
          _vertex([0.5, 0, 0], [0, 0, 1])]
    S = correlate(TemporalProfile.box(0, 1), TemporalProfile.box(0, 1))
    tof = tof_and_derivative([v.p for v in vs], 1.0).v
    se = correlated_importance([v.p for v in vs], vs[0], None, S, FrameSpec(4, 1.0, tof - 0.5), 0)
    assert se.v > 0
    assert_allclose(se.g, 0.0)
    assert_allclose(throughput_and_derivative(vs).g, 0.0)


def test_se_on_triangle_ramp_gets_tof_slope():
    # kernel box(0,2) * box(0,2) has slope +1 at t = -1
    S = correlate(TemporalProfile.box(0, 2), TemporalProfile.box(0, 2))
    eta = 1.2
    a = PathVertex(Dual(np.zeros(3), n=1), Dual(np.array([1.0, 0, 0]), n=1), radiance=1.0)
    b = Dual(np.array([1.0, 0, 0]), np.array([[1.0], [0], [0]]))
    tof = eta / C_LIGHT
    se = correlated_importance([a.p, b], a, None, S, FrameSpec(1, 1.0, tof + 1.0), 0, eta)
    assert se.v == pytest.approx(1.0)
    assert se.g[0] == pytest.approx(eta / C_LIGHT)


def test_three_vertex_lambertian_throughput_vs_fd():
    def path(t, seed):
        return [_vertex([0, 0, 0], [0, 0, 1]),
                PathVertex(Dual(np.array([0.2, 0.1, 1.0 + t]), np.array([[0.0], [0.0], [seed]])),
                           Dual(np.array([0.0, 0.0, -1.0]), n=1), Bsdf("lambertian", 0.7)),
                _vertex([0.9, -0.3, 0.1], [0, 0.2, 0.98])]
    T = throughput_and_derivative(path(0.0, 1.0))
    eps = 1e-5
    num = (throughput_and_derivative(path(eps, 0.0)).v - throughput_and_derivative(path(-eps, 0.0)).v) / (2 * eps)
    assert T.g[0] == pytest.approx(num, rel=1e-3)


@pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
def test_random_paths_match_central_differences(k):
    rng = np.random.default_rng(100 + k)
    for _ in range(10):
        path = random_path(rng, k)
        q = quantities(path)
        fd = finite_difference(path)
        for key, d in q.items():
            err = relative_error(float(d.g[0]), float(fd[key]), float(d.v))
            assert err < 1e-4, (key, d.v, d.g[0], fd[key])


def test_product_rule_identity():
    rng = np.random.default_rng(7)
    for k in (2, 4):
        q = quantities(random_path(rng, k))
        f = q["T"] * q["Se"]
        assert_allclose(f.g[0], q["T"].g[0] * q["Se"].v + q["T"].v * q["Se"].g[0], rtol=1e-14, atol=0)


def test_path_state_lengths():
    vs = [_vertex([0, 0, 0], [0, 0, 1]), _vertex([0, 0, 2], [0, 0, -1])]
    ps = PathState(vs, eta=1.0)
    assert ps.d == pytest.approx(2.0)
    assert ps.tof == pytest.approx(2.0 / C_LIGHT)


def test_lambertian_is_albedo_over_pi_and_one_sided_pairs():
    n = Dual(np.array([0, 0, 1.0]), n=1)
    wi = Dual(np.array([0, 0.6, 0.8]), n=1)
    wo = Dual(np.array([0.8, 0, 0.6]), n=1)
    assert Bsdf("lambertian", 0.5).eval(n, wi, wo).v == pytest.approx(0.5 / math.pi)
    below = Dual(np.array([0.8, 0, -0.6]), n=1)
    assert Bsdf("lambertian", 0.5).eval(n, wi, below).v == 0.0


@pytest.mark.parametrize("bsdf", [Bsdf("lambertian", 0.8), Bsdf("roughconductor", 0.5, 0.4, 0.9)])
def test_bsdf_sampling_pdf_integrates_and_is_consistent(bsdf):
    rng = np.random.default_rng(11)
    N = 200_000
    n = np.tile([0.0, 0.0, 1.0], (N, 1))
    wi = np.tile([0.3, 0.0, math.sqrt(1 - 0.09)], (N, 1))
    wo, pdf = bsdf.sample(n, wi, rng.random(N), rng.random(N))
    ok = pdf > 0
    assert np.all(np.isfinite(pdf))
    assert_allclose(np.linalg.norm(wo[ok], axis=1), 1.0, atol=1e-12)
    assert_allclose(bsdf.pdf(n[ok], wi[ok], wo[ok]), pdf[ok], rtol=1e-12)
    # reflected energy (cosine-weighted albedo) never exceeds one
    f = bsdf.eval(Dual(n[ok], n=1), Dual(wi[ok], n=1), Dual(wo[ok], n=1)).v
    energy = np.sum(f * wo[ok, 2] / pdf[ok]) / N
    assert 0.0 < energy <= 1.0 + 3 * np.std(f * wo[ok, 2] / pdf[ok]) / math.sqrt(N)


def test_bsdf_validation():
    with pytest.raises(ValueError):
        Bsdf("glass")
    with pytest.raises(ValueError):
        Bsdf("lambertian", 1.5)
    with pytest.raises(ValueError):
        Bsdf("roughconductor", 0.5, 0.0)


def test_bsdf_eval_is_reciprocal():
    rng = np.random.default_rng(5)
    n = np.tile([0, 0, 1.0], (50, 1))
    wi = rng.normal(size=(50, 3))
    wi[:, 2] = np.abs(wi[:, 2])
    wo = rng.normal(size=(50, 3))
    wo[:, 2] = np.abs(wo[:, 2])
    wi /= np.linalg.norm(wi, axis=1, keepdims=True)
    wo /= np.linalg.norm(wo, axis=1, keepdims=True)
    mat = Bsdf("roughconductor", 0.5, 0.3, 0.8).arrays((50,))
    a = bsdf_eval(mat, Dual(n, n=1), Dual(wi, n=1), Dual(wo, n=1)).v
    b = bsdf_eval(mat, Dual(n, n=1), Dual(wo, n=1), Dual(wi, n=1)).v
    assert_allclose(a, b, rtol=1e-12)
