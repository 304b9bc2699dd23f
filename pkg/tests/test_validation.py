import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from difftransient import presets
from difftransient.estimators import estimate_interior
from difftransient.geometry import BindingKind, ParameterBinding
from difftransient.scene import Camera, EstimatorDefaults, MeshInstance, Parameter, SceneDescription
from difftransient.temporal import FrameSpec, TemporalProfile
from difftransient.transport import C_LIGHT, Bsdf
from difftransient.validation import (FdConfig, FdError, central_difference, compare, fd_gradient,
                                      mean_and_stderr, pearson, psnr, signal_frames)


def probe_scene():
    """Camera facing an emitter that slides towards it: every sample is a single smooth path."""
    dt = 0.1
    L = TemporalProfile.gaussian(0, 0.1, 1)
    W = TemporalProfile.box(0, dt, 1)
    light = presets.quad("light", (0, 0, 0), (1, 0, 0), (0, 1, 0))
    cam = Camera((0, 0, 2.0), (0, 0, 0), (0, 1, 0), 30.0, 4, 4)
    fr = FrameSpec(10, dt, 2.0 / C_LIGHT - 0.5, 4, 4)
    return SceneDescription((MeshInstance(light, Bsdf("lambertian", 0), radiance=2.0, profile=L),), cam, W, fr,
                            (Parameter("z", 0.0),), (ParameterBinding(0, "light", "translation", (0, 0, 1)),),
                            defaults=EstimatorDefaults(4, 0, 2, 0))


def _fd_error(desc, eps, scheme):
    g = estimate_interior(desc.build(), spp=4, seed=1).grad[0]
    f = fd_gradient(desc, cfg=FdConfig(epsilon=eps, scheme=scheme, spp=4), seed=1).grad[0]
    return float(np.abs(f - g).max())


def test_fd_on_probe_path_converges_quadratically():
    desc = probe_scene()
    errs = [_fd_error(desc, e, "central") for e in (1e-2, 1e-3, 1e-4)]
    # O(eps^2): each tenfold step cuts the error about a hundredfold
    assert errs[1] < errs[0] / 50
    assert errs[2] < errs[1] / 50
    assert errs[2] < 1e-3


def test_central_beats_forward():
    desc = probe_scene()
    for eps in (1e-2, 1e-3):
        assert _fd_error(desc, eps, "central") < _fd_error(desc, eps, "forward")


def test_zero_binding_scene_gives_zero():
    desc = presets.smooth_scene(4, 4, 40).with_bindings((), ())
    h = fd_gradient(desc, cfg=FdConfig(spp=1), seed=0)
    assert h.grad.shape == (0, 4, 4, 40)
    assert h.intensity.sum() > 0


@pytest.mark.filterwarnings("ignore:rendered histogram is entirely zero")
def test_invalid_perturbation_names_parameter():
    desc = presets.smooth_scene(4, 4, 4)
    desc = desc.with_bindings((Parameter("ior", 0.005),),
                              (ParameterBinding(0, "medium", BindingKind.REFRACTIVE_INDEX),))
    with pytest.raises(FdError, match="ior"):
        fd_gradient(desc, cfg=FdConfig(epsilon=0.01, spp=1), seed=0)


def test_independent_seeds_differ_from_crn():
    desc = presets.smooth_scene(6, 6, 20)
    a = fd_gradient(desc, cfg=FdConfig(spp=2), seed=0)
    b = fd_gradient(desc, cfg=FdConfig(spp=2, common_random_numbers=False), seed=0)
    assert_array_equal(a.intensity, b.intensity)
    assert not np.array_equal(a.grad, b.grad)


@pytest.mark.parametrize("kw", [dict(epsilon=0.0), dict(epsilon=-1.0), dict(epsilon=[0.1, 0.0]),
                                dict(scheme="backward"), dict(spp=0)])
def test_fd_config_validation(kw):
    with pytest.raises(ValueError):
        FdConfig(**kw)


def test_per_parameter_epsilon():
    cfg = FdConfig(epsilon=[0.1, 0.2])
    assert_allclose(cfg.eps_for(2), [0.1, 0.2])
    with pytest.raises(ValueError):
        cfg.eps_for(3)
    assert_allclose(FdConfig().eps_for(3), 0.01)


def test_central_difference_helper():
    J = central_difference(lambda t: np.array([t[0] ** 2, t[0] * t[1]]), [3.0, 2.0])
    assert_allclose(J, [[6.0, 0.0], [2.0, 3.0]], atol=1e-8)


# -- metrics -----------------------------------------------------------------

frames = arrays(np.float64, (3, 4, 5), elements=st.floats(-10, 10))


def test_identical_inputs():
    x = np.random.default_rng(0).random((4, 4, 6))
    r = compare(x, x)
    assert_array_equal(r.rmse, 0.0)
    assert np.all(np.isinf(r.psnr)) and r.total_psnr == math.inf
    assert_allclose(r.correlation, 1.0)
    assert r.total_max_abs == 0.0


def test_constant_offset():
    x = np.random.default_rng(1).random((4, 4, 6))
    r = compare(x + 0.1, x)
    assert_allclose(r.rmse, 0.1, rtol=1e-12)
    assert_allclose(r.max_abs, 0.1, rtol=1e-12)
    assert r.diff_counts.sum() == x.size


@given(frames, frames)
@settings(max_examples=40, deadline=None)
def test_rmse_and_max_abs_are_symmetric(a, b):
    r1, r2 = compare(a, b), compare(b, a)
    assert_allclose(r1.rmse, r2.rmse)
    assert_allclose(r1.max_abs, r2.max_abs)
    assert_allclose(r1.correlation, r2.correlation)


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        compare(np.zeros((2, 2, 3)), np.zeros((2, 2, 4)))


def test_csv_outputs():
    x = np.random.default_rng(2).random((3, 3, 4))
    r = compare(x, x * 1.1, bins=8)
    rows = r.to_csv().strip().splitlines()
    assert rows[0] == "frame,rmse,psnr,correlation,max_abs" and len(rows) == 5
    hist = r.histogram_csv().strip().splitlines()
    assert hist[0] == "lo,hi,count" and len(hist) == 9
    assert "rmse=" in r.summary()


def test_psnr_and_pearson_edge_cases():
    assert psnr(0.0, 1.0) == math.inf
    assert psnr(0.1, 1.0) == pytest.approx(20.0)
    assert psnr(0.1, 0.0) == -math.inf
    assert pearson(np.ones(4), np.ones(4)) == 1.0
    assert pearson(np.ones(4), np.arange(4)) == 0.0
    assert pearson(np.arange(4), -np.arange(4)) == pytest.approx(-1.0)


def test_signal_frames_and_stderr():
    x = np.zeros((2, 2, 5))
    x[..., 2] = 1.0
    x[..., 3] = 0.01
    assert list(signal_frames(x, "intensity")) == [2]
    assert list(signal_frames(np.zeros((2, 2, 3)), "intensity")) == []
    m, se = mean_and_stderr(np.array([[1.0, 2.0], [3.0, 2.0]]))
    assert_allclose(m, [2.0, 2.0])
    assert_allclose(se, [1.0, 0.0])
    with pytest.raises(ValueError):
        mean_and_stderr(np.ones((1, 3)))
