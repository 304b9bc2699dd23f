import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from difftransient import presets
from difftransient.cli import main
from difftransient.histogram import read_histogram
from difftransient.scenefile import load_scene, save_scene
from test_scenefile import MINIMAL

# emitter faces away from everything the camera can see
EMPTY = MINIMAL.replace("flip: true", "flip: false")


@pytest.fixture
def scene_file(tmp_path):
    p = tmp_path / "scene.yaml"
    p.write_text(MINIMAL)
    return p


def test_render_is_byte_identical_across_runs(scene_file, tmp_path):
    a, b = tmp_path / "a.tgrd", tmp_path / "b.tgrd"
    for out in (a, b):
        assert main(["render", str(scene_file), "--spp", "2", "--seed", "7", "--workers", "1", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    h = read_histogram(a)
    assert h.intensity.shape == (8, 8, 20) and h.d == 1 and h.intensity.sum() > 0


@pytest.mark.filterwarnings("ignore:rendered histogram is entirely zero")
def test_empty_scene_renders_zeros(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text(EMPTY)
    out = tmp_path / "e.tgrd"
    assert main(["render", str(p), "--spp", "2", "--workers", "1", "--out", str(out)]) == 0
    h = read_histogram(out)
    assert h.intensity.shape == (8, 8, 20)
    assert_array_equal(h.intensity, 0.0)


def test_grad_header_and_exports(scene_file, tmp_path):
    out = tmp_path / "g.tgrd"
    rc = main(["grad", str(scene_file), "--spp-interior", "2", "--spp-boundary", "2", "--workers", "1",
               "--out", str(out), "--csv", str(tmp_path / "g.csv"), "--png-dir", str(tmp_path / "png")])
    assert rc == 0
    assert read_histogram(out).d == 1
    assert (tmp_path / "g.csv").read_text().startswith("pixel,row,col,frame,time,intensity,grad_1")
    assert len(list((tmp_path / "png").glob("*.png"))) == 20


def test_grad_without_bindings_has_zero_planes(tmp_path):
    text = MINIMAL.split("parameters:")[0] + "estimator: {spp_interior: 2, spp_boundary: 2}\n"
    p = tmp_path / "nb.yaml"
    p.write_text(text)
    out = tmp_path / "nb.tgrd"
    assert main(["grad", str(p), "--workers", "1", "--out", str(out)]) == 0
    assert read_histogram(out).grad.shape == (0, 8, 8, 20)


def test_interior_only_matches_zero_boundary_spp(scene_file, tmp_path):
    a, b = tmp_path / "a.tgrd", tmp_path / "b.tgrd"
    base = ["grad", str(scene_file), "--spp-interior", "2", "--workers", "1", "--seed", "3"]
    assert main(base + ["--interior-only", "--out", str(a)]) == 0
    assert main(base + ["--spp-boundary", "0", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_fd_and_compare(scene_file, tmp_path, capsys):
    fd = tmp_path / "fd.tgrd"
    assert main(["fd", str(scene_file), "--spp", "2", "--workers", "1", "--out", str(fd)]) == 0
    assert "epsilon=0.01" in capsys.readouterr().out
    csv = tmp_path / "m.csv"
    assert main(["compare", str(fd), str(fd), "--plane", "0", "--csv", str(csv),
                 "--hist-csv", str(tmp_path / "d.csv")]) == 0
    assert "rmse=0" in capsys.readouterr().out
    rows = csv.read_text().strip().splitlines()
    assert rows[0] == "frame,rmse,psnr,correlation,max_abs" and len(rows) == 21
    assert all(float(r.split(",")[1]) == 0.0 for r in rows[1:])
    assert main(["compare", str(fd), str(fd), "--plane", "5"]) == 3


def test_compare_refuses_mismatched_dims(scene_file, tmp_path):
    a, b = tmp_path / "a.tgrd", tmp_path / "b.tgrd"
    assert main(["render", str(scene_file), "--spp", "1", "--workers", "1", "--out", str(a)]) == 0
    assert main(["render", str(scene_file), "--spp", "1", "--workers", "1", "--frames", "10", "--out", str(b)]) == 0
    assert main(["compare", str(a), str(b)]) == 4


def test_scaled_copy_has_known_rmse(scene_file, tmp_path, capsys):
    from difftransient.histogram import write_histogram
    a = tmp_path / "a.tgrd"
    main(["render", str(scene_file), "--spp", "2", "--workers", "1", "--out", str(a)])
    h = read_histogram(a)
    h.intensity = h.intensity * np.float32(2.0)
    write_histogram(tmp_path / "b.tgrd", h)
    capsys.readouterr()
    main(["compare", str(tmp_path / "b.tgrd"), str(a), "--csv", str(tmp_path / "m.csv")])
    rows = (tmp_path / "m.csv").read_text().strip().splitlines()[1:]
    half = read_histogram(a).intensity.astype(np.float64)
    want = np.sqrt(np.mean(half ** 2, axis=(0, 1)))
    assert np.allclose([float(r.split(",")[1]) for r in rows], want, rtol=1e-6)


def test_exit_codes(scene_file, tmp_path, capsys):
    assert main([]) == 2
    assert main(["render", str(scene_file)]) == 2
    assert main(["render", "preset:nope", "--out", str(tmp_path / "x")]) == 3
    bad = tmp_path / "bad.yaml"
    bad.write_text(MINIMAL.replace("fov: 50", "fov: 50, zoom: 1"))
    assert main(["render", str(bad), "--out", str(tmp_path / "x")]) == 3
    assert "bad.yaml:12" in capsys.readouterr().err
    assert main(["render", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "x")]) == 3
    (tmp_path / "junk.tgrd").write_bytes(b"JUNKJUNKJUNKJUNKJUNKJUNKJUNKJUNKJUNKJUNKJUNKJUNK")
    assert main(["export", str(tmp_path / "junk.tgrd")]) == 3
    assert main(["render", str(scene_file), "--spp", "-1", "--out", str(tmp_path / "x")]) == 4


def test_threads_env(scene_file, tmp_path, monkeypatch):
    monkeypatch.setenv("TGRD_THREADS", "many")
    assert main(["render", str(scene_file), "--spp", "1", "--out", str(tmp_path / "x")]) == 3
    monkeypatch.setenv("TGRD_THREADS", "1")
    assert main(["render", str(scene_file), "--spp", "1", "--out", str(tmp_path / "x")]) == 0


def test_preset_prefix_at_reduced_resolution(tmp_path):
    out = tmp_path / "egg.tgrd"
    assert main(["render", "preset:egg", "--spp", "1", "--width", "8", "--height", "6", "--workers", "1",
                 "--out", str(out)]) == 0
    assert read_histogram(out).intensity.shape[:2] == (6, 8)


def _optimize_setup(tmp_path, lr):
    desc, _ = presets.light_translation_scene(8, 8, 40)
    scene = tmp_path / "toy.yaml"
    save_scene(scene, desc)
    target = tmp_path / "target.tgrd"
    assert main(["render", str(scene), "--spp", "4", "--workers", "1", "--out", str(target)]) == 0
    cfg = tmp_path / "opt.yaml"
    cfg.write_text(f"lr: {lr}\niterations: 4\nspp_interior: 2\nspp_boundary: 0\ntarget: target.tgrd\n"
                   "ground_truth: [0.0]\n")
    return scene, cfg, desc


def test_optimize_lr_zero_keeps_theta(tmp_path, capsys):
    scene, cfg, desc = _optimize_setup(tmp_path, 0.0)
    capsys.readouterr()
    out_scene = tmp_path / "final.yaml"
    assert main(["optimize", str(scene), str(cfg), "--workers", "1", "--out-scene", str(out_scene)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("iteration,theta_")
    summary = json.loads(lines[-1])
    assert list(summary["final_theta"].values()) == [desc.theta[0]]
    assert summary["iterations"] == 4
    assert load_scene(out_scene).theta[0] == desc.theta[0]


def test_optimize_resume_continues(tmp_path, capsys):
    scene, cfg, _ = _optimize_setup(tmp_path, 0.07)
    ck, tr = str(tmp_path / "ck.json"), str(tmp_path / "trace.csv")
    assert main(["optimize", str(scene), str(cfg), "--workers", "1", "--iterations", "2",
                 "--checkpoint", ck, "--trace", tr]) == 0
    assert main(["optimize", str(scene), str(cfg), "--workers", "1", "--checkpoint", ck, "--trace", tr,
                 "--resume"]) == 0
    rows = (tmp_path / "trace.csv").read_text().strip().splitlines()
    assert [int(r.split(",")[0]) for r in rows[1:]] == [0, 1, 2, 3]
    assert main(["optimize", str(scene), str(cfg), "--resume"]) == 3
    (tmp_path / "bad.yaml").write_text("learning_rate: 0.1\n")
    assert main(["optimize", str(scene), str(tmp_path / "bad.yaml")]) == 3
