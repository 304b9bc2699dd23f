"""ADAM inverse rendering against a target transient histogram."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .estimators import TransientHistogram, estimate_gradient, render_forward
from .scene import Scene, SceneDescription


class NonFiniteGradientError(RuntimeError):
    """Raised when an iteration produces a non-finite loss or gradient."""

    def __init__(self, iteration: int, trace: "OptimizeTrace"):
        super().__init__(f"non-finite gradient at iteration {iteration}")
        self.iteration = iteration
        self.trace = trace


@dataclass(frozen=True)
class OptimizeConfig:
    """ADAM settings; ``bounds`` overrides the parameters' own box constraints."""

    lr: float = 0.07
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 60
    spp_interior: int = 16
    spp_boundary: int = 16
    seed: int = 0
    fixed_seed: bool = False
    max_depth: int | None = None
    workers: int | None = None
    bounds: Sequence[tuple[float, float]] | None = None
    target: str | None = None
    loss: str = "rmse"
    trace_path: str | None = None
    checkpoint_path: str | None = None
    decorrelate: bool = True

    def __post_init__(self):
        if not self.lr >= 0.0:
            raise ValueError("learning rate must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.loss != "rmse":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("ADAM betas must lie in [0, 1)")

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizeConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown optimizer keys: {sorted(unknown)}")
        kw = dict(data)
        if kw.get("bounds") is not None:
            kw["bounds"] = tuple(tuple(float(x) for x in b) for b in kw["bounds"])
        return cls(**kw)


@dataclass
class IterationRecord:
    iteration: int
    theta: list
    loss: float
    residual: list | None
    wall_time: float


@dataclass
class OptimizeTrace:
    names: list
    records: list = field(default_factory=list)
    final_theta: list | None = None
    aborted_at: int | None = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    @property
    def thetas(self) -> np.ndarray:
        return np.array([r.theta for r in self.records]).reshape(len(self.records), len(self.names))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        has_res = any(r.residual is not None for r in self.records)
        head = ["iteration"] + [f"theta_{n}" for n in self.names] + ["loss"]
        if has_res:
            head += [f"residual_{n}" for n in self.names]
        w.writerow(head + ["wall_time"])
        for r in self.records:
            row = [r.iteration] + [repr(float(t)) for t in r.theta] + [repr(float(r.loss))]
            if has_res:
                row += [repr(float(x)) for x in (r.residual or [math.nan] * len(self.names))]
            w.writerow(row + [f"{r.wall_time:.6f}"])
        return buf.getvalue()


def _target_array(target) -> np.ndarray:
    if isinstance(target, TransientHistogram):
        return target.intensity
    return np.asarray(target, dtype=np.float64)


def rmse_loss_and_gradient(intensity: np.ndarray, grad: np.ndarray, target: np.ndarray):
    """RMSE over all bins and its chain-rule gradient through per-bin derivatives."""
    if intensity.shape != target.shape:
        raise ValueError(f"histogram shape {intensity.shape} does not match target {target.shape}")
    r = intensity - target
    N = r.size
    loss = float(np.sqrt(np.mean(r * r)))
    d = grad.shape[0]
    if loss == 0.0 or d == 0:
        return loss, np.zeros(d)
    g = np.tensordot(grad.reshape(d, -1), r.ravel(), axes=([1], [0])) / (N * loss)
    return loss, g


def loss_and_gradient(scene: Scene | SceneDescription, target, spp_i: int = 16, spp_b: int = 16,
                      seed: int = 0, max_depth: int | None = None, workers: int | None = None,
                      decorrelate: bool = True):
    """``(loss, dloss/dtheta)`` of the transient-histogram RMSE against ``target``.

    With ``decorrelate`` the residual comes from a second, independently
    seeded render, so its noise is uncorrelated with the derivative estimate
    and the product ``residual * derivative`` is unbiased.  The reported loss
    is the RMSE of that residual render.
    """
    if isinstance(scene, SceneDescription):
        scene = scene.build()
    T = _target_array(target)
    if T.shape != (scene.height, scene.width, scene.frames.n_frames):
        raise ValueError(f"target shape {T.shape} does not match the scene histogram")
    h = estimate_gradient(scene, spp_i=spp_i, spp_b=spp_b, seed=seed, max_depth=max_depth,
                          workers=workers, boundary=spp_b > 0)
    intensity = h.intensity
    if decorrelate:
        rs = int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])
        intensity = render_forward(scene, spp=spp_i, seed=rs, max_depth=max_depth, workers=workers).intensity
    return rmse_loss_and_gradient(intensity, h.grad, T)


def _bounds(desc: SceneDescription, cfg: OptimizeConfig):
    if cfg.bounds is not None:
        if len(cfg.bounds) != len(desc.parameters):
            raise ValueError("bounds must list one (lower, upper) pair per parameter")
        lo = np.array([b[0] for b in cfg.bounds], dtype=np.float64)
        hi = np.array([b[1] for b in cfg.bounds], dtype=np.float64)
    else:
        lo = np.array([p.lower for p in desc.parameters], dtype=np.float64)
        hi = np.array([p.upper for p in desc.parameters], dtype=np.float64)
    return lo, hi


def _iteration_seed(cfg: OptimizeConfig, it: int) -> int:
    if cfg.fixed_seed:
        return cfg.seed
    return int(np.random.SeedSequence([cfg.seed, it]).generate_state(1)[0])


def _write_atomic(path: str, text: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _save(cfg: OptimizeConfig, trace: OptimizeTrace, state: dict):
    if cfg.trace_path:
        _write_atomic(cfg.trace_path, trace.to_csv())
    if cfg.checkpoint_path:
        payload = {"state": state, "trace": {"names": trace.names, "records": [asdict(r) for r in trace.records],
                                             "final_theta": trace.final_theta, "aborted_at": trace.aborted_at}}
        _write_atomic(cfg.checkpoint_path, json.dumps(payload))


def load_checkpoint(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    t = data["trace"]
    trace = OptimizeTrace(t["names"], [IterationRecord(**r) for r in t["records"]], t.get("final_theta"),
                          t.get("aborted_at"))
    return data["state"], trace


def run_adam(scene: SceneDescription, cfg: OptimizeConfig, target=None, ground_truth=None,
             resume: bool = False) -> OptimizeTrace:
    """Run ADAM for ``cfg.iterations`` iterations (counted across resumes).

    Each record holds the parameters the loss was evaluated at.  ``trace.final_theta``
    is the vector after the last update.
    """
    if isinstance(scene, Scene):
        scene = scene.desc.with_theta(scene.theta)
    if target is None:
        if cfg.target is None:
            raise ValueError("no target histogram given")
        from .histogram import read_histogram
        target = read_histogram(cfg.target)
    T = _target_array(target)
    names = [p.name for p in scene.parameters]
    d = len(names)
    lo, hi = _bounds(scene, cfg)
    truth = None if ground_truth is None else np.asarray(ground_truth, dtype=np.float64)
    theta = np.clip(scene.theta, lo, hi)
    m = np.zeros(d)
    v = np.zeros(d)
    start = 0
    trace = OptimizeTrace(names)
    if resume and cfg.checkpoint_path and os.path.exists(cfg.checkpoint_path):
        state, trace = load_checkpoint(cfg.checkpoint_path)
        theta = np.asarray(state["theta"], dtype=np.float64)
        m = np.asarray(state["m"], dtype=np.float64)
        v = np.asarray(state["v"], dtype=np.float64)
        start = int(state["iteration"])
    for it in range(start, cfg.iterations):
        t0 = time.perf_counter()
        loss, g = loss_and_gradient(scene.with_theta(theta), T, cfg.spp_interior, cfg.spp_boundary,
                                    _iteration_seed(cfg, it), cfg.max_depth, cfg.workers, cfg.decorrelate)
        res = None if truth is None else (theta - truth).tolist()
        trace.records.append(IterationRecord(it, theta.tolist(), loss, res, time.perf_counter() - t0))
        if not (math.isfinite(loss) and np.all(np.isfinite(g))):
            trace.aborted_at = it
            trace.final_theta = theta.tolist()
            _save(cfg, trace, {"iteration": it, "theta": theta.tolist(), "m": m.tolist(), "v": v.tolist()})
            raise NonFiniteGradientError(it, trace)
        k = it + 1
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        mh = m / (1.0 - cfg.beta1 ** k)
        vh = v / (1.0 - cfg.beta2 ** k)
        theta = np.clip(theta - cfg.lr * mh / (np.sqrt(vh) + cfg.eps), lo, hi)
        trace.final_theta = theta.tolist()
        _save(cfg, trace, {"iteration": k, "theta": theta.tolist(), "m": m.tolist(), "v": v.tolist()})
    if trace.final_theta is None:
        trace.final_theta = theta.tolist()
    return trace
