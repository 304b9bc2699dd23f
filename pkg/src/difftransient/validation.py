"""Finite-difference gradients and histogram comparison metrics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .estimators import TransientHistogram, render_forward
from .scene import Scene, SceneDescription
from .temporal import FrameSpec

PSNR_IDENTICAL = math.inf


class FdError(ValueError):
    """A perturbed scene could not be built."""


@dataclass(frozen=True)
class FdConfig:
    """Finite-difference settings.

    ``epsilon`` is a scalar or one value per parameter.  With
    ``common_random_numbers`` every render reuses ``seed``; otherwise each
    render gets its own seed.
    """

    epsilon: float | Sequence[float] = 0.01
    scheme: str = "central"
    common_random_numbers: bool = True
    spp: int = 64
    max_depth: int | None = None
    workers: int | None = None

    def __post_init__(self):
        eps = np.atleast_1d(np.asarray(self.epsilon, dtype=np.float64))
        if eps.size == 0 or not np.all(np.isfinite(eps)) or np.any(eps <= 0):
            raise ValueError("epsilon must be positive")
        if self.scheme not in ("central", "forward"):
            raise ValueError(f"unknown finite-difference scheme {self.scheme!r}")
        if self.spp < 1:
            raise ValueError("spp must be >= 1")

    def eps_for(self, d: int) -> np.ndarray:
        eps = np.atleast_1d(np.asarray(self.epsilon, dtype=np.float64))
        if eps.size == 1:
            return np.full(d, eps[0])
        if eps.size != d:
            raise ValueError(f"epsilon has {eps.size} entries for {d} parameters")
        return eps


def central_difference(fn: Callable[[np.ndarray], np.ndarray], theta, eps: float = 1e-5) -> np.ndarray:
    """Jacobian of ``fn`` by central differences; last axis indexes ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    cols = []
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += eps
        tm[i] -= eps
        cols.append((np.asarray(fn(tp)) - np.asarray(fn(tm))) / (2.0 * eps))
    return np.stack(cols, axis=-1)


def _build(desc: SceneDescription, theta, name: str | None) -> Scene:
    try:
        return desc.build(theta)
    except Exception as exc:
        where = f"parameter {name!r}" if name else "base parameters"
        raise FdError(f"perturbed scene invalid for {where} at theta={list(np.round(theta, 12))}: {exc}") from exc


def fd_gradient(scene: Scene | SceneDescription, frames: FrameSpec | None = None,
                cfg: FdConfig = FdConfig(), seed: int = 0) -> TransientHistogram:
    """Difference-quotient gradient of the forward render, one plane per parameter."""
    if isinstance(scene, Scene):
        desc, theta = scene.desc, np.asarray(scene.theta, dtype=np.float64)
    else:
        desc, theta = scene, scene.theta
    if frames is not None:
        desc = desc.with_frames(frames)
    d = len(desc.parameters)
    eps = cfg.eps_for(d) if d else np.zeros(0)
    kw = dict(spp=cfg.spp, max_depth=cfg.max_depth, workers=cfg.workers)
    counter = [0]

    def next_seed():
        if cfg.common_random_numbers:
            return seed
        counter[0] += 1
        return seed + 7919 * counter[0]

    base = render_forward(_build(desc, theta, None), seed=seed, **kw)
    grads = np.zeros((d,) + base.intensity.shape)
    for i, p in enumerate(desc.parameters):
        tp = theta.copy()
        tp[i] += eps[i]
        hp = render_forward(_build(desc, tp, p.name), seed=next_seed(), **kw).intensity
        if cfg.scheme == "central":
            tm = theta.copy()
            tm[i] -= eps[i]
            hm = render_forward(_build(desc, tm, p.name), seed=next_seed(), **kw).intensity
            grads[i] = (hp - hm) / (2.0 * eps[i])
        else:
            if cfg.common_random_numbers:
                h0 = base.intensity
            else:
                h0 = render_forward(_build(desc, theta, None), seed=next_seed(), **kw).intensity
            grads[i] = (hp - h0) / eps[i]
    stats = {"fd_scheme": cfg.scheme, "fd_spp": cfg.spp}
    return TransientHistogram(base.intensity, grads, base.frames, base.c, None, stats)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _plane(h, plane):
    if isinstance(h, TransientHistogram):
        return h.intensity if plane == "intensity" else h.grad[int(plane)]
    return np.asarray(h, dtype=np.float64)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; 0.0 when either side has no variance (1.0 if equal)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


def psnr(rmse: float, peak: float) -> float:
    if rmse == 0.0:
        return PSNR_IDENTICAL
    if peak <= 0.0:
        return -math.inf
    return 20.0 * math.log10(peak / rmse)


@dataclass
class Comparison:
    """Per-frame and aggregate error metrics of ``a`` against reference ``b``."""

    rmse: np.ndarray
    psnr: np.ndarray
    correlation: np.ndarray
    max_abs: np.ndarray
    total_rmse: float
    total_psnr: float
    total_correlation: float
    total_max_abs: float
    diff_counts: np.ndarray
    diff_edges: np.ndarray
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "rmse", "psnr", "correlation", "max_abs"])
        for l in range(len(self.rmse)):
            w.writerow([l, repr(float(self.rmse[l])), repr(float(self.psnr[l])),
                        repr(float(self.correlation[l])), repr(float(self.max_abs[l]))])
        return buf.getvalue()

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lo", "hi", "count"])
        for lo, hi, c in zip(self.diff_edges[:-1], self.diff_edges[1:], self.diff_counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        return buf.getvalue()

    def summary(self) -> str:
        return (f"rmse={self.total_rmse:.6g} psnr={self.total_psnr:.6g} "
                f"correlation={self.total_correlation:.6g} max_abs={self.total_max_abs:.6g}")


def compare(a, b, plane="intensity", bins: int = 64) -> Comparison:
    """Compare two histograms (or same-shape arrays ``(H, W, N_f)``).

    PSNR uses the peak absolute value of ``b``.  Correlation is per frame
    across pixels.  ``plane`` selects ``"intensity"`` or a gradient index.
    """
    x = _plane(a, plane)
    y = _plane(b, plane)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    diff = x - y
    nf = x.shape[-1]
    flat = diff.reshape(-1, nf)
    rmse = np.sqrt(np.mean(flat * flat, axis=0))
    max_abs = np.max(np.abs(flat), axis=0) if flat.size else np.zeros(nf)
    peak_f = np.max(np.abs(y.reshape(-1, nf)), axis=0) if y.size else np.zeros(nf)
    peak = float(np.max(np.abs(y))) if y.size else 0.0
    ps = np.array([psnr(float(r), peak) for r in rmse])
    corr = np.array([pearson(x[..., l], y[..., l]) for l in range(nf)])
    total_rmse = float(np.sqrt(np.mean(diff * diff))) if diff.size else 0.0
    span = float(np.max(np.abs(diff))) if diff.size else 0.0
    counts, edges = np.histogram(diff.ravel(), bins=bins, range=(-span, span) if span > 0 else (-1.0, 1.0))
    return Comparison(rmse, ps, corr, max_abs, total_rmse, psnr(total_rmse, peak), pearson(x, y),
                      span, counts, edges, {"frame_peak": peak_f})


def signal_frames(h, plane=0, fraction: float = 0.05) -> np.ndarray:
    """Frames whose L1 mass is at least ``fraction`` of the strongest frame."""
    x = np.abs(_plane(h, plane))
    mass = x.reshape(-1, x.shape[-1]).sum(axis=0)
    if mass.max() <= 0:
        return np.zeros(0, dtype=np.int64)
    return np.nonzero(mass >= fraction * mass.max())[0]


def mean_and_stderr(samples: np.ndarray):
    """Mean and standard error along axis 0 of independent replicate estimates."""
    s = np.asarray(samples, dtype=np.float64)
    k = s.shape[0]
    if k < 2:
        raise ValueError("need at least two replicates")
    return s.mean(axis=0), s.std(axis=0, ddof=1) / math.sqrt(k)
