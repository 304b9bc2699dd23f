"""Forward-mode derivative carrier.

A :class:`Dual` holds a value array ``v`` and a gradient array ``g`` whose
shape is ``v.shape + (n,)``: one trailing slot per derivative channel.  The
same class serves single scalars (``v.shape == ()``), 3-vectors
(``v.shape == (3,)``) and batches of either, so the per-path transport code
and the vectorized estimators share one implementation.

Vector-valued duals keep the 3 components on the last *value* axis.  Use
:meth:`Dual.expand` to broadcast a scalar dual against a vector dual.
"""
from __future__ import annotations

import numpy as np


def _arr(x):
    return np.asarray(x, dtype=np.float64)


class Dual:
    __slots__ = ("v", "g")
    # make ndarray (op) Dual defer to the reflected Dual operators
    __array_ufunc__ = None

    def __init__(self, v, g=None, n: int | None = None):
        self.v = _arr(v)
        if g is None:
            if n is None:
                raise ValueError("either a gradient array or a channel count is required")
            g = np.zeros(self.v.shape + (n,))
        self.g = _arr(g)

    # -- construction ------------------------------------------------------
    @staticmethod
    def const(v, n: int) -> "Dual":
        return Dual(v, n=n)

    @staticmethod
    def variable(v, index: int, n: int) -> "Dual":
        """Scalar seeded with a unit tangent in channel ``index``."""
        d = Dual(v, n=n)
        d.g[..., index] = 1.0
        return d

    @property
    def n(self) -> int:
        return self.g.shape[-1]

    @property
    def shape(self):
        return self.v.shape

    def __repr__(self):
        return f"Dual(v={self.v!r}, g={self.g!r})"

    def copy(self) -> "Dual":
        return Dual(self.v.copy(), self.g.copy())

    def __getitem__(self, idx) -> "Dual":
        # Index only value axes; the channel axis is always kept.
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.v[idx], self.g[idx + (slice(None),)])

    def expand(self) -> "Dual":
        """Append a unit value axis (scalar batch -> broadcastable vector)."""
        return Dual(self.v[..., None], self.g[..., None, :])

    def _coerce(self, other) -> "Dual":
        if isinstance(other, Dual):
            return other
        o = _arr(other)
        return Dual(o, np.zeros(o.shape + (self.n,)))

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        if not isinstance(other, Dual):
            v = self.v + _arr(other)
            g = self.g if v.shape == self.v.shape else np.broadcast_to(self.g, v.shape + (self.n,))
            return Dual(v, g)
        return Dual(self.v + other.v, self.g + other.g)

    __radd__ = __add__

    def __sub__(self, other):
        if not isinstance(other, Dual):
            return self + (-_arr(other))
        return Dual(self.v - other.v, self.g - other.g)

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return Dual(-self.v, -self.g)

    def __mul__(self, other):
        if not isinstance(other, Dual):
            o = _arr(other)
            return Dual(self.v * o, self.g * o[..., None])
        return Dual(self.v * other.v,
                    self.g * other.v[..., None] + self.v[..., None] * other.g)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Dual):
            o = _arr(other)
            return Dual(self.v / o, self.g / o[..., None])
        inv = 1.0 / other.v
        v = self.v * inv
        g = (self.g - v[..., None] * other.g) * inv[..., None]
        return Dual(v, g)

    def __rtruediv__(self, other):
        inv = 1.0 / self.v
        o = _arr(other)
        v = o * inv
        return Dual(v, -(v * inv)[..., None] * self.g)

    def __pow__(self, p: float):
        v = self.v ** p
        dv = p * self.v ** (p - 1.0) if p != 0 else np.zeros_like(self.v)
        return Dual(v, dv[..., None] * self.g)

    # -- elementwise functions ------------------------------------------------
    def sqrt(self) -> "Dual":
        s = np.sqrt(self.v)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(s > 0, 0.5 / np.where(s > 0, s, 1.0), 0.0)
        return Dual(s, d[..., None] * self.g)

    def exp(self) -> "Dual":
        e = np.exp(self.v)
        return Dual(e, e[..., None] * self.g)

    def abs(self) -> "Dual":
        s = np.sign(self.v)
        return Dual(np.abs(self.v), s[..., None] * self.g)

    def scale_by_sign(self, s) -> "Dual":
        s = _arr(s)
        return Dual(self.v * s, self.g * s[..., None])

    def sum(self, axis=-1) -> "Dual":
        ax = axis if axis >= 0 else self.v.ndim + axis
        return Dual(self.v.sum(axis=ax), self.g.sum(axis=ax))

    def where(self, mask, other) -> "Dual":
        """Select ``self`` where ``mask`` is true, ``other`` elsewhere."""
        other = self._coerce(other)
        m = np.asarray(mask, dtype=bool)
        return Dual(np.where(m, self.v, other.v), np.where(m[..., None], self.g, other.g))

    def take(self, idx) -> "Dual":
        """Gather along the first value axis."""
        return Dual(self.v[idx], self.g[idx])


# -- 3-vector helpers (value axis -1 has length 3) ------------------------------

def dot(a: Dual, b) -> Dual:
    if not isinstance(b, Dual):
        b = _arr(b)
        return Dual((a.v * b).sum(-1), (a.g * b[..., None]).sum(-2))
    return Dual((a.v * b.v).sum(-1),
                (a.g * b.v[..., None] + a.v[..., None] * b.g).sum(-2))


def cross(a: Dual, b: Dual) -> Dual:
    if not isinstance(b, Dual):
        b = a._coerce(b)
    if not isinstance(a, Dual):
        a = b._coerce(a)
    av, bv, ag, bg = a.v, b.v, a.g, b.g
    av, bv = np.broadcast_arrays(av, bv)
    v = np.cross(av, bv)
    g = (_cross_g(ag, bv[..., None]) + _cross_g(av[..., None], bg))
    return Dual(v, g)


def _cross_g(x, y):
    # cross product along axis -2 (the 3-axis) with a trailing channel axis
    x0, x1, x2 = x[..., 0, :], x[..., 1, :], x[..., 2, :]
    y0, y1, y2 = y[..., 0, :], y[..., 1, :], y[..., 2, :]
    return np.stack([x1 * y2 - x2 * y1, x2 * y0 - x0 * y2, x0 * y1 - x1 * y0], axis=-2)


def norm(a: Dual) -> Dual:
    return dot(a, a).sqrt()


def normalize(a: Dual) -> Dual:
    return a / norm(a).expand()


def vec(v, g=None, n: int | None = None) -> Dual:
    return Dual(v, g, n)
