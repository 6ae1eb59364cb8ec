"""Globally hyperbolic 1+1 cylinder slabs.

Coordinates are (t, x) with x periodic of period ``L`` and metric signature
(+, -).  Index 0 is time, index 1 is space throughout.  Field arrays have
shape ``(n_t + 1, n_x)``: one row per time level.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


class GeometryError(ValueError):
    pass


class InvalidMetricError(GeometryError):
    pass


class OutOfDomainError(GeometryError):
    pass


class StabilityError(GeometryError):
    pass


def periodic_diff(x, c, L):
    """Signed distance x - c folded into [-L/2, L/2)."""
    return (np.asarray(x, dtype=float) - c + 0.5 * L) % L - 0.5 * L


# ---------------------------------------------------------------- bumps

def bump(u):
    """C-infinity bump exp(1 - 1/(1 - u^2)) on |u| < 1, zero outside, bump(0) = 1."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    q = 1.0 - u[inside] ** 2
    out[inside] = np.exp(1.0 - 1.0 / q)
    return out


def bump_derivatives(u):
    """Return (b, b', b'') of :func:`bump`."""
    u = np.asarray(u, dtype=float)
    b = bump(u)
    d1 = np.zeros_like(u)
    d2 = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    ui = u[inside]
    q = 1.0 - ui ** 2
    s = -2.0 * ui / q ** 2
    bi = b[inside]
    d1[inside] = bi * s
    d2[inside] = bi * (s ** 2 - 2.0 / q ** 2 - 8.0 * ui ** 2 / q ** 3)
    return b, d1, d2


@dataclass(frozen=True)
class Bump:
    """Separable bump amp * b((t - tc)/wt) * b((x - xc)/wx), periodic in x."""

    tc: float
    xc: float
    wt: float
    wx: float
    L: float = TWO_PI
    amp: float = 1.0

    def __post_init__(self):
        if self.wt <= 0 or self.wx <= 0:
            raise ValueError("bump widths must be positive")
        if self.wx >= 0.5 * self.L:
            raise ValueError("bump wraps around the circle")

    def __call__(self, t, x):
        return self.derivatives(t, x)["f"]

    def derivatives(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        bt, bt1, bt2 = bump_derivatives((t - self.tc) / self.wt)
        bx, bx1, bx2 = bump_derivatives(periodic_diff(x, self.xc, self.L) / self.wx)
        a = self.amp
        return {
            "f": a * bt * bx,
            "t": a * bt1 * bx / self.wt,
            "x": a * bt * bx1 / self.wx,
            "tt": a * bt2 * bx / self.wt ** 2,
            "tx": a * bt1 * bx1 / (self.wt * self.wx),
            "xx": a * bt * bx2 / self.wx ** 2,
        }

    @property
    def t_support(self):
        return (self.tc - self.wt, self.tc + self.wt)


# ---------------------------------------------------------------- grid

@dataclass(frozen=True)
class Grid:
    """Time levels t0 + j*dt, j = 0..n_t, and n_x periodic nodes i*L/n_x."""

    n_t: int
    n_x: int
    dt: float
    t0: float = 0.0
    L: float = TWO_PI

    def __post_init__(self):
        if self.n_x < 8 or self.n_t < 2:
            raise GeometryError("grid needs n_x >= 8 and n_t >= 2")
        if self.dt <= 0 or self.L <= 0:
            raise GeometryError("dt and L must be positive")

    @classmethod
    def slab(cls, n_x: int, n_t: int, duration: float, t0: float = 0.0, L: float = TWO_PI):
        return cls(n_t=n_t, n_x=n_x, dt=duration / n_t, t0=t0, L=L)

    @property
    def dx(self) -> float:
        return self.L / self.n_x

    @property
    def shape(self):
        return (self.n_t + 1, self.n_x)

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_t + 1)

    @property
    def x(self) -> np.ndarray:
        return self.dx * np.arange(self.n_x)

    @property
    def t_end(self) -> float:
        return self.t0 + self.n_t * self.dt

    def mesh(self):
        return np.meshgrid(self.t, self.x, indexing="ij")

    def level(self, t: float) -> int:
        """Index of the time level at ``t``; raises if ``t`` is off the grid."""
        j = (t - self.t0) / self.dt
        k = int(round(j))
        if abs(j - k) > 1e-6 or k < 0 or k > self.n_t:
            raise OutOfDomainError(f"t={t} is not a time level of the slab")
        return k

    def nearest_level(self, t: float) -> int:
        return int(np.clip(round((t - self.t0) / self.dt), 0, self.n_t))

    def refine(self, factor: int = 2) -> "Grid":
        return Grid(self.n_t * factor, self.n_x * factor, self.dt / factor, self.t0, self.L)

    def sub(self, j0: int, j1: int) -> "Grid":
        """Sub-slab of levels j0..j1 inclusive."""
        if not 0 <= j0 < j1 <= self.n_t:
            raise OutOfDomainError("sub-slab outside the grid")
        return Grid(j1 - j0, self.n_x, self.dt, self.t0 + j0 * self.dt, self.L)

    def check_cfl(self, c_max: float, factor: float = 0.5):
        if self.dt > factor * self.dx / c_max * (1 + 1e-12):
            raise StabilityError(
                f"CFL violated: dt={self.dt:.4g} > {factor}*dx/c_max={factor * self.dx / c_max:.4g}"
            )


# ---------------------------------------------------------------- finite differences

def d_t(f, dt):
    """Centered d/dt along axis 0, one-sided second order at the two ends."""
    f = np.asarray(f)
    out = np.empty(f.shape, dtype=np.result_type(f, float))
    out[1:-1] = (f[2:] - f[:-2]) / (2.0 * dt)
    out[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * dt)
    out[-1] = (3.0 * f[-1] - 4.0 * f[-2] + f[-3]) / (2.0 * dt)
    return out


def d_x(f, dx):
    return (np.roll(f, -1, axis=-1) - np.roll(f, 1, axis=-1)) / (2.0 * dx)


# ---------------------------------------------------------------- metric

MetricFn = Callable[[np.ndarray, np.ndarray], tuple]


@dataclass(frozen=True, eq=False)
class Metric:
    """Lower-index components g_tt, g_tx, g_xx on the grid.

    ``fn`` optionally evaluates the same metric off the grid; it is used by
    the flow pullback.  ``tag`` records provenance.
    """

    g_tt: np.ndarray
    g_tx: np.ndarray
    g_xx: np.ndarray
    tag: str = "background"
    fn: MetricFn | None = None

    @classmethod
    def from_function(cls, grid: Grid, fn: MetricFn, tag="background") -> "Metric":
        T, X = grid.mesh()
        gtt, gtx, gxx = fn(T, X)
        full = lambda a: np.broadcast_to(np.asarray(a, float), grid.shape).copy()
        return cls(full(gtt), full(gtx), full(gxx), tag, fn)

    @classmethod
    def flat(cls, grid: Grid) -> "Metric":
        return cls.from_function(grid, flat_fn)

    @property
    def shape(self):
        return self.g_tt.shape

    @cached_property
    def det(self) -> np.ndarray:
        return self.g_tt * self.g_xx - self.g_tx ** 2

    @cached_property
    def sqrt_neg_det(self) -> np.ndarray:
        return np.sqrt(-self.det)

    @cached_property
    def inverse(self):
        """Upper-index components (g^tt, g^tx, g^xx)."""
        d = self.det
        return self.g_xx / d, -self.g_tx / d, self.g_tt / d

    def validate(self):
        if not (np.all(np.isfinite(self.g_tt)) and np.all(np.isfinite(self.g_tx))
                and np.all(np.isfinite(self.g_xx))):
            raise InvalidMetricError("non-finite metric component")
        if np.any(self.det >= 0):
            raise InvalidMetricError("metric is not Lorentzian at some node")
        if np.any(self.inverse[0] <= 0):
            raise InvalidMetricError("g^tt <= 0: constant-t slices are not spacelike")
        return self

    def characteristic_speeds(self):
        """Null slopes dx/dt solving g_tt + 2 g_tx v + g_xx v^2 = 0 (left, right)."""
        disc = np.sqrt(self.g_tx ** 2 - self.g_tt * self.g_xx)
        v1 = (-self.g_tx + disc) / self.g_xx
        v2 = (-self.g_tx - disc) / self.g_xx
        return np.minimum(v1, v2), np.maximum(v1, v2)

    @cached_property
    def c_max(self) -> float:
        lo, hi = self.characteristic_speeds()
        return float(max(np.max(np.abs(lo)), np.max(np.abs(hi))))

    def is_flat(self, tol=1e-13) -> bool:
        return bool(np.max(np.abs(self.g_tt - 1)) <= tol and np.max(np.abs(self.g_tx)) <= tol
                    and np.max(np.abs(self.g_xx + 1)) <= tol)

    def components(self):
        return self.g_tt, self.g_tx, self.g_xx

    def sub(self, j0: int, j1: int) -> "Metric":
        return Metric(self.g_tt[j0:j1 + 1].copy(), self.g_tx[j0:j1 + 1].copy(),
                      self.g_xx[j0:j1 + 1].copy(), self.tag, self.fn)

    def evaluate(self, t, x):
        if self.fn is None:
            raise GeometryError("metric has no off-grid evaluator")
        t, x = np.broadcast_arrays(t, x)
        return tuple(np.broadcast_to(np.asarray(c, float), t.shape) for c in self.fn(t, x))


def flat_fn(t, x):
    one = np.ones_like(np.asarray(t, float))
    return one, 0.0 * one, -one


def conformal_fn(omega: Bump | Callable) -> MetricFn:
    """e^{2 omega} diag(1, -1)."""

    def fn(t, x):
        w = np.exp(2.0 * omega(t, x))
        return w, 0.0 * w, -w

    return fn


def volume_element(metric: Metric) -> np.ndarray:
    """sqrt(-det g) per node."""
    metric.validate()
    return metric.sqrt_neg_det


def scalar_curvature(metric: Metric, grid: Grid) -> np.ndarray:
    """Ricci scalar from centered differences of the Christoffel symbols.

    Convention: R^r_{smn} = d_m G^r_{ns} - d_n G^r_{ms} + G^r_{ml} G^l_{ns}
    - G^r_{nl} G^l_{ms}, R_{sn} = R^m_{smn}, R = g^{sn} R_{sn}, signature (+,-).
    With this choice e^{2w} diag(1,-1) has R = -2 e^{-2w} (d_t^2 - d_x^2) w.
    """
    metric.validate()
    return curvature_from_components(metric.g_tt, metric.g_tx, metric.g_xx, grid)


def curvature_from_components(g_tt, g_tx, g_xx, grid: Grid) -> np.ndarray:
    """Unvalidated core of :func:`scalar_curvature`; accepts complex components."""
    g = [[g_tt, g_tx], [g_tx, g_xx]]
    det = g_tt * g_xx - g_tx ** 2
    gi = [[g_xx / det, -g_tx / det], [-g_tx / det, g_tt / det]]
    D = (lambda f: d_t(f, grid.dt), lambda f: d_x(f, grid.dx))
    dg = [[[D[l](g[a][b]) for b in range(2)] for a in range(2)] for l in range(2)]
    # Gamma[l][a][b] = G^l_{ab}
    gam = [[[sum(0.5 * gi[l][s] * (dg[a][s][b] + dg[b][s][a] - dg[s][a][b]) for s in range(2))
             for b in range(2)] for a in range(2)] for l in range(2)]
    R = np.zeros(grid.shape, dtype=np.result_type(g_tt, g_tx, g_xx, float))
    for a in range(2):
        for b in range(2):
            ric = 0.0
            for l in range(2):
                ric = ric + D[l](gam[l][a][b]) - D[b](gam[l][a][l])
                for s in range(2):
                    ric = ric + gam[l][l][s] * gam[s][a][b] - gam[l][b][s] * gam[s][a][l]
            R = R + gi[a][b] * ric
    return R


# ---------------------------------------------------------------- spacetime

@dataclass(frozen=True, eq=False)
class Spacetime:
    """Grid + metric + field parameters (mass m, curvature coupling xi)."""

    grid: Grid
    metric: Metric
    m: float = 1.0
    xi: float = 0.0
    cfl: float = 0.5

    def __post_init__(self):
        if self.metric.shape != self.grid.shape:
            raise GeometryError("metric shape does not match the grid")
        if self.m < 0 or self.xi < 0:
            raise GeometryError("m and xi must be non-negative")
        self.metric.validate()
        self.grid.check_cfl(self.metric.c_max, self.cfl)

    @classmethod
    def flat(cls, grid: Grid, m=1.0, xi=0.0, cfl=0.5):
        return cls(grid, Metric.flat(grid), m, xi, cfl)

    @classmethod
    def from_function(cls, grid: Grid, fn: MetricFn, m=1.0, xi=0.0, tag="background", cfl=0.5):
        return cls(grid, Metric.from_function(grid, fn, tag), m, xi, cfl)

    @cached_property
    def volume(self) -> np.ndarray:
        return self.metric.sqrt_neg_det

    @cached_property
    def curvature(self) -> np.ndarray:
        if self.metric.is_flat():
            return np.zeros(self.grid.shape)
        return scalar_curvature(self.metric, self.grid)

    def with_metric(self, metric: Metric) -> "Spacetime":
        return Spacetime(self.grid, metric, self.m, self.xi, self.cfl)

    def sub_slab(self, j0: int, j1: int) -> "Spacetime":
        return Spacetime(self.grid.sub(j0, j1), self.metric.sub(j0, j1), self.m, self.xi, self.cfl)

    def same_physics(self, other: "Spacetime") -> bool:
        return self.m == other.m and self.xi == other.xi

    def refine(self, factor: int = 2) -> "Spacetime":
        if self.metric.fn is None:
            raise GeometryError("refinement needs an analytic metric")
        grid = self.grid.refine(factor)
        return Spacetime(grid, Metric.from_function(grid, self.metric.fn, self.metric.tag),
                         self.m, self.xi, self.cfl)


# ---------------------------------------------------------------- regions

@dataclass(frozen=True)
class Region:
    """Diamond (open causal diamond), Strip [t_a, t_b], Whole slab, Union or Mask."""

    kind: str
    center: tuple = (0.0, 0.0)
    radius: float = 0.0
    t_a: float = 0.0
    t_b: float = 0.0
    parts: tuple = ()
    mask: np.ndarray | None = field(default=None, compare=False)

    @classmethod
    def diamond(cls, t: float, x: float, radius: float):
        return cls("diamond", center=(float(t), float(x)), radius=float(radius))

    @classmethod
    def strip(cls, t_a: float, t_b: float):
        if not t_a < t_b:
            raise GeometryError("strip needs t_a < t_b")
        return cls("strip", t_a=float(t_a), t_b=float(t_b))

    @classmethod
    def whole(cls):
        return cls("whole")

    @classmethod
    def union(cls, *parts: "Region"):
        return cls("union", parts=tuple(parts))

    @classmethod
    def from_mask(cls, mask: np.ndarray):
        return cls("mask", mask=np.asarray(mask, bool))

    def check(self, grid: Grid):
        if self.kind == "diamond":
            if not 0 < self.radius < 0.5 * grid.L:
                raise GeometryError("diamond radius must lie in (0, L/2)")
            tc = self.center[0]
            if tc - self.radius < grid.t0 - 1e-12 or tc + self.radius > grid.t_end + 1e-12:
                raise OutOfDomainError("diamond leaves the slab")
        elif self.kind == "strip":
            if self.t_a < grid.t0 - 1e-12 or self.t_b > grid.t_end + 1e-12:
                raise OutOfDomainError("strip leaves the slab")
        elif self.kind == "union":
            for p in self.parts:
                p.check(grid)
        elif self.kind == "mask":
            if self.mask.shape != grid.shape:
                raise OutOfDomainError("mask does not match grid")
        return self

    def contains(self, t, x, L: float = TWO_PI):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        if self.kind == "diamond":
            tc, xc = self.center
            return np.abs(t - tc) + np.abs(periodic_diff(x, xc, L)) < self.radius
        if self.kind == "strip":
            return (t >= self.t_a) & (t <= self.t_b)
        if self.kind == "whole":
            return np.ones(t.shape, bool)
        if self.kind == "union":
            out = np.zeros(t.shape, bool)
            for p in self.parts:
                out |= p.contains(t, x, L)
            return out
        raise GeometryError("mask regions are evaluated with node_mask")

    def node_mask(self, grid: Grid) -> np.ndarray:
        if self.kind == "mask":
            return self.mask
        T, X = grid.mesh()
        return self.contains(T, X, grid.L)

    def vertices(self):
        """Past and future tips of a diamond."""
        tc, xc = self.center
        return (tc - self.radius, xc), (tc + self.radius, xc)


def _causally_related(p, q, L, c=1.0):
    """True if q lies strictly inside the future or past cone of p (speed c)."""
    dt = q[0] - p[0]
    return abs(periodic_diff(q[1], p[1], L)) < c * abs(dt)


def _cones_inside_flat(metric: Metric, mask: np.ndarray) -> bool:
    lo, hi = metric.characteristic_speeds()
    return bool(np.all(lo[mask] >= -1 - 1e-12) and np.all(hi[mask] <= 1 + 1e-12))


def is_causally_convex(region: Region, spacetime: Spacetime) -> bool:
    """Causal convexity of a region.

    Exact for diamonds, strips and unions of diamonds on the flat cylinder.
    On a curved metric a diamond is accepted when the metric light cones lie
    inside the flat ones throughout J+(O) ∩ J-(O) (cone bound
    with the maximal characteristic speed); this is sufficient, not
    necessary.
    """
    grid = spacetime.grid
    region.check(grid)
    flat = spacetime.metric.is_flat()
    if region.kind in ("strip", "whole"):
        return True  # constant-t slices are Cauchy whenever g^tt > 0
    if region.kind == "diamond":
        if flat:
            return True
        # causal curves between points of O stay in J+(O) ∩ J-(O)
        hull = causal_hull(region, spacetime, "future") & causal_hull(region, spacetime, "past")
        return _cones_inside_flat(spacetime.metric, hull)
    if region.kind == "union":
        parts = region.parts
        if not all(p.kind == "diamond" for p in parts):
            raise GeometryError("unions are supported for diamonds only")
        if not all(is_causally_convex(p, spacetime) for p in parts):
            return False
        for i, a in enumerate(parts):
            for b in parts[i + 1:]:
                if _diamonds_overlap(a, b, grid.L):
                    raise GeometryError("union parts must be disjoint")
                pa, qa = a.vertices()
                pb, qb = b.vertices()
                # some point of b in J+(a) iff the top of b sees the bottom of a
                if _causally_related(pa, qb, grid.L) and qb[0] > pa[0]:
                    return False
                if _causally_related(pb, qa, grid.L) and qa[0] > pb[0]:
                    return False
        return True
    raise GeometryError(f"causal convexity not implemented for {region.kind}")


def _diamonds_overlap(a: Region, b: Region, L: float) -> bool:
    (ta, xa), (tb, xb) = a.center, b.center
    # in null coordinates u = t - x, v = t + x a diamond is a square
    dxab = periodic_diff(xb, xa, L)
    du = abs((tb - ta) - dxab)
    dv = abs((tb - ta) + dxab)
    return du < a.radius + b.radius and dv < a.radius + b.radius


def causal_hull(region: Region | np.ndarray, spacetime: Spacetime, direction: str = "both",
                margin: float | None = None) -> np.ndarray:
    """Node mask covering J^+/J^- of a region (or of a node mask).

    Cones open with the maximal characteristic speed of the metric, so the
    bound is exact on the flat cylinder and conservative otherwise.  The
    default margin of one spatial step absorbs the gap between the last
    nonzero node and the true edge of a support.
    """
    grid = spacetime.grid
    base = region if isinstance(region, np.ndarray) else region.node_mask(grid)
    base = np.asarray(base, bool)
    if base.shape != grid.shape:
        raise OutOfDomainError("mask does not match the grid")
    if margin is None:
        margin = grid.dx
    c = max(1.0, spacetime.metric.c_max)
    if direction == "both":
        return (_hull_sweep(base, grid, c, margin, +1)
                | _hull_sweep(base, grid, c, margin, -1))
    if direction == "future":
        return _hull_sweep(base, grid, c, margin, +1)
    if direction == "past":
        return _hull_sweep(base, grid, c, margin, -1)
    raise ValueError("direction must be future, past or both")


def _row_distance(row: np.ndarray, dx: float, L: float) -> np.ndarray:
    idx = np.flatnonzero(row)
    if idx.size == 0:
        return np.full(row.shape, np.inf)
    i = np.arange(row.size)
    d = np.abs(i[:, None] - idx[None, :]) * dx
    d = np.minimum(d, L - d)
    return d.min(axis=1)


def _hull_sweep(base, grid, c, margin, sign):
    n = grid.n_t + 1
    out = np.zeros(grid.shape, bool)
    D = np.full(grid.n_x, np.inf)
    order = range(n) if sign > 0 else range(n - 1, -1, -1)
    for j in order:
        D = np.minimum(D - c * grid.dt, _row_distance(base[j], grid.dx, grid.L))
        out[j] = D <= margin
    return out


# ---------------------------------------------------------------- embeddings

@dataclass(frozen=True, eq=False)
class Embedding:
    """Lattice translation (shift_t levels, shift_x nodes) of a slab into a slab.

    The source slab's level j sits on the target's level j + shift_t, and the
    source node i on the target node i + shift_x (mod n_x).  Reflections are
    not admissible morphisms and are rejected.
    """

    source: Spacetime
    target: Spacetime
    shift_t: int = 0
    shift_x: int = 0
    orientation: int = 1

    def __post_init__(self):
        if self.orientation != 1:
            raise GeometryError("reflections do not preserve (time-)orientation")
        gs, gt = self.source.grid, self.target.grid
        if gs.n_x != gt.n_x or abs(gs.dt - gt.dt) > 1e-14 * gt.dt or abs(gs.L - gt.L) > 1e-14:
            raise GeometryError("embedding needs matching lattices")
        if not self.source.same_physics(self.target):
            raise GeometryError("m and xi must agree across the category")
        if self.shift_t < 0 or self.shift_t + gs.n_t > gt.n_t:
            raise OutOfDomainError("image leaves the target slab")
        dev = self.isometry_defect()
        if dev > 1e-12:
            raise GeometryError(f"not an isometry (defect {dev:.3g})")

    @classmethod
    def identity(cls, st: Spacetime) -> "Embedding":
        return cls(st, st, 0, 0)

    @classmethod
    def inclusion(cls, target: Spacetime, j0: int, j1: int) -> "Embedding":
        return cls(target.sub_slab(j0, j1), target, j0, 0)

    @property
    def delta_t(self) -> float:
        return self.target.grid.t0 + self.shift_t * self.target.grid.dt - self.source.grid.t0

    @property
    def delta_x(self) -> float:
        return self.shift_x * self.target.grid.dx

    @property
    def image(self) -> Region:
        gt = self.target.grid
        j0 = self.shift_t
        return Region.strip(gt.t[j0], gt.t[j0 + self.source.grid.n_t])

    def pull_target(self, field: np.ndarray) -> np.ndarray:
        """Restrict a target field to the image and read it in source nodes."""
        j0 = self.shift_t
        sub = field[j0:j0 + self.source.grid.n_t + 1]
        return np.roll(sub, -self.shift_x, axis=-1)

    def push_forward(self, f: np.ndarray) -> np.ndarray:
        """psi_* f = f o psi^{-1}, extended by zero outside the image (leading axes kept)."""
        f = np.asarray(f)
        out = np.zeros(f.shape[:-2] + self.target.grid.shape, dtype=np.result_type(f, float))
        j0 = self.shift_t
        out[..., j0:j0 + self.source.grid.n_t + 1, :] = np.roll(f, self.shift_x, axis=-1)
        return out

    def isometry_defect(self) -> float:
        ms = self.source.metric
        mt = self.target.metric
        return float(max(np.max(np.abs(self.pull_target(a) - b))
                         for a, b in zip(mt.components(), ms.components())))

    def map_point(self, t, x):
        return t + self.delta_t, (x + self.delta_x) % self.target.grid.L

    def then(self, other: "Embedding") -> "Embedding":
        """other o self."""
        if other.source is not self.target:
            raise GeometryError("embeddings are not composable")
        return Embedding(self.source, other.target, self.shift_t + other.shift_t,
                         (self.shift_x + other.shift_x) % self.target.grid.n_x)

    def is_identity(self) -> bool:
        return self.source is self.target and self.shift_t == 0 and self.shift_x % self.target.grid.n_x == 0


# ---------------------------------------------------------------- perturbations and flows

@dataclass(frozen=True, eq=False)
class Perturbation:
    """Symmetric tensor h_{mu nu} with temporal support in (t_minus, t_plus)."""

    h_tt: np.ndarray
    h_tx: np.ndarray
    h_xx: np.ndarray
    t_minus: float
    t_plus: float
    scale: float = 1.0
    fn: MetricFn | None = None

    @classmethod
    def from_function(cls, grid: Grid, fn: MetricFn, t_minus: float, t_plus: float, scale=1.0):
        T, X = grid.mesh()
        comps = [np.broadcast_to(np.asarray(c, float), grid.shape).copy() for c in fn(T, X)]
        return cls(*comps, t_minus, t_plus, scale, fn)

    @classmethod
    def zero(cls, grid: Grid):
        z = np.zeros(grid.shape)
        return cls(z, z.copy(), z.copy(), grid.t0, grid.t0, 1.0, lambda t, x: (0 * t, 0 * t, 0 * t))

    def components(self):
        s = self.scale
        return s * self.h_tt, s * self.h_tx, s * self.h_xx

    def scaled(self, s: float) -> "Perturbation":
        return Perturbation(self.h_tt, self.h_tx, self.h_xx, self.t_minus, self.t_plus,
                            self.scale * s, self.fn)

    def apply(self, metric: Metric, s: float = 1.0) -> Metric:
        """Metric g + s * scale * h, validated, tagged perturbed."""
        a = s * self.scale
        fn = None
        if metric.fn is not None and self.fn is not None:
            mfn, pfn = metric.fn, self.fn

            def fn(t, x):
                g = mfn(t, x)
                h = pfn(t, x)
                return tuple(gi + a * hi for gi, hi in zip(g, h))
        out = Metric(metric.g_tt + a * self.h_tt, metric.g_tx + a * self.h_tx,
                     metric.g_xx + a * self.h_xx, "perturbed", fn)
        return out.validate()

    def norm(self, grid: Grid) -> float:
        tt, tx, xx = self.components()
        return float(np.sqrt(np.sum(tt ** 2 + 2 * tx ** 2 + xx ** 2) * grid.dt * grid.dx))

    def support_mask(self) -> np.ndarray:
        tt, tx, xx = self.components()
        return (tt != 0) | (tx != 0) | (xx != 0)

    def is_zero(self) -> bool:
        return self.scale == 0 or not self.support_mask().any()


def tensor_bump(grid: Grid, b: Bump, amps: Sequence[float] = (1.0, 0.5, 0.3)) -> Perturbation:
    """h_{mu nu} = amps * bump, with (tt, tx, xx) amplitudes."""
    a_tt, a_tx, a_xx = amps

    def fn(t, x):
        v = b(t, x)
        return a_tt * v, a_tx * v, a_xx * v

    return Perturbation.from_function(grid, fn, *b.t_support)


@dataclass(frozen=True, eq=False)
class VectorFieldX:
    """Compactly supported vector field X^mu = (a_t, a_x) * bump(t, x)."""

    bump: Bump
    a_t: float = 1.0
    a_x: float = 0.0

    def __call__(self, t, x):
        v = self.bump(t, x)
        return self.a_t * v, self.a_x * v

    def jacobian(self, t, x):
        """dX^mu/dx^nu as nested lists [[dXt/dt, dXt/dx], [dXx/dt, dXx/dx]]."""
        d = self.bump.derivatives(t, x)
        return [[self.a_t * d["t"], self.a_t * d["x"]], [self.a_x * d["t"], self.a_x * d["x"]]]

    def on_grid(self, grid: Grid):
        T, X = grid.mesh()
        return self(T, X)

    @property
    def t_support(self):
        return self.bump.t_support

    def is_zero(self) -> bool:
        return self.a_t == 0 and self.a_x == 0


def lie_derivative_metric(X: VectorFieldX, metric: Metric, grid: Grid) -> Perturbation:
    """(L_X g)_{mu nu} = X^l d_l g_{mu nu} + g_{l nu} d_mu X^l + g_{mu l} d_nu X^l.

    Equal to nabla_mu X_nu + nabla_nu X_mu.  Derivatives are centered
    differences on the grid.
    """
    Xt, Xx = X.on_grid(grid)
    Xv = (Xt, Xx)
    D = (lambda f: d_t(f, grid.dt), lambda f: d_x(f, grid.dx))
    g = [[metric.g_tt, metric.g_tx], [metric.g_tx, metric.g_xx]]
    dX = [[D[n](Xv[l]) for n in range(2)] for l in range(2)]  # dX[l][n] = d_n X^l

    def comp(mu, nu):
        out = sum(Xv[l] * D[l](g[mu][nu]) for l in range(2))
        out = out + sum(g[l][nu] * dX[l][mu] + g[mu][l] * dX[l][nu] for l in range(2))
        return out

    return Perturbation(comp(0, 0), comp(0, 1), comp(1, 1), *X.t_support)


def flow(X: VectorFieldX, s: float, t, x, dt_max: float):
    """Time-s flow of X from (t, x) with its Jacobian, by classical RK4.

    Returns (t_s, x_s, J) where J[a][b] = d(phi^a)/d(x^b).
    """
    t = np.array(t, dtype=float)
    x = np.array(x, dtype=float)
    n = max(1, int(np.ceil(abs(s) / dt_max)))
    h = s / n
    one, zero = np.ones_like(t), np.zeros_like(t)
    J = np.array([[one, zero], [zero, one]])

    def rhs(y0, y1, Jm):
        v0, v1 = X(y0, y1)
        dX = X.jacobian(y0, y1)
        dJ = np.einsum("ab...,bc...->ac...", np.array(dX), Jm)
        return v0, v1, dJ

    for _ in range(n):
        k1 = rhs(t, x, J)
        k2 = rhs(t + 0.5 * h * k1[0], x + 0.5 * h * k1[1], J + 0.5 * h * k1[2])
        k3 = rhs(t + 0.5 * h * k2[0], x + 0.5 * h * k2[1], J + 0.5 * h * k2[2])
        k4 = rhs(t + h * k3[0], x + h * k3[1], J + h * k3[2])
        t = t + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        x = x + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        J = J + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return t, x, J


def pullback_metric(X: VectorFieldX, s: float, metric: Metric, grid: Grid) -> Metric:
    """phi_s^* g, with phi_s the time-s flow of X.

    (phi^* g)_{mu nu}(p) = g_{ab}(phi(p)) dphi^a/dx^mu dphi^b/dx^nu.  Nodes the
    flow leaves untouched keep their original values bit for bit.
    """
    if s == 0 or X.is_zero():
        return Metric(metric.g_tt.copy(), metric.g_tx.copy(), metric.g_xx.copy(),
                      metric.tag, metric.fn)
    T, Xg = grid.mesh()
    ts, xs, J = flow(X, s, T, Xg, grid.dt)
    if np.any(ts < grid.t0 - 1e-12) or np.any(ts > grid.t_end + 1e-12):
        raise OutOfDomainError("flow leaves the slab")
    gtt, gtx, gxx = metric.evaluate(ts, xs % grid.L)
    g = [[gtt, gtx], [gtx, gxx]]

    def comp(mu, nu):
        return sum(g[a][b] * J[a][mu] * J[b][nu] for a in range(2) for b in range(2))

    moved = (ts != T) | (xs != Xg) | (J[0][0] != 1) | (J[1][1] != 1) | (J[0][1] != 0) | (J[1][0] != 0)
    out = []
    for (mu, nu), orig in zip(((0, 0), (0, 1), (1, 1)), metric.components()):
        c = np.where(moved, comp(mu, nu), orig)
        out.append(c)

    mfn = metric.fn

    def fn(t, x):
        tt, xx_, Jf = flow(X, s, t, x, grid.dt)
        gg = mfn(tt, xx_ % grid.L)
        gg = [[gg[0], gg[1]], [gg[1], gg[2]]]
        return tuple(sum(gg[a][b] * Jf[a][mu] * Jf[b][nu] for a in range(2) for b in range(2))
                     for mu, nu in ((0, 0), (0, 1), (1, 1)))

    return Metric(*out, tag="pulled-back", fn=fn if mfn is not None else None).validate()


METRIC_FAMILIES = ("flat", "conformal-bump", "tensor-bump", "lie-of-X")


def named_metric(family: str, grid: Grid, bump: Bump | None = None, amps: Sequence[float] = (1.0, 0.5, 0.3),
                 amplitude: float = 1.0) -> Metric:
    """Metric from one of the analytic families, with numeric parameters.

    flat           eta = diag(1, -1)
    conformal-bump exp(2 a bump) eta, a = amplitude * amps[0]
    tensor-bump    eta + amplitude * amps * bump
    lie-of-X       eta + amplitude * L_X eta, X = (amps[0], amps[1]) * bump
    """
    eta = Metric.flat(grid)
    if family == "flat":
        return eta
    if bump is None:
        raise GeometryError(f"family {family!r} needs a bump")
    if family == "conformal-bump":
        a = amplitude * amps[0]
        return Metric.from_function(grid, conformal_fn(lambda t, x: a * bump(t, x)), "conformal-bump").validate()
    if family == "tensor-bump":
        return tensor_bump(grid, bump, amps).apply(eta, amplitude)
    if family == "lie-of-X":
        X = VectorFieldX(bump, amps[0], amps[1] if len(amps) > 1 else 0.0)
        return lie_derivative_metric(X, eta, grid).apply(eta, amplitude)
    raise GeometryError(f"unknown metric family {family!r}; expected one of {', '.join(METRIC_FAMILIES)}")


def dump_metric_csv(metric: Metric, grid: Grid, path: str):
    """Node-major CSV with header t,x,g_tt,g_tx,g_xx."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "g_tt", "g_tx", "g_xx"])
        for j in range(grid.n_t + 1):
            for i in range(grid.n_x):
                w.writerow([repr(float(v)) for v in (grid.t[j], grid.x[i], metric.g_tt[j, i],
                                                     metric.g_tx[j, i], metric.g_xx[j, i])])


def load_metric_csv(path: str, grid: Grid) -> Metric:
    """Inverse of dump_metric_csv; node coordinates must match ``grid``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0][:5]] != ["t", "x", "g_tt", "g_tx", "g_xx"]:
        raise GeometryError("metric CSV needs header t,x,g_tt,g_tx,g_xx")
    data = np.array(rows[1:], dtype=float)
    if data.shape != ((grid.n_t + 1) * grid.n_x, 5):
        raise GeometryError(f"metric CSV has {data.shape[0]} nodes, grid has {(grid.n_t + 1) * grid.n_x}")
    T, X = grid.mesh()
    if not (np.allclose(data[:, 0], T.ravel(), atol=1e-9) and np.allclose(data[:, 1], X.ravel(), atol=1e-9)):
        raise GeometryError("metric CSV nodes do not match the grid")
    comps = [data[:, k].reshape(grid.shape) for k in (2, 3, 4)]
    return Metric(*comps, tag="loaded").validate()

