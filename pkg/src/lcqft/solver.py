"""Klein-Gordon operator, Cauchy solver, propagators and the symplectic form.

Two discretizations of K_g are used on purpose:

* :func:`apply_kg` works on the divergence form
  |g|^{-1/2} d_mu(|g|^{1/2} g^{mu nu} d_nu phi) + (m^2 + xi R) phi
  with face-averaged coefficients;
* the time stepper integrates the expanded second-order form
  g^{mu nu} d_mu d_nu phi + b^nu d_nu phi + (m^2 + xi R) phi,
  b^nu = |g|^{-1/2} d_mu(|g|^{1/2} g^{mu nu}).

Both are centered and second order, and they coincide on the flat metric.

Propagator naming follows E = E_adv - E_ret with E_adv f supported in the
causal future of supp f and E_ret f in its causal past.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .geometry import Grid, OutOfDomainError, Spacetime, d_t, d_x

#: sign relating the Wronskian sum(phi1*P2 - phi2*P1) to the volume form
#: sigma(Ef, Eh) = int f (Eh) dmu; fixed by calibration on the flat cylinder.
SURFACE_SIGN = -1.0


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------- data types

@dataclass(frozen=True, eq=False)
class TestFunction:
    """Grid function vanishing on the two outermost time levels at each end."""

    __test__ = False  # not a pytest class

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 2 or v.shape[0] < 5:
            raise OutOfDomainError("test function needs at least 5 time levels")
        if np.any(v[:2] != 0) or np.any(v[-2:] != 0):
            raise OutOfDomainError("test function support touches the slab boundary")

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "TestFunction":
        T, X = grid.mesh()
        return cls(np.broadcast_to(fn(T, X), grid.shape).copy())

    @property
    def support(self) -> np.ndarray:
        return self.values != 0

    @property
    def bbox(self):
        """(first level, last level) of the support, or None."""
        rows = np.flatnonzero(self.support.any(axis=1))
        if rows.size == 0:
            return None
        return int(rows[0]), int(rows[-1])

    def __add__(self, other):
        return TestFunction(self.values + _vals(other))

    def __sub__(self, other):
        return TestFunction(self.values - _vals(other))

    def __mul__(self, c: float):
        return TestFunction(c * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return TestFunction(-self.values)


def _vals(f):
    return f.values if hasattr(f, "values") else np.asarray(f, float)


@dataclass(frozen=True, eq=False)
class CauchyData:
    """Field value and time derivative on a constant-t slice."""

    phi: np.ndarray
    pi: np.ndarray
    slice_time: float

    def __post_init__(self):
        if not (np.all(np.isfinite(self.phi)) and np.all(np.isfinite(self.pi))):
            raise SolverError("non-finite Cauchy data")
        if np.shape(self.phi) != np.shape(self.pi):
            raise SolverError("phi and pi differ in shape")

    def _check(self, other):
        if abs(self.slice_time - other.slice_time) > 1e-9:
            raise SolverError("Cauchy data live on different slices")

    def __add__(self, other):
        self._check(other)
        return CauchyData(self.phi + other.phi, self.pi + other.pi, self.slice_time)

    def __sub__(self, other):
        self._check(other)
        return CauchyData(self.phi - other.phi, self.pi - other.pi, self.slice_time)

    def __mul__(self, c: float):
        return CauchyData(c * self.phi, c * self.pi, self.slice_time)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def vector(self) -> np.ndarray:
        return np.concatenate([self.phi, self.pi])

    def norm(self, dx: float = 1.0) -> float:
        """L2 norm of (phi, pi) on the slice."""
        return float(np.sqrt(np.sum(self.phi ** 2 + self.pi ** 2) * dx))

    @classmethod
    def zeros(cls, n_x: int, slice_time: float):
        return cls(np.zeros(n_x), np.zeros(n_x), slice_time)


@dataclass(eq=False)
class SolutionField:
    values: np.ndarray
    spacetime: Spacetime
    source: np.ndarray | None = None
    data: CauchyData | None = None
    label: str = ""
    _residual: float | None = field(default=None, repr=False)

    def residual(self) -> float:
        """max |K phi - j| over interior levels (divergence-form K)."""
        if self._residual is None:
            j = self.source if self.source is not None else 0.0
            r = apply_kg(self.spacetime, self.values, fill=0.0) - j
            self._residual = float(np.max(np.abs(r[1:-1])))
        return self._residual

    def __sub__(self, other):
        return SolutionField(self.values - other.values, self.spacetime)

    def __add__(self, other):
        return SolutionField(self.values + other.values, self.spacetime)


# ---------------------------------------------------------------- operator coefficients

@dataclass(frozen=True)
class _Coefficients:
    A_tt: np.ndarray
    A_tx: np.ndarray
    A_xx: np.ndarray
    sqrtg: np.ndarray
    gi_tt: np.ndarray
    gi_tx: np.ndarray
    gi_xx: np.ndarray
    b_t: np.ndarray
    b_x: np.ndarray
    V: np.ndarray
    has_tx: np.ndarray  # per level: any nonzero g^tx


@lru_cache(maxsize=64)
def coefficients(st: Spacetime) -> _Coefficients:
    g = st.grid
    met = st.metric
    sq = met.sqrt_neg_det
    gi_tt, gi_tx, gi_xx = met.inverse
    A_tt, A_tx, A_xx = sq * gi_tt, sq * gi_tx, sq * gi_xx
    if met.is_flat():
        z = np.zeros(g.shape)
        b_t, b_x = z, z.copy()
    else:
        b_t = (d_t(A_tt, g.dt) + d_x(A_tx, g.dx)) / sq
        b_x = (d_t(A_tx, g.dt) + d_x(A_xx, g.dx)) / sq
    V = st.m ** 2 + st.xi * st.curvature
    V = np.broadcast_to(V, g.shape)
    return _Coefficients(A_tt, A_tx, A_xx, sq, gi_tt, gi_tx, gi_xx, b_t, b_x, V,
                         np.any(gi_tx != 0, axis=1))


def _Dx(f, dx):
    return (np.roll(f, -1, axis=-1) - np.roll(f, 1, axis=-1)) / (2.0 * dx)


def _Dxx(f, dx):
    return (np.roll(f, -1, axis=-1) - 2.0 * f + np.roll(f, 1, axis=-1)) / dx ** 2


def divergence_operator(st: Spacetime, phi: np.ndarray, A_tt, A_tx, A_xx) -> np.ndarray:
    """d_mu(A^{mu nu} d_nu phi) on interior levels (boundary rows are zero)."""
    g = st.grid
    dt, dx = g.dt, g.dx
    phi = np.asarray(phi)
    out = np.zeros(np.broadcast_shapes(phi.shape, A_tt.shape), dtype=np.result_type(phi, A_tt))
    p_m, p_0, p_p = phi[..., :-2, :], phi[..., 1:-1, :], phi[..., 2:, :]
    Att_p = 0.5 * (A_tt[1:-1] + A_tt[2:])
    Att_m = 0.5 * (A_tt[1:-1] + A_tt[:-2])
    tt = (Att_p * (p_p - p_0) - Att_m * (p_0 - p_m)) / dt ** 2
    Axx = A_xx[1:-1]
    Axx_p = 0.5 * (Axx + np.roll(Axx, -1, axis=-1))
    Axx_m = 0.5 * (Axx + np.roll(Axx, 1, axis=-1))
    xx = (Axx_p * (np.roll(p_0, -1, axis=-1) - p_0) - Axx_m * (p_0 - np.roll(p_0, 1, axis=-1))) / dx ** 2
    tx = (A_tx[2:] * _Dx(p_p, dx) - A_tx[:-2] * _Dx(p_m, dx)) / (2 * dt)
    xt = _Dx(A_tx[1:-1] * (p_p - p_m) / (2 * dt), dx)
    out[..., 1:-1, :] = tt + xx + tx + xt
    return out


def apply_kg(st: Spacetime, phi, fill=np.nan) -> np.ndarray:
    """K_g phi in divergence form; the first and last levels are set to ``fill``."""
    c = coefficients(st)
    phi = _vals(phi)
    out = divergence_operator(st, phi, c.A_tt, c.A_tx, c.A_xx) / c.sqrtg + c.V * phi
    out[..., 0, :] = fill
    out[..., -1, :] = fill
    return out


# ---------------------------------------------------------------- time stepping

_MAX_ITER = 60


def _solve_level(a, c, r, dx):
    """Solve (a + c D_x) u = r by fixed-point iteration on the mixed term."""
    u = r / a
    if not np.any(c != 0):
        return u
    for _ in range(_MAX_ITER):
        new = (r - c * _Dx(u, dx)) / a
        if np.max(np.abs(new - u)) <= 1e-15 * max(1.0, np.max(np.abs(new))):
            return new
        u = new
    raise SolverError("mixed-term iteration did not converge (g^tx too large for this step)")


def _step(co: _Coefficients, n, prev, cur, j, dt, dx, forward: bool):
    """New level from the equation at level n; ``prev`` is the level behind."""
    gtt, gtx, gxx = co.gi_tt[n], co.gi_tx[n], co.gi_xx[n]
    bt, bx, V = co.b_t[n], co.b_x[n], co.V[n]
    s = 1.0 if forward else -1.0
    known = (gtt * (-2.0 * cur + prev) / dt ** 2 - s * (gtx / dt) * _Dx(prev, dx)
             + gxx * _Dxx(cur, dx) - s * bt * prev / (2 * dt) + bx * _Dx(cur, dx) + V * cur)
    rhs = j - known
    a = gtt / dt ** 2 + s * bt / (2 * dt)
    c = s * gtx / dt
    return _solve_level(a, c, rhs, dx)


def _march(st: Spacetime, out: np.ndarray, j: np.ndarray, k0: int, k1: int, forward: bool):
    """Fill ``out`` from levels (k0, k1) onwards; k1 = k0 +/- 1."""
    co = coefficients(st)
    g = st.grid
    n_last = g.n_t
    if forward:
        for n in range(k1, n_last):
            out[..., n + 1, :] = _step(co, n, out[..., n - 1, :], out[..., n, :],
                                       j[..., n, :], g.dt, g.dx, True)
    else:
        for n in range(k1, 0, -1):
            out[..., n - 1, :] = _step(co, n, out[..., n + 1, :], out[..., n, :],
                                       j[..., n, :], g.dt, g.dx, False)
    return out


def _source(st: Spacetime, source, shape=None) -> np.ndarray:
    if source is None:
        return np.zeros(shape if shape is not None else st.grid.shape)
    j = _vals(source)
    if j.shape[-2:] != st.grid.shape:
        raise OutOfDomainError("source does not match the grid")
    return j


def _check_source_support(j: np.ndarray):
    if np.any(j[..., :2, :] != 0) or np.any(j[..., -2:, :] != 0):
        raise OutOfDomainError("source support touches the slab boundary")


def e_adv(st: Spacetime, f) -> SolutionField:
    """Fundamental solution vanishing before supp f (support in J^+(supp f))."""
    j = _source(st, f)
    _check_source_support(j)
    out = np.zeros(j.shape)
    _march(st, out, j, 0, 1, True)
    return SolutionField(out, st, source=j, label="E_adv")


def e_ret(st: Spacetime, f) -> SolutionField:
    """Fundamental solution vanishing after supp f (support in J^-(supp f))."""
    j = _source(st, f)
    _check_source_support(j)
    out = np.zeros(j.shape)
    n = st.grid.n_t
    _march(st, out, j, n, n - 1, False)
    return SolutionField(out, st, source=j, label="E_ret")


def e_causal(st: Spacetime, f) -> SolutionField:
    """E f = E_adv f - E_ret f, a homogeneous solution."""
    a = e_adv(st, f)
    r = e_ret(st, f)
    return SolutionField(a.values - r.values, st, source=np.zeros_like(a.values), label="E")


def _data_levels(st: Spacetime, data: CauchyData, j: np.ndarray, k: int):
    """Levels k-1 and k+1 reconstructed from centered (phi, pi) and the equation at k."""
    co = coefficients(st)
    g = st.grid
    dt, dx = g.dt, g.dx
    phi, pi = data.phi, data.pi
    gtt, gtx, gxx = co.gi_tt[k], co.gi_tx[k], co.gi_xx[k]
    rest = (2 * gtx * _Dx(pi, dx) + co.b_t[k] * pi + gxx * _Dxx(phi, dx)
            + co.b_x[k] * _Dx(phi, dx) + co.V[k] * phi)
    S = 2.0 * phi + dt ** 2 / gtt * (j[..., k, :] - rest)
    return 0.5 * (S - 2 * dt * pi), 0.5 * (S + 2 * dt * pi)


def solve_cauchy(st: Spacetime, data: CauchyData, source=None, direction: str = "both") -> SolutionField:
    """Solve K_g phi = source with Cauchy data on a slice.

    ``direction`` selects which part of the slab is filled: ``forward``
    (to the future of the slice), ``backward`` or ``both``.
    """
    g = st.grid
    k = g.level(data.slice_time)
    if np.shape(data.phi)[-1] != g.n_x:
        raise OutOfDomainError("Cauchy data do not match the grid")
    j = _source(st, source, np.shape(data.phi)[:-1] + g.shape)
    out = np.zeros(j.shape)
    out[..., k, :] = data.phi
    lo, hi = _data_levels(st, data, j, k)
    if direction in ("forward", "both") and k < g.n_t:
        out[..., k + 1, :] = hi
        _march(st, out, j, k, k + 1, True)
    if direction in ("backward", "both") and k > 0:
        out[..., k - 1, :] = lo
        _march(st, out, j, k, k - 1, False)
    if direction not in ("forward", "backward", "both"):
        raise ValueError("direction must be forward, backward or both")
    return SolutionField(out, st, source=j, data=data, label="cauchy")


def restrict_to_data(field, st: Spacetime, slice_time: float) -> CauchyData:
    """(phi, d_t phi) on a slice; d_t phi by the centered difference."""
    vals = _vals(field)
    g = st.grid
    k = g.level(slice_time)
    if k < 1 or k > g.n_t - 1:
        raise OutOfDomainError("slice must be an interior time level")
    phi = vals[..., k, :].copy()
    pi = (vals[..., k + 1, :] - vals[..., k - 1, :]) / (2 * g.dt)
    return CauchyData(phi, pi, float(g.t[k]))


def propagate(st: Spacetime, data: CauchyData, slice_time: float) -> CauchyData:
    """Evolve homogeneous data to another slice."""
    sol = solve_cauchy(st, data)
    return restrict_to_data(sol, st, slice_time)


# ---------------------------------------------------------------- symplectic form

def volume_pairing(st: Spacetime, f, phi) -> float:
    """int f phi dmu_g by the trapezoid rule in t (periodic in x)."""
    g = st.grid
    w = np.ones(g.n_t + 1)
    w[0] = w[-1] = 0.5
    return float(np.sum(w[:, None] * _vals(f) * _vals(phi) * st.volume) * g.dt * g.dx)


def symplectic_volume(st: Spacetime, f, h, Eh=None) -> float:
    """sigma(Ef, Eh) = int f (E h) dmu_g."""
    if Eh is None:
        Eh = e_causal(st, h)
    return volume_pairing(st, f, Eh)


def momentum(st: Spacetime, data: CauchyData) -> np.ndarray:
    """Conjugate momentum sqrt(-g) (g^tt d_t phi + g^tx d_x phi) on the slice."""
    co = coefficients(st)
    k = st.grid.level(data.slice_time)
    return co.A_tt[k] * data.pi + co.A_tx[k] * _Dx(data.phi, st.grid.dx)


def symplectic_surface(d1: CauchyData, d2: CauchyData, st: Spacetime, slice_time: float | None = None) -> float:
    """Wronskian form of sigma on a Cauchy slice."""
    d1._check(d2)
    if slice_time is not None and abs(slice_time - d1.slice_time) > 1e-9:
        raise SolverError("data are not on the requested slice")
    p1 = momentum(st, d1)
    p2 = momentum(st, d2)
    w = np.sum(d1.phi * p2 - d2.phi * p1, axis=-1) * st.grid.dx
    return SURFACE_SIGN * w
