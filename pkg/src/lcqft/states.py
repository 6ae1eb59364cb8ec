"""Quasifree states on the flat cylinder and the Wick-square construction.

Two-point functions are mode sums over k = 2 pi n / L, |n| <= k_max, with
omega_k = sqrt(m^2 + k^2).  A grid test function enters through

    f~_n = sum_{j,i} f(t_j, x_i) exp(+i omega_k t_j - i k x_i) dt dx,

and w2(f, h) = sum_n [(1 + N_k) f~_n conj(h~_n) + N_k conj(f~_n) h~_n] / (2 L omega_k)
with Bose occupation N_k (zero for the vacuum).  The frequency sign is the one
for which w2(f, h) - w2(h, f) = i sigma(Ef, Eh) with the solver's E and sigma.

The diagonal limits use the flat 2-D parametrix P_mu = -(1/4 pi) ln(mu^2 Delta^2),
split in space at equal time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Embedding, Grid, Spacetime

#: normalization of the Weyl generating functional, omega(W(Ef)) = exp(-c w2(f, f))
WEYL_CONVENTIONS = {"half": 0.5, "full": 1.0}
SESSION_WEYL_CONVENTION = "half"

_SPLIT = (4, 2, 1)  # point-splitting separations in units of dx


class StateError(ValueError):
    pass


class CutoffError(StateError):
    """Mode-sum truncation estimate exceeds the requested tolerance."""


# ---------------------------------------------------------------- mode basis

@dataclass(frozen=True)
class ModeBasis:
    m: float = 1.0
    L: float = 2 * np.pi
    k_max: int = 127

    def __post_init__(self):
        if not self.m > 0:
            raise StateError("m > 0 is required (the massless zero mode has no vacuum)")
        if self.k_max < 1:
            raise StateError("k_max must be positive")

    @property
    def n(self) -> np.ndarray:
        return np.arange(-self.k_max, self.k_max + 1)

    @property
    def k(self) -> np.ndarray:
        return 2 * np.pi * self.n / self.L

    @property
    def omega(self) -> np.ndarray:
        return np.sqrt(self.m ** 2 + self.k ** 2)

    def transform(self, values: np.ndarray, grid: Grid, weight=1.0) -> np.ndarray:
        """f~_n for a grid function (vectorized over leading axes)."""
        if abs(grid.L - self.L) > 1e-12:
            raise StateError("grid circumference differs from the mode basis")
        if self.k_max > grid.n_x // 2 - 1:
            raise CutoffError("k_max exceeds the grid's resolvable modes")
        v = np.asarray(values) * weight
        F = np.fft.fft(v, axis=-1)[..., self.n % grid.n_x] * grid.dx
        # x_i = i dx, so the FFT carries exp(-i k x_i); grid offsets are zero
        phase = np.exp(1j * np.outer(grid.t, self.omega))
        return np.einsum("...jn,jn->...n", F, phase) * grid.dt


def occupation(basis: ModeBasis, beta: float | None) -> np.ndarray:
    if beta is None or np.isinf(beta):
        return np.zeros(basis.omega.shape)
    x = beta * basis.omega
    return np.exp(-x) / -np.expm1(-x)


# ---------------------------------------------------------------- states

@dataclass(frozen=True, eq=False)
class QuasifreeState:
    """Gaussian state fixed by its two-point function.

    ``kind`` is ``vacuum``, ``thermal`` or ``pulled_back``; a pulled-back state
    evaluates its parent on pushed-forward test functions.
    """

    kind: str
    basis: ModeBasis
    beta: float | None = None
    parent: "QuasifreeState | None" = None
    embedding: Embedding | None = None
    tol: float = 1e-10
    weyl_convention: str = SESSION_WEYL_CONVENTION

    @property
    def occupation(self) -> np.ndarray:
        return occupation(self.basis, self.beta)

    @property
    def label(self) -> str:
        if self.kind == "thermal":
            return f"thermal(beta={self.beta:g})"
        if self.kind == "pulled_back":
            return f"pullback({self.parent.label})"
        return self.kind

    def root(self) -> "QuasifreeState":
        return self.parent.root() if self.kind == "pulled_back" else self

    def map_point(self, t, x):
        if self.kind != "pulled_back":
            return t, x
        return self.parent.map_point(*self.embedding.map_point(t, x))


def vacuum_state(m=1.0, L=2 * np.pi, k_max=127, tol=1e-10) -> QuasifreeState:
    return QuasifreeState("vacuum", ModeBasis(m, L, k_max), tol=tol)


def thermal_state(m=1.0, L=2 * np.pi, k_max=127, beta=1.0, tol=1e-10) -> QuasifreeState:
    if not beta > 0:
        raise StateError("beta must be positive")
    return QuasifreeState("thermal", ModeBasis(m, L, k_max), beta=float(beta), tol=tol)


def pullback_state(psi: Embedding, state: QuasifreeState) -> QuasifreeState:
    """The state f, h -> w2(psi_* f, psi_* h) on the source spacetime."""
    return QuasifreeState("pulled_back", state.basis, state.beta, state, psi, state.tol,
                          state.weyl_convention)


def _check_flat(st: Spacetime, basis: ModeBasis):
    if not st.metric.is_flat():
        raise StateError("mode-sum states live on the flat cylinder")
    if abs(st.m - basis.m) > 1e-14:
        raise StateError("field mass differs from the mode basis")


def _vals(f):
    return f.values if hasattr(f, "values") else np.asarray(f)


def mode_coefficients(state: QuasifreeState, fs, st: Spacetime) -> np.ndarray:
    """f~ for a stack of test functions, after pushing through any pullbacks."""
    vals = np.asarray([_vals(f) for f in fs]) if isinstance(fs, (list, tuple)) else _vals(fs)
    s = state
    while s.kind == "pulled_back":
        vals = s.embedding.push_forward(vals)
        st = s.embedding.target
        s = s.parent
    _check_flat(st, s.basis)
    coeff = s.basis.transform(vals, st.grid)
    tail = np.max(np.abs(coeff[..., [0, -1]])) / max(np.max(np.abs(coeff)), 1e-300)
    if tail > math.sqrt(state.tol):
        raise CutoffError(f"mode-sum tail {tail:.2e} above tolerance; raise k_max")
    return coeff


def two_point_matrix(state: QuasifreeState, fs, hs, st: Spacetime | None = None) -> np.ndarray:
    """W_ab = w2(f_a, h_b)."""
    st = st if st is not None else (state.embedding.source if state.kind == "pulled_back" else None)
    if st is None:
        raise StateError("a spacetime is needed to integrate test functions")
    a = mode_coefficients(state, list(fs), st)
    b = mode_coefficients(state, list(hs), st)
    root = state.root()
    w = 1.0 / (2 * root.basis.L * root.basis.omega)
    n = root.occupation
    return (np.einsum("an,bn,n->ab", a, np.conj(b), w * (1 + n))
            + np.einsum("an,bn,n->ab", np.conj(a), b, w * n))


def two_point(state: QuasifreeState, f, h, st: Spacetime | None = None) -> complex:
    """w2(f, h) for grid test functions."""
    return complex(two_point_matrix(state, [f], [h], st)[0, 0])


def ccr_residual(state: QuasifreeState, f, h, sigma: float, st=None) -> float:
    """|w2(f,h) - w2(h,f) - i sigma| / |sigma|."""
    W = two_point_matrix(state, [f, h], [f, h], st)
    return abs(W[0, 1] - W[1, 0] - 1j * sigma) / abs(sigma)


def weyl_expectation(state: QuasifreeState, f, st=None, convention: str | None = None) -> float:
    """omega(W(Ef)) = exp(-c w2(f, f)) with c fixed by the convention."""
    c = WEYL_CONVENTIONS[convention or state.weyl_convention]
    return float(np.exp(-c * two_point(state, f, f, st).real))


def gram_matrices(state: QuasifreeState, fs, st=None, convention: str | None = None):
    """Gram matrices whose positivity is required of a state.

    Returns (symmetrized two-point matrix, full two-point matrix,
    Weyl matrix omega(W(Ef_a)^* W(Ef_b))).  The Weyl matrix uses sigma from
    the state's own antisymmetric part.
    """
    c = WEYL_CONVENTIONS[convention or state.weyl_convention]
    W = two_point_matrix(state, fs, fs, st)
    sym = 0.5 * (W + W.T).real
    sigma = ((W - W.T) / 1j).real
    d = np.diag(W).real
    # w2 of (f_b - f_a) from bilinearity
    wdiff = d[None, :] + d[:, None] - 2 * sym
    weyl = np.exp(0.5j * sigma) * np.exp(-c * wdiff)
    return sym, W, weyl


def min_eigen_ratio(M: np.ndarray) -> float:
    """Smallest eigenvalue divided by the trace (Hermitian part)."""
    H = 0.5 * (M + M.conj().T)
    return float(np.min(np.linalg.eigvalsh(H)) / np.real(np.trace(H)))


# ---------------------------------------------------------------- diagonal limits

#: mode cutoff for diagonal limits, independent of the grid's resolvable modes
K_DIAG = 1 << 14


def _diag_basis(state: QuasifreeState) -> ModeBasis:
    b = state.root().basis
    return ModeBasis(b.m, b.L, max(b.k_max, K_DIAG))


def equal_time_kernel(state: QuasifreeState, delta, smooth_only=False) -> np.ndarray:
    """Symmetric part of w2 at equal times, separation ``delta`` in x.

    With ``smooth_only`` the massless log tail sum_n cos(k delta)/(4 pi |n|)
    is left out (it is added back in closed form by the caller).
    """
    root = state.root()
    b = _diag_basis(state)
    delta = np.atleast_1d(np.asarray(delta, float))
    k, w = b.k[None, :], b.omega[None, :]
    n = occupation(b, root.beta)[None, :]
    weight = (1 + 2 * n) / (2 * b.L * w)
    if smooth_only:
        weight = np.where(k != 0, weight - 1.0 / (2 * b.L * np.abs(np.where(k == 0, 1, k))), weight)
    return np.sum(weight * np.cos(k * delta[:, None]), axis=1)


def _log_tail(delta, L):
    """sum_{n != 0} cos(2 pi n delta / L) / (4 pi |n|)."""
    return -np.log(2 * np.sin(np.pi * np.asarray(delta) / L)) / (2 * np.pi)


def parametrix(delta, mu):
    return -np.log(mu ** 2 * np.asarray(delta) ** 2) / (4 * np.pi)


def _richardson(values, ratio=2.0, orders=(2, 4)):
    """Extrapolate a sequence at separations h * ratio^(len-1-i) to h -> 0."""
    v = list(values)
    for p in orders:
        v = [(ratio ** p * v[i + 1] - v[i]) / (ratio ** p - 1) for i in range(len(v) - 1)]
    return v[0]


@dataclass(frozen=True, eq=False)
class WickSquareField:
    """Expectation of a Wick-ordered square on the grid."""

    values: np.ndarray
    mu: float | None
    provenance: str
    noise: float = 0.0
    info: dict = field(default_factory=dict)

    def __sub__(self, other):
        return WickSquareField(self.values - other.values, None,
                               f"{self.provenance} - {other.provenance}",
                               self.noise + other.noise)


def _split_limit(state: QuasifreeState, grid: Grid, mu: float | None):
    """Richardson limit of [w2 - P_mu] (or of w2's smooth part if mu is None)."""
    b = state.root().basis
    if abs(grid.L - b.L) > 1e-12:
        raise StateError("grid circumference differs from the mode basis")
    deltas = np.array(_SPLIT, float) * grid.dx
    vals = equal_time_kernel(state, deltas, smooth_only=mu is not None)
    if mu is not None:
        vals = vals + _log_tail(deltas, b.L) - parametrix(deltas, mu)
        # next Hadamard order, -(1/4 pi)(m^2 D^2 / 4) ln(mu^2 D^2), vanishes on
        # the diagonal; removing it leaves a remainder smooth enough for Richardson
        vals = vals - 0.25 * b.m ** 2 * deltas ** 2 * parametrix(deltas, mu)
    lim = _richardson(vals)
    noise = abs(lim - _richardson(vals[1:], orders=(2,)))
    return float(lim), float(noise)


def _state_field(state: QuasifreeState, grid: Grid, fn) -> np.ndarray:
    """Evaluate a homogeneous diagonal quantity node by node through map_point."""
    T, X = grid.mesh()
    T2, X2 = state.map_point(T, X)
    # the mode-sum states are translation invariant: the diagonal does not
    # depend on where the node lands, only the embedding must be valid there
    return np.broadcast_to(fn(), T2.shape).astype(float).copy()


def hadamard_diagonal(state: QuasifreeState, mu: float, grid: Grid) -> WickSquareField:
    """f_omega(x) = lim_{y -> x} [w2(x, y) - P_mu(x, y)] on the grid nodes."""
    if not mu > 0:
        raise StateError("mu must be positive")
    lim, noise = _split_limit(state, grid, mu)
    vals = _state_field(state, grid, lambda: lim)
    return WickSquareField(vals, mu, f"H[{state.label}]", noise,
                           {"separations_dx": list(_SPLIT), "richardson_orders": [2, 4]})


def hadamard_diagonal_exact(state: QuasifreeState, mu: float) -> float:
    """Closed form of the diagonal limit for the truncated mode sum."""
    b = _diag_basis(state)
    k, w = b.k, b.omega
    n = occupation(b, state.root().beta)
    nz = k != 0
    s = np.sum(1.0 / (2 * b.L * w[nz]) - 1.0 / (2 * b.L * np.abs(k[nz])))
    s += 1.0 / (2 * b.L * b.m) + np.sum(n / (b.L * w))
    return float(s + np.log(mu * b.L / (2 * np.pi)) / (2 * np.pi))


def cocycle(state_a: QuasifreeState, state_b: QuasifreeState, grid: Grid) -> WickSquareField:
    """B(x) = w2_A(x, x) - w2_B(x, x), a convergent mode sum."""
    if state_a.root().basis != state_b.root().basis:
        raise StateError("states live on different mode bases")
    b = _diag_basis(state_a)
    na, nb = occupation(b, state_a.root().beta), occupation(b, state_b.root().beta)
    diff = np.sum((na - nb) / (b.L * b.omega))
    vals = _state_field(state_a, grid, lambda: diff)
    return WickSquareField(vals, None, f"B[{state_a.label},{state_b.label}]")


def wick_square(state: QuasifreeState, mu: float, grid: Grid) -> WickSquareField:
    """<:Phi^2:> of the locally covariant Wick square in ``state``, i.e. f_omega."""
    out = hadamard_diagonal(state, mu, grid)
    return WickSquareField(out.values, mu, f":Phi^2:[{state.label}]", out.noise, out.info)


def wick_power(state: QuasifreeState, mu: float, n: int, grid: Grid) -> np.ndarray:
    """<:Phi^n:> from the generating factor exp(lambda^2 f / 2): (n-1)!! f^(n/2)."""
    if n < 0 or n > 4:
        raise StateError("wick_power supports 0 <= n <= 4")
    if n % 2:
        return np.zeros(grid.shape)
    f = wick_square(state, mu, grid).values
    double_fact = {0: 1, 2: 1, 4: 3}[n]
    return double_fact * f ** (n // 2)


def smoothness_profile(state_a: QuasifreeState, state_b: QuasifreeState) -> np.ndarray:
    """|Fourier coefficients| of the equal-time difference kernel, n = 0..k_max."""
    ba = state_a.root().basis
    d = (state_a.root().occupation - state_b.root().occupation) / (ba.L * ba.omega)
    return np.abs(d[ba.k_max:])


# ---------------------------------------------------------------- moments

def quasifree_moment(pairs_value, n: int) -> complex:
    """Sum over ordered pairings of products of pairs_value(i, j), i < j."""
    if n % 2:
        return 0.0
    if n == 0:
        return 1.0

    def rec(idx):
        if not idx:
            return 1.0
        first, rest = idx[0], idx[1:]
        total = 0.0
        for pos, j in enumerate(rest):
            total += pairs_value(first, j) * rec(rest[:pos] + rest[pos + 1:])
        return total

    return rec(tuple(range(n)))


def pairing_count(n: int) -> int:
    return 0 if n % 2 else math.prod(range(n - 1, 0, -2))


__all__ = [
    "ModeBasis", "QuasifreeState", "WickSquareField", "StateError", "CutoffError",
    "vacuum_state", "thermal_state", "pullback_state", "two_point", "two_point_matrix",
    "ccr_residual", "weyl_expectation", "gram_matrices", "min_eigen_ratio",
    "equal_time_kernel", "hadamard_diagonal", "hadamard_diagonal_exact", "cocycle",
    "wick_square", "wick_power", "smoothness_profile", "quasifree_moment", "pairing_count",
    "WEYL_CONVENTIONS", "SESSION_WEYL_CONVENTION",
]
