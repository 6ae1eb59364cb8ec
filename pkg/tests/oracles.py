"""Independent reference computations used to derive frozen test values."""
import mpmath as mp
import sympy as sp

t, x = sp.symbols("t x", real=True)


def sympy_bump(tc, xc, wt, wx, amp=1.0):
    ut = (t - tc) / wt
    ux = (x - xc) / wx
    return amp * sp.exp(1 - 1 / (1 - ut ** 2)) * sp.exp(1 - 1 / (1 - ux ** 2))


def conformal_curvature(omega):
    """Ricci scalar of exp(2w) diag(1,-1) by direct symbolic Christoffel algebra."""
    g = sp.Matrix([[sp.exp(2 * omega), 0], [0, -sp.exp(2 * omega)]])
    gi = g.inv()
    X = [t, x]
    G = [[[sum(gi[l, s] * (sp.diff(g[s, b], X[a]) + sp.diff(g[s, a], X[b]) - sp.diff(g[a, b], X[s])) / 2
               for s in range(2)) for b in range(2)] for a in range(2)] for l in range(2)]
    R = 0
    for a in range(2):
        for b in range(2):
            ric = 0
            for l in range(2):
                ric += sp.diff(G[l][a][b], X[l]) - sp.diff(G[l][a][l], X[b])
                for s in range(2):
                    ric += G[l][l][s] * G[s][a][b] - G[l][b][s] * G[s][a][l]
            R += gi[a, b] * ric
    return R


def thermal_minus_vacuum(beta, m=1, L=2 * mp.pi, kmax=400, dps=40):
    """sum_k 1/(L w_k) / (exp(beta w_k) - 1) in extended precision."""
    with mp.workdps(dps):
        total = mp.mpf(0)
        for n in range(-kmax, kmax + 1):
            w = mp.sqrt(m ** 2 + (2 * mp.pi * n / L) ** 2)
            total += 1 / (L * w) / mp.expm1(beta * w)
        return total


def vacuum_hadamard_diagonal(mu, m=1, L=2 * mp.pi, dps=30):
    """lim [w2 - P_mu] on the diagonal for the cylinder vacuum, infinite mode sum.

    Uses sum_{n>=1} cos(n th)/n = -ln(2 sin(th/2)) for the massless tail.
    """
    with mp.workdps(dps):
        def term(n):
            k = 2 * mp.pi * n / L
            return 1 / (L * mp.sqrt(m ** 2 + k ** 2)) - 1 / (L * k)
        s = mp.nsum(term, [1, mp.inf])
        return 1 / (2 * L * m) + s + mp.log(mu * L / (2 * mp.pi)) / (2 * mp.pi)


def wick_moments(nmax=4):
    """<:Phi^n:> coefficients from exp(lambda^2 f / 2), as sympy expressions in f."""
    lam, f = sp.symbols("lambda f")
    gen = sp.exp(lam ** 2 * f / 2)
    return {n: sp.simplify(sp.diff(gen, lam, n).subs(lam, 0)) for n in range(nmax + 1)}
