"""One-step portfolio optimization.

Closed-form Markowitz solve, a proximal-gradient QP solver for the
target-return, risk-aversion and Sharpe objectives (with proportional
transaction costs), efficient-frontier sweeps and the sequential
Markowitz baseline step.

Objective values are reported in maximization form:

* target_return: -(1/2 w'Sw + beta |w0 - w|_1)   subject to w'mu = target
* risk_aversion: w'mu - alpha w'Sw - beta |w0 - w|_1
* sharpe:        (w'mu - beta |w0 - w|_1) / sqrt(w'Sw)
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import PortfolioVector, ReturnsFrame
from .errors import DegeneracyError, InfeasibleError, RankError, ValidationError
from .metrics import moments

log = logging.getLogger(__name__)

KINDS = ("target_return", "risk_aversion", "sharpe")
DEFAULT_BETA = 0.002
RIDGE = 1e-10
MAX_ITER = 10_000
N_RESTARTS = 8


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class ObjectiveSpec:
    kind: str = "sharpe"
    target: Optional[float] = None
    alpha: float = 1.0
    beta: float = DEFAULT_BETA
    w0: Optional[PortfolioVector] = None
    short_allowed: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown objective kind {self.kind!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("alpha and beta must be non-negative")
        if self.kind == "target_return" and self.target is None:
            raise ValidationError("target_return objective needs a target")
        if self.w0 is not None and not isinstance(self.w0, PortfolioVector):
            self.w0 = PortfolioVector(self.w0, self.short_allowed)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "target": self.target, "alpha": self.alpha, "beta": self.beta,
                "w0": None if self.w0 is None else self.w0.weights.tolist(),
                "short_allowed": self.short_allowed, "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveSpec":
        d = dict(d)
        if d.get("w0") is not None:
            d["w0"] = PortfolioVector(np.asarray(d["w0"], float), d.get("short_allowed", False))
        return cls(**d)


@dataclass
class QPSolution:
    weights: PortfolioVector
    objective_value: float
    kkt_residual: float
    iterations: int
    multipliers: Optional[tuple] = None
    converged: bool = True


# ---------------------------------------------------------------- helpers

def _check_inputs(mu, Sigma):
    mu = np.asarray(mu, dtype=float).ravel()
    S = np.asarray(Sigma, dtype=float)
    M = mu.size
    if S.shape != (M, M):
        raise ValidationError(f"covariance shape {S.shape} does not match {M} means")
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(S))):
        raise ValidationError("non-finite mean or covariance")
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-14):
        raise ValidationError("covariance must be symmetric")
    S = 0.5 * (S + S.T)
    eig = np.linalg.eigvalsh(S)
    if eig[0] < -1e-10 * max(1.0, abs(eig[-1])):
        raise ValidationError(f"covariance is not positive semidefinite (min eigenvalue {eig[0]:.3g})")
    return mu, S + RIDGE * np.eye(M), max(eig[-1], 0.0) + RIDGE


def portfolio_objective(w, mu, Sigma, spec: ObjectiveSpec) -> float:
    """Value of `spec`'s objective at `w` (maximization form)."""
    w = np.asarray(w, dtype=float)
    w0 = _w0(spec, w.size)
    cost = spec.beta * np.abs(w0 - w).sum()
    var = float(w @ Sigma @ w)
    if spec.kind == "target_return":
        return -(0.5 * var + cost)
    if spec.kind == "risk_aversion":
        return float(w @ mu - spec.alpha * var - cost)
    return float((w @ mu - cost) / np.sqrt(max(var, 1e-300)))


def _w0(spec, M):
    if spec.w0 is None:
        return np.full(M, 1.0 / M)
    if spec.w0.M != M:
        raise ValidationError(f"w0 has {spec.w0.M} entries, expected {M}")
    return spec.w0.weights


def prox_budget_l1(y, w0, tau, nonneg=True):
    """argmin_w 1/2|w - y|^2 + tau |w - w0|_1  subject to sum(w) = 1 (and w >= 0).

    Each coordinate is a non-decreasing piecewise-linear function of the
    budget multiplier nu, so the sum is too; its breakpoints are located
    exactly and the multiplier found by linear interpolation.
    """
    y = np.asarray(y, dtype=float)
    w0 = np.asarray(w0, dtype=float)
    M = y.size
    lo, hi = w0 - tau, w0 + tau

    def coords(z):
        w = np.where(z > hi, z - tau, np.where(z < lo, z + tau, w0))
        return np.maximum(w, 0.0) if nonneg else w

    if nonneg:
        bps = np.sort(np.concatenate([lo - y, hi - y, -tau - y]))
    else:
        bps = np.sort(np.concatenate([lo - y, hi - y]))
    F = coords(y[None, :] + bps[:, None]).sum(axis=1)
    k = int(np.searchsorted(F, 1.0, side="left"))
    if k == len(bps):
        # right of every breakpoint all coordinates move with slope one
        nu = bps[-1] + (1.0 - F[-1]) / M
    elif k == 0:
        nu = bps[0] if nonneg else bps[0] - (F[0] - 1.0) / M
    elif F[k] == 1.0:
        nu = bps[k]
    else:
        nu = bps[k - 1] + (1.0 - F[k - 1]) * (bps[k] - bps[k - 1]) / (F[k] - F[k - 1])
    return coords(y + nu)


def _prox_gradient(fg, x0, w0, beta, nonneg, L, backtrack=True, max_iter=MAX_ITER, tol=1e-10):
    """Accelerated proximal gradient with adaptive restart.

    Minimizes f(w) + beta|w - w0|_1 over the budget set; `fg` returns
    (f, grad). With backtrack=False, `L` must be a Lipschitz constant of
    grad f. Returns (w, gradient-mapping norm, iterations, converged).
    """
    x = np.array(x0, dtype=float)
    fx, _ = fg(x)
    Fx = fx + beta * np.abs(x - w0).sum()
    y, t = x.copy(), 1.0
    L = max(L, 1e-12)
    gm = np.inf
    calm = 0
    for it in range(1, max_iter + 1):
        fy, gy = fg(y)
        while True:
            z = prox_budget_l1(y - gy / L, w0, beta / L, nonneg)
            d = z - y
            fz, _ = fg(z)
            if not backtrack or fz <= fy + gy @ d + 0.5 * L * (d @ d) + 1e-14 * (abs(fy) + 1e-300):
                break
            L *= 2.0
            calm = 0
        gm = L * np.sqrt(d @ d)
        Fz = fz + beta * np.abs(z - w0).sum()
        if Fz > Fx + 1e-14 * abs(Fx):
            if t == 1.0:
                break  # a plain step no longer decreases: numerical floor
            y, t = x.copy(), 1.0
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = z + ((t - 1.0) / t_new) * (z - x)
        x, Fx, t = z, Fz, t_new
        if gm <= tol:
            return x, gm, it, True
        calm += 1
        if backtrack and calm >= 20:
            L *= 0.5  # let the step grow back after a quiet stretch
            calm = 0
    return x, gm, it, gm <= max(tol, 1e-7)


def _polish_quadratic(w, H, g, beta, w0, nonneg, A=None, b=None, eps=1e-7):
    """Exact minimizer of 1/2 w'Hw + g'w + beta|w - w0|_1 on the face identified by `w`.

    Coordinates near zero stay at zero, coordinates near w0 stay pinned
    and the rest keep their side of w0; the equality constraints are the
    budget plus the optional rows of A w = b. Returns None when the
    reduced solution leaves the face.
    """
    M = w.size
    zero = (w <= eps) if nonneg else np.zeros(M, bool)
    pinned = (np.abs(w - w0) <= eps) & ~zero
    free = ~(zero | pinned)
    if not free.any():
        return None
    s = np.sign(w - w0)
    fixed = np.where(zero, 0.0, np.where(pinned, w0, 0.0))
    E = np.ones((1, M)) if A is None else np.vstack([np.ones((1, M)), A])
    e = np.array([1.0]) if b is None else np.concatenate([[1.0], np.atleast_1d(b)])
    Ef = E[:, free]
    rhs_e = e - E @ fixed
    Hff = H[np.ix_(free, free)]
    q = g[free] + H[np.ix_(free, ~free)] @ fixed[~free] + beta * s[free]
    nf, ne = Hff.shape[0], Ef.shape[0]
    K = np.zeros((nf + ne, nf + ne))
    K[:nf, :nf] = Hff
    K[:nf, nf:] = Ef.T
    K[nf:, :nf] = Ef
    try:
        sol = np.linalg.lstsq(K, np.concatenate([-q, rhs_e]), rcond=None)[0]
    except np.linalg.LinAlgError:
        return None
    out = fixed.copy()
    out[free] = sol[:nf]
    nu = sol[nf:]
    if nonneg and out.min() < -1e-13:
        return None
    if np.any(s[free] * (out[free] - w0[free]) < -1e-13):
        return None
    if np.abs(E @ out - e).max() > 1e-10:
        return None
    if nonneg:
        out = np.maximum(out, 0.0)
    return out, nu


def _quad_value(w, H, g, beta, w0):
    return 0.5 * float(w @ H @ w) + float(g @ w) + beta * float(np.abs(w - w0).sum())


# ---------------------------------------------------------------- closed form

def markowitz_closed_form(mu, Sigma, target: float) -> QPSolution:
    """Minimum-variance portfolio with w'mu = target and 1'w = 1 (shorts allowed).

    Solves the bordered system [[S, mu, 1], [mu', 0, 0], [1', 0, 0]] [w; -lam; -kap] = [0; target; 1].
    """
    mu = np.asarray(mu, dtype=float).ravel()
    S = np.asarray(Sigma, dtype=float)
    M = mu.size
    if S.shape != (M, M):
        raise ValidationError("covariance shape does not match means")
    ones = np.ones(M)
    if M == 1 or np.ptp(mu) <= 1e-14 * max(1.0, np.abs(mu).max()):
        raise DegeneracyError("mean vector is a multiple of the ones vector")
    if np.linalg.matrix_rank(S) < M:
        raise RankError("covariance matrix is rank deficient")
    K = np.zeros((M + 2, M + 2))
    K[:M, :M] = S + RIDGE * np.eye(M)
    K[:M, M] = K[M, :M] = mu
    K[:M, M + 1] = K[M + 1, :M] = ones
    rhs = np.zeros(M + 2)
    rhs[M], rhs[M + 1] = target, 1.0
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise RankError(f"bordered system is singular: {exc}") from None
    # one step of iterative refinement
    sol = sol + np.linalg.solve(K, rhs - K @ sol)
    w, lam, kap = sol[:M], -sol[M], -sol[M + 1]
    resid = float(np.linalg.norm(S @ w - lam * mu - kap * ones))
    return QPSolution(PortfolioVector(w, short_allowed=True), -0.5 * float(w @ S @ w),
                      resid, 1, (float(lam), float(kap)))


def min_variance_closed_form(Sigma) -> np.ndarray:
    """Global minimum-variance weights S^-1 1 / 1'S^-1 1 (shorts allowed)."""
    S = np.asarray(Sigma, dtype=float)
    x = np.linalg.solve(S, np.ones(S.shape[0]))
    return x / x.sum()


# ---------------------------------------------------------------- QP

def solve_qp(mu, Sigma, spec: ObjectiveSpec) -> QPSolution:
    """Maximize the objective selected by `spec` over the simplex (or budget hyperplane)."""
    mu, S, lmax = _check_inputs(mu, Sigma)
    M = mu.size
    w0 = _w0(spec, M)
    nonneg = not spec.short_allowed
    if M == 1:
        w = np.ones(1)
        if spec.kind == "target_return" and abs(spec.target - mu[0]) > 1e-12 * max(1.0, abs(mu[0])):
            raise InfeasibleError("single asset cannot reach a different target")
        return QPSolution(PortfolioVector(w, spec.short_allowed), portfolio_objective(w, mu, S, spec), 0.0, 0)
    if spec.kind == "risk_aversion":
        sol = _solve_risk_aversion(mu, S, lmax, spec.alpha, spec.beta, w0, nonneg)
    elif spec.kind == "target_return":
        sol = _solve_target_return(mu, S, lmax, spec.target, spec.beta, w0, nonneg)
    else:
        sol = _solve_sharpe(mu, S, lmax, spec, w0, nonneg)
    w, gm, iters, ok = sol[:4]
    mult = sol[4] if len(sol) > 4 else None
    if not ok:
        warnings.warn(f"{spec.kind} solve stopped after {iters} iterations "
                      f"(stationarity residual {gm:.2e})", ConvergenceWarning, stacklevel=2)
    pv = PortfolioVector.from_raw(w, spec.short_allowed)
    return QPSolution(pv, portfolio_objective(pv.weights, mu, S, spec), float(gm), int(iters), mult, bool(ok))


def _solve_quadratic(H, g, lmax, beta, w0, nonneg, x0=None, tol=1e-9):
    """min 1/2 w'Hw + g'w + beta|w - w0|_1 over the budget set: FISTA then face polish."""
    M = g.size
    fg = lambda w: (0.5 * float(w @ H @ w) + float(g @ w), H @ w + g)
    L = max(lmax, 1e-3 * (np.abs(g).max() + beta) + 1e-12)
    start = np.full(M, 1.0 / M) if x0 is None else x0
    backtrack = lmax < L  # pure step-size floor: allow adaptation
    x, gm, it, ok = _prox_gradient(fg, start, w0, beta, nonneg, L, backtrack=backtrack, tol=tol)
    pol = _polish_quadratic(x, H, g, beta, w0, nonneg)
    if pol is not None:
        cand = pol[0]
        if _quad_value(cand, H, g, beta, w0) <= _quad_value(x, H, g, beta, w0) + 1e-15 * (1 + abs(_quad_value(x, H, g, beta, w0))):
            x = cand
    gm = _gradient_mapping(fg, x, w0, beta, nonneg, max(lmax, 1e-12))
    return x, gm, it, ok or gm <= 1e-8


def _gradient_mapping(fg, x, w0, beta, nonneg, L):
    _, g = fg(x)
    z = prox_budget_l1(x - g / L, w0, beta / L, nonneg)
    return float(L * np.sqrt(((z - x) ** 2).sum()))


def _solve_risk_aversion(mu, S, lmax, alpha, beta, w0, nonneg, x0=None):
    return _solve_quadratic(2.0 * alpha * S, -mu, 2.0 * alpha * lmax, beta, w0, nonneg, x0)


def _solve_target_return(mu, S, lmax, target, beta, w0, nonneg):
    M = mu.size
    if nonneg and not (mu.min() - 1e-12 <= target <= mu.max() + 1e-12):
        raise InfeasibleError(f"target {target} outside [{mu.min()}, {mu.max()}] without short selling")
    if np.ptp(mu) <= 1e-14 * max(1.0, np.abs(mu).max()):
        if abs(target - mu[0]) > 1e-12 * max(1.0, abs(mu[0])):
            raise InfeasibleError("all means equal; target unreachable")
        # the return constraint is implied by the budget
        w, gm, it, ok = _solve_quadratic(S, np.zeros(M), lmax, beta, w0, nonneg)
        return w, gm, it, ok, (0.0,)
    if nonneg:
        target = float(np.clip(target, mu.min(), mu.max()))
    mu2 = float(mu @ mu)
    rho = 10.0 * max(lmax, 1e-8) / mu2
    lam, w, total = 0.0, np.full(M, 1.0 / M), 0
    gm, ok = np.inf, False
    for outer in range(300):
        # augmented Lagrangian of the return constraint, inner solve on the budget set
        H = S + rho * np.outer(mu, mu)
        g = -(lam + rho * target) * mu
        w, gm, it, inner_ok = _solve_quadratic(H, g, lmax + rho * mu2, beta, w0, nonneg, w, tol=1e-10)
        total += it
        c = float(mu @ w) - target
        lam -= rho * c
        pol = _polish_quadratic(w, S, np.zeros(M), beta, w0, nonneg, mu[None, :], target)
        if pol is not None:
            cand, nu = pol
            lam_c = -float(nu[1])
            fg = lambda v, lam_c=lam_c: (0.5 * float(v @ S @ v) - lam_c * float(mu @ v), S @ v - lam_c * mu)
            gm_c = _gradient_mapping(fg, cand, w0, beta, nonneg, max(lmax, 1e-12))
            if gm_c <= 1e-8 * max(1.0, lmax):
                return cand, gm_c, total, True, (lam_c,)
        if abs(c) <= 1e-12 * max(1.0, abs(target)) and inner_ok:
            ok = True
            break
        if outer % 10 == 9:
            rho *= 4.0
    return w, gm, total, ok, (float(lam),)


def _solve_sharpe(mu, S, lmax, spec, w0, nonneg):
    M = mu.size
    beta = spec.beta

    def ratio(w):
        return float((w @ mu - beta * np.abs(w - w0).sum()) / np.sqrt(w @ S @ w))

    rng = np.random.default_rng(spec.seed)
    uniform = np.full(M, 1.0 / M)
    starts = [uniform, _solve_risk_aversion(mu, S, lmax, 1.0, beta, w0, nonneg)[0]]
    if nonneg:
        starts.extend(np.eye(M))
        starts.extend(rng.dirichlet(np.ones(M), size=N_RESTARTS))
    else:
        try:
            tan = np.linalg.solve(S, mu)
            if abs(tan.sum()) > 1e-12:
                starts.append(tan / tan.sum())
        except np.linalg.LinAlgError:
            pass
        starts.extend(uniform + rng.standard_normal((N_RESTARTS, M)) @ (np.eye(M) - 1.0 / M))
    scores = [ratio(s) for s in starts]
    best = int(np.argmax(scores))
    total = 0

    def dinkelbach(x, q):
        # maximize N(w) - q D(w) repeatedly; q rises monotonically to a stationary ratio
        nonlocal total
        gm, ok = np.inf, False
        for _ in range(100):
            def fg(v, q=q):
                Sv = S @ v
                sd = np.sqrt(v @ Sv)
                return float(-mu @ v + q * sd), -mu + q * Sv / sd

            L0 = max(abs(q) * lmax / np.sqrt(max(x @ S @ x, 1e-300)), 1e-3 * np.abs(mu).max() + 1e-12)
            x_new, gm, it, ok = _prox_gradient(fg, x, w0, beta, nonneg, L0, tol=1e-9)
            total += it
            if not nonneg and np.abs(x_new).max() > 1e8:
                raise InfeasibleError("Sharpe objective is unbounded on the budget hyperplane")
            q_new = ratio(x_new)
            if q_new <= q + 1e-12 * max(1.0, abs(q)):
                if q_new >= q:
                    x = x_new
                break
            x, q = x_new, q_new
        return x, q, gm, ok

    if scores[best] >= 0:
        # concave subproblems: the answer does not depend on the start, so
        # begin from the symmetric point and let ties resolve symmetrically
        x0, q0 = (uniform, scores[0]) if scores[0] >= 0 else (starts[best], scores[best])
        x, q, gm, ok = dinkelbach(x0.copy(), q0)
        if q > 0:
            # at a ratio optimum w also solves the risk-aversion QP with
            # alpha = q / (2 sqrt(w'Sw)); iterate that fixed point with exact solves
            for _ in range(8):
                alpha = q / (2.0 * np.sqrt(x @ S @ x))
                cand, gm_c, it, ok_c = _solve_risk_aversion(mu, S, lmax, alpha, beta, w0, nonneg, x)
                total += it
                q_c = ratio(cand)
                if q_c < q - 1e-15 * abs(q):
                    break
                done = np.abs(cand - x).max() <= 1e-13
                x, q, gm, ok = cand, q_c, gm_c, ok_c
                if done:
                    break
    else:
        results = [dinkelbach(s.copy(), sc) for s, sc in zip(starts, scores)]
        x, q, gm, ok = max(results, key=lambda r: r[1])
    return x, gm, total, ok


# ---------------------------------------------------------------- frontier

@dataclass
class FrontierPoint:
    target: float
    sigma: float
    mu: float
    feasible: bool
    efficient: bool
    weights: Optional[np.ndarray] = None


def efficient_frontier(mu, Sigma, targets: Sequence[float], short_allowed: bool = False):
    """Minimum-variance portfolio for each target return.

    Infeasible targets come back with feasible=False; points below the
    global minimum-variance return are flagged inefficient.
    """
    mu = np.asarray(mu, dtype=float).ravel()
    S = np.asarray(Sigma, dtype=float)
    M = mu.size
    if short_allowed:
        gmv = min_variance_closed_form(S + RIDGE * np.eye(M))
    else:
        gmv = solve_qp(np.zeros(M), S, ObjectiveSpec("risk_aversion", alpha=1.0, beta=0.0)).weights.weights
    gmv_mu = float(gmv @ mu)
    points = []
    for t in targets:
        t = float(t)
        try:
            if short_allowed and M > 1 and np.ptp(mu) > 0:
                w = markowitz_closed_form(mu, S, t).weights.weights
            else:
                spec = ObjectiveSpec("target_return", target=t, beta=0.0, short_allowed=short_allowed)
                w = solve_qp(mu, S, spec).weights.weights
        except InfeasibleError:
            points.append(FrontierPoint(t, float("nan"), float("nan"), False, False, None))
            continue
        m = float(w @ mu)
        points.append(FrontierPoint(t, float(np.sqrt(max(w @ S @ w, 0.0))), m, True,
                                    m >= gmv_mu - 1e-10, w))
    return points


def frontier_to_csv(points, path, assets: Optional[Sequence[str]] = None) -> None:
    M = next((p.weights.size for p in points if p.weights is not None), 0)
    names = list(assets) if assets is not None else [f"w{i}" for i in range(M)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["target", "sigma", "mu", "feasible", "efficient", *names])
        for p in points:
            ws = [repr(float(x)) for x in p.weights] if p.weights is not None else [""] * M
            wr.writerow([repr(p.target), repr(p.sigma), repr(p.mu), int(p.feasible), int(p.efficient), *ws])


# ---------------------------------------------------------------- SMM

def smm_step(window, w0, beta: float = DEFAULT_BETA, seed: int = 0) -> PortfolioVector:
    """One rebalance of the sequential Markowitz model: Sharpe-with-costs on window moments."""
    X = window.values if isinstance(window, ReturnsFrame) else np.asarray(window, dtype=float)
    if X.shape[0] < 3:
        raise ValidationError("window needs at least 3 rows for moments")
    m = moments(X)
    if not isinstance(w0, PortfolioVector):
        w0 = PortfolioVector(w0)
    spec = ObjectiveSpec("sharpe", beta=beta, w0=w0, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return solve_qp(m.mean, m.covariance, spec).weights
