"""Empirical-Bayes Laplace approximation for the latent Gaussian models.

Inner loop: constrained Newton ascent on the log posterior of the latent
vector at fixed hyperparameters. Outer loop: coordinate golden-section
search of the Laplace-approximate log marginal likelihood over each
log-precision. Sum-to-zero constraints are imposed by conditioning by
kriging.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import gammaln

from .latent import HYPER_PRIOR_RATE, HYPER_PRIOR_SHAPE, LatentModel

__all__ = ["Posterior", "DivergenceError", "fit", "sample_posterior", "LOG_PREC_BOUNDS"]

log = logging.getLogger(__name__)

LOG_PREC_BOUNDS = (-6.0, 10.0)
NEWTON_TOL = 1e-6
OUTER_TOL = 1e-4
GOLDEN_TOL = 1e-3
MAX_HALVINGS = 30
MAX_NEWTON = 200
FIXED_POINT_TOL = 1e-12
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


class DivergenceError(ArithmeticError):
    """Newton iterations produced a non-finite log posterior."""


@dataclass
class Posterior:
    """Gaussian approximation to the latent posterior at modal hyperparameters.

    ``precision`` is the negative Hessian of the log posterior at ``mode``
    and ``chol`` its lower Cholesky factor. Covariances and draws are
    conditioned on the sum-to-zero constraints in ``constraints``.
    """

    model: LatentModel
    mode: np.ndarray
    precision: np.ndarray
    chol: np.ndarray
    constraints: np.ndarray
    hyper: dict
    log_marginal: float
    n_newton: int
    seed: int = 0
    samples: np.ndarray | None = None
    trace: list = field(default_factory=list)

    def _kriging(self):
        if self.constraints.shape[0] == 0:
            return None, None
        V = cho_solve((self.chol, True), self.constraints.T)
        W = self.constraints @ V
        return V, W

    def covariance(self) -> np.ndarray:
        cov = cho_solve((self.chol, True), np.eye(self.mode.size))
        V, W = self._kriging()
        if V is not None:
            cov = cov - V @ np.linalg.solve(W, V.T)
        return 0.5 * (cov + cov.T)

    def sd(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.covariance()), 0.0))

    @property
    def noise_precision(self) -> float | None:
        v = self.hyper.get("log_prec[noise]")
        return None if v is None else float(np.exp(v))

    def collapsed(self, n: int) -> np.ndarray:
        """``n`` copies of the mode, for zero-variance predictions."""
        return np.tile(self.mode, (n, 1))


class _Engine:
    def __init__(self, lm: LatentModel):
        self.lm = lm
        self.C = lm.constraints()
        self.ranks = lm.prior_ranks()
        self.n_block_hyper = len(self.ranks)
        if lm.likelihood == "poisson_pp":
            self.g_obs = np.asarray(lm.A_obs.sum(axis=0)).ravel()
            self.A_q = lm.A_quad.tocsr()
            self.A_qT = self.A_q.T.tocsr()
        else:
            A = lm.A_obs
            self.AtA = (A.T @ A).toarray()
            self.Aty = A.T @ lm.y
            self.yty = float(lm.y @ lm.y)
            self.n = lm.y.size

    # -- likelihood -------------------------------------------------------

    def loglik(self, x: np.ndarray, log_noise: float | None = None) -> float:
        lm = self.lm
        if lm.likelihood == "poisson_pp":
            with np.errstate(over="ignore", invalid="ignore"):
                return float(self.g_obs @ x - lm.w_quad @ np.exp(self.A_q @ x))
        tau = math.exp(log_noise)
        r = lm.y - lm.A_obs @ x
        return 0.5 * self.n * (math.log(tau) - math.log(2 * math.pi)) - 0.5 * tau * float(r @ r)

    def _project(self, x, cho):
        if self.C.shape[0] == 0:
            return x
        V = cho_solve(cho, self.C.T)
        return x - V @ np.linalg.solve(self.C @ V, self.C @ x)

    def _offending(self, delta) -> str:
        k = int(np.argmax(np.abs(delta)))
        for b in self.lm.blocks:
            if b.start <= k < b.start + b.size:
                return b.label
        return "?"

    # -- inner optimisation ----------------------------------------------

    def inner(self, theta: np.ndarray, x0: np.ndarray):
        lm = self.lm
        Q = lm.prior_precision(theta[: self.n_block_hyper])
        if lm.likelihood == "gaussian":
            tau = math.exp(theta[-1])
            H = Q + tau * self.AtA
            cho = cho_factor(H, lower=True)
            x = self._project(cho_solve(cho, tau * self.Aty), cho)
            return x, H, cho, Q, 1

        def objective(v):
            val = self.loglik(v) - 0.5 * float(v @ Q @ v)
            return val if math.isfinite(val) else -math.inf

        x = x0.copy()
        f = objective(x)
        if not math.isfinite(f):
            raise DivergenceError("log posterior is not finite at the starting point")
        n_iter = 0
        for _ in range(MAX_NEWTON):
            with np.errstate(over="ignore"):
                mu = lm.w_quad * np.exp(self.A_q @ x)
            grad = self.g_obs - self.A_qT @ mu - Q @ x
            H = Q + (self.A_qT @ self.A_q.multiply(mu[:, None])).toarray()
            cho = cho_factor(H, lower=True)
            step = self._project(x + cho_solve(cho, grad), cho) - x
            # a rounding-level step means x is already the fixed point
            if np.max(np.abs(step), initial=0.0) <= FIXED_POINT_TOL * (1.0 + np.max(np.abs(x), initial=0.0)):
                break
            n_iter += 1
            full = step.copy()
            for _ in range(MAX_HALVINGS + 1):
                fn = objective(x + step)
                if math.isfinite(fn) and fn >= f - 1e-12 * (1.0 + abs(f)):
                    break
                step *= 0.5
            else:
                if not math.isfinite(fn):
                    raise DivergenceError(
                        f"log posterior non-finite after {MAX_HALVINGS} step halvings "
                        f"(offending term: {self._offending(full)})"
                    )
                break
            x = x + step
            f = fn
            if np.max(np.abs(step)) < NEWTON_TOL:
                break
        with np.errstate(over="ignore"):
            mu = lm.w_quad * np.exp(self.A_q @ x)
        H = Q + (self.A_qT @ self.A_q.multiply(mu[:, None])).toarray()
        cho = cho_factor(H, lower=True)
        return x, H, cho, Q, n_iter

    # -- Laplace marginal -------------------------------------------------

    def log_hyperprior(self, theta) -> float:
        a, b = HYPER_PRIOR_SHAPE, HYPER_PRIOR_RATE
        return float(sum(a * math.log(b) - gammaln(a) + a * t - b * math.exp(t) for t in theta))

    def laplace(self, theta: np.ndarray, x0: np.ndarray):
        x, H, cho, Q, n_iter = self.inner(theta, x0)
        log_noise = theta[-1] if self.lm.likelihood == "gaussian" else None
        value = self.loglik(x, log_noise) - 0.5 * float(x @ Q @ x)
        value += 0.5 * sum(r * t for r, t in zip(self.ranks, theta[: self.n_block_hyper]))
        value -= float(np.sum(np.log(np.diag(cho[0]))))
        if self.C.shape[0]:
            W = self.C @ cho_solve(cho, self.C.T)
            value -= 0.5 * float(np.linalg.slogdet(W)[1])
        value += self.log_hyperprior(theta)
        return value, (x, H, cho, n_iter)


def _golden_max(func, lo, hi, tol=GOLDEN_TOL):
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = func(c), func(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = func(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = func(d)
    return (c, fc) if fc >= fd else (d, fd)


def _initial_latent(lm: LatentModel) -> np.ndarray:
    x = np.zeros(lm.n_latent)
    if lm.blocks[0].kind == "intercept":
        if lm.likelihood == "poisson_pp":
            n = lm.A_obs.shape[0]
            x[0] = math.log(max(n, 0.5) / float(lm.w_quad.sum()))
        elif lm.y.size:
            x[0] = float(lm.y.mean())
    return x


def _initial_theta(lm: LatentModel) -> np.ndarray:
    theta = np.zeros(len(lm.hyper_names()))
    if lm.likelihood == "gaussian" and lm.y.size > 1:
        var = float(np.var(lm.y))
        theta[-1] = float(np.clip(-math.log(var) if var > 0 else 0.0, *LOG_PREC_BOUNDS))
    return theta


def fit(lm: LatentModel, likelihood: str | None = None, hyper=None, init=None,
        seed: int = 0) -> Posterior:
    """Fit ``lm`` by the Laplace approximation.

    Parameters
    ----------
    lm : LatentModel
        Output of :func:`build_design`.
    likelihood : {"poisson_pp", "gaussian"}, optional
        Must match the model's own likelihood when given.
    hyper : dict or sequence, optional
        Fixed log-precisions (by name or in ``lm.hyper_names()`` order);
        skips the outer optimisation.
    init : array, optional
        Starting latent vector.
    seed : int
        Stored on the posterior as the default sampling seed.
    """
    if likelihood is not None and likelihood != lm.likelihood:
        raise ValueError(f"model {lm.spec.name} has a {lm.likelihood} likelihood, not {likelihood}")
    eng = _Engine(lm)
    names = lm.hyper_names()
    x = _initial_latent(lm) if init is None else np.asarray(init, dtype=float).copy()

    if hyper is not None:
        theta = np.array([hyper[n] for n in names] if isinstance(hyper, dict) else hyper, dtype=float)
        value, (x, H, cho, n_iter) = eng.laplace(theta, x)
        trace = []
    else:
        theta = _initial_theta(lm)
        state = {"x": x}

        def evaluate(th):
            val, res = eng.laplace(th, state["x"])
            state["x"] = res[0]
            return val

        best = evaluate(theta)
        trace = [best]
        if names:
            for _ in range(50):
                prev = best
                for j in range(len(names)):
                    def along(t, j=j):
                        th = theta.copy()
                        th[j] = t
                        return evaluate(th)

                    t_best, v_best = _golden_max(along, *LOG_PREC_BOUNDS)
                    if v_best > best:
                        theta[j], best = t_best, v_best
                trace.append(best)
                if best - prev < OUTER_TOL:
                    break
        value, (x, H, cho, n_iter) = eng.laplace(theta, state["x"])
        floor = [n for n, t in zip(names, theta) if t <= LOG_PREC_BOUNDS[0] + 1e-3]
        if floor:
            # usually an unbounded likelihood: point design rows the quadrature cannot balance
            log.warning("%s: %s at the lower log-precision bound %g; the quadrature may be too "
                        "coarse for the point density", lm.spec.name, ", ".join(floor), LOG_PREC_BOUNDS[0])

    log.debug("fit %s: log marginal %.6f, hyper %s", lm.spec.name, value, dict(zip(names, theta)))
    return Posterior(
        model=lm,
        mode=x,
        precision=H,
        chol=np.tril(cho[0]),
        constraints=eng.C,
        hyper=dict(zip(names, map(float, theta))),
        log_marginal=float(value),
        n_newton=n_iter,
        seed=seed,
        trace=trace,
    )


def sample_posterior(post: Posterior, n: int, seed: int | None = None) -> np.ndarray:
    """Draw ``n`` latent vectors (rows) from the constrained Gaussian posterior."""
    p = post.mode.size
    if n <= 0:
        return np.zeros((0, p))
    rng = np.random.default_rng(post.seed if seed is None else seed)
    z = rng.standard_normal((p, n))
    # H = L L', so x = mode + L'^{-1} z has covariance H^{-1}
    draws = post.mode[:, None] + solve_triangular(post.chol, z, lower=True, trans="T")
    V, W = post._kriging()
    if V is not None:
        draws = draws - V @ np.linalg.solve(W, post.constraints @ draws)
    return draws.T.copy()
