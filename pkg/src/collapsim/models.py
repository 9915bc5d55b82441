"""Loss models, samplers, and empirical risk minimizers.

Each model bundles a per-observation loss with its first two
derivatives and a deterministic sampler y = phi(beta, x, u), where u is
a Gaussian or uniform noise primitive. Keeping the noise explicit makes
every draw reproducible from a seed and lets the same primitive be
replayed across estimators.

Kinds: three GLMs sharing the loss -y*s + A(s) with s = beta.x
(linear A = s^2/2, logistic A = log(1+e^s), Poisson A = e^s), and a
non-convex quadratic single-index model y = (beta.x)^2 + noise with
squared-error loss. The single-index loss is even in beta, so fits are
only identified up to sign.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special, stats

POISSON_RATE_CAP = 1e6

KINDS = ("linear", "logistic", "poisson", "single_index_quadratic")


class ModelError(ValueError):
    pass


class UnknownKind(ModelError):
    pass


class SingularGram(ModelError):
    """Rank-deficient design: the normal equations (or Newton system)
    have no unique solution."""


class SingularHessian(ModelError):
    pass


class RateOverflow(ModelError):
    """Poisson rate exceeded the sampler cap."""


class MissingWarmStart(ModelError):
    pass


@dataclass(frozen=True)
class CovariateLaw:
    """Covariate distribution: standard normal by default, or a fixed
    constant vector (useful for degenerate-design checks)."""

    tag: str = "standard_normal"
    value: Optional[tuple[float, ...]] = None

    def draw(self, rng: np.random.Generator, n: int, d: int) -> np.ndarray:
        if self.tag == "standard_normal":
            return rng.standard_normal((n, d))
        if self.tag == "constant":
            vec = np.asarray(self.value, dtype=float)
            if vec.shape != (d,):
                raise ModelError(f"constant covariate vector must have length {d}")
            return np.tile(vec, (n, 1))
        raise ModelError(f"unknown covariate law {self.tag!r}")

    def second_moment(self, d: int) -> np.ndarray:
        # E[x x^T], exact
        if self.tag == "standard_normal":
            return np.eye(d)
        if self.tag == "constant":
            vec = np.asarray(self.value, dtype=float)
            return np.outer(vec, vec)
        raise ModelError(f"unknown covariate law {self.tag!r}")


@dataclass(frozen=True)
class Dataset:
    """Design matrix X (n x d) with responses y (n,)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ModelError(f"inconsistent dataset shapes {X.shape} / {y.shape}")
        if X.shape[0] < 1:
            raise ModelError("dataset needs at least one row")

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class FitResult:
    beta_hat: np.ndarray
    grad_norm: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class SolverOptions:
    newton_tol: float = 1e-10
    newton_max_iter: int = 100
    max_halvings: int = 30
    quasi_newton_tol: float = 1e-8
    quasi_newton_max_iter: int = 500


@dataclass(frozen=True)
class LossModel:
    """Base loss/sampler bundle; see module docstring for the kinds."""

    kind: str
    d: int
    noise_sigma: float
    covariate_law: CovariateLaw
    convex: bool
    noise_kind: str  # "gaussian" or "uniform"

    # Batch forms; mean over rows. Subclasses implement these.
    def mean_loss(self, beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        raise NotImplementedError

    def mean_grad(self, beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def mean_hess(self, beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def per_sample_grads(
        self, beta: np.ndarray, X: np.ndarray, y: np.ndarray
    ) -> np.ndarray:
        raise NotImplementedError

    def sample(self, beta: np.ndarray, X: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Responses as a deterministic function of (beta, X, u)."""
        raise NotImplementedError

    # Single-observation contract surface.
    def loss(self, beta, x, y) -> float:
        return self.mean_loss(np.asarray(beta, float), np.atleast_2d(x), np.atleast_1d(y))

    def grad(self, beta, x, y) -> np.ndarray:
        return self.mean_grad(np.asarray(beta, float), np.atleast_2d(x), np.atleast_1d(y))

    def hess(self, beta, x, y) -> np.ndarray:
        return self.mean_hess(np.asarray(beta, float), np.atleast_2d(x), np.atleast_1d(y))

    def draw_covariates(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.covariate_law.draw(rng, n, self.d)

    def draw_noise(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.noise_kind == "gaussian":
            return rng.standard_normal(n)
        return rng.random(n)


class _GlmModel(LossModel):
    """Shared machinery for the exponential-family trio."""

    def _a0(self, s):
        raise NotImplementedError

    def _a1(self, s):
        raise NotImplementedError

    def _a2(self, s):
        raise NotImplementedError

    def mean_loss(self, beta, X, y):
        s = X @ beta
        with np.errstate(over="ignore"):
            return float(np.mean(-y * s + self._a0(s)))

    def mean_grad(self, beta, X, y):
        s = X @ beta
        with np.errstate(over="ignore"):
            r = self._a1(s) - y
        return X.T @ r / X.shape[0]

    def mean_hess(self, beta, X, y):
        s = X @ beta
        with np.errstate(over="ignore"):
            w = self._a2(s)
        return (X * w[:, None]).T @ X / X.shape[0]

    def per_sample_grads(self, beta, X, y):
        s = X @ beta
        return (self._a1(s) - y)[:, None] * X


@dataclass(frozen=True)
class LinearModel(_GlmModel):
    def _a0(self, s):
        return 0.5 * s * s

    def _a1(self, s):
        return s

    def _a2(self, s):
        return np.ones_like(s)

    def sample(self, beta, X, u):
        return X @ beta + self.noise_sigma * u


@dataclass(frozen=True)
class LogisticModel(_GlmModel):
    def _a0(self, s):
        return np.logaddexp(0.0, s)

    def _a1(self, s):
        return special.expit(s)

    def _a2(self, s):
        # p(1-p) computed as expit(s)*expit(-s) for stability in the tails
        return special.expit(s) * special.expit(-s)

    def sample(self, beta, X, u):
        return (u <= special.expit(X @ beta)).astype(float)


@dataclass(frozen=True)
class PoissonModel(_GlmModel):
    def _a0(self, s):
        return np.exp(s)

    def _a1(self, s):
        return np.exp(s)

    def _a2(self, s):
        return np.exp(s)

    def sample(self, beta, X, u):
        with np.errstate(over="ignore"):
            rate = np.exp(X @ beta)
        if np.any(rate > POISSON_RATE_CAP) or not np.all(np.isfinite(rate)):
            raise RateOverflow(
                f"poisson rate exceeds cap {POISSON_RATE_CAP:g}; parameters diverged"
            )
        # inverse CDF on the uniform primitive; u=0 would map below support
        return stats.poisson.ppf(np.maximum(u, 1e-300), rate)


@dataclass(frozen=True)
class SingleIndexQuadraticModel(LossModel):
    """y = (beta.x)^2 + sigma*u with squared-error loss; even in beta."""

    def mean_loss(self, beta, X, y):
        s = X @ beta
        r = y - s * s
        return float(0.5 * np.mean(r * r))

    def mean_grad(self, beta, X, y):
        s = X @ beta
        coef = -2.0 * s * (y - s * s)
        return X.T @ coef / X.shape[0]

    def mean_hess(self, beta, X, y):
        s = X @ beta
        w = 6.0 * s * s - 2.0 * y
        return (X * w[:, None]).T @ X / X.shape[0]

    def per_sample_grads(self, beta, X, y):
        s = X @ beta
        return (-2.0 * s * (y - s * s))[:, None] * X

    def sample(self, beta, X, u):
        s = X @ beta
        return s * s + self.noise_sigma * u


_KIND_TABLE = {
    "linear": (LinearModel, True, "gaussian"),
    "logistic": (LogisticModel, True, "uniform"),
    "poisson": (PoissonModel, True, "uniform"),
    "single_index_quadratic": (SingleIndexQuadraticModel, False, "gaussian"),
}


def make_model(
    kind: str,
    d: int,
    noise_sigma: float = 1.0,
    covariate_law: Optional[CovariateLaw] = None,
) -> LossModel:
    """Construct a loss model.

    Args:
        kind: one of linear, logistic, poisson, single_index_quadratic.
        d: parameter dimension, >= 1.
        noise_sigma: additive noise scale; enters linear and single-index
            sampling only.
        covariate_law: covariate distribution, standard normal by default.
    """
    if kind not in _KIND_TABLE:
        raise UnknownKind(f"unknown model kind {kind!r}; known: {', '.join(KINDS)}")
    if d < 1:
        raise ModelError(f"dimension must be >= 1, got {d}")
    if not noise_sigma > 0:
        raise ModelError(f"noise_sigma must be > 0, got {noise_sigma}")
    cls, convex, noise_kind = _KIND_TABLE[kind]
    law = covariate_law if covariate_law is not None else CovariateLaw()
    return cls(
        kind=kind,
        d=int(d),
        noise_sigma=float(noise_sigma),
        covariate_law=law,
        convex=convex,
        noise_kind=noise_kind,
    )


def _fit_ols(model: LossModel, data: Dataset) -> FitResult:
    gram = data.X.T @ data.X
    moment = data.X.T @ data.y
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise SingularGram("design matrix is rank-deficient") from exc
    beta = np.linalg.solve(chol.T, np.linalg.solve(chol, moment))
    gnorm = float(np.linalg.norm(model.mean_grad(beta, data.X, data.y)))
    # exact normal-equation solve; converged by construction
    return FitResult(beta_hat=beta, grad_norm=gnorm, iterations=1, converged=True)


def _fit_newton(model: LossModel, data: Dataset, opts: SolverOptions, start) -> FitResult:
    X, y = data.X, data.y
    beta = np.zeros(model.d) if start is None else np.asarray(start, float).copy()
    f = model.mean_loss(beta, X, y)
    gnorm = float(np.linalg.norm(model.mean_grad(beta, X, y)))
    iters = 0
    for _ in range(opts.newton_max_iter):
        g = model.mean_grad(beta, X, y)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= opts.newton_tol:
            return FitResult(beta, gnorm, iters, True)
        H = model.mean_hess(beta, X, y)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError as exc:
            raise SingularGram("Newton system is singular (rank-deficient design)") from exc
        scale = 1.0
        # decrease up to fp rounding: near the optimum a Newton step moves
        # the objective by less than one ulp while the gradient still
        # contracts quadratically
        pad = 4.0 * np.finfo(float).eps * (1.0 + abs(f))
        for _ in range(opts.max_halvings + 1):
            cand = beta - scale * step
            fc = model.mean_loss(cand, X, y)
            if fc < f + pad:
                break
            scale *= 0.5
        else:
            # no decrease possible at the halving floor; stop here
            return FitResult(beta, gnorm, iters, gnorm <= opts.newton_tol)
        beta, f = cand, fc
        iters += 1
    gnorm = float(np.linalg.norm(model.mean_grad(beta, X, y)))
    return FitResult(beta, gnorm, iters, gnorm <= opts.newton_tol)


def _fit_bfgs(model: LossModel, data: Dataset, opts: SolverOptions, start) -> FitResult:
    """Dense BFGS with Armijo backtracking; deterministic given inputs."""
    X, y = data.X, data.y
    x = np.asarray(start, float).copy()
    d = x.size
    hinv = np.eye(d)
    f = model.mean_loss(x, X, y)
    g = model.mean_grad(x, X, y)
    iters = 0
    for _ in range(opts.quasi_newton_max_iter):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= opts.quasi_newton_tol:
            return FitResult(x, gnorm, iters, True)
        p = -hinv @ g
        slope = float(p @ g)
        if slope >= 0.0:
            # curvature information went bad; restart from steepest descent
            hinv = np.eye(d)
            p = -g
            slope = -gnorm * gnorm
        alpha = 1.0
        accepted = False
        pad = 4.0 * np.finfo(float).eps * (1.0 + abs(f))
        while alpha > 1e-20:
            cand = x + alpha * p
            fc = model.mean_loss(cand, X, y)
            if fc <= f + 1e-4 * alpha * slope + pad:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        gc = model.mean_grad(cand, X, y)
        s = cand - x
        yv = gc - g
        sy = float(s @ yv)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(yv)):
            rho = 1.0 / sy
            eye_minus = np.eye(d) - rho * np.outer(s, yv)
            hinv = eye_minus @ hinv @ eye_minus.T + rho * np.outer(s, s)
        x, f, g = cand, fc, gc
        iters += 1
    gnorm = float(np.linalg.norm(g))
    return FitResult(x, gnorm, iters, gnorm <= opts.quasi_newton_tol)


def fit(
    model: LossModel,
    data: Dataset,
    opts: Optional[SolverOptions] = None,
    warm_start: Optional[np.ndarray] = None,
) -> FitResult:
    """Empirical risk minimization on one dataset.

    Linear uses the closed-form normal-equation solve; logistic and
    Poisson use damped Newton to gradient norm 1e-10 (cap 100
    iterations, halving line search); the single-index kind runs BFGS
    with backtracking from a mandatory warm start (cap 500).

    An iteration cap produces converged=False with the best iterate,
    never an exception; SingularGram signals a rank-deficient design.
    """
    opts = opts if opts is not None else SolverOptions()
    if data.X.shape[1] != model.d:
        raise ModelError(
            f"dataset has dimension {data.X.shape[1]}, model expects {model.d}"
        )
    if model.kind == "linear":
        return _fit_ols(model, data)
    if model.convex:
        return _fit_newton(model, data, opts, warm_start)
    if warm_start is None:
        raise MissingWarmStart(
            f"kind {model.kind!r} is non-convex; fit requires a warm start"
        )
    return _fit_bfgs(model, data, opts, warm_start)


def sandwich(
    model: LossModel,
    beta_star: np.ndarray,
    mc_samples: int = 100_000,
    rng_seed: int = 0,
    force_mc: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Asymptotic per-fit covariance (curvature, score outer moment, and
    their sandwich) at the data-generating parameter.

    Returns (H, G, V) with V = H^-1 G H^-1, symmetrized. Linear has the
    exact closed form (both H and G are noise_sigma^2-scaled covariate
    second moments); other kinds are estimated by Monte Carlo with
    mc_samples draws from the given seed. force_mc runs the Monte Carlo
    path for linear too (used to cross-check the closed form).
    """
    beta_star = np.asarray(beta_star, dtype=float)
    if beta_star.shape != (model.d,):
        raise ModelError(f"beta_star must have shape ({model.d},)")
    if mc_samples < 1:
        raise ModelError("mc_samples must be >= 1")
    if model.kind == "linear" and not force_mc:
        H = model.covariate_law.second_moment(model.d)
        G = model.noise_sigma**2 * H
    else:
        rng = np.random.default_rng(np.random.SeedSequence(int(rng_seed)))
        X = model.draw_covariates(rng, mc_samples)
        u = model.draw_noise(rng, mc_samples)
        y = model.sample(beta_star, X, u)
        H = model.mean_hess(beta_star, X, y)
        scores = model.per_sample_grads(beta_star, X, y)
        G = scores.T @ scores / mc_samples
    H = 0.5 * (H + H.T)
    G = 0.5 * (G + G.T)
    try:
        hg = np.linalg.solve(H, G)
        V = np.linalg.solve(H, hg.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularHessian("curvature matrix is singular at beta_star") from exc
    V = 0.5 * (V + V.T)
    return H, G, V
