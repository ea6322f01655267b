"""Gaussian process regression with replication support.

Designs live in the unit hypercube. Replicated evaluations of the same
design are merged into a single averaged observation whose noise variance
is divided by the replicate count, so covariance costs scale with the
number of unique designs rather than total evaluations.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .sampling import maximin_lhs

# Two designs closer than this (max-norm, unit-hypercube coordinates) are
# treated as the same point and merged into replicates.
MERGE_TOL = 1e-8

LENGTHSCALE_BOUNDS = (1e-2, 10.0)
RELATIVE_NUGGET_BOUNDS = (1e-8, 10.0)
VARIANCE_BOUNDS = (1e-3, 1e3)

_JITTER_START = 1e-10
_JITTER_MAX = 1e-6


class GpFitError(RuntimeError):
    """Raised when the covariance factorization or likelihood is unusable."""


@dataclass
class DesignSet:
    """Unique designs with replicate counts and averaged observations."""

    unique_points: np.ndarray      # (n, d), in [0, 1]^d
    rep_counts: np.ndarray         # (n,) positive ints
    obs_means: np.ndarray          # (n,) replicate-averaged observations
    obs_vars: np.ndarray           # (n,) empirical variance, nan when count < 2
    raw_count: int                 # total number of evaluations

    def __post_init__(self):
        self.unique_points = np.atleast_2d(np.asarray(self.unique_points, dtype=float))
        self.rep_counts = np.asarray(self.rep_counts, dtype=int)
        self.obs_means = np.asarray(self.obs_means, dtype=float)
        self.obs_vars = np.asarray(self.obs_vars, dtype=float)
        n = len(self.unique_points)
        if not (len(self.rep_counts) == len(self.obs_means) == len(self.obs_vars) == n):
            raise ValueError("inconsistent design-set field lengths")
        if np.any(self.rep_counts < 1):
            raise ValueError("replicate counts must be >= 1")
        if int(self.rep_counts.sum()) != self.raw_count:
            raise ValueError("replicate counts do not sum to the raw evaluation count")
        if not np.all(np.isfinite(self.obs_means)):
            raise ValueError("observations must be finite")
        if self.unique_points.size and (
            self.unique_points.min() < -1e-9 or self.unique_points.max() > 1 + 1e-9
        ):
            raise ValueError("designs must lie in the unit hypercube")

    @property
    def n_unique(self):
        return len(self.unique_points)

    @property
    def dim(self):
        return self.unique_points.shape[1]

    @classmethod
    def from_observations(cls, x, y, tol=MERGE_TOL):
        """Merge raw evaluation rows (repeats within ``tol`` become replicates)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if len(x) != len(y):
            raise ValueError("x and y row counts differ")
        uniques, groups = [], []
        for i, xi in enumerate(x):
            for j, xu in enumerate(uniques):
                if np.max(np.abs(xi - xu)) < tol:
                    groups[j].append(i)
                    break
            else:
                uniques.append(xi)
                groups.append([i])
        counts = np.array([len(g) for g in groups])
        means = np.array([y[g].mean() for g in groups])
        variances = np.array(
            [y[g].var(ddof=1) if len(g) > 1 else np.nan for g in groups]
        )
        return cls(np.array(uniques), counts, means, variances, len(x))

    def match_index(self, x, tol=MERGE_TOL):
        """Index of the unique design matching ``x`` within ``tol``, or None."""
        if self.n_unique == 0:
            return None
        dist = np.max(np.abs(self.unique_points - np.asarray(x, dtype=float)), axis=1)
        j = int(np.argmin(dist))
        return j if dist[j] < tol else None


@dataclass
class KernelSpec:
    """Stationary kernel hyperparameters, in original output units.

    ``nugget`` is either a homoskedastic noise variance (float) or a
    callable mapping (m, d) design arrays to per-point noise variances.
    """

    family: str                    # "matern52" | "squared_exponential"
    lengthscales: np.ndarray       # (d,) positive
    process_variance: float
    nugget: object = 0.0

    def __post_init__(self):
        if self.family not in ("matern52", "squared_exponential"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        self.lengthscales = np.asarray(self.lengthscales, dtype=float)
        if np.any(self.lengthscales <= 0):
            raise ValueError("lengthscales must be strictly positive")
        if self.process_variance <= 0:
            raise ValueError("process variance must be positive")
        if not callable(self.nugget) and self.nugget < 0:
            raise ValueError("nugget must be nonnegative")

    def noise_at(self, x):
        """Noise variance r(x) at each row of ``x``."""
        x = np.atleast_2d(x)
        if callable(self.nugget):
            r = np.asarray(self.nugget(x), dtype=float).ravel()
            if len(r) != len(x):
                raise ValueError("noise function returned wrong length")
            return r
        return np.full(len(x), float(self.nugget))


def _scaled_sq_dists(a, b, lengthscales):
    """sum_j ((a_ij - b_kj) / l_j)^2 without materializing the 3D tensor."""
    out = np.zeros((len(a), len(b)))
    for j in range(a.shape[1]):
        out += ((a[:, j, None] - b[None, :, j]) / lengthscales[j]) ** 2
    return out


def _correlation(family, s2):
    if family == "squared_exponential":
        return np.exp(-0.5 * s2)
    rho = np.sqrt(np.maximum(s2, 0.0))
    return (1.0 + np.sqrt(5) * rho + (5.0 / 3.0) * s2) * np.exp(-np.sqrt(5) * rho)


def cross_covariance(kernel, a, b):
    """Covariance matrix k(a_i, b_j), shape (len(a), len(b))."""
    s2 = _scaled_sq_dists(np.atleast_2d(a), np.atleast_2d(b), kernel.lengthscales)
    return kernel.process_variance * _correlation(kernel.family, s2)


@dataclass
class GpModel:
    """Immutable fitted model: read-only prediction is thread-safe."""

    design: DesignSet
    kernel: KernelSpec
    chol_factor: np.ndarray        # lower-triangular factor of K_n
    alpha: np.ndarray              # K_n^{-1} (y - y_shift)
    y_shift: float = 0.0
    jitter: float = 0.0
    fit_info: dict = field(default_factory=dict, repr=False)

    def covariance_matrix(self):
        """K_n: kernel at unique designs plus per-point noise r(x_i)/count_i."""
        xu = self.design.unique_points
        k = cross_covariance(self.kernel, xu, xu)
        k[np.diag_indices_from(k)] += (
            self.kernel.noise_at(xu) / self.design.rep_counts + self.jitter
        )
        return k


def _closest_pair(x):
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    i, j = np.unravel_index(np.argmin(d2), d2.shape)
    return int(i), int(j)


def _chol_with_jitter(k, process_variance):
    """Cholesky with an escalating diagonal jitter ladder; (L, jitter) or None."""
    ladder = [0.0] + [
        process_variance * _JITTER_START * 10.0**e
        for e in range(int(np.log10(_JITTER_MAX / _JITTER_START)) + 1)
    ]
    for jitter in ladder:
        try:
            kj = k if jitter == 0.0 else k + jitter * np.eye(len(k))
            return cholesky(kj, lower=True), jitter
        except np.linalg.LinAlgError:
            continue
    return None


def make_model(design, kernel, y_shift=0.0):
    """Assemble a GpModel from fixed hyperparameters (no fitting)."""
    xu = design.unique_points
    k = cross_covariance(kernel, xu, xu)
    k[np.diag_indices_from(k)] += kernel.noise_at(xu) / design.rep_counts
    res = _chol_with_jitter(k, kernel.process_variance)
    if res is None:
        i, j = _closest_pair(xu)
        raise GpFitError(
            f"covariance is singular after jitter escalation; closest design "
            f"pair ({i}, {j}) at max-norm distance "
            f"{np.max(np.abs(xu[i] - xu[j])):.3e}"
        )
    chol, jitter = res
    resid = design.obs_means - y_shift
    alpha = cho_solve((chol, True), resid)
    return GpModel(design, kernel, chol, alpha, y_shift, jitter)


def predict(model, x):
    """Marginal predictions at rows of ``x``.

    Returns (mean, latent_variance, observation_variance); the latent
    variance is clamped to [0, k(x, x)] and the observation variance adds
    the noise r(x) back.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    kx = cross_covariance(model.kernel, model.design.unique_points, x)
    mean = model.y_shift + kx.T @ model.alpha
    v = solve_triangular(model.chol_factor, kx, lower=True)
    pv = model.kernel.process_variance
    latent = np.clip(pv - np.sum(v * v, axis=0), 0.0, pv)
    return mean, latent, latent + model.kernel.noise_at(x)


def predict_joint(model, x):
    """Joint latent posterior (mean vector, covariance matrix) over rows of ``x``.

    Cross-covariances are needed only by the Monte-Carlo multi-point
    baseline; marginal prediction goes through :func:`predict`.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    kx = cross_covariance(model.kernel, model.design.unique_points, x)
    mean = model.y_shift + kx.T @ model.alpha
    v = solve_triangular(model.chol_factor, kx, lower=True)
    cov = cross_covariance(model.kernel, x, x) - v.T @ v
    return mean, cov


def variance_reduction(model, x):
    """One-step decrease in latent variance from one new observation at x.

    v(x)^2 / (v(x) + r(x)); equals v(x) for noiseless observations and
    vanishes as the noise grows.
    """
    _, latent, _ = predict(model, x)
    r = model.kernel.noise_at(np.atleast_2d(x))
    denom = latent + r
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, latent**2 / np.where(denom > 0, denom, 1.0), 0.0)
    return out


def log_likelihood(model):
    """Gaussian log-likelihood of the merged observations under the model."""
    n = model.design.n_unique
    resid = model.design.obs_means - model.y_shift
    logdet = 2.0 * np.sum(np.log(np.diag(model.chol_factor)))
    return -0.5 * (resid @ model.alpha + logdet + n * np.log(2 * np.pi))


class _NllProblem:
    """Profiled / joint negative log-likelihood with analytic gradients.

    Operates on standardized outputs. Parameter vector layout:
    log-lengthscales, then log relative nugget ("estimate" mode) or
    log process variance (known nonzero noise), nothing extra when the
    noise is identically zero (variance profiled analytically).
    """

    def __init__(self, design, family, noise, y_scale, nugget_bounds=None):
        self.family = family
        self.nugget_bounds = nugget_bounds or RELATIVE_NUGGET_BOUNDS
        self.x = design.unique_points
        self.counts = design.rep_counts.astype(float)
        n, d = self.x.shape
        self.n, self.d = n, d
        self.y = (design.obs_means - design.obs_means.mean()) / y_scale
        # per-dimension squared differences, reused by every evaluation
        self.diffs2 = np.empty((d, n, n))
        for j in range(d):
            self.diffs2[j] = (self.x[:, j, None] - self.x[None, :, j]) ** 2
        if noise == "estimate":
            self.mode = "nugget"
        elif callable(noise) or (isinstance(noise, (int, float)) and noise > 0):
            self.mode = "known"
            if callable(noise):
                r = np.asarray(noise(self.x), dtype=float).ravel()
            else:
                r = np.full(n, float(noise))
            self.r_scaled = r / y_scale**2 / self.counts
        else:
            self.mode = "zero"

    @property
    def n_params(self):
        return self.d + (self.mode != "zero")

    def bounds(self):
        b = [tuple(np.log(LENGTHSCALE_BOUNDS))] * self.d
        if self.mode == "nugget":
            b.append(tuple(np.log(self.nugget_bounds)))
        elif self.mode == "known":
            b.append(tuple(np.log(VARIANCE_BOUNDS)))
        return b

    def _corr_parts(self, lengthscales):
        inv2 = 1.0 / lengthscales**2
        s2 = np.tensordot(inv2, self.diffs2, axes=(0, 0))
        if self.family == "squared_exponential":
            c = np.exp(-0.5 * s2)
            # dC/dlog l_j = C * S_j with S_j the scaled per-dim sq distance
            w = c
        else:
            rho = np.sqrt(np.maximum(s2, 0.0))
            e = np.exp(-np.sqrt(5) * rho)
            c = (1.0 + np.sqrt(5) * rho + (5.0 / 3.0) * s2) * e
            w = (5.0 / 3.0) * (1.0 + np.sqrt(5) * rho) * e
        return c, w

    def value_and_grad(self, params):
        n = self.n
        lengthscales = np.exp(params[: self.d])
        c, w = self._corr_parts(lengthscales)

        if self.mode == "known":
            sigma2 = np.exp(params[-1])
            k = sigma2 * c
            k[np.diag_indices_from(k)] += self.r_scaled
        else:
            k = c.copy()
            if self.mode == "nugget":
                g = np.exp(params[-1])
                k[np.diag_indices_from(k)] += g / self.counts
        try:
            chol = cholesky(k + 1e-12 * np.eye(n), lower=True)
        except np.linalg.LinAlgError:
            return np.inf, np.zeros_like(params)
        alpha = cho_solve((chol, True), self.y)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        kinv = cho_solve((chol, True), np.eye(n))
        quad = self.y @ alpha

        grad = np.empty_like(params)
        if self.mode == "known":
            nll = 0.5 * (quad + logdet + n * np.log(2 * np.pi))
            # d/dtheta: -0.5 a' dK a + 0.5 tr(Kinv dK)
            trace_m = sigma2 * (kinv * w)
            quad_m = sigma2 * (np.outer(alpha, alpha) * w)
            per_dim = np.tensordot(self.diffs2, trace_m - quad_m, axes=([1, 2], [0, 1]))
            grad[: self.d] = 0.5 * per_dim / lengthscales**2
            dk_sig = sigma2 * c
            grad[-1] = 0.5 * (np.sum(kinv * dk_sig) - alpha @ dk_sig @ alpha)
        else:
            if quad < 0:
                return np.inf, np.zeros_like(params)
            # floor keeps constant outputs (quad == 0) fittable
            sigma2_hat = max(quad / n, 1e-12)
            nll = 0.5 * (n * np.log(sigma2_hat) + logdet + n * (1 + np.log(2 * np.pi)))
            trace_m = kinv * w
            quad_m = (np.outer(alpha, alpha) / sigma2_hat) * w
            per_dim = np.tensordot(self.diffs2, trace_m - quad_m, axes=([1, 2], [0, 1]))
            grad[: self.d] = 0.5 * per_dim / lengthscales**2
            if self.mode == "nugget":
                diag_term = g / self.counts
                grad[-1] = 0.5 * (
                    np.diag(kinv) @ diag_term - (alpha**2 / sigma2_hat) @ diag_term
                )
        if not np.isfinite(nll):
            return np.inf, np.zeros_like(params)
        return nll, grad

    def finish(self, params, y_shift, y_scale):
        """Kernel spec in original output units for the optimal parameters."""
        lengthscales = np.exp(params[: self.d])
        if self.mode == "known":
            sigma2 = np.exp(params[-1])
            return KernelSpec(self.family, lengthscales, sigma2 * y_scale**2)
        c, _ = self._corr_parts(lengthscales)
        k = c.copy()
        if self.mode == "nugget":
            g = np.exp(params[-1])
            k[np.diag_indices_from(k)] += g / self.counts
        chol = cholesky(k + 1e-12 * np.eye(self.n), lower=True)
        alpha = cho_solve((chol, True), self.y)
        sigma2_hat = max(self.y @ alpha / self.n, 1e-12)
        nugget = g * sigma2_hat * y_scale**2 if self.mode == "nugget" else 0.0
        return KernelSpec(
            self.family, lengthscales, sigma2_hat * y_scale**2, nugget
        )


def fit(design, family="matern52", noise=0.0, n_starts=5, seed=0, init=None,
        nugget_bounds=None):
    """Fit hyperparameters by multi-start maximum likelihood.

    ``noise`` is "estimate" (homoskedastic nugget by MLE), a known
    constant variance, or a callable r(x) >= 0. ``init`` warm-starts the
    search with a previous KernelSpec (counted on top of ``n_starts``
    space-filling starts). Outputs are centered/scaled internally;
    the returned model is expressed in original units.
    """
    if design.n_unique < design.dim + 2:
        raise ValueError(
            f"need at least d+2={design.dim + 2} unique designs, "
            f"got {design.n_unique}"
        )
    y_shift = float(design.obs_means.mean())
    y_scale = float(design.obs_means.std())
    if y_scale < 1e-12:
        y_scale = 1.0
    problem = _NllProblem(design, family, noise, y_scale, nugget_bounds)
    bounds = problem.bounds()
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    rng = np.random.default_rng(seed)
    starts = [lo + (hi - lo) * u for u in maximin_lhs(n_starts, len(bounds), rng)]
    if init is not None:
        p0 = list(np.log(np.clip(init.lengthscales, *LENGTHSCALE_BOUNDS)))
        if problem.mode == "nugget":
            g0 = float(init.nugget) / max(init.process_variance, 1e-12)
            p0.append(np.log(np.clip(g0, *problem.nugget_bounds)))
        elif problem.mode == "known":
            s0 = init.process_variance / y_scale**2
            p0.append(np.log(np.clip(s0, *VARIANCE_BOUNDS)))
        starts.insert(0, np.array(p0))

    best, best_nll = None, np.inf
    init_nlls = []
    for p0 in starts:
        init_nlls.append(problem.value_and_grad(p0)[0])
        res = minimize(
            problem.value_and_grad,
            p0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": 200, "ftol": 1e-10, "gtol": 1e-6},
        )
        if res.fun < best_nll:
            best, best_nll = res.x, res.fun
    if best is None or not np.isfinite(best_nll):
        raise GpFitError("non-finite likelihood at every start")

    kernel = problem.finish(best, y_shift, y_scale)
    if callable(noise):
        kernel.nugget = noise
    elif problem.mode == "known":
        kernel.nugget = float(noise)
    model = make_model(design, kernel, y_shift)
    model.fit_info.update(
        {"starts": starts, "init_nll": init_nlls, "final_nll": float(best_nll)}
    )
    return model
