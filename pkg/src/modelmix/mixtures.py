"""Bayesian model-mixing posteriors in unconstrained coordinates.

Four variants share the mixture likelihood

    y_i = sum_k omega_k(x_i) * (f_k(x_i) + delta_k(x_i)) + sigma * eps_i

and differ in how the weights are modelled:

``gbmm-l``
    global weights, independent Uniform(0, 1) priors, no simplex constraint
``gbmm-d``
    global weights drawn from Dirichlet(alpha), HalfNormal prior on alpha
``lbmm-gld``
    per-location Dirichlet weights with ``log alpha_k(x) = beta_k . x``
``lbmm-gpd``
    per-location Dirichlet weights with ``log alpha_k`` a constant-mean GP

Each builder returns a :class:`ModelSpec` exposing the log posterior and its
analytic gradient over a flat parameter vector ``theta``.  Positive
parameters live on the log scale, simplex weights go through the centered
stick-breaking map, and GP latents are whitened (non-centered).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .dataset import DataError
from .prob import (
    LOG_2PI,
    Gamma,
    HalfNormal,
    Normal,
    NumericalError,
    Uniform,
    cholesky_jitter,
    clamp_concentration,
    ALPHA_MAX,
    ALPHA_MIN,
    digamma_scalar,
    dirichlet_grad_alpha,
    dirichlet_logpdf,
    format_dist,
    project_simplex,
    stick_breaking,
    stick_breaking_small,
    stick_breaking_vjp,
    stick_breaking_vjp_small,
)

LOG_ALPHA_MIN = math.log(ALPHA_MIN)
LOG_ALPHA_MAX = math.log(ALPHA_MAX)

__all__ = [
    "VARIANTS",
    "Block",
    "ModelSpec",
    "Packing",
    "PriorConfig",
    "build",
    "build_gbmm_d",
    "build_gbmm_l",
    "build_lbmm_gld",
    "build_lbmm_gpd",
    "grad_log_posterior",
    "log_posterior",
    "project_simplex",
]


@dataclass(frozen=True)
class PriorConfig:
    sigma: object = Gamma(5.0, 10.0)
    omega: object = Uniform(0.0, 1.0)
    alpha: object = HalfNormal(2.0)
    beta: object = Normal(0.0, 1.0)
    gamma_inf: object = Normal(0.0, 1.0)
    eta: object = Gamma(10.0, 2.0)
    rho: object = Gamma(5.0, 2.0)

    def as_dict(self):
        return {k: format_dist(getattr(self, k)) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class Block:
    name: str
    role: str
    transform: str
    offset: int
    shape: tuple
    size: int = field(init=False)
    slice: slice = field(init=False)

    def __post_init__(self):
        size = math.prod(self.shape)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "slice", slice(self.offset, self.offset + size))


class Packing:
    """Named, disjoint slices of the flat parameter vector."""

    def __init__(self, layout):
        blocks, offset = [], 0
        for name, role, transform, shape in layout:
            b = Block(name, role, transform, offset, tuple(shape))
            blocks.append(b)
            offset += b.size
        self.blocks = tuple(blocks)
        self.d = offset
        self._by_name = {b.name: b for b in self.blocks}
        self._plan = [(b.name, b.slice, b.shape) for b in self.blocks]

    def __getitem__(self, name):
        return self._by_name[name]

    def __contains__(self, name):
        return name in self._by_name

    def split(self, theta):
        return {name: theta[sl].reshape(shape) for name, sl, shape in self._plan}

    def as_list(self):
        return [
            {"name": b.name, "role": b.role, "transform": b.transform,
             "offset": b.offset, "shape": list(b.shape)}
            for b in self.blocks
        ]


def _positive_terms(t, dist):
    """Log prior plus log-Jacobian for ``x = exp(t)`` and its t-gradient."""
    x = np.exp(t)
    lp = float(dist.logpdf(x).sum() + t.sum())
    return lp, dist.grad_logpdf(x) * x + 1.0, x


class ModelSpec:
    """Posterior of one mixing variant over an AlignedDataset.

    Immutable after construction; ``log_posterior`` and ``grad`` are pure.
    """

    variant = ""
    local = False

    def __init__(self, data, priors, use_corrections):
        if data.y is None:
            raise DataError("fitting requires observations")
        if data.p < 2:
            raise DataError("mixing needs at least two models")
        self.data = data
        self.priors = priors
        self.use_corrections = bool(use_corrections)
        self.y = np.asarray(data.y, dtype=float)
        self.F = np.asarray(data.effective(self.use_corrections), dtype=float)
        self.n, self.p = self.F.shape
        self.model_names = list(data.model_names)
        self.packing = Packing(self._layout())
        self.notes = []

    @property
    def d(self):
        return self.packing.d

    def _layout(self):
        raise NotImplementedError

    def init_theta(self):
        theta = np.zeros(self.d)
        theta[self.packing["log_sigma"].slice] = math.log(self.priors.sigma.mean)
        return theta

    # -- shared pieces ---------------------------------------------------

    def _likelihood(self, mu, t_sigma):
        """Gaussian log likelihood, its log-sigma gradient and d/d mu."""
        sigma = math.exp(t_sigma)
        r = self.y - mu
        ss = float(r @ r)
        ll = -self.n * t_sigma - 0.5 * self.n * LOG_2PI - 0.5 * ss / sigma**2
        return ll, -self.n + ss / sigma**2, r / sigma**2

    def _sigma_prior(self, t_sigma):
        sigma = math.exp(t_sigma)
        prior = self.priors.sigma
        return float(prior.logpdf(sigma)) + t_sigma, float(prior.grad_logpdf(sigma)) * sigma + 1.0

    def _check(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.d,):
            raise ValueError(f"theta must have length {self.d}, got {theta.shape}")
        if np.any(np.isnan(theta)):
            raise ValueError("theta contains NaN")
        return theta

    # -- public surface --------------------------------------------------

    def evaluate(self, theta):
        """Return ``(log_posterior, gradient, n_clamped)``."""
        return self._evaluate(self._check(theta))

    def _evaluate(self, theta):
        raise NotImplementedError

    def value_and_grad(self, theta):
        lp, g, _ = self.evaluate(theta)
        return lp, g

    def log_posterior(self, theta):
        return self.evaluate(theta)[0]

    def grad(self, theta):
        return self.evaluate(theta)[1]

    def constrained(self, theta):
        """Natural-scale parameter values for one draw."""
        raise NotImplementedError

    def weights(self, theta):
        """Mixture weights at the training locations, shape (p,) or (n, p)."""
        return self.constrained(theta)["omega"]

    def scalar_names(self):
        """Names of the low-dimensional (non per-location) parameters, in order."""
        raise NotImplementedError

    def scalar_values(self, theta):
        raise NotImplementedError

    def metadata(self):
        return {
            "variant": self.variant,
            "d": self.d,
            "n": self.n,
            "p": self.p,
            "models": self.model_names,
            "use_corrections": self.use_corrections,
            "priors": self.priors.as_dict(),
            "packing": self.packing.as_list(),
            "notes": list(self.notes),
        }


class GlobalLinear(ModelSpec):
    """Global weights on [0, 1]^p via logit transforms (no simplex constraint)."""

    variant = "gbmm-l"

    def _layout(self):
        return [
            ("omega_logit", "weights", "logit", (self.p,)),
            ("log_sigma", "sigma", "log", ()),
        ]

    def _omega(self, t):
        lo, hi = self.priors.omega.lo, self.priors.omega.hi
        s = 1.0 / (1.0 + np.exp(-t))
        return lo + (hi - lo) * s, s

    def _evaluate(self, theta):
        p = self.p
        t = theta[:p]
        t_sigma = float(theta[p])
        lo, hi = self.priors.omega.lo, self.priors.omega.hi
        omega, s = self._omega(t)
        if not ((omega > lo) & (omega < hi)).all():
            # sigmoid saturated to a boundary
            return -math.inf, np.zeros(self.d), 0
        ll, g_sig, rbar = self._likelihood(self.F @ omega, t_sigma)
        lp_sig, g_sig_prior = self._sigma_prior(t_sigma)
        # uniform density plus log|d omega / d t| = log(hi - lo) + log s + log(1 - s)
        log_jac = float(np.log(s * (1.0 - s)).sum()) + p * math.log(hi - lo)
        lp_omega = -p * math.log(hi - lo) + log_jac
        grad = np.empty(self.d)
        grad[:p] = (self.F.T @ rbar) * (hi - lo) * s * (1.0 - s) + 1.0 - 2.0 * s
        grad[p] = g_sig + g_sig_prior
        return ll + lp_sig + lp_omega, grad, 0

    def constrained(self, theta):
        parts = self.packing.split(np.asarray(theta, dtype=float))
        omega, _ = self._omega(parts["omega_logit"])
        return {"omega": omega, "sigma": math.exp(float(parts["log_sigma"]))}

    def scalar_names(self):
        return ["sigma"] + [f"omega[{m}]" for m in self.model_names]

    def scalar_values(self, theta):
        c = self.constrained(theta)
        return np.concatenate([[c["sigma"]], c["omega"]])


class GlobalDirichlet(ModelSpec):
    """Global simplex weights with a hierarchical Dirichlet prior."""

    variant = "gbmm-d"

    def _layout(self):
        return [
            ("omega_z", "weights-z", "stick-breaking", (self.p - 1,)),
            ("log_alpha", "alpha", "log", (self.p,)),
            ("log_sigma", "sigma", "log", ()),
        ]

    def _evaluate(self, theta):
        # p is small here, so the p-length algebra runs as scalar Python
        p = self.p
        t_alpha = theta[p - 1 : 2 * p - 1]
        t_sigma = float(theta[-1])
        omega, log_omega, s = stick_breaking_small(theta[: p - 1].tolist())
        ll, g_sig, rbar = self._likelihood(self.F @ np.array(omega), t_sigma)
        lp_sig, g_sig_prior = self._sigma_prior(t_sigma)
        lp_alpha, g_alpha_prior, _ = _positive_terms(t_alpha, self.priors.alpha)

        alpha, clamped = [], []
        for t in t_alpha.tolist():
            alpha.append(math.exp(min(max(t, LOG_ALPHA_MIN), LOG_ALPHA_MAX)))
            clamped.append(not LOG_ALPHA_MIN <= t <= LOG_ALPHA_MAX)
        a0 = sum(alpha)
        # Dirichlet density plus stick-breaking log-Jacobian (= sum log omega)
        lp_dir = math.lgamma(a0) + sum(a * lw - math.lgamma(a) for a, lw in zip(alpha, log_omega))

        ftr = (self.F.T @ rbar).tolist()
        coef = [a + f * w for a, f, w in zip(alpha, ftr, omega)]
        psi0 = digamma_scalar(a0)
        g_dir = [
            0.0 if c else (psi0 - digamma_scalar(a) + lw) * a
            for a, lw, c in zip(alpha, log_omega, clamped)
        ]
        grad = np.empty(self.d)
        grad[: p - 1] = stick_breaking_vjp_small(s, coef)
        grad[p - 1 : 2 * p - 1] = np.array(g_dir) + g_alpha_prior
        grad[-1] = g_sig + g_sig_prior
        return ll + lp_sig + lp_alpha + lp_dir, grad, sum(clamped)

    def constrained(self, theta):
        parts = self.packing.split(np.asarray(theta, dtype=float))
        omega, _, _ = stick_breaking(parts["omega_z"])
        alpha, _ = clamp_concentration(parts["log_alpha"])
        return {"omega": omega, "alpha": alpha, "sigma": math.exp(float(parts["log_sigma"]))}

    def scalar_names(self):
        return (
            ["sigma"]
            + [f"omega[{m}]" for m in self.model_names]
            + [f"alpha[{m}]" for m in self.model_names]
        )

    def scalar_values(self, theta):
        c = self.constrained(theta)
        return np.concatenate([[c["sigma"]], c["omega"], c["alpha"]])


class _LocalDirichlet(ModelSpec):
    """Shared per-location Dirichlet machinery for the local variants."""

    local = True

    def _local_terms(self, parts, log_alpha):
        """Likelihood, Dirichlet, sigma terms and the gradient pieces.

        Returns ``(lp, grad_z, grad_log_alpha, grad_log_sigma, n_clamped)``.
        """
        t_sigma = float(parts["log_sigma"])
        omega, log_omega, s = stick_breaking(parts["omega_z"])
        alpha, clamped = clamp_concentration(log_alpha)
        mu = np.einsum("ik,ik->i", omega, self.F)
        ll, g_sig, rbar = self._likelihood(mu, t_sigma)
        lp_sig, g_sig_prior = self._sigma_prior(t_sigma)
        lp_dir = float(dirichlet_logpdf(log_omega, alpha).sum() + log_omega.sum())
        coef = alpha + rbar[:, None] * self.F * omega
        g_z = stick_breaking_vjp(s, coef)
        g_la = np.where(clamped, 0.0, dirichlet_grad_alpha(log_omega, alpha) * alpha)
        return ll + lp_sig + lp_dir, g_z, g_la, g_sig + g_sig_prior, int(clamped.sum())


class LocalLinearDirichlet(_LocalDirichlet):
    """Per-location Dirichlet weights, ``log alpha = X @ beta.T``."""

    variant = "lbmm-gld"

    def __init__(self, data, priors, use_corrections, covariate_map=None, intercept=True):
        self.covariate_map = covariate_map
        self.intercept = bool(intercept)
        raw = self._raw_features(data.locations)
        self.feature_mean = raw.mean(axis=0)
        sd = raw.std(axis=0)
        self.feature_sd = np.where(sd > 0, sd, 1.0)
        self.X = self.features(data.locations, raw)
        self.q = self.X.shape[1]
        super().__init__(data, priors, use_corrections)

    def _raw_features(self, locations):
        if self.covariate_map is None:
            raw = np.array(locations, dtype=float).reshape(len(locations), -1)
        else:
            raw = np.array([np.ravel(self.covariate_map(loc)) for loc in locations], dtype=float)
        if raw.ndim != 2 or raw.shape[1] < 1:
            raise DataError("covariates must have at least one dimension")
        if not np.all(np.isfinite(raw)):
            raise DataError("non-finite covariate values")
        return raw

    def features(self, locations, raw=None):
        """Standardized covariates (with a leading intercept column if enabled)."""
        if raw is None:
            raw = self._raw_features(locations)
        X = (raw - self.feature_mean) / self.feature_sd
        if self.intercept:
            X = np.hstack([np.ones((X.shape[0], 1)), X])
        return X

    def _layout(self):
        return [
            ("omega_z", "weights-z", "stick-breaking", (self.n, self.p - 1)),
            ("beta", "beta", "identity", (self.p, self.q)),
            ("log_sigma", "sigma", "log", ()),
        ]

    def _evaluate(self, theta):
        parts = self.packing.split(theta)
        beta = parts["beta"]
        lp, g_z, g_la, g_sig, nclamp = self._local_terms(parts, self.X @ beta.T)
        lp += float(np.sum(self.priors.beta.logpdf(beta)))
        grad = np.empty(self.d)
        grad[self.packing["omega_z"].slice] = g_z.ravel()
        grad[self.packing["beta"].slice] = (g_la.T @ self.X + self.priors.beta.grad_logpdf(beta)).ravel()
        grad[self.packing["log_sigma"].slice] = g_sig
        return lp, grad, nclamp

    def constrained(self, theta):
        parts = self.packing.split(np.asarray(theta, dtype=float))
        omega, _, _ = stick_breaking(parts["omega_z"])
        alpha, _ = clamp_concentration(self.X @ parts["beta"].T)
        return {
            "omega": omega,
            "alpha": alpha,
            "beta": parts["beta"].copy(),
            "sigma": math.exp(float(parts["log_sigma"])),
        }

    def scalar_names(self):
        cols = (["1"] if self.intercept else []) + [
            f"x{j}" for j in range(self.q - int(self.intercept))
        ]
        return ["sigma"] + [f"beta[{m},{c}]" for m in self.model_names for c in cols]

    def scalar_values(self, theta):
        c = self.constrained(theta)
        return np.concatenate([[c["sigma"]], c["beta"].ravel()])

    def metadata(self):
        md = super().metadata()
        md.update(
            intercept=self.intercept,
            feature_mean=self.feature_mean.tolist(),
            feature_sd=self.feature_sd.tolist(),
        )
        return md


class LocalGPDirichlet(_LocalDirichlet):
    """Per-location Dirichlet weights with ``log alpha_k`` ~ GP(gamma_inf_k, eta_k * C_rho).

    The squared-exponential correlation ``C_rho`` is shared by all models;
    the latents are whitened: ``gamma_k = gamma_inf_k + sqrt(eta_k) * L u_k``
    with ``L L^T = C_rho + jitter * I``.
    """

    variant = "lbmm-gpd"

    def __init__(self, data, priors, use_corrections, kernel_init=None):
        self.X = data.coords
        if len(set(data.locations)) < 2:
            raise DataError("the GP variant needs at least two distinct locations")
        self.q = self.X.shape[1]
        # squared coordinate differences, one (n, n) matrix per input dimension
        self.sqdiff = np.stack([(self.X[:, j, None] - self.X[None, :, j]) ** 2 for j in range(self.q)])
        self.kernel_init = kernel_init
        super().__init__(data, priors, use_corrections)
        self.notes.append(
            "GP Cholesky jitter starts at 1e-8 x mean(diag) and escalates x10 up to 1e-2"
        )

    def _layout(self):
        return [
            ("omega_z", "weights-z", "stick-breaking", (self.n, self.p - 1)),
            ("u", "gamma-latents", "identity", (self.p, self.n)),
            ("gamma_inf", "gp-mean", "identity", (self.p,)),
            ("log_eta", "kernel", "log", (self.p,)),
            ("log_rho", "kernel", "log", (self.q,)),
            ("log_sigma", "sigma", "log", ()),
        ]

    def init_theta(self):
        theta = super().init_theta()
        if self.kernel_init is not None:
            theta[self.packing["log_eta"].slice] = np.log(self.kernel_init.eta)
            theta[self.packing["log_rho"].slice] = np.log(self.kernel_init.rho)
        return theta

    def correlation(self, rho):
        d2 = np.tensordot(1.0 / np.asarray(rho) ** 2, self.sqdiff, axes=1)
        return np.exp(-0.5 * d2)

    def factor(self, rho, C=None):
        try:
            return cholesky_jitter(self.correlation(rho) if C is None else C, who="GP")
        except NumericalError as e:
            raise NumericalError(
                f"{e} (length scales shared by models 0..{self.p - 1}, rho={np.round(rho, 6).tolist()})"
            ) from None

    def _evaluate(self, theta):
        parts = self.packing.split(theta)
        u = parts["u"]
        g_inf = parts["gamma_inf"]
        t_eta = parts["log_eta"]
        t_rho = parts["log_rho"]
        eta = np.exp(t_eta)
        rho = np.exp(t_rho)
        C = self.correlation(rho)
        chol = self.factor(rho, C)
        L = chol.L
        sq_eta = np.sqrt(eta)
        Lu = (L @ u.T)  # (n, p)
        gamma = g_inf[None, :] + sq_eta[None, :] * Lu

        lp, g_z, g_gam, g_sig, nclamp = self._local_terms(parts, gamma)
        lp += -0.5 * float(np.sum(u * u)) - 0.5 * u.size * LOG_2PI
        lp += float(np.sum(self.priors.gamma_inf.logpdf(g_inf)))
        lp_eta, g_eta_prior, _ = _positive_terms(t_eta, self.priors.eta)
        lp_rho, g_rho_prior, _ = _positive_terms(t_rho, self.priors.rho)
        lp += lp_eta + lp_rho

        grad = np.empty(self.d)
        grad[self.packing["omega_z"].slice] = g_z.ravel()
        g_u = sq_eta[:, None] * (L.T @ g_gam).T - u
        grad[self.packing["u"].slice] = g_u.ravel()
        grad[self.packing["gamma_inf"].slice] = g_gam.sum(axis=0) + self.priors.gamma_inf.grad_logpdf(g_inf)
        grad[self.packing["log_eta"].slice] = 0.5 * np.sum(g_gam * sq_eta * Lu, axis=0) + g_eta_prior
        # Backward pass through the Cholesky factor:
        #   Lbar = dlp/dL, P = Phi(L^T Lbar), Cbar = L^{-T} P L^{-1}
        # where Phi keeps the lower triangle and halves the diagonal.
        Lbar = np.tril((g_gam * sq_eta) @ u)
        P = np.tril(L.T @ Lbar)
        P[np.diag_indices_from(P)] *= 0.5
        A = solve_triangular(L, P, lower=True, trans="T", check_finite=False)
        Cbar = solve_triangular(L, A.T, lower=True, trans="T", check_finite=False).T
        Cbar = 0.5 * (Cbar + Cbar.T)
        g_rho = np.tensordot(self.sqdiff, Cbar * C, axes=([1, 2], [0, 1])) / rho**2
        grad[self.packing["log_rho"].slice] = g_rho + g_rho_prior
        grad[self.packing["log_sigma"].slice] = g_sig
        return lp, grad, nclamp

    def latent_gamma(self, theta, chol=None):
        parts = self.packing.split(np.asarray(theta, dtype=float))
        rho = np.exp(parts["log_rho"])
        if chol is None:
            chol = self.factor(rho)
        eta = np.exp(parts["log_eta"])
        return parts["gamma_inf"][None, :] + np.sqrt(eta)[None, :] * (chol.L @ parts["u"].T)

    def constrained(self, theta):
        theta = np.asarray(theta, dtype=float)
        parts = self.packing.split(theta)
        omega, _, _ = stick_breaking(parts["omega_z"])
        gamma = self.latent_gamma(theta)
        alpha, _ = clamp_concentration(gamma)
        return {
            "omega": omega,
            "gamma": gamma,
            "alpha": alpha,
            "u": parts["u"].copy(),
            "gamma_inf": parts["gamma_inf"].copy(),
            "eta": np.exp(parts["log_eta"]),
            "rho": np.exp(parts["log_rho"]),
            "sigma": math.exp(float(parts["log_sigma"])),
        }

    def scalar_names(self):
        return (
            ["sigma"]
            + [f"gamma_inf[{m}]" for m in self.model_names]
            + [f"eta[{m}]" for m in self.model_names]
            + [f"rho[{j}]" for j in range(self.q)]
        )

    def scalar_values(self, theta):
        parts = self.packing.split(np.asarray(theta, dtype=float))
        return np.concatenate(
            [
                [math.exp(float(parts["log_sigma"]))],
                parts["gamma_inf"],
                np.exp(parts["log_eta"]),
                np.exp(parts["log_rho"]),
            ]
        )


def build_gbmm_l(data, priors=None, use_corrections=False):
    if priors is None:
        priors = PriorConfig()
    if not isinstance(priors.omega, Uniform):
        raise ValueError("gbmm-l requires a Uniform weight prior")
    return GlobalLinear(data, priors, use_corrections)


def build_gbmm_d(data, priors=None, use_corrections=False):
    return GlobalDirichlet(data, priors or PriorConfig(), use_corrections)


def build_lbmm_gld(data, priors=None, use_corrections=False, covariate_map=None, intercept=True):
    return LocalLinearDirichlet(data, priors or PriorConfig(), use_corrections, covariate_map, intercept)


def build_lbmm_gpd(data, priors=None, use_corrections=False, kernel_init=None):
    return LocalGPDirichlet(data, priors or PriorConfig(), use_corrections, kernel_init)


VARIANTS = {
    "gbmm-l": build_gbmm_l,
    "gbmm-d": build_gbmm_d,
    "lbmm-gld": build_lbmm_gld,
    "lbmm-gpd": build_lbmm_gpd,
}


def build(variant, data, priors=None, use_corrections=False, **options):
    try:
        builder = VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown mixing variant {variant!r}; choose from {sorted(VARIANTS)}") from None
    return builder(data, priors, use_corrections, **options)


def log_posterior(spec, theta):
    return spec.log_posterior(theta)


def grad_log_posterior(spec, theta):
    return spec.grad(theta)
