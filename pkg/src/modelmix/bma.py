"""Bayesian model averaging over individual models with a constant discrepancy.

Each model is ``y_i = f_k(x_i) + delta_k + sigma * eps_i``.  Working with
residuals ``d_i = y_i - f_k(x_i)``, the evidence of model k is

    Z_k = integral N(d | delta, sigma^2) pi(delta, sigma) d(delta) d(sigma)

and is computed three ways:

* ``exact``: the normal-gamma conjugate prior (precision lambda = 1/sigma^2
  ~ Gamma(a, rate b), delta | lambda ~ N(mu, 1/lambda)) gives a closed form;
* ``mc``: the prior-sampling Monte Carlo average, in log space;
* ``laplace``: Gaussian approximation around the posterior mode in
  ``(delta, sigma)`` using analytic second derivatives.

Without a discrepancy term (``discrepancy=False``, delta fixed to 0) the
integral is one-dimensional and ``exact`` falls back to quadrature when no
closed form applies.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize
from scipy.special import gammaln, logsumexp

from .prob import LOG_2PI, Gamma

# Precision prior used for the closed-form route on the nuclear data.
PAPER_PRECISION_SHAPE = 0.252
PAPER_PRECISION_RATE = 0.030
DEFAULT_SIGMA_PRIOR = Gamma(5.0, 10.0)
DEFAULT_DELTA_SCALE = 0.5


class EvidenceError(ArithmeticError):
    """Evidence computation failed (underflow, no interior mode, ...)."""


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConjugatePrior:
    """Normal-gamma prior: ``lambda ~ Gamma(a, rate b)``, ``delta | lambda ~ N(mu, 1/lambda)``.

    The prior precision ratio is fixed to 1, i.e. ``delta`` has the same
    scale as the noise a priori.
    """

    mu: float = 0.0
    a: float = PAPER_PRECISION_SHAPE
    b: float = PAPER_PRECISION_RATE

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("precision prior needs a > 0 and b > 0")

    def sample(self, rng, size):
        lam = rng.gamma(self.a, 1.0 / self.b, size)
        sigma = 1.0 / np.sqrt(lam)
        delta = self.mu + sigma * rng.standard_normal(size)
        return delta, sigma

    def sample_sigma(self, rng, size):
        return 1.0 / np.sqrt(rng.gamma(self.a, 1.0 / self.b, size))

    # log pi(delta, sigma) including the Jacobian |d lambda / d sigma| = 2 / sigma^3
    def _const(self):
        return self.a * math.log(self.b) - math.lgamma(self.a) + math.log(2.0)

    def logpdf(self, delta, sigma):
        q = 2.0 * self.b + (delta - self.mu) ** 2
        return self._const() - 0.5 * LOG_2PI - (2 * self.a + 2) * math.log(sigma) - 0.5 * q / sigma**2

    def grad(self, delta, sigma):
        q = 2.0 * self.b + (delta - self.mu) ** 2
        return -(delta - self.mu) / sigma**2, -(2 * self.a + 2) / sigma + q / sigma**3

    def hessian(self, delta, sigma):
        """``(d2/dsigma2, d2/dsigma ddelta, d2/ddelta2)`` of the log prior."""
        q = 2.0 * self.b + (delta - self.mu) ** 2
        return (
            (2 * self.a + 2) / sigma**2 - 3.0 * q / sigma**4,
            2.0 * (delta - self.mu) / sigma**3,
            -1.0 / sigma**2,
        )

    def logpdf_sigma(self, sigma):
        return self._const() - (2 * self.a + 1) * math.log(sigma) - self.b / sigma**2

    def grad_sigma(self, sigma):
        return -(2 * self.a + 1) / sigma + 2.0 * self.b / sigma**3

    def hess_sigma(self, sigma):
        return (2 * self.a + 1) / sigma**2 - 6.0 * self.b / sigma**4

    def describe(self):
        return {"kind": "conjugate", "mu": self.mu, "a": self.a, "b": self.b, "kappa0": 1.0}


@dataclass(frozen=True)
class IndependentPrior:
    """``sigma ~ Gamma(shape, rate)`` and ``delta ~ N(mu, s^2)`` independently."""

    sigma: Gamma = DEFAULT_SIGMA_PRIOR
    mu: float = 0.0
    s: float = DEFAULT_DELTA_SCALE

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("delta prior scale must be positive")

    def sample(self, rng, size):
        sigma = self.sigma.sample(rng, size)
        delta = rng.normal(self.mu, self.s, size)
        return delta, sigma

    def sample_sigma(self, rng, size):
        return self.sigma.sample(rng, size)

    def logpdf(self, delta, sigma):
        z = (delta - self.mu) / self.s
        return self.logpdf_sigma(sigma) - 0.5 * z * z - math.log(self.s) - 0.5 * LOG_2PI

    def grad(self, delta, sigma):
        return -(delta - self.mu) / self.s**2, self.grad_sigma(sigma)

    def hessian(self, delta, sigma):
        return self.hess_sigma(sigma), 0.0, -1.0 / self.s**2

    def logpdf_sigma(self, sigma):
        a, b = self.sigma.a, self.sigma.b
        return a * math.log(b) - math.lgamma(a) + (a - 1) * math.log(sigma) - b * sigma

    def grad_sigma(self, sigma):
        return (self.sigma.a - 1) / sigma - self.sigma.b

    def hess_sigma(self, sigma):
        return -(self.sigma.a - 1) / sigma**2

    def describe(self):
        return {"kind": "independent", "sigma": f"Gamma({self.sigma.a:g}, {self.sigma.b:g})",
                "mu": self.mu, "s": self.s}


def precision_moments_from_sigma(sigma_prior=DEFAULT_SIGMA_PRIOR):
    """Mean and sd of ``1/sigma^2`` for ``sigma ~ Gamma(a, rate b)`` (needs a > 4)."""
    a, b = sigma_prior.a, sigma_prior.b
    if a <= 4:
        raise ValueError("1/sigma^2 has infinite variance unless the shape exceeds 4")
    m1 = math.exp(2 * math.log(b) + math.lgamma(a - 2) - math.lgamma(a))
    m2 = math.exp(4 * math.log(b) + math.lgamma(a - 4) - math.lgamma(a))
    return m1, math.sqrt(m2 - m1 * m1)


def moment_matched_precision_prior(sigma_prior=DEFAULT_SIGMA_PRIOR, mu=0.0):
    """Gamma precision prior with the same mean and sd of ``1/sigma^2``."""
    m, sd = precision_moments_from_sigma(sigma_prior)
    return ConjugatePrior(mu, (m / sd) ** 2, m / sd**2)


def check_precision_prior(prior, sigma_prior=DEFAULT_SIGMA_PRIOR):
    """Relative differences between the prior's precision moments and the target's.

    Returns ``{"mean": ..., "sd": ...}`` (signed, relative to the target).
    """
    m, sd = precision_moments_from_sigma(sigma_prior)
    pm = prior.a / prior.b
    psd = math.sqrt(prior.a) / prior.b
    return {"mean": pm / m - 1.0, "sd": psd / sd - 1.0}


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass
class EvidenceResult:
    model_name: str
    method: str
    log_evidence: float
    mc_se: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in ("exact", "mc", "laplace"):
            raise ValueError(f"unknown evidence method {self.method!r}")
        if not math.isfinite(self.log_evidence):
            raise EvidenceError(f"{self.model_name}: non-finite log evidence")
        if self.mc_se is not None and not self.mc_se >= 0:
            raise ValueError("mc_se must be non-negative")


@dataclass
class BmaWeights:
    model_names: list
    weights: np.ndarray
    prior: np.ndarray
    method: str = ""

    def as_dict(self):
        return dict(zip(self.model_names, map(float, self.weights)))


def _residuals(d):
    d = np.asarray(d, dtype=float).ravel()
    if d.size < 1:
        raise ValueError("need at least one residual")
    if not np.all(np.isfinite(d)):
        raise ValueError("residuals must be finite")
    return d


# ---------------------------------------------------------------------------
# closed form
# ---------------------------------------------------------------------------


def evidence_closed_form(residuals, prior=None, name="model", discrepancy=True):
    """Exact log evidence under a :class:`ConjugatePrior`.

    Without a discrepancy the marginal of ``lambda`` is still conjugate;
    with an :class:`IndependentPrior` and no discrepancy the 1-D integral
    over ``sigma`` is done by adaptive quadrature.
    """
    d = _residuals(residuals)
    prior = ConjugatePrior() if prior is None else prior
    n = d.size
    if isinstance(prior, IndependentPrior):
        if discrepancy:
            raise ValueError("no closed form for the independent prior with a discrepancy term")
        return _evidence_sigma_quad(d, prior, name)
    a, b, mu = prior.a, prior.b, prior.mu
    a_n = a + 0.5 * n
    if discrepancy:
        dbar = d.mean()
        b_n = b + 0.5 * np.sum((d - dbar) ** 2) + n * (dbar - mu) ** 2 / (2.0 * (1.0 + n))
        kappa_n = 1.0 + n
    else:
        b_n = b + 0.5 * np.sum(d * d)
        kappa_n = 1.0
    logz = (
        gammaln(a_n) + a * math.log(b) - gammaln(a) - a_n * math.log(b_n)
        - 0.5 * math.log(kappa_n) - 0.5 * n * LOG_2PI
    )
    return EvidenceResult(name, "exact", float(logz), None,
                          {"a_n": a_n, "b_n": float(b_n), "kappa_n": kappa_n,
                           "discrepancy": discrepancy, "prior": prior.describe()})


def _evidence_sigma_quad(d, prior, name):
    n = d.size
    ss = float(np.sum(d * d))

    def logf(t):
        s = math.exp(t)
        return -n * t - 0.5 * n * LOG_2PI - 0.5 * ss / s**2 + prior.logpdf_sigma(s) + t

    # integrate over log sigma, rescaled by the mode value; the integrand is
    # negligible well outside +-20 e-folds of the mode
    res = optimize.minimize_scalar(lambda t: -logf(t), bounds=(-30, 30), method="bounded")
    tm, peak = float(res.x), -float(res.fun)
    val, err = integrate.quad(lambda t: math.exp(logf(t) - peak), tm - 20, tm + 20,
                              points=[tm], epsabs=0, epsrel=1e-10, limit=200)
    return EvidenceResult(name, "exact", peak + math.log(val), None,
                          {"quadrature_error": err / val, "discrepancy": False,
                           "prior": prior.describe()})


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


def _loglik(d_stats, delta, sigma):
    n, dbar, ss = d_stats
    # sum_i (d_i - delta)^2 = SS + n (dbar - delta)^2
    sq = ss + n * (dbar - delta) ** 2
    return -n * np.log(sigma) - 0.5 * n * LOG_2PI - 0.5 * sq / sigma**2


def _stats(d):
    dbar = float(d.mean())
    with np.errstate(over="ignore"):
        # overflow surfaces later as an all-underflow EvidenceError
        return d.size, dbar, float(np.sum((d - dbar) ** 2))


def evidence_mc(residuals, prior=None, n_mc=100_000, rng=None, name="model",
                discrepancy=True, chunk=200_000):
    """Prior-sampling Monte Carlo evidence, accumulated in log space.

    ``mc_se`` is the delta-method standard error of ``log_evidence``; it is
    undefined (None, flagged in diagnostics) for a single draw.
    """
    d = _residuals(residuals)
    prior = IndependentPrior() if prior is None else prior
    rng = np.random.default_rng(rng)
    n_mc = int(n_mc)
    if n_mc < 1:
        raise ValueError("n_mc must be positive")
    if n_mc < 1000:
        warnings.warn(f"n_mc={n_mc} is below 1000; the estimate is unreliable", RuntimeWarning,
                      stacklevel=2)
    st = _stats(d)
    parts = []
    done = 0
    while done < n_mc:
        m = min(chunk, n_mc - done)
        if discrepancy:
            delta, sigma = prior.sample(rng, m)
        else:
            sigma = prior.sample_sigma(rng, m)
            delta = np.zeros(m)
        with np.errstate(divide="ignore", over="ignore"):
            parts.append(_loglik(st, delta, sigma))
        done += m
    ll = np.concatenate(parts)
    ll[~np.isfinite(ll)] = -np.inf
    top = ll.max()
    if not np.isfinite(top):
        raise EvidenceError(
            f"{name}: every likelihood underflowed; rescale the prior (e.g. in log space)"
        )
    w = np.exp(ll - top)
    mean_w = w.mean()
    logz = top + math.log(mean_w)
    diag = {"n_mc": n_mc, "discrepancy": discrepancy, "prior": prior.describe()}
    if n_mc > 1:
        se = float(w.std(ddof=1) / (math.sqrt(n_mc) * mean_w))
        diag["ess"] = float(w.sum() ** 2 / np.sum(w * w))
    else:
        se = None
        diag["mc_se_undefined"] = True
    return EvidenceResult(name, "mc", float(logz), se, diag)


# ---------------------------------------------------------------------------
# Laplace
# ---------------------------------------------------------------------------


def log_joint(residuals, delta, sigma, prior):
    """``l(delta, sigma) = log p(d | delta, sigma) + log pi(delta, sigma)``."""
    d = _residuals(residuals)
    return float(_loglik(_stats(d), delta, sigma)) + prior.logpdf(delta, sigma)


def log_joint_hessian(residuals, delta, sigma, prior):
    """Analytic 2x2 Hessian of :func:`log_joint`, ordered ``(sigma, delta)``.

    Likelihood part, with ``r_i = d_i - delta``::

        d2/dsigma2        = n/sigma^2 - 3 sum r_i^2 / sigma^4
        d2/dsigma ddelta  = -2 sum r_i / sigma^3
        d2/ddelta2        = -n / sigma^2

    The prior contributes :meth:`hessian`; for ``sigma ~ Gamma(a, b)`` that
    adds ``-(a-1)/sigma^2`` and for ``delta ~ N(mu, s^2)`` ``-1/s^2``, with no
    cross term because the two are independent.
    """
    d = _residuals(residuals)
    n = d.size
    r = d - delta
    s2 = sigma * sigma
    pss, psd, pdd = prior.hessian(delta, sigma)
    h_ss = n / s2 - 3.0 * np.sum(r * r) / s2**2 + pss
    h_sd = -2.0 * np.sum(r) / (s2 * sigma) + psd
    h_dd = -n / s2 + pdd
    return np.array([[h_ss, h_sd], [h_sd, h_dd]])


def _laplace_2d(d, prior, starts):
    n, dbar, ss = _stats(d)
    rms = math.sqrt(ss / n + 1e-300) if n > 1 else abs(dbar) + 1e-3

    def negl(x):
        t, delta = x
        sigma = math.exp(t)
        sq = ss + n * (dbar - delta) ** 2
        ll = -n * t - 0.5 * n * LOG_2PI - 0.5 * sq / sigma**2
        return -(ll + prior.logpdf(delta, sigma))

    def neg_grad(x):
        t, delta = x
        sigma = math.exp(t)
        sq = ss + n * (dbar - delta) ** 2
        g_sigma = -n / sigma + sq / sigma**3
        g_delta = n * (dbar - delta) / sigma**2
        pd, ps = prior.grad(delta, sigma)
        return -np.array([(g_sigma + ps) * sigma, g_delta + pd])

    mu = getattr(prior, "mu", 0.0)
    x0s = [
        (math.log(max(rms, 1e-6)), dbar),
        (math.log(max(math.sqrt(ss / n + dbar**2), 1e-6)), mu),
        (math.log(max(np.median(np.abs(d - np.median(d))) * 1.4826, 1e-3)), float(np.median(d))),
    ][:starts]
    best = None
    for x0 in x0s:
        with np.errstate(over="ignore", invalid="ignore"):
            res = optimize.minimize(negl, np.array(x0), jac=neg_grad, method="BFGS",
                                    options={"gtol": 1e-10, "maxiter": 1000})
        if np.all(np.isfinite(res.x)) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise EvidenceError("mode search failed from every start")
    return best


def evidence_laplace(residuals, prior=None, name="model", discrepancy=True, starts=3):
    """Laplace approximation ``l(mode) + (k/2) log 2pi - 1/2 log det(-H)``.

    The mode is located by BFGS on ``(log sigma, delta)`` from ``starts``
    initial points; the Hessian is the analytic one in ``(sigma, delta)``.
    """
    d = _residuals(residuals)
    prior = IndependentPrior() if prior is None else prior
    if discrepancy:
        res = _laplace_2d(d, prior, starts)
        sigma, delta = math.exp(res.x[0]), float(res.x[1])
        H = log_joint_hessian(d, delta, sigma, prior)
        lmode = -float(res.fun)
        k = 2
    else:
        n = d.size
        ss0 = float(np.sum(d * d))

        def negl(t):
            s = math.exp(t[0])
            return -(-n * t[0] - 0.5 * n * LOG_2PI - 0.5 * ss0 / s**2 + prior.logpdf_sigma(s))

        x0 = math.log(max(math.sqrt(ss0 / n), 1e-6))
        res = optimize.minimize(negl, np.array([x0]), method="BFGS", options={"gtol": 1e-10})
        sigma, delta = math.exp(res.x[0]), 0.0
        H = np.array([[n / sigma**2 - 3.0 * ss0 / sigma**4 + prior.hess_sigma(sigma)]])
        lmode = -float(res.fun)
        k = 1
    eig = np.linalg.eigvalsh(H)
    cond = float(abs(eig).max() / abs(eig).min()) if np.all(eig != 0) else math.inf
    if not np.all(eig < 0):
        raise EvidenceError(
            f"{name}: Hessian at the mode is not negative definite "
            f"(eigenvalues {eig.tolist()}, condition {cond:.3g})"
        )
    logdet = float(np.sum(np.log(-eig)))
    logz = lmode + 0.5 * k * LOG_2PI - 0.5 * logdet
    return EvidenceResult(name, "laplace", logz, None,
                          {"mode_sigma": sigma, "mode_delta": delta, "hessian_condition": cond,
                           "optimizer_converged": bool(res.success), "discrepancy": discrepancy,
                           "prior": prior.describe()})


# ---------------------------------------------------------------------------
# many models
# ---------------------------------------------------------------------------


def compute_evidences(residuals_by_model, method="exact", prior=None, n_mc=100_000, seed=0,
                      discrepancy=True, n_jobs=1):
    """Evidence for every model; MC streams are spawned per model from ``seed``.

    Results do not depend on ``n_jobs`` or on completion order.
    """
    names = list(residuals_by_model)
    seeds = np.random.SeedSequence(seed).spawn(len(names))

    def one(i):
        name = names[i]
        d = residuals_by_model[name]
        if method == "exact":
            return evidence_closed_form(d, prior, name, discrepancy)
        if method == "mc":
            return evidence_mc(d, prior, n_mc, np.random.default_rng(seeds[i]), name, discrepancy)
        if method == "laplace":
            return evidence_laplace(d, prior, name, discrepancy)
        raise ValueError(f"unknown evidence method {method!r}")

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            return list(ex.map(one, range(len(names))))
    return [one(i) for i in range(len(names))]


def bma_weights(evidences, prior_probs=None):
    """Posterior model probabilities by Bayes' rule in log-sum-exp arithmetic."""
    if not evidences:
        raise ValueError("no evidences given")
    methods = {e.method for e in evidences}
    if len(methods) > 1:
        raise ValueError(f"evidences mix methods {sorted(methods)}")
    p = len(evidences)
    prior = np.full(p, 1.0 / p) if prior_probs is None else np.asarray(prior_probs, dtype=float)
    if prior.shape != (p,) or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
        raise ValueError("prior model probabilities must lie on the simplex")
    with np.errstate(divide="ignore"):
        logw = np.array([e.log_evidence for e in evidences]) + np.log(prior)
    w = np.exp(logw - logsumexp(logw))
    return BmaWeights([e.model_name for e in evidences], w, prior, methods.pop())


def bma_predict(weights, per_model_draws, rng=None, n_draws=None):
    """Sample the averaged predictive.

    ``per_model_draws`` has shape ``(p, draws, locations)``.  Every output
    draw picks model k with probability ``w_k`` and then one of that
    model's draws uniformly.
    """
    rng = np.random.default_rng(rng)
    draws = np.asarray(per_model_draws, dtype=float)
    w = weights.weights if isinstance(weights, BmaWeights) else np.asarray(weights, dtype=float)
    if draws.ndim != 3 or draws.shape[0] != len(w):
        raise ValueError(
            f"per-model draws must be (p={len(w)}, draws, locations); got {draws.shape}"
        )
    n_out = draws.shape[1] if n_draws is None else int(n_draws)
    k = rng.choice(len(w), size=n_out, p=w / w.sum())
    j = rng.integers(0, draws.shape[1], size=n_out)
    return draws[k, j]


def conjugate_predictive_draws(residuals, predictions, prior=None, n_draws=1000, rng=None,
                               discrepancy=True):
    """Draws from one model's conjugate posterior predictive at new locations.

    ``predictions`` are the model outputs ``f_k`` at the new locations; the
    constant discrepancy and the noise are drawn from the normal-gamma
    posterior given ``residuals``.
    """
    d = _residuals(residuals)
    prior = ConjugatePrior() if prior is None else prior
    f = np.asarray(predictions, dtype=float)
    rng = np.random.default_rng(rng)
    n = d.size
    a_n = prior.a + 0.5 * n
    if discrepancy:
        dbar = d.mean()
        kappa_n = 1.0 + n
        mu_n = (prior.mu + n * dbar) / kappa_n
        b_n = prior.b + 0.5 * np.sum((d - dbar) ** 2) + n * (dbar - prior.mu) ** 2 / (2 * kappa_n)
    else:
        b_n = prior.b + 0.5 * np.sum(d * d)
    lam = rng.gamma(a_n, 1.0 / b_n, n_draws)
    sd = 1.0 / np.sqrt(lam)
    delta = mu_n + sd / math.sqrt(kappa_n) * rng.standard_normal(n_draws) if discrepancy else 0.0
    noise = sd[:, None] * rng.standard_normal((n_draws, f.size))
    return f[None, :] + np.asarray(delta).reshape(-1, 1) + noise


def write_evidence_csv(results, weights, path):
    """Evidence table: ``model, method, log_evidence, weight, se``."""
    wmap = weights.as_dict()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "method", "log_evidence", "weight", "se"])
        for r in results:
            se = "" if r.mc_se is None else repr(r.mc_se)
            w.writerow([r.model_name, r.method, repr(r.log_evidence), repr(wmap[r.model_name]), se])
