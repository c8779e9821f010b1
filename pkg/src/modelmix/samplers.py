"""MCMC samplers: multinomial NUTS and blockwise random-walk Metropolis.

Both operate on any *target* exposing ``d``, ``init_theta()`` and
``evaluate(theta) -> (log_density, gradient, n_clamped)``; every
:class:`~modelmix.mixtures.ModelSpec` qualifies, and :class:`FunctionTarget`
wraps plain callables.

NUTS follows Hoffman & Gelman (2014) with multinomial trajectory sampling
and the generalized U-turn criterion (including the checks across merged
subtrees used by Stan).  Warmup is the burn-in half of every chain:

* dual averaging of the step size toward ``target_accept`` throughout;
* a diagonal inverse mass matrix re-estimated over doubling windows, the
  final one spanning the second half of warmup, each followed by a
  dual-averaging restart;
* adaptation is frozen once warmup ends.

Chains draw from independent streams spawned from one ``SeedSequence``, so
identical (target, config, seed) reproduce bit-identical draws.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .prob import NumericalError

DIVERGENCE_THRESHOLD = 1000.0
MAX_DIVERGENT_FRACTION = 0.25
MH_TARGET_ACCEPT = 0.234
MH_MAX_REJECT_RUN = 10_000


class SamplerError(RuntimeError):
    """Sampling aborted; ``theta`` holds the offending state when known."""

    def __init__(self, message, theta=None):
        super().__init__(message)
        self.theta = None if theta is None else np.array(theta, copy=True)


@dataclass
class SamplerConfig:
    algorithm: str = "nuts"
    total_draws: int = 50_000  # per chain, burn-in included
    burn_in: float = 0.5
    chains: int = 4
    target_accept: float = 0.8
    max_tree_depth: int = 10
    mh_scale: float = 0.1
    seed: int = 0
    init_jitter: float = 0.0
    n_jobs: int = 1

    def __post_init__(self):
        if self.algorithm not in ("nuts", "mh"):
            raise ValueError(f"unknown sampler {self.algorithm!r}")
        if self.total_draws < 2:
            raise ValueError("total_draws must be >= 2")
        if not 0.0 < self.burn_in < 1.0:
            raise ValueError("burn_in must lie strictly between 0 and 1")
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")

    @classmethod
    def desk(cls, **overrides):
        """4 chains x 2000 draws: minutes rather than hours."""
        return cls(**{"total_draws": 2000, "chains": 4, **overrides})

    @property
    def warmup(self):
        return int(round(self.total_draws * self.burn_in))

    @property
    def kept_per_chain(self):
        return self.total_draws - self.warmup

    def as_dict(self):
        return asdict(self)


@dataclass
class PosteriorSamples:
    """Post-warmup draws in unconstrained space, chains stacked row-wise."""

    draws: np.ndarray
    chain: np.ndarray
    config: SamplerConfig
    diagnostics: dict = field(default_factory=dict)
    packing: object = None

    @property
    def n_chains(self):
        return int(self.chain.max()) + 1 if len(self.chain) else 0

    def by_chain(self, values=None):
        """Reshape ``values`` (default: draws) to ``(chains, draws_per_chain, ...)``."""
        values = self.draws if values is None else np.asarray(values)
        return values.reshape((self.n_chains, -1) + values.shape[1:])

    def chain_boundaries(self):
        per = len(self.chain) // max(self.n_chains, 1)
        return [(c * per, (c + 1) * per) for c in range(self.n_chains)]


class FunctionTarget:
    """Adapt ``log_density`` / ``grad`` callables to the sampler interface."""

    def __init__(self, log_density, grad=None, d=None, init=None):
        self._logp = log_density
        self._grad = grad
        self._init = np.zeros(d) if init is None else np.asarray(init, dtype=float)
        self.d = len(self._init)

    def init_theta(self):
        return self._init.copy()

    def evaluate(self, theta):
        lp = float(self._logp(theta))
        g = np.zeros(self.d) if self._grad is None else np.asarray(self._grad(theta), dtype=float)
        return lp, g, 0


def _safe_eval(target, theta):
    try:
        lp, g, nclamp = target.evaluate(theta)
    except (NumericalError, FloatingPointError, OverflowError):
        return -math.inf, None, 0
    if not math.isfinite(lp):
        return -math.inf, None, nclamp
    if not np.all(np.isfinite(g)):
        raise SamplerError("non-finite gradient at a finite log density", theta)
    return lp, g, nclamp


# ---------------------------------------------------------------------------
# NUTS
# ---------------------------------------------------------------------------


class _Subtree:
    __slots__ = (
        "q_beg", "p_beg", "g_beg", "v_beg", "q_end", "p_end", "g_end", "v_end", "rho", "log_w",
        "q_prop", "lp_prop", "g_prop", "n", "acc", "stop", "diverging", "clamp",
    )


class _DualAveraging:
    def __init__(self, eps, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.restart(eps)

    def restart(self, eps):
        self.mu = math.log(10.0 * eps)
        self.hbar = 0.0
        self.log_eps = math.log(eps)
        self.log_eps_bar = 0.0
        self.t = 0

    def update(self, accept_stat):
        self.t += 1
        w = 1.0 / (self.t + self.t0)
        self.hbar = (1.0 - w) * self.hbar + w * (self.target - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.t) / self.gamma * self.hbar
        eta = self.t ** (-self.kappa)
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def final(self):
        return math.exp(self.log_eps_bar)


class _Welford:
    def __init__(self, d):
        self.n = 0
        self.mean = np.zeros(d)
        self.m2 = np.zeros(d)

    def add(self, x):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def variance(self):
        # regularized toward 1e-3 as in Stan
        n = self.n
        var = self.m2 / max(n - 1, 1)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def _warmup_windows(warmup):
    """Metric-estimation windows ``[(start, end), ...]`` within warmup.

    Short doubling windows in the first half give a rough metric early; the
    final window spans 50%-90% of warmup so the metric used for sampling is
    estimated from the second half only, leaving a terminal buffer in which
    the step size settles.
    """
    if warmup < 20:
        return []
    cuts = [0.05, 0.10, 0.20, 0.50, 0.90]
    idx = [int(c * warmup) for c in cuts]
    return [(s, e) for s, e in zip(idx[:-1], idx[1:]) if e - s >= 5]


class NutsKernel:
    """One NUTS chain; holds step size, metric and the RNG stream."""

    def __init__(self, target, rng, max_tree_depth=10):
        self.target = target
        self.rng = rng
        self.max_tree_depth = max_tree_depth
        self.inv_mass = np.ones(target.d)
        self.eps = 1.0
        self.n_clamped = 0

    def kinetic(self, p):
        return 0.5 * float(np.dot(p * self.inv_mass, p))

    @staticmethod
    def _uturn(rho, v_a, v_b):
        # v = M^{-1} p at the two ends of the trajectory
        return v_a.dot(rho) <= 0.0 or v_b.dot(rho) <= 0.0

    def leapfrog(self, q, p, g, eps):
        p_half = p + 0.5 * eps * g
        q_new = q + eps * self.inv_mass * p_half
        lp, g_new, nclamp = _safe_eval(self.target, q_new)
        if g_new is None:
            return q_new, p_half, lp, None, nclamp
        return q_new, p_half + 0.5 * eps * g_new, lp, g_new, nclamp

    def _leaf(self, q, p, g, eps, H0):
        t = _Subtree()
        q1, p1, lp1, g1, nclamp = self.leapfrog(q, p, g, eps)
        t.clamp = nclamp
        t.n = 1
        if g1 is None:
            t.diverging, t.stop, t.acc, t.log_w = True, True, 0.0, -math.inf
            return t
        v1 = self.inv_mass * p1
        H = -lp1 + 0.5 * v1.dot(p1)
        dH = H - H0
        if not math.isfinite(dH):
            dH = math.inf
        t.diverging = dH > DIVERGENCE_THRESHOLD
        t.stop = t.diverging
        t.acc = math.exp(-dH) if dH > 0 else 1.0
        t.log_w = -dH
        t.q_beg = t.q_end = t.q_prop = q1
        t.p_beg = t.p_end = p1
        t.v_beg = t.v_end = v1
        t.g_beg = t.g_end = t.g_prop = g1
        t.lp_prop = lp1
        t.rho = p1.copy()
        return t

    def _build(self, depth, q, p, g, eps, H0):
        if depth == 0:
            return self._leaf(q, p, g, eps, H0)
        t1 = self._build(depth - 1, q, p, g, eps, H0)
        if t1.stop:
            return t1
        t2 = self._build(depth - 1, t1.q_end, t1.p_end, t1.g_end, eps, H0)
        t1.n += t2.n
        t1.acc += t2.acc
        t1.clamp += t2.clamp
        if t2.stop:
            t1.stop = True
            t1.diverging = t2.diverging
            return t1
        log_w = np.logaddexp(t1.log_w, t2.log_w)
        if math.log(self.rng.random()) < t2.log_w - log_w:
            t1.q_prop, t1.lp_prop, t1.g_prop = t2.q_prop, t2.lp_prop, t2.g_prop
        t1.log_w = log_w
        rho = t1.rho + t2.rho
        t1.stop = (
            self._uturn(rho, t1.v_beg, t2.v_end)
            or self._uturn(t1.rho + t2.p_beg, t1.v_beg, t2.v_beg)
            or self._uturn(t2.rho + t1.p_end, t1.v_end, t2.v_end)
        )
        t1.rho = rho
        t1.q_end, t1.p_end, t1.g_end, t1.v_end = t2.q_end, t2.p_end, t2.g_end, t2.v_end
        return t1

    def transition(self, q, lp, g):
        """One NUTS transition from ``q``.

        Returns ``(q, lp, g, info)`` with info keys accept, depth, n_leapfrog,
        divergent, energy.
        """
        rng = self.rng
        eps = self.eps
        p0 = rng.standard_normal(q.shape) / np.sqrt(self.inv_mass)
        v0 = self.inv_mass * p0
        H0 = -lp + 0.5 * v0.dot(p0)
        # backward (time-earliest) and forward (time-latest) edges
        bq, bp, bg, bv = q, p0, g, v0
        fq, fp, fg, fv = q, p0, g, v0
        rho = p0.copy()
        log_w = 0.0
        q_prop, lp_prop, g_prop = q, lp, g
        n_leap, acc_sum, divergent, depth = 0, 0.0, False, 0
        clamp = 0
        for depth in range(self.max_tree_depth):
            if rng.random() < 0.5:
                sub = self._build(depth, fq, fp, fg, eps, H0)
                forward = True
            else:
                sub = self._build(depth, bq, bp, bg, -eps, H0)
                forward = False
            n_leap += sub.n
            acc_sum += sub.acc
            clamp += sub.clamp
            if sub.stop:
                divergent = sub.diverging
                depth += 1
                break
            if math.log(rng.random()) < sub.log_w - log_w:
                q_prop, lp_prop, g_prop = sub.q_prop, sub.lp_prop, sub.g_prop
            log_w = np.logaddexp(log_w, sub.log_w)
            # split the merged trajectory into its time-earlier half A and later half B
            if forward:
                a_vbeg, a_pend, a_vend, a_rho = bv, fp, fv, rho
                b_pbeg, b_vbeg, b_vend, b_rho = sub.p_beg, sub.v_beg, sub.v_end, sub.rho
                fq, fp, fg, fv = sub.q_end, sub.p_end, sub.g_end, sub.v_end
            else:
                a_vbeg, a_pend, a_vend, a_rho = sub.v_end, sub.p_beg, sub.v_beg, sub.rho
                b_pbeg, b_vbeg, b_vend, b_rho = bp, bv, fv, rho
                bq, bp, bg, bv = sub.q_end, sub.p_end, sub.g_end, sub.v_end
            rho = a_rho + b_rho
            depth += 1
            if (
                self._uturn(rho, a_vbeg, b_vend)
                or self._uturn(a_rho + b_pbeg, a_vbeg, b_vbeg)
                or self._uturn(b_rho + a_pend, a_vend, b_vend)
            ):
                break
        self.n_clamped += clamp
        info = {
            "accept": acc_sum / max(n_leap, 1),
            "depth": depth,
            "n_leapfrog": n_leap,
            "divergent": divergent,
        }
        return q_prop, lp_prop, g_prop, info

    def find_reasonable_eps(self, q, lp, g):
        eps = 1.0
        p = self.rng.standard_normal(q.shape) / np.sqrt(self.inv_mass)
        H0 = -lp + self.kinetic(p)

        def log_accept(e):
            _, p1, lp1, g1, _ = self.leapfrog(q, p, g, e)
            if g1 is None:
                return -math.inf
            dH = -lp1 + self.kinetic(p1) - H0
            return -dH if math.isfinite(dH) else -math.inf

        la = log_accept(eps)
        direction = 1.0 if la > math.log(0.5) else -1.0
        for _ in range(100):
            new = eps * (2.0**direction)
            la = log_accept(new)
            if direction > 0 and not la > math.log(0.5):
                break
            eps = new
            if direction < 0 and la > math.log(0.5):
                break
        return eps


def _initial_point(target, cfg, rng):
    theta = np.asarray(target.init_theta(), dtype=float)
    if cfg.init_jitter > 0:
        theta = theta + rng.uniform(-cfg.init_jitter, cfg.init_jitter, size=theta.shape)
    lp, g, _ = _safe_eval(target, theta)
    if g is None:
        raise SamplerError("log density is not finite at the initial point", theta)
    return theta, lp, g


def _nuts_chain(target, cfg, seed_seq, chain_id):
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    kernel = NutsKernel(target, rng, cfg.max_tree_depth)
    q, lp, g = _initial_point(target, cfg, rng)
    warmup = cfg.warmup
    kernel.eps = kernel.find_reasonable_eps(q, lp, g)
    da = _DualAveraging(kernel.eps, cfg.target_accept)
    windows = _warmup_windows(warmup)
    ends = {end: start for start, end in windows}
    starts = {start for start, _ in windows}
    welford = None

    kept = np.empty((cfg.kept_per_chain, target.d))
    depths = np.zeros(cfg.max_tree_depth + 1, dtype=int)
    divergences = []
    accept = []
    n_leapfrog = 0
    for it in range(cfg.total_draws):
        if it in starts:
            welford = _Welford(target.d)
        q, lp, g, info = kernel.transition(q, lp, g)
        n_leapfrog += info["n_leapfrog"]
        if it < warmup:
            kernel.eps = da.update(info["accept"])
            if welford is not None:
                welford.add(q)
            if it + 1 in ends:
                kernel.inv_mass = welford.variance()
                welford = None
                kernel.eps = kernel.find_reasonable_eps(q, lp, g)
                da.restart(kernel.eps)
            if it + 1 == warmup:
                kernel.eps = da.final
        else:
            k = it - warmup
            kept[k] = q
            depths[info["depth"]] += 1
            accept.append(info["accept"])
            if info["divergent"]:
                divergences.append(k)
    diag = {
        "chain": chain_id,
        "step_size": kernel.eps,
        "inv_mass_mean": float(np.mean(kernel.inv_mass)),
        "tree_depth_hist": depths.tolist(),
        "divergences": divergences,
        "n_divergent": len(divergences),
        "mean_accept": float(np.mean(accept)) if accept else float("nan"),
        "n_leapfrog": n_leapfrog,
        "n_clamped": kernel.n_clamped,
    }
    return kept, diag


# ---------------------------------------------------------------------------
# Random-walk Metropolis
# ---------------------------------------------------------------------------


def _mh_blocks(target):
    packing = getattr(target, "packing", None)
    if packing is None:
        return [slice(0, target.d)]
    return [b.slice for b in packing.blocks]


def _mh_chain(target, cfg, seed_seq, chain_id):
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    q, lp, _ = _initial_point(target, cfg, rng)
    blocks = _mh_blocks(target)
    log_scale = np.full(len(blocks), math.log(cfg.mh_scale))
    warmup = cfg.warmup
    kept = np.empty((cfg.kept_per_chain, target.d))
    n_acc = np.zeros(len(blocks))
    n_prop = np.zeros(len(blocks))
    reject_run = 0
    n_clamped = 0
    for it in range(cfg.total_draws):
        for b, sl in enumerate(blocks):
            prop = q.copy()
            width = sl.stop - sl.start
            prop[sl] += math.exp(log_scale[b]) * rng.standard_normal(width)
            try:
                lp_new, _, nclamp = target.evaluate(prop)
            except NumericalError:
                lp_new, nclamp = -math.inf, 0
            n_clamped += nclamp
            a = min(1.0, math.exp(lp_new - lp)) if math.isfinite(lp_new) else 0.0
            if rng.random() < a:
                q, lp = prop, lp_new
                reject_run = 0
                if it >= warmup:
                    n_acc[b] += 1
            else:
                reject_run += 1
                if reject_run >= MH_MAX_REJECT_RUN:
                    raise SamplerError(
                        f"Metropolis chain {chain_id}: no acceptance in {MH_MAX_REJECT_RUN} proposals", q
                    )
            if it < warmup:
                log_scale[b] += (a - MH_TARGET_ACCEPT) / (it + 1) ** 0.6
            else:
                n_prop[b] += 1
        if it >= warmup:
            kept[it - warmup] = q
    diag = {
        "chain": chain_id,
        "block_scales": np.exp(log_scale).tolist(),
        "block_accept": (n_acc / np.maximum(n_prop, 1)).tolist(),
        "divergences": [],
        "n_divergent": 0,
        "n_clamped": n_clamped,
    }
    return kept, diag


def _run(chain_fn, target, cfg):
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    args = [(target, cfg, seeds[c], c) for c in range(cfg.chains)]
    if cfg.n_jobs > 1 and cfg.chains > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as pool:
            results = list(pool.map(chain_fn, *zip(*args)))
    else:
        results = [chain_fn(*a) for a in args]
    draws = np.concatenate([r[0] for r in results])
    chain = np.repeat(np.arange(cfg.chains), cfg.kept_per_chain)
    per_chain = [r[1] for r in results]
    n_div = sum(d["n_divergent"] for d in per_chain)
    diag = {
        "algorithm": cfg.algorithm,
        "chains": per_chain,
        "n_divergent": n_div,
        "n_clamped": sum(d["n_clamped"] for d in per_chain),
        "warnings": [],
    }
    frac = n_div / max(len(draws), 1)
    if frac > MAX_DIVERGENT_FRACTION:
        msg = f"{100 * frac:.1f}% of post-warmup transitions diverged"
        diag["warnings"].append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
    if not np.all(np.isfinite(draws)):
        raise SamplerError("non-finite draws produced")
    return PosteriorSamples(draws, chain, cfg, diag, getattr(target, "packing", None))


def nuts_sample(spec, cfg):
    """Run ``cfg.chains`` NUTS chains on ``spec``."""
    if cfg.algorithm != "nuts":
        cfg = SamplerConfig(**{**cfg.as_dict(), "algorithm": "nuts"})
    return _run(_nuts_chain, spec, cfg)


def mh_sample(spec, cfg):
    """Blockwise Gaussian random-walk Metropolis, one sweep over blocks per draw."""
    if cfg.algorithm != "mh":
        cfg = SamplerConfig(**{**cfg.as_dict(), "algorithm": "mh"})
    return _run(_mh_chain, spec, cfg)


def sample(spec, cfg):
    return nuts_sample(spec, cfg) if cfg.algorithm == "nuts" else mh_sample(spec, cfg)
