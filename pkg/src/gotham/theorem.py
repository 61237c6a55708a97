"""Monte-Carlo check that prototype distortion dominates its lower bound.

A prototype is modeled as a super-node whose neighborhood is its extended
support set. Its embedding is a width-N one-hidden-layer readout of the
neighborhood feature mean,

    f_t = sum_j a_j * act((1/d_t) * sum_{k in N_t} x_k . W_j + b_j),

with leaky-ReLU slope beta. Output weights a_j and rows W_j are drawn
uniformly within +-xi of a fixed optimum (variance xi^2/3 per coordinate);
biases stay at the optimum. Graph growth adds zero-mean-feature nodes that
attach to the support set with positive probability. The distortion
E[(f_{t+1} - f_t)^2] is estimated and compared against

    full-constant form:  (N beta^2 xi^4 / 9) * E[(1/d_{t+1} - 1/d_t)^2 * sum_{k in N_t} |x_k|^2]
    constant-free form:  E[(1/d_{t+1} - 1/d_t)^2 * sum_{k in N_t} |x_k|^2]

where the full-constant form is the pass/fail reference.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["WidthNNet", "GrowthTrace", "simulate_growth",
           "empirical_distortion", "bound_rhs", "verify_bound",
           "default_sweep"]

RANDOMIZE = ("params", "growth", "both")


@dataclass(frozen=True)
class WidthNNet:
    """Width-N readout with fixed optimum and uniform perturbation width xi."""
    n_units: int
    feature_dim: int
    xi: float
    beta: float
    seed: int = 0

    def __post_init__(self):
        if self.n_units < 1:
            raise ValueError("width must be >= 1")
        if self.xi < 0:
            raise ValueError("xi must be >= 0")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")

    def optimum(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        a_star = rng.standard_normal(self.n_units)
        w_star = rng.standard_normal((self.n_units, self.feature_dim))
        bias = rng.standard_normal(self.n_units)
        return a_star, w_star, bias

    def perturb(self, rng: np.random.Generator, trials: int,
                a_star: np.ndarray, w_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = a_star + rng.uniform(-self.xi, self.xi, size=(trials, self.n_units))
        w = w_star + rng.uniform(-self.xi, self.xi,
                                 size=(trials, self.n_units, self.feature_dim))
        return a, w


@dataclass(frozen=True)
class GrowthParams:
    n0: int
    steps: int
    attach_prob: float
    d: int
    arrivals_per_step: int = 3
    new_feature_sigma: float = 1.0


@dataclass
class GrowthTrace:
    """One realized growth path of a tracked support neighborhood."""
    params: GrowthParams
    features: np.ndarray                  # all node features, arrival order
    support_sets: list[np.ndarray]        # indices into features, per time step

    @property
    def degrees(self) -> list[int]:
        return [s.size for s in self.support_sets]

    def pair(self, t: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Support sets at the (t, t+1) step pair; defaults to the last pair."""
        if t is None:
            t = len(self.support_sets) - 2
        return self.support_sets[t], self.support_sets[t + 1]


def simulate_growth(seed: int, n0: int, steps: int, attach_prob: float,
                    d: int, *, arrivals_per_step: int = 3,
                    new_feature_sigma: float = 1.0) -> GrowthTrace:
    """Grow a tracked neighborhood for ``steps`` steps.

    Base features are standard normal (continuous); every step appends
    ``arrivals_per_step`` candidate nodes with zero-mean normal features,
    each joining the tracked support independently with ``attach_prob``.
    Existing membership is never removed.
    """
    if n0 < 2:
        raise ValueError("n0 must be >= 2")
    if not 0 < attach_prob <= 1:
        raise ValueError("attach_prob must lie in (0, 1]")
    params = GrowthParams(n0, steps, attach_prob, d, arrivals_per_step,
                          new_feature_sigma)
    rng = np.random.default_rng(seed)
    feats, supports = _grow_one(rng, params)
    return GrowthTrace(params=params, features=feats, support_sets=supports)


def _grow_one(rng: np.random.Generator, p: GrowthParams):
    features = [rng.standard_normal((p.n0, p.d))]
    support = np.arange(p.n0, dtype=np.int64)
    supports = [support]
    total = p.n0
    for _ in range(p.steps):
        new = p.new_feature_sigma * rng.standard_normal((p.arrivals_per_step, p.d))
        features.append(new)
        joined = np.nonzero(rng.random(p.arrivals_per_step) < p.attach_prob)[0]
        support = np.concatenate([support, total + joined])
        supports.append(support.astype(np.int64))
        total += p.arrivals_per_step
    return np.concatenate(features, axis=0), supports


def _batched_growth(rng: np.random.Generator, p: GrowthParams, trials: int):
    """Vectorized growth: per-trial support means and bound statistics.

    Returns (u_t, u_t1, rhs_core) where u is the support feature mean at the
    final step pair and rhs_core = (1/d_{t+1} - 1/d_t)^2 * sum |x_k|^2 over
    the time-t support.
    """
    base = rng.standard_normal((trials, p.n0, p.d))
    sum_t = base.sum(axis=1)
    normsq_t = (base ** 2).sum(axis=(1, 2))
    d_t = np.full(trials, float(p.n0))
    for step in range(p.steps):
        new = p.new_feature_sigma * rng.standard_normal(
            (trials, p.arrivals_per_step, p.d))
        joins = rng.random((trials, p.arrivals_per_step)) < p.attach_prob
        if step == p.steps - 1:
            sum_t1 = sum_t + (new * joins[:, :, None]).sum(axis=1)
            d_t1 = d_t + joins.sum(axis=1)
        else:
            sum_t = sum_t + (new * joins[:, :, None]).sum(axis=1)
            normsq_t = normsq_t + ((new ** 2).sum(axis=2) * joins).sum(axis=1)
            d_t = d_t + joins.sum(axis=1)
    u_t = sum_t / d_t[:, None]
    u_t1 = sum_t1 / d_t1[:, None]
    rhs_core = (1.0 / d_t1 - 1.0 / d_t) ** 2 * normsq_t
    return u_t, u_t1, rhs_core


def _leaky(z: np.ndarray, beta: float) -> np.ndarray:
    return np.where(z >= 0.0, z, beta * z)


def _trace_means(trace: GrowthTrace, trials: int) -> tuple[np.ndarray, np.ndarray]:
    s_t, s_t1 = trace.pair()
    u_t = trace.features[s_t].mean(axis=0)
    u_t1 = trace.features[s_t1].mean(axis=0)
    return (np.broadcast_to(u_t, (trials, u_t.size)),
            np.broadcast_to(u_t1, (trials, u_t1.size)))


def empirical_distortion(trace: GrowthTrace, net: WidthNNet, trials: int,
                         seed: int, randomize: str = "both") -> tuple[float, float]:
    """Mean and standard error of (f_{t+1} - f_t)^2 over fresh perturbations."""
    if trials < 2:
        raise ValueError("trials must be >= 2")
    if randomize not in RANDOMIZE:
        raise ValueError(f"randomize must be one of {RANDOMIZE}")
    if net.feature_dim != trace.params.d:
        raise ValueError("network feature dim does not match the trace")
    rng = np.random.default_rng(seed)
    if randomize == "params":
        u_t, u_t1 = _trace_means(trace, trials)
    else:
        u_t, u_t1, _ = _batched_growth(rng, trace.params, trials)
    a_star, w_star, bias = net.optimum()
    if randomize == "growth":
        # one fixed parameter draw; only the growth varies across trials
        a1, w1 = net.perturb(rng, 1, a_star, w_star)
        a = np.broadcast_to(a1, (trials, net.n_units))
        w = np.broadcast_to(w1, (trials, net.n_units, net.feature_dim))
    else:
        a, w = net.perturb(rng, trials, a_star, w_star)
    z_t = np.einsum("td,tnd->tn", u_t, w) + bias
    z_t1 = np.einsum("td,tnd->tn", u_t1, w) + bias
    f_t = (a * _leaky(z_t, net.beta)).sum(axis=1)
    f_t1 = (a * _leaky(z_t1, net.beta)).sum(axis=1)
    sq = (f_t1 - f_t) ** 2
    if not np.all(np.isfinite(sq)):
        bad = int(np.nonzero(~np.isfinite(sq))[0][0])
        raise FloatingPointError(f"non-finite distortion sample at trial {bad}")
    mean = float(sq.mean())
    se = float(sq.std(ddof=1) / np.sqrt(trials))
    return mean, se


def bound_rhs(trace: GrowthTrace, net: WidthNNet, *, trials: int = 1,
              seed: int = 0, randomize: str = "params") -> tuple[float, float]:
    """(full-constant form, constant-free form) of the lower bound.

    Under growth randomization the expectation is estimated over ``trials``
    fresh growth paths; otherwise it is the trace's own value.
    """
    if randomize == "params":
        s_t, s_t1 = trace.pair()
        core = (1.0 / s_t1.size - 1.0 / s_t.size) ** 2 * \
            float((trace.features[s_t] ** 2).sum())
    else:
        rng = np.random.default_rng(seed)
        _, _, rhs_core = _batched_growth(rng, trace.params, trials)
        core = float(rhs_core.mean())
    constant = net.n_units * net.beta ** 2 * net.xi ** 4 / 9.0
    return constant * core, core


@dataclass
class BoundReport:
    delta_hat: float
    se: float
    rhs_appendix: float
    rhs_eq7: float
    violations: int
    repetitions: int
    config: dict

    @property
    def passed(self) -> bool:
        return self.violations <= 0.05 * self.repetitions

    def to_dict(self) -> dict:
        return {"delta_hat": self.delta_hat, "se": self.se,
                "rhs_appendix": self.rhs_appendix, "rhs_eq7": self.rhs_eq7,
                "violations": self.violations, "repetitions": self.repetitions,
                "pass": self.passed, "config": self.config}


def verify_bound(*, n_units: int = 4, xi: float = 0.5, beta: float = 0.2,
                 d: int = 8, n0: int = 6, steps: int = 1,
                 attach_prob: float = 0.5, arrivals_per_step: int = 3,
                 trials: int = 1000, repetitions: int = 20, seed: int = 0,
                 randomize: str = "both") -> BoundReport:
    """Repeated one-sided check that distortion clears the lower bound.

    A repetition fails when delta_hat + 2 SE < RHS (full-constant form); the
    overall check passes when at most 5% of repetitions fail.
    """
    config = {"n_units": n_units, "xi": xi, "beta": beta, "d": d, "n0": n0,
              "steps": steps, "attach_prob": attach_prob,
              "arrivals_per_step": arrivals_per_step, "trials": trials,
              "repetitions": repetitions, "seed": seed, "randomize": randomize}
    net = WidthNNet(n_units=n_units, feature_dim=d, xi=xi, beta=beta, seed=seed)
    violations = 0
    deltas, ses, rhs_a, rhs_f = [], [], [], []
    for rep in range(repetitions):
        rep_seed = int(np.random.SeedSequence([seed, rep]).generate_state(1)[0])
        trace = simulate_growth(rep_seed, n0, steps, attach_prob, d,
                                arrivals_per_step=arrivals_per_step)
        delta, se = empirical_distortion(trace, net, trials, rep_seed + 1,
                                         randomize)
        appendix, free = bound_rhs(trace, net, trials=trials, seed=rep_seed + 2,
                                   randomize=randomize)
        deltas.append(delta)
        ses.append(se)
        rhs_a.append(appendix)
        rhs_f.append(free)
        if delta + 2.0 * se < appendix:
            violations += 1
    return BoundReport(delta_hat=float(np.mean(deltas)),
                       se=float(np.mean(ses)),
                       rhs_appendix=float(np.mean(rhs_a)),
                       rhs_eq7=float(np.mean(rhs_f)),
                       violations=violations, repetitions=repetitions,
                       config=config)


def default_sweep(trials: int = 1000, repetitions: int = 20, seed: int = 0,
                  widths=(1, 4, 16), xis=(0.1, 0.5), betas=(0.01, 0.2)) -> dict:
    """Grid of bound checks plus the width/distortion rank correlation."""
    from scipy.stats import spearmanr
    reports = []
    for xi in xis:
        for beta in betas:
            for n in widths:
                reports.append(verify_bound(n_units=n, xi=xi, beta=beta,
                                            trials=trials,
                                            repetitions=repetitions,
                                            seed=seed))
    group_corrs = []
    for xi in xis:
        for beta in betas:
            pts = [(r.config["n_units"], r.delta_hat) for r in reports
                   if r.config["xi"] == xi and r.config["beta"] == beta]
            if len(pts) >= 2:
                corr = spearmanr([p[0] for p in pts], [p[1] for p in pts]).statistic
                group_corrs.append(float(corr))
    rank_corr = float(np.mean(group_corrs)) if group_corrs else float("nan")
    return {"reports": [r.to_dict() for r in reports],
            "rank_correlation_width_vs_distortion": rank_corr,
            "all_pass": all(r.passed for r in reports)}
