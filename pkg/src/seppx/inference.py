"""Hybrid MCMC for the marked self-exciting model.

One sweep updates, in order:

1. the latent branching structure, event by event, from its categorical
   full conditional (background weight mu, parent weights phi);
2. the background coefficients, by random-walk Metropolis on the
   background density (or the conjugate gamma draw when the design is a
   bare intercept);
3. the triggering basis weights, by Hamiltonian Monte Carlo with the
   Monte Carlo normalizing integral pinned for the whole trajectory;
4. the triggering hyperparameters (log amplitude, log ridge, kernel
   scales), by adaptive Metropolis with the eigenbasis rebuilt for each
   proposal and a shared particle set on both sides of the ratio.

The normalizing integral of phi has no closed form, so steps 3 and 4
use unbiased importance-sampling estimates, refreshed per trajectory
and per proposal evaluation.  The likelihood can be switched off to
verify that the machinery reproduces its priors.
"""

from __future__ import annotations

import math
import pickle
import time
from dataclasses import dataclass, field

import numpy as np

from .baseline import BaselineDesign, BaselineParams, QuadratureScheme, mu_star
from .core import BACKGROUND, BranchingStructure, PointPattern
from .gp_trigger import (
    EigenBasis,
    InducingGrid,
    SeparableTimeSpaceMark,
    TriggerParams,
    decompose,
)

__all__ = [
    "McmcConfig",
    "PosteriorChain",
    "PosteriorSummary",
    "branching_probs",
    "sample_branching",
    "update_theta_mu",
    "update_theta_mu_conjugate",
    "triggering_loglik",
    "cluster_pairs",
    "penalty_matrix_total",
    "omega_potential",
    "hmc_update_omega",
    "AdaptiveProposal",
    "run_hybrid_mcmc",
    "summarize",
    "effective_sample_size",
    "save_checkpoint",
    "load_checkpoint",
]

_LOG_FLOOR = 1e-300


# ---------------------------------------------------------------------------
# feature evaluation helpers


def _features(kernel, basis: EigenBasis, X, chunk: int = 65536) -> np.ndarray:
    """Basis features at arbitrary inputs, chunked to bound memory.

    Uses the kernel's time/space-mark factorization when available;
    otherwise falls back to full Gram rows.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    P = basis.projector
    out = np.empty((n, basis.rank))
    axis = basis.grid.axis
    r = basis.grid.resolution
    factored = hasattr(kernel, "factor_time") and hasattr(kernel, "factor_space_mark")
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        if factored:
            Kt = kernel.factor_time(X[lo:hi, 0], axis)
            Ksm = kernel.factor_space_mark(X[lo:hi, 1], X[lo:hi, 2], axis, axis)
            Kxu = (Kt[:, :, None, None] * Ksm[:, None, :, :]).reshape(hi - lo, r**3)
        else:
            Kxu = kernel.pairwise(X[lo:hi], basis.grid.points)
        out[lo:hi] = Kxu @ P
    return out


class _PairData:
    """Flat candidate-parent pairs (j < i) with cached kernel factors.

    The mark slot of each pair follows the assignment rule in use:
    ``root`` (the model convention) pins it to the candidate parent's
    current cluster root, so the space-mark factor refreshes whenever
    root marks move; ``child`` pins it to the event being assigned,
    keeping the factors static per kernel.
    """

    def __init__(self, pattern: PointPattern, mark_mode: str = "root"):
        if mark_mode not in ("child", "root"):
            raise ValueError("mark_mode must be 'child' or 'root'")
        n = len(pattern)
        self.n = n
        self.mark_mode = mark_mode
        counts = np.arange(n)
        self.child = np.repeat(np.arange(n), counts)
        self.parent = (
            np.concatenate([np.arange(i) for i in range(n)]) if n > 1 else np.empty(0, int)
        )
        t, x, y = pattern.times, pattern.xs, pattern.ys
        self.dt = t[self.child] - t[self.parent]
        self.ds = np.hypot(x[self.child] - x[self.parent], y[self.child] - y[self.parent])
        self.marks = pattern.marks
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(int)
        self._theta_key = None
        self._mark_key = None
        self._Kt = None
        self._Ksm = None
        self._g3_shape = None

    def mark_column(self, branching: BranchingStructure | None) -> np.ndarray:
        if self.mark_mode == "child":
            return self.marks[self.child]
        if branching is None:
            # no structure yet: every candidate parent is its own root,
            # which is exact at the all-background initial state
            return self.marks[self.parent]
        roots = branching.roots()
        return self.marks[roots[self.parent]]

    def _ensure_factors(self, kernel, basis: EigenBasis, mark_col: np.ndarray):
        theta_key = (type(kernel).__name__,) + tuple(np.asarray(kernel.theta).tolist())
        mark_key = hash(mark_col.tobytes())
        axis = basis.grid.axis
        if theta_key != self._theta_key:
            self._Kt = kernel.factor_time(self.dt, axis)
            self._Ksm = None
            self._theta_key = theta_key
        if self._Ksm is None or mark_key != self._mark_key:
            r = basis.grid.resolution
            self._Ksm = kernel.factor_space_mark(self.ds, mark_col, axis, axis).reshape(
                len(self.dt), r * r
            )
            self._mark_key = mark_key

    def field_values(self, kernel, basis: EigenBasis, omega: np.ndarray,
                     branching: BranchingStructure | None = None) -> np.ndarray:
        """omega @ features at every candidate pair (flat, len n_pairs)."""
        if len(self.dt) == 0:
            return np.empty(0)
        g = basis.projector @ omega
        if hasattr(kernel, "factor_time") and hasattr(kernel, "factor_space_mark"):
            mark_col = self.mark_column(branching)
            self._ensure_factors(kernel, basis, mark_col)
            r = basis.grid.resolution
            g3 = g.reshape(r, r * r)
            H = self._Ksm @ g3.T  # (n_pairs, r_t)
            return np.einsum("pa,pa->p", self._Kt, H)
        X = np.column_stack([self.dt, self.ds, self.mark_column(branching)])
        F = _features(kernel, basis, X)
        return F @ omega

    def invalidate(self):
        self._theta_key = None
        self._Ksm = None


# ---------------------------------------------------------------------------
# branching structure updates


def _branching_weights(
    pattern: PointPattern,
    design: BaselineDesign,
    baseline_params: BaselineParams,
    trigger: TriggerParams,
    kernel,
    basis: EigenBasis,
    pair_data: _PairData,
    branching: BranchingStructure | None = None,
):
    mu_vals = mu_star(pattern.xs, pattern.ys, pattern.times, design, baseline_params)
    f = pair_data.field_values(kernel, basis, trigger.omega, branching)
    phi_vals = trigger.amplitude * f * f
    return mu_vals, phi_vals


def branching_probs(
    pattern: PointPattern,
    design: BaselineDesign,
    baseline_params: BaselineParams,
    trigger: TriggerParams,
    kernel,
    basis: EigenBasis,
    mark_mode: str = "root",
    branching: BranchingStructure | None = None,
) -> list[np.ndarray]:
    """Parent probabilities per event.

    Returns one array per event: first entry the background probability,
    then one entry per earlier event in time order.  Each array sums to
    one.  The pair weights evaluate phi at the elapsed time and distance
    to the candidate parent with the mark slot picked by ``mark_mode``
    (default: the candidate parent's cluster root under ``branching``,
    or the parent itself when none is given).
    """
    pair_data = _PairData(pattern, mark_mode)
    mu_vals, phi_vals = _branching_weights(
        pattern, design, baseline_params, trigger, kernel, basis, pair_data, branching
    )
    out = []
    for i in range(len(pattern)):
        seg = phi_vals[pair_data.offsets[i] : pair_data.offsets[i + 1]]
        w = np.concatenate([[mu_vals[i]], seg])
        total = w.sum()
        if total <= 0:
            raise ValueError(f"event {i} has zero total assignment weight")
        out.append(w / total)
    return out


def _sample_branching_flat(
    mu_vals: np.ndarray,
    phi_vals: np.ndarray,
    pair_data: _PairData,
    rng: np.random.Generator,
) -> BranchingStructure:
    n = pair_data.n
    offsets = pair_data.offsets
    if phi_vals.size:
        cum = np.cumsum(phi_vals)
        seg_tot = cum[offsets[1:] - 1] - np.where(offsets[:-1] > 0, cum[offsets[:-1] - 1], 0.0)
        seg_tot[0] = 0.0  # first event has no candidate parents
    else:
        cum = np.empty(0)
        seg_tot = np.zeros(n)
    totals = mu_vals + seg_tot
    u = rng.random(n) * totals
    parents = np.full(n, BACKGROUND, dtype=int)
    pick_trigger = u > mu_vals
    idx = np.nonzero(pick_trigger)[0]
    if idx.size:
        base = np.where(offsets[idx] > 0, cum[offsets[idx] - 1], 0.0)
        target = base + (u[idx] - mu_vals[idx])
        pos = np.searchsorted(cum, target, side="left")
        pos = np.clip(pos, offsets[idx], offsets[idx + 1] - 1)
        parents[idx] = pair_data.parent[pos]
    return BranchingStructure(parents)


def sample_branching(
    pattern: PointPattern,
    design: BaselineDesign,
    baseline_params: BaselineParams,
    trigger: TriggerParams,
    kernel,
    basis: EigenBasis,
    rng: np.random.Generator,
    mark_mode: str = "root",
    branching: BranchingStructure | None = None,
) -> BranchingStructure:
    """Draw a branching structure from its categorical full conditional."""
    pair_data = _PairData(pattern, mark_mode)
    mu_vals, phi_vals = _branching_weights(
        pattern, design, baseline_params, trigger, kernel, basis, pair_data, branching
    )
    return _sample_branching_flat(mu_vals, phi_vals, pair_data, rng)


# ---------------------------------------------------------------------------
# background updates


def _baseline_loglik(bg_design_sum, Zq, wq, theta):
    """Background log density given precomputed design aggregates."""
    eta = Zq @ theta
    integral = wq @ (np.exp(np.clip(eta, -700, 700)) - 1.0)
    return float(bg_design_sum @ theta - integral)


def update_theta_mu(
    theta: np.ndarray,
    bg_points_design: np.ndarray,
    Zq: np.ndarray,
    wq: np.ndarray,
    rng: np.random.Generator,
    step: float = 0.1,
    likelihood_off: bool = False,
) -> tuple[np.ndarray, bool]:
    """One random-walk Metropolis step on the background coefficients.

    ``bg_points_design`` is the design matrix of currently-background
    events; ``Zq``/``wq`` the quadrature design and weights.  The prior
    is standard normal on every coefficient.
    """
    theta = np.asarray(theta, dtype=float)
    zsum = bg_points_design.sum(axis=0) if bg_points_design.size else np.zeros_like(theta)

    def target(th):
        lp = -0.5 * float(th @ th)
        if likelihood_off:
            return lp
        return lp + _baseline_loglik(zsum, Zq, wq, th)

    prop = theta + step * rng.standard_normal(theta.size)
    if math.log(rng.random()) < target(prop) - target(theta):
        return prop, True
    return theta, False


def update_theta_mu_conjugate(
    n_background: int,
    volume: float,
    rng: np.random.Generator,
) -> float:
    """Conjugate gamma draw of a constant background rate.

    On the unit window the posterior is Gamma(n0 + 1, rate 2); on other
    windows the standard exposure form Gamma(n0 + 1, 1 + |W x T|) is
    used.  Returns the sampled rate (not its log).
    """
    if n_background < 0:
        raise ValueError("n_background must be >= 0")
    rate = 2.0 if abs(volume - 1.0) < 1e-12 else 1.0 + volume
    return float(rng.gamma(shape=n_background + 1.0, scale=1.0 / rate))


# ---------------------------------------------------------------------------
# triggering likelihood


def cluster_pairs(branching: BranchingStructure) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Subsequent-member pairs of every cluster.

    Returns (earlier index, later index, root index) arrays: each
    cluster's time-ordered members chained pairwise, the root opening
    the chain.
    """
    us, vs, rs = [], [], []
    for root, members in branching.clusters():
        for u, v in zip(members[:-1], members[1:]):
            us.append(u)
            vs.append(v)
            rs.append(root)
    return (
        np.asarray(us, dtype=int),
        np.asarray(vs, dtype=int),
        np.asarray(rs, dtype=int),
    )


def _pair_inputs(pattern: PointPattern, us, vs, rs) -> np.ndarray:
    """Trigger inputs (elapsed time, distance, root mark) for chain pairs."""
    t, x, y, m = pattern.times, pattern.xs, pattern.ys, pattern.marks
    if len(us) == 0:
        return np.empty((0, 3))
    return np.column_stack([
        t[vs] - t[us],
        np.hypot(x[vs] - x[us], y[vs] - y[us]),
        m[rs],
    ])


def _integral_uniforms(n_roots: int, n_particles: int, rng: np.random.Generator) -> np.ndarray:
    return rng.random((n_roots, n_particles, 3))


def penalty_matrix_total(
    pattern: PointPattern,
    root_indices: np.ndarray,
    kernel,
    basis: EigenBasis,
    uniforms: np.ndarray,
) -> np.ndarray:
    """Sum over cluster roots of the feature outer-product integrals.

    ``uniforms`` has shape (n_roots, n_particles, 3); each root's slice
    is transformed into particles on its own offspring window, keeping
    the estimator unbiased for the summed integral.  Contracting the
    result with the weights (times the amplitude) gives the total
    penalty term of the triggering log likelihood.
    """
    root_indices = np.asarray(root_indices, dtype=int)
    if root_indices.size == 0:
        return np.zeros((basis.rank, basis.rank))
    if uniforms.shape[0] != root_indices.size:
        raise ValueError("one uniform slice per root is required")
    M = uniforms.shape[1]
    t_roots = pattern.times[root_indices]
    x_roots = pattern.xs[root_indices]
    y_roots = pattern.ys[root_indices]
    m_roots = pattern.marks[root_indices]
    dt = uniforms[:, :, 0] * (1.0 - t_roots)[:, None]
    ds = np.hypot(
        uniforms[:, :, 1] - x_roots[:, None], uniforms[:, :, 2] - y_roots[:, None]
    )
    mk = np.broadcast_to(m_roots[:, None], dt.shape)
    X = np.column_stack([dt.ravel(), ds.ravel(), mk.ravel()])
    F = _features(kernel, basis, X)
    w = np.repeat((1.0 - t_roots) / M, M)
    return (F * w[:, None]).T @ F


def triggering_loglik(
    pattern: PointPattern,
    branching: BranchingStructure,
    trigger: TriggerParams,
    kernel,
    basis: EigenBasis,
    n_particles: int,
    rng: np.random.Generator | None = None,
    penalty: np.ndarray | None = None,
) -> float:
    """Reduced triggering log likelihood given a branching structure.

    Chains each cluster's time-ordered members, scoring every adjacent
    pair at the root's mark, and subtracts the amplitude-weighted
    normalizing integral once per cluster.  Pass ``penalty`` to pin the
    Monte Carlo integral (pseudo-marginal usage); otherwise it is drawn
    fresh from ``rng``.
    """
    us, vs, rs = cluster_pairs(branching)
    X = _pair_inputs(pattern, us, vs, rs)
    total = 0.0
    if X.shape[0]:
        f = _features(kernel, basis, X) @ trigger.omega
        vals = np.maximum(trigger.amplitude * f * f, _LOG_FLOOR)
        total += float(np.log(vals).sum())
    if penalty is None:
        if rng is None:
            raise ValueError("triggering_loglik needs rng when no penalty is pinned")
        roots = branching.background_indices
        uniforms = _integral_uniforms(roots.size, n_particles, rng)
        penalty = penalty_matrix_total(pattern, roots, kernel, basis, uniforms)
    total -= trigger.amplitude * float(trigger.omega @ penalty @ trigger.omega)
    return total


# ---------------------------------------------------------------------------
# Hamiltonian update of the basis weights


def omega_potential(
    omega: np.ndarray,
    pair_features: np.ndarray,
    penalty: np.ndarray,
    prior_var: np.ndarray,
    amplitude: float,
) -> tuple[float, np.ndarray]:
    """Negative log posterior of the weights and its gradient.

    Terms: the Gaussian prior quadratic (with its normalizing constant),
    minus the sum of log phi over chained pairs, plus the amplitude-
    weighted penalty quadratic.  The gradient is exact, which the HMC
    acceptance tests check against finite differences.
    """
    omega = np.asarray(omega, dtype=float)
    k = omega.size
    quad = 0.5 * float(np.sum(omega * omega / prior_var))
    norm = 0.5 * float(np.sum(np.log(prior_var))) + 0.5 * k * math.log(2.0 * math.pi)
    pen_vec = penalty @ omega
    U = quad + norm + amplitude * float(omega @ pen_vec)
    grad = omega / prior_var + 2.0 * amplitude * pen_vec
    if pair_features.shape[0]:
        f = pair_features @ omega
        if np.any(f == 0.0):
            return math.inf, grad
        U -= float(np.log(np.maximum(amplitude * f * f, _LOG_FLOOR)).sum())
        grad -= pair_features.T @ (2.0 / f)
    return U, grad


def hmc_update_omega(
    omega: np.ndarray,
    pair_features: np.ndarray,
    penalty: np.ndarray,
    prior_var: np.ndarray,
    amplitude: float,
    rng: np.random.Generator,
    step_size: float = 0.1,
    n_steps: int = 20,
) -> tuple[np.ndarray, bool]:
    """One HMC trajectory with identity mass matrix.

    The penalty matrix stays pinned across all leapfrog steps so the
    Hamiltonian is consistent within the trajectory.
    """
    omega = np.asarray(omega, dtype=float)
    rho = rng.standard_normal(omega.size)
    U0, grad = omega_potential(omega, pair_features, penalty, prior_var, amplitude)
    if not np.isfinite(U0):
        return omega, False
    H0 = U0 + 0.5 * float(rho @ rho)
    w = omega.copy()
    rho = rho - 0.5 * step_size * grad
    for step in range(n_steps):
        w = w + step_size * rho
        U1, grad = omega_potential(w, pair_features, penalty, prior_var, amplitude)
        if not np.isfinite(U1):
            return omega, False
        rho = rho - (0.5 if step == n_steps - 1 else 1.0) * step_size * grad
    H1 = U1 + 0.5 * float(rho @ rho)
    if math.log(rng.random()) < H0 - H1:
        return w, True
    return omega, False


# ---------------------------------------------------------------------------
# adaptive Metropolis on the triggering hyperparameters


class AdaptiveProposal:
    """Gaussian random-walk proposal with Haario covariance adaptation.

    Maintains the running mean and scatter of all observed states; after
    ``start`` observations the proposal covariance becomes
    (2.38^2 / d) * sample covariance + eps * I, matching a batch
    covariance with ddof=1 at every step.
    """

    def __init__(self, dim: int, init_scale: float = 0.1, eps: float = 1e-6,
                 start: int = 200):
        self.dim = dim
        self.init_scale = init_scale
        self.eps = eps
        self.start = start
        self.count = 0
        self.mean = np.zeros(dim)
        self.scatter = np.zeros((dim, dim))

    def observe(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float)
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.scatter += np.outer(delta, x - self.mean)

    def covariance(self) -> np.ndarray:
        if self.count < 2:
            return np.eye(self.dim)
        return self.scatter / (self.count - 1)

    def propose(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.count <= self.start:
            C = (self.init_scale**2 / self.dim) * np.eye(self.dim)
        else:
            C = (2.38**2 / self.dim) * self.covariance() + self.eps * np.eye(self.dim)
        L = np.linalg.cholesky(C + 1e-12 * np.eye(self.dim))
        return np.asarray(x, dtype=float) + L @ rng.standard_normal(self.dim)


def _omega_prior_logpdf(omega: np.ndarray, prior_var: np.ndarray) -> float:
    k = omega.size
    return float(
        -0.5 * np.sum(omega * omega / prior_var)
        - 0.5 * np.sum(np.log(prior_var))
        - 0.5 * k * math.log(2.0 * math.pi)
    )


def _resize_omega(omega: np.ndarray, rank: int) -> np.ndarray:
    """Truncate or zero-pad the weight vector onto a new basis rank."""
    if omega.size == rank:
        return omega
    if omega.size > rank:
        return omega[:rank].copy()
    return np.concatenate([omega, np.zeros(rank - omega.size)])


# ---------------------------------------------------------------------------
# configuration, chain containers


@dataclass
class McmcConfig:
    """Sampler settings; counts include burn-in (retained rows are
    (n_samples - burn_in) / thin)."""

    n_samples: int = 5000
    burn_in: int = 1000
    thin: int = 10
    seed: int = 0
    baseline_update: str = "mh"  # or "conjugate"
    baseline_step: float = 0.1
    hmc_step_size: float = 0.1
    hmc_n_steps: int = 20
    adapt_hmc: bool = True
    am_start: int = 200
    am_eps: float = 1e-6
    am_init_scale: float = 0.1
    n_particles: int = 1000
    grid_resolution: int = 8
    rank: int = 50
    mark_mode: str = "root"
    kernel_family: str = "rq"  # space-mark part of the separable kernel
    init_log_amplitude: float = 0.0
    init_log_gamma: float = -1.0
    init_kernel_theta: tuple = ()
    init_omega: str = "prior"  # or "zeros"
    likelihood_off: bool = False
    update_branching: bool = True
    update_baseline: bool = True
    update_omega: bool = True
    update_hypers: bool = True
    renew_particles: bool = True
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.n_samples <= self.burn_in:
            raise ValueError("n_samples must exceed burn_in")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.baseline_update not in ("mh", "conjugate"):
            raise ValueError("baseline_update must be 'mh' or 'conjugate'")
        if self.mark_mode not in ("child", "root"):
            raise ValueError("mark_mode must be 'child' or 'root'")


@dataclass
class PosteriorChain:
    """Retained posterior draws with bookkeeping.

    ``samples`` is (n_retained, n_cols) aligned with ``names``;
    ``log_post`` holds the (stochastic) unnormalized log posterior at
    record time, used by the mode-over-samples summaries.
    """

    names: tuple[str, ...]
    samples: np.ndarray
    log_post: np.ndarray
    accept_rates: dict
    meta: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return self.samples[:, self.names.index(name)]

    def map_index(self) -> int:
        return int(np.argmax(self.log_post))

    def to_csv(self, path) -> None:
        header = ",".join(list(self.names) + ["log_post"])
        with open(path, "w", newline="\n") as fh:
            fh.write(header + "\n")
            for row, lp in zip(self.samples, self.log_post):
                fh.write(",".join(repr(float(v)) for v in row) + f",{float(lp)!r}\n")

    @classmethod
    def from_csv(cls, path) -> "PosteriorChain":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            rows = [list(map(float, line.strip().split(","))) for line in fh if line.strip()]
        arr = np.asarray(rows, dtype=float)
        if arr.size == 0:
            arr = np.empty((0, len(header)))
        return cls(
            names=tuple(header[:-1]),
            samples=arr[:, :-1],
            log_post=arr[:, -1],
            accept_rates={},
        )


@dataclass(frozen=True)
class PosteriorSummary:
    """Marginal summary of one chain column."""

    name: str
    mean: float
    sd: float
    q025: float
    q975: float
    mode: float
    ess: float


def effective_sample_size(x: np.ndarray) -> float:
    """Initial-positive-sequence estimator of the effective sample size."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    x = x - x.mean()
    var = float(x @ x) / n
    if var == 0:
        return float(n)
    acf = np.correlate(x, x, mode="full")[n - 1 :] / (n * var)
    s = 1.0
    k = 1
    while k + 1 < n:
        pair = acf[k] + acf[k + 1]
        if pair <= 0:
            break
        s += 2.0 * pair
        k += 2
    return float(min(n, n / s))


def summarize(chain: PosteriorChain) -> dict[str, PosteriorSummary]:
    """Per-parameter posterior summaries (mode = highest-log-posterior draw)."""
    out = {}
    mode_row = chain.samples[chain.map_index()] if len(chain.samples) else None
    for j, name in enumerate(chain.names):
        col = chain.samples[:, j]
        out[name] = PosteriorSummary(
            name=name,
            mean=float(col.mean()),
            sd=float(col.std(ddof=1)) if col.size > 1 else 0.0,
            q025=float(np.quantile(col, 0.025)),
            q975=float(np.quantile(col, 0.975)),
            mode=float(mode_row[j]) if mode_row is not None else math.nan,
            ess=effective_sample_size(col),
        )
    return out


def save_checkpoint(path, state: dict) -> None:
    with open(path, "wb") as fh:
        pickle.dump(state, fh)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return pickle.load(fh)


# ---------------------------------------------------------------------------
# the hybrid sampler


def _make_kernel(family: str, theta: np.ndarray | None = None) -> SeparableTimeSpaceMark:
    kern = SeparableTimeSpaceMark(space_mark=family)
    if theta is not None and len(theta):
        kern = kern.with_theta(np.asarray(theta, dtype=float))
    return kern


def run_hybrid_mcmc(
    pattern: PointPattern,
    design: BaselineDesign,
    config: McmcConfig,
) -> PosteriorChain:
    """Run the full hybrid sampler on a unit-scale pattern.

    The pattern must already live on the unit window (see
    ``core.scale_to_unit``).  Returns the retained chain; see
    ``McmcConfig`` for the block switches and the likelihood-off prior
    checking mode.
    """
    rng = np.random.default_rng(config.seed)
    n = len(pattern)
    t0 = time.time()

    # static structures
    Z_events = design.matrix(pattern.xs, pattern.ys, pattern.times)
    scheme = QuadratureScheme()
    (qx, qy, qt), wq = scheme.nodes()
    Zq = design.matrix(qx, qy, qt)
    grid = InducingGrid(config.grid_resolution)
    kernel = _make_kernel(config.kernel_family, np.asarray(config.init_kernel_theta))
    basis = decompose(kernel, grid, config.rank)
    pair_data = _PairData(pattern, config.mark_mode)

    # state
    theta_mu = np.zeros(design.n_coef)
    if not config.likelihood_off and n > 0:
        # warm start: if every event were background, mu* would be ~n
        theta_mu[0] = math.log(n)
    log_a = config.init_log_amplitude
    log_g = config.init_log_gamma
    amplitude = math.exp(log_a)
    gamma = math.exp(log_g)
    prior_var = basis.eta / (amplitude * basis.eta + gamma)
    if config.init_omega == "prior":
        omega = rng.standard_normal(basis.rank) * np.sqrt(prior_var)
    else:
        omega = np.zeros(basis.rank)
    branching = BranchingStructure.all_background(n)
    hyper_vec = np.concatenate([[log_a, log_g], kernel.theta])
    hyper_names = ("log_amplitude", "log_gamma") + tuple(kernel.names)
    am = AdaptiveProposal(hyper_vec.size, config.am_init_scale, config.am_eps,
                          config.am_start)
    fixed_uniforms = None
    if not config.renew_particles:
        fixed_uniforms = rng.random((max(n, 1), config.n_particles, 3))

    hmc_eps = config.hmc_step_size
    baseline_step = config.baseline_step
    accept = {"baseline": 0, "omega": 0, "hypers": 0}
    tries = {"baseline": 0, "omega": 0, "hypers": 0}
    window = {"baseline": [0, 0], "omega": [0, 0]}

    def draw_uniforms(n_roots):
        if fixed_uniforms is not None:
            return fixed_uniforms[:n_roots]
        return _integral_uniforms(n_roots, config.n_particles, rng)

    def trigger_state():
        return TriggerParams(omega=omega, amplitude=amplitude, gamma=gamma)

    names = (
        tuple(f"theta_mu_{nm}" for nm in design.names)
        + tuple(f"omega_{i}" for i in range(config.rank))
        + hyper_names
    )
    kept_rows: list[np.ndarray] = []
    kept_lp: list[float] = []
    penalty = np.zeros((basis.rank, basis.rank))
    pair_feats = np.empty((0, basis.rank))

    for it in range(1, config.n_samples + 1):
        # --- branching ---------------------------------------------------
        if config.update_branching and not config.likelihood_off and n > 0:
            mu_vals, phi_vals = _branching_weights(
                pattern, design, BaselineParams(theta_mu), trigger_state(), kernel,
                basis, pair_data, branching,
            )
            branching = _sample_branching_flat(mu_vals, phi_vals, pair_data, rng)

        bg_idx = branching.background_indices

        # --- background --------------------------------------------------
        if config.update_baseline:
            tries["baseline"] += 1
            if config.baseline_update == "conjugate" and not config.likelihood_off:
                if design.n_coef != 1:
                    raise ValueError("conjugate update needs an intercept-only design")
                rate = update_theta_mu_conjugate(bg_idx.size, 1.0, rng)
                theta_mu = np.array([math.log(max(rate, 1e-300))])
                accept["baseline"] += 1
                window["baseline"][0] += 1
            else:
                theta_mu, ok = update_theta_mu(
                    theta_mu, Z_events[bg_idx], Zq, wq, rng,
                    step=baseline_step, likelihood_off=config.likelihood_off,
                )
                accept["baseline"] += ok
                window["baseline"][0] += ok
            window["baseline"][1] += 1

        # --- basis weights (HMC) -----------------------------------------
        if config.update_omega:
            tries["omega"] += 1
            if config.likelihood_off or n == 0:
                pair_feats = np.empty((0, basis.rank))
                penalty = np.zeros((basis.rank, basis.rank))
            else:
                us, vs, rs = cluster_pairs(branching)
                X_pairs = _pair_inputs(pattern, us, vs, rs)
                pair_feats = (
                    _features(kernel, basis, X_pairs)
                    if X_pairs.shape[0]
                    else np.empty((0, basis.rank))
                )
                penalty = penalty_matrix_total(
                    pattern, bg_idx, kernel, basis, draw_uniforms(bg_idx.size)
                )
            prior_var = basis.eta / (amplitude * basis.eta + gamma)
            omega, ok = hmc_update_omega(
                omega, pair_feats, penalty, prior_var, amplitude, rng,
                step_size=hmc_eps, n_steps=config.hmc_n_steps,
            )
            accept["omega"] += ok
            window["omega"][0] += ok
            window["omega"][1] += 1

        # --- hyperparameters (adaptive Metropolis) ------------------------
        if config.update_hypers:
            tries["hypers"] += 1
            prop_vec = am.propose(hyper_vec, rng)
            kernel_p = _make_kernel(config.kernel_family, prop_vec[2:])
            basis_p = decompose(kernel_p, grid, config.rank)
            a_p, g_p = math.exp(prop_vec[0]), math.exp(prop_vec[1])
            omega_p = _resize_omega(omega, basis_p.rank)
            pv_p = basis_p.eta / (a_p * basis_p.eta + g_p)
            pv_c = basis.eta / (amplitude * basis.eta + gamma)
            lp_p = -0.5 * float(prop_vec @ prop_vec) + _omega_prior_logpdf(omega_p, pv_p)
            lp_c = -0.5 * float(hyper_vec @ hyper_vec) + _omega_prior_logpdf(omega, pv_c)
            if not config.likelihood_off and n > 0:
                us, vs, rs = cluster_pairs(branching)
                X_pairs = _pair_inputs(pattern, us, vs, rs)
                uniforms = draw_uniforms(bg_idx.size)
                pen_c = penalty_matrix_total(pattern, bg_idx, kernel, basis, uniforms)
                pen_p = penalty_matrix_total(pattern, bg_idx, kernel_p, basis_p, uniforms)
                lp_c += triggering_loglik(
                    pattern, branching, TriggerParams(omega, amplitude, gamma),
                    kernel, basis, config.n_particles, penalty=pen_c,
                )
                lp_p += triggering_loglik(
                    pattern, branching, TriggerParams(omega_p, a_p, g_p),
                    kernel_p, basis_p, config.n_particles, penalty=pen_p,
                )
            if math.log(rng.random()) < lp_p - lp_c:
                hyper_vec = prop_vec
                kernel = kernel_p
                basis = basis_p
                omega = omega_p
                log_a, log_g = float(prop_vec[0]), float(prop_vec[1])
                amplitude, gamma = a_p, g_p
                pair_data.invalidate()
                accept["hypers"] += 1
            am.observe(hyper_vec)

        # --- burn-in tuning ----------------------------------------------
        if it <= config.burn_in:
            if config.adapt_hmc and window["omega"][1] >= 50:
                rate = window["omega"][0] / window["omega"][1]
                if rate < 0.60:
                    hmc_eps *= 0.8
                elif rate > 0.90:
                    hmc_eps *= 1.25
                window["omega"] = [0, 0]
            if (
                config.baseline_update == "mh"
                and window["baseline"][1] >= 100
            ):
                rate = window["baseline"][0] / window["baseline"][1]
                if rate < 0.15:
                    baseline_step *= 0.7
                elif rate > 0.35:
                    baseline_step *= 1.4
                window["baseline"] = [0, 0]

        # --- record -------------------------------------------------------
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            lp = -0.5 * float(theta_mu @ theta_mu) - 0.5 * float(hyper_vec @ hyper_vec)
            prior_var = basis.eta / (amplitude * basis.eta + gamma)
            lp += _omega_prior_logpdf(omega, prior_var)
            if not config.likelihood_off and n > 0:
                zsum = Z_events[bg_idx].sum(axis=0) if bg_idx.size else np.zeros_like(theta_mu)
                lp += _baseline_loglik(zsum, Zq, wq, theta_mu)
                lp += triggering_loglik(
                    pattern, branching, trigger_state(), kernel, basis,
                    config.n_particles, penalty=penalty,
                )
            row = np.concatenate([
                theta_mu,
                _resize_omega(omega, config.rank),
                hyper_vec,
            ])
            kept_rows.append(row)
            kept_lp.append(lp)

        if (
            config.checkpoint_every
            and config.checkpoint_path
            and it % config.checkpoint_every == 0
        ):
            save_checkpoint(config.checkpoint_path, {
                "iteration": it,
                "theta_mu": theta_mu,
                "omega": omega,
                "hyper_vec": hyper_vec,
                "branching": branching.parents,
                "rng_state": rng.bit_generator.state,
                "kept_rows": kept_rows,
                "kept_lp": kept_lp,
                "hmc_eps": hmc_eps,
                "baseline_step": baseline_step,
            })

    samples = np.asarray(kept_rows) if kept_rows else np.empty((0, len(names)))
    rates = {k: (accept[k] / tries[k] if tries[k] else math.nan) for k in accept}
    return PosteriorChain(
        names=names,
        samples=samples,
        log_post=np.asarray(kept_lp),
        accept_rates=rates,
        meta={
            "n_events": n,
            "kernel_family": config.kernel_family,
            "grid_resolution": config.grid_resolution,
            "rank": config.rank,
            "runtime_s": time.time() - t0,
            "hmc_step_size_final": hmc_eps,
            "baseline_step_final": baseline_step,
        },
    )
