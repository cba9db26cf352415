"""Log-linear background intensity over the unit space-time window.

The background rate is mu(s, t) = exp(design(s, t) @ theta) with a
design vector of polynomial terms in the unit coordinates plus optional
covariate fields (population density, altitude and the like) evaluated
by nearest-measurement lookup with exponential distance decay.

The background density is taken with respect to a unit-rate Poisson
process, so the log density of a background pattern is
sum_i log mu(x_i) - integral(mu - 1).  The integral is evaluated by a
deterministic quadrature whose weights sum to the window volume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CovariateField",
    "BaselineDesign",
    "BaselineParams",
    "QuadratureScheme",
    "mu_star",
    "log_density",
    "quadrature_integral",
    "mle_fit_baseline",
]


@dataclass(frozen=True)
class CovariateField:
    """Sparse spatio-temporal covariate: values at measured sites per time.

    ``sites`` is (n_sites, 2) unit coordinates, ``times`` the sorted unit
    times with measurements, ``values`` (n_times, n_sites).  Evaluation
    finds the nearest site, linearly interpolates over time (clamping
    outside the measured range) and applies exp(-decay * distance).
    """

    name: str
    sites: np.ndarray
    times: np.ndarray
    values: np.ndarray
    decay: float = 1.0

    def __post_init__(self):
        sites = np.atleast_2d(np.asarray(self.sites, dtype=float))
        times = np.asarray(self.times, dtype=float)
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if sites.shape[1] != 2:
            raise ValueError("sites must be (n, 2)")
        if values.shape != (times.size, sites.shape[0]):
            raise ValueError("values must be (n_times, n_sites)")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("measurement times must be strictly increasing")
        if self.decay < 0:
            raise ValueError("decay must be >= 0")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def nearest_value_dist(self, x, y, t) -> tuple[np.ndarray, np.ndarray]:
        """Nearest-site value (time-interpolated, clamped) and distance."""
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        t = np.asarray(t, dtype=float).ravel()
        d2 = (x[:, None] - self.sites[:, 0][None, :]) ** 2 + (
            y[:, None] - self.sites[:, 1][None, :]
        ) ** 2
        nearest = np.argmin(d2, axis=1)
        dist = np.sqrt(d2[np.arange(x.size), nearest])
        tt = np.clip(t, self.times[0], self.times[-1])
        if self.times.size == 1:
            vals = self.values[0, nearest]
        else:
            hi = np.clip(np.searchsorted(self.times, tt, side="right"), 1, self.times.size - 1)
            lo = hi - 1
            w = (tt - self.times[lo]) / (self.times[hi] - self.times[lo])
            vals = (1 - w) * self.values[lo, nearest] + w * self.values[hi, nearest]
        return vals, dist

    def evaluate(self, x, y, t) -> np.ndarray:
        vals, dist = self.nearest_value_dist(x, y, t)
        return vals * np.exp(-self.decay * dist)


class BaselineDesign:
    """Design vector builder: (1, x, y, x^2, y^2, t, covariate fields...)."""

    def __init__(self, fields: tuple[CovariateField, ...] = (), spatial_poly: bool = True):
        self.fields = tuple(fields)
        self.spatial_poly = bool(spatial_poly)

    @property
    def names(self) -> tuple[str, ...]:
        base = ("intercept",)
        if self.spatial_poly:
            base += ("x", "y", "x2", "y2", "t")
        return base + tuple(f.name for f in self.fields)

    @property
    def n_coef(self) -> int:
        return len(self.names)

    def matrix(self, x, y, t) -> np.ndarray:
        """Design matrix at points; shape (n_points, n_coef)."""
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        t = np.asarray(t, dtype=float).ravel()
        cols = [np.ones_like(x)]
        if self.spatial_poly:
            cols += [x, y, x * x, y * y, t]
        cols += [f.evaluate(x, y, t) for f in self.fields]
        return np.column_stack(cols)

    @classmethod
    def intercept_only(cls) -> "BaselineDesign":
        return cls(fields=(), spatial_poly=False)


@dataclass(frozen=True)
class BaselineParams:
    """Coefficients of the log-linear background rate."""

    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).ravel())


def mu_star(x, y, t, design: BaselineDesign, params: BaselineParams) -> np.ndarray:
    """Background intensity exp(design @ theta) at the given points."""
    Z = design.matrix(x, y, t)
    if Z.shape[1] != params.theta.size:
        raise ValueError(
            f"design has {Z.shape[1]} columns but theta has {params.theta.size}"
        )
    return np.exp(Z @ params.theta)


@dataclass(frozen=True)
class QuadratureScheme:
    """Deterministic quadrature over the unit window.

    ``rule`` chooses node placement: "gauss" (tensor Gauss-Legendre,
    near-exact for smooth integrands) or "centers" (equal-weight cell
    centers, optionally augmented with data points that share their
    cell's weight).  Both weight sets sum to the window volume exactly.
    """

    nt: int = 64
    nx: int = 32
    ny: int = 32
    rule: str = "gauss"

    def __post_init__(self):
        if min(self.nt, self.nx, self.ny) < 1:
            raise ValueError("node counts must be positive")
        if self.rule not in ("gauss", "centers"):
            raise ValueError("rule must be 'gauss' or 'centers'")

    def nodes(self, data_points: np.ndarray | None = None):
        """Quadrature nodes/weights on [0,1]^3 as ((x, y, t), w).

        ``data_points`` is an optional (n, 3) array of (x, y, t) event
        locations; under the "centers" rule each event joins its cell's
        node set and the cell weight is split evenly across occupants.
        """
        if self.rule == "gauss":
            xt, wt = np.polynomial.legendre.leggauss(self.nt)
            xx, wx = np.polynomial.legendre.leggauss(self.nx)
            xy, wy = np.polynomial.legendre.leggauss(self.ny)
            xt, wt = (xt + 1) / 2, wt / 2
            xx, wx = (xx + 1) / 2, wx / 2
            xy, wy = (xy + 1) / 2, wy / 2
            T, X, Y = np.meshgrid(xt, xx, xy, indexing="ij")
            W = (
                wt[:, None, None] * wx[None, :, None] * wy[None, None, :]
            )
            return (X.ravel(), Y.ravel(), T.ravel()), W.ravel()
        # cell-center rule with optional data augmentation
        ct = (np.arange(self.nt) + 0.5) / self.nt
        cx = (np.arange(self.nx) + 0.5) / self.nx
        cy = (np.arange(self.ny) + 0.5) / self.ny
        T, X, Y = np.meshgrid(ct, cx, cy, indexing="ij")
        xs, ys, ts = X.ravel(), Y.ravel(), T.ravel()
        cell_vol = 1.0 / (self.nt * self.nx * self.ny)
        if data_points is None or len(data_points) == 0:
            w = np.full(xs.size, cell_vol)
            return (xs, ys, ts), w
        dx, dy, dt_ = (np.asarray(data_points[:, i], dtype=float) for i in range(3))
        # cell index of every node (dummies first, then data)
        def cell_index(xa, ya, ta):
            it = np.clip((ta * self.nt).astype(int), 0, self.nt - 1)
            ix = np.clip((xa * self.nx).astype(int), 0, self.nx - 1)
            iy = np.clip((ya * self.ny).astype(int), 0, self.ny - 1)
            return (it * self.nx + ix) * self.ny + iy

        all_x = np.concatenate([xs, dx])
        all_y = np.concatenate([ys, dy])
        all_t = np.concatenate([ts, dt_])
        cells = cell_index(all_x, all_y, all_t)
        counts = np.bincount(cells, minlength=self.nt * self.nx * self.ny)
        w = cell_vol / counts[cells]
        return (all_x, all_y, all_t), w


def quadrature_integral(
    design: BaselineDesign,
    params: BaselineParams,
    scheme: QuadratureScheme | None = None,
    data_points: np.ndarray | None = None,
) -> float:
    """Quadrature estimate of integral of (mu - 1) over the unit window."""
    scheme = QuadratureScheme() if scheme is None else scheme
    (xs, ys, ts), w = scheme.nodes(data_points)
    vals = mu_star(xs, ys, ts, design, params)
    return float(w @ (vals - 1.0))


def log_density(
    pattern_xyt,
    design: BaselineDesign,
    params: BaselineParams,
    scheme: QuadratureScheme | None = None,
) -> float:
    """Log density of background events w.r.t. a unit-rate Poisson.

    ``pattern_xyt`` is an (n, 3) array of (x, y, t) unit coordinates of
    the background events (possibly empty).  Returns
    sum_i log mu(x_i) - integral(mu - 1).
    """
    pts = np.asarray(pattern_xyt, dtype=float).reshape(-1, 3)
    total = 0.0
    if pts.shape[0]:
        vals = mu_star(pts[:, 0], pts[:, 1], pts[:, 2], design, params)
        total += float(np.log(vals).sum())
    total -= quadrature_integral(design, params, scheme, data_points=pts if pts.size else None)
    return total


def mle_fit_baseline(
    pattern_xyt,
    design: BaselineDesign,
    scheme: QuadratureScheme | None = None,
    max_iter: int = 500,
) -> tuple[BaselineParams, bool]:
    """Maximum-likelihood coefficients of the background rate.

    The log likelihood sum_i Z_i @ theta - sum_q w_q exp(Z_q @ theta) is
    concave with analytic gradient, so L-BFGS-B converges reliably.
    Raises if there are fewer events than coefficients + 1.
    """
    from scipy.optimize import minimize

    pts = np.asarray(pattern_xyt, dtype=float).reshape(-1, 3)
    if pts.shape[0] < design.n_coef + 1:
        raise ValueError(
            f"need at least {design.n_coef + 1} events to fit {design.n_coef} coefficients"
        )
    scheme = QuadratureScheme() if scheme is None else scheme
    Zd = design.matrix(pts[:, 0], pts[:, 1], pts[:, 2])
    (qx, qy, qt), w = scheme.nodes()
    Zq = design.matrix(qx, qy, qt)
    zsum = Zd.sum(axis=0)

    def negloglik(theta):
        eta = Zq @ theta
        ex = np.exp(np.clip(eta, -700, 700))
        val = -(zsum @ theta) + w @ ex
        grad = -zsum + Zq.T @ (w * ex)
        return val, grad

    res = minimize(negloglik, np.zeros(design.n_coef), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter})
    if not res.success:
        res2 = minimize(negloglik, res.x, jac=True, method="L-BFGS-B",
                        options={"maxiter": max_iter})
        if res2.fun < res.fun:
            res = res2
    return BaselineParams(res.x), bool(res.success)
