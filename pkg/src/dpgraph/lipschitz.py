"""Sensitivity bounds via global maximization of the Jacobian spectral norm.

The maximizer follows a simplicial-sampling scheme: low-discrepancy samples
over the box, a nearest-neighbour complex to identify locally maximal sample
stars, then projected gradient ascent from each star. The convergence
certificate is heuristic: the stationary-value set must be stable when the
sample count is doubled. When it is not, the result is still a valid lower
bound (it is the max over every point evaluated) but is flagged with a
warning instead of a certificate.
"""

from __future__ import annotations

import itertools
import time
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Mapping, NamedTuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import qmc

from .autodiff import jacobian
from .errors import (
    DimensionTooLarge,
    InvalidParams,
    NonFinite,
    NumericalError,
    OptimizerFailure,
    ValidationFailed,
)
from .graph import Diagnostic, Graph, OpKind
from .interval import ibp_sensitivity
from .report import SensitivityReport
from . import runtime

METHODS = ("ibp", "global_opt", "grid_oracle")


# ---------------------------------------------------------------------------
# spectral norm

_SVD_MAX_SIDE = 64
_POWER_TOL = 1e-10
_POWER_MAX_ITER = 1000


def spectral_norm(matrix) -> float:
    """Largest singular value; equals the Euclidean norm for vectors."""
    return spectral_norm_with_vectors(matrix)[0]


def spectral_norm_with_vectors(matrix) -> tuple[float, np.ndarray, np.ndarray]:
    """(sigma, u, v) with sigma = u^T M v the largest singular triple."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim < 2:
        m = np.atleast_2d(m)
    if not np.all(np.isfinite(m)):
        raise NonFinite("matrix contains NaN or Inf")
    if min(m.shape) <= _SVD_MAX_SIDE:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
        return float(s[0]), u[:, 0], vt[0]
    return _power_iteration(m)


def _power_iteration(m: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    rows, cols = m.shape
    gram_on_right = cols <= rows
    n = cols if gram_on_right else rows
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam_prev = 0.0
    for _ in range(_POWER_MAX_ITER):
        w = m.T @ (m @ v) if gram_on_right else m @ (m.T @ v)
        lam = float(v @ w)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0, np.zeros(rows), np.zeros(cols)
        v = w / norm_w
        if abs(lam - lam_prev) <= _POWER_TOL * max(1.0, abs(lam)):
            break
        lam_prev = lam
    sigma = float(np.sqrt(max(lam, 0.0)))
    if gram_on_right:
        right = v
        left = m @ v
    else:
        left = v
        right = m.T @ v
    left_n = np.linalg.norm(left)
    right_n = np.linalg.norm(right)
    return sigma, left / (left_n or 1.0), right / (right_n or 1.0)


# ---------------------------------------------------------------------------
# optimizer configuration


@dataclass(frozen=True)
class OptimizerConfig:
    """Knobs for the global maximizer and the grid oracle."""

    n_samples: int = 128          # initial low-discrepancy samples
    max_starts: int = 16          # refinement starts per phase
    max_refine_iters: int = 100
    seed: int = 0
    value_tol: float = 1e-9
    certificate_rtol: float = 1e-4
    grid_resolution: int = 201
    grid_dim_cap: int = 4
    use_graph_gradient: bool = True
    include_corners: bool = True
    max_corner_samples: int = 64
    freeze: Mapping | None = None  # tensor name -> fixed value, removed from the box


class MaximizeResult(NamedTuple):
    argmax: np.ndarray
    value: float
    certificate: bool
    warning: str | None
    n_evaluations: int


# ---------------------------------------------------------------------------
# global maximization


class _Recorder:
    """Wraps the objective: tracks the best feasible evaluation ever seen."""

    def __init__(self, fn: Callable[[np.ndarray], float]):
        self.fn = fn
        self.best_value = -np.inf
        self.best_point: np.ndarray | None = None
        self.count = 0

    def __call__(self, x: np.ndarray) -> float:
        self.count += 1
        try:
            value = float(self.fn(x))
        except FloatingPointError:
            value = -np.inf
        if np.isnan(value):
            value = -np.inf
        if value > self.best_value:
            self.best_value = value
            self.best_point = np.array(x)
        return value


def _fd_gradient(f, x, lo, hi, rel_step=1e-6):
    g = np.zeros_like(x)
    span = np.maximum(hi - lo, 1.0)
    for i in range(x.size):
        h = rel_step * span[i]
        xp, xm = x.copy(), x.copy()
        xp[i] = min(x[i] + h, hi[i])
        xm[i] = max(x[i] - h, lo[i])
        dx = xp[i] - xm[i]
        if dx == 0.0:
            continue
        fp, fm = f(xp), f(xm)
        if np.isfinite(fp) and np.isfinite(fm):
            g[i] = (fp - fm) / dx
    return g


def _ascend(f: _Recorder, grad, x0, lo, hi, config: OptimizerConfig):
    x = np.clip(np.asarray(x0, dtype=np.float64), lo, hi)
    fx = f(x)
    if not np.isfinite(fx):
        return x, fx
    step = 0.25 * float(np.max(hi - lo)) or 1.0
    flat_streak = 0
    for _ in range(config.max_refine_iters):
        g = grad(x)
        norm_g = np.linalg.norm(g)
        if norm_g == 0.0 or not np.isfinite(norm_g):
            break
        direction = g / norm_g
        improved = False
        s = step
        for _ in range(30):
            cand = np.clip(x + s * direction, lo, hi)
            if np.array_equal(cand, x):
                s *= 0.5
                continue
            fc = f(cand)
            if fc > fx:
                gain = fc - fx
                x, fx = cand, fc
                step = min(s * 2.0, float(np.max(hi - lo)))
                improved = True
                if gain <= config.value_tol * (1.0 + abs(fx)):
                    flat_streak += 1
                else:
                    flat_streak = 0
                break
            s *= 0.5
        if not improved or flat_streak >= 2:
            break
    return x, fx


def _sample_points(lo, hi, n, config: OptimizerConfig) -> np.ndarray:
    d = lo.size
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sobol = qmc.Sobol(d, scramble=True, seed=config.seed)
        unit = sobol.random(n)
    pts = [lo + unit * (hi - lo)]
    pts.append((lo + hi)[None, :] / 2.0)
    if config.include_corners:
        if 2 ** d <= config.max_corner_samples:
            corners = np.array(list(itertools.product(*zip(lo, hi))))
        else:
            rng = np.random.default_rng(config.seed + 1)
            picks = rng.integers(0, 2, size=(config.max_corner_samples, d))
            corners = np.where(picks == 0, lo, hi)
        pts.append(corners)
    return np.unique(np.concatenate(pts, axis=0), axis=0)


def _value_groups(values, rtol) -> int:
    finite = sorted((v for v in values if np.isfinite(v)), reverse=True)
    if not finite:
        return 0
    groups = 1
    for prev, cur in zip(finite, finite[1:]):
        if prev - cur > rtol * max(1.0, abs(prev)):
            groups += 1
    return groups


def global_maximize(objective, box, config: OptimizerConfig | None = None,
                    gradient=None) -> MaximizeResult:
    """Maximize a pure objective over an axis-aligned box.

    Returns the best point evaluated anywhere in the procedure, a heuristic
    stability certificate, and the evaluation count. Points where the
    objective is NaN or raises FloatingPointError are treated as infeasible.
    """
    config = config or OptimizerConfig()
    lo = np.asarray(box[0], dtype=np.float64).ravel()
    hi = np.asarray(box[1], dtype=np.float64).ravel()
    if lo.shape != hi.shape or np.any(lo > hi) or not (
            np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise InvalidParams("box must be finite with lo <= hi")
    f = _Recorder(objective)
    if lo.size == 0:
        value = f(np.zeros(0))
        if not np.isfinite(value):
            raise OptimizerFailure("objective is infeasible")
        return MaximizeResult(np.zeros(0), value, True, None, f.count)

    grad = gradient or (lambda x: _fd_gradient(f, x, lo, hi))
    span = np.maximum(hi - lo, 1e-30)

    def run_phase(n_samples: int):
        pts = _sample_points(lo, hi, n_samples, config)
        vals = np.array([f(p) for p in pts])
        feasible = np.isfinite(vals)
        if not np.any(feasible):
            return -np.inf, 0
        k = int(min(2 * lo.size + 2, 16, len(pts) - 1))
        if k >= 1 and len(pts) > 1:
            tree = cKDTree(pts / span)
            _, nbr = tree.query(pts / span, k=k + 1)
            is_star_max = np.array([
                feasible[i] and vals[i] >= np.max(vals[nbr[i, 1:]])
                for i in range(len(pts))
            ])
            candidates = np.flatnonzero(is_star_max)
        else:
            candidates = np.flatnonzero(feasible)
        order = candidates[np.argsort(-vals[candidates])][:config.max_starts]
        refined_vals = []
        for idx in order:
            _, fv = _ascend(f, grad, pts[idx], lo, hi, config)
            if np.isfinite(fv):
                refined_vals.append(fv)
        if not refined_vals:
            best = float(np.max(vals[feasible]))
            return best, 1
        return max(refined_vals), _value_groups(refined_vals,
                                                config.certificate_rtol)

    best_a, groups_a = run_phase(config.n_samples)
    best_b, groups_b = run_phase(2 * config.n_samples)
    if f.best_point is None:
        raise OptimizerFailure("no feasible objective evaluation in the box")

    stable = (
        groups_a == groups_b
        and np.isfinite(best_a) and np.isfinite(best_b)
        and abs(best_a - best_b) <= config.certificate_rtol * max(1.0, abs(best_b))
    )
    warning = None
    if not stable:
        warning = ("stationary set changed under sample doubling; "
                   "reporting the best evaluated point without a certificate")
    return MaximizeResult(f.best_point, f.best_value, stable, warning, f.count)


# ---------------------------------------------------------------------------
# sensitivity estimation over graphs


class _JacobianObjective:
    """Spectral norm of the Jacobian as a function of the boxed free tensors."""

    def __init__(self, graph: Graph, wrt, config: OptimizerConfig):
        graph.require_valid()
        self.config = config
        self.jg = jacobian(graph, wrt)
        self.program = runtime.compile(self.jg.graph)
        frozen_spec = dict(config.freeze or {})
        self.frozen: dict[str, np.ndarray] = {}
        self.free: list[tuple[str, tuple[int, ...]]] = []
        lo_parts, hi_parts = [], []
        g = self.jg.graph
        for h in g.leaves():
            node = g.nodes[h]
            if node.name in frozen_spec:
                value = np.asarray(frozen_spec[node.name], dtype=np.float64)
                if value.shape != node.shape.dims:
                    raise InvalidParams(
                        f"frozen value for '{node.name}' expects shape "
                        f"{node.shape}, got {value.shape}")
                self.frozen[node.name] = value
                continue
            b = g.bounds.get(h)
            if b is None:
                raise ValidationFailed([Diagnostic(
                    "missing-bounds",
                    f"'{node.name}' has no bounds and is not frozen", h)])
            lo, hi = b.broadcast_to(node.shape)
            self.free.append((node.name, node.shape.dims))
            lo_parts.append(lo.ravel())
            hi_parts.append(hi.ravel())
        self.lo = np.concatenate(lo_parts) if lo_parts else np.zeros(0)
        self.hi = np.concatenate(hi_parts) if hi_parts else np.zeros(0)
        self._grad_program = None
        self._grad_failed = not config.use_graph_gradient

    @property
    def dim(self) -> int:
        return self.lo.size

    def unpack(self, v: np.ndarray) -> dict[str, np.ndarray]:
        inputs = dict(self.frozen)
        pos = 0
        for name, dims in self.free:
            size = int(np.prod(dims)) if dims else 1
            inputs[name] = np.asarray(v[pos:pos + size]).reshape(dims)
            pos += size
        return inputs

    def jacobian_at(self, v: np.ndarray) -> np.ndarray:
        (j,) = runtime.execute(self.program, self.unpack(v))
        return j

    def __call__(self, v: np.ndarray) -> float:
        try:
            return spectral_norm(self.jacobian_at(v))
        except (NumericalError, NonFinite):
            return -np.inf

    def gradient(self, v: np.ndarray) -> np.ndarray:
        """d sigma_max / dv via the derivative of the Jacobian graph."""
        if self._grad_program is None and not self._grad_failed:
            try:
                g = self.jg.graph
                handles = [g.find(name) for name, _ in self.free]
                second = jacobian(g, handles)
                if second.output_size * second.wrt_size > 200_000:
                    raise MemoryError("second-order graph too large")
                self._grad_program = runtime.compile(second.graph)
            except Exception:
                self._grad_failed = True
        if self._grad_failed:
            return _fd_gradient(self, v, self.lo, self.hi)
        try:
            inputs = self.unpack(v)
            (j,) = runtime.execute(self.program, inputs)
            _, u, w = spectral_norm_with_vectors(j)
            (t,) = runtime.execute(self._grad_program, inputs)
        except (NumericalError, NonFinite):
            return _fd_gradient(self, v, self.lo, self.hi)
        rows, cols = j.shape if j.ndim == 2 else (1, j.size)
        tensor = t.reshape(rows, cols, self.dim)
        return np.einsum("r,c,rcv->v", u, w, tensor)


def _grid_points(lo, hi, resolution):
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(lo.size)]
    return itertools.product(*axes)


def estimate_sensitivity(graph: Graph, wrt=None, bounds=None,
                         method: str = "global_opt",
                         config: OptimizerConfig | None = None) -> SensitivityReport:
    """Bound sup of the Jacobian spectral norm over the bounded box.

    `wrt` selects the differentiation targets (default: all private inputs);
    every non-frozen Input/Parameter still varies over its box as a free
    coordinate of the supremum. `bounds` overrides the graph's own bounds.
    Methods: `global_opt` (sampling plus refined ascent), `grid_oracle`
    (brute force, small dimensions only), `ibp` (interval baseline).
    """
    if method not in METHODS:
        raise InvalidParams(f"unknown method {method!r}; expected one of {METHODS}")
    config = config or OptimizerConfig()
    if bounds is not None:
        graph = replace(graph, bounds=bounds)
    if wrt is None:
        wrt = list(graph.private_inputs) or list(graph.leaves())
    else:
        wrt = list(wrt)

    t0 = time.perf_counter()
    fingerprint = runtime.graph_fingerprint(graph)

    if method == "ibp":
        target = graph
        if config.freeze:
            target = _freeze_bounds(graph, config.freeze)
        report = ibp_sensitivity(target, wrt=wrt)
        return replace(report, fingerprint=fingerprint,
                       wall_time=time.perf_counter() - t0)

    objective = _JacobianObjective(graph, wrt, config)

    if method == "grid_oracle":
        if objective.dim > config.grid_dim_cap:
            raise DimensionTooLarge(
                f"grid oracle supports at most {config.grid_dim_cap} free "
                f"scalar variables, domain has {objective.dim}")
        best_val, best_pt = -np.inf, None
        for point in _grid_points(objective.lo, objective.hi, config.grid_resolution):
            v = np.asarray(point)
            val = objective(v)
            if val > best_val:
                best_val, best_pt = val, v
        if best_pt is None or not np.isfinite(best_val):
            raise OptimizerFailure("grid oracle found no feasible point")
        return SensitivityReport(
            method="grid_oracle", bound=float(best_val),
            interval_low=float(best_val), certified=False,
            argmax=objective.unpack(best_pt),
            wall_time=time.perf_counter() - t0, fingerprint=fingerprint)

    result = global_maximize(objective, (objective.lo, objective.hi), config,
                             gradient=objective.gradient)
    return SensitivityReport(
        method="global_opt", bound=float(result.value),
        interval_low=float(result.value), certified=result.certificate,
        argmax=objective.unpack(result.argmax),
        wall_time=time.perf_counter() - t0, fingerprint=fingerprint,
        warning=result.warning)


def _freeze_bounds(graph: Graph, freeze: Mapping) -> Graph:
    bounds = graph.bounds.copy()
    for name, value in freeze.items():
        h = graph.find(name)
        if graph.nodes[h].kind not in (OpKind.INPUT, OpKind.PARAMETER):
            raise InvalidParams(f"cannot freeze non-leaf node '{name}'")
        bounds.set(h, value, value)
    return replace(graph, bounds=bounds)
