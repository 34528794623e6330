"""Discretized quadratic-regularization labeling energy and its proximal solver.

On an image grid the energy of a label-assignment field S is

    E_alpha(S) = ||D S||^2 - alpha ||S||^2,

with D the forward-difference gradient matrix, applied per label channel,
and L = D^T D the 5-point stencil Laplacian.  E_alpha is concave in the
norm term, so it is minimized by a proximal forward-backward loop: the
concave part is linearized at the current iterate and the convex remainder
plus a proximal quadratic is solved over the constraint set

    f rows on the closed simplex at interior nodes, zero at boundary nodes,

where the boundary carries fixed simplex-valued data g.  The inner problems
are strongly convex QPs over a product of simplices, handled by a monotone
accelerated projected-gradient method with backtracking.  Residual
diagnostics check stationarity of the output against the associated
variational inequality and the replicator form of the formal optimality
condition.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import geometry
from .errors import ConvergenceError
from .geometry import replicator_map

Array = np.ndarray

__all__ = [
    "DiscreteOperators",
    "GridProblem",
    "PalmState",
    "PalmTraceRow",
    "PalmResult",
    "build_operators",
    "border_mask",
    "boundary_field_from_data",
    "initial_interior_field",
    "make_grid_problem",
    "discrete_energy",
    "surrogate_objective",
    "simplex_project",
    "palm_step",
    "run_palm",
    "vi_residual",
    "pde_residual",
    "write_palm_trace_csv",
]


@dataclass(frozen=True)
class DiscreteOperators:
    """Forward-difference gradient and 5-point Laplacian of a grid."""

    height: int
    width: int
    grad: sparse.csr_matrix
    lap: sparse.csr_matrix
    lap_bound: float


@dataclass(frozen=True)
class GridProblem:
    """Problem data: grid shape, balance parameter, boundary field, prox schedule."""

    height: int
    width: int
    alpha: float
    g: Array
    boundary_mask: Array
    tau: object = 10.0

    def __post_init__(self):
        n = self.height * self.width
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        g = np.asarray(self.g, dtype=float)
        mask = np.asarray(self.boundary_mask, dtype=bool)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "boundary_mask", mask)
        if g.shape[0] != n or mask.shape != (n,):
            raise ValueError("boundary field or mask does not match the grid size")
        if np.any(g[~mask] != 0.0):
            raise ValueError("interior rows of the boundary field must be exactly zero")
        gb = g[mask]
        if gb.size:
            if np.min(gb) < 0 or np.max(np.abs(gb.sum(axis=1) - 1.0)) > 1e-9:
                raise ValueError("boundary rows must lie on the simplex")
        taus = self.tau if np.iterable(self.tau) else (self.tau,)
        if any(not t > 0 for t in taus):
            raise ValueError("tau schedule must be positive")

    @property
    def interior_mask(self) -> Array:
        return ~self.boundary_mask


@dataclass(frozen=True)
class PalmState:
    """Outer iterate: interior field f and the inner objective values so far."""

    k: int
    f: Array
    objective_trace: tuple = ()


@dataclass(frozen=True)
class PalmTraceRow:
    k: int
    surrogate_objective: float
    e_alpha: float
    max_row_change: float
    feasibility_violation: float


@dataclass(frozen=True)
class PalmResult:
    S: Array
    state: PalmState
    trace: tuple


def build_operators(height: int, width: int) -> DiscreteOperators:
    """Forward differences on all in-bounds horizontal and vertical pixel pairs.

    Omitting out-of-bounds differences makes D^T D the standard 5-point
    stencil on interior nodes, with the degree dropping to 3 on edges and 2
    at corners.
    """
    if height < 2 or width < 2:
        raise ValueError(f"grid must be at least 2x2, got {height}x{width}")
    idx = np.arange(height * width).reshape(height, width)
    tails = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    heads = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    m = tails.size
    rows = np.repeat(np.arange(m), 2)
    cols = np.stack([heads, tails], axis=1).ravel()
    vals = np.tile(np.array([1.0, -1.0]), m)
    grad = sparse.coo_matrix(
        (vals, (rows, cols)), shape=(m, height * width)
    ).tocsr()
    lap = (grad.T @ grad).tocsr()
    lap_bound = float(np.max(np.abs(lap).sum(axis=1)))
    return DiscreteOperators(
        height=height, width=width, grad=grad, lap=lap, lap_bound=lap_bound
    )


def border_mask(height: int, width: int) -> Array:
    """Boolean per-node mask of the grid border (True on the border)."""
    mask = np.zeros((height, width), dtype=bool)
    mask[0, :] = mask[-1, :] = True
    mask[:, 0] = mask[:, -1] = True
    return mask.ravel()


def boundary_field_from_data(distances: Array, rho: float, grid: tuple) -> Array:
    """Boundary rows set to the barycenter likelihood of the data, zero inside.

    The likelihood of the uniform distribution is the softmax of -D/rho, so
    the boundary carries the pointwise data evidence.
    """
    height, width = grid
    d = np.asarray(distances, dtype=float)
    if d.shape[0] != height * width:
        raise ValueError(
            f"distance rows {d.shape[0]} do not match grid {height}x{width}"
        )
    like = geometry.exp_map(geometry.barycenter(d.shape[1]), -d / rho)
    g = np.zeros_like(like)
    mask = border_mask(height, width)
    g[mask] = like[mask]
    return g


def initial_interior_field(distances: Array, rho: float, grid: tuple) -> Array:
    """Interior rows set to the barycenter likelihood, zero on the border."""
    height, width = grid
    d = np.asarray(distances, dtype=float)
    like = geometry.exp_map(geometry.barycenter(d.shape[1]), -d / rho)
    f0 = np.zeros_like(like)
    mask = border_mask(height, width)
    f0[~mask] = like[~mask]
    return f0


def make_grid_problem(
    height: int,
    width: int,
    alpha: float,
    distances: Array,
    rho: float,
    tau=10.0,
) -> GridProblem:
    """Bundle grid shape, boundary field from the data, and solver parameters."""
    g = boundary_field_from_data(distances, rho, (height, width))
    return GridProblem(
        height=height,
        width=width,
        alpha=alpha,
        g=g,
        boundary_mask=border_mask(height, width),
        tau=tau,
    )


def discrete_energy(ops: DiscreteOperators, alpha: float, S: Array) -> float:
    """Grid energy ||D S||^2 - alpha ||S||^2 summed over label channels."""
    d = ops.grad @ S
    return float(np.sum(d * d) - alpha * np.sum(S * S))


def surrogate_objective(ops: DiscreteOperators, problem: GridProblem, f: Array) -> float:
    """Objective driving the outer loop: ||D f||^2 + 2<Lg - alpha g, f> - alpha ||f||^2.

    Differs from the energy of g + f by a constant, so both decrease
    together along the outer iteration.
    """
    df = ops.grad @ f
    lin = ops.lap @ problem.g - problem.alpha * problem.g
    return float(
        np.sum(df * df) + 2.0 * np.sum(lin * f) - problem.alpha * np.sum(f * f)
    )


def simplex_project(x: Array) -> Array:
    """Euclidean projection onto the closed probability simplex, row-wise.

    Sort-based thresholding: with the entries in decreasing order, the
    largest k such that u_k > (u_1 + ... + u_k - 1)/k determines the shift
    whose positive part is the projection.  O(c log c) per row.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot project non-finite values")
    single = x.ndim == 1
    v = np.atleast_2d(x)
    c = v.shape[1]
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1)
    cond = u * np.arange(1, c + 1) > css - 1.0
    last = c - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = (css[np.arange(v.shape[0]), last] - 1.0) / (last + 1.0)
    w = np.maximum(v - theta[:, None], 0.0)
    return w[0] if single else w


def _project_feasible(problem: GridProblem, f: Array) -> Array:
    out = np.zeros_like(f)
    interior = problem.interior_mask
    if interior.any():
        out[interior] = simplex_project(f[interior])
    return out


def _tau_at(problem: GridProblem, k: int) -> float:
    if np.iterable(problem.tau):
        taus = tuple(problem.tau)
        return float(taus[min(k, len(taus) - 1)])
    return float(problem.tau)


def _solve_inner(
    ops: DiscreteOperators,
    problem: GridProblem,
    f_ref: Array,
    b: Array,
    tau: float,
    tol_inner: float,
    max_inner: int,
):
    """Minimize ||Df||^2 + 2<b,f> + |f - f_ref|^2/(2 tau) over the feasible set.

    Accelerated projected gradient with backtracking, made monotone by
    restarting the momentum whenever the trial point does not decrease the
    objective.  Momentum is also restarted on the gradient test
    <grad, x_new - x_old> > 0, and dropped entirely once the residual falls
    below a switch threshold: near the optimum objective differences drown
    in roundoff and momentum only injects noise, while the momentum-free
    iteration contracts geometrically thanks to the proximal term.
    Terminates on the unit-step fixed-point residual
    ||f - P(f - grad)||_inf <= tol_inner.
    """
    grad_mat = ops.grad
    lap = ops.lap

    def value(f):
        df = grad_mat @ f
        diff = f - f_ref
        return float(
            np.sum(df * df) + 2.0 * np.sum(b * f) + np.sum(diff * diff) / (2.0 * tau)
        )

    def gradient(f):
        return 2.0 * (lap @ f) + 2.0 * b + (f - f_ref) / tau

    def residual(f, gf):
        return float(np.max(np.abs(f - _project_feasible(problem, f - gf))))

    x = _project_feasible(problem, f_ref)
    gx = gradient(x)
    if residual(x, gx) <= tol_inner:
        return x, value(x)
    fx = value(x)
    y = x
    tmom = 1.0
    lip = 2.0 * ops.lap_bound + 1.0 / tau
    polish = False
    switch_at = max(1e-5, 100.0 * tol_inner)
    # lip starts at the exact smooth-part bound, so backtracking is a safety
    # net; it never decays below that bound, else slack in the
    # sufficient-decrease test admits unstable steps near the optimum.
    # Comparison slacks are relative: objective values grow with the grid
    # while their roundoff noise grows along, and an absolute slack below
    # that noise would deadlock the monotone guard.
    for _ in range(max_inner):
        gy = gradient(y)
        vy = value(y)
        while True:
            z = _project_feasible(problem, y - gy / lip)
            dz = z - y
            vz = value(z)
            slack = 1e-12 * (1.0 + abs(vy))
            if vz <= vy + np.sum(gy * dz) + 0.5 * lip * np.sum(dz * dz) + slack:
                break
            lip *= 2.0
        if polish:
            # momentum-free phase: y == x, so z is a plain projected
            # gradient step, monotone by the backtracking bound
            x, fx = z, vz
            y = x
        elif vz <= fx + 1e-12 * (1.0 + abs(fx)):
            x_prev = x
            x, fx = z, vz
            if np.sum(gy * (x - x_prev)) > 0.0:
                y = x
                tmom = 1.0
            else:
                tnext = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tmom * tmom))
                y = x + ((tmom - 1.0) / tnext) * (x - x_prev)
                tmom = tnext
        else:
            # trial increased the objective: drop momentum, retry from x
            y = x
            tmom = 1.0
        gx = gradient(x)
        r = residual(x, gx)
        if r <= tol_inner:
            return x, value(x)
        if r <= switch_at and not polish:
            polish = True
            y = x
            tmom = 1.0
    raise ConvergenceError(
        f"inner solver did not reach residual {tol_inner:.1e} in {max_inner} iterations"
    )


def palm_step(
    ops: DiscreteOperators,
    problem: GridProblem,
    state: PalmState,
    tol_inner: float = 1e-8,
    max_inner: int = 10000,
) -> PalmState:
    """One proximal forward-backward step of the outer loop.

    Linearizes the concave -alpha||g + f||^2 term at f^(k) and solves

        min_f ||D f||^2 + 2<L g - alpha (g + f^(k)), f> + |f - f^(k)|^2/(2 tau_k)

    over the feasible set.  The appended objective value is this expression
    at the new iterate.
    """
    tau = _tau_at(problem, state.k)
    b = ops.lap @ problem.g - problem.alpha * (problem.g + state.f)
    f_new, obj = _solve_inner(ops, problem, state.f, b, tau, tol_inner, max_inner)
    return PalmState(
        k=state.k + 1,
        f=f_new,
        objective_trace=state.objective_trace + (obj,),
    )


def _feasibility_violation(problem: GridProblem, f: Array) -> float:
    s = problem.g + f
    sums = float(np.max(np.abs(s.sum(axis=1) - 1.0)))
    neg = float(max(0.0, -np.min(s)))
    return sums + neg


def run_palm(
    ops: DiscreteOperators,
    problem: GridProblem,
    f0: Array,
    max_outer: int = 1000,
    stop_tol: float = 1e-6,
    tol_inner: float = 1e-8,
    max_inner: int = 10000,
) -> PalmResult:
    """Outer proximal loop until the iterate stalls or the budget is spent.

    Stops when ||f^(k+1) - f^(k)||_inf <= stop_tol.  Returns S* = g + f*
    with a per-iteration trace of the surrogate objective, the grid energy
    of g + f, the iterate movement and the feasibility violation.
    """
    f = _project_feasible(problem, np.asarray(f0, dtype=float))
    state = PalmState(k=0, f=f, objective_trace=())
    trace = [
        PalmTraceRow(
            k=0,
            surrogate_objective=surrogate_objective(ops, problem, f),
            e_alpha=discrete_energy(ops, problem.alpha, problem.g + f),
            max_row_change=float("nan"),
            feasibility_violation=_feasibility_violation(problem, f),
        )
    ]
    for _ in range(max_outer):
        new_state = palm_step(ops, problem, state, tol_inner=tol_inner, max_inner=max_inner)
        change = float(np.max(np.abs(new_state.f - state.f)))
        state = new_state
        trace.append(
            PalmTraceRow(
                k=state.k,
                surrogate_objective=surrogate_objective(ops, problem, state.f),
                e_alpha=discrete_energy(ops, problem.alpha, problem.g + state.f),
                max_row_change=change,
                feasibility_violation=_feasibility_violation(problem, state.f),
            )
        )
        if change <= stop_tol:
            break
    return PalmResult(S=problem.g + state.f, state=state, trace=tuple(trace))


def vi_residual(ops: DiscreteOperators, problem: GridProblem, S: Array) -> float:
    """Projected-gradient fixed-point gap of the energy over interior rows.

    r = ||S - P(S - (L S - alpha S))||_inf restricted to interior rows, with
    unit step; zero exactly at stationary points of the constrained energy.
    """
    interior = problem.interior_mask
    if not interior.any():
        return 0.0
    grad = ops.lap @ S - problem.alpha * S
    cand = (S - grad)[interior]
    return float(np.max(np.abs(S[interior] - simplex_project(cand))))


def pde_residual(ops: DiscreteOperators, alpha: float, S: Array) -> Array:
    """Per-node norm of replicator(S_i, -(L S)_i - alpha S_i).

    The replicator operator degenerates at vertices, so the residual is
    small wherever the assignment is nearly integral.
    """
    rhs = -(ops.lap @ S) - alpha * S
    return np.linalg.norm(replicator_map(S, rhs), axis=1)


def write_palm_trace_csv(path, trace) -> None:
    """Trace CSV with columns (k, surrogate_objective, E_alpha, max_row_change, feasibility_violation)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["k", "surrogate_objective", "E_alpha", "max_row_change", "feasibility_violation"]
        )
        for r in trace:
            writer.writerow(
                [
                    r.k,
                    repr(float(r.surrogate_objective)),
                    repr(float(r.e_alpha)),
                    repr(float(r.max_row_change)),
                    repr(float(r.feasibility_violation)),
                ]
            )
