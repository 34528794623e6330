"""Label assignment dynamics on graphs.

The state is an (n, c) row-stochastic matrix W: one probability vector per
node over c labels.  Data enters through an (n, c) nonnegative distance
matrix; neighborhoods enter through a row-stochastic averaging operator.
The coupled flow

    dW/dt = replicator(W, S(W)),    W(0) = barycenter rows,

drives every row toward a label vertex, where S is the similarity map:
the geometric mean of the neighborhood's likelihood rows, taken in the
simplex geometry of :mod:`.geometry`.  The decoupled companion flow

    dS/dt = replicator(S, Omega @ S),    S(0) = S(W(0)),

evolves the similarity matrix autonomously and fully determines the coupled
flow; for symmetric Omega it is the Riemannian descent flow of the
quadratic potential J(S) = -1/2 <S, Omega S>.  Both a geometric explicit
Euler scheme and a classical RK4 reference integrator are provided, along
with the differential of the similarity map, its adjoint, and a
constructive witness showing the coupled flow itself admits no potential.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import NotApplicableError, SingularityError
from .geometry import (
    EPS_INTERIOR,
    big_exp_map,
    clamp_interior,
    exp_map,
    project_t0,
    replicator_map,
)
from .graph import AveragingOperator

Array = np.ndarray

RHS_KINDS = ("assignment", "s_flow")

__all__ = [
    "FlowParams",
    "FlowState",
    "FlowTraceRow",
    "WitnessResult",
    "default_rho",
    "barycenter_matrix",
    "likelihood",
    "similarity",
    "similarity_closed_form",
    "assignment_flow_rhs",
    "s_flow_rhs",
    "integrate_geometric_euler",
    "integrate_rk4",
    "run_labeling_flow",
    "check_flow_equivalence",
    "potential_value",
    "potential_dirichlet_form",
    "euclidean_grad_potential",
    "riemannian_grad_potential",
    "similarity_jacobian_apply",
    "similarity_jacobian_adjoint_apply",
    "non_potential_witness",
    "mean_entropy",
    "write_trajectory_csv",
    "save_matrix",
    "load_matrix",
]


@dataclass(frozen=True)
class FlowParams:
    """Distance data, neighborhood weights and the distance scale rho."""

    rho: float
    omega: AveragingOperator
    distances: Array

    def __post_init__(self):
        d = np.asarray(self.distances, dtype=float)
        object.__setattr__(self, "distances", d)
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if d.ndim != 2 or d.shape[1] < 2:
            raise ValueError(f"distances must be (n, c) with c >= 2, got {d.shape}")
        if d.shape[0] != self.omega.n:
            raise ValueError(
                f"distance rows {d.shape[0]} do not match graph size {self.omega.n}"
            )
        if not np.all(np.isfinite(d)) or np.min(d) < 0:
            raise ValueError("distances must be finite and nonnegative")

    @property
    def shape(self) -> tuple:
        return self.distances.shape


@dataclass(frozen=True)
class FlowState:
    """Assignment matrix at a time point of a trajectory."""

    W: Array
    t: float


@dataclass(frozen=True)
class FlowTraceRow:
    t: float
    potential: float
    mean_entropy: float
    min_entry: float


def default_rho(distances: Array) -> float:
    """Mean of the positive distance entries; 1.0 for identically zero data.

    Normalizes the a-priori unknown scale of the feature metric.
    """
    d = np.asarray(distances, dtype=float)
    pos = d[d > 0]
    return float(np.mean(pos)) if pos.size else 1.0


def barycenter_matrix(n: int, c: int) -> Array:
    """The uninformative initial assignment: every row the uniform distribution."""
    return np.full((n, c), 1.0 / c)


def likelihood(params: FlowParams, W: Array) -> Array:
    """Lift distances onto the simplex at each row of W.

    Row i is W_i e^{-D_i/rho} / <W_i, e^{-D_i/rho}>: small distances gain
    mass, constant rows of D leave W unchanged.
    """
    u = -params.distances / params.rho
    u = u - np.max(u, axis=-1, keepdims=True)
    r = W * np.exp(u)
    r = r / np.sum(r, axis=-1, keepdims=True)
    return clamp_interior(r)


def similarity(params: FlowParams, W: Array) -> Array:
    """Geometric neighborhood average of the likelihood rows.

    Row i is Exp_{W_i} applied to the weighted sum of Exp_{W_i}^{-1} of the
    neighbors' likelihood rows.  The weighted sum is evaluated through the
    linearity of the replicator operator: with row-stochastic weights,
    sum_k w_ik R_{W_i} log(L_k / W_i) = R_{W_i} [(Omega log L)_i - log W_i].
    """
    like = likelihood(params, W)
    a = params.omega.matrix @ np.log(like)
    v = replicator_map(W, a - np.log(W))
    return big_exp_map(W, v)


def similarity_closed_form(params: FlowParams, W: Array) -> Array:
    """Equivalent expression of the similarity map based at the barycenter.

    Row i is exp_{1/c}(sum_j w_ij (projected log W_j - D_j / rho)).  Kept as
    an independent code path for cross-validation against :func:`similarity`.
    """
    y = params.omega.matrix @ (project_t0(np.log(W)) - params.distances / params.rho)
    return exp_map(geometry.barycenter(W.shape[1]), y)


def assignment_flow_rhs(params: FlowParams, W: Array) -> Array:
    """Right-hand side replicator(W, S(W)) of the coupled flow."""
    return replicator_map(W, similarity(params, W))


def s_flow_rhs(omega: AveragingOperator, S: Array) -> Array:
    """Right-hand side replicator(S, Omega S) of the decoupled flow."""
    return replicator_map(S, omega.matrix @ S)


def potential_value(omega: AveragingOperator, S: Array) -> float:
    """Quadratic potential -1/2 <S, Omega S>.

    The value is defined for any Omega, but only a symmetric Omega makes the
    decoupled flow its Riemannian gradient descent.
    """
    if not omega.symmetric:
        warnings.warn(
            "averaging operator is not symmetric; the potential value is "
            "reported but the decoupled flow is not its gradient flow",
            stacklevel=2,
        )
    return -0.5 * float(np.sum(S * (omega.matrix @ S)))


def potential_dirichlet_form(omega: AveragingOperator, S: Array) -> float:
    """Potential rewritten as a Dirichlet pair term minus the squared norm.

    Evaluates 1/4 sum_ij w_ij ||S_i - S_j||^2 - 1/2 ||S||^2 directly over
    the sparse pattern; equals :func:`potential_value` for symmetric Omega.
    """
    coo = omega.matrix.tocoo()
    diff = S[coo.row] - S[coo.col]
    pair = float(np.sum(coo.data * np.sum(diff * diff, axis=1)))
    return 0.25 * pair - 0.5 * float(np.sum(S * S))


def euclidean_grad_potential(omega: AveragingOperator, S: Array) -> Array:
    """Euclidean gradient -Omega S of the potential (symmetric Omega)."""
    return -(omega.matrix @ S)


def riemannian_grad_potential(omega: AveragingOperator, S: Array) -> Array:
    """Riemannian gradient: replicator rows applied to the Euclidean gradient."""
    return replicator_map(S, euclidean_grad_potential(omega, S))


def similarity_jacobian_apply(params: FlowParams, W: Array, X: Array) -> Array:
    """Directional derivative of the similarity map at W along tangent X.

    Row i equals sum_j w_ij R_{S_i(W)} [X_j / W_j], evaluated through the
    neighborhood average of X / W.
    """
    if np.min(W) < EPS_INTERIOR:
        raise SingularityError("W has entries below the interior floor")
    s = similarity(params, W)
    return replicator_map(s, params.omega.matrix @ (X / W))


def similarity_jacobian_adjoint_apply(params: FlowParams, W: Array, X: Array) -> Array:
    """Adjoint of the similarity differential with respect to the flat metric.

    Row i equals sum_j w_ji projected(R_{S_j(W)} X_j / W_i); the transposed
    weights pick up the reversed edge direction.
    """
    if np.min(W) < EPS_INTERIOR:
        raise SingularityError("W has entries below the interior floor")
    s = similarity(params, W)
    z = replicator_map(s, X)
    return project_t0((params.omega.matrix.T @ z) / W)


@dataclass(frozen=True)
class WitnessResult:
    """Constructive certificate that the coupled flow has no potential."""

    node: int
    base_point: Array
    direction: Array
    asymmetry: Array
    asymmetry_norm: float
    closed_form_norm: float


def non_potential_witness(params: FlowParams) -> WitnessResult:
    """Point and direction at which the similarity differential is not self-adjoint.

    Requires c >= 3 and at least one non-constant distance row i0.  With
    k/l the smallest/largest distance at i0, a base point p equalizing the
    k and l coordinates at alpha0 = 1/(2c), and W_j = exp_p(D_j / rho), the
    row-i0 gap between the differential and its adjoint along e_k - e_l is

        w_{i0,i0} <p, e^{D_{i0}/rho}> (e^{-D_{i0,k}/rho} - e^{-D_{i0,l}/rho}) (1/c - p),

    whose max-norm the numeric evaluation must reproduce.  A vanishing gap
    would contradict nothing; a positive one rules out any potential whose
    Riemannian gradient is the coupled right-hand side.
    """
    d = params.distances
    n, c = d.shape
    if c < 3:
        raise NotApplicableError(f"witness needs c >= 3 labels, got c={c}")
    spread = d.max(axis=1) - d.min(axis=1)
    rows = np.nonzero(spread > 0)[0]
    if rows.size == 0:
        raise NotApplicableError("witness needs a non-constant distance row")
    i0 = int(rows[0])
    k = int(np.argmin(d[i0]))
    l = int(np.argmax(d[i0]))

    alpha0 = 1.0 / (2 * c)
    p = np.full(c, (1.0 - 2 * alpha0) / (c - 2))
    p[k] = alpha0
    p[l] = alpha0

    w_point = exp_map(p, d / params.rho)
    x = np.zeros((n, c))
    x[i0, k] = 1.0
    x[i0, l] = -1.0

    forward = similarity_jacobian_apply(params, w_point, x)
    adjoint = similarity_jacobian_adjoint_apply(params, w_point, x)
    gap = forward[i0] - adjoint[i0]
    norm = float(np.max(np.abs(gap)))

    w_self = float(params.omega.matrix[i0, i0])
    scale = d[i0] / params.rho
    factor = (
        w_self
        * float(np.dot(p, np.exp(scale)))
        * float(np.exp(-scale[k]) - np.exp(-scale[l]))
    )
    closed = abs(factor) * float(np.max(np.abs(1.0 / c - p)))

    return WitnessResult(
        node=i0,
        base_point=w_point,
        direction=x,
        asymmetry=gap,
        asymmetry_norm=norm,
        closed_form_norm=closed,
    )


def _select_rhs(rhs_kind: str):
    if rhs_kind == "assignment":
        return lambda params, m: replicator_map(m, similarity(params, m))
    if rhs_kind == "s_flow":
        return lambda params, m: s_flow_rhs(params.omega, m)
    raise ValueError(f"rhs_kind must be one of {RHS_KINDS}, got {rhs_kind!r}")


def _check_finite(v: Array, t: float) -> None:
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"non-finite right-hand side at t={t:.6g}")


def _step_plan(t0: float, step: float, t_end: float):
    """Full steps of the given size, with one shortened step to land on t_end."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    remaining = t_end - t0
    if remaining <= 1e-15:
        return []
    n_full = int(remaining / step)
    sizes = [step] * n_full
    tail = remaining - n_full * step
    if tail > 1e-12 * max(1.0, abs(t_end)):
        sizes.append(tail)
    return sizes


def integrate_geometric_euler(
    rhs_kind: str,
    params: FlowParams,
    state: FlowState,
    step: float,
    t_end: float,
    record_every: int = 1,
) -> list:
    """Explicit Euler in the simplex geometry: M <- Exp_M(h * rhs(M)).

    Every iterate stays on the assignment manifold by construction.  States
    are recorded at t0, every record_every-th step, and t_end.
    """
    rhs = _select_rhs(rhs_kind)
    m = np.asarray(state.W, dtype=float)
    t = state.t
    out = [FlowState(W=m.copy(), t=t)]
    for idx, h in enumerate(_step_plan(state.t, step, t_end)):
        v = rhs(params, m)
        _check_finite(v, t)
        m = big_exp_map(m, h * v)
        t += h
        if (idx + 1) % record_every == 0:
            out.append(FlowState(W=m.copy(), t=t))
    if out[-1].t < t:
        out.append(FlowState(W=m.copy(), t=t))
    return out


def _rk4_step(rhs, params: FlowParams, m: Array, h: float, t: float) -> Array:
    k1 = rhs(params, m)
    _check_finite(k1, t)
    k2 = rhs(params, clamp_interior(m + 0.5 * h * k1))
    k3 = rhs(params, clamp_interior(m + 0.5 * h * k2))
    k4 = rhs(params, clamp_interior(m + h * k3))
    return clamp_interior(m + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


def integrate_rk4(
    rhs_kind: str,
    params: FlowParams,
    state: FlowState,
    step: float,
    t_end: float,
    record_every: int = 1,
) -> list:
    """Classical RK4 reference integrator with post-step renormalization."""
    rhs = _select_rhs(rhs_kind)
    m = np.asarray(state.W, dtype=float)
    t = state.t
    out = [FlowState(W=m.copy(), t=t)]
    for idx, h in enumerate(_step_plan(state.t, step, t_end)):
        m = _rk4_step(rhs, params, m, h, t)
        t += h
        if (idx + 1) % record_every == 0:
            out.append(FlowState(W=m.copy(), t=t))
    if out[-1].t < t:
        out.append(FlowState(W=m.copy(), t=t))
    return out


def check_flow_equivalence(
    params: FlowParams,
    step: float,
    t_end: float,
    method: str = "rk4",
    sample_every: int = 10,
) -> float:
    """Integrate the coupled and decoupled flows side by side.

    Returns the maximum over sampled times of ||S(W(t)) - Sbar(t)||_inf,
    which vanishes analytically; the numeric value measures integration
    error only.
    """
    n, c = params.shape
    w = barycenter_matrix(n, c)
    sbar = similarity(params, w)
    af_rhs = _select_rhs("assignment")
    sf_rhs = _select_rhs("s_flow")

    deviation = float(np.max(np.abs(similarity(params, w) - sbar)))
    t = 0.0
    sizes = _step_plan(0.0, step, t_end)
    for idx, h in enumerate(sizes):
        if method == "rk4":
            w = _rk4_step(af_rhs, params, w, h, t)
            sbar = _rk4_step(sf_rhs, params, sbar, h, t)
        elif method == "euler":
            w = big_exp_map(w, h * af_rhs(params, w))
            sbar = big_exp_map(sbar, h * sf_rhs(params, sbar))
        else:
            raise ValueError(f"method must be 'rk4' or 'euler', got {method!r}")
        t += h
        if (idx + 1) % sample_every == 0 or idx == len(sizes) - 1:
            deviation = max(
                deviation, float(np.max(np.abs(similarity(params, w) - sbar)))
            )
    return deviation


def mean_entropy(m: Array) -> float:
    """Average Shannon entropy of the rows, in nats."""
    m = np.asarray(m, dtype=float)
    return float(-np.sum(m * np.log(m)) / m.shape[0])


def _trace_row(omega: AveragingOperator, m: Array, t: float) -> FlowTraceRow:
    return FlowTraceRow(
        t=t,
        potential=-0.5 * float(np.sum(m * (omega.matrix @ m))),
        mean_entropy=mean_entropy(m),
        min_entry=float(np.min(m)),
    )


def run_labeling_flow(
    params: FlowParams,
    rhs_kind: str,
    step: float = 0.1,
    t_end: float = 100.0,
    entropy_tol: float = 1e-3,
):
    """Integrate a flow until its rows are nearly integral, tracking summaries.

    Steps the chosen flow by geometric Euler from its standard initial state
    (barycenter rows for the coupled flow, its similarity image for the
    decoupled one) until the mean row entropy drops below entropy_tol nats
    or t_end is reached.  Returns the final matrix and the per-step trace.
    """
    rhs = _select_rhs(rhs_kind)
    n, c = params.shape
    m = barycenter_matrix(n, c)
    if rhs_kind == "s_flow":
        m = similarity(params, m)
    t = 0.0
    rows = [_trace_row(params.omega, m, t)]
    while t < t_end - 1e-12 and rows[-1].mean_entropy >= entropy_tol:
        h = min(step, t_end - t)
        v = rhs(params, m)
        _check_finite(v, t)
        m = big_exp_map(m, h * v)
        t += h
        rows.append(_trace_row(params.omega, m, t))
    return m, rows


def write_trajectory_csv(path, rows) -> None:
    """Write flow trace rows with columns (t, J, mean_entropy, min_entry)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "J", "mean_entropy", "min_entry"])
        for r in rows:
            writer.writerow(
                [repr(float(r.t)), repr(float(r.potential)), repr(float(r.mean_entropy)), repr(float(r.min_entry))]
            )


def save_matrix(path, m: Array) -> None:
    """Binary matrix snapshot: 8-byte header of (n, c) as uint32, then float64 rows."""
    m = np.ascontiguousarray(m, dtype="<f8")
    n, c = m.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", n, c))
        fh.write(m.tobytes(order="C"))


def load_matrix(path) -> Array:
    """Read a matrix written by :func:`save_matrix`."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise ValueError("matrix snapshot shorter than its 8-byte header")
        n, c = struct.unpack("<II", head)
        body = fh.read()
    expected = n * c * 8
    if len(body) != expected:
        raise ValueError(
            f"matrix snapshot payload has {len(body)} bytes, expected {expected}"
        )
    return np.frombuffer(body, dtype="<f8").reshape(n, c).copy()
