"""Closed-form information geometry of the open probability simplex.

Conventions
-----------
A point of the relative interior of the probability simplex is a strictly
positive vector summing to one.  Its tangent space is the set of zero-sum
vectors, the same for every base point.  All functions below act on the
*last* axis of their arguments, so a single point is a length-c vector and
an (n, c) array is treated as n independent rows.  Broadcasting across
leading axes follows the usual NumPy rules, e.g. a single base point can be
paired with a whole matrix of arguments.

Two exponential maps appear.  The lifting map based at p sends an arbitrary
vector v to

    lift_exp(p, v) = p * e^v / <p, e^v>,

which is invariant under shifting v by constants.  Composing with the
replicator operator gives the e-geodesic exponential map

    geo_exp(p, v) = p * e^(v/p) / <p, e^(v/p)>,    v zero-sum,

so that geo_exp(p, v) == lift_exp(p, v / p).  Exponentials are always
evaluated after subtracting the row maximum, which leaves the results
unchanged but avoids overflow.

Maps that produce simplex points clamp their output to entries >= EPS_INTERIOR
and renormalize, keeping downstream logarithms and divisions finite.
"""

from __future__ import annotations

import numpy as np

from .errors import SingularityError

Array = np.ndarray

# Interior floor applied after any map that returns a simplex point.
EPS_INTERIOR = 1e-12

__all__ = [
    "EPS_INTERIOR",
    "barycenter",
    "check_simplex",
    "check_tangent",
    "clamp_interior",
    "project_t0",
    "replicator_map",
    "replicator_inverse_on_t0",
    "exp_map",
    "exp_map_inverse",
    "big_exp_map",
    "big_exp_inverse",
]


def barycenter(c: int) -> Array:
    """Uniform distribution over c categories, the simplex barycenter."""
    if c < 2:
        raise ValueError(f"need at least 2 categories, got c={c}")
    return np.full(c, 1.0 / c)


def clamp_interior(p: Array) -> Array:
    """Push p away from the simplex boundary.

    Entries are floored at EPS_INTERIOR, rows renormalized to unit sum and
    floored once more so the result satisfies both constraints to machine
    accuracy.  Interior rows pass through up to rounding.
    """
    p = np.maximum(p, EPS_INTERIOR)
    p = p / np.sum(p, axis=-1, keepdims=True)
    return np.maximum(p, EPS_INTERIOR)


def check_simplex(p: Array, tol: float = 1e-12) -> None:
    """Raise ValueError unless every row of p is a strictly positive distribution."""
    p = np.asarray(p)
    if p.shape[-1] < 2:
        raise ValueError(f"need at least 2 categories, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("simplex point has non-finite entries")
    if np.min(p) <= 0.0:
        raise ValueError(f"simplex point has non-positive entry {np.min(p)}")
    err = np.max(np.abs(np.sum(p, axis=-1) - 1.0))
    if err > tol:
        raise ValueError(f"row sums deviate from 1 by {err:.3e} (tol {tol:.1e})")


def check_tangent(v: Array, tol: float = 1e-12) -> None:
    """Raise ValueError unless every row of v sums to zero within tol."""
    v = np.asarray(v)
    if not np.all(np.isfinite(v)):
        raise ValueError("tangent vector has non-finite entries")
    err = np.max(np.abs(np.sum(v, axis=-1)))
    if err > tol:
        raise ValueError(f"row sums deviate from 0 by {err:.3e} (tol {tol:.1e})")


def project_t0(x: Array) -> Array:
    """Orthogonal projection onto the zero-sum tangent space.

    Subtracts the row mean, i.e. applies I - (1/c) * ones * ones^T row-wise.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 2:
        raise ValueError(f"need at least 2 categories, got shape {x.shape}")
    return x - np.mean(x, axis=-1, keepdims=True)


def replicator_map(p: Array, x: Array) -> Array:
    """Fisher-Rao metric tensor inverse applied at p: x -> p*x - <p,x>*p.

    Linear in x with kernel spanned by the all-ones vector; the result is
    always zero-sum.  Accepts matched (n, c) arrays row-wise.
    """
    p = np.asarray(p, dtype=float)
    x = np.asarray(x, dtype=float)
    return p * x - np.sum(p * x, axis=-1, keepdims=True) * p


def replicator_inverse_on_t0(q: Array, u: Array) -> Array:
    """Invert the replicator operator at q on the zero-sum subspace.

    For zero-sum u returns the zero-sum v with replicator_map(q, v) == u,
    namely the projection of u / q.  Rows of q too close to the boundary
    make the inversion meaningless and raise SingularityError.
    """
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.min(q) < EPS_INTERIOR:
        raise SingularityError(
            f"entry {np.min(q):.3e} below interior floor {EPS_INTERIOR:.1e}"
        )
    return project_t0(u / q)


def exp_map(p: Array, v: Array) -> Array:
    """Lifting exponential map: p * e^v / <p, e^v>.

    Defined for arbitrary v and invariant under v -> v + const.  The row
    maximum of v is subtracted before exponentiation so large inputs cannot
    overflow.
    """
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    w = v - np.max(v, axis=-1, keepdims=True)
    r = p * np.exp(w)
    r = r / np.sum(r, axis=-1, keepdims=True)
    return clamp_interior(r)


def exp_map_inverse(p: Array, q: Array) -> Array:
    """Inverse of the lifting map: the zero-sum representative of log(q/p)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.min(p) <= 0.0 or np.min(q) <= 0.0:
        raise ValueError("exp_map_inverse needs strictly positive p and q")
    return project_t0(np.log(q / p))


def big_exp_map(p: Array, v: Array) -> Array:
    """Geodesic exponential map of the e-connection, p * e^(v/p) / <p, e^(v/p)>.

    v must be zero-sum (a tangent vector); equals exp_map(p, v / p).
    """
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.min(p) <= 0.0:
        raise ValueError("big_exp_map needs a strictly positive base point")
    w = v / p
    w = w - np.max(w, axis=-1, keepdims=True)
    r = p * np.exp(w)
    r = r / np.sum(r, axis=-1, keepdims=True)
    return clamp_interior(r)


def big_exp_inverse(p: Array, q: Array) -> Array:
    """Inverse geodesic map: replicator at p applied to log(q/p).

    Returns the tangent vector v with big_exp_map(p, v) == q.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.min(p) <= 0.0 or np.min(q) <= 0.0:
        raise ValueError("big_exp_inverse needs strictly positive p and q")
    return replicator_map(p, np.log(q / p))
