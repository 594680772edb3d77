"""Small numerical helpers shared by the services."""

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import cho_factor, solve_triangular
from scipy.optimize import lsq_linear

FloatArray = NDArray[np.float64]

# Relative ridge added to dual Hessians before factorization.
RIDGE = 1e-12


def bounded_qp(
    hessian: ArrayLike,
    linear: ArrayLike,
    lower: ArrayLike,
    upper: ArrayLike,
) -> FloatArray:
    """
    Minimize ``0.5 tᵀHt + fᵀt`` subject to ``lower <= t <= upper``.

    ``H`` is symmetric positive semidefinite; a relative ridge makes it definite, after
    which the problem is rewritten as a bounded least-squares problem and solved by
    bounded-variable least squares, which lands exactly on active bounds.

    Args:
        hessian (ArrayLike): The ``m x m`` matrix ``H``.
        linear (ArrayLike): The vector ``f``.
        lower (ArrayLike): Lower bounds (``-inf`` allowed).
        upper (ArrayLike): Upper bounds (``+inf`` allowed).

    Returns:
        FloatArray: The minimizer ``t``.
    """
    H = np.atleast_2d(np.asarray(hessian, dtype=float))
    f = np.asarray(linear, dtype=float).ravel()
    m = f.size
    if m == 0:
        return np.zeros(0)

    scale = max(1.0, float(np.trace(H)) / m)
    H = 0.5 * (H + H.T) + RIDGE * scale * np.eye(m)
    factor, lower_flag = cho_factor(H, lower=True)
    L = np.tril(factor) if lower_flag else np.triu(factor).T
    # 0.5 tᵀLLᵀt + fᵀt = 0.5 ||Lᵀt + L⁻¹f||² + const
    rhs = -solve_triangular(L, f, lower=True)
    result = lsq_linear(
        L.T,
        rhs,
        bounds=(np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)),
        method="bvls",
    )
    return np.asarray(result.x, dtype=float)


def format_number(value: float) -> str:
    """Format a float with 17 significant digits for CSV output."""
    return format(float(value), ".17g")
