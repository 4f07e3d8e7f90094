"""Continuous-time Markov chain core.

Validates intensity matrices, uniformizes them into a row-stochastic jump
matrix subordinate to a Poisson clock, and evaluates the action of the
transition-matrix exponential on a vector by the truncated uniformization
series, optionally carrying parameter derivatives through the same
recursion.  All operations are pure given immutable inputs.

The series evaluation keeps only K-vectors between iterations; the only
matrices held are the jump matrix and the parameter-derivative matrices.
The truncation guarantee is stated for probability vectors, where every
series term is itself a probability vector; arbitrary vectors are accepted
by linearity but carry no such guarantee.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .sparse import CooMatrix, CsrMatrix, coo_to_csr, csr_to_csc, spmv

__all__ = [
    "GeneratorError",
    "IntensityMatrix",
    "UniformizedChain",
    "TruncationBudget",
    "validate_generator",
    "uniformize",
    "truncation_point",
    "truncation_budget",
    "UniformizedPropagator",
    "expmv",
    "expmvd",
    "dense_expm_oracle",
]

ROW_SUM_TOL = 1e-12

# Past this Poisson rate exp(-rate) underflows toward zero and the raw
# partial sums of the series approach double-precision overflow, so the
# plain series is refused rather than silently degraded.
MAX_SERIES_RATE = 700.0

DENSE_ORACLE_MAX_STATES = 200


class GeneratorError(ValueError):
    """Raised for matrices that are not valid CTMC generators."""


class IntensityMatrix:
    """Validated sparse generator of a finite-state CTMC.

    Off-diagonal entries are nonnegative transition rates, the diagonal
    holds minus the exit rate of each state, and every row sums to zero
    within ``ROW_SUM_TOL``.  Construct through :func:`validate_generator`.
    """

    def __init__(self, matrix: CsrMatrix, _validated: bool = False):
        if not _validated:
            other = validate_generator(matrix)
            matrix = other.matrix
        self.matrix = matrix

    @property
    def n_states(self) -> int:
        return self.matrix.n_rows

    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()

    def exit_rates(self) -> np.ndarray:
        """Rate of leaving each state (nonnegative)."""
        return -self.diagonal()

    def max_exit_rate(self) -> float:
        rates = self.exit_rates()
        return float(rates.max()) if len(rates) else 0.0

    def __repr__(self) -> str:
        return f"IntensityMatrix({self.n_states} states, nnz={self.matrix.nnz})"


def validate_generator(q: CsrMatrix) -> IntensityMatrix:
    """Check generator invariants and wrap the matrix.

    Raises
    ------
    GeneratorError
        If the matrix is not square, an off-diagonal entry is negative, a
        row with off-diagonal mass lacks an explicit diagonal entry, or a
        row sum exceeds the absolute tolerance.
    """
    if q.n_rows != q.n_cols:
        raise GeneratorError(f"generator must be square, got {q.n_rows}x{q.n_cols}")
    rows = q.row_of_slot()
    on_diag = q.col_idx == rows
    off_vals = q.values[~on_diag]
    if off_vals.size and off_vals.min() < 0.0:
        raise GeneratorError("negative off-diagonal transition rate")
    diag_vals = q.values[on_diag]
    if diag_vals.size and diag_vals.max() > 0.0:
        raise GeneratorError("positive diagonal entry")
    off_mass = np.bincount(rows[~on_diag], weights=off_vals, minlength=q.n_rows)
    has_diag = np.zeros(q.n_rows, dtype=bool)
    has_diag[rows[on_diag]] = True
    missing = (off_mass > 0.0) & ~has_diag
    if missing.any():
        raise GeneratorError(
            f"row {int(np.nonzero(missing)[0][0])} has transition rates but no diagonal entry"
        )
    sums = q.row_sums()
    if sums.size and np.abs(sums).max() > ROW_SUM_TOL:
        worst = int(np.abs(sums).argmax())
        raise GeneratorError(f"row {worst} sums to {sums[worst]:.3e}, expected 0")
    return IntensityMatrix(q, _validated=True)


@dataclass(frozen=True)
class UniformizedChain:
    """Jump chain of a uniformized CTMC.

    ``jump_matrix`` is the row-stochastic matrix I + Q/rate whose pattern is
    the generator's pattern plus a full diagonal.  ``horizon_rate`` is
    rate*delta once a time horizon has been bound, else ``None``.
    """

    rate: float
    jump_matrix: CsrMatrix
    horizon_rate: float | None = None


def uniformize(q: IntensityMatrix, rate: float | None = None) -> UniformizedChain:
    """Turn a generator into a jump chain driven by a Poisson clock.

    Parameters
    ----------
    q : IntensityMatrix
        Validated generator.
    rate : float, optional
        Uniform event rate; must be at least the largest exit rate.  When
        omitted it is set to the largest exit rate plus a relative pad of
        1e-8 * max(1, largest exit rate), which keeps the jump matrix
        diagonal away from exact zero without distorting the chain.
    """
    max_exit = q.max_exit_rate()
    if rate is None:
        rate = max_exit + 1e-8 * max(1.0, max_exit)
    rate = float(rate)
    if rate < max_exit:
        raise GeneratorError(f"uniform rate {rate} below largest exit rate {max_exit}")
    if rate <= 0.0:
        raise GeneratorError("uniform rate must be positive")

    m = q.matrix
    rows = m.row_of_slot()
    on_diag = m.col_idx == rows
    values = m.values / rate
    values[on_diag] += 1.0
    has_diag = np.zeros(m.n_rows, dtype=bool)
    has_diag[rows[on_diag]] = True
    if has_diag.all():
        sigma = m.with_values(values)
    else:
        add = np.nonzero(~has_diag)[0]
        coo = CooMatrix(
            m.n_rows, m.n_cols,
            np.concatenate([rows, add]),
            np.concatenate([m.col_idx, add]),
            np.concatenate([values, np.ones(len(add))]),
        )
        sigma = coo_to_csr(coo)
    return UniformizedChain(rate=rate, jump_matrix=sigma)


@dataclass(frozen=True)
class TruncationBudget:
    """Poisson tail truncation: smallest term count leaving mass below tolerance."""

    tolerance: float
    n_terms: int


def truncation_point(rate: float, eps: float) -> int:
    """Smallest integer J with Poisson upper-tail mass beyond J below eps.

    Computed by direct summation of the Poisson pmf by its upward
    recurrence term_j = term_{j-1} * rate / j from term_0 = exp(-rate),
    with compensated accumulation; no statistics library is involved.
    The multiplicative recurrence keeps every term at its own scale, so
    the summed cdf is accurate to a few parts in 1e14 over the admissible
    rate range.  Monotone nondecreasing in ``rate`` and in ``-log(eps)``.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must be in (0, 1), got {eps}")
    if rate < 0.0:
        raise ValueError(f"rate must be nonnegative, got {rate}")
    if rate == 0.0:
        return 0
    if rate > MAX_SERIES_RATE:
        raise GeneratorError(
            f"Poisson rate {rate} exceeds {MAX_SERIES_RATE}; the plain series "
            "underflows exp(-rate) in double precision"
        )
    j = 0
    term = math.exp(-rate)
    total = term
    comp = 0.0  # Kahan compensation; the running cdf estimate is total - comp
    limit = int(rate + 40.0 * math.sqrt(rate) + 200.0)
    while 1.0 - (total - comp) >= eps:
        j += 1
        if j > limit:
            raise GeneratorError("Poisson tail summation failed to converge")
        term *= rate / j
        y = term - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return j


def truncation_budget(rate: float, eps: float) -> TruncationBudget:
    return TruncationBudget(tolerance=eps, n_terms=truncation_point(rate, eps))


class UniformizedPropagator:
    """Action of exp(delta * Q) prepared for repeated application.

    Uniformizes once, fixes the truncation point for the requested
    tolerance, and then maps vectors (and optionally parameter
    derivatives) through the truncated series.  Reusing one propagator
    across many vectors shares the jump matrix and truncation setup, which
    is how the likelihood evaluates many destination columns cheaply.
    """

    def __init__(self, q: IntensityMatrix, delta: float, eps: float = 1e-12,
                 rate: float | None = None):
        if delta < 0.0:
            raise ValueError(f"delta must be nonnegative, got {delta}")
        if not 0.0 < eps < 1.0:
            raise ValueError(f"eps must be in (0, 1), got {eps}")
        self.delta = float(delta)
        self.eps = float(eps)
        chain = uniformize(q, rate)
        horizon_rate = chain.rate * self.delta
        self.chain = UniformizedChain(chain.rate, chain.jump_matrix, horizon_rate)
        self.n_terms = truncation_point(horizon_rate, eps)
        self.n_states = q.n_states
        self._jump_transpose: CsrMatrix | None = None

    def _transposed_jump(self) -> CsrMatrix:
        if self._jump_transpose is None:
            self._jump_transpose = csr_to_csc(self.chain.jump_matrix)
        return self._jump_transpose

    def distribution_action(self, v: np.ndarray) -> np.ndarray:
        """Distribution after the horizon, starting from distribution ``v``.

        The transpose action exp(delta Q)' v: every series term is itself
        a probability vector when ``v`` is one, which is what turns the
        Poisson tail bound into an L1 error bound.
        """
        mu, _ = self.distribution_action_with_derivatives(v, ())
        return mu

    def distribution_action_with_derivatives(
        self, v: np.ndarray, dq_list: Sequence[CsrMatrix]
    ) -> tuple[np.ndarray, list[np.ndarray]]:
        """Distribution evolution together with its parameter derivatives.

        ``dq_list`` holds one generator derivative dQ/d(alpha) per
        parameter, each with zero row sums on a sub-pattern of Q.  The
        main vector stream is shared across all parameters and follows
        exactly the same arithmetic path as :meth:`distribution_action`,
        so the first return value is bit-for-bit identical between the
        two entry points.
        """
        self._check_derivative_matrices(dq_list)
        return self._series(self._transposed_jump(), [csr_to_csc(dq) for dq in dq_list], v)

    def matrix_action(self, v: np.ndarray) -> np.ndarray:
        """Literal product exp(delta Q) v.

        Fed a basis vector this returns one column of the transition
        matrix, the form the snapshot likelihood consumes.  Entries carry
        the series tolerance individually; the column as a whole is not a
        probability vector.
        """
        mu, _ = self._series(self.chain.jump_matrix, (), v)
        return mu

    def matrix_action_with_derivatives(
        self, v: np.ndarray, dq_list: Sequence[CsrMatrix]
    ) -> tuple[np.ndarray, list[np.ndarray]]:
        """exp(delta Q) v and d/d(alpha)[exp(delta Q)] v per parameter."""
        self._check_derivative_matrices(dq_list)
        return self._series(self.chain.jump_matrix, dq_list, v)

    def _check_derivative_matrices(self, dq_list: Sequence[CsrMatrix]) -> None:
        for dq in dq_list:
            if dq.n_rows != self.n_states or dq.n_cols != self.n_states:
                raise GeneratorError("derivative matrix shape does not match generator")
            row_sums = dq.row_sums()
            if row_sums.size and np.abs(row_sums).max() > ROW_SUM_TOL:
                raise GeneratorError("derivative matrix rows must sum to zero")

    def _series(self, sigma: CsrMatrix, dq_list: Sequence[CsrMatrix], v: np.ndarray
                ) -> tuple[np.ndarray, list[np.ndarray]]:
        """Shared series kernel for both directions.

        With nu_0 = v and d_0 = 0 (the zeroth series term does not depend
        on the parameters), each term advances as

            nu_j = (r / j) * Sigma nu_{j-1}
            d_j  = (delta * dQ nu_{j-1} + r * Sigma d_{j-1}) / j

        with r the Poisson rate over the horizon; the results are the
        exp(-r)-weighted sums of the streams.  Only K-vectors are carried
        between iterations, and each iteration costs one jump-matrix
        product for the main stream plus two products per parameter.
        """
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_states,):
            raise ValueError(f"vector has shape {v.shape}, expected ({self.n_states},)")
        r = self.chain.horizon_rate
        n_params = len(dq_list)
        nu = v.copy()
        mu = v.copy()
        deltas = [np.zeros(self.n_states) for _ in range(n_params)]
        mu_alpha = [np.zeros(self.n_states) for _ in range(n_params)]
        for j in range(1, self.n_terms + 1):
            # The derivative recursion consumes the previous term of the
            # main stream, so it advances first.
            for p in range(n_params):
                deltas[p] = (self.delta * spmv(dq_list[p], nu) + r * spmv(sigma, deltas[p])) / j
                mu_alpha[p] += deltas[p]
            nu = spmv(sigma, nu)
            nu *= r / j
            mu += nu
        weight = math.exp(-r)
        mu *= weight
        for p in range(n_params):
            mu_alpha[p] *= weight
        return mu, mu_alpha


def expmv(q: IntensityMatrix, delta: float, v: np.ndarray, eps: float = 1e-12,
          rate: float | None = None) -> np.ndarray:
    """Evolve a distribution ``v`` through the chain for time ``delta``.

    Returns the transpose action exp(delta Q)' v, the direction in which
    probability mass flows forward: for a probability vector ``v`` the
    result is entrywise nonnegative with L1 mass within ``eps`` of one.
    Arbitrary vectors are accepted by linearity without that guarantee.
    Columns of the transition matrix itself come from
    :meth:`UniformizedPropagator.matrix_action`.
    """
    return UniformizedPropagator(q, delta, eps, rate).distribution_action(v)


def expmvd(q: IntensityMatrix, dq_list: Sequence[CsrMatrix], delta: float,
           v: np.ndarray, eps: float = 1e-12, rate: float | None = None
           ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Distribution evolution and its derivative per parameter.

    The evolved vector is bit-for-bit identical to :func:`expmv`'s output;
    the derivative stream reuses the shared main stream across parameters.
    """
    prop = UniformizedPropagator(q, delta, eps, rate)
    return prop.distribution_action_with_derivatives(v, dq_list)


def dense_expm_oracle(q: IntensityMatrix, delta: float) -> np.ndarray:
    """Dense transition matrix by scaling and truncated Taylor summation.

    Test oracle only: refuses more than ``DENSE_ORACLE_MAX_STATES`` states.
    Kept independent of the uniformization path (dense arithmetic, matrix
    powers, no Poisson truncation).
    """
    if q.n_states > DENSE_ORACLE_MAX_STATES:
        raise GeneratorError(
            f"dense oracle limited to {DENSE_ORACLE_MAX_STATES} states, got {q.n_states}"
        )
    a = delta * q.matrix.to_dense()
    norm = np.abs(a).sum(axis=1).max() if a.size else 0.0
    squarings = max(0, int(math.ceil(math.log2(norm))) + 1) if norm > 0.5 else 0
    a /= 2.0 ** squarings
    result = np.eye(q.n_states)
    term = np.eye(q.n_states)
    for j in range(1, 60):
        term = term @ a / j
        result += term
        if np.abs(term).max() < 1e-20:
            break
    for _ in range(squarings):
        result = result @ result
    return result
