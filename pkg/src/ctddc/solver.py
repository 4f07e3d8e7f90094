"""Value-function computation for fixed beliefs.

Implements the Bellman optimality operator of the game, plain value
iteration with a certified contraction stopping rule, the uniform
(discrete-time-style) representation V = U + b * Sigma V induced by
uniformization of the aggregate generator, linear policy evaluation in both
iterative and direct form, a Newton-Kantorovich polyalgorithm, and relative
value iteration anchored at state 0.

Solvers are deterministic and single-threaded; each state's update depends
only on the input vector, so sweeps could be parallelized across states
without changing results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ctmc import uniformize
from .model import EULER_MASCHERONI, CcpProfile, GameSpec, ModelError, assemble_q, expected_shock
from .sparse import CsrMatrix, spmv

__all__ = [
    "SolverError",
    "ConvergenceReport",
    "UniformRepresentation",
    "ContractionBounds",
    "contraction_bounds",
    "bellman_apply",
    "value_iterate",
    "ccp_from_value",
    "uniform_representation",
    "policy_evaluate",
    "newton_kantorovich",
    "relative_value_iterate",
    "relative_bellman_solve",
    "span",
]


class SolverError(RuntimeError):
    """Raised on divergence or non-finite iterates."""


@dataclass
class ConvergenceReport:
    """Per-run convergence record: every solver returns one."""

    method: str
    iterations: int
    final_residual: float
    residuals: list[float] = field(default_factory=list)
    converged: bool = True

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "converged": self.converged,
            "residuals": [float(r) for r in self.residuals],
        }


@dataclass(frozen=True)
class ContractionBounds:
    """Event-rate envelopes and the contraction moduli they imply.

    ``rate_high`` adds the worst-state nature exit rate to the total move
    rate, ``rate_low`` the best-state one.  ``modulus`` =
    rate_high / (rho + rate_high) is a certified sup-norm contraction
    factor for both the optimality operator and policy evaluation;
    ``modulus_loose`` = rate_high / (rho + rate_low) is the looser
    envelope bound, which can exceed one when nature's exit rates vary
    across states.
    """

    rate_high: float
    rate_low: float
    modulus: float
    modulus_loose: float


def contraction_bounds(spec: GameSpec, player: int) -> ContractionBounds:
    exit_rates = spec.nature.exit_rates()
    total_moves = spec.total_move_rate()
    rate_high = total_moves + float(exit_rates.max())
    rate_low = total_moves + float(exit_rates.min())
    rho = float(spec.discount_rates[player])
    return ContractionBounds(
        rate_high=rate_high,
        rate_low=rate_low,
        modulus=rate_high / (rho + rate_high),
        modulus_loose=rate_high / (rho + rate_low),
    )


def _check_player(spec: GameSpec, player: int) -> None:
    if not 0 <= player < spec.n_players:
        raise ModelError(f"player index {player} out of range")


def _beliefs_array(spec: GameSpec, beliefs) -> np.ndarray | None:
    if beliefs is None:
        if spec.n_players > 1:
            raise ModelError("beliefs about rivals are required with more than one player")
        return None
    if isinstance(beliefs, CcpProfile):
        beliefs = beliefs.probs
    beliefs = np.asarray(beliefs, dtype=np.float64)
    if beliefs.shape != (spec.n_players, spec.n_actions, spec.n_states):
        raise ModelError("beliefs must have shape (players, actions, states)")
    return beliefs


def _emax(spec: GameSpec, player: int, v: np.ndarray) -> np.ndarray:
    """Expected maximum of choice utilities under the logit shocks.

    scale * logsumexp((psi + V(next)) / scale) + scale * gamma_EM, with the
    usual max shift for stability.
    """
    if spec.shock.family != "logit":
        raise SolverError("closed-form Emax is implemented for logit shocks only")
    scale = spec.shock.scale
    z = (spec.action_payoffs[player] + v[spec.transitions[player]]) / scale
    zmax = z.max(axis=0)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=0))
    return scale * lse + scale * EULER_MASCHERONI


def bellman_apply(spec: GameSpec, beliefs, player: int, v: np.ndarray) -> np.ndarray:
    """One application of the Bellman optimality operator for ``player``.

    Per state: flow payoff, nature's expected continuation, rivals'
    expected continuation under the beliefs, and the player's own Emax,
    all over the discount-plus-event-rate denominator.
    """
    _check_player(spec, player)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (spec.n_states,):
        raise ModelError(f"value vector has shape {v.shape}, expected ({spec.n_states},)")
    bel = _beliefs_array(spec, beliefs)
    diag0 = spec.nature.diagonal()
    nature_term = spmv(spec.nature.matrix, v) - diag0 * v
    numer = spec.flow_payoffs[player] + nature_term
    for m in range(spec.n_players):
        if m == player:
            continue
        cont = np.einsum("jk,jk->k", bel[m], v[spec.transitions[m]])
        numer += spec.move_rates[m] * cont
    numer += spec.move_rates[player] * _emax(spec, player, v)
    denom = spec.discount_rates[player] - diag0 + spec.total_move_rate()
    out = numer / denom
    if not np.all(np.isfinite(out)):
        raise SolverError("non-finite value update")
    return out


def value_iterate(spec: GameSpec, beliefs, player: int, v0=None,
                  tol: float = 1e-10, max_iter: int = 2_000_000
                  ) -> tuple[np.ndarray, ConvergenceReport]:
    """Iterate the Bellman operator to its fixed point.

    Stops when the successive sup-norm change falls below
    tol * (1 - b) / b with b the certified contraction modulus, which
    bounds the true sup-norm error by tol.  (The looser envelope modulus
    can exceed one and then certifies nothing, so the stopping rule uses
    the sharp one.)
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    _check_player(spec, player)
    v = np.zeros(spec.n_states) if v0 is None else np.asarray(v0, dtype=np.float64).copy()
    modulus = contraction_bounds(spec, player).modulus
    threshold = tol * (1.0 - modulus) / modulus
    residuals: list[float] = []
    for it in range(1, max_iter + 1):
        v_new = bellman_apply(spec, beliefs, player, v)
        diff = float(np.abs(v_new - v).max())
        residuals.append(diff)
        v = v_new
        if diff <= threshold:
            return v, ConvergenceReport("value_iteration", it, diff, residuals)
    return v, ConvergenceReport("value_iteration", max_iter, residuals[-1], residuals,
                                converged=False)


def ccp_from_value(spec: GameSpec, player: int, v: np.ndarray) -> np.ndarray:
    """Best-response choice probabilities at ``v`` (logit shocks).

    Softmax over actions of (psi + V(next)) / scale, max-shifted.
    Returns the (actions, states) slice for the player.
    """
    _check_player(spec, player)
    if spec.shock.family != "logit":
        raise SolverError("closed-form choice probabilities require logit shocks")
    v = np.asarray(v, dtype=np.float64)
    scale = spec.shock.scale
    z = (spec.action_payoffs[player] + v[spec.transitions[player]]) / scale
    z -= z.max(axis=0)
    ez = np.exp(z)
    return ez / ez.sum(axis=0)


def _full_profile(spec: GameSpec, beliefs, player: int, own: np.ndarray) -> CcpProfile:
    bel = _beliefs_array(spec, beliefs)
    if bel is None:
        probs = own[None, :, :].copy()
    else:
        probs = bel.copy()
        probs[player] = own
    return CcpProfile(probs)


@dataclass(frozen=True)
class UniformRepresentation:
    """Linear fixed-point form V = flow_value + discount * Sigma V.

    ``jump_matrix`` is the row-stochastic uniformized transition matrix of
    the aggregate generator at the given choice profile, taken at the
    worst-case event rate ``rate``; ``discount`` = rate / (rho + rate)
    lies strictly inside (0, 1).
    """

    flow_value: np.ndarray
    discount: float
    jump_matrix: CsrMatrix
    rate: float

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.flow_value + self.discount * spmv(self.jump_matrix, v)


def uniform_representation(spec: GameSpec, sigma, player: int) -> UniformRepresentation:
    """Uniform policy representation of the value function at profile ``sigma``.

    The effective flow term folds the expected instantaneous payoff at the
    player's move times (deterministic part plus the conditional shock
    mean) into the flow payoff; the effective transition matrix is the
    uniformized aggregate generator, and the effective discount factor is
    rate / (rho + rate).
    """
    _check_player(spec, player)
    if not isinstance(sigma, CcpProfile):
        sigma = CcpProfile(sigma)
    bounds = contraction_bounds(spec, player)
    rate = bounds.rate_high
    own = sigma.probs[player]
    if spec.shock.family == "logit":
        shock_means = EULER_MASCHERONI - spec.shock.scale * np.log(own)
    else:
        shock_means = np.array([
            [expected_shock(spec.shock, own[j, k], action=j) for k in range(spec.n_states)]
            for j in range(spec.n_actions)
        ])
    c_term = (own * (spec.action_payoffs[player] + shock_means)).sum(axis=0)
    rho = float(spec.discount_rates[player])
    flow_value = (spec.flow_payoffs[player] + spec.move_rates[player] * c_term) / (rho + rate)
    q, _ = assemble_q(spec, sigma)
    chain = uniformize(q, rate)
    return UniformRepresentation(
        flow_value=flow_value,
        discount=rate / (rho + rate),
        jump_matrix=chain.jump_matrix,
        rate=rate,
    )


def _to_scipy(a: CsrMatrix) -> sp.csr_matrix:
    return sp.csr_matrix((a.values, a.col_idx, a.row_ptr), shape=(a.n_rows, a.n_cols))


def policy_evaluate(rep: UniformRepresentation, method: str = "iterative",
                    tol: float = 1e-10, v0=None, max_iter: int = 2_000_000
                    ) -> tuple[np.ndarray, ConvergenceReport]:
    """Fixed point of the linear operator V -> flow_value + discount * Sigma V.

    ``iterative`` sweeps converge geometrically at exactly the discount
    factor; ``direct`` solves the sparse non-symmetric system
    (I - discount * Sigma) V = flow_value.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    beta = rep.discount
    if method == "direct":
        system = sp.eye(len(rep.flow_value), format="csr") - beta * _to_scipy(rep.jump_matrix)
        try:
            v = spla.spsolve(system.tocsc(), rep.flow_value)
        except Exception as exc:  # singular cannot occur for discount < 1
            raise SolverError(f"direct policy evaluation failed: {exc}") from exc
        residual = float(np.abs(v - rep.apply(v)).max())
        return v, ConvergenceReport("policy_direct", 1, residual, [residual])
    if method != "iterative":
        raise ValueError(f"unknown method {method!r}")
    v = np.zeros_like(rep.flow_value) if v0 is None else np.asarray(v0, dtype=np.float64).copy()
    threshold = tol * (1.0 - beta) / beta
    residuals: list[float] = []
    for it in range(1, max_iter + 1):
        v_new = rep.apply(v)
        diff = float(np.abs(v_new - v).max())
        residuals.append(diff)
        v = v_new
        if diff <= threshold:
            return v, ConvergenceReport("policy_iterative", it, diff, residuals)
    return v, ConvergenceReport("policy_iterative", max_iter, residuals[-1], residuals,
                                converged=False)


def newton_kantorovich(spec: GameSpec, beliefs, player: int, v0=None,
                       tol: float = 1e-10, warm_start_sweeps: int = 20,
                       max_steps: int = 50
                       ) -> tuple[np.ndarray, ConvergenceReport]:
    """Newton iteration on the uniform optimality fixed point.

    The operator derivative at V is discount * Sigma evaluated at the
    best-response probabilities of V (the shock-mean terms drop out by the
    envelope property of the logit Emax), so each step solves one sparse
    non-symmetric linear system.  Without ``v0`` the iteration warm-starts
    from ``warm_start_sweeps`` value-iteration sweeps.  ``iterations``
    counts residual evaluations; a residual increasing three times in a
    row aborts with a hint to warm-start longer.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    _check_player(spec, player)
    if v0 is None:
        v = np.zeros(spec.n_states)
        for _ in range(warm_start_sweeps):
            v = bellman_apply(spec, beliefs, player, v)
    else:
        v = np.asarray(v0, dtype=np.float64).copy()
    residuals: list[float] = []
    increases = 0
    for it in range(1, max_steps + 1):
        profile = _full_profile(spec, beliefs, player, ccp_from_value(spec, player, v))
        rep = uniform_representation(spec, profile, player)
        residual_vec = v - rep.apply(v)
        residual = float(np.abs(residual_vec).max())
        residuals.append(residual)
        if not np.isfinite(residual):
            raise SolverError("non-finite Newton residual")
        if residual <= tol:
            return v, ConvergenceReport("newton_kantorovich", it, residual, residuals)
        if len(residuals) >= 2 and residual > residuals[-2]:
            increases += 1
            if increases >= 3:
                raise SolverError(
                    "Newton iteration diverging; rerun with more warm-start sweeps")
        else:
            increases = 0
        system = (sp.eye(spec.n_states, format="csr")
                  - rep.discount * _to_scipy(rep.jump_matrix))
        try:
            step = spla.spsolve(system.tocsc(), residual_vec)
        except Exception as exc:
            raise SolverError(f"Newton linear solve failed: {exc}") from exc
        v = v - step
    return v, ConvergenceReport("newton_kantorovich", max_steps, residuals[-1], residuals,
                                converged=False)


def span(x: np.ndarray) -> float:
    """Span seminorm: max minus min."""
    return float(x.max() - x.min())


def _relative_iterate(apply_fn, discount: float, n_states: int, v0, tol: float,
                      max_iter: int, method: str) -> tuple[np.ndarray, ConvergenceReport]:
    """Relative iteration with the state-0 anchor for an additively
    homogeneous operator A (A(V + a) = A(V) + discount * a).

    Writing W for the anchored iterate and c for the anchor value, the
    level-corrected V = W + c / (1 - discount) satisfies
    ||V - A(V)|| = ||W_next - W||, so the loop's successive change is the
    exact residual of the returned vector.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    w = np.zeros(n_states) if v0 is None else np.asarray(v0, dtype=np.float64).copy()
    w = w - w[0]
    residuals: list[float] = []
    for it in range(1, max_iter + 1):
        aw = apply_fn(w)
        anchor = float(aw[0])
        w_next = aw - anchor
        diff = float(np.abs(w_next - w).max())
        residuals.append(diff)
        if not np.isfinite(diff):
            raise SolverError("non-finite relative iterate")
        if diff <= tol:
            v = w + anchor / (1.0 - discount)
            return v, ConvergenceReport(method, it, diff, residuals)
        w = w_next
    v = w + float(apply_fn(w)[0]) / (1.0 - discount)
    return v, ConvergenceReport(method, max_iter, residuals[-1], residuals, converged=False)


def relative_value_iterate(rep: UniformRepresentation, v0=None, tol: float = 1e-10,
                           max_iter: int = 1_000_000
                           ) -> tuple[np.ndarray, ConvergenceReport]:
    """Relative value iteration on the uniform policy operator.

    Iterates anchored value differences, which contract in the span
    seminorm at the discount factor times the jump matrix's subdominant
    eigenvalue when that chain is ergodic (ergodicity is assumed here,
    not checked); the level is recovered from the anchor-state fixed-point
    equation so the returned vector satisfies V = T(V) within tol.
    """
    return _relative_iterate(rep.apply, rep.discount, len(rep.flow_value), v0, tol,
                             max_iter, "relative_value_iteration")


def relative_bellman_solve(spec: GameSpec, beliefs, player: int, v0=None,
                           tol: float = 1e-10, max_iter: int = 100_000
                           ) -> tuple[np.ndarray, ConvergenceReport]:
    """Relative iteration on the best-response uniform operator.

    Each sweep recomputes the player's best-response probabilities, their
    uniform representation, and one anchored update; the composite
    operator shares the Bellman fixed point and shifts uniformly by the
    discount factor, so the anchored scheme and its residual identity
    apply unchanged.
    """
    _check_player(spec, player)
    bounds = contraction_bounds(spec, player)

    def apply_fn(v):
        profile = _full_profile(spec, beliefs, player, ccp_from_value(spec, player, v))
        return uniform_representation(spec, profile, player).apply(v)

    return _relative_iterate(apply_fn, bounds.modulus, spec.n_states, v0, tol,
                             max_iter, "relative_bellman")
