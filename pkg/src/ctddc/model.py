"""Dynamic discrete choice games in continuous time.

A :class:`GameSpec` collects the primitives of a game: players with Poisson
move opportunities, a finite linearized state space, deterministic action
consequences, a nature generator for exogenous changes, payoffs, and a
choice-shock specification.  Given a profile of choice probabilities the
aggregate generator is assembled sparsely, with a reusable
:class:`~ctddc.sparse.SparsityPattern` so parameter searches rewrite only
the value array.

Two worked models ship with the package: a single-agent machine renewal
problem (mileage accrues, replacement resets it) and an N-firm entry-exit
game with a stochastic demand level, the latter with myopic logistic choice
probabilities so its generator is a closed-form function of the parameters.

Specs and choice-probability profiles are immutable after construction and
all assembly is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .ctmc import IntensityMatrix, validate_generator
from .sparse import CooMatrix, CsrMatrix, SparsityPattern, coo_to_csr, update_values

__all__ = [
    "EULER_MASCHERONI",
    "ModelError",
    "ShockSpec",
    "GameSpec",
    "CcpProfile",
    "ParameterVector",
    "ParamDerivative",
    "expected_shock",
    "logistic",
    "activity_probability",
    "assemble_q",
    "assemble_q_derivatives",
    "build_renewal",
    "build_entry_exit",
    "myopic_entry_exit_ccp",
    "RenewalFamily",
    "EntryExitFamily",
    "ENTRY_EXIT_PARAMS",
]

EULER_MASCHERONI = 0.5772156649015329

CCP_SUM_TOL = 1e-12

ENTRY_EXIT_PARAMS = ("theta_ec", "theta_rn", "theta_d", "lambda", "gamma")


class ModelError(ValueError):
    """Raised for invalid game primitives or choice probabilities."""


def logistic(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@dataclass(frozen=True)
class ShockSpec:
    """Choice-shock distribution: iid type-1 extreme value by default.

    ``family`` is ``"logit"`` (any number of actions, scale ``scale``) or
    ``"probit"`` (binary only, with 2x2 covariance ``covariance``).
    """

    family: str = "logit"
    scale: float = 1.0
    covariance: tuple[tuple[float, float], tuple[float, float]] | None = None

    def __post_init__(self):
        if self.family not in ("logit", "probit"):
            raise ModelError(f"unknown shock family {self.family!r}")
        if self.family == "logit" and self.scale <= 0.0:
            raise ModelError("logit shock scale must be positive")
        if self.family == "probit" and self.covariance is None:
            object.__setattr__(self, "covariance", ((1.0, 0.0), (0.0, 1.0)))


def expected_shock(shock: ShockSpec, sigma_ijk: float, action: int = 1) -> float:
    """Expected shock value conditional on the action being chosen.

    For logit shocks:  gamma_EM - scale * ln(sigma).  For binary probit
    shocks with covariance Omega, action j:

        (Omega[j,j] - Omega[0,1]) / sqrt(Var(eps1 - eps0)) * phi(PhiInv(sigma)) / sigma.
    """
    if sigma_ijk <= 0.0:
        raise ModelError("choice probability must be positive")
    if shock.family == "logit":
        return EULER_MASCHERONI - shock.scale * math.log(sigma_ijk)
    from scipy.special import ndtri

    omega = np.asarray(shock.covariance, dtype=np.float64)
    var_diff = omega[0, 0] + omega[1, 1] - 2.0 * omega[0, 1]
    if var_diff <= 0.0:
        raise ModelError("probit shock difference must have positive variance")
    if sigma_ijk >= 1.0:
        return 0.0
    z = ndtri(sigma_ijk)
    phi = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return (omega[action, action] - omega[0, 1]) / math.sqrt(var_diff) * phi / sigma_ijk


class GameSpec:
    """Primitives of a continuous-time dynamic discrete choice game.

    Parameters
    ----------
    n_players, n_actions, n_states : int
        Dimensions; action 0 is always costless continuation.
    discount_rates, move_rates : array_like, shape (n_players,)
        Per-player discount and Poisson move-arrival rates, all positive
        and finite.
    nature : IntensityMatrix
        Generator of exogenous state changes, n_states x n_states.
    transitions : array_like of int, shape (n_players, n_actions, n_states)
        ``transitions[i, j, k]`` is the state reached when player i takes
        action j in state k; action 0 maps every state to itself.
    flow_payoffs : array_like, shape (n_players, n_states)
    action_payoffs : array_like, shape (n_players, n_actions, n_states)
        Deterministic instantaneous payoffs; zero for action 0.
    shock : ShockSpec
    continuation_equivalent : iterable of (i, j, k), optional
        Nonzero actions allowed to coincide with continuation in specific
        states (they then contribute no transition); used by the renewal
        model, whose replace action in the lowest state is a no-op.
    """

    def __init__(self, n_players: int, n_actions: int, n_states: int,
                 discount_rates, move_rates, nature: IntensityMatrix,
                 transitions, flow_payoffs, action_payoffs,
                 shock: ShockSpec = ShockSpec(),
                 continuation_equivalent: Iterable[tuple[int, int, int]] = ()):
        self.n_players = int(n_players)
        self.n_actions = int(n_actions)
        self.n_states = int(n_states)
        self.discount_rates = np.asarray(discount_rates, dtype=np.float64)
        self.move_rates = np.asarray(move_rates, dtype=np.float64)
        self.nature = nature
        self.transitions = np.asarray(transitions, dtype=np.int64)
        self.flow_payoffs = np.asarray(flow_payoffs, dtype=np.float64)
        self.action_payoffs = np.asarray(action_payoffs, dtype=np.float64)
        self.shock = shock
        self.continuation_equivalent = frozenset(
            (int(i), int(j), int(k)) for i, j, k in continuation_equivalent
        )
        self._validate()

    def _validate(self) -> None:
        n, j, k = self.n_players, self.n_actions, self.n_states
        if min(n, j, k) < 1:
            raise ModelError("players, actions and states must all be positive")
        if self.discount_rates.shape != (n,) or self.move_rates.shape != (n,):
            raise ModelError("rate vectors must have one entry per player")
        if np.any(self.discount_rates <= 0) or not np.all(np.isfinite(self.discount_rates)):
            raise ModelError("discount rates must be positive and finite")
        if np.any(self.move_rates <= 0) or not np.all(np.isfinite(self.move_rates)):
            raise ModelError("move rates must be positive and finite")
        if self.nature.n_states != k:
            raise ModelError("nature generator size does not match the state space")
        if self.transitions.shape != (n, j, k):
            raise ModelError("transition table must have shape (players, actions, states)")
        if self.transitions.min() < 0 or self.transitions.max() >= k:
            raise ModelError("transition map out of range")
        if self.flow_payoffs.shape != (n, k) or self.action_payoffs.shape != (n, j, k):
            raise ModelError("payoff arrays have wrong shape")
        if not (np.all(np.isfinite(self.flow_payoffs)) and np.all(np.isfinite(self.action_payoffs))):
            raise ModelError("payoffs must be finite")
        states = np.arange(k)
        if np.any(self.transitions[:, 0, :] != states):
            raise ModelError("action 0 must keep the state unchanged")
        if np.any(self.action_payoffs[:, 0, :] != 0.0):
            raise ModelError("action 0 must carry zero payoff")
        for i in range(n):
            for s in range(k):
                dests = self.transitions[i, :, s]
                seen: dict[int, int] = {}
                for a, dest in enumerate(dests):
                    if dest in seen:
                        allowed = (dest == s and (
                            (i, a, s) in self.continuation_equivalent
                            or (i, seen[dest], s) in self.continuation_equivalent))
                        if not allowed:
                            raise ModelError(
                                f"player {i} actions {seen[dest]} and {a} both lead to "
                                f"state {dest} from state {s}"
                            )
                    seen[int(dest)] = a

    def total_move_rate(self) -> float:
        return float(self.move_rates.sum())


class CcpProfile:
    """Conditional choice probabilities sigma[i, j, k], strictly inside (0, 1).

    Full-support shocks put positive probability on every action, so each
    entry is strictly between 0 and 1 and each (player, state) slice sums
    to one.
    """

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise ModelError("choice probabilities must have shape (players, actions, states)")
        if np.any(self.probs <= 0.0):
            raise ModelError("choice probabilities must be strictly positive")
        # Full-support shocks keep every probability interior whenever there
        # is an actual choice; a single-action profile is identically one.
        if self.probs.shape[1] > 1 and np.any(self.probs >= 1.0):
            raise ModelError("choice probabilities must lie strictly inside (0, 1)")
        sums = self.probs.sum(axis=1)
        if np.abs(sums - 1.0).max() > CCP_SUM_TOL:
            raise ModelError("choice probabilities must sum to one over actions")

    @property
    def shape(self):
        return self.probs.shape

    def __getitem__(self, idx):
        return self.probs[idx]


@dataclass
class ParameterVector:
    """Named parameter vector with optional box bounds.

    ``rate_names`` marks parameters that must stay strictly positive
    (event rates); the default bounds used by the estimator are
    [1e-4, 100] for rates and [-10, 10] for everything else.
    """

    names: tuple[str, ...]
    values: np.ndarray
    rate_names: tuple[str, ...] = ()
    bounds: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.names),):
            raise ModelError("one value required per parameter name")
        if not np.all(np.isfinite(self.values)):
            raise ModelError("parameters must be finite")
        for name in self.rate_names:
            if self[name] <= 0.0:
                raise ModelError(f"rate parameter {name!r} must be strictly positive")

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def as_dict(self) -> dict[str, float]:
        return {name: float(v) for name, v in zip(self.names, self.values)}

    def replace(self, values) -> "ParameterVector":
        return ParameterVector(self.names, values, self.rate_names, dict(self.bounds))

    def default_bounds(self) -> list[tuple[float, float]]:
        out = []
        for name in self.names:
            if name in self.bounds:
                out.append(self.bounds[name])
            elif name in self.rate_names:
                out.append((1e-4, 100.0))
            else:
                out.append((-10.0, 10.0))
        return out


def _as_params(theta, names: tuple[str, ...], rate_names: tuple[str, ...]) -> ParameterVector:
    if isinstance(theta, ParameterVector):
        return theta
    if isinstance(theta, Mapping):
        return ParameterVector(names, [theta[n] for n in names], rate_names)
    return ParameterVector(names, np.asarray(theta, dtype=np.float64), rate_names)


# ---------------------------------------------------------------------------
# Aggregate generator assembly
# ---------------------------------------------------------------------------

def _iter_q_entries(spec: GameSpec, sigma: CcpProfile):
    """Yield (label, row, col, value) for every structural entry of Q.

    Per state: nature's off-diagonal rates, one entry per player action
    with a real destination (rate = move rate times choice probability),
    and a single merged diagonal holding minus the row total.  Actions
    that keep the state fixed cancel against their own hazard and
    contribute nothing.
    """
    q0 = spec.nature.matrix
    for k in range(spec.n_states):
        row_total = 0.0
        for slot in range(q0.row_ptr[k], q0.row_ptr[k + 1]):
            col = int(q0.col_idx[slot])
            if col == k:
                continue
            value = float(q0.values[slot])
            row_total += value
            yield ("nature", k, col), k, col, value
        for i in range(spec.n_players):
            for a in range(1, spec.n_actions):
                dest = int(spec.transitions[i, a, k])
                if dest == k:
                    continue
                hazard = float(spec.move_rates[i]) * float(sigma[i, a, k])
                row_total += hazard
                yield ("player", i, a, k), k, dest, hazard
        yield ("diag", k), k, k, -row_total


def assemble_q(spec: GameSpec, sigma: CcpProfile,
               pattern: SparsityPattern | None = None
               ) -> tuple[IntensityMatrix, SparsityPattern]:
    """Aggregate generator Q = Q0 + sum of player generators.

    Player i contributes rate ``move_rate[i] * sigma[i, j, k]`` from state
    k to ``transitions[i, j, k]`` for each nonzero action, and the exit
    hazards accumulate on the diagonal.  With ``pattern`` supplied (from a
    previous assembly of the same topology) only the value array is
    written; the structural arrays are shared untouched.
    """
    if not isinstance(sigma, CcpProfile):
        sigma = CcpProfile(sigma)
    if sigma.shape != (spec.n_players, spec.n_actions, spec.n_states):
        raise ModelError("choice probability shape does not match the game")
    if pattern is None:
        rows, cols, vals, labels = [], [], [], []
        for label, r, c, v in _iter_q_entries(spec, sigma):
            labels.append(label)
            rows.append(r)
            cols.append(c)
            vals.append(v)
        coo = CooMatrix(spec.n_states, spec.n_states, rows, cols, vals)
        pattern = SparsityPattern.from_coo(coo, labels)
        values = pattern.zeros()
        update_values(pattern, values, zip(labels, vals))
    else:
        values = pattern.zeros()
        update_values(pattern, values, ((lbl, v) for lbl, _, _, v in _iter_q_entries(spec, sigma)))
    return validate_generator(pattern.matrix(values)), pattern


@dataclass(frozen=True)
class ParamDerivative:
    """Analytic ingredients of dQ/d(alpha) for one parameter.

    Any of the pieces may be absent:

    * ``dsigma``: d(sigma)/d(alpha), shape (players, actions, states);
    * ``dmove_rates``: d(move rate)/d(alpha) per player;
    * ``dnature``: generator-shaped matrix whose off-diagonal entries are
      d(q0)/d(alpha) on a sub-pattern of nature's.
    """

    dsigma: np.ndarray | None = None
    dmove_rates: np.ndarray | None = None
    dnature: CsrMatrix | None = None


def assemble_q_derivatives(spec: GameSpec, sigma: CcpProfile,
                           parts: Mapping[str, ParamDerivative],
                           pattern: SparsityPattern) -> dict[str, CsrMatrix]:
    """Assemble dQ/d(alpha) on Q's pattern for each named parameter.

    Every entry follows from the product rule on rate * probability, and
    the diagonal takes minus the row total so each derivative matrix has
    zero row sums.  Matrices share the pattern's structural arrays, so
    their pattern is (a zero-padded version of) a subset of Q's.
    """
    if not isinstance(sigma, CcpProfile):
        sigma = CcpProfile(sigma)
    out: dict[str, CsrMatrix] = {}
    for name, part in parts.items():
        values = pattern.zeros()
        assignments = []
        for k in range(spec.n_states):
            row_total = 0.0
            if part.dnature is not None:
                dn = part.dnature
                for slot in range(dn.row_ptr[k], dn.row_ptr[k + 1]):
                    col = int(dn.col_idx[slot])
                    if col == k:
                        continue
                    dv = float(dn.values[slot])
                    row_total += dv
                    assignments.append((("nature", k, col), dv))
            for i in range(spec.n_players):
                for a in range(1, spec.n_actions):
                    dest = int(spec.transitions[i, a, k])
                    if dest == k:
                        continue
                    dh = 0.0
                    if part.dmove_rates is not None:
                        dh += float(part.dmove_rates[i]) * float(sigma[i, a, k])
                    if part.dsigma is not None:
                        dh += float(spec.move_rates[i]) * float(part.dsigma[i, a, k])
                    if dh != 0.0:
                        row_total += dh
                        assignments.append((("player", i, a, k), dh))
            if row_total != 0.0:
                assignments.append((("diag", k), -row_total))
        update_values(pattern, values, assignments)
        out[name] = pattern.matrix(values)
    return out


# ---------------------------------------------------------------------------
# Single-agent renewal model
# ---------------------------------------------------------------------------

def build_renewal(n_states: int, gamma: float, lam: float, beta_cost: float,
                  mu_cost: float, rho: float, sigma_eps: float = 1.0) -> GameSpec:
    """Single-agent renewal problem on a mileage ladder.

    Nature advances mileage one step at rate ``gamma`` (no advance from
    the top state); the agent either continues or replaces, which resets
    the state to the bottom at instantaneous payoff ``-mu_cost``.  Flow
    payoff is ``beta_cost`` (negative) times the 1-based mileage level.
    Replacement in the bottom state coincides with continuation and is
    flagged accordingly rather than rejected.
    """
    if n_states < 2:
        raise ModelError("renewal model needs at least two mileage states")
    for name, value in (("gamma", gamma), ("lam", lam), ("rho", rho)):
        if not (np.isfinite(value) and value > 0.0):
            raise ModelError(f"{name} must be positive and finite")
    if not (np.isfinite(beta_cost) and beta_cost < 0.0):
        raise ModelError("beta_cost must be negative (operating cost per mileage level)")
    if not np.isfinite(mu_cost):
        raise ModelError("mu_cost must be finite")

    ladder = np.arange(n_states - 1)
    nature_coo = CooMatrix(
        n_states, n_states,
        np.concatenate([ladder, ladder, [n_states - 1]]),
        np.concatenate([ladder, ladder + 1, [n_states - 1]]),
        np.concatenate([np.full(n_states - 1, -gamma), np.full(n_states - 1, gamma), [0.0]]),
    )
    nature = validate_generator(coo_to_csr(nature_coo))

    transitions = np.zeros((1, 2, n_states), dtype=np.int64)
    transitions[0, 0] = np.arange(n_states)
    transitions[0, 1] = 0
    flow = beta_cost * (np.arange(n_states) + 1.0)[None, :]
    action_pay = np.zeros((1, 2, n_states))
    action_pay[0, 1] = -mu_cost
    return GameSpec(
        n_players=1, n_actions=2, n_states=n_states,
        discount_rates=[rho], move_rates=[lam], nature=nature,
        transitions=transitions, flow_payoffs=flow, action_payoffs=action_pay,
        shock=ShockSpec("logit", sigma_eps),
        continuation_equivalent=[(0, 1, 0)],
    )


class RenewalFamily:
    """Renewal-model generator family Q(gamma, lambda) at fixed replacement probabilities.

    The replacement probabilities are data for this family (for example a
    solved policy or reduced-form hazards); the free parameters are the
    mileage rate and the move rate, both of which enter the generator
    linearly, so the derivative matrices are parameter-free.
    """

    param_names = ("gamma", "lambda")
    rate_params = ("gamma", "lambda")

    def __init__(self, n_states: int, replace_probs, beta_cost: float = -1.0,
                 mu_cost: float = 5.0, rho: float = 0.05, sigma_eps: float = 1.0):
        self.n_states = int(n_states)
        probs = np.asarray(replace_probs, dtype=np.float64)
        if probs.shape != (self.n_states,):
            raise ModelError("one replacement probability per state required")
        sigma = np.zeros((1, 2, self.n_states))
        sigma[0, 1] = probs
        sigma[0, 0] = 1.0 - probs
        self.sigma = CcpProfile(sigma)
        self.beta_cost = beta_cost
        self.mu_cost = mu_cost
        self.rho = rho
        self.sigma_eps = sigma_eps
        self.pattern: SparsityPattern | None = None

    def params(self, values) -> ParameterVector:
        return _as_params(values, self.param_names, self.rate_params)

    def spec(self, theta) -> GameSpec:
        p = self.params(theta)
        return build_renewal(self.n_states, p["gamma"], p["lambda"],
                             self.beta_cost, self.mu_cost, self.rho, self.sigma_eps)

    def q(self, theta) -> IntensityMatrix:
        q, pattern = assemble_q(self.spec(theta), self.sigma, self.pattern)
        self.pattern = pattern
        return q

    def q_with_derivatives(self, theta) -> tuple[IntensityMatrix, dict[str, CsrMatrix]]:
        spec = self.spec(theta)
        q, pattern = assemble_q(spec, self.sigma, self.pattern)
        self.pattern = pattern
        ladder = np.arange(self.n_states - 1)
        dnature = coo_to_csr(CooMatrix(
            self.n_states, self.n_states,
            np.concatenate([ladder, ladder]),
            np.concatenate([ladder, ladder + 1]),
            np.concatenate([-np.ones(self.n_states - 1), np.ones(self.n_states - 1)]),
        ))
        parts = {
            "gamma": ParamDerivative(dnature=dnature),
            "lambda": ParamDerivative(dmove_rates=np.ones(1)),
        }
        return q, assemble_q_derivatives(spec, self.sigma, parts, pattern)


# ---------------------------------------------------------------------------
# Entry-exit model
# ---------------------------------------------------------------------------

def activity_probability(theta, n_active: int, demand: float) -> float:
    """Logistic probability of being active given rivals and demand.

    ``theta`` carries (theta_ec, theta_rn, theta_d); an inactive firm
    enters with hazard lambda * p and an active firm exits with hazard
    lambda * (1 - p).
    """
    p = _as_params(theta, ENTRY_EXIT_PARAMS, ())
    return logistic(p["theta_ec"] + p["theta_rn"] * n_active + p["theta_d"] * demand)


class _EntryExitTopology:
    """State tables for the entry-exit game: k = bitmask * D + demand."""

    def __init__(self, n_players: int, n_demand: int):
        if n_players < 1 or n_demand < 1:
            raise ModelError("need at least one player and one demand level")
        self.n_players = n_players
        self.n_demand = n_demand
        self.n_states = (1 << n_players) * n_demand
        k = np.arange(self.n_states)
        self.mask = k // n_demand
        self.demand = k % n_demand
        # Demand enters payoffs and choice probabilities as the 1-based level.
        self.demand_level = self.demand + 1.0
        self.active = np.zeros((n_players, self.n_states), dtype=bool)
        for i in range(n_players):
            self.active[i] = (self.mask >> i) & 1 == 1
        self.n_active = self.active.sum(axis=0)
        self.toggle = np.zeros((n_players, self.n_states), dtype=np.int64)
        for i in range(n_players):
            self.toggle[i] = (self.mask ^ (1 << i)) * n_demand + self.demand


def build_entry_exit(n_players: int, n_demand: int, theta,
                     rho: float = 0.05) -> GameSpec:
    """N-firm entry-exit game with a birth-death demand level.

    State k encodes (activity bitmask a, demand d) as k = a * D + d.
    Demand moves one level up or down at rate gamma with reflecting
    boundaries; firm i toggles its activity bit at rate lambda when a move
    opportunity arrives and the toggle is chosen.  Flow payoffs give
    active firms theta_rn * (number of active firms) + theta_d * (1-based
    demand level); entry carries instantaneous payoff theta_ec.
    """
    p = _as_params(theta, ENTRY_EXIT_PARAMS, ("lambda", "gamma"))
    topo = _EntryExitTopology(n_players, n_demand)
    lam, gamma = p["lambda"], p["gamma"]

    rows, cols, vals = [], [], []
    for k in range(topo.n_states):
        d = int(topo.demand[k])
        exit_rate = 0.0
        if d < n_demand - 1:
            rows.append(k)
            cols.append(k + 1)
            vals.append(gamma)
            exit_rate += gamma
        if d > 0:
            rows.append(k)
            cols.append(k - 1)
            vals.append(gamma)
            exit_rate += gamma
        rows.append(k)
        cols.append(k)
        vals.append(-exit_rate)
    nature = validate_generator(coo_to_csr(
        CooMatrix(topo.n_states, topo.n_states, rows, cols, vals)))

    transitions = np.zeros((n_players, 2, topo.n_states), dtype=np.int64)
    transitions[:, 0, :] = np.arange(topo.n_states)
    transitions[:, 1, :] = topo.toggle
    flow = topo.active * (p["theta_rn"] * topo.n_active + p["theta_d"] * topo.demand_level)
    action_pay = np.zeros((n_players, 2, topo.n_states))
    action_pay[:, 1, :] = np.where(topo.active, 0.0, p["theta_ec"])
    return GameSpec(
        n_players=n_players, n_actions=2, n_states=topo.n_states,
        discount_rates=np.full(n_players, rho), move_rates=np.full(n_players, lam),
        nature=nature, transitions=transitions, flow_payoffs=flow,
        action_payoffs=action_pay, shock=ShockSpec("logit", 1.0),
    )


def myopic_entry_exit_ccp(n_players: int, n_demand: int, theta) -> CcpProfile:
    """Choice probabilities of symmetric myopic firms.

    The toggle probability is the activity logit directly (enter with
    probability p when inactive, exit with probability 1 - p when
    active); no value function is solved.
    """
    from scipy.special import expit

    p = _as_params(theta, ENTRY_EXIT_PARAMS, ("lambda", "gamma"))
    topo = _EntryExitTopology(n_players, n_demand)
    index = p["theta_ec"] + p["theta_rn"] * topo.n_active + p["theta_d"] * topo.demand_level
    # Clamp the index so probabilities stay strictly inside (0, 1) in floats
    # even at extreme parameter values visited by an optimizer.
    p_active = expit(np.clip(index, -36.0, 36.0))
    toggle = np.where(topo.active, 1.0 - p_active, p_active)
    sigma = np.zeros((n_players, 2, topo.n_states))
    sigma[:, 1, :] = toggle
    sigma[:, 0, :] = 1.0 - toggle
    return CcpProfile(sigma)


class EntryExitFamily:
    """Entry-exit generator family Q(theta) with analytic derivatives.

    ``theta`` is (theta_ec, theta_rn, theta_d, lambda, gamma); the
    sparsity pattern is built on first use and reused for every later
    parameter value, so re-assembly rewrites the value array only.
    """

    param_names = ENTRY_EXIT_PARAMS
    rate_params = ("lambda", "gamma")

    def __init__(self, n_players: int, n_demand: int, rho: float = 0.05):
        self.n_players = n_players
        self.n_demand = n_demand
        self.rho = rho
        self.topo = _EntryExitTopology(n_players, n_demand)
        self.n_states = self.topo.n_states
        self.pattern: SparsityPattern | None = None
        self._dnature: CsrMatrix | None = None

    def params(self, values) -> ParameterVector:
        return _as_params(values, self.param_names, self.rate_params)

    def spec(self, theta) -> GameSpec:
        return build_entry_exit(self.n_players, self.n_demand, self.params(theta), self.rho)

    def ccp(self, theta) -> CcpProfile:
        return myopic_entry_exit_ccp(self.n_players, self.n_demand, self.params(theta))

    def q(self, theta) -> IntensityMatrix:
        p = self.params(theta)
        q, pattern = assemble_q(self.spec(p), self.ccp(p), self.pattern)
        self.pattern = pattern
        return q

    def _nature_direction(self) -> CsrMatrix:
        # d(nature)/d(gamma): unit rates on the demand moves.
        if self._dnature is None:
            topo = self.topo
            rows, cols, vals = [], [], []
            for k in range(topo.n_states):
                d = int(topo.demand[k])
                n_dir = 0
                if d < self.n_demand - 1:
                    rows.append(k)
                    cols.append(k + 1)
                    vals.append(1.0)
                    n_dir += 1
                if d > 0:
                    rows.append(k)
                    cols.append(k - 1)
                    vals.append(1.0)
                    n_dir += 1
                if n_dir:
                    rows.append(k)
                    cols.append(k)
                    vals.append(-float(n_dir))
            self._dnature = coo_to_csr(
                CooMatrix(topo.n_states, topo.n_states, rows, cols, vals))
        return self._dnature

    def q_with_derivatives(self, theta) -> tuple[IntensityMatrix, dict[str, CsrMatrix]]:
        p = self.params(theta)
        spec = self.spec(p)
        sigma = self.ccp(p)
        q, pattern = assemble_q(spec, sigma, self.pattern)
        self.pattern = pattern

        topo = self.topo
        toggle = sigma.probs[:, 1, :]
        index_slope = {
            "theta_ec": np.ones(topo.n_states),
            "theta_rn": topo.n_active.astype(np.float64),
            "theta_d": topo.demand_level,
        }
        # p_active * (1 - p_active) is symmetric in the toggle direction.
        p_active = np.where(topo.active, 1.0 - toggle, toggle)
        slope = p_active * (1.0 - p_active)
        sign = np.where(topo.active, -1.0, 1.0)

        parts: dict[str, ParamDerivative] = {}
        for name, x in index_slope.items():
            dtoggle = sign * slope * x[None, :]
            dsigma = np.zeros_like(sigma.probs)
            dsigma[:, 1, :] = dtoggle
            dsigma[:, 0, :] = -dtoggle
            parts[name] = ParamDerivative(dsigma=dsigma)
        parts["lambda"] = ParamDerivative(dmove_rates=np.ones(self.n_players))
        parts["gamma"] = ParamDerivative(dnature=self._nature_direction())
        return q, assemble_q_derivatives(spec, sigma, parts, pattern)
