"""Snapshot-data estimation: simulation, likelihood, MLE, Monte Carlo.

Markets are observed at a fixed spacing with transition times unobserved,
so the log likelihood sums observed transition counts against log entries
of the interval transition matrix, evaluated column by column through the
uniformized series; the analytic gradient rides the same series via the
joint derivative recursion, sharing the main vector stream across
parameters and across the likelihood's destination columns.

Replications of the Monte Carlo harness are independent, each drawing its
random stream deterministically from (seed, replication index), so they can
run in parallel without changing any number; aggregation is performed in
replication order.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import minimize

from .ctmc import IntensityMatrix, UniformizedPropagator
from .model import EntryExitFamily

__all__ = [
    "DataFormatError",
    "SnapshotDataset",
    "TransitionCounts",
    "EstimationResult",
    "McConfig",
    "McSummary",
    "simulate_trajectory",
    "sample_snapshots",
    "count_transitions",
    "log_likelihood",
    "log_likelihood_gradient",
    "fit_mle",
    "run_monte_carlo",
]

# Floor applied to transition probabilities before taking logs; a positive
# count hitting the floor signals misspecification and raises a warning.
PROB_FLOOR = 1e-300


class DataFormatError(ValueError):
    """Raised for malformed snapshot datasets."""


class SnapshotDataset:
    """Panel of state indices observed at spacing ``delta``.

    ``markets`` holds one integer state sequence per market; every market
    needs at least two snapshots (one observed transition).
    """

    def __init__(self, delta: float, markets):
        if delta <= 0.0:
            raise DataFormatError("snapshot spacing must be positive")
        self.delta = float(delta)
        self.markets = [np.asarray(m, dtype=np.int64) for m in markets]
        for m in self.markets:
            if m.ndim != 1 or len(m) < 2:
                raise DataFormatError("every market needs at least two snapshots")
            if m.min() < 0:
                raise DataFormatError("state indices must be nonnegative")

    @property
    def n_markets(self) -> int:
        return len(self.markets)

    def n_transitions(self) -> int:
        return sum(len(m) - 1 for m in self.markets)

    def to_csv(self, path) -> None:
        """Write as ``market_id,obs_index,state_index`` sorted rows."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["market_id", "obs_index", "state_index"])
            for market_id, states in enumerate(self.markets):
                for obs_index, state in enumerate(states):
                    writer.writerow([market_id, obs_index, int(state)])

    @classmethod
    def from_csv(cls, path, delta: float) -> "SnapshotDataset":
        try:
            fh = open(path, newline="")
        except OSError as exc:
            raise DataFormatError(f"cannot read dataset {path}: {exc}") from exc
        with fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["market_id", "obs_index", "state_index"]:
                raise DataFormatError(
                    "expected header market_id,obs_index,state_index")
            markets: dict[int, list[int]] = {}
            previous = None
            for row in reader:
                if len(row) != 3:
                    raise DataFormatError(f"malformed row: {row!r}")
                try:
                    market_id, obs_index, state = int(row[0]), int(row[1]), int(row[2])
                except ValueError as exc:
                    raise DataFormatError(f"non-integer field in row {row!r}") from exc
                key = (market_id, obs_index)
                if previous is not None and key <= previous:
                    raise DataFormatError("rows must be sorted by (market_id, obs_index)")
                previous = key
                markets.setdefault(market_id, [])
                if obs_index != len(markets[market_id]):
                    raise DataFormatError(
                        f"market {market_id} observation indices must be contiguous")
                markets[market_id].append(state)
        if not markets:
            raise DataFormatError("dataset is empty")
        return cls(delta, [markets[k] for k in sorted(markets)])


class TransitionCounts:
    """Aggregated transition counts d[k, l] over all adjacent snapshot pairs."""

    def __init__(self, n_states: int, sources, destinations, counts):
        self.n_states = int(n_states)
        self.sources = np.asarray(sources, dtype=np.int64)
        self.destinations = np.asarray(destinations, dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if not (len(self.sources) == len(self.destinations) == len(self.counts)):
            raise DataFormatError("count arrays must have equal length")
        self.total = int(self.counts.sum())

    def positive_columns(self) -> np.ndarray:
        """Destination states that actually occur, sorted."""
        return np.unique(self.destinations)

    def column(self, destination: int) -> tuple[np.ndarray, np.ndarray]:
        """(source states, counts) of transitions into ``destination``."""
        mask = self.destinations == destination
        return self.sources[mask], self.counts[mask]

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_states, self.n_states), dtype=np.int64)
        dense[self.sources, self.destinations] = self.counts
        return dense


def count_transitions(ds: SnapshotDataset, n_states: int) -> TransitionCounts:
    """Count observed transitions between adjacent snapshots."""
    pairs = []
    for m in ds.markets:
        if m.max() >= n_states:
            raise DataFormatError("state index out of range for the model")
        pairs.append(m[:-1] * n_states + m[1:])
    flat, counts = np.unique(np.concatenate(pairs), return_counts=True)
    return TransitionCounts(n_states, flat // n_states, flat % n_states, counts)


def simulate_trajectory(q: IntensityMatrix, k0: int, horizon: float, rng
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Simulate one event path of the chain over [0, horizon].

    Returns (event times, states) with the initial state at time zero.
    Holding times are exponential at the state's exit rate; the next state
    is drawn proportional to the outgoing rates.  An absorbing state holds
    forever, ending the path.
    """
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    if not 0 <= k0 < q.n_states:
        raise ValueError("initial state out of range")
    m = q.matrix
    times = [0.0]
    states = [int(k0)]
    t = 0.0
    k = int(k0)
    while True:
        lo, hi = m.row_ptr[k], m.row_ptr[k + 1]
        cols = m.col_idx[lo:hi]
        rates = m.values[lo:hi]
        off = cols != k
        cols = cols[off]
        rates = rates[off]
        cum = np.cumsum(rates)
        total = cum[-1] if len(cum) else 0.0
        if total <= 0.0:
            break  # absorbing
        t += rng.exponential(1.0 / total)
        if t > horizon:
            break
        idx = min(np.searchsorted(cum, rng.uniform(0.0, total), side="right"),
                  len(cols) - 1)
        k = int(cols[idx])
        times.append(t)
        states.append(k)
    return np.array(times), np.array(states, dtype=np.int64)


def sample_snapshots(path: tuple[np.ndarray, np.ndarray], delta: float,
                     n_snapshots: int, horizon: float | None = None) -> np.ndarray:
    """States at times 0, delta, ..., (n_snapshots - 1) * delta.

    The path is right-continuous: a jump exactly at a sample time reports
    the post-jump state.  With ``horizon`` given (the span the trajectory
    was simulated over) sampling past it is an error.
    """
    times, states = path
    if n_snapshots < 1:
        raise ValueError("need at least one snapshot")
    sample_times = delta * np.arange(n_snapshots)
    if horizon is not None and sample_times[-1] > horizon:
        raise ValueError("trajectory horizon too short for the requested snapshots")
    idx = np.searchsorted(times, sample_times, side="right") - 1
    if idx.min() < 0:
        raise ValueError("trajectory does not cover time zero")
    return states[idx]


@dataclass
class EstimationResult:
    """Outcome of one maximum-likelihood fit."""

    param_names: tuple[str, ...]
    theta_hat: np.ndarray
    loglik: float
    n_func_evals: int
    wall_time: float
    converged: bool
    gradient_mode: str
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "param_names": list(self.param_names),
            "theta_hat": [float(x) for x in self.theta_hat],
            "loglik": float(self.loglik),
            "n_func_evals": self.n_func_evals,
            "wall_time": self.wall_time,
            "converged": self.converged,
            "gradient_mode": self.gradient_mode,
            "message": self.message,
        }


def _floored_log_probs(column: np.ndarray, sources: np.ndarray) -> np.ndarray:
    p = column[sources]
    if np.any(p < PROB_FLOOR):
        warnings.warn(
            "observed transition has near-zero model probability; "
            "the model is likely misspecified for these data",
            RuntimeWarning, stacklevel=3)
    return np.log(np.maximum(p, PROB_FLOOR))


def log_likelihood(theta, family, counts: TransitionCounts, delta: float,
                   eps: float = 1e-12) -> float:
    """Snapshot log likelihood: sum of counts times log transition probabilities.

    Builds the generator at ``theta`` through the family (reusing its
    sparsity pattern) and evaluates one transition-matrix column per
    destination state with positive counts; columns share one uniformized
    propagator.
    """
    q = family.q(theta)
    prop = UniformizedPropagator(q, delta, eps)
    total = 0.0
    for dest in counts.positive_columns():
        sources, d = counts.column(int(dest))
        basis = np.zeros(q.n_states)
        basis[dest] = 1.0
        column = prop.matrix_action(basis)
        total += float(d @ _floored_log_probs(column, sources))
    return total


def log_likelihood_gradient(theta, family, counts: TransitionCounts, delta: float,
                            eps: float = 1e-12) -> np.ndarray:
    """Analytic likelihood gradient via the joint series recursion."""
    _, grad = _log_likelihood_with_gradient(theta, family, counts, delta, eps)
    return grad


def _log_likelihood_with_gradient(theta, family, counts: TransitionCounts,
                                  delta: float, eps: float
                                  ) -> tuple[float, np.ndarray]:
    q, dq = family.q_with_derivatives(theta)
    dq_list = [dq[name] for name in family.param_names]
    prop = UniformizedPropagator(q, delta, eps)
    total = 0.0
    grad = np.zeros(len(dq_list))
    for dest in counts.positive_columns():
        sources, d = counts.column(int(dest))
        basis = np.zeros(q.n_states)
        basis[dest] = 1.0
        column, dcolumns = prop.matrix_action_with_derivatives(basis, dq_list)
        total += float(d @ _floored_log_probs(column, sources))
        weights = d / np.maximum(column[sources], PROB_FLOOR)
        for p, dcol in enumerate(dcolumns):
            grad[p] += float(weights @ dcol[sources])
    return total, grad


def _numeric_gradient(fun, theta: np.ndarray) -> np.ndarray:
    """Central differences with the customary cube-root-epsilon step."""
    h = np.cbrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(theta))
    grad = np.empty_like(theta)
    for i in range(len(theta)):
        up = theta.copy()
        dn = theta.copy()
        up[i] += h[i]
        dn[i] -= h[i]
        grad[i] = (fun(up) - fun(dn)) / (2.0 * h[i])
    return grad


def fit_mle(ds: SnapshotDataset, family, theta0, *, gradient: str = "analytic",
            tol: float = 1e-6, bounds=None, eps: float = 1e-12,
            counts: TransitionCounts | None = None) -> EstimationResult:
    """Maximize the snapshot log likelihood with bounded quasi-Newton steps.

    ``gradient`` selects the analytic Jacobian (joint series recursion) or
    central-difference numerics; every log-likelihood evaluation is
    counted, including those consumed by numeric differentiation.  The
    result is deterministic given (data, theta0, options).
    """
    if gradient not in ("analytic", "numeric"):
        raise ValueError("gradient must be 'analytic' or 'numeric'")
    theta0 = family.params(theta0)
    if bounds is None:
        bounds = theta0.default_bounds()
    if counts is None:
        counts = count_transitions(ds, family.n_states)
    evals = [0]

    def negative_loglik(values):
        evals[0] += 1
        theta = family.params(values)
        return -log_likelihood(theta, family, counts, ds.delta, eps)

    start = time.perf_counter()
    if gradient == "analytic":
        def fun(values):
            evals[0] += 1
            theta = family.params(values)
            ll, grad = _log_likelihood_with_gradient(theta, family, counts, ds.delta, eps)
            return -ll, -grad

        result = minimize(fun, theta0.values, jac=True, method="L-BFGS-B",
                          bounds=bounds, options={"gtol": tol, "ftol": 1e-15})
    else:
        result = minimize(negative_loglik, theta0.values,
                          jac=lambda v: _numeric_gradient(negative_loglik, v),
                          method="L-BFGS-B", bounds=bounds,
                          options={"gtol": tol, "ftol": 1e-15})
    wall = time.perf_counter() - start
    return EstimationResult(
        param_names=tuple(family.param_names),
        theta_hat=np.asarray(result.x, dtype=np.float64),
        loglik=-float(result.fun),
        n_func_evals=evals[0],
        wall_time=wall,
        converged=bool(result.success),
        gradient_mode=gradient,
        message=str(result.message),
    )


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo experiment configuration for the entry-exit model."""

    n_players: int
    n_demand: int
    n_obs: int
    n_reps: int
    delta: float = 1.0
    theta_true: tuple[float, ...] = (-0.5, -0.05, 0.1, 1.0, 0.3)
    seed: int = 0
    gradient_mode: str = "analytic"
    burn_in_periods: float = 100.0
    expm_tol: float = 1e-12
    optimizer_tol: float = 1e-6
    n_jobs: int = 1


@dataclass
class McSummary:
    """Replication-level estimates and the usual summary statistics.

    ``estimates`` has one row per successful replication; timing and
    function-evaluation arrays align with it.  The summary statistics use
    the sample standard deviation, so RMSE^2 equals SD^2 (n-1)/n plus the
    squared mean bias.
    """

    param_names: tuple[str, ...]
    theta_true: np.ndarray
    estimates: np.ndarray
    wall_times: np.ndarray
    func_evals: np.ndarray
    n_reps: int
    failures: list[tuple[int, str]] = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        return self.estimates.mean(axis=0)

    @property
    def median(self) -> np.ndarray:
        return np.median(self.estimates, axis=0)

    @property
    def sd(self) -> np.ndarray:
        return self.estimates.std(axis=0, ddof=1)

    @property
    def rmse(self) -> np.ndarray:
        return np.sqrt(((self.estimates - self.theta_true) ** 2).mean(axis=0))

    @property
    def mean_bias(self) -> np.ndarray:
        return self.mean - self.theta_true

    @property
    def median_bias(self) -> np.ndarray:
        return self.median - self.theta_true

    def table_rows(self) -> list[dict]:
        rows = []
        for i, name in enumerate(self.param_names):
            rows.append({
                "parameter": name,
                "true_value": float(self.theta_true[i]),
                "mean": float(self.mean[i]),
                "median": float(self.median[i]),
                "sd": float(self.sd[i]),
                "rmse": float(self.rmse[i]),
                "mean_bias": float(self.mean_bias[i]),
                "median_bias": float(self.median_bias[i]),
            })
        return rows

    def to_csv_text(self) -> str:
        lines = ["parameter,true_value,mean,median,sd,rmse,mean_bias,median_bias"]
        for row in self.table_rows():
            lines.append(
                f"{row['parameter']},{row['true_value']:.6f},{row['mean']:.6f},"
                f"{row['median']:.6f},{row['sd']:.6f},{row['rmse']:.6f},"
                f"{row['mean_bias']:.6f},{row['median_bias']:.6f}")
        for label, arr in (("time_s", self.wall_times), ("func_evals", self.func_evals)):
            lines.append(
                f"{label},,{arr.mean():.6f},{np.median(arr):.6f},"
                f"{arr.std(ddof=1) if len(arr) > 1 else 0.0:.6f},,,")
        return "\n".join(lines) + "\n"

    def to_table_text(self) -> str:
        header = (f"{'Parameter':<12}{'True Value':>12}{'Mean':>10}{'Median':>10}"
                  f"{'S.D.':>10}{'RMSE':>10}{'Mean Bias':>12}{'Median Bias':>13}")
        rule = "-" * len(header)
        lines = [rule, header, rule]
        for row in self.table_rows():
            lines.append(
                f"{row['parameter']:<12}{row['true_value']:>12.3f}{row['mean']:>10.3f}"
                f"{row['median']:>10.3f}{row['sd']:>10.3f}{row['rmse']:>10.3f}"
                f"{row['mean_bias']:>12.3f}{row['median_bias']:>13.3f}")
        lines.append(rule)
        for label, arr in (("Time (s)", self.wall_times), ("Func. Eval.", self.func_evals)):
            sd = arr.std(ddof=1) if len(arr) > 1 else 0.0
            lines.append(f"{label:<12}{'':>12}{arr.mean():>10.3f}"
                         f"{np.median(arr):>10.3f}{sd:>10.3f}")
        lines.append(rule)
        lines.append(f"Replications: {self.n_reps}"
                     + (f"  (failed: {len(self.failures)})" if self.failures else ""))
        return "\n".join(lines) + "\n"


def simulate_entry_exit_dataset(config: McConfig, rep: int) -> SnapshotDataset:
    """One market panel from the true process, deterministic in (seed, rep).

    A burn-in of ``burn_in_periods`` spacings starting from the empty
    market draws the initial state; the panel then holds n_obs + 1
    snapshots (n_obs observed transitions).
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, rep]))
    family = EntryExitFamily(config.n_players, config.n_demand)
    q = family.q(np.asarray(config.theta_true))
    burn_horizon = config.burn_in_periods * config.delta
    burn_path = simulate_trajectory(q, 0, burn_horizon, rng)
    k0 = int(sample_snapshots(burn_path, burn_horizon, 2, horizon=burn_horizon)[-1])
    horizon = config.n_obs * config.delta
    path = simulate_trajectory(q, k0, horizon, rng)
    states = sample_snapshots(path, config.delta, config.n_obs + 1, horizon=horizon)
    return SnapshotDataset(config.delta, [states])


def _run_replication(config: McConfig, rep: int) -> EstimationResult:
    ds = simulate_entry_exit_dataset(config, rep)
    family = EntryExitFamily(config.n_players, config.n_demand)
    counts = count_transitions(ds, family.n_states)
    return fit_mle(ds, family, np.asarray(config.theta_true),
                   gradient=config.gradient_mode, tol=config.optimizer_tol,
                   eps=config.expm_tol, counts=counts)


def run_monte_carlo(config: McConfig) -> McSummary:
    """Replicate the entry-exit experiment and aggregate the estimates.

    Replications run independently (optionally in parallel) on streams
    derived from (seed, replication); failed replications are recorded and
    excluded from the aggregates.
    """
    if config.gradient_mode not in ("analytic", "numeric"):
        raise ValueError("gradient_mode must be 'analytic' or 'numeric'")
    if config.n_reps < 1:
        raise ValueError("need at least one replication")

    def safe(rep):
        try:
            return rep, _run_replication(config, rep), None
        except Exception as exc:  # recorded, not fatal
            return rep, None, f"{type(exc).__name__}: {exc}"

    if config.n_jobs == 1:
        outcomes = [safe(rep) for rep in range(config.n_reps)]
    else:
        outcomes = Parallel(n_jobs=config.n_jobs)(
            delayed(safe)(rep) for rep in range(config.n_reps))
    outcomes.sort(key=lambda item: item[0])

    estimates, times, evals, failures = [], [], [], []
    for rep, result, error in outcomes:
        if error is not None:
            failures.append((rep, error))
            continue
        estimates.append(result.theta_hat)
        times.append(result.wall_time)
        evals.append(result.n_func_evals)
    if not estimates:
        raise RuntimeError("every replication failed: " + failures[0][1])
    return McSummary(
        param_names=EntryExitFamily.param_names,
        theta_true=np.asarray(config.theta_true, dtype=np.float64),
        estimates=np.vstack(estimates),
        wall_times=np.asarray(times),
        func_evals=np.asarray(evals, dtype=np.float64),
        n_reps=config.n_reps,
        failures=failures,
    )
