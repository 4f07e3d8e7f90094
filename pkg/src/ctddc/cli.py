"""Command-line interface: model configs in, solutions and tables out.

One binary with subcommands ``expm``, ``solve``, ``loglik``, ``fit`` and
``mc``.  Configs and reports are JSON, vectors and tables CSV.  Primary
results go to stdout (or ``--out``), logs to stderr.  Exit codes: 2 for
configuration errors, 3 for numeric or optimizer failures, 4 for data
format errors.

Model config schema (JSON object):

* ``model``: ``"renewal"`` or ``"entry_exit"``;
* ``rho``: discount rate (default 0.05);
* ``shock_scale``: logit shock scale (default 1.0);
* ``params``: map of structural parameters,
  renewal: gamma, lambda, beta_cost, mu_cost;
  entry_exit: theta_ec, theta_rn, theta_d, lambda, gamma;
* renewal only: ``n_states``, optional ``replace_probs`` (list of
  replacement probabilities per state; solved from the model when absent);
* entry_exit only: ``n_players``, ``n_demand``.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass

import numpy as np

from .ctmc import GeneratorError, IntensityMatrix, expmv, expmvd
from .inference import (
    DataFormatError,
    McConfig,
    SnapshotDataset,
    count_transitions,
    fit_mle,
    log_likelihood,
    log_likelihood_gradient,
    run_monte_carlo,
)
from .model import EntryExitFamily, ModelError, RenewalFamily, build_renewal
from .solver import (
    SolverError,
    ccp_from_value,
    newton_kantorovich,
    relative_bellman_solve,
    value_iterate,
)

DEFAULT_THETA_TRUE = (-0.5, -0.05, 0.1, 1.0, 0.3)


class ConfigError(ValueError):
    """Raised for unusable run configuration."""


@dataclass
class ModelConfig:
    """Parsed model configuration; round-trips through JSON unchanged."""

    model: str
    params: dict[str, float]
    rho: float = 0.05
    shock_scale: float = 1.0
    n_states: int | None = None
    n_players: int | None = None
    n_demand: int | None = None
    replace_probs: list[float] | None = None

    KEYS = ("model", "params", "rho", "shock_scale", "n_states", "n_players",
            "n_demand", "replace_probs")

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - set(cls.KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "model" not in raw or "params" not in raw:
            raise ConfigError("config requires 'model' and 'params'")
        cfg = cls(
            model=raw["model"],
            params={k: float(v) for k, v in raw["params"].items()},
            rho=float(raw.get("rho", 0.05)),
            shock_scale=float(raw.get("shock_scale", 1.0)),
            n_states=raw.get("n_states"),
            n_players=raw.get("n_players"),
            n_demand=raw.get("n_demand"),
            replace_probs=(None if raw.get("replace_probs") is None
                           else [float(x) for x in raw["replace_probs"]]),
        )
        if cfg.model == "renewal":
            if cfg.n_states is None:
                raise ConfigError("renewal config requires 'n_states'")
            required = {"gamma", "lambda", "beta_cost", "mu_cost"}
        elif cfg.model == "entry_exit":
            if cfg.n_players is None or cfg.n_demand is None:
                raise ConfigError("entry_exit config requires 'n_players' and 'n_demand'")
            required = {"theta_ec", "theta_rn", "theta_d", "lambda", "gamma"}
        else:
            raise ConfigError(f"unknown model {cfg.model!r}")
        missing = required - set(cfg.params)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)}")
        return cfg

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if v is not None}
        return out

    @classmethod
    def load(cls, path: str) -> "ModelConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)


def _renewal_replace_probs(cfg: ModelConfig) -> np.ndarray:
    """Replacement probabilities: from the config, or the solved policy."""
    if cfg.replace_probs is not None:
        probs = np.asarray(cfg.replace_probs, dtype=np.float64)
        if probs.shape != (cfg.n_states,):
            raise ConfigError("replace_probs must list one probability per state")
        return probs
    spec = _renewal_spec(cfg)
    v, _ = newton_kantorovich(spec, None, 0, tol=1e-10)
    return ccp_from_value(spec, 0, v)[1]


def _renewal_spec(cfg: ModelConfig):
    p = cfg.params
    try:
        return build_renewal(cfg.n_states, p["gamma"], p["lambda"], p["beta_cost"],
                             p["mu_cost"], cfg.rho, cfg.shock_scale)
    except ModelError as exc:
        raise ConfigError(str(exc)) from exc


def _family(cfg: ModelConfig):
    if cfg.model == "entry_exit":
        return EntryExitFamily(cfg.n_players, cfg.n_demand, rho=cfg.rho)
    return RenewalFamily(cfg.n_states, _renewal_replace_probs(cfg),
                         beta_cost=cfg.params["beta_cost"], mu_cost=cfg.params["mu_cost"],
                         rho=cfg.rho, sigma_eps=cfg.shock_scale)


def _theta_from_config(cfg: ModelConfig, family) -> np.ndarray:
    return np.array([cfg.params[name] for name in family.param_names])


def _q_with_family(cfg: ModelConfig) -> tuple[IntensityMatrix, object, np.ndarray]:
    family = _family(cfg)
    theta = _theta_from_config(cfg, family)
    return family.q(theta), family, theta


def _parse_vector(spec_text: str, n_states: int) -> np.ndarray:
    if spec_text.startswith("e:"):
        idx = int(spec_text[2:])
        if not 0 <= idx < n_states:
            raise ConfigError(f"basis index {idx} out of range for {n_states} states")
        v = np.zeros(n_states)
        v[idx] = 1.0
        return v
    try:
        v = np.loadtxt(spec_text, dtype=np.float64, ndmin=1)
    except OSError as exc:
        raise ConfigError(f"cannot read vector file {spec_text}: {exc}") from exc
    if v.shape != (n_states,):
        raise DataFormatError(f"vector file holds {v.shape}, expected ({n_states},)")
    return v


def _write_text(text: str, out_path: str | None) -> None:
    if out_path is None:
        sys.stdout.write(text)
    else:
        with open(out_path, "w") as fh:
            fh.write(text)


def cmd_expm(args) -> int:
    cfg = ModelConfig.load(args.config)
    q, family, theta = _q_with_family(cfg)
    v = _parse_vector(args.vector, q.n_states)
    if args.deriv:
        _, dq = family.q_with_derivatives(theta)
        for name in args.deriv:
            if name not in family.param_names:
                raise ConfigError(f"unknown parameter {name!r}; "
                                  f"model has {list(family.param_names)}")
        mu, dmu = expmvd(q, [dq[name] for name in args.deriv], args.delta, v,
                         eps=args.tol)
        header = "value," + ",".join(f"d_{name}" for name in args.deriv)
        columns = np.column_stack([mu] + dmu)
    else:
        mu = expmv(q, args.delta, v, eps=args.tol)
        header = "value"
        columns = mu[:, None]
    lines = [header]
    for row in columns:
        lines.append(",".join(f"{x:.17g}" for x in row))
    _write_text("\n".join(lines) + "\n", args.out)
    return 0


def cmd_solve(args) -> int:
    cfg = ModelConfig.load(args.config)
    if cfg.model == "renewal":
        spec = _renewal_spec(cfg)
        beliefs = None
    else:
        family = EntryExitFamily(cfg.n_players, cfg.n_demand, rho=cfg.rho)
        theta = _theta_from_config(cfg, family)
        spec = family.spec(theta)
        beliefs = family.ccp(theta)
    player = args.player
    if args.method == "vi":
        v, report = value_iterate(spec, beliefs, player, tol=args.tol)
    elif args.method == "nk":
        v, report = newton_kantorovich(spec, beliefs, player, tol=args.tol)
    else:
        v, report = relative_bellman_solve(spec, beliefs, player, tol=args.tol)
    if not report.converged:
        raise SolverError(f"{args.method} did not converge "
                          f"(final residual {report.final_residual:.3e})")
    lines = ["state,value"]
    lines.extend(f"{k},{x:.17g}" for k, x in enumerate(v))
    _write_text("\n".join(lines) + "\n", args.out)
    if args.report is not None:
        with open(args.report, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
            fh.write("\n")
    print(f"{report.method}: {report.iterations} iterations, "
          f"final residual {report.final_residual:.3e}", file=sys.stderr)
    return 0


def cmd_loglik(args) -> int:
    cfg = ModelConfig.load(args.config)
    family = _family(cfg)
    theta = _theta_from_config(cfg, family)
    ds = SnapshotDataset.from_csv(args.data, args.delta)
    counts = count_transitions(ds, family.n_states)
    ll = log_likelihood(theta, family, counts, args.delta, eps=args.tol)
    lines = [f"loglik,{ll:.17g}"]
    if args.gradient:
        grad = log_likelihood_gradient(theta, family, counts, args.delta, eps=args.tol)
        lines.extend(f"d_{name},{g:.17g}" for name, g in zip(family.param_names, grad))
    _write_text("\n".join(lines) + "\n", args.out)
    return 0


def cmd_fit(args) -> int:
    cfg = ModelConfig.load(args.config)
    family = _family(cfg)
    theta0 = (_theta_from_config(cfg, family) if args.theta0 is None
              else np.array([float(x) for x in args.theta0.split(",")]))
    if theta0.shape != (len(family.param_names),):
        raise ConfigError(f"theta0 needs {len(family.param_names)} values")
    ds = SnapshotDataset.from_csv(args.data, args.delta)
    result = fit_mle(ds, family, theta0, gradient=args.gradient, tol=args.tol)
    if not result.converged:
        _write_text(json.dumps(result.to_dict(), indent=2) + "\n", args.out)
        raise SolverError(f"optimizer failed: {result.message}")
    _write_text(json.dumps(result.to_dict(), indent=2) + "\n", args.out)
    return 0


def cmd_mc(args) -> int:
    theta_true = (DEFAULT_THETA_TRUE if args.theta_true is None
                  else tuple(float(x) for x in args.theta_true.split(",")))
    if len(theta_true) != 5:
        raise ConfigError("theta-true needs 5 values: theta_ec,theta_rn,theta_d,lambda,gamma")
    config = McConfig(
        n_players=args.players, n_demand=args.demand, n_obs=args.obs,
        n_reps=args.reps, delta=args.delta, theta_true=theta_true,
        seed=args.seed, gradient_mode=args.gradient, n_jobs=args.threads,
    )
    summary = run_monte_carlo(config)
    for rep, message in summary.failures:
        print(f"replication {rep} failed: {message}", file=sys.stderr)
    if args.out is None:
        sys.stdout.write(summary.to_table_text())
    else:
        with open(f"{args.out}.csv", "w") as fh:
            fh.write(summary.to_csv_text())
        with open(f"{args.out}.txt", "w") as fh:
            fh.write(summary.to_table_text())
        print(f"wrote {args.out}.csv and {args.out}.txt", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctddc",
        description="Continuous-time dynamic discrete choice toolkit: "
                    "matrix exponential actions, value solvers, snapshot MLE.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("expm", help="evolve a vector through exp(delta * Q)")
    p.add_argument("--config", required=True, help="model config JSON")
    p.add_argument("--delta", type=float, required=True, help="time horizon")
    p.add_argument("--vector", required=True,
                   help="'e:<index>' for a basis vector or a CSV file of values")
    p.add_argument("--tol", type=float, default=1e-12,
                   help="series truncation tolerance (default 1e-12)")
    p.add_argument("--deriv", action="append", default=None, metavar="PARAM",
                   help="also output d/d(PARAM); repeatable")
    p.add_argument("--out", default=None, help="output CSV path (default stdout)")
    p.set_defaults(func=cmd_expm)

    p = sub.add_parser("solve", help="solve the value function")
    p.add_argument("--config", required=True, help="model config JSON")
    p.add_argument("--method", choices=("vi", "nk", "rvi"), default="nk",
                   help="value iteration, Newton-Kantorovich, or relative iteration "
                        "(default nk)")
    p.add_argument("--tol", type=float, default=1e-10,
                   help="sup-norm tolerance (default 1e-10)")
    p.add_argument("--player", type=int, default=0, help="player index (default 0)")
    p.add_argument("--out", default=None, help="value CSV path (default stdout)")
    p.add_argument("--report", default=None, help="convergence report JSON path")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("loglik", help="snapshot log likelihood at the config parameters")
    p.add_argument("--config", required=True, help="model config JSON")
    p.add_argument("--data", required=True, help="panel CSV (market_id,obs_index,state_index)")
    p.add_argument("--delta", type=float, required=True, help="snapshot spacing")
    p.add_argument("--tol", type=float, default=1e-12,
                   help="series truncation tolerance (default 1e-12)")
    p.add_argument("--gradient", action="store_true", help="also print the gradient")
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.set_defaults(func=cmd_loglik)

    p = sub.add_parser("fit", help="maximum likelihood estimation")
    p.add_argument("--config", required=True, help="model config JSON")
    p.add_argument("--data", required=True, help="panel CSV")
    p.add_argument("--delta", type=float, required=True, help="snapshot spacing")
    p.add_argument("--theta0", default=None,
                   help="comma-separated start values (default: config params)")
    p.add_argument("--gradient", choices=("analytic", "numeric"), default="analytic",
                   help="Jacobian mode (default analytic)")
    p.add_argument("--tol", type=float, default=1e-6,
                   help="optimizer gradient tolerance (default 1e-6)")
    p.add_argument("--out", default=None, help="result JSON path (default stdout)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("mc", help="entry-exit Monte Carlo experiment")
    p.add_argument("--players", type=int, required=True, help="number of firms")
    p.add_argument("--demand", type=int, required=True, help="number of demand levels")
    p.add_argument("--obs", type=int, default=1000,
                   help="observed transitions per replication (default 1000)")
    p.add_argument("--reps", type=int, default=101,
                   help="Monte Carlo replications (default 101)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--delta", type=float, default=1.0,
                   help="snapshot spacing (default 1.0)")
    p.add_argument("--theta-true", default=None,
                   help="comma-separated truth (default -0.5,-0.05,0.1,1.0,0.3)")
    p.add_argument("--gradient", choices=("analytic", "numeric"), default="analytic",
                   help="Jacobian mode (default analytic)")
    p.add_argument("--threads", type=int, default=-1,
                   help="parallel replications; -1 uses all cores (default -1)")
    p.add_argument("--out", default=None,
                   help="output prefix for .csv and .txt (default: table to stdout)")
    p.set_defaults(func=cmd_mc)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (SolverError, GeneratorError, ModelError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
