"""Command-line interface.

Subcommands mirror the library operations: ``fit``, ``compute`` (influence),
``sensitivity``, ``robust``, ``kernel``, ``dro``, and ``experiment``.  Exit
codes: 0 success, 2 configuration/data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .attack import AttackConfig
from .dataset import load_csv
from .errors import ConfigurationError, DataError, NumericalError
from .experiments import EXPERIMENTS, ExperimentSpec, emit, run
from .dataset import GeneratorConfig
from .influence import compute_aif, dro_aif, empirical_hessian
from .kernel import KernelSpec, fit_kernel_ridge, kernel_aif
from .model import BasisSpec, fit, make_regression_model
from .robustopt import PgdConfig, robust_fit
from .sensitivity import sensitivity_from_aif

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _parse_p(text: str) -> float:
    if text in ("inf", "Inf", "INF"):
        return math.inf
    try:
        value = float(text)
    except ValueError:
        raise ConfigurationError(f"cannot parse norm order {text!r}") from None
    if value not in (1.0, 2.0) and value != math.inf:
        raise ConfigurationError("the CLI exposes p in {1, 2, inf}")
    return value


def _write_json(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _add_data_args(parser: argparse.ArgumentParser, with_basis: bool = True) -> None:
    parser.add_argument("--data", required=True, help="training CSV (header x1,...,xm,y)")
    if with_basis:
        parser.add_argument(
            "--basis", default="identity",
            choices=("identity", "quadratic-diag", "full-quadratic"),
        )
    parser.add_argument("--out", default=None, help="write JSON here instead of stdout")


def _load_model(args) -> tuple:
    data = load_csv(args.data)
    basis = BasisSpec(getattr(args, "basis", "identity"), data.m)
    model = make_regression_model(basis)
    return data, model


def _cmd_fit(args) -> int:
    data, model = _load_model(args)
    theta = fit(model, data)
    _write_json(
        {"basis": model.basis.kind, "m": data.m, "d": model.dim_theta,
         "theta": theta.tolist()},
        args.out,
    )
    return EXIT_OK


def _cmd_compute(args) -> int:
    data, model = _load_model(args)
    theta = fit(model, data)
    result = compute_aif(
        model, theta, data, p=args.p, skip_degenerate=args.skip_degenerate
    )
    _write_json(result.to_json_dict(), args.out)
    return EXIT_OK


def _cmd_sensitivity(args) -> int:
    data, model = _load_model(args)
    eval_data = load_csv(args.eval_data, role="eval") if args.eval_data else data
    theta = fit(model, data)
    aif = compute_aif(model, theta, data, p=args.p, skip_degenerate=args.skip_degenerate)
    h_eval = empirical_hessian(model, theta, eval_data)
    estimate = sensitivity_from_aif(aif, h_eval, args.eps)
    _write_json(estimate.to_json_dict(), args.out)
    return EXIT_OK


def _cmd_robust(args) -> int:
    data, model = _load_model(args)
    cfg = PgdConfig(
        inner_steps=args.inner_steps, outer_steps=args.outer_steps,
        tolerance=args.tolerance, seed=args.seed,
    )
    result = robust_fit(model, data, AttackConfig(p=args.p, epsilon=args.eps), cfg)
    _write_json(
        {"theta_eps": result.theta.tolist(), "converged": result.converged,
         "grad_norm": result.grad_norm, "iterations": result.iterations},
        args.out,
    )
    return EXIT_OK


def _cmd_kernel(args) -> int:
    data = load_csv(args.data)
    if args.unit_normalize:
        norms = np.linalg.norm(data.inputs, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DataError("cannot unit-normalize a zero input row")
        from .dataset import Dataset

        data = Dataset(data.inputs / norms, data.outputs, role=data.role)
    spec = KernelSpec(kind=args.kernel, lam=getattr(args, "lambda"), gamma=args.gamma)
    theta = fit_kernel_ridge(spec, data)
    influence = kernel_aif(spec, theta, data, p=args.p, skip_degenerate=args.skip_degenerate)
    _write_json(
        {"kernel": spec.kind, "lambda": spec.lam, "gamma": spec.gamma,
         "theta": theta.tolist(), "influence": influence.tolist()},
        args.out,
    )
    return EXIT_OK


def _cmd_dro(args) -> int:
    data, model = _load_model(args)
    theta = fit(model, data)
    result = dro_aif(model, theta, data, p=args.p, u=args.u)
    _write_json(result.to_json_dict(), args.out)
    return EXIT_OK


def _spec_from_config(name: str, config: dict, args) -> ExperimentSpec:
    dataset_cfg = config.get("dataset")
    generator = GeneratorConfig(**dataset_cfg) if dataset_cfg else None
    attack_cfg = dict(config.get("attack", {}))
    if "p" in attack_cfg and isinstance(attack_cfg["p"], str):
        attack_cfg["p"] = _parse_p(attack_cfg["p"])
    if args.p is not None:
        attack_cfg["p"] = args.p
    if args.eps is not None:
        attack_cfg["epsilon"] = args.eps
    attack = AttackConfig(**attack_cfg) if attack_cfg else AttackConfig(p=2.0, epsilon=0.05)
    pgd = PgdConfig(**config.get("pgd", {}))
    exp_cfg = dict(config.get("experiment", {}))
    exp_cfg.pop("name", None)
    seeds = tuple(exp_cfg.pop("seeds", range(20)))
    if args.full:
        repetitions = int(exp_cfg.pop("repetitions", 1)) * 20
    else:
        repetitions = int(exp_cfg.pop("repetitions", 1))
    return ExperimentSpec(
        name=name,
        generator=generator,
        attack=attack,
        eps_grid=tuple(exp_cfg.pop("eps_grid", ())),
        seeds=seeds,
        repetitions=repetitions,
        output_path=args.out,
        pgd=pgd,
        options=exp_cfg.pop("options", {}),
        workers=args.workers if args.workers else int(exp_cfg.pop("workers", 1)),
    )


def _cmd_experiment(args) -> int:
    config = {}
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"bad config JSON: {exc}") from None
    spec = _spec_from_config(args.name, config, args)
    table = run(spec)
    path = emit(table, args.format, args.out)
    failures = [r for r in table.rows if r.get("error")]
    print(f"wrote {len(table.rows)} rows to {path} ({len(failures)} with errors)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aif",
        description="Adversarial influence functions for regression models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="least-squares fit on a basis")
    _add_data_args(p_fit)
    p_fit.set_defaults(func=_cmd_fit)

    p_compute = sub.add_parser("compute", help="closed-form influence vector")
    _add_data_args(p_compute)
    p_compute.add_argument("--p", type=_parse_p, default=2.0)
    p_compute.add_argument("--skip-degenerate", action="store_true")
    p_compute.set_defaults(func=_cmd_compute)

    p_sens = sub.add_parser("sensitivity", help="influence plug-in sensitivity")
    _add_data_args(p_sens)
    p_sens.add_argument("--eval-data", default=None)
    p_sens.add_argument("--p", type=_parse_p, default=2.0)
    p_sens.add_argument("--eps", type=float, required=True)
    p_sens.add_argument("--skip-degenerate", action="store_true")
    p_sens.set_defaults(func=_cmd_sensitivity)

    p_rob = sub.add_parser("robust", help="projected-gradient robust fit")
    _add_data_args(p_rob)
    p_rob.add_argument("--p", type=_parse_p, default=2.0)
    p_rob.add_argument("--eps", type=float, required=True)
    p_rob.add_argument("--inner-steps", type=int, default=20)
    p_rob.add_argument("--outer-steps", type=int, default=5000)
    p_rob.add_argument("--tolerance", type=float, default=1e-9)
    p_rob.add_argument("--seed", type=int, default=0)
    p_rob.set_defaults(func=_cmd_robust)

    p_ker = sub.add_parser("kernel", help="kernel ridge fit and influence")
    _add_data_args(p_ker, with_basis=False)
    p_ker.add_argument("--kernel", default="ntk", choices=("linear", "rbf", "ntk"))
    p_ker.add_argument("--gamma", type=float, default=None)
    p_ker.add_argument("--lambda", type=float, default=1e-3, dest="lambda")
    p_ker.add_argument("--p", type=_parse_p, default=2.0)
    p_ker.add_argument("--unit-normalize", action="store_true")
    p_ker.add_argument("--skip-degenerate", action="store_true")
    p_ker.set_defaults(func=_cmd_kernel)

    p_dro = sub.add_parser("dro", help="distributionally robust influence")
    _add_data_args(p_dro)
    p_dro.add_argument("--p", type=_parse_p, default=2.0)
    p_dro.add_argument("--u", type=float, default=1.0)
    p_dro.set_defaults(func=_cmd_dro)

    p_exp = sub.add_parser("experiment", help="run a named experiment")
    p_exp.add_argument("name", choices=EXPERIMENTS)
    p_exp.add_argument("--config", default=None, help="JSON config file")
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--format", default="csv", choices=("csv", "json"))
    p_exp.add_argument("--full", action="store_true", help="paper-scale repetitions")
    p_exp.add_argument("--p", type=_parse_p, default=None)
    p_exp.add_argument("--eps", type=float, default=None)
    p_exp.add_argument("--workers", type=int, default=None)
    p_exp.set_defaults(func=_cmd_experiment)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
