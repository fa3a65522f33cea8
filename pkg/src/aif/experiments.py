"""Experiment runners: each reproduces one figure-style result end to end.

A run maps an :class:`ExperimentSpec` to a :class:`ResultTable` whose rows
are independent (epsilon, seed) cells; any cell failure is recorded in the
row's ``error`` column and the run continues.  Tables serialize to CSV or
JSON with a deterministic column order, 17-significant-digit floats, and a
summary block carrying the config hash and seed list, so identical specs
produce identical bytes (modulo the ``runtime_ms`` column).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .attack import AttackConfig
from .dataset import Dataset, GeneratorConfig, generate, load_mnist_idx, mean_norm
from .errors import AifError, ConfigurationError
from .influence import compute_aif, dro_aif, empirical_hessian
from .kernel import KernelSpec, fit_kernel_ridge, kernel_aif, robust_fit_kernel
from .model import BasisSpec, make_regression_model, fit
from .robustopt import PgdConfig, robust_fit
from .rng import substream
from .sensitivity import (
    empirical_sensitivity,
    random_effect_closed_form,
    sensitivity_from_aif,
    smoothing_ratio,
)

EXPERIMENTS = (
    "fig1-effectiveness",
    "capacity-regimes",
    "feature-count",
    "random-effect-curve",
    "smoothing-sweep",
    "ntk-effectiveness",
    "dro-scaling",
)

# offset separating eval-split seeds from train-split seeds
EVAL_SEED_OFFSET = 10_000_019

MNIST_ENV_VAR = "AIF_MNIST_DIR"


@dataclass(frozen=True)
class ExperimentSpec:
    """A named experiment with its generator, attack, grid, and replication."""

    name: str
    generator: GeneratorConfig | None = None
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(p=2.0, epsilon=0.05))
    eps_grid: tuple[float, ...] = ()
    seeds: tuple[int, ...] = tuple(range(20))
    repetitions: int = 1
    output_path: str | None = None
    pgd: PgdConfig = field(default_factory=PgdConfig)
    options: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ConfigurationError(
                f"unknown experiment {self.name!r}; expected one of {EXPERIMENTS}"
            )
        grid = tuple(float(e) for e in self.eps_grid)
        if any(e <= 0 for e in grid):
            raise ConfigurationError("eps_grid entries must be positive")
        if any(a <= b for a, b in zip(grid, grid[1:])):
            raise ConfigurationError("eps_grid must be strictly decreasing")
        if self.repetitions < 1:
            raise ConfigurationError("repetitions must be >= 1")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        object.__setattr__(self, "eps_grid", grid)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def replicate_seeds(self) -> tuple[int, ...]:
        if self.repetitions == 1:
            return self.seeds
        return tuple(
            s + 1_000_003 * rep for rep in range(self.repetitions) for s in self.seeds
        )

    def to_json_dict(self) -> dict:
        def clean(obj: Any) -> Any:
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                return {k: clean(v) for k, v in dataclasses.asdict(obj).items()}
            if isinstance(obj, np.ndarray):
                return obj.tolist()
            if isinstance(obj, float) and math.isinf(obj):
                return "inf"
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [clean(v) for v in obj]
            return obj

        return clean(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ResultTable:
    columns: tuple[str, ...]
    rows: list[dict]
    summary: dict

    def column(self, name: str, where: Callable[[dict], bool] | None = None) -> list:
        return [r[name] for r in self.rows if where is None or where(r)]


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def emit(table: ResultTable, fmt: str, path: str | Path) -> Path:
    """Write a result table as CSV (# summary header) or canonical JSON."""
    path = Path(path)
    if fmt == "csv":
        lines = [f"# {k}={v}" for k, v in sorted(table.summary.items())]
        lines.append(",".join(table.columns))
        for row in table.rows:
            lines.append(",".join(_fmt(row[c]) for c in table.columns))
        path.write_text("\n".join(lines) + "\n")
    elif fmt == "json":
        doc = {
            "summary": table.summary,
            "columns": list(table.columns),
            "rows": [[row[c] for c in table.columns] for row in table.rows],
        }
        path.write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")
    else:
        raise ConfigurationError(f"unknown output format {fmt!r}; use csv or json")
    return path


def read_table_json(path: str | Path) -> ResultTable:
    doc = json.loads(Path(path).read_text())
    columns = tuple(doc["columns"])
    rows = [dict(zip(columns, row)) for row in doc["rows"]]
    return ResultTable(columns=columns, rows=rows, summary=doc["summary"])


def run(spec: ExperimentSpec) -> ResultTable:
    """Dispatch an experiment; per-cell failures land in the ``error`` column."""
    runner = _RUNNERS[spec.name]
    table = runner(spec)
    table.summary.setdefault("experiment", spec.name)
    table.summary.setdefault("config_hash", spec.config_hash())
    table.summary.setdefault("seeds", ",".join(str(s) for s in spec.replicate_seeds()))
    table.rows.sort(key=lambda r: tuple(_fmt(r[c]) for c in table.columns[:-1]))
    return table


def _map_cells(spec: ExperimentSpec, cells: list, worker: Callable) -> list[dict]:
    if spec.workers <= 1:
        return [worker(cell) for cell in cells]
    with ThreadPoolExecutor(max_workers=spec.workers) as pool:
        return list(pool.map(worker, cells))


def _train_eval(cfg: GeneratorConfig, seed: int) -> tuple[Dataset, Dataset]:
    train = generate(replace(cfg, seed=seed), role="train")
    evald = generate(replace(cfg, seed=seed + EVAL_SEED_OFFSET), role="eval")
    return train, evald


# ---------------------------------------------------------------------------
# fig1-effectiveness
# ---------------------------------------------------------------------------


def fig1_generator() -> GeneratorConfig:
    return GeneratorConfig(
        family="gaussian-linear", n=500, m=2, beta1=(2.0, -3.4), sigma_x=1.0, sigma_xi=0.1
    )


def _run_fig1(spec: ExperimentSpec) -> ResultTable:
    cfg = spec.generator or fig1_generator()
    eps_grid = spec.eps_grid or (0.1, 0.05, 0.02, 0.01)
    basis = BasisSpec("identity", cfg.m)
    model = make_regression_model(basis)
    columns = (
        "experiment", "epsilon", "seed", "delta_I", "delta_S",
        "S_aif", "S_emp", "runtime_ms", "error",
    )

    def cell(args) -> dict:
        eps, seed = args
        t0 = time.perf_counter()
        row = {
            "experiment": spec.name, "epsilon": eps, "seed": seed,
            "delta_I": math.nan, "delta_S": math.nan, "S_aif": math.nan,
            "S_emp": math.nan, "runtime_ms": 0.0, "error": "",
        }
        try:
            train, evald = _train_eval(cfg, seed)
            theta = fit(model, train)
            aif = compute_aif(model, theta, train, p=spec.attack.p)
            h_eval = empirical_hessian(model, theta, evald)
            result = robust_fit(
                model, train, AttackConfig(p=spec.attack.p, epsilon=eps), spec.pgd,
                theta0=theta,
            )
            s_aif = sensitivity_from_aif(aif, h_eval, eps)
            s_emp = empirical_sensitivity(model, theta, result.theta, evald, eps)
            row["delta_I"] = float(
                np.linalg.norm((result.theta - theta) / eps - aif.influence)
            )
            row["delta_S"] = abs(s_emp.value - s_aif.value) / eps**2
            row["S_aif"] = s_aif.value
            row["S_emp"] = s_emp.value
            if not result.converged:
                row["error"] = f"robust fit not converged (grad {result.grad_norm:.2e})"
        except AifError as exc:
            row["error"] = str(exc)
        row["runtime_ms"] = (time.perf_counter() - t0) * 1e3
        return row

    cells = [(eps, seed) for eps in eps_grid for seed in spec.replicate_seeds()]
    return ResultTable(columns, _map_cells(spec, cells, cell), {})


# ---------------------------------------------------------------------------
# capacity-regimes
# ---------------------------------------------------------------------------


def _run_capacity(spec: ExperimentSpec) -> ResultTable:
    opts = spec.options
    n = int(opts.get("n", 5000))
    m = int(opts.get("m", 5))
    sigma_xi = float(opts.get("sigma_xi", 0.1))
    eps = spec.attack.epsilon or 0.05
    beta1 = np.full(m, 1.0 / math.sqrt(m))
    regimes = {
        # regime I: strong quadratic signal, the linear fit pays more
        "I": np.array(opts.get("beta2_regime_one", [1.0] + [0.0] * (m - 1))),
        # regime II: true model linear; extra quadratic capacity costs
        "II": np.array(opts.get("beta2_regime_two", [0.0] * m)),
    }
    columns = (
        "experiment", "regime", "seed", "S_linear", "S_quadratic",
        "linear_exceeds", "runtime_ms", "error",
    )

    def cell(args) -> dict:
        regime, seed = args
        t0 = time.perf_counter()
        row = {
            "experiment": spec.name, "regime": regime, "seed": seed,
            "S_linear": math.nan, "S_quadratic": math.nan,
            "linear_exceeds": False, "runtime_ms": 0.0, "error": "",
        }
        try:
            cfg = GeneratorConfig(
                family="gaussian-linear-quadratic", n=n, m=m, sigma_x=1.0,
                sigma_xi=sigma_xi, beta1=beta1, beta2=regimes[regime],
            )
            train, evald = _train_eval(cfg, seed)
            values = {}
            for label, kind in (("S_linear", "identity"), ("S_quadratic", "full-quadratic")):
                model = make_regression_model(BasisSpec(kind, m))
                theta = fit(model, train)
                aif = compute_aif(model, theta, train, p=spec.attack.p)
                h_eval = empirical_hessian(model, theta, evald)
                values[label] = sensitivity_from_aif(aif, h_eval, eps).value
            row.update(values)
            row["linear_exceeds"] = values["S_linear"] > values["S_quadratic"]
        except AifError as exc:
            row["error"] = str(exc)
        row["runtime_ms"] = (time.perf_counter() - t0) * 1e3
        return row

    cells = [(regime, seed) for regime in regimes for seed in spec.replicate_seeds()]
    return ResultTable(columns, _map_cells(spec, cells, cell), {})


# ---------------------------------------------------------------------------
# feature-count
# ---------------------------------------------------------------------------


def _run_feature_count(spec: ExperimentSpec) -> ResultTable:
    opts = spec.options
    n = int(opts.get("n", 5000))
    pool = int(opts.get("feature_pool", 20))
    m_grid = tuple(opts.get("m_grid", range(2, pool + 1)))
    sigma_xi = float(opts.get("sigma_xi", 0.1))
    eps = spec.attack.epsilon or 0.05
    columns = ("experiment", "m", "seed", "S_value", "runtime_ms", "error")

    def cell(seed: int) -> list[dict]:
        # one seed shares the full-pool draw across the m grid; the attack
        # budget is scaled by the full data's norm, not the model's subset
        rows = []
        cfg = GeneratorConfig(
            family="uniform-quadratic-basis", n=n, m=pool, M=pool,
            sigma_xi=sigma_xi, beta1="random", beta2="random",
        )
        try:
            train_full, eval_full = _train_eval(cfg, seed)
            scale = mean_norm(train_full, spec.attack.p)
        except AifError as exc:
            return [
                {
                    "experiment": spec.name, "m": m, "seed": seed, "S_value": math.nan,
                    "runtime_ms": 0.0, "error": str(exc),
                }
                for m in m_grid
            ]
        for m in m_grid:
            t0 = time.perf_counter()
            row = {
                "experiment": spec.name, "m": m, "seed": seed, "S_value": math.nan,
                "runtime_ms": 0.0, "error": "",
            }
            try:
                train = train_full.subset_features(m)
                evald = eval_full.subset_features(m)
                model = make_regression_model(BasisSpec("quadratic-diag", m))
                theta = fit(model, train)
                aif = compute_aif(model, theta, train, p=spec.attack.p, norm_scale=scale)
                h_eval = empirical_hessian(model, theta, evald)
                row["S_value"] = sensitivity_from_aif(aif, h_eval, eps).value
            except AifError as exc:
                row["error"] = str(exc)
            row["runtime_ms"] = (time.perf_counter() - t0) * 1e3
            rows.append(row)
        return rows

    nested = _map_cells(spec, list(spec.replicate_seeds()), cell)
    return ResultTable(columns, [r for rows in nested for r in rows], {})


# ---------------------------------------------------------------------------
# random-effect-curve
# ---------------------------------------------------------------------------


def _run_random_effect(spec: ExperimentSpec) -> ResultTable:
    opts = spec.options
    n = int(opts.get("n", 5000))
    M = int(opts.get("feature_pool", 10))
    m_grid = tuple(opts.get("m_grid", (2, 5, 8)))
    sigma_x = float(opts.get("sigma_x", 1.0))
    sigma_xi = float(opts.get("sigma_xi", 0.1))
    eps = spec.attack.epsilon or 0.05
    columns = (
        "experiment", "m", "seed", "S_aif", "S_closed_form", "runtime_ms", "error",
    )

    def cell(args) -> dict:
        m, seed = args
        t0 = time.perf_counter()
        row = {
            "experiment": spec.name, "m": m, "seed": seed, "S_aif": math.nan,
            "S_closed_form": math.nan, "runtime_ms": 0.0, "error": "",
        }
        try:
            cfg = GeneratorConfig(
                family="random-effect", n=n, m=m, M=M, sigma_x=sigma_x,
                sigma_xi=sigma_xi, beta1="random",
            )
            train, evald = _train_eval(cfg, seed)
            model = make_regression_model(BasisSpec("identity", m))
            theta = fit(model, train)
            aif = compute_aif(model, theta, train, p=spec.attack.p)
            h_eval = empirical_hessian(model, theta, evald)
            row["S_aif"] = sensitivity_from_aif(aif, h_eval, eps).value
            row["S_closed_form"] = random_effect_closed_form(
                m, M, sigma_x, sigma_xi, eps
            ).value
        except AifError as exc:
            row["error"] = str(exc)
        row["runtime_ms"] = (time.perf_counter() - t0) * 1e3
        return row

    cells = [(m, seed) for m in m_grid for seed in spec.replicate_seeds()]
    return ResultTable(columns, _map_cells(spec, cells, cell), {})


# ---------------------------------------------------------------------------
# smoothing-sweep
# ---------------------------------------------------------------------------


def _smoothing_pipeline(
    seed: int, n: int, m: int, sigma_x: float, sigma_xi: float,
    beta: np.ndarray, sigma_r: float, eps: float, p: float,
) -> float:
    """Sensitivity of the (possibly input-noised) linear fit.

    Training and evaluation inputs carry the smoothing noise, but the attack
    budget stays scaled to the clean data's norm — the attacker's strength
    is a property of the data, not of the defender's augmentation.
    """
    parts = {}
    for role, tag in (("train", 0), ("eval", 1)):
        x = sigma_x * substream(seed, "smooth-x", tag).standard_normal((n, m))
        xi = sigma_xi * substream(seed, "smooth-xi", tag).standard_normal(n)
        y = x @ beta + xi
        clean = Dataset(x, y, role=role)
        if sigma_r > 0:
            noise = sigma_r * substream(seed, "smooth-input-noise", tag).standard_normal((n, m))
            parts[role] = (Dataset(x + noise, y, role=role), clean)
        else:
            parts[role] = (clean, clean)
    train, train_clean = parts["train"]
    evald, _ = parts["eval"]
    model = make_regression_model(BasisSpec("identity", m))
    theta = fit(model, train)
    scale = mean_norm(train_clean, p)
    aif = compute_aif(model, theta, train, p=p, norm_scale=scale)
    h_eval = empirical_hessian(model, theta, evald)
    return sensitivity_from_aif(aif, h_eval, eps).value


def _run_smoothing(spec: ExperimentSpec) -> ResultTable:
    opts = spec.options
    n = int(opts.get("n", 20000))
    m = int(opts.get("m", 5))
    sigma_x = float(opts.get("sigma_x", 1.0))
    sigma_xi = float(opts.get("sigma_xi", 1.0))
    beta = np.asarray(opts.get("beta", np.full(m, 0.1)), dtype=np.float64)
    sigma_r_grid = tuple(opts.get("sigma_r_grid", (0.5, 1.0, 2.0)))
    eps = spec.attack.epsilon or 0.05
    columns = (
        "experiment", "sigma_r", "seed", "ratio_simulated", "ratio_formula",
        "runtime_ms", "error",
    )

    def cell(args) -> dict:
        sigma_r, seed = args
        t0 = time.perf_counter()
        row = {
            "experiment": spec.name, "sigma_r": sigma_r, "seed": seed,
            "ratio_simulated": math.nan, "ratio_formula": math.nan,
            "runtime_ms": 0.0, "error": "",
        }
        try:
            s_clean = _smoothing_pipeline(
                seed, n, m, sigma_x, sigma_xi, beta, 0.0, eps, spec.attack.p
            )
            s_noise = _smoothing_pipeline(
                seed, n, m, sigma_x, sigma_xi, beta, sigma_r, eps, spec.attack.p
            )
            row["ratio_simulated"] = s_noise / s_clean
            row["ratio_formula"] = smoothing_ratio(
                sigma_x, sigma_r, sigma_xi, float(np.linalg.norm(beta))
            )
        except AifError as exc:
            row["error"] = str(exc)
        row["runtime_ms"] = (time.perf_counter() - t0) * 1e3
        return row

    cells = [(sr, seed) for sr in sigma_r_grid for seed in spec.replicate_seeds()]
    return ResultTable(columns, _map_cells(spec, cells, cell), {})


# ---------------------------------------------------------------------------
# ntk-effectiveness
# ---------------------------------------------------------------------------


def mnist_paths() -> tuple[Path, Path] | None:
    root = os.environ.get(MNIST_ENV_VAR)
    if not root:
        return None
    root = Path(root)
    for images, labels in (
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("train-images.idx3-ubyte", "train-labels.idx1-ubyte"),
    ):
        if (root / images).exists() and (root / labels).exists():
            return root / images, root / labels
    return None


def _unit_normalize(d: Dataset) -> Dataset:
    norms = np.linalg.norm(d.inputs, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ConfigurationError("cannot unit-normalize a zero input row")
    return Dataset(d.inputs / norms, d.outputs, role=d.role)


def _ntk_dataset(draw_seed: int, n: int, m: int) -> tuple[Dataset, str]:
    paths = mnist_paths()
    if paths is not None:
        d = load_mnist_idx(paths[0], paths[1], count=n, seed=draw_seed)
        return _unit_normalize(d), "mnist"
    cfg = GeneratorConfig(
        family="unit-sphere", n=n, m=m, beta1="random", sigma_xi=0.1, seed=draw_seed
    )
    return generate(cfg), "synthetic-unit-sphere"


def _run_ntk(spec: ExperimentSpec) -> ResultTable:
    opts = spec.options
    n = int(opts.get("n", 300))
    m = int(opts.get("m", 20))
    lam = float(opts.get("lam", 1e-3))
    kind = str(opts.get("kernel", "ntk"))
    gamma = opts.get("gamma")
    draws = tuple(spec.replicate_seeds())
    eps_grid = spec.eps_grid or (0.1, 0.05, 0.02)
    kspec = KernelSpec(kind=kind, lam=lam, gamma=gamma)
    columns = (
        "experiment", "epsilon", "draw", "delta_I", "data_source", "runtime_ms", "error",
    )

    def cell(draw: int) -> list[dict]:
        rows = []
        try:
            d, source = _ntk_dataset(draw, n, m)
            theta = fit_kernel_ridge(kspec, d)
            influence = kernel_aif(kspec, theta, d, p=spec.attack.p, skip_degenerate=True)
        except AifError as exc:
            return [
                {
                    "experiment": spec.name, "epsilon": eps, "draw": draw,
                    "delta_I": math.nan, "data_source": "unavailable",
                    "runtime_ms": 0.0, "error": str(exc),
                }
                for eps in eps_grid
            ]
        for eps in eps_grid:
            t0 = time.perf_counter()
            row = {
                "experiment": spec.name, "epsilon": eps, "draw": draw,
                "delta_I": math.nan, "data_source": source, "runtime_ms": 0.0,
                "error": "",
            }
            try:
                result = robust_fit_kernel(
                    kspec, d, epsilon=eps, p=spec.attack.p,
                    inner_steps=spec.pgd.inner_steps,
                    inner_step_size=spec.pgd.inner_step_size,
                    tolerance=max(spec.pgd.tolerance, 1e-10),
                    seed=spec.pgd.seed,
                )
                row["delta_I"] = float(
                    np.linalg.norm((result.theta - theta) / eps - influence)
                )
                if not result.converged:
                    row["error"] = f"robust fit not converged (grad {result.grad_norm:.2e})"
            except AifError as exc:
                row["error"] = str(exc)
            row["runtime_ms"] = (time.perf_counter() - t0) * 1e3
            rows.append(row)
        return rows

    nested = _map_cells(spec, list(draws), cell)
    rows = [r for rows in nested for r in rows]
    summary = {"data_source": rows[0]["data_source"] if rows else "none"}
    return ResultTable(columns, rows, summary)


# ---------------------------------------------------------------------------
# dro-scaling
# ---------------------------------------------------------------------------


def _run_dro_scaling(spec: ExperimentSpec) -> ResultTable:
    opts = spec.options
    k_grid = tuple(opts.get("k_grid", (1, 2, 4)))
    u = float(opts.get("u", spec.attack.u if spec.attack.u > 1 else 2.0))
    cfg = spec.generator or GeneratorConfig(
        family="gaussian-linear", n=50, m=3, beta1=(1.0, -2.0, 0.5), sigma_xi=0.1
    )
    columns = (
        "experiment", "k", "seed", "influence_norm", "ratio", "expected_ratio",
        "runtime_ms", "error",
    )

    def cell(seed: int) -> list[dict]:
        rows = []
        base = generate(replace(cfg, seed=seed))
        model = make_regression_model(BasisSpec("identity", cfg.m))
        base_norm = None
        for k in k_grid:
            t0 = time.perf_counter()
            row = {
                "experiment": spec.name, "k": k, "seed": seed,
                "influence_norm": math.nan, "ratio": math.nan,
                "expected_ratio": float(k) ** ((1.0 - u) / u),
                "runtime_ms": 0.0, "error": "",
            }
            try:
                dup = Dataset(
                    np.tile(base.inputs, (k, 1)), np.tile(base.outputs, k), role="train"
                )
                theta = fit(model, dup)
                result = dro_aif(model, theta, dup, p=spec.attack.p, u=u)
                norm = float(np.linalg.norm(result.influence))
                row["influence_norm"] = norm
                if k == k_grid[0]:
                    base_norm = norm
                row["ratio"] = norm / base_norm if base_norm else math.nan
            except AifError as exc:
                row["error"] = str(exc)
            row["runtime_ms"] = (time.perf_counter() - t0) * 1e3
            rows.append(row)
        return rows

    nested = _map_cells(spec, list(spec.replicate_seeds()), cell)
    return ResultTable(columns, [r for rows in nested for r in rows], {})


_RUNNERS: dict[str, Callable[[ExperimentSpec], ResultTable]] = {
    "fig1-effectiveness": _run_fig1,
    "capacity-regimes": _run_capacity,
    "feature-count": _run_feature_count,
    "random-effect-curve": _run_random_effect,
    "smoothing-sweep": _run_smoothing,
    "ntk-effectiveness": _run_ntk,
    "dro-scaling": _run_dro_scaling,
}
