"""Batch experiments: estimator comparisons, allocation sweeps, validation.

Three studies are packaged here, plus the named fixtures the validation
command runs:

* ``run_is_vs_mf`` compares two classic three-model estimators over a grid
  of per-model sample totals.  Both share the groups {0,1,2},{1},{2}; the
  independent-samples variant gives each group a disjoint slice of the
  stream while the sample-reuse variant nests the groups as prefixes.
* ``run_saob_sweep`` draws random ensembles, optimizes the independent-group
  allocation under a cost budget, converts it to the equivalent nested
  design, and records the variance ratio between the two.
* ``run_validate`` replays a fixture through the simulator and checks the
  empirical moments against the analytic values in standard-error units.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .allocation import (
    group_costs,
    nested_conversion,
    nested_sample_design,
    optimize_mlblue_allocation,
    saob_groups,
)
from .covariance import ModelEnsembleSpec, SampleDesign, assemble_block_covariance
from .grouping import GroupScheme
from .simulate import GaussianEnsemble, random_problem
from .weights import (
    DegenerateDesignError,
    InfeasibleConstraintError,
    WeightSet,
    estimator_variance,
    optimal_variance,
    optimal_weights,
)

__all__ = [
    "IsVsMfConfig",
    "IsVsMfResult",
    "SaobSweepConfig",
    "SaobSweepResult",
    "Table1Result",
    "ValidateConfig",
    "ValidateResult",
    "acv_is_design",
    "acv_mf_design",
    "run_is_vs_mf",
    "run_saob_sweep",
    "run_table1_demo",
    "run_validate",
    "validation_fixture",
    "FIXTURE_NAMES",
    "derive_seed",
]

THREE_MODEL_GROUPS = ((0, 1, 2), (1,), (2,))


def derive_seed(seed: int, *indices: int) -> int:
    """Deterministic 64-bit child seed for a cell or instance."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(i) for i in indices))
    return int(ss.generate_state(1, np.uint64)[0])


def _map_ordered(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# independent-samples vs sample-reuse comparison
# ---------------------------------------------------------------------------

def acv_is_design(n: int, m1: int, m2: int) -> SampleDesign:
    """Independent-samples design: disjoint slices of sizes n, m1-n, m2-n.

    ``m1`` and ``m2`` are the per-model evaluation totals of the two
    low-fidelity models; the shared group re-evaluates them on the n
    high-fidelity samples, so the unique slices shrink accordingly.
    """
    if m1 <= n or m2 <= m1:
        raise ValueError(f"need m1 > n and m2 > m1, got n={n}, m1={m1}, m2={m2}")
    scheme = GroupScheme.from_subsets(THREE_MODEL_GROUPS, 2)
    return SampleDesign.from_ranges(scheme, [(0, n), (n, m1), (m1, m2)])


def acv_mf_design(n: int, m1: int, m2: int) -> SampleDesign:
    """Sample-reuse design: nested prefixes of sizes n, m1, m2."""
    if m1 <= n or m2 <= m1:
        raise ValueError(f"need m1 > n and m2 > m1, got n={n}, m1={m1}, m2={m2}")
    scheme = GroupScheme.from_subsets(THREE_MODEL_GROUPS, 2)
    return SampleDesign.nested_prefixes(scheme, [n, m1, m2])


@dataclass(frozen=True)
class IsVsMfConfig:
    """Grid study settings; ranges were chosen so both correlation regimes
    of the study are visible and are fully configurable."""

    rho: tuple[float, float, float] = (0.95, 0.8, 0.9)
    n: int = 5
    m1_grid: tuple[int, ...] = (10, 20, 30, 40, 50, 60, 70, 80, 90)
    extra_m2_grid: tuple[int, ...] = (30, 100, 300, 1000, 3000)
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "IsVsMfConfig":
        kwargs = {}
        if "rho" in data:
            kwargs["rho"] = tuple(float(r) for r in data["rho"])
        if "n" in data:
            kwargs["n"] = int(data["n"])
        if "m1" in data:
            kwargs["m1_grid"] = tuple(int(v) for v in data["m1"])
        if "extra_m2" in data:
            kwargs["extra_m2_grid"] = tuple(int(v) for v in data["extra_m2"])
        if "seed" in data:
            kwargs["seed"] = int(data["seed"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "rho": list(self.rho),
            "n": self.n,
            "m1": list(self.m1_grid),
            "extra_m2": list(self.extra_m2_grid),
            "seed": self.seed,
        }

    def model_spec(self) -> ModelEnsembleSpec:
        r01, r02, r12 = self.rho
        cov = np.array([[1.0, r01, r02], [r01, 1.0, r12], [r02, r12, 1.0]])
        return ModelEnsembleSpec(cov=cov, costs=np.ones(3))


@dataclass
class IsVsMfResult:
    config: IsVsMfConfig
    rows: list[dict]
    ratio_grid: np.ndarray  # (len(extra_m2_grid), len(m1_grid)), NaN where skipped

    @property
    def max_cell(self) -> tuple[int, int]:
        """(m1, extra_m2) of the largest finite ratio."""
        i, j = np.unravel_index(np.nanargmax(self.ratio_grid), self.ratio_grid.shape)
        return self.config.m1_grid[j], self.config.extra_m2_grid[i]


def run_is_vs_mf(config: IsVsMfConfig, threads: int = 1) -> IsVsMfResult:
    """Variance ratio (independent / reuse) over the sample grid.

    Cells where a group would be empty (m1 <= n or m2 <= m1) are skipped
    with a NaN sentinel.  Model variances do not affect the ratio, so the
    model spec uses unit variances.
    """
    spec = config.model_spec()
    scheme = GroupScheme.from_subsets(THREE_MODEL_GROUPS, 2)
    cells = [
        (i, j, m1, extra)
        for i, extra in enumerate(config.extra_m2_grid)
        for j, m1 in enumerate(config.m1_grid)
    ]

    def solve(cell):
        i, j, m1, extra = cell
        m2 = m1 + extra
        if m1 <= config.n or m2 <= m1:
            return i, j, m1, extra, m2, np.nan, np.nan
        v_is = optimal_variance(
            assemble_block_covariance(spec, acv_is_design(config.n, m1, m2)), scheme
        )
        v_mf = optimal_variance(
            assemble_block_covariance(spec, acv_mf_design(config.n, m1, m2)), scheme
        )
        return i, j, m1, extra, m2, v_is, v_mf

    grid = np.full((len(config.extra_m2_grid), len(config.m1_grid)), np.nan)
    rows = []
    for i, j, m1, extra, m2, v_is, v_mf in _map_ordered(solve, cells, threads):
        ratio = v_is / v_mf if np.isfinite(v_is) else np.nan
        grid[i, j] = ratio
        rows.append(
            {
                "experiment": "is-vs-mf",
                "seed": config.seed,
                "rho01": config.rho[0],
                "rho02": config.rho[1],
                "rho12": config.rho[2],
                "n": config.n,
                "m1": m1,
                "extra_m2": extra,
                "m2": m2,
                "variance_a": v_is,
                "variance_b": v_mf,
                "ratio": ratio,
            }
        )
    return IsVsMfResult(config=config, rows=rows, ratio_grid=grid)


# ---------------------------------------------------------------------------
# random-problem allocation sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SaobSweepConfig:
    pairs: tuple[tuple[int, int], ...] = ((2, 2), (3, 2), (4, 2), (4, 3))
    instances: int = 1000
    budget: float = 1000.0
    blend: float = 0.15
    bins: int = 40
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "SaobSweepConfig":
        kwargs = {}
        if "pairs" in data:
            kwargs["pairs"] = tuple((int(L), int(M)) for L, M in data["pairs"])
        for key in ("instances", "bins", "seed"):
            if key in data:
                kwargs[key] = int(data[key])
        for key in ("budget", "blend"):
            if key in data:
                kwargs[key] = float(data[key])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "pairs": [list(p) for p in self.pairs],
            "instances": self.instances,
            "budget": self.budget,
            "blend": self.blend,
            "bins": self.bins,
            "seed": self.seed,
        }


@dataclass
class SaobSweepResult:
    config: SaobSweepConfig
    rows: list[dict]
    allocations: list[dict]
    summary: dict


def _sweep_instance(config: SaobSweepConfig, pair_index: int, pair: tuple[int, int], instance: int):
    """One sweep draw: optimize, convert, compare.  Returns (row, allocation)."""
    L, M = pair
    saob = saob_groups(L, M)
    base = derive_seed(config.seed, pair_index, instance)
    row = {
        "experiment": "saob-sweep",
        "seed": config.seed,
        "L": L,
        "M": M,
        "instance": instance,
        "variance_a": np.nan,
        "variance_b": np.nan,
        "ratio": np.nan,
        "status": "",
    }
    spec = None
    for attempt in range(100):
        spec = random_problem(L, derive_seed(base, attempt), blend=config.blend)
        alloc = optimize_mlblue_allocation(spec, saob.scheme, config.budget)
        if np.all(alloc.counts >= 1):
            break
    else:  # pragma: no cover - the optimizer enforces counts >= 1
        row["status"] = "no-feasible-allocation"
        return row, None
    mhat = nested_conversion(alloc.counts, saob)
    design = nested_sample_design(mhat, saob)
    try:
        v_gacv = optimal_variance(assemble_block_covariance(spec, design), saob.scheme)
    except (DegenerateDesignError, InfeasibleConstraintError) as exc:
        row["status"] = f"degenerate: {exc}"
        return row, None
    v_mlb = alloc.variance
    row.update(variance_a=v_mlb, variance_b=v_gacv, ratio=v_mlb / v_gacv, status="ok")
    record = {
        "L": L,
        "M": M,
        "instance": instance,
        "m": alloc.counts.tolist(),
        "m_hat": mhat.tolist(),
        "variance_mlblue": v_mlb,
        "variance_gacv": v_gacv,
        "cost": alloc.cost,
    }
    return row, record


def run_saob_sweep(config: SaobSweepConfig, threads: int = 1) -> SaobSweepResult:
    """Variance ratio (independent groups / nested reuse) over random problems.

    Instances whose converted design is degenerate (tied nested sizes
    duplicate an estimator) are logged, skipped, and counted in the summary.
    """
    tasks = [
        (pi, pair, inst)
        for pi, pair in enumerate(config.pairs)
        for inst in range(config.instances)
    ]
    results = _map_ordered(
        lambda t: _sweep_instance(config, t[0], t[1], t[2]), tasks, threads
    )
    rows = [row for row, _ in results]
    allocations = [rec for _, rec in results if rec is not None]
    summary: dict = {"pairs": {}}
    for pair in config.pairs:
        L, M = pair
        ratios = np.array(
            [r["ratio"] for r in rows if r["L"] == L and r["M"] == M and r["status"] == "ok"]
        )
        skipped = sum(
            1 for r in rows if r["L"] == L and r["M"] == M and r["status"] != "ok"
        )
        summary["pairs"][f"{L},{M}"] = {
            "instances": config.instances,
            "completed": int(ratios.size),
            "skipped": skipped,
            "fraction_ratio_gt_1": float(np.mean(ratios > 1.0)) if ratios.size else 0.0,
            "max_ratio": float(ratios.max()) if ratios.size else np.nan,
            "median_ratio": float(np.median(ratios)) if ratios.size else np.nan,
        }
    return SaobSweepResult(config=config, rows=rows, allocations=allocations, summary=summary)


# ---------------------------------------------------------------------------
# worked allocation-conversion table
# ---------------------------------------------------------------------------

@dataclass
class Table1Result:
    num_lowfi: int
    max_group_size: int
    m: np.ndarray
    mhat: np.ndarray
    rows: list[dict]  # per group: member models, mlb count, gacv count
    eval_totals: np.ndarray
    mlb_cost_units: float
    gacv_cost_units: float

    def render(self) -> str:
        L = self.num_lowfi
        header = ["group"] + [f"model {l} (MLB/GACV)" for l in range(L + 1)]
        lines = ["  ".join(f"{h:>18}" for h in header)]
        for k, row in enumerate(self.rows):
            cells = [f"S^{k + 1}"]
            for l in range(L + 1):
                if l in row["members"]:
                    cells.append(f"{row['mlb']}/{row['gacv']}")
                else:
                    cells.append("0/0")
            lines.append("  ".join(f"{c:>18}" for c in cells))
        totals = ["evals n_l"] + [f"{n}/{n}" for n in self.eval_totals]
        lines.append("  ".join(f"{c:>18}" for c in totals))
        lines.append(
            f"cost under unit model costs: independent groups = {self.mlb_cost_units:g}, "
            f"nested reuse = {self.gacv_cost_units:g}"
        )
        return "\n".join(lines)


def run_table1_demo(
    m: Sequence[int] = (5, 5, 5, 7, 18), num_lowfi: int = 4, max_group_size: int = 3
) -> Table1Result:
    """Worked example: per-group, per-model evaluation counts in both accountings."""
    from .allocation import model_eval_counts_mlblue, total_cost

    m = np.asarray(m, dtype=int)
    saob = saob_groups(num_lowfi, max_group_size)
    mhat = nested_conversion(m, saob)
    rows = [
        {"members": set(mi), "mlb": int(m[k]), "gacv": int(mhat[k])}
        for k, mi in enumerate(saob.scheme.groups)
    ]
    totals = model_eval_counts_mlblue(saob.scheme, m)
    unit = np.ones(num_lowfi + 1)
    mlb_cost = total_cost(saob.scheme, m, unit)
    gacv_cost = float(totals @ unit)  # nested accounting: each model's prefix length
    return Table1Result(
        num_lowfi=num_lowfi,
        max_group_size=max_group_size,
        m=m,
        mhat=mhat,
        rows=rows,
        eval_totals=totals,
        mlb_cost_units=mlb_cost,
        gacv_cost_units=gacv_cost,
    )


# ---------------------------------------------------------------------------
# empirical validation fixtures
# ---------------------------------------------------------------------------

FIXTURE_NAMES = ("table1-nested", "biased-weights", "single-group")


def _table1_fixture_spec() -> ModelEnsembleSpec:
    spec = random_problem(4, seed=20240)
    means = np.array([1.0, 0.97, 0.94, 0.91, 0.88])
    return dataclasses.replace(spec, means=means)


def validation_fixture(name: str):
    """(design, weights, ensemble, analytic mean, analytic variance, expect_unbiased)."""
    if name == "table1-nested":
        spec = _table1_fixture_spec()
        saob = saob_groups(4, 3)
        mhat = nested_conversion(np.array([5, 5, 5, 7, 18]), saob)
        design = nested_sample_design(mhat, saob)
        C = assemble_block_covariance(spec, design)
        weights = optimal_weights(C, saob.scheme)
        variance = estimator_variance(weights, C)
        ensemble = GaussianEnsemble(spec, rng_seed=0)
        return design, weights, ensemble, float(spec.means[0]), variance, True
    if name == "biased-weights":
        design, weights, ensemble, mean, _, _ = validation_fixture("table1-nested")
        bumped = [b.copy() for b in weights.per_group]
        bumped[0][1] += 0.1  # total weight on model 1 becomes 0.1: biased
        weights = WeightSet(tuple(bumped))
        C = assemble_block_covariance(ensemble.spec, design)
        variance = estimator_variance(weights, C)
        return design, weights, ensemble, mean, variance, False
    if name == "single-group":
        spec = ModelEnsembleSpec(cov=np.array([[1.0]]), costs=np.array([1.0]), means=np.array([2.5]))
        scheme = GroupScheme.from_subsets([[0]], 0)
        design = SampleDesign.from_ranges(scheme, [(0, 10)])
        weights = WeightSet((np.array([1.0]),))
        ensemble = GaussianEnsemble(spec, rng_seed=0)
        return design, weights, ensemble, 2.5, 0.1, True
    raise ValueError(f"unknown fixture '{name}' (have {', '.join(FIXTURE_NAMES)})")


@dataclass(frozen=True)
class ValidateConfig:
    fixture: str = "table1-nested"
    trials: int = 100_000
    se_tolerance: float = 4.0
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "ValidateConfig":
        kwargs = {}
        if "fixture" in data:
            kwargs["fixture"] = str(data["fixture"])
        if "trials" in data:
            kwargs["trials"] = int(data["trials"])
        if "se_tolerance" in data:
            kwargs["se_tolerance"] = float(data["se_tolerance"])
        if "seed" in data:
            kwargs["seed"] = int(data["seed"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "fixture": self.fixture,
            "trials": self.trials,
            "se_tolerance": self.se_tolerance,
            "seed": self.seed,
        }


@dataclass
class ValidateResult:
    config: ValidateConfig
    analytic_mean: float
    analytic_variance: float
    summary: "MomentSummary"
    mean_z: float
    var_z: float
    mean_ok: bool
    var_ok: bool
    values: np.ndarray

    @property
    def ok(self) -> bool:
        return self.mean_ok and self.var_ok

    def render(self) -> str:
        lines = [
            f"fixture {self.config.fixture}: {self.config.trials} replicates, "
            f"tolerance {self.config.se_tolerance:g} SE",
            f"  mean: empirical {self.summary.mean:.6g} vs analytic {self.analytic_mean:.6g} "
            f"({self.mean_z:+.2f} SE) -> {'pass' if self.mean_ok else 'FAIL'}",
            f"  variance: empirical {self.summary.variance:.6g} vs analytic "
            f"{self.analytic_variance:.6g} ({self.var_z:+.2f} SE) -> "
            f"{'pass' if self.var_ok else 'FAIL'}",
        ]
        return "\n".join(lines)


def run_validate(config: ValidateConfig) -> ValidateResult:
    """Check a fixture's empirical moments against the analytic values."""
    from .simulate import MomentSummary, replicate_values

    design, weights, ensemble, mean, variance, _ = validation_fixture(config.fixture)
    values = replicate_values(design, weights, ensemble, config.trials, config.seed)
    emp_var = float(values.var(ddof=1))
    summary = MomentSummary(
        mean=float(values.mean()),
        variance=emp_var,
        se_mean=float(np.sqrt(emp_var / config.trials)),
        se_var=float(emp_var * np.sqrt(2.0 / (config.trials - 1))),
        trials=config.trials,
    )
    mean_z = (summary.mean - mean) / summary.se_mean
    var_z = (summary.variance - variance) / summary.se_var
    tol = config.se_tolerance
    return ValidateResult(
        config=config,
        analytic_mean=mean,
        analytic_variance=variance,
        summary=summary,
        mean_z=float(mean_z),
        var_z=float(var_z),
        mean_ok=bool(abs(mean_z) <= tol),
        var_ok=bool(abs(var_z) <= tol),
        values=values,
    )
