"""Monte Carlo studies: null rejection rates, exact critical values, power and
relative quantile discrepancies.

Every replication draws its uniforms from its own Philox stream keyed by
``(seed, stream tag)`` with the replication index in the counter, so results
do not depend on how replications are split across chunks or processes.
Replications are processed in fixed-size chunks (one batched fit per chunk)
and reassembled in index order.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ModelError, SimulationError
from .estimate import Hypothesis
from .inference import STATISTICS, test_batch
from .model import ModelSpec, Theta, _flat, open_uniforms, sample_response
from .specfun import chi2_ppf, chi2_sf

__all__ = [
    "SimulationConfig",
    "SizeTable",
    "philox_stream",
    "draw_covariates",
    "simulate_statistics",
    "size_study",
    "critical_values",
    "empirical_quantiles",
    "power_study",
    "quantile_discrepancy",
    "discrepancy_from_samples",
    "chi2_quantile",
    "benchmark_design",
    "config_from_dict",
    "MAX_FAILURE_RATE",
]

#: Abort a study when more than this fraction of replications fails to fit.
MAX_FAILURE_RATE = 0.05

STREAM_RESPONSE = 1
STREAM_COVARIATE = 2
STREAM_POWER = 3

chi2_quantile = chi2_ppf


def philox_stream(seed: int, tag: int, index: int) -> np.random.Generator:
    """Independent generator for replication ``index`` of stream ``tag``."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, tag], dtype=np.uint64)
    counter = np.array([0, 0, 0, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


@dataclass
class SimulationConfig:
    """Everything needed to reproduce a simulation study.

    ``covariate_law`` maps covariate names to ``("uniform", low, high)`` or
    to a fixed array of length ``n``. When ``fixed_covariates`` is set the
    random covariates are drawn once and shared by all replications.
    """

    model: ModelSpec
    theta: np.ndarray
    hypothesis: Hypothesis
    n: int
    replications: int = 10_000
    covariate_law: dict = field(default_factory=dict)
    fixed_covariates: bool = True
    seed: int = 0
    levels: tuple = (0.10, 0.05, 0.01)
    clamp: bool = False
    chunk: int = 1000
    label: str = ""

    def __post_init__(self):
        self.theta = np.asarray(_flat(self.model, self.theta), dtype=float)
        if self.theta.shape != (self.model.p,):
            raise ModelError(f"theta needs {self.model.p} values")
        if self.replications < 1:
            raise ModelError("replications must be at least 1")
        if not all(0.0 < a < 1.0 for a in self.levels):
            raise ModelError("levels must lie in (0, 1)")
        missing = [c for c in self.model.covariates if c not in self.covariate_law]
        if missing:
            raise ModelError(f"no covariate law for {missing}")
        self.hypothesis.indices(self.model)

    @property
    def r(self) -> int:
        return self.hypothesis.r

    def describe(self) -> dict:
        law = {
            k: (list(v) if isinstance(v, tuple) else {"fixed": np.asarray(v).tolist()})
            for k, v in self.covariate_law.items()
        }
        return {
            "label": self.label,
            "model": self.model.describe(),
            "theta": Theta.from_flat(self.model, self.theta).as_dict(),
            "hypothesis": [[n, v] for n, v in self.hypothesis.constraints],
            "n": self.n,
            "replications": self.replications,
            "covariate_law": law,
            "fixed_covariates": self.fixed_covariates,
            "seed": self.seed,
            "levels": list(self.levels),
            "clamp": self.clamp,
        }


def draw_covariates(config: SimulationConfig, index: int = 0) -> dict:
    """Covariate columns for replication ``index`` (index 0 is the fixed design)."""
    rng = philox_stream(config.seed, STREAM_COVARIATE, index)
    out = {}
    for name in sorted(config.covariate_law):
        law = config.covariate_law[name]
        if isinstance(law, tuple) and law and law[0] == "uniform":
            low, high = float(law[1]), float(law[2])
            out[name] = low + (high - low) * open_uniforms(rng, config.n)
        else:
            col = np.asarray(law, dtype=float)
            if col.shape != (config.n,):
                raise ModelError(f"fixed covariate {name!r} must have length {config.n}")
            out[name] = col
    return out


def _chunk_statistics(config: SimulationConfig, start: int, stop: int, theta, tag: int) -> dict:
    reps = range(start, stop)
    u = np.stack([open_uniforms(philox_stream(config.seed, tag, i), config.n) for i in reps])
    if config.fixed_covariates:
        cov = draw_covariates(config, 0)
    else:
        per = [draw_covariates(config, i + 1) for i in reps]
        cov = {c: np.stack([p[c] for p in per]) for c in per[0]}
    th = np.broadcast_to(theta, (len(reps), config.model.p))
    y = sample_response(config.model, th, cov, uniforms=u)
    return test_batch(config.model, y, cov, config.hypothesis, clamp=config.clamp, chunk=len(reps))


def _run_chunk(args):
    return _chunk_statistics(*args)


def simulate_statistics(
    config: SimulationConfig,
    theta=None,
    workers: int = 1,
    tag: int = STREAM_RESPONSE,
) -> dict:
    """Per-replication statistics, in replication order.

    Returns arrays keyed by the statistic names plus ``converged`` and the
    numerics flags. Output is identical for any ``workers``.
    """
    theta = config.theta if theta is None else np.asarray(_flat(config.model, theta), dtype=float)
    R = config.replications
    bounds = [(s, min(R, s + config.chunk)) for s in range(0, R, config.chunk)]
    jobs = [(config, a, b, theta, tag) for a, b in bounds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(j) for j in jobs]
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def _usable(stats: dict, config: SimulationConfig) -> np.ndarray:
    ok = stats["converged"].copy()
    for k in STATISTICS:
        ok &= np.isfinite(stats[k])
    failures = int((~ok).sum())
    if failures > MAX_FAILURE_RATE * len(ok):
        raise SimulationError(
            f"{failures} of {len(ok)} replications failed to fit "
            f"(limit {MAX_FAILURE_RATE:.0%}); check the model and parameter values"
        )
    return ok


@dataclass
class SizeTable:
    """Null rejection rates (%) by statistic and nominal level."""

    rates: dict
    se: dict
    levels: tuple
    replications: int
    used: int
    nonconvergence: int
    flag_counts: dict
    config: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [
            {
                "statistic": k,
                "level": a,
                "rate_percent": self.rates[k][a],
                "mc_se_percent": self.se[k][a],
                "used": self.used,
                "nonconvergence": self.nonconvergence,
            }
            for a in self.levels
            for k in STATISTICS
        ]

    def summary(self) -> dict:
        return {
            "config": self.config,
            "replications": self.replications,
            "used": self.used,
            "nonconvergence": self.nonconvergence,
            "flag_counts": self.flag_counts,
            "rates_percent": {k: {str(a): v for a, v in self.rates[k].items()} for k in STATISTICS},
        }

    def table(self) -> str:
        labels = {"w": "w", "W": "W", "S_R": "S_R", "S_T": "S_T", "w_star": "w*"}
        head = "level " + "".join(f"{labels[k]:>9}" for k in STATISTICS)
        lines = [head]
        for a in self.levels:
            lines.append(f"{100 * a:4.0f}% " + "".join(f"{self.rates[k][a]:9.2f}" for k in STATISTICS))
        lines.append(f"used {self.used}/{self.replications}, non-convergent {self.nonconvergence}")
        return "\n".join(lines)


def _flag_counts(stats, ok):
    return {k: int(stats[k][ok].sum()) for k in ("small_w", "zeta_degenerate", "ill_conditioned")}


def size_study(config: SimulationConfig, workers: int = 1, stats: dict | None = None) -> SizeTable:
    """Rejection rates of the five tests against chi-square critical values."""
    stats = stats if stats is not None else simulate_statistics(config, workers=workers)
    ok = _usable(stats, config)
    used = int(ok.sum())
    rates, se = {}, {}
    for k in STATISTICS:
        x = stats[k][ok]
        rates[k], se[k] = {}, {}
        for a in config.levels:
            p = float(np.mean(x > chi2_ppf(1.0 - a, config.r))) if used else math.nan
            rates[k][a] = 100.0 * p
            se[k][a] = 100.0 * math.sqrt(p * (1.0 - p) / used) if used else math.nan
    return SizeTable(
        rates=rates,
        se=se,
        levels=tuple(config.levels),
        replications=config.replications,
        used=used,
        nonconvergence=config.replications - used,
        flag_counts=_flag_counts(stats, ok),
        config=config.describe(),
    )


def empirical_quantiles(samples, probs) -> np.ndarray:
    """Type-7 (linear interpolation) sample quantiles."""
    return np.quantile(np.asarray(samples, dtype=float), probs, method="linear")


def critical_values(
    config: SimulationConfig,
    levels: Sequence[float] | None = None,
    workers: int = 1,
    stats: dict | None = None,
) -> dict:
    """Exact critical values: the empirical ``1 - alpha`` quantile of each null statistic."""
    levels = tuple(config.levels if levels is None else levels)
    stats = stats if stats is not None else simulate_statistics(config, workers=workers)
    ok = _usable(stats, config)
    return {
        k: dict(zip(levels, empirical_quantiles(stats[k][ok], [1.0 - a for a in levels]).tolist()))
        for k in STATISTICS
    }


def power_study(
    config: SimulationConfig,
    epsilon_grid: Sequence[float],
    critical: Mapping[str, Mapping[float, float]],
    level: float | None = None,
    parameter: str | None = None,
    workers: int = 1,
) -> list[dict]:
    """Rejection frequencies under ``parameter = epsilon`` using exact critical values.

    ``parameter`` defaults to the first hypothesis coordinate. Every value of
    ``epsilon`` reuses the same underlying uniforms (a stream separate from
    the one used for critical values), so the curves are coupled.
    """
    level = config.levels[0] if level is None else level
    parameter = parameter or config.hypothesis.names[0]
    j = config.model.index(parameter)
    rows = []
    for eps in epsilon_grid:
        theta = config.theta.copy()
        theta[j] = eps
        stats = simulate_statistics(config, theta=theta, workers=workers, tag=STREAM_POWER)
        ok = _usable(stats, config)
        used = int(ok.sum())
        for k in STATISTICS:
            p = float(np.mean(stats[k][ok] > critical[k][level]))
            rows.append(
                {
                    "statistic": k,
                    "epsilon": float(eps),
                    "level": level,
                    "power_percent": 100.0 * p,
                    "mc_se_percent": 100.0 * math.sqrt(p * (1.0 - p) / used),
                    "used": used,
                }
            )
    return rows


def discrepancy_from_samples(samples, r: int, grid: Sequence[float]) -> np.ndarray:
    """``(empirical quantile at level F(q) - q) / q`` for each grid point ``q``."""
    grid = np.asarray(grid, dtype=float)
    probs = 1.0 - chi2_sf(grid, r)
    return (empirical_quantiles(samples, probs) - grid) / grid


def quantile_discrepancy(
    config: SimulationConfig,
    grid: Sequence[float] = tuple(range(1, 9)),
    workers: int = 1,
    stats: dict | None = None,
) -> dict:
    """Relative quantile discrepancy curves of the five statistics."""
    stats = stats if stats is not None else simulate_statistics(config, workers=workers)
    ok = _usable(stats, config)
    return {k: discrepancy_from_samples(stats[k][ok], config.r, grid) for k in STATISTICS}


# --------------------------------------------------------------------------
# Preset designs


def _model1():
    return ModelSpec.from_formulas(
        "b1 + b2*x2 + b3*x3 + b4*x4 + b5*x5", "g1", ["b1", "b2", "b3", "b4", "b5"], ["g1"]
    )


def _model2():
    return ModelSpec.from_formulas(
        "b1 + b2*x2 + b3*x3 + b4*x4",
        "g1 + g2*z2 + g3*z3 + g4*z4",
        ["b1", "b2", "b3", "b4"],
        ["g1", "g2", "g3", "g4"],
    )


def _model3():
    return ModelSpec.from_formulas(
        "b0 + b1*x1 + pow(x2, b2)", "g0", ["b0", "b1", "b2"], ["g0"], disp_link="identity"
    )


_NULLS = {
    1: {1: "b2=0", 2: "b2=0,b3=0", 3: "b2=0,b3=0,b4=0"},
    2: {1: "b4=0", 2: "b3=0,b4=0", 3: "b2=0,b3=0,b4=0"},
    3: {1: "b2=0"},
}
_BETAS = {
    1: {1: [1, 0, 1, 6, -3], 2: [1, 0, 0, 6, -3], 3: [1, 0, 0, 0, -3]},
    2: {1: [1, 1, 6, 0], 2: [1, 1, 0, 0], 3: [1, 0, 0, 0]},
    3: {1: [1, 1, 0]},
}


def benchmark_design(
    which: int,
    r: int = 1,
    n: int = 15,
    replications: int = 10_000,
    seed: int = 0,
    phi: float | None = None,
    family: str = "max",
    **kwargs,
) -> SimulationConfig:
    """Simulation designs of the three benchmark models.

    Model 1: linear location in four ``U(-0.5, 0.5)`` covariates, constant
    dispersion ``phi = 0.1`` (log link). Model 2: linear location in three
    covariates and log-linear dispersion in three further covariates.
    Model 3: location ``b0 + b1*x1 + x2**b2`` with ``U(0, 1)`` covariates and
    constant dispersion ``phi = exp(0.1)`` on the identity link.

    With ``family="min"`` the location coefficients are negated and the
    model is a minimum-family model, which produces exactly the negated
    responses of the max-family design for the same uniforms.
    """
    if which not in _NULLS or r not in _NULLS[which]:
        raise ModelError(f"no preset for model {which} with r={r}")
    beta = np.array(_BETAS[which][r], dtype=float)
    if which == 1:
        model = _model1()
        gamma = [math.log(0.1 if phi is None else phi)]
        law = {f"x{i}": ("uniform", -0.5, 0.5) for i in range(2, 6)}
    elif which == 2:
        model = _model2()
        gamma = [math.log(0.1), -2.0, -2.0, 0.1]
        law = {f"x{i}": ("uniform", -0.5, 0.5) for i in range(2, 5)}
        law.update({f"z{i}": ("uniform", -0.5, 0.5) for i in range(2, 5)})
    else:
        model = _model3()
        gamma = [math.exp(0.1) if phi is None else phi]
        law = {"x1": ("uniform", 0.0, 1.0), "x2": ("uniform", 0.0, 1.0)}
    hyp = Hypothesis.parse(_NULLS[which][r])
    if family == "min":
        if which == 3:
            raise ModelError("the min-family preset is defined for the linear models")
        model = ModelSpec(model.loc_expr, model.disp_expr, family="min", disp_link=model.disp_link)
        beta = -beta
        hyp = Hypothesis(tuple((nm, -v) for nm, v in hyp.constraints))
    return SimulationConfig(
        model=model,
        theta=np.concatenate([beta, gamma]),
        hypothesis=hyp,
        n=n,
        replications=replications,
        covariate_law=law,
        seed=seed,
        label=f"model{which}_r{r}_n{n}",
        **kwargs,
    )


def config_from_dict(cfg: Mapping) -> SimulationConfig:
    """Build a :class:`SimulationConfig` from a JSON object (see docs/config_schema.md)."""
    from .io import parse_model_config

    cfg = dict(cfg)
    common = {
        k: cfg[k]
        for k in ("replications", "seed", "fixed_covariates", "clamp", "chunk")
        if k in cfg
    }
    if "levels" in cfg:
        common["levels"] = tuple(float(a) for a in cfg["levels"])
    if "preset" in cfg:
        p = cfg["preset"]
        config = benchmark_design(
            int(p["model"]),
            r=int(p.get("r", 1)),
            n=int(cfg.get("n", p.get("n", 15))),
            phi=p.get("phi"),
            family=p.get("family", "max"),
            **common,
        )
        config.label = cfg.get("label", config.label)
        return config
    mc = parse_model_config(cfg["model"])
    law = {}
    for name, spec in cfg.get("covariates", {}).items():
        if isinstance(spec, Mapping) and spec.get("law") == "uniform":
            law[name] = ("uniform", float(spec["low"]), float(spec["high"]))
        elif isinstance(spec, Mapping) and "values" in spec:
            law[name] = np.asarray(spec["values"], dtype=float)
        else:
            raise ModelError(f"covariate {name!r}: expected a uniform law or a list of values")
    return SimulationConfig(
        model=mc.model,
        theta=dict(cfg["theta"]),
        hypothesis=Hypothesis.parse(cfg["null"]),
        n=int(cfg["n"]),
        covariate_law=law,
        label=cfg.get("label", ""),
        **common,
    )
