"""Command-line front end.

    borderlab --config run.json [--seed N] [--workers N] [--out DIR]

Each command writes <command>.csv (bulk data), <command>.json (summary with the
resolved config) and manifest.json into the output directory.
"""

from __future__ import annotations

import argparse
import logging
import math
import time
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from dotenv import load_dotenv

from borderlab import __version__
from borderlab.artifacts import ArtifactRegistry, IOFailure, Manifest, OutputEntry, jsonable
from borderlab.base import NumericError, as_seed_sequence, gen_run_id, get_workers
from borderlab.config import ConfigError, ExperimentConfig, load_config
from borderlab.dynamics.flow import integrate_flow
from borderlab.dynamics.pdmp import (
    check_boundary_condition,
    simulate_pdmp_ensemble,
    stationary_distribution,
)
from borderlab.dynamics.sde import (
    MIN_MOMENT_PATHS,
    ControlPolicy,
    estimate_sup_moment,
    lambda0_from_norms,
    shaking_law,
    simulate_paths,
)
from borderlab.necessary import ZETA_BOUNDED, escape_schedule, f_zeta_inverse, zeta_profile
from borderlab.phage import PhageModel, run_border_avoidance, sweep_border_avoidance
from borderlab.value import (
    ValueConfig,
    default_policy_family,
    estimate_value,
    lambda_threshold,
    near_viability_certificate,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

# Quantiles reported for the inverse of F_zeta
INVERSE_LEVELS = (0.5, 0.9, 0.99)

# Tube samples for the discount threshold when the value section sets none
DEFAULT_THRESHOLD_SAMPLES = 32


@dataclass
class CommandOutput:
    """What a command hands back to run(): CSV table, JSON summary, log rendering."""

    summary: dict[str, Any]
    header: list[str]
    rows: list[list[Any]]
    markdown: str = ""


def _require_dimension(what: str, got: int, expected: int) -> None:
    if got != expected:
        raise ConfigError("<config>", [f"{what}: expected dimension {expected}, got {got}"])


def _markdown(title: str, summary: dict[str, Any]) -> str:
    """Render the scalar entries of a summary as a markdown list."""
    lines = [f"**{title}**"]
    for key, value in summary.items():
        if isinstance(value, (bool, int, float, str)) or value is None:
            shown = f"{value:.6g}" if isinstance(value, float) else value
            lines.append(f"- {key}: {shown}")
    return "\n".join(lines)


# =============================================================================
# Commands
# =============================================================================


def _flow(config: ExperimentConfig, workers: int, run_id: str) -> CommandOutput:
    section = config.flow
    assert section is not None and config.domain is not None
    field_ = section.field.build()
    domain = config.domain.build()
    _require_dimension("flow.x0", len(section.x0), field_.dimension)
    _require_dimension("domain", domain.dimension, field_.dimension)

    result = integrate_flow(
        field_,
        section.x0,
        section.horizon,
        section.step,
        domain,
        hit_tolerance=section.hit_tolerance,
        run_id=run_id,
    )
    header = ["t", *[f"x{i + 1}" for i in range(field_.dimension)], "delta"]
    distances = result.distances if result.distances is not None else np.full(len(result.times), np.nan)
    rows = [
        [t, *state.tolist(), d]
        for t, state, d in zip(result.times, result.states, distances, strict=True)
    ]
    summary = {
        "field": field_.name,
        "hit": result.hit,
        "hit_time": result.hit_time,
        "hit_point": result.hit_point,
        "final_time": float(result.times[-1]),
        "final_state": result.states[-1],
        "min_distance": float(np.min(distances)),
        "steps": len(result.times) - 1,
    }
    return CommandOutput(summary, header, rows, result.to_markdown())


def _zeta(config: ExperimentConfig, workers: int, run_id: str) -> CommandOutput:
    section = config.zeta
    assert section is not None and config.domain is not None
    field_ = section.field.build()
    domain = config.domain.build()
    _require_dimension("domain", domain.dimension, field_.dimension)
    if section.eps_min >= domain.eps0:
        raise ConfigError(
            "<config>", [f"zeta.eps_min: must be below eps0 = {domain.eps0:.6g}, got {section.eps_min}"]
        )

    eps_grid = np.logspace(math.log10(domain.eps0), math.log10(section.eps_min), section.n_levels)
    kwargs: dict[str, Any] = {}
    if section.beta_grid is not None:
        kwargs["beta_grid"] = section.beta_grid
    if section.delta_grid is not None:
        kwargs["delta_grid"] = section.delta_grid
    profile = zeta_profile(
        field_, domain, eps_grid, section.samples_per_level, run_id=run_id, **kwargs
    )

    raw = profile.raw_values if profile.raw_values is not None else profile.zeta_values
    sup = profile.sup_values if profile.sup_values is not None else np.full(len(eps_grid), np.nan)
    rows = [
        [e, z, r, s]
        for e, z, r, s in zip(profile.eps_grid, profile.zeta_values, raw, sup, strict=True)
    ]
    summary = profile.to_dict()
    summary["field"] = field_.name
    if profile.verdict != ZETA_BOUNDED:
        summary["inverse"] = {str(p): f_zeta_inverse(profile, p) for p in INVERSE_LEVELS}
        schedule = escape_schedule(profile, section.escape_start, section.escape_levels)
        summary["escape_schedule"] = {
            "indices": schedule.indices,
            "levels": schedule.levels,
            "times": schedule.times,
            "total_time": schedule.total_time,
        }
    return CommandOutput(summary, ["eps", "zeta", "raw", "sup"], rows, _markdown("zeta", summary))


def _sde(config: ExperimentConfig, workers: int, run_id: str) -> CommandOutput:
    section = config.sde
    assert section is not None
    coeffs = section.coefficients.build()
    _require_dimension("sde.x0", len(section.x0), coeffs.dimension)
    control = section.control if section.control is not None else coeffs.control_grid[0]
    policy = ControlPolicy.constant(control)

    path_seed, moment_seed, shaking_seed = as_seed_sequence(config.seed).spawn(3)
    recorded = min(section.recorded_paths, section.n_paths)
    paths = simulate_paths(
        coeffs,
        policy,
        section.x0,
        section.horizon,
        section.step,
        recorded,
        path_seed,
        workers=workers,
    )
    header = ["t", "path", *[f"x{i + 1}" for i in range(coeffs.dimension)]]
    rows = [
        [t, i, *paths.states[k, i].tolist()]
        for i in range(recorded)
        for k, t in enumerate(paths.times)
    ]

    summary: dict[str, Any] = {
        "coefficients": coeffs.name,
        "policy": policy.label,
        "recorded_paths": recorded,
        "final_states": paths.states[-1],
        "lambda0": lambda0_from_norms(coeffs),
    }
    if section.n_paths >= MIN_MOMENT_PATHS:
        moment = estimate_sup_moment(
            coeffs,
            policy,
            section.x0,
            section.horizon,
            section.n_paths,
            section.step,
            moment_seed,
            workers=workers,
            run_id=run_id,
        )
        summary["sup_moment"] = {
            **moment.estimate.to_dict(),
            "bound": moment.bound,
            "within_bound": moment.within_bound,
        }
    else:
        logger.info(
            "[%s] sde: %d paths is below %d, sup moment skipped",
            run_id,
            section.n_paths,
            MIN_MOMENT_PATHS,
        )
    if section.deltas:
        law = shaking_law(
            coeffs,
            policy,
            section.x0,
            list(section.deltas),
            section.horizon,
            section.step,
            section.n_paths,
            shaking_seed,
            workers=workers,
        )
        summary["shaking_law"] = law.to_dict()
    return CommandOutput(summary, header, rows, _markdown("sde", summary))


def _value(config: ExperimentConfig, workers: int, run_id: str) -> CommandOutput:
    section = config.value
    assert section is not None and config.domain is not None
    coeffs = section.coefficients.build()
    domain = config.domain.build()
    _require_dimension("domain", domain.dimension, coeffs.dimension)
    for start in section.starts:
        _require_dimension("value.starts", len(start), coeffs.dimension)

    threshold = None
    if section.lam is None or section.enforce_threshold or section.threshold_samples is not None:
        threshold = lambda_threshold(
            coeffs,
            domain,
            section.threshold_samples or DEFAULT_THRESHOLD_SAMPLES,
            step=section.step,
            n_paths=section.n_paths,
            seed=config.seed,
            workers=workers,
            run_id=run_id,
        )
    if section.lam is not None:
        lam, lam_source = section.lam, "config"
    else:
        assert threshold is not None
        lam, lam_source = max(threshold.lambda_min, 1.0), "threshold"
        logger.info("[%s] value: lambda = max(lambda_min, 1) = %.6g", run_id, lam)

    value_config = ValueConfig(
        lam=lam,
        n_approx=section.n_approx,
        horizon_cut=section.horizon_cut,
        n_paths=section.n_paths,
        step=section.step,
        policy_family=default_policy_family(coeffs, domain),
        seed=config.seed,
        tolerance=section.tolerance,
        workers=workers,
        exterior=section.exterior,
    )
    if section.enforce_threshold:
        assert threshold is not None
        value_config.check_threshold(threshold)
    estimates = [
        estimate_value(coeffs, domain, start, value_config, run_id=run_id)
        for start in section.starts
    ]
    header = ["start", *[f"x{i + 1}" for i in range(coeffs.dimension)], "policy", "mean", "std_error", "upper"]
    rows = [
        [j, *start, est.policy, est.mean, est.std_error, est.upper]
        for j, (start, est) in enumerate(zip(section.starts, estimates, strict=True))
    ]
    summary: dict[str, Any] = {
        "coefficients": coeffs.name,
        "lambda": lam,
        "lambda_source": lam_source,
        "indicator": "exterior" if section.exterior else "interior_complement",
        "n_approx": section.n_approx,
        "truncation_bound": value_config.truncation_bound,
        "max_value": max(est.mean for est in estimates),
        "values": [est.to_dict() for est in estimates],
    }
    if section.epsilon is not None:
        certificates = [
            near_viability_certificate(coeffs, domain, start, section.epsilon, value_config)
            for start in section.starts
        ]
        summary["certified"] = all(c.achieved for c in certificates)
        summary["certificates"] = [c.to_dict() for c in certificates]
    if threshold is not None:
        summary["lambda_threshold"] = threshold.to_dict()
        summary["lambda_meets_threshold"] = lam >= threshold.lambda_min
    return CommandOutput(summary, header, rows, _markdown("value", summary))


def _phage(config: ExperimentConfig, workers: int, run_id: str) -> CommandOutput:
    section = config.phage
    assert section is not None
    rates = section.rates.build()
    if section.random_rate_vectors:
        reports = sweep_border_avoidance(
            section.random_rate_vectors,
            section.starts,
            section.horizon,
            section.step,
            section.n_paths,
            config.seed,
            base=rates,
            mode0=section.mode0,
            chart=section.chart,
            workers=workers,
            run_id=run_id,
        )
    else:
        reports = [
            run_border_avoidance(
                PhageModel.from_rates(rates),
                section.starts,
                section.horizon,
                section.step,
                section.n_paths,
                config.seed,
                mode0=section.mode0,
                chart=section.chart,
                workers=workers,
                run_id=run_id,
            )
        ]

    rows = [
        [v, j, i, float(value)]
        for v, report in enumerate(reports)
        for j, minima in enumerate(report.path_minima)
        for i, value in enumerate(minima)
    ]
    summary = reports[0].to_dict()
    summary["total_hit_count"] = sum(r.hit_count for r in reports)
    if section.chart and section.cartesian_paths:
        cartesian = run_border_avoidance(
            PhageModel.from_rates(rates),
            section.starts,
            section.horizon,
            section.step,
            section.cartesian_paths,
            config.seed,
            mode0=section.mode0,
            chart=False,
            workers=workers,
            run_id=run_id,
        )
        summary["cartesian_check"] = {
            "n_paths": cartesian.n_paths,
            "min_distance": cartesian.min_distance,
            "min_log10_distance": cartesian.min_log10_distance,
            "hit_count": cartesian.hit_count,
        }
    if len(reports) > 1:
        summary["sweep"] = [
            {
                "rates": r.rates.to_dict(),
                "hit_count": r.hit_count,
                "min_log10_distance": r.min_log10_distance,
                "outer_max": r.circles()[1]["max_value"],
            }
            for r in reports
        ]
    header = ["rate_vector", "start", "path", "min_log10_distance"]
    return CommandOutput(summary, header, rows, _markdown("phage", summary))


COMMANDS: dict[str, Callable[[ExperimentConfig, int, str], CommandOutput]] = {
    "flow": _flow,
    "zeta": _zeta,
    "sde": _sde,
    "value": _value,
    "pdmp": _pdmp,
    "phage": _phage,
}


# =============================================================================
# Run and manifest
# =============================================================================


def resolved_config(config: ExperimentConfig) -> dict[str, Any]:
    """Config as embedded in outputs; worker count and output directory do not affect results."""
    return config.model_dump(mode="json", exclude={"workers", "out"}, exclude_none=True)


def emit_manifest(
    config: ExperimentConfig,
    registry: ArtifactRegistry,
    wall_time: float,
    *,
    run_id: str,
) -> Manifest:
    """Write manifest.json listing every output with its git blob hash.

    Raises:
        IOFailure: If the manifest cannot be written.
    """
    manifest = Manifest(
        version=__version__,
        run_id=run_id,
        command=config.command,
        seed=config.seed,
        config=resolved_config(config),
        outputs=[
            OutputEntry(name=r.name, sha1=r.sha1, size=r.size) for r in registry.records()
        ],
        wall_time=wall_time,
    )
    registry.write_json("manifest.json", manifest.model_dump(mode="json"))
    return manifest


def run(
    config: ExperimentConfig,
    *,
    out_dir: str | Path | None = None,
    workers: int | None = None,
    run_id: str | None = None,
) -> int:
    """Run the configured command and write its artifacts.

    Returns:
        Exit status: 0 on success, 1 if outputs cannot be written, 2 on a
        configuration error, 3 on a numerical failure.
    """
    run_id = run_id or gen_run_id()
    workers = workers or config.workers or get_workers()
    registry = ArtifactRegistry(out_dir or config.out)
    command = config.command
    logger.info("[%s] %s: seed %d, %d workers", run_id, command, config.seed, workers)

    start = time.perf_counter()
    try:
        output = COMMANDS[command](config, workers, run_id)
        registry.write_csv(f"{command}.csv", output.header, output.rows)
        registry.write_json(
            f"{command}.json",
            {
                "command": command,
                "seed": config.seed,
                "config": resolved_config(config),
                "summary": jsonable(output.summary),
            },
        )
        emit_manifest(config, registry, time.perf_counter() - start, run_id=run_id)
    except ConfigError as e:
        logger.error("[%s] %s failed: %s", run_id, command, e)
        return EXIT_CONFIG
    except NumericError as e:
        logger.error("[%s] %s failed: %s", run_id, command, e)
        return EXIT_NUMERIC
    except IOFailure as e:
        logger.error("[%s] %s failed: %s", run_id, command, e)
        return EXIT_IO

    logger.info("[%s] %s\n%s", run_id, command, output.markdown)
    logger.info(
        "[%s] %s: wrote %d files to %s", run_id, command, registry.count(), registry.out_dir
    )
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    """Entry point of the borderlab console script."""
    load_dotenv()
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )

    parser = argparse.ArgumentParser(description="Invariance and near-viability experiments")
    parser.add_argument("--config", required=True, help="Path to the JSON experiment config")
    parser.add_argument("--seed", type=int, help="Root seed (overrides the config)")
    parser.add_argument("--workers", type=int, help="Worker threads (default: BORDERLAB_WORKERS or 1)")
    parser.add_argument("--out", help="Output directory (overrides the config)")
    args = parser.parse_args(argv)
    if args.workers is not None and args.workers < 1:
        parser.error("--workers must be a positive integer")

    try:
        config = load_config(args.config, {"seed": args.seed, "out": args.out})
    except ConfigError as e:
        logger.error("Invalid config %s", e.source)
        for diagnostic in e.diagnostics:
            logger.error("  %s", diagnostic)
        return EXIT_CONFIG
    return run(config, workers=args.workers)


if __name__ == "__main__":
    raise SystemExit(main())
