"""Command-line front end.

Every subcommand reads the same flat key=value config format (see
``configfmt``) via ``--config`` and accepts repeated ``--set key=value``
overrides; bare keys land in the [plan] section, dotted keys
(``method.eta=0.1``) in the named section.  Outputs are raw-format files
and plain printed key: value lines.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from ..analysis import compute_metrics, null_space_component
from ..grids import ImageGrid, ProjectionGeometry, Sinogram
from ..guidance import GuidanceSpec, sample_reconstruct
from ..mbir import TVSpec, admm_tv, fista_tv
from ..operators import Projector, fbp_reconstruct, sirt_reconstruct
from ..priors import GaussianPrior, linear_beta_schedule
from ..simulate import simulate_measurement
from .benchmark import (
    default_detector_count,
    plan_from_sections,
    resolve_config,
    resolve_method,
    run_benchmark,
)
from .configfmt import ConfigError, apply_overrides, parse_config
from .phantoms import generate_phantom
from .rawio import load_raw, save_raw
from .tuning import grid_search

__all__ = ["main"]


def _sections_from_args(args) -> dict[str, dict[str, object]]:
    sections = parse_config(args.config) if args.config else {}
    return apply_overrides(sections, args.set)


def _require(plan: dict, key: str):
    if key not in plan:
        raise ConfigError(f"missing required key {key!r}")
    return plan[key]


def _load_image(path: str) -> ImageGrid:
    obj = load_raw(path)
    if not isinstance(obj, ImageGrid):
        raise ConfigError(f"{path} holds a sinogram, expected an image")
    return obj


def _load_sinogram(path: str) -> Sinogram:
    obj = load_raw(path)
    if not isinstance(obj, Sinogram):
        raise ConfigError(f"{path} holds an image, expected a sinogram")
    return obj


def _dense_geometry(plan: dict) -> ProjectionGeometry:
    views = int(plan.get("dense_views", 360))
    size = int(plan.get("size", 64))
    count = plan.get("detector_count")
    count = int(count) if count is not None else default_detector_count(size)
    angles = np.pi * np.arange(views) / views
    return ProjectionGeometry(angles, count, float(plan.get("detector_pitch", 1.0)))


def _plan_phantom(plan: dict) -> ImageGrid:
    if "phantom_path" in plan:
        return _load_image(str(plan["phantom_path"]))
    spec_text = None
    if "phantom_spec" in plan:
        with open(str(plan["phantom_spec"]), "r", encoding="utf-8") as fh:
            spec_text = fh.read()
    seed = plan.get("phantom_seed")
    return generate_phantom(
        str(plan.get("phantom_kind", "shepplogan")),
        int(plan.get("size", 64)),
        float(plan.get("pixel_size", 1.0)),
        seed=int(seed) if seed is not None else None,
        spec_text=spec_text,
    )


def cmd_simulate(args) -> int:
    """Phantom -> dense clean sinogram -> degraded measurement on disk."""
    sections = _sections_from_args(args)
    plan = dict(sections.get("plan", {}))
    output = str(_require(plan, "output"))
    phantom = _plan_phantom(plan)
    geom = _dense_geometry(plan)
    proj = Projector(geom, phantom.shape, phantom.pixel_size)
    clean = Sinogram(proj.apply(phantom.values), geom)
    _, config = resolve_config(plan.get("config", "i"), sections)
    overrides = sections.get("config")
    if overrides:
        config = dataclasses.replace(config, **overrides)
    if "seed" in plan:
        config = dataclasses.replace(config, seed=int(plan["seed"]))
    measured, info = simulate_measurement(clean, config)
    save_raw(output, measured)
    if "save_phantom" in plan:
        save_raw(str(plan["save_phantom"]), phantom)
    if "save_clean" in plan:
        save_raw(str(plan["save_clean"]), clean)
    print(f"measured: {output}")
    print(f"views: {measured.values.shape[0]}")
    print(f"gamma: {info.gamma!r}")
    return 0


def _guidance_prior(options: dict, shape) -> GaussianPrior:
    mean_opt = options.pop("prior_mean", 0.0)
    var = float(options.pop("prior_var", 1.0))
    if isinstance(mean_opt, str):
        mean = _load_image(mean_opt).values
        if mean.shape != shape:
            raise ConfigError("prior mean image shape does not match size")
    else:
        mean = np.full(shape, float(mean_opt))
    return GaussianPrior(mean, var)


def cmd_reconstruct(args) -> int:
    """Reconstruct a measured sinogram with any registered method."""
    sections = _sections_from_args(args)
    plan = dict(sections.get("plan", {}))
    measured = _load_sinogram(str(_require(plan, "input")))
    output = str(_require(plan, "output"))
    size = int(_require(plan, "size"))
    pixel_size = float(plan.get("pixel_size", 1.0))
    shape = (size, size)
    method = resolve_method(plan.get("method", "fbp"), sections)
    proj = Projector(measured.geometry, shape, pixel_size)
    # a bare [method] section (or --set method.key=value) overrides options
    options = {**method.options, **sections.get("method", {})}

    if method.kind == "classical":
        algo = options.get("algo", "fbp")
        if algo == "fbp":
            recon = fbp_reconstruct(
                measured, shape, pixel_size, window=options.get("window", "ramlak")
            )
        else:
            recon = sirt_reconstruct(
                measured,
                shape,
                int(options.get("iterations", 80)),
                pixel_size,
                nonneg=bool(options.get("nonneg", False)),
                projector=proj,
            )
    elif method.kind == "mbir":
        solver = options.get("solver", "fista")
        tv_fields = {f.name for f in dataclasses.fields(TVSpec)}
        spec = TVSpec(**{k: v for k, v in options.items() if k in tv_fields})
        solve = fista_tv if solver == "fista" else admm_tv
        recon, _ = solve(measured, shape, spec, pixel_size, projector=proj)
    elif method.kind == "guidance":
        # No trained score model at the CLI: the prior is Gaussian around a
        # supplied mean image (or a flat level), in measurement units.
        prior = _guidance_prior(options, shape)
        steps = int(options.pop("schedule_steps", 1000))
        spec_fields = {f.name for f in dataclasses.fields(GuidanceSpec)}
        unknown = set(options) - spec_fields
        if unknown:
            raise ConfigError(f"unknown guidance options: {sorted(unknown)}")
        spec = GuidanceSpec(**options)
        recon, _ = sample_reconstruct(
            measured,
            prior,
            linear_beta_schedule(steps),
            spec,
            shape,
            pixel_size,
            projector=proj,
        )
    else:
        raise ConfigError(f"unknown method kind {method.kind!r}")

    save_raw(output, recon)
    fit = float(np.linalg.norm(proj.apply(recon.values) - measured.values))
    print(f"recon: {output}")
    print(f"data_fit: {fit!r}")
    return 0


def cmd_decompose(args) -> int:
    """Split an image into measurable and invisible parts for a geometry."""
    sections = _sections_from_args(args)
    plan = dict(sections.get("plan", {}))
    image = _load_image(str(_require(plan, "input")))
    if "geometry_from" in plan:
        geom = _load_sinogram(str(plan["geometry_from"])).geometry
    else:
        views = int(_require(plan, "views"))
        count = plan.get("detector_count")
        count = (
            int(count) if count is not None else default_detector_count(image.shape[0])
        )
        angles = np.pi * np.arange(views) / views
        geom = ProjectionGeometry(angles, count, float(plan.get("detector_pitch", 1.0)))
    result = null_space_component(
        image,
        geom,
        image.pixel_size,
        eps_rel=float(plan.get("eps_rel", 1e-6)),
        max_iter=int(plan.get("max_iter", 5000)),
    )
    stem = str(plan["input"]).rsplit(".", 1)[0]
    range_path = str(plan.get("output_range", stem + "_range.raw"))
    null_path = str(plan.get("output_null", stem + "_null.raw"))
    save_raw(range_path, result.x_range)
    save_raw(null_path, result.x_null)
    print(f"range: {range_path}")
    print(f"null: {null_path}")
    print(f"null_energy_fraction: {result.null_energy_fraction!r}")
    print(f"iterations_used: {result.iterations_used}")
    print(f"final_residual: {result.final_residual!r}")
    return 0


def cmd_tune(args) -> int:
    """Grid-search method hyperparameters on held-out phantom variants."""
    sections = _sections_from_args(args)
    grid = sections.get("grid")
    if not grid:
        raise ConfigError("tune needs a [grid] section (param = v1, v2, ...)")
    param_grid = {
        k: v if isinstance(v, list) else [v] for k, v in grid.items()
    }
    tune_opts = sections.get("tune", {})
    count = int(tune_opts.get("holdout_count", 10))
    plan = plan_from_sections(
        {k: v for k, v in sections.items() if k not in ("grid", "tune")}
    )
    results = grid_search(plan, param_grid, count=count)
    for method, result in zip(plan.methods, results):
        print(f"method: {method.name}")
        for key, value in result.best.items():
            print(f"  {key}: {value!r}")
        print(f"  mse: {result.best_score!r}")
    return 0


def cmd_benchmark(args) -> int:
    """Run the full (method x config x repeat) matrix and write the CSV."""
    sections = _sections_from_args(args)
    plan = plan_from_sections(sections)
    rows = run_benchmark(plan)
    failures = sum(1 for row in rows if row["status"] != "ok")
    print(f"csv: {plan.output_dir}/{plan.csv_name}")
    print(f"rows: {len(rows)}")
    print(f"failures: {failures}")
    return 0


def cmd_metrics(args) -> int:
    """Score a reconstruction against a reference image."""
    sections = _sections_from_args(args)
    plan = dict(sections.get("plan", {}))
    recon = _load_image(str(_require(plan, "recon")))
    reference = _load_image(str(_require(plan, "reference")))
    measured = None
    if "sinogram" in plan:
        measured = _load_sinogram(str(plan["sinogram"]))
    report = compute_metrics(recon, reference, measured)
    print(f"psnr: {report.psnr!r}")
    print(f"ssim: {report.ssim!r}")
    if report.data_fit is not None:
        print(f"data_fit: {report.data_fit!r}")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "decompose": cmd_decompose,
    "tune": cmd_tune,
    "benchmark": cmd_benchmark,
    "metrics": cmd_metrics,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctbench",
        description="few-view CT simulation, reconstruction, and benchmarking",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler in _COMMANDS.items():
        p = sub.add_parser(name, help=handler.__doc__)
        p.add_argument("--config", help="path to a key=value config file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config entry (section.key=value; bare key -> plan)",
        )
        p.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
