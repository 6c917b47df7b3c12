"""Command-line surface: scenario generation, single-run calibration with
diagnostics, noise/delay sweeps, and report rendering.

Exit codes: 0 success, 2 configuration error, 3 runtime/solver error.
The default output directory comes from --out-dir, then the config file,
then the COCALIB_OUTPUT_DIR environment variable, then ./results.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .evaluation import (
    aggregate_results,
    calibrate_scene,
    results_from_csv,
    run_sweep,
    run_trial,
    summary_dict,
    write_results,
)
from .posegraph import SolverError
from .scenario import PlacementError, generate_scene, load_scene, save_scene

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _output_dir(cfg: RunConfig | None, override: str | None) -> Path:
    if override:
        return Path(override)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get("COCALIB_OUTPUT_DIR", "results"))


def _load_config_arg(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_config(path)


def cmd_generate(args) -> int:
    cfg = _load_config_arg(args.config)
    scene = generate_scene(cfg.scene, cfg.seed)
    out = Path(args.out) if args.out else _output_dir(cfg, None) / "scene.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scene(scene, out, seed=cfg.seed)
    print(f"wrote {out} (seed {cfg.seed}, {len(scene.agents)} agents, "
          f"{len(scene.objects)} objects)")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load_config_arg(args.config)
    pcm = not args.no_pcm
    tcm = not args.no_tcm

    if args.batch:
        ratios = []
        f1s = []
        for k in range(args.batch):
            r = run_trial(
                cfg.scene,
                cfg.noise,
                pcm=pcm,
                tcm=tcm,
                seed=cfg.seed + k,
                match_params=cfg.matching,
                solver=cfg.solver,
                diffusion=cfg.diffusion,
            )
            f1s.append(r.f1)
            if r.trans_rmse_before > 0:
                ratios.append(r.trans_rmse_after / r.trans_rmse_before)
        med = float(np.median(ratios)) if ratios else 0.0
        print(f"batch of {args.batch} seeds starting at {cfg.seed}")
        print(f"median translation-RMSE improvement ratio (after/before): {med:.4f}")
        print(f"median matching F1: {float(np.median(f1s)):.4f}")
        return EXIT_OK

    if args.scene:
        scene = load_scene(args.scene)
    else:
        scene = generate_scene(cfg.scene, cfg.seed)
    result, details = calibrate_scene(
        scene,
        cfg.noise,
        pcm=pcm,
        tcm=tcm,
        seed=cfg.seed,
        match_params=cfg.matching,
        solver=cfg.solver,
        diffusion=cfg.diffusion,
    )

    for aid, err in sorted(details["agent_errors"].items()):
        b, a = err["before"], err["after"]
        print(
            f"agent {aid}: pose error before {b[0]:.3f} m / {b[1]:.3f} deg"
            f" -> after {a[0]:.3f} m / {a[1]:.3f} deg"
        )
    print(f"matching F1: {result.f1:.4f} (precision {result.precision:.4f}, "
          f"recall {result.recall:.4f})")
    print(f"alignment IoU: before {result.iou_before:.4f} -> after {result.iou_after:.4f}")
    print(f"pose RMSE: before {result.trans_rmse_before:.4f} m -> "
          f"after {result.trans_rmse_after:.4f} m")
    if details["solver"] is not None:
        s = details["solver"]
        print(
            f"solver: {s['iterations']} iterations, cost {s['initial_cost']:.6g} -> "
            f"{s['final_cost']:.6g}, converged={s['converged']} ({s['message']})"
        )
    else:
        print("solver: skipped (passthrough)")

    out = Path(args.out) if args.out else _output_dir(cfg, None) / "trial.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(asdict(result), indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config_arg(args.config)
    spec = cfg.sweep
    jobs = args.jobs if args.jobs else spec.jobs
    results = run_sweep(
        cfg.scene,
        [tuple(level) for level in spec.noise_levels],
        [d / 1000.0 for d in spec.delays_ms],
        list(spec.flags),
        spec.trials,
        base_seed=cfg.seed,
        detection_sigma=cfg.noise.detection_sigma,
        match_params=cfg.matching,
        solver=cfg.solver,
        diffusion=cfg.diffusion,
        n_jobs=jobs,
    )
    out_dir = _output_dir(cfg, args.out_dir)
    csv_path, json_path = write_results(results, out_dir)
    print(f"{len(results)} trials -> {csv_path}, {json_path}")
    return EXIT_OK


def _format_table(rows: list[dict]) -> str:
    cols = [
        ("sigma_t", "sig_t"),
        ("sigma_r", "sig_r"),
        ("delay", "delay_s"),
        ("pcm", "pcm"),
        ("tcm", "tcm"),
        ("trials", "n"),
        ("f1_median", "F1~"),
        ("trans_rmse_after_median", "tRMSE~"),
        ("iou_before_median", "IoU_pre~"),
        ("iou_after_median", "IoU_post~"),
        ("ap50_median", "AP50~"),
        ("ap70_median", "AP70~"),
    ]
    header = "  ".join(f"{name:>9}" for _, name in cols)
    lines = [header, "-" * len(header)]
    for row in rows:
        cells = []
        for key, _ in cols:
            v = row[key]
            if isinstance(v, bool):
                cells.append(f"{'on' if v else 'off':>9}")
            elif isinstance(v, float):
                cells.append(f"{v:>9.4f}")
            else:
                cells.append(f"{v:>9}")
        lines.append("  ".join(cells))
    return "\n".join(lines)


def cmd_report(args) -> int:
    results_dir = Path(args.results_dir)
    csv_path = results_dir / "trials.csv"
    if not csv_path.exists():
        print(f"error: no trials.csv under {results_dir}", file=sys.stderr)
        return EXIT_RUNTIME
    results = results_from_csv(csv_path.read_text())
    rows = aggregate_results(results)
    print(_format_table(rows))
    out = Path(args.json) if args.json else results_dir / "report.json"
    out.write_text(json.dumps(summary_dict(results), indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cocalib",
        description="Multi-agent collaborative perception calibration benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a scene and write it as JSON")
    p.add_argument("--config", help="run configuration YAML")
    p.add_argument("--out", help="output scene path (default <output_dir>/scene.json)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("calibrate", help="run the calibration pipeline once")
    p.add_argument("--config", help="run configuration YAML")
    p.add_argument("--scene", help="scene JSON to calibrate (default: generate)")
    p.add_argument("--no-pcm", action="store_true", help="skip pose calibration")
    p.add_argument("--no-tcm", action="store_true", help="skip the latent diffusion path")
    p.add_argument("--batch", type=int, metavar="N",
                   help="run N seeds (regenerating scenes; --scene is ignored) "
                        "and print the median improvement ratio")
    p.add_argument("--out", help="output TrialResult JSON path")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("sweep", help="run the noise/delay grid sweep")
    p.add_argument("--config", help="run configuration YAML")
    p.add_argument("--out-dir", help="output directory for trials.csv / summary.json")
    p.add_argument("--jobs", type=int, help="parallel workers (overrides config)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate sweep results into tables")
    p.add_argument("--results-dir", required=True, help="directory with trials.csv")
    p.add_argument("--json", help="machine-readable report path")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, PlacementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
