"""Metrics and experiment harness: matching quality, pose error, alignment
IoU, AP-style detection scoring, and seeded noise/delay sweeps.

A trial builds one synthetic scene, runs the message -> matching -> pose
graph pipeline for one ego agent (agent 0, whose own pose defines the
reference frame), optionally pushes the exchanged feature maps through the
latent codec + conditional diffusion path, and scores everything against
simulator ground truth. Sweeps run grids of noise levels, delays, and
pipeline flags with per-cell paired seeds, so on/off comparisons are
noise-for-noise fair.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .diffusion import ConditionPriorDenoiser, fit_codec, make_schedule, sample
from .geometry import DetectedBox, Pose2, compose, relative, rotated_iou, wrap_angle
from .matching import Assignment, MatchParams, match_agents, transform_boxes
from .posegraph import SolverOptions, build_pose_graph, solve_lm
from .scenario import (
    GridConfig,
    NoiseConfig,
    SceneParams,
    build_message,
    generate_scene,
    observe,
    synthesize_feature,
    visible_ids,
)

RESULTS_SCHEMA = "cocalib-results-v1"

# Conventions baked into the metrics (also recorded in result metadata):
# all-point interpolated AP; precision defaults to 1.0 when there are no
# predictions; team detections are NMS-merged before AP scoring.
AP_VARIANT = "all-point-interpolation"
EMPTY_PRECISION = 1.0
NMS_IOU = 0.5


@dataclass(frozen=True)
class DiffusionParams:
    timesteps: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 8
    sampler: str = "ddpm"
    codec_rate: int = 32

    def __post_init__(self):
        if self.sampler not in ("ddpm", "ddim"):
            raise ValueError(f"sampler must be 'ddpm' or 'ddim', got {self.sampler!r}")
        if not 1 <= self.sample_steps <= self.timesteps:
            raise ValueError("sample_steps must be in [1, timesteps]")


@dataclass(frozen=True)
class TrialResult:
    sigma_t: float
    sigma_r: float
    delay: float
    pcm: bool
    tcm: bool
    seed: int
    precision: float
    recall: float
    f1: float
    trans_rmse_before: float
    trans_rmse_after: float
    rot_rmse_before: float
    rot_rmse_after: float
    iou_before: float
    iou_after: float
    ap50: float
    ap70: float
    solver_iterations: int = 0
    solver_converged: bool = True
    feature_mse_delayed: float | None = None
    feature_mse_fused: float | None = None

    def __post_init__(self):
        for rate in (self.precision, self.recall, self.f1):
            if not 0.0 <= rate <= 1.0:
                raise ValueError("rates must lie in [0, 1]")
        for v in (
            self.trans_rmse_before,
            self.trans_rmse_after,
            self.rot_rmse_before,
            self.rot_rmse_after,
        ):
            if v < 0:
                raise ValueError("RMSE values must be >= 0")


def assignment_metrics(
    pred: Assignment | set[tuple[int, int]], truth: set[tuple[int, int]]
) -> tuple[float, float, float]:
    """Precision/recall/F1 of predicted pairs against the true correspondence.

    With no predictions, precision is reported as 1.0 by convention (nothing
    asserted, nothing wrong); recall handles the empty truth the same way.
    """
    pred_pairs = pred.pair_set() if isinstance(pred, Assignment) else set(pred)
    tp = len(pred_pairs & truth)
    precision = tp / len(pred_pairs) if pred_pairs else EMPTY_PRECISION
    recall = tp / len(truth) if truth else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def pose_rmse(
    estimated: dict[int, Pose2], true: dict[int, Pose2]
) -> tuple[float, float]:
    """(translation RMSE in meters, rotation RMSE in degrees) over agents."""
    if set(estimated) != set(true):
        raise ValueError("estimated and true pose id sets must match")
    if not estimated:
        return 0.0, 0.0
    t_sq = r_sq = 0.0
    for aid, est in estimated.items():
        ref = true[aid]
        t_sq += (est.x - ref.x) ** 2 + (est.y - ref.y) ** 2
        r_sq += math.degrees(wrap_angle(est.theta - ref.theta)) ** 2
    n = len(estimated)
    return math.sqrt(t_sq / n), math.sqrt(r_sq / n)


def average_precision(
    detections: list[DetectedBox], gt_boxes: list[DetectedBox], iou_threshold: float
) -> float:
    """All-point interpolated average precision.

    Detections are taken in descending confidence (ties broken by input
    order); each is a true positive if its best-IoU unconsumed ground-truth
    box clears the threshold, and every ground truth can be consumed once.
    """
    if not gt_boxes:
        return 1.0 if not detections else 0.0
    if not detections:
        return 0.0
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    consumed = [False] * len(gt_boxes)
    tp = np.zeros(len(detections))
    for rank, di in enumerate(order):
        best_iou, best_g = 0.0, None
        for g, gt in enumerate(gt_boxes):
            if consumed[g]:
                continue
            iou = rotated_iou(detections[di], gt)
            if iou > best_iou:
                best_iou, best_g = iou, g
        if best_g is not None and best_iou >= iou_threshold:
            tp[rank] = 1.0
            consumed[best_g] = True
    cum_tp = np.cumsum(tp)
    recall = cum_tp / len(gt_boxes)
    precision = cum_tp / np.arange(1, len(detections) + 1)
    # precision envelope, then area under the stepwise PR curve
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def nms(boxes: list[DetectedBox], iou_threshold: float = NMS_IOU) -> list[DetectedBox]:
    """Greedy non-maximum suppression by confidence (deterministic ties)."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].confidence, i))
    kept: list[DetectedBox] = []
    for i in order:
        if all(rotated_iou(boxes[i], k) < iou_threshold for k in kept):
            kept.append(boxes[i])
    return kept


def _truth_pairs(ids_a: list[int], ids_b: list[int]) -> set[tuple[int, int]]:
    index_b = {oid: j for j, oid in enumerate(ids_b)}
    return {(i, index_b[oid]) for i, oid in enumerate(ids_a) if oid in index_b}


def calibrate_scene(
    scene,
    noise: NoiseConfig,
    pcm: bool = True,
    tcm: bool = False,
    seed: int = 0,
    match_params: MatchParams = MatchParams(),
    solver: SolverOptions = SolverOptions(),
    diffusion: DiffusionParams = DiffusionParams(),
    grid: GridConfig = GridConfig(),
) -> tuple[TrialResult, dict]:
    """Run the pipeline on a given scene; returns the scored TrialResult
    plus a details dict (per-agent errors, solver report) for reporting."""
    ego = scene.agents[0]
    senders = [a for a in scene.agents if a.id != ego.id]
    msg_rng = np.random.default_rng([seed, noise.rng_seed, 1])

    ego_boxes = observe(scene, ego.id, noise, msg_rng)
    ego_ids = visible_ids(scene, ego.id)
    messages = {a.id: build_message(scene, a.id, noise, msg_rng, grid) for a in senders}
    sender_ids = {a.id: visible_ids(scene, a.id, time_offset=-noise.delay) for a in senders}

    boxes_of = {ego.id: ego_boxes, **{j: list(m.boxes) for j, m in messages.items()}}
    ids_of = {ego.id: ego_ids, **sender_ids}
    est_pose = {ego.id: ego.pose, **{j: m.reported_pose for j, m in messages.items()}}
    true_pose = {a.id: a.pose for a in scene.agents}

    assignments: dict[tuple[int, int], Assignment] = {}
    tp = pred_n = truth_n = 0
    for a, b in combinations(sorted(boxes_of), 2):
        rel_est = relative(est_pose[a], est_pose[b])
        assign = match_agents(boxes_of[a], boxes_of[b], rel_est, match_params)
        assignments[(a, b)] = assign
        truth = _truth_pairs(ids_of[a], ids_of[b])
        tp += len(assign.pair_set() & truth)
        pred_n += len(assign.pairs)
        truth_n += len(truth)
    precision = tp / pred_n if pred_n else EMPTY_PRECISION
    recall = tp / truth_n if truth_n else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0

    solver_iters = 0
    solver_ok = True
    solve_report = None
    opt_pose = dict(est_pose)
    if pcm and senders:
        floor = 1e-3
        prior = (
            max(noise.sigma_t, floor),
            max(noise.sigma_t, floor),
            max(math.radians(noise.sigma_r), floor),
        )
        problem = build_pose_graph(
            assignments, messages.values(), ego_boxes, ego.id, ego.pose, prior
        )
        state, solve_report = solve_lm(problem, solver)
        solver_iters = solve_report.iterations
        solver_ok = solve_report.converged
        opt_pose = dict(state.agents)

    collab_ids = [a.id for a in senders]
    before = {j: est_pose[j] for j in collab_ids}
    after = {j: opt_pose[j] for j in collab_ids}
    truth_poses = {j: true_pose[j] for j in collab_ids}
    trmse_b, rrmse_b = pose_rmse(before, truth_poses)
    trmse_a, rrmse_a = pose_rmse(after, truth_poses)

    obj_by_id = {o.id: o for o in scene.objects}

    def alignment_iou(pose_map: dict[int, Pose2]) -> float:
        ious = []
        for j in collab_ids:
            rel = relative(ego.pose, pose_map[j])
            for box, oid in zip(boxes_of[j], ids_of[j]):
                obj = obj_by_id[oid]
                truth_box = DetectedBox(
                    relative(ego.pose, obj.pose), obj.half_length, obj.half_width
                )
                moved = DetectedBox(
                    compose(rel, box.center), box.half_length, box.half_width
                )
                ious.append(rotated_iou(moved, truth_box))
        return float(np.mean(ious)) if ious else 1.0

    iou_before = alignment_iou(est_pose)
    iou_after = alignment_iou(opt_pose) if pcm else iou_before

    final_pose = opt_pose if pcm else est_pose
    team: list[DetectedBox] = list(ego_boxes)
    for j in collab_ids:
        team.extend(transform_boxes(boxes_of[j], relative(ego.pose, final_pose[j])))
    team = nms(team)
    gt_ids = sorted({oid for ids in ids_of.values() for oid in ids})
    gt_boxes = [
        DetectedBox(
            relative(ego.pose, obj_by_id[g].pose),
            obj_by_id[g].half_length,
            obj_by_id[g].half_width,
        )
        for g in gt_ids
    ]
    ap50 = average_precision(team, gt_boxes, 0.5)
    ap70 = average_precision(team, gt_boxes, 0.7)

    mse_delayed = mse_fused = None
    if tcm and senders:
        sched = make_schedule(diffusion.timesteps, diffusion.beta_start, diffusion.beta_end)
        clean_cfg = NoiseConfig()
        ego_feature = synthesize_feature(ego_boxes, grid)
        codec = fit_codec(
            [ego_feature.grid] + [m.feature.grid for m in messages.values()],
            diffusion.codec_rate,
        )
        z_ego = codec.encode(ego_feature.grid)
        diff_rng = np.random.default_rng([seed, noise.rng_seed, 2])
        d_acc, f_acc = [], []
        for j in collab_ids:
            ref_rng = np.random.default_rng([seed, noise.rng_seed, 3, j])
            clean = synthesize_feature(
                observe(scene, j, clean_cfg, ref_rng), grid
            ).grid
            delayed = messages[j].feature.grid
            z_delayed = codec.encode(delayed)
            denoiser = ConditionPriorDenoiser(sched)
            z_fused = sample(
                denoiser,
                [z_ego, z_delayed],
                sched,
                diffusion.sample_steps,
                kind=diffusion.sampler,
                rng=diff_rng,
                shape=z_delayed.shape,
            )
            fused = codec.decode(z_fused)
            d_acc.append(float(np.mean((delayed - clean) ** 2)))
            f_acc.append(float(np.mean((fused - clean) ** 2)))
        mse_delayed = float(np.mean(d_acc))
        mse_fused = float(np.mean(f_acc))

    result = TrialResult(
        sigma_t=noise.sigma_t,
        sigma_r=noise.sigma_r,
        delay=noise.delay,
        pcm=pcm,
        tcm=tcm,
        seed=seed,
        precision=precision,
        recall=recall,
        f1=f1,
        trans_rmse_before=trmse_b,
        trans_rmse_after=trmse_a,
        rot_rmse_before=rrmse_b,
        rot_rmse_after=rrmse_a,
        iou_before=iou_before,
        iou_after=iou_after,
        ap50=ap50,
        ap70=ap70,
        solver_iterations=solver_iters,
        solver_converged=solver_ok,
        feature_mse_delayed=mse_delayed,
        feature_mse_fused=mse_fused,
    )

    agent_errors = {}
    for j in collab_ids:
        agent_errors[j] = {
            "before": _pose_error(est_pose[j], true_pose[j]),
            "after": _pose_error(opt_pose[j], true_pose[j]),
        }
    details = {
        "agent_errors": agent_errors,
        "solver": None
        if solve_report is None
        else {
            "iterations": solve_report.iterations,
            "initial_cost": solve_report.initial_cost,
            "final_cost": solve_report.final_cost,
            "converged": solve_report.converged,
            "message": solve_report.message,
        },
    }
    return result, details


def _pose_error(est: Pose2, true: Pose2) -> tuple[float, float]:
    """(translation error m, heading error deg) of one pose estimate."""
    return (
        math.hypot(est.x - true.x, est.y - true.y),
        abs(math.degrees(wrap_angle(est.theta - true.theta))),
    )


def run_trial(
    scene_params: SceneParams,
    noise: NoiseConfig,
    pcm: bool = True,
    tcm: bool = False,
    seed: int = 0,
    match_params: MatchParams = MatchParams(),
    solver: SolverOptions = SolverOptions(),
    diffusion: DiffusionParams = DiffusionParams(),
    grid: GridConfig = GridConfig(),
) -> TrialResult:
    """Generate a scene for `seed` and run the pipeline once on it."""
    scene = generate_scene(scene_params, seed)
    result, _ = calibrate_scene(
        scene,
        noise,
        pcm=pcm,
        tcm=tcm,
        seed=seed,
        match_params=match_params,
        solver=solver,
        diffusion=diffusion,
        grid=grid,
    )
    return result


def trial_seed(base_seed: int, level_idx: int, delay_idx: int, trial_idx: int) -> int:
    """Stable per-cell trial seed, shared across flag configurations so
    on/off comparisons are paired."""
    ss = np.random.SeedSequence((base_seed, level_idx, delay_idx, trial_idx))
    return int(ss.generate_state(1)[0])


def run_sweep(
    scene_params: SceneParams,
    noise_levels: list[tuple[float, float]],
    delays: list[float],
    flag_configs: list[tuple[bool, bool]],
    trials: int,
    base_seed: int = 0,
    detection_sigma: tuple[float, float, float] = (0.1, 0.1, 0.01),
    match_params: MatchParams = MatchParams(),
    solver: SolverOptions = SolverOptions(),
    diffusion: DiffusionParams = DiffusionParams(),
    grid: GridConfig = GridConfig(),
    n_jobs: int = 1,
) -> list[TrialResult]:
    """Grid sweep over noise levels x delays x flag configs, `trials` seeded
    runs per cell. Output order is fixed (sorted) regardless of n_jobs."""
    if not noise_levels or not delays or not flag_configs or trials < 1:
        raise ValueError("sweep grid and trial count must be nonempty")
    tasks = []
    for li, (sigma_t, sigma_r) in enumerate(noise_levels):
        for di, delay in enumerate(delays):
            noise = NoiseConfig(
                sigma_t=sigma_t,
                sigma_r=sigma_r,
                delay=delay,
                detection_sigma=detection_sigma,
            )
            for pcm, tcm in flag_configs:
                for ti in range(trials):
                    tasks.append((noise, pcm, tcm, trial_seed(base_seed, li, di, ti)))

    def one(noise, pcm, tcm, seed):
        return run_trial(
            scene_params,
            noise,
            pcm=pcm,
            tcm=tcm,
            seed=seed,
            match_params=match_params,
            solver=solver,
            diffusion=diffusion,
            grid=grid,
        )

    if n_jobs == 1:
        results = [one(*task) for task in tasks]
    else:
        results = Parallel(n_jobs=n_jobs)(delayed(one)(*task) for task in tasks)
    return sorted(
        results, key=lambda r: (r.sigma_t, r.sigma_r, r.delay, r.pcm, r.tcm, r.seed)
    )


CSV_FIELDS = [
    "sigma_t",
    "sigma_r",
    "delay",
    "pcm",
    "tcm",
    "seed",
    "precision",
    "recall",
    "f1",
    "trans_rmse_before",
    "trans_rmse_after",
    "rot_rmse_before",
    "rot_rmse_after",
    "iou_before",
    "iou_after",
    "ap50",
    "ap70",
    "solver_iterations",
    "solver_converged",
    "feature_mse_delayed",
    "feature_mse_fused",
]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def results_to_csv(results: list[TrialResult]) -> str:
    """One row per trial; floats rendered with repr so repeated runs with
    the same seeds are byte-identical."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in results:
        d = asdict(r)
        writer.writerow([_cell(d[k]) for k in CSV_FIELDS])
    return buf.getvalue()


def results_from_csv(text: str) -> list[TrialResult]:
    """Parse rows written by results_to_csv back into TrialResults."""
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for row in reader:
        kwargs = {}
        for key in CSV_FIELDS:
            raw = row[key]
            if key in ("pcm", "tcm", "solver_converged"):
                kwargs[key] = raw == "1"
            elif key in ("seed", "solver_iterations"):
                kwargs[key] = int(raw)
            elif key in ("feature_mse_delayed", "feature_mse_fused"):
                kwargs[key] = None if raw == "" else float(raw)
            else:
                kwargs[key] = float(raw)
        out.append(TrialResult(**kwargs))
    return out


def aggregate_results(results: list[TrialResult]) -> list[dict]:
    """Per-cell summary (mean/std/median of the key metrics), sorted."""
    cells: dict[tuple, list[TrialResult]] = {}
    for r in results:
        cells.setdefault((r.sigma_t, r.sigma_r, r.delay, r.pcm, r.tcm), []).append(r)
    rows = []
    for key in sorted(cells):
        group = cells[key]
        sigma_t, sigma_r, delay, pcm, tcm = key
        row = {
            "sigma_t": sigma_t,
            "sigma_r": sigma_r,
            "delay": delay,
            "pcm": pcm,
            "tcm": tcm,
            "trials": len(group),
        }
        for metric in (
            "f1",
            "trans_rmse_before",
            "trans_rmse_after",
            "iou_before",
            "iou_after",
            "ap50",
            "ap70",
        ):
            vals = np.array([getattr(r, metric) for r in group], dtype=float)
            row[f"{metric}_mean"] = float(vals.mean())
            row[f"{metric}_std"] = float(vals.std())
            row[f"{metric}_median"] = float(np.median(vals))
        rows.append(row)
    return rows


def summary_dict(results: list[TrialResult]) -> dict:
    return {
        "schema": RESULTS_SCHEMA,
        "ap_variant": AP_VARIANT,
        "empty_precision_convention": EMPTY_PRECISION,
        "nms_iou": NMS_IOU,
        "cells": aggregate_results(results),
    }


def write_results(results: list[TrialResult], out_dir: str | Path) -> tuple[Path, Path]:
    """Emit trials.csv and summary.json under out_dir; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "trials.csv"
    json_path = out / "summary.json"
    csv_path.write_text(results_to_csv(results))
    json_path.write_text(json.dumps(summary_dict(results), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
