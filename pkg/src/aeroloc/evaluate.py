"""Localization benchmark and experiment harness.

Pose error is measured between camera centers (translation) and as the
angle of the relative rotation (arc-cosine of the clamped trace form).
Success at a (tau_t, tau_r) threshold requires both errors at or below
their bounds; queries that failed to localize count against every
threshold rather than being dropped.

The experiment driver renders one database per variant of the view-grid
layout, localizes a shared query set against each, and reports per-variant
benchmark buckets plus retrieval metrics, all deterministically.

Report CSVs:
  benchmark: variant,threshold_m,threshold_deg,success_pct,n_queries,n_failed
  per-query: query,t_err_m,r_err_deg,iterations,early_stop,retrieval_rank_of_best_ref
  retrieval: query,rank,name,distance,prefiltered_count,correct
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pipeline, retrieval, scene, viewgen
from .dataio import DatasetManifest, PipelineConfig, QueryRecord, load_queries
from .errors import AeroLocError
from .geom import Intrinsics, Pose
from .pipeline import QueryResult
from .scene import Heightfield, RenderedView
from .viewgen import ViewGridSpec

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = ((1.0, 1.0), (3.0, 3.0), (5.0, 5.0))


class EmptyInput(AeroLocError):
    """Benchmark or experiment invoked with nothing to evaluate."""


@dataclass(frozen=True)
class PoseError:
    translation_m: float
    rotation_deg: float

    def __post_init__(self):
        if self.translation_m < 0 or not 0 <= self.rotation_deg <= 180:
            raise ValueError("invalid pose error")


def pose_error(est: Pose, gt: Pose) -> PoseError:
    """Center distance plus relative rotation angle between two poses."""
    t = float(np.linalg.norm(est.center() - gt.center()))
    c = (np.trace(est.rotation @ gt.rotation.T) - 1.0) / 2.0
    r = math.degrees(math.acos(max(-1.0, min(1.0, c))))
    return PoseError(translation_m=t, rotation_deg=r)


def benchmark(errors: list[PoseError | None],
              thresholds=DEFAULT_THRESHOLDS) -> list[float]:
    """Success percentage (2 decimals) per threshold; None entries are
    failed localizations and exceed every threshold."""
    if not errors:
        raise EmptyInput("no pose errors to bucket")
    out = []
    n = len(errors)
    for tau_t, tau_r in thresholds:
        good = sum(1 for e in errors
                   if e is not None and e.translation_m <= tau_t and e.rotation_deg <= tau_r)
        out.append(round(100.0 * good / n, 2))
    return out


@dataclass(frozen=True)
class ExperimentVariant:
    name: str
    levels: tuple[tuple[float, float], ...]
    pitches: tuple[float, ...]
    yaw_interval_deg: float


@dataclass
class ExperimentConfig:
    scene_path: Path
    queries_path: Path
    out_dir: Path
    variants: list[ExperimentVariant]
    pipeline_cfg: PipelineConfig = field(default_factory=PipelineConfig)
    thresholds: tuple = DEFAULT_THRESHOLDS
    bounds: tuple[float, float, float, float] | None = None  # default: scene bounds
    oracle_stride: int = 8
    compute_oracle: bool = True
    sun_dir: tuple[float, float, float] = (0.35, 0.2, 0.9)
    jobs: int = 1


@dataclass
class VariantReport:
    name: str
    success_pct: list[float]
    n_queries: int
    n_failed: int
    recall_at_1: float | None
    recall_at_k: float | None
    precision_at_k: float | None
    results: list[QueryResult]
    errors: list[PoseError | None]


@dataclass
class ExperimentReport:
    variants: list[VariantReport]
    benchmark_csv: Path
    summary_path: Path


def _query_view(dataset: DatasetManifest, q: QueryRecord) -> RenderedView | None:
    depth_path = dataset.query_depth(q)
    if depth_path is None or q.gt_pose is None:
        return None
    rgb = scene.load_pgm(dataset.query_rgb(q))
    depth = scene.load_depth(depth_path)
    return RenderedView(rgb=rgb, depth=depth, pose=q.gt_pose, intrinsics=q.intrinsics)


def _ref_view(cache: pipeline.ReferenceCache, name: str) -> RenderedView:
    rec = cache.record(name)
    ref = cache.view(name)
    rgb = scene.load_pgm(cache.manifest.rgb_file(rec))
    return RenderedView(rgb=rgb, depth=ref.depth, pose=rec.pose, intrinsics=rec.intrinsics)


def evaluate_variant(name: str, dataset: DatasetManifest, cfg: PipelineConfig,
                     thresholds, oracle_stride: int = 8,
                     compute_oracle: bool = True, jobs: int = 1,
                     out_dir: Path | None = None) -> VariantReport:
    """Localize every query against one database and score the results."""
    index = pipeline.build_index(dataset.database)
    results = pipeline.localize_dataset(dataset, cfg, index=index, jobs=jobs)
    cache = pipeline.ReferenceCache(manifest=dataset.database,
                                    max_keypoints=cfg.matching_max_keypoints)

    errors: list[PoseError | None] = []
    for q, res in zip(dataset.queries, results):
        if res.estimate is None or q.gt_pose is None:
            errors.append(None)
        else:
            errors.append(pose_error(res.estimate.pose, q.gt_pose))

    ranked_lists = {r.name: [nm for nm, _ in r.retrieved] for r in results}
    correct_sets: dict[str, set] = {}
    best_rank: dict[str, int] = {}
    r1 = rk = pk = None
    if compute_oracle:
        overlap_cache: dict[tuple[str, str], float] = {}
        for q, res in zip(dataset.queries, results):
            qview = _query_view(dataset, q)
            if qview is None:
                continue
            correct = set()
            for nm in ranked_lists[res.name]:
                try:
                    ov = retrieval.overlap_percentage(qview, _ref_view(cache, nm),
                                                      stride=oracle_stride)
                except retrieval.NoValidDepth:
                    ov = 0.0
                overlap_cache[(q.name, nm)] = ov
                if ov > 0.5:
                    correct.add(nm)
            correct_sets[q.name] = correct
            # Rank (1-based) of the best-overlap database image, 0 if absent.
            best_name = None
            best_ov = -1.0
            for rec in dataset.database.records:
                ov = overlap_cache.get((q.name, rec.name))
                if ov is None:
                    try:
                        ov = retrieval.overlap_percentage(qview, _ref_view(cache, rec.name),
                                                          stride=oracle_stride)
                    except retrieval.NoValidDepth:
                        ov = 0.0
                if ov > best_ov:
                    best_ov = ov
                    best_name = rec.name
            ranked = ranked_lists[res.name]
            best_rank[q.name] = ranked.index(best_name) + 1 if best_name in ranked else 0
        if correct_sets:
            r1, _ = retrieval.retrieval_metrics(ranked_lists, correct_sets, 1)
            rk, pk = retrieval.retrieval_metrics(ranked_lists, correct_sets,
                                                 cfg.retrieval_topk)

    n_failed = sum(1 for e in errors if e is None)
    report = VariantReport(name=name, success_pct=benchmark(errors, thresholds),
                           n_queries=len(errors), n_failed=n_failed,
                           recall_at_1=r1, recall_at_k=rk, precision_at_k=pk,
                           results=results, errors=errors)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_per_query_csv(out_dir / "per_query.csv", dataset, results, errors, best_rank)
        rows = []
        for res in results:
            for rank, (nm, dist) in enumerate(res.retrieved, start=1):
                correct = None
                if res.name in correct_sets:
                    correct = nm in correct_sets[res.name]
                rows.append({"query": res.name, "rank": rank, "name": nm,
                             "distance": dist,
                             "prefiltered_count": res.prefiltered_count,
                             "correct": correct})
        retrieval.write_retrieval_report(out_dir / "retrieval.csv", rows)
    return report


def write_per_query_csv(path, dataset: DatasetManifest, results: list[QueryResult],
                        errors: list[PoseError | None], best_rank: dict[str, int]):
    lines = ["query,t_err_m,r_err_deg,iterations,early_stop,retrieval_rank_of_best_ref"]
    for res, err in zip(results, errors):
        t_s = "" if err is None else f"{err.translation_m:.6f}"
        r_s = "" if err is None else f"{err.rotation_deg:.6f}"
        its = "" if res.estimate is None else str(res.estimate.iterations_run)
        early = "" if res.estimate is None else str(int(res.estimate.early_stopped_by_gravity))
        rank = str(best_rank.get(res.name, "")) if best_rank else ""
        lines.append(f"{res.name},{t_s},{r_s},{its},{early},{rank}")
    Path(path).write_text("\n".join(lines) + "\n")


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Render per-variant databases, localize the shared query set against
    each, and emit benchmark + retrieval reports plus a text summary."""
    if not cfg.variants:
        raise EmptyInput("experiment has no variants")
    hf = Heightfield.load(cfg.scene_path)
    queries = load_queries(cfg.queries_path)
    if not queries:
        raise EmptyInput("experiment has no queries")
    if not all(q.intrinsics == queries[0].intrinsics for q in queries):
        logger.warning("queries carry mixed intrinsics; database uses the first")
    K = queries[0].intrinsics
    bounds = cfg.bounds if cfg.bounds is not None else hf.bounds
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    reports = []
    for variant in cfg.variants:
        vdir = out_dir / variant.name
        spec = ViewGridSpec(levels=variant.levels, pitches=variant.pitches,
                            yaw_interval_deg=variant.yaw_interval_deg,
                            bounds=tuple(bounds))
        manifest = viewgen.render_database(hf, spec, K, vdir / "db",
                                           sun_dir=cfg.sun_dir, jobs=cfg.jobs)
        dataset = DatasetManifest(root=out_dir, scene_path=Path(cfg.scene_path),
                                  database=manifest, queries=queries,
                                  queries_dir=Path(cfg.queries_path).parent)
        report = evaluate_variant(variant.name, dataset, cfg.pipeline_cfg,
                                  cfg.thresholds, oracle_stride=cfg.oracle_stride,
                                  compute_oracle=cfg.compute_oracle, jobs=cfg.jobs,
                                  out_dir=vdir)
        reports.append(report)

    bench_path = out_dir / "benchmark.csv"
    lines = ["variant,threshold_m,threshold_deg,success_pct,n_queries,n_failed"]
    for rep in reports:
        for (tau_t, tau_r), pct in zip(cfg.thresholds, rep.success_pct):
            lines.append(f"{rep.name},{tau_t:g},{tau_r:g},{pct:.2f},"
                         f"{rep.n_queries},{rep.n_failed}")
    bench_path.write_text("\n".join(lines) + "\n")

    summary_path = out_dir / "summary.txt"
    slines = ["localization experiment summary", ""]
    for rep in reports:
        buckets = " / ".join(f"{pct:.2f}" for pct in rep.success_pct)
        ths = " / ".join(f"({t:g}m,{r:g}deg)" for t, r in cfg.thresholds)
        slines.append(f"variant {rep.name}: {buckets} at {ths}; "
                      f"{rep.n_failed}/{rep.n_queries} failed")
        if rep.recall_at_1 is not None:
            slines.append(f"  retrieval R@1 {rep.recall_at_1:.2f}  "
                          f"R@{cfg.pipeline_cfg.retrieval_topk} {rep.recall_at_k:.2f}  "
                          f"P@{cfg.pipeline_cfg.retrieval_topk} {rep.precision_at_k:.2f}")
    summary_path.write_text("\n".join(slines) + "\n")
    return ExperimentReport(variants=reports, benchmark_csv=bench_path,
                            summary_path=summary_path)
