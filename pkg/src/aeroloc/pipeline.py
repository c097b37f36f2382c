"""Online localization: retrieval -> matching -> lifting -> robust PnP.

Per query: embed the image, pre-filter the database by the rotation prior
(when present and enabled), rank the survivors by descriptor distance,
match local features against each of the top-k references, lift the 2D-2D
matches through the reference depth maps, pool the correspondences in
manifest order, and hand them to the gravity-guided RANSAC.

Reference keypoints and depth maps are cached per database image, so
localizing many queries against one database pays detection costs once.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import matching, retrieval, scene
from .dataio import DatasetManifest, PipelineConfig, QueryRecord
from .errors import AeroLocError
from .geom import Intrinsics, Pose
from .matching import RefView
from .pnp import NoModelFound, PoseEstimate, RansacConfig, TooFewCorrespondences, ransac_pnp
from .retrieval import GlobalDescriptor, RetrievalIndex
from .viewgen import DatabaseManifest, ViewRecord

logger = logging.getLogger(__name__)


@dataclass
class QueryResult:
    name: str
    estimate: PoseEstimate | None
    retrieved: list[tuple[str, float]]
    prefiltered_count: int
    prefilter_fail_open: bool
    n_correspondences: int
    failure: str | None = None


@dataclass
class ReferenceCache:
    """Lazily loaded per-database-image artifacts."""

    manifest: DatabaseManifest
    max_keypoints: int
    _records: dict[str, ViewRecord] = field(default_factory=dict)
    _views: dict[str, RefView] = field(default_factory=dict)
    _keypoints: dict[str, list] = field(default_factory=dict)

    def __post_init__(self):
        self._records = {r.name: r for r in self.manifest.records}

    def record(self, name: str) -> ViewRecord:
        return self._records[name]

    def view(self, name: str) -> RefView:
        if name not in self._views:
            rec = self._records[name]
            depth = scene.load_depth(self.manifest.depth_file(rec))
            self._views[name] = RefView(pose=rec.pose, intrinsics=rec.intrinsics,
                                        depth=depth)
        return self._views[name]

    def keypoints(self, name: str) -> list:
        if name not in self._keypoints:
            rec = self._records[name]
            rgb = scene.load_pgm(self.manifest.rgb_file(rec))
            self._keypoints[name] = matching.detect_and_describe(
                rgb, max_kp=self.max_keypoints)
        return self._keypoints[name]


def build_index(manifest: DatabaseManifest,
                descriptors: dict[str, GlobalDescriptor] | None = None) -> RetrievalIndex:
    """Retrieval index over a database manifest; descriptors are computed
    from the rendered images unless supplied (e.g. ingested from a file)."""
    if descriptors is None:
        descriptors = {}
        for rec in manifest.records:
            rgb = scene.load_pgm(manifest.rgb_file(rec))
            descriptors[rec.name] = retrieval.compute_descriptor(rgb)
    return RetrievalIndex.build(manifest.records, descriptors)


def query_seed(base_seed: int, name: str) -> int:
    """Stable per-query RANSAC seed independent of query order."""
    return (base_seed * 1000003 + zlib.crc32(name.encode())) % (2 ** 63)


def localize_query(rgb: np.ndarray, K: Intrinsics, query_name: str,
                   index: RetrievalIndex, cache: ReferenceCache,
                   cfg: PipelineConfig, prior=None) -> QueryResult:
    desc = retrieval.compute_descriptor(rgb)
    if prior is not None and cfg.use_prior:
        pre = retrieval.prefilter_by_rotation(prior, index, cfg.retrieval_gamma_o_deg)
        candidates = pre.entries
        fail_open = pre.fail_open
    else:
        candidates = index.entries
        fail_open = False
    prefiltered_count = len(candidates)
    if not candidates:
        return QueryResult(name=query_name, estimate=None, retrieved=[],
                           prefiltered_count=0, prefilter_fail_open=fail_open,
                           n_correspondences=0, failure="prefilter removed all candidates")
    ranked = retrieval.query_topk(desc, candidates, cfg.retrieval_topk)

    query_kps = matching.detect_and_describe(rgb, max_kp=cfg.matching_max_keypoints)
    # Pool correspondences over the retrieved references in manifest order.
    ranked_names = {name for name, _ in ranked}
    corrs = []
    for rec in cache.manifest.records:
        if rec.name not in ranked_names:
            continue
        ref_kps = cache.keypoints(rec.name)
        pairs = matching.match_features(query_kps, ref_kps, ratio=cfg.matching_ratio,
                                        ref_name=rec.name)
        corrs.extend(matching.lift_matches(pairs, {rec.name: cache.view(rec.name)}))

    ransac_cfg = RansacConfig(
        max_iters=cfg.ransac_max_iters, reproj_thresh=cfg.ransac_reproj_px,
        confidence=cfg.ransac_confidence,
        gravity_thresh_deg=cfg.ransac_gamma_eps_deg,
        min_inlier_ratio_for_early_stop=cfg.ransac_min_inlier_ratio,
        seed=query_seed(cfg.ransac_seed, query_name),
        reject_by_gravity=cfg.ransac_reject_by_gravity)
    ransac_prior = prior if (prior is not None and cfg.use_prior) else None
    try:
        estimate = ransac_pnp(corrs, K=K, prior=ransac_prior, cfg=ransac_cfg)
        failure = None
    except (TooFewCorrespondences, NoModelFound) as e:
        estimate = None
        failure = type(e).__name__
    return QueryResult(name=query_name, estimate=estimate, retrieved=ranked,
                       prefiltered_count=prefiltered_count,
                       prefilter_fail_open=fail_open,
                       n_correspondences=len(corrs), failure=failure)


def localize_dataset(dataset: DatasetManifest, cfg: PipelineConfig,
                     index: RetrievalIndex | None = None,
                     jobs: int = 1) -> list[QueryResult]:
    """Run the online pipeline over every query in the dataset.

    Results come back in query-manifest order regardless of job count.
    """
    if index is None:
        index = build_index(dataset.database)
    cache = ReferenceCache(manifest=dataset.database,
                           max_keypoints=cfg.matching_max_keypoints)

    def run_one(q: QueryRecord) -> QueryResult:
        rgb = scene.load_pgm(dataset.query_rgb(q))
        try:
            return localize_query(rgb, q.intrinsics, q.name, index, cache, cfg,
                                  prior=q.prior)
        except AeroLocError as e:
            logger.warning("query %s failed: %s", q.name, e)
            return QueryResult(name=q.name, estimate=None, retrieved=[],
                               prefiltered_count=0, prefilter_fail_open=False,
                               n_correspondences=0, failure=type(e).__name__)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_one, dataset.queries))
    return [run_one(q) for q in dataset.queries]
