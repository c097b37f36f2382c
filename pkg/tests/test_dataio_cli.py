import numpy as np
import pytest

from aeroloc import cli, dataio, evaluate, geom, pipeline, retrieval, scene, viewgen
from aeroloc.dataio import PipelineConfig, QueryRecord, load_manifest, load_queries, save_queries
from aeroloc.errors import MissingFile, ParseError
from aeroloc.geom import Intrinsics, Pose


SMALL_CAM = ["--fx", "140", "--fy", "140", "--width", "160", "--height", "120"]


def run_cli(*args) -> int:
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    """Tiny rendered dataset: scene, 2x2-position single-level db, 4 queries."""
    root = tmp_path_factory.mktemp("ds")
    assert run_cli("gen-scene", "--extent", 150, "--buildings", 8, "--seed", 11,
                   "--out", root / "scene.uavh") == 0
    assert run_cli("gen-views", "--scene", root / "scene.uavh",
                   "--levels", "90:110", "--pitches", "45", "--yaw-interval", "90",
                   *SMALL_CAM, "--out", root / "db") == 0
    assert run_cli("gen-queries", "--scene", root / "scene.uavh", "--count", 4,
                   "--seed", 5, "--alt-min", 60, "--alt-max", 110,
                   "--pitch-min", 30, "--pitch-max", 60,
                   *SMALL_CAM, "--out", root / "queries") == 0
    (root / "dataset.cfg").write_text(
        "scene = scene.uavh\ndatabase = db/manifest.txt\nqueries = queries/queries.txt\n")
    return root


class TestConfig:
    def test_pinned_keys(self, tmp_path):
        cfg_path = tmp_path / "pipeline.cfg"
        cfg_path.write_text(
            "retrieval.topk = 5\n"
            "retrieval.gamma_o_deg = 25\n"
            "ransac.gamma_eps_deg = 3\n"
            "ransac.seed = 42\n"
            "matching.max_keypoints = 512\n"
            "views.levels = 100:50,150:75\n"
            "views.pitches = 0,45\n"
            "views.yaw_interval_deg = 45\n")
        cfg = PipelineConfig.load(cfg_path)
        assert cfg.retrieval_topk == 5
        assert cfg.retrieval_gamma_o_deg == 25.0
        assert cfg.ransac_gamma_eps_deg == 3.0
        assert cfg.ransac_seed == 42
        assert cfg.matching_max_keypoints == 512
        assert cfg.views_levels == ((100.0, 50.0), (150.0, 75.0))
        assert cfg.views_pitches == (0.0, 45.0)
        assert cfg.views_yaw_interval_deg == 45.0

    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.retrieval_topk == 3
        assert cfg.retrieval_gamma_o_deg == 30.0
        assert cfg.ransac_gamma_eps_deg == 2.0
        assert cfg.matching_max_keypoints == 2048

    def test_bad_line(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("retrieval.topk 3\n")
        with pytest.raises(ParseError):
            dataio.parse_config(p)


class TestQueryIO:
    def make_records(self):
        rng = np.random.default_rng(7)
        K = Intrinsics(fx=100.0, fy=100.0, cx=80.0, cy=60.0, width=160, height=120)
        out = []
        for i in range(3):
            from conftest import random_rotation
            pose = Pose(random_rotation(rng), rng.normal(size=3))
            prior = geom.SensorPrior(rotation=random_rotation(rng))
            out.append(QueryRecord(name=f"q{i}", rgb_path=f"q{i}.pgm", intrinsics=K,
                                   gt_pose=pose, prior=prior, depth_path=f"q{i}.uavd"))
        return out

    def test_round_trip(self, tmp_path):
        records = self.make_records()
        path = tmp_path / "queries.txt"
        save_queries(path, records)
        loaded = load_queries(path)
        assert len(loaded) == len(records)
        for a, b in zip(records, loaded):
            assert a.name == b.name
            assert a.intrinsics == b.intrinsics
            assert np.max(np.abs(a.gt_pose.rotation - b.gt_pose.rotation)) < 1e-12
            assert np.max(np.abs(a.gt_pose.translation - b.gt_pose.translation)) < 1e-12
            assert np.max(np.abs(a.prior.rotation - b.prior.rotation)) < 1e-12

    def test_duplicate_name(self, tmp_path):
        path = tmp_path / "queries.txt"
        path.write_text("q0 a.pgm 100 100 80 60 160 120\nq0 b.pgm 100 100 80 60 160 120\n")
        with pytest.raises(ParseError):
            load_queries(path)

    def test_off_norm_quaternion_renormalized(self, tmp_path):
        path = tmp_path / "queries.txt"
        path.write_text("q0 a.pgm 100 100 80 60 160 120 prior=2,0,0,0\n")
        loaded = load_queries(path)
        assert np.allclose(loaded[0].prior.rotation, np.eye(3))


class TestLoadManifest:
    def test_minimal_loads(self, small_dataset):
        ds = load_manifest(small_dataset / "dataset.cfg")
        assert len(ds.database.records) == 4 * 4  # 2x2 positions, 4 yaws
        assert len(ds.queries) == 4

    def test_missing_files_listed(self, small_dataset, tmp_path):
        cfg = tmp_path / "dataset.cfg"
        cfg.write_text("scene = nope.uavh\ndatabase = also_nope.txt\nqueries = missing.txt\n")
        with pytest.raises(MissingFile) as err:
            load_manifest(cfg)
        assert len(err.value.paths) == 3

    def test_name_collision(self, small_dataset, tmp_path):
        ds_root = small_dataset
        manifest = viewgen.DatabaseManifest.load(ds_root / "db" / "manifest.txt")
        q = load_queries(ds_root / "queries" / "queries.txt")[0]
        # Rewrite the query file using a database image name.
        clash = QueryRecord(name=manifest.records[0].name, rgb_path=q.rgb_path,
                            intrinsics=q.intrinsics, gt_pose=q.gt_pose,
                            prior=q.prior, depth_path=q.depth_path)
        save_queries(ds_root / "queries" / "clash.txt", [clash])
        cfg = tmp_path / "dataset.cfg"
        cfg.write_text(f"scene = {ds_root}/scene.uavh\n"
                       f"database = {ds_root}/db/manifest.txt\n"
                       f"queries = {ds_root}/queries/clash.txt\n")
        with pytest.raises(ParseError):
            load_manifest(cfg)


class TestCli:
    def test_unknown_flag_exits_1(self, capsys):
        assert run_cli("gen-scene", "--bogus-flag", "1", "--out", "x") == 1

    def test_unknown_command_exits_1(self):
        assert run_cli("frobnicate") == 1

    def test_missing_dataset_exits_2(self, tmp_path):
        assert run_cli("localize", "--dataset", tmp_path / "none.cfg",
                       "--out", tmp_path / "out") == 2

    def test_sixteen_views_per_position(self, tmp_path):
        assert run_cli("gen-scene", "--extent", 100, "--buildings", 3, "--seed", 2,
                       "--out", tmp_path / "s.uavh") == 0
        assert run_cli("gen-views", "--scene", tmp_path / "s.uavh",
                       "--levels", "80:100", "--pitches", "0,45", "--yaw-interval", 45,
                       *SMALL_CAM, "--out", tmp_path / "db") == 0
        manifest = viewgen.DatabaseManifest.load(tmp_path / "db" / "manifest.txt")
        positions = {(round(r.pose.center()[0], 3), round(r.pose.center()[1], 3))
                     for r in manifest.records}
        assert len(manifest.records) == len(positions) * 16

    def test_localize_and_evaluate(self, small_dataset, tmp_path):
        out = tmp_path / "loc"
        assert run_cli("localize", "--dataset", small_dataset / "dataset.cfg",
                       "--out", out) == 0
        est = (out / "estimates.csv").read_text().splitlines()
        assert est[0].startswith("query,status,")
        assert len(est) == 5
        assert (out / "benchmark.csv").exists()

    def test_track_command(self, tmp_path, flat_scene):
        flat_scene.save(tmp_path / "flat.uavh")
        (tmp_path / "rig.cfg").write_text(
            "wide.fx = 140\nwide.fy = 140\nwide.cx = 80\nwide.cy = 60\n"
            "wide.width = 160\nwide.height = 120\n"
            "zoom.fx = 140\nzoom.fy = 140\nzoom.cx = 80\nzoom.cy = 60\n"
            "zoom.width = 160\nzoom.height = 120\n"
            "rig.q = 1,0,0,0\nrig.t = 0,0,0\n")
        from conftest import aerial_rotation
        pose = Pose.from_center(aerial_rotation(0.0, 90.0), (50.0, 60.0, 80.0))
        q = geom.quat_from_rotation(pose.rotation)
        t = pose.translation
        (tmp_path / "poses.txt").write_text(
            f"0.0 {q[0]} {q[1]} {q[2]} {q[3]} {t[0]} {t[1]} {t[2]}\n")
        (tmp_path / "obs.txt").write_text("0.0 80 60\n")
        assert run_cli("track", "--scene", tmp_path / "flat.uavh",
                       "--rig", tmp_path / "rig.cfg", "--obs", tmp_path / "obs.txt",
                       "--poses", tmp_path / "poses.txt",
                       "--out", tmp_path / "track.csv") == 0
        track = __import__("aeroloc.tracking", fromlist=["TargetTrack"]).TargetTrack.load_csv(
            tmp_path / "track.csv")
        assert np.allclose(track.points[0], [50.0, 60.0, 0.0], atol=1e-3)

    def test_full_pipeline_deterministic(self, tmp_path):
        """gen-scene -> gen-views -> gen-queries -> localize -> evaluate,
        run twice with equal seeds, must give byte-identical reports."""
        outputs = []
        for run in ("a", "b"):
            root = tmp_path / run
            root.mkdir()
            assert run_cli("gen-scene", "--extent", 120, "--buildings", 5, "--seed", 3,
                           "--out", root / "scene.uavh") == 0
            assert run_cli("gen-views", "--scene", root / "scene.uavh",
                           "--levels", "80:120", "--pitches", "45",
                           "--yaw-interval", 90, *SMALL_CAM, "--out", root / "db") == 0
            assert run_cli("gen-queries", "--scene", root / "scene.uavh",
                           "--count", 3, "--seed", 9, "--alt-min", 60, "--alt-max", 90,
                           "--pitch-min", 35, "--pitch-max", 55,
                           *SMALL_CAM, "--out", root / "queries") == 0
            (root / "dataset.cfg").write_text(
                "scene = scene.uavh\ndatabase = db/manifest.txt\n"
                "queries = queries/queries.txt\n")
            assert run_cli("localize", "--dataset", root / "dataset.cfg",
                           "--seed", 17, "--out", root / "loc") == 0
            outputs.append(root)
        a, b = outputs
        for rel in ("db/manifest.txt", "queries/queries.txt",
                    "loc/estimates.csv", "loc/benchmark.csv"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


class TestExperimentHarness:
    def test_variant_list_accepted_and_deterministic(self, small_dataset, tmp_path):
        # A hierarchical-render ablation config with increasing coverage,
        # run twice: identical report bytes.
        digests = []
        for run in ("x", "y"):
            exp = tmp_path / run / "exp.cfg"
            exp.parent.mkdir(parents=True)
            exp.write_text(
                f"scene = {small_dataset}/scene.uavh\n"
                f"queries = {small_dataset}/queries/queries.txt\n"
                f"out = out\n"
                "experiment.oracle_stride = 12\n"
                "variant.single.levels = 90:110\n"
                "variant.single.pitches = 45\n"
                "variant.single.yaw_interval_deg = 90\n"
                "variant.dual.levels = 90:110,120:110\n"
                "variant.dual.pitches = 45\n"
                "variant.dual.yaw_interval_deg = 90\n")
            assert run_cli("evaluate", "--experiment", exp) == 0
            digests.append((exp.parent / "out" / "benchmark.csv").read_bytes())
        assert digests[0] == digests[1]
        text = digests[0].decode()
        assert text.splitlines()[0] == \
            "variant,threshold_m,threshold_deg,success_pct,n_queries,n_failed"
        assert "single," in text and "dual," in text

    def test_empty_query_set_rejected(self, small_dataset, tmp_path):
        empty = tmp_path / "queries.txt"
        empty.write_text("# nothing\n")
        cfg = evaluate.ExperimentConfig(
            scene_path=small_dataset / "scene.uavh", queries_path=empty,
            out_dir=tmp_path / "out",
            variants=[evaluate.ExperimentVariant("v", ((90.0, 110.0),), (45.0,), 90.0)])
        with pytest.raises(evaluate.EmptyInput):
            evaluate.run_experiment(cfg)

    def test_no_variants_rejected(self, small_dataset, tmp_path):
        cfg = evaluate.ExperimentConfig(
            scene_path=small_dataset / "scene.uavh",
            queries_path=small_dataset / "queries/queries.txt",
            out_dir=tmp_path / "out", variants=[])
        with pytest.raises(evaluate.EmptyInput):
            evaluate.run_experiment(cfg)


class TestPriorRetention:
    def overlaps(self, root, manifest, cache, q):
        rgb = scene.load_pgm(root / "queries" / q.rgb_path)
        depth = scene.load_depth(root / "queries" / q.depth_path)
        qview = scene.RenderedView(rgb=rgb, depth=depth, pose=q.gt_pose,
                                   intrinsics=q.intrinsics)
        out = {}
        for rec in manifest.records:
            rv = scene.RenderedView(
                rgb=scene.load_pgm(manifest.rgb_file(rec)),
                depth=cache.view(rec.name).depth,
                pose=rec.pose, intrinsics=rec.intrinsics)
            try:
                out[rec.name] = retrieval.overlap_percentage(qview, rv, stride=10)
            except retrieval.NoValidDepth:
                out[rec.name] = 0.0
        return out

    def test_sigma_zero_prefilter_keeps_best_overlap(self, tmp_path):
        """With exact priors, the 30-degree rotation gate retains the
        best-overlap database image for every query.

        Asserted up to overlap ties (0.02): when a query's footprint is
        covered equally well by several headings, the argmax can land on an
        out-of-gate twin of an in-gate reference with the same overlap.
        Scoped to pitches up to 50 degrees, where rotation similarity
        actually predicts covisibility; the companion test covers the full
        pitch range with the property the pipeline needs downstream.
        """
        root = tmp_path
        assert run_cli("gen-scene", "--extent", 160, "--buildings", 10, "--seed", 21,
                       "--out", root / "scene.uavh") == 0
        hf = scene.Heightfield.load(root / "scene.uavh")
        K = Intrinsics(fx=140.0, fy=140.0, cx=80.0, cy=60.0, width=160, height=120)
        spec = viewgen.paper_default_grid(hf.bounds)
        manifest = viewgen.render_database(hf, spec, K, root / "db")
        records = dataio.generate_queries(hf, K, root / "queries", count=12, seed=4,
                                          pitch_range=(15.0, 50.0), prior_sigma_deg=0.0)
        index = pipeline.build_index(manifest)
        cache = pipeline.ReferenceCache(manifest=manifest, max_keypoints=512)
        for q in records:
            ovs = self.overlaps(root, manifest, cache, q)
            kept = {e.name for e in retrieval.prefilter_by_rotation(q.prior, index, 30.0).entries}
            global_best = max(ovs.values())
            kept_best = max(ovs[n] for n in ovs if n in kept)
            assert kept_best >= global_best - 0.02, \
                f"{q.name}: kept-best {kept_best:.3f} vs global {global_best:.3f}"

    def test_prefilter_never_strands_a_query(self, tmp_path):
        """Across the full pitch range, the gate always keeps at least one
        correct (overlap > 0.5) reference when one exists at all."""
        root = tmp_path
        assert run_cli("gen-scene", "--extent", 160, "--buildings", 10, "--seed", 22,
                       "--out", root / "scene.uavh") == 0
        hf = scene.Heightfield.load(root / "scene.uavh")
        K = Intrinsics(fx=140.0, fy=140.0, cx=80.0, cy=60.0, width=160, height=120)
        spec = viewgen.paper_default_grid(hf.bounds)
        manifest = viewgen.render_database(hf, spec, K, root / "db")
        records = dataio.generate_queries(hf, K, root / "queries", count=10, seed=6,
                                          prior_sigma_deg=0.0)
        index = pipeline.build_index(manifest)
        cache = pipeline.ReferenceCache(manifest=manifest, max_keypoints=512)
        for q in records:
            ovs = self.overlaps(root, manifest, cache, q)
            if max(ovs.values()) <= 0.5:
                continue
            kept = {e.name for e in retrieval.prefilter_by_rotation(q.prior, index, 30.0).entries}
            assert any(ovs[n] > 0.5 for n in kept), f"{q.name} stranded by the gate"
