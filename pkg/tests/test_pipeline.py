import json

import numpy as np
import pytest

from deformerlab import dnet, geom, pipeline as pl, servo, softsim as ss
from deformerlab.dataset import Dataset
from deformerlab.errors import FormatError, ParameterError

SMALL = dict(num_configs=2, shapes_per_config=3, cloud_size=256)


@pytest.fixture(scope="module")
def small_ds():
    return pl.generate_dataset(pl.GenConfig(**SMALL))


class TestGenConfig:
    def test_desk_and_full_counts(self):
        c = pl.GenConfig()
        assert c.num_configs * c.shapes_per_config == 1000
        p = pl.GenConfig.full_scale()
        assert p.num_configs * p.shapes_per_config == 30000

    @pytest.mark.parametrize("kw", [dict(num_configs=0), dict(shapes_per_config=0), dict(magnitude_range=(0.0, 0.01)),
                                    dict(magnitude_range=(0.02, 0.01)), dict(magnitude_range=(0.01, 0.08)),
                                    dict(pre_offset_max=-0.01)])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            pl.GenConfig(**kw)

    def test_dict_roundtrip(self):
        c = pl.GenConfig(seed=3, dims=(0.3, 0.1, 0.05))
        assert pl.GenConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


class TestGenerate:
    def test_fields(self, small_ds):
        assert len(small_ds) == 6
        assert small_ds.current.shape == small_ds.goal.shape == (6, 256, 3)
        assert small_ds.current.dtype == np.float32
        assert list(small_ds.episode) == [0, 0, 0, 1, 1, 1]
        # one grasp center per episode
        assert np.all(small_ds.mp[:3] == small_ds.mp[0]) and not np.all(small_ds.mp[3] == small_ds.mp[0])
        mags = np.linalg.norm(small_ds.delta_p, axis=1)
        assert np.all((mags >= 0.005 - 1e-6) & (mags <= 0.04 + 1e-6))

    def test_mp_on_free_half(self, small_ds):
        assert np.all(small_ds.mp[:, 0] >= 0.1 - 1e-6)
        box = ss.clamp_face(ss.build_box())
        for p in small_ds.mp:
            np.testing.assert_allclose(ss.closest_surface_point(box, p), p, atol=1e-6)

    def test_byte_identical_per_seed(self, small_ds, tmp_path):
        pl.save_dataset(small_ds, tmp_path / "a.dfns")
        pl.save_dataset(pl.generate_dataset(pl.GenConfig(**SMALL)), tmp_path / "b.dfns")
        assert (tmp_path / "a.dfns").read_bytes() == (tmp_path / "b.dfns").read_bytes()
        assert (tmp_path / "a.dfns.meta.json").read_bytes() == (tmp_path / "b.dfns.meta.json").read_bytes()

    def test_other_seed_differs(self, small_ds):
        other = pl.generate_dataset(pl.GenConfig(**SMALL, seed=1))
        assert not np.array_equal(other.goal, small_ds.goal)

    def test_worker_count_does_not_matter(self, small_ds):
        par = pl.generate_dataset(pl.GenConfig(**SMALL), workers=2)
        np.testing.assert_array_equal(par.goal, small_ds.goal)
        np.testing.assert_array_equal(par.delta_p, small_ds.delta_p)

    def test_replay_reproduces_goal(self, small_ds, tmp_path):
        pl.save_dataset(small_ds, tmp_path / "d.dfns")
        back = pl.load_dataset(tmp_path / "d.dfns")
        for i in range(len(back)):
            assert geom.chamfer(pl.replay_goal(back, i), back.goal[i].astype(np.float64)) < 1e-6

    def test_replay_needs_metadata(self, small_ds):
        bare = Dataset(small_ds.current, small_ds.goal, small_ds.delta_p, small_ds.mp, meta=small_ds.meta)
        with pytest.raises(ParameterError):
            pl.replay_goal(bare, 0)


class TestPersistence:
    def test_roundtrip_exact(self, small_ds, tmp_path):
        pl.save_dataset(small_ds, tmp_path / "d.dfns")
        back = pl.load_dataset(tmp_path / "d.dfns")
        for name in ("current", "goal", "delta_p", "mp", "episode"):
            np.testing.assert_array_equal(getattr(back, name), getattr(small_ds, name))
        np.testing.assert_array_equal(back.pre_offset, small_ds.pre_offset)
        assert pl.GenConfig.from_dict(back.meta["gen_config"]) == pl.GenConfig.from_dict(small_ds.meta["gen_config"])

    def test_layout(self, small_ds, tmp_path):
        pl.save_dataset(small_ds, tmp_path / "d.dfns")
        raw = (tmp_path / "d.dfns").read_bytes()
        assert raw[:4] == b"DFNS"
        assert len(raw) == 20 + len(small_ds) * (4 + 4 * (6 * 256 + 6))
        first = np.frombuffer(raw, "<f4", count=3, offset=24)
        np.testing.assert_array_equal(first, small_ds.current[0, 0])

    def test_empty(self, tmp_path):
        empty = Dataset(np.zeros((0, 16, 3), np.float32), np.zeros((0, 16, 3), np.float32),
                        np.zeros((0, 3), np.float32), np.zeros((0, 3), np.float32))
        pl.save_dataset(empty, tmp_path / "e.dfns")
        back = pl.load_dataset(tmp_path / "e.dfns")
        assert len(back) == 0 and back.cloud_size == 16

    def test_truncated_names_offset(self, small_ds, tmp_path):
        pl.save_dataset(small_ds, tmp_path / "d.dfns")
        raw = (tmp_path / "d.dfns").read_bytes()
        rec = 4 + 4 * (6 * 256 + 6)
        (tmp_path / "t.dfns").write_bytes(raw[:20 + rec + 100])
        with pytest.raises(FormatError) as e:
            pl.load_dataset(tmp_path / "t.dfns")
        assert e.value.offset == 20 + rec

    @pytest.mark.parametrize("patch, offset", [((0, b"XXXX"), 0), ((4, b"\x02\x00\x00\x00"), 4)])
    def test_bad_magic_and_version(self, small_ds, tmp_path, patch, offset):
        pl.save_dataset(small_ds, tmp_path / "d.dfns")
        raw = bytearray((tmp_path / "d.dfns").read_bytes())
        at, data = patch
        raw[at:at + 4] = data
        (tmp_path / "b.dfns").write_bytes(bytes(raw))
        with pytest.raises(FormatError) as e:
            pl.load_dataset(tmp_path / "b.dfns")
        assert e.value.offset == offset

    def test_short_header(self, tmp_path):
        (tmp_path / "h.dfns").write_bytes(b"DFN")
        with pytest.raises(FormatError):
            pl.load_dataset(tmp_path / "h.dfns")

    def test_trailing_bytes(self, small_ds, tmp_path):
        pl.save_dataset(small_ds, tmp_path / "d.dfns")
        (tmp_path / "x.dfns").write_bytes((tmp_path / "d.dfns").read_bytes() + b"\0")
        with pytest.raises(FormatError):
            pl.load_dataset(tmp_path / "x.dfns")


class Scripted:
    def __init__(self, dp):
        self.dp = np.asarray(dp, dtype=np.float64)

    def predict(self, current, goal):
        return self.dp


@pytest.fixture(scope="module")
def report():
    cases = pl.generate_dataset(pl.GenConfig(num_configs=2, shapes_per_config=1, cloud_size=256, seed=5))
    cfg = pl.EvalConfig(servo.ServoConfig(max_iters=1), methods=("heuristic", "ground-truth"))
    return cases, pl.evaluate({"deformer": Scripted([0, 0, 0])}, cases, cfg,
                              mse={"deformer": (2.0, 3.0), "baseline": (12.0, 20.0)})


class TestEvaluate:
    def test_one_row_per_case_and_method(self, report, tmp_path):
        cases, rep = report
        assert [(r.case, r.mp_method) for r in rep.rows] == \
            [(0, "heuristic"), (0, "ground-truth"), (1, "heuristic"), (1, "ground-truth")]
        rep.to_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0].split(",") == pl.REPORT_COLUMNS
        assert len(lines) == 5

    def test_mp_error_in_meters(self, report):
        cases, rep = report
        for r in rep.rows:
            truth = cases.mp[r.case].astype(np.float64)
            assert r.mp_error_m == pytest.approx(np.linalg.norm(r.mp - truth))
            assert r.mp_error_frac == pytest.approx(r.mp_error_m / np.linalg.norm(ss.DEFAULT_DIMS))
        assert all(r.mp_error_m == 0 for r in rep.rows_for("ground-truth"))

    def test_mse_ratio_and_summary(self, report, tmp_path):
        _, rep = report
        assert rep.mse_ratio == 6.0
        text = rep.summary()
        assert "ratio: 6.00" in text and "heuristic" in text
        rep.mse_to_csv(tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text().splitlines()[1] == "deformer,2,3"

    def test_zero_model_leaves_chamfer(self, report):
        _, rep = report
        for r in rep.rows:
            assert r.final_chamfer_m == r.initial_chamfer_m

    def test_regression_skipped_without_model(self, report):
        cases, _ = report
        rep = pl.evaluate({"deformer": Scripted([0, 0, 0])}, cases.subset([0]),
                          pl.EvalConfig(servo.ServoConfig(max_iters=1), methods=("regression", "ground-truth")))
        assert [r.mp_method for r in rep.rows] == ["ground-truth"]

    def test_needs_deformer(self, report):
        with pytest.raises(ParameterError):
            pl.evaluate({}, report[0])

    def test_model_mse_matches_training_split(self, small_ds):
        res = dnet.train(small_ds, dnet.TrainConfig(epochs=1, batch_size=4, test_fraction=0.5))
        tr, te = pl.model_mse(res.model, small_ds, 0.5, 0)
        prep = res.model.prepare(small_ds.current, small_ds.goal)
        target = small_ds.delta_p.astype(np.float64)
        assert tr == dnet.evaluate_mse(res.model, prep.take(res.train_idx), target[res.train_idx])
        assert te == dnet.evaluate_mse(res.model, prep.take(res.test_idx), target[res.test_idx])


class TestHelpers:
    def test_adversarial_point_is_graspable_near_clamp(self):
        cfg = pl.GenConfig()
        p = pl.adversarial_mp(cfg)
        assert p[0] == pytest.approx(0.0375)
        mesh = pl.make_clamped_box(cfg)
        h = ss.grasp(mesh, p, cfg.grasp_radius)
        assert len(h.vertices) > 0

    def test_holdout_seeded_apart(self):
        a = pl.holdout_cases(2, 0, pl.GenConfig(cloud_size=64))
        assert len(a) == 2 and a.meta["gen_config"]["seed"] == pl.HOLDOUT_SEED_OFFSET
        assert a.meta["gen_config"]["shapes_per_config"] == 1

    def test_case_goal_shares_sampling_plan(self, small_ds):
        cfg = pl.GenConfig(**SMALL)
        mesh, goal = pl.case_setup(small_ds, 0, cfg)
        np.testing.assert_array_equal(goal.source_ids, ss.surface_cloud(mesh, 256).source_ids)
