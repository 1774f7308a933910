import numpy as np
import pytest

from direg3d.errors import DataError, EmptyInput, ShapeMismatch
from direg3d.harness import (
    InferView,
    TrainConfig,
    checkpoint_digest,
    compute_auc,
    compute_batch_loss,
    compute_mkpe,
    evaluate,
    infer,
    load_model,
    mean_pose_baseline,
    parse_kv_file,
    pck_curve,
    plot_data,
    read_report,
    train,
    train_config_from_file,
    triangulation_oracle_errors,
    write_report,
)
from direg3d.losses import LossWeights
from direg3d.synth import GenConfig, generate_dataset, load_rig, load_split
from direg3d.metadata import fit_normalization
from direg3d.synth import VIEW_NAMES


class TestComputeMkpe:
    def test_zero_at_gt(self):
        gt = np.random.default_rng(1).normal(size=(21, 3))
        assert compute_mkpe(gt, gt) == 0.0

    def test_345_triangle(self):
        gt = np.zeros((21, 3))
        pred = gt + np.array([3.0, 4.0, 0.0])
        assert compute_mkpe(pred, gt) == pytest.approx(5.0, abs=1e-12)

    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(3)
        pred = rng.normal(size=(21, 3))
        gt = rng.normal(size=(21, 3))
        total = 0.0
        for k in range(21):
            total += np.sqrt(sum((pred[k, c] - gt[k, c]) ** 2 for c in range(3)))
        assert compute_mkpe(pred, gt) == pytest.approx(total / 21, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            compute_mkpe(np.zeros((21, 3)), np.zeros((20, 3)))


class TestComputeAuc:
    def test_all_zero_errors(self):
        assert compute_auc(np.zeros(100)) == 1.0

    def test_all_beyond_max(self):
        assert compute_auc(np.full(100, 60.0)) == 0.0

    def test_constructed_multiset_brute_force(self):
        errors = np.array([10.0] * 50 + [60.0] * 50)
        # brute-force PCK enumeration at integer thresholds
        pck = np.array([(errors <= tau).mean() for tau in range(51)])
        expected = np.trapezoid(pck, dx=1.0) / 50
        assert expected == pytest.approx(0.5 * (50 - 10 + 0.5) / 50, abs=1e-12)
        assert compute_auc(errors) == pytest.approx(expected, abs=1e-9)

    def test_random_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            errors = rng.uniform(0, 80, size=200)
            pck = np.array([(errors <= tau).mean() for tau in range(51)])
            expected = np.trapezoid(pck, dx=1.0) / 50
            assert compute_auc(errors) == pytest.approx(expected, abs=1e-9)

    def test_monotone_curve(self):
        rng = np.random.default_rng(7)
        curve = pck_curve(rng.uniform(0, 100, size=500))
        assert curve.shape == (51,)
        assert (np.diff(curve) >= 0).all()

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            compute_auc(np.array([]))


class TestConfigParsing:
    def test_kv_file(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("seed 7\nlr 0.002   # tuned\nepochs 3\n\n# comment\n")
        kv = parse_kv_file(path)
        assert kv == {"seed": "7", "lr": "0.002", "epochs": "3"}

    def test_train_config(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text(
            "seed 11\nlr 0.003\nbatch_size 4\nepochs 2\nstereo_mode mixed\n"
            "w_kp3d 2.0\nmetadata_ablation true\nbackbone_widths 4,8,16,32\n"
        )
        cfg = train_config_from_file(path)
        assert cfg.seed == 11
        assert cfg.lr == 0.003
        assert cfg.weights.w_kp3d == 2.0
        assert cfg.metadata_ablation is True
        assert cfg.backbone_widths == (4, 8, 16, 32)

    def test_seed_mandatory(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text("lr 0.001\n")
        with pytest.raises(DataError):
            train_config_from_file(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text("seed 1\nbogus 3\n")
        with pytest.raises(DataError):
            train_config_from_file(path)

    def test_bad_stereo_mode(self):
        with pytest.raises(DataError):
            TrainConfig(seed=1, stereo_mode="both")


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("harness_data")
    config = GenConfig(n_train=24, n_val=4, n_test=12, crop_size=32,
                       stereo_fraction=0.5, shard_size=20)
    generate_dataset(config, seed=77, out_dir=out)
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    config = TrainConfig(seed=9, lr=1e-3, batch_size=8, epochs=2, max_steps=4)
    bundle = train(config, dataset, out)
    return out, bundle


class TestTrain:
    def test_checkpoint_and_log_written(self, trained):
        out, _ = trained
        assert out.exists()
        log = out.parent / (out.name + ".log")
        lines = log.read_text().splitlines()
        assert lines[0].startswith("step\t")
        assert len(lines) == 5  # header + 4 steps

    def test_step0_equals_direct_loss_evaluation(self, dataset, tmp_path):
        """Bookkeeping identity: the first logged loss is the untrained loss."""
        config = TrainConfig(seed=21, batch_size=64, epochs=1, max_steps=1)
        out = tmp_path / "one.ckpt"
        train(config, dataset, out)
        line = (tmp_path / "one.ckpt.log").read_text().splitlines()[1]
        logged_total = float(line.split("\t")[-1])

        # rebuild the untrained state: fresh net with the same seed, same batch
        records = load_split(dataset, "train")
        rig = load_rig(dataset)
        shuffle_rng = np.random.default_rng([21, 2])
        order = shuffle_rng.permutation(len(records))
        batch = [records[i] for i in order[:64]]
        from direg3d.harness import ModelBundle, build_template
        from direg3d.hand_model import MeshDecoder
        from direg3d.regressor import Network, NetworkConfig
        from direg3d.synth import read_manifest

        manifest = read_manifest(dataset / "manifest.txt")
        stats = fit_normalization(
            [r.views[n].metadata for r in records for n in VIEW_NAMES if n in r.views])
        net = Network(NetworkConfig(crop_size=32), seed=21)
        template = build_template(manifest.config.template_seed,
                                  manifest.config.vertex_budget)
        decoder = MeshDecoder.create(template.n_vertices, np.random.default_rng([21, 1]))
        bundle = ModelBundle(net, decoder, template, stats, {})
        report = compute_batch_loss(bundle, rig, batch, stats, config)
        assert logged_total == pytest.approx(report.total, abs=1e-9)

    def test_same_seed_identical_logs(self, dataset, tmp_path):
        config = TrainConfig(seed=5, batch_size=8, epochs=1, max_steps=3)
        train(config, dataset, tmp_path / "a.ckpt")
        train(config, dataset, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt.log").read_bytes() == (tmp_path / "b.ckpt.log").read_bytes()
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_loss_decreases_on_single_record(self, dataset, tmp_path):
        config = TrainConfig(seed=13, lr=3e-3, batch_size=1, epochs=1000,
                             limit_train_records=1, max_steps=120)
        out = tmp_path / "overfit.ckpt"
        train(config, dataset, out)
        lines = (tmp_path / "overfit.ckpt.log").read_text().splitlines()[1:]
        totals = [float(l.split("\t")[-1]) for l in lines]
        assert min(totals) < 0.35 * totals[0]

    def test_non_finite_loss_names_term(self, dataset, tmp_path):
        from direg3d.errors import NonFiniteLoss

        # an absurd learning rate overflows the parameters within a step or two
        config = TrainConfig(seed=2, lr=1e18, batch_size=4, epochs=1, max_steps=8)
        with pytest.raises(NonFiniteLoss) as exc:
            train(config, dataset, tmp_path / "blowup.ckpt")
        assert exc.value.term in (
            "kp3d", "mesh", "bone_len", "bone_ang", "var", "reg", "kp2d", "stereo2d")

    def test_checkpoint_round_trip(self, trained):
        out, bundle = trained
        loaded = load_model(out)
        for name, tensor in bundle.parameters().items():
            np.testing.assert_array_equal(loaded.parameters()[name].value, tensor.value)
        np.testing.assert_array_equal(loaded.stats.minimum, bundle.stats.minimum)
        assert loaded.net.config.crop_size == 32


class TestEvaluate:
    def test_report_fields(self, trained, dataset):
        _, bundle = trained
        report = evaluate(bundle, dataset, "test")
        assert report.n_mono_units > 0
        assert report.pck.shape == (51,)
        assert (np.diff(report.pck) >= 0).all()
        assert 0.0 <= report.auc_overall <= 1.0
        assert report.per_keypoint_mkpe.shape == (21,)

    def test_mean_pose_baseline_matches_direct_computation(self, trained, dataset):
        _, bundle = trained
        report = evaluate(bundle, dataset, "test")
        train_records = load_split(dataset, "train")
        test_records = load_split(dataset, "test")
        mean_kp = np.mean([r.gt_keypoints3d for r in train_records], axis=0)
        expected = np.mean([compute_mkpe(mean_kp, r.gt_keypoints3d)
                            for r in test_records])
        assert report.baseline_mean_pose_mkpe == pytest.approx(expected, abs=1e-9)

    def test_triangulation_oracle_under_hundredth_mm(self, trained, dataset):
        _, bundle = trained
        report = evaluate(bundle, dataset, "test")
        assert report.baseline_triangulation_mkpe is not None
        assert report.baseline_triangulation_mkpe < 0.01

    def test_checkpoint_untouched_by_eval(self, trained, dataset):
        out, bundle = trained
        before = checkpoint_digest(out)
        evaluate(bundle, dataset, "test")
        assert checkpoint_digest(out) == before

    def test_eval_deterministic(self, trained, dataset):
        _, bundle = trained
        a = evaluate(bundle, dataset, "test")
        b = evaluate(bundle, dataset, "test")
        assert a.mkpe_mono == b.mkpe_mono
        assert np.array_equal(a.pck, b.pck)

    def test_report_file_round_trip(self, trained, dataset, tmp_path):
        _, bundle = trained
        report = evaluate(bundle, dataset, "test")
        path = tmp_path / "report.txt"
        write_report(path, report)
        back = read_report(path)
        assert back["rows"]["mono"][0] == pytest.approx(report.mkpe_mono)
        assert back["rows"]["mean_pose_baseline"][0] == pytest.approx(
            report.baseline_mean_pose_mkpe)
        np.testing.assert_allclose(back["pck"], report.pck)

    def test_empty_split_raises(self, trained, tmp_path_factory):
        _, bundle = trained
        out = tmp_path_factory.mktemp("noval")
        config = GenConfig(n_train=4, n_val=0, n_test=0, crop_size=32, shard_size=4)
        generate_dataset(config, seed=3, out_dir=out)
        with pytest.raises(EmptyInput):
            evaluate(bundle, out, "test")


class TestInfer:
    def test_routing_mono_vs_stereo(self, trained, dataset):
        _, bundle = trained
        rig = load_rig(dataset)
        records = load_split(dataset, "test")
        stereo_rec = next(r for r in records if r.stereo)

        views = [InferView("left", stereo_rec.views["left"].crop.astype(np.float64),
                           stereo_rec.views["left"].box)]
        before = bundle.net.backbone_calls
        infer(bundle, views, rig)
        assert bundle.net.backbone_calls - before == 1  # mono path

        views.append(InferView("right", stereo_rec.views["right"].crop.astype(np.float64),
                               stereo_rec.views["right"].box))
        before = bundle.net.backbone_calls
        infer(bundle, views, rig)
        assert bundle.net.backbone_calls - before == 2  # stereo path

    def test_prediction_shapes(self, trained, dataset):
        _, bundle = trained
        rig = load_rig(dataset)
        rec = load_split(dataset, "test")[0]
        name = next(iter(rec.views))
        pred, state, decoded = infer(
            bundle,
            [InferView(name, rec.views[name].crop.astype(np.float64), rec.views[name].box)],
            rig,
        )
        assert np.asarray(pred.indep_keypoints).shape == (21, 3)
        assert np.asarray(state.vertices).shape == (bundle.template.n_vertices, 3)
        assert np.asarray(decoded).shape == (bundle.template.n_vertices, 3)

    def test_obj_dump_round_trip(self, trained, dataset, tmp_path):
        from direg3d.hand_model import read_obj, write_obj

        _, bundle = trained
        rig = load_rig(dataset)
        rec = load_split(dataset, "test")[0]
        name = next(iter(rec.views))
        _, state, _ = infer(
            bundle,
            [InferView(name, rec.views[name].crop.astype(np.float64), rec.views[name].box)],
            rig,
        )
        path = tmp_path / "posed.obj"
        write_obj(path, state.vertices, bundle.template.faces)
        verts, faces = read_obj(path)
        np.testing.assert_allclose(verts, state.vertices, atol=1e-5)
        assert np.array_equal(faces, bundle.template.faces)

    def test_rejects_bad_view_count(self, trained, dataset):
        _, bundle = trained
        rig = load_rig(dataset)
        with pytest.raises(DataError):
            infer(bundle, [], rig)


class TestPlotData:
    def test_pck_table(self, trained, dataset, tmp_path):
        _, bundle = trained
        report = evaluate(bundle, dataset, "test")
        report_path = tmp_path / "report.txt"
        write_report(report_path, report)
        written = plot_data(report_path, tmp_path / "plots")
        table = written[0].read_text().splitlines()
        assert table[0] == "threshold_mm\tpck"
        assert len(table) == 52  # header + 51 thresholds
        pck = np.array([float(row.split("\t")[1]) for row in table[1:]])
        assert np.trapezoid(pck, dx=1.0) / 50 == pytest.approx(report.auc_overall, abs=1e-9)

    def test_loss_curves(self, trained, tmp_path):
        out, _ = trained
        written = plot_data(out.parent / (out.name + ".log"), tmp_path / "plots")
        rows = written[0].read_text().splitlines()
        assert rows[0].startswith("step\t")
        assert len(rows) >= 2

    def test_empty_input_no_file(self, tmp_path):
        empty = tmp_path / "empty.txt"
        empty.write_text("")
        with pytest.raises(EmptyInput):
            plot_data(empty, tmp_path / "plots")
        assert not (tmp_path / "plots" / "pck_curve.tsv").exists()

    def test_unknown_format(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("something else\n")
        with pytest.raises(DataError):
            plot_data(bad, tmp_path / "plots")


class TestBaselineHelpers:
    def test_mean_pose_requires_records(self):
        with pytest.raises(EmptyInput):
            mean_pose_baseline([])

    def test_triangulation_errors_only_stereo(self, dataset):
        rig = load_rig(dataset)
        records = [r for r in load_split(dataset, "test") if not r.stereo]
        assert triangulation_oracle_errors(rig, records) is None
