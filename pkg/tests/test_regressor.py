import numpy as np
import pytest

from direg3d import autodiff as ad
from direg3d.errors import ShapeMismatch
from direg3d.geometry import BoundingBox, virtual_relative_extrinsics
from direg3d.hand_model import MeshDecoder, build_template
from direg3d.losses import loss_keypoints_3d, loss_mesh
from direg3d.metadata import METADATA_DIM
from direg3d.regressor import (
    Network,
    NetworkConfig,
    flatten_relative_extrinsics,
    forward_mono,
    forward_stereo,
    predict_state,
)

from gradcheck import gradcheck
from helpers import make_stereo_rig


@pytest.fixture(scope="module")
def config():
    return NetworkConfig(crop_size=32)


@pytest.fixture(scope="module")
def net(config):
    return Network(config, seed=11)


@pytest.fixture(scope="module")
def template():
    return build_template(seed=0, vertex_budget=256)


@pytest.fixture(scope="module")
def decoder(template):
    return MeshDecoder.create(template.n_vertices, np.random.default_rng(4))


def random_inputs(rng, config, batch=None):
    shape = (config.crop_size, config.crop_size) if batch is None else (
        batch, 1, config.crop_size, config.crop_size)
    crop = rng.uniform(0.0, 1.0, size=shape)
    meta = rng.uniform(-1.0, 1.0, size=(METADATA_DIM,) if batch is None else
                       (batch, METADATA_DIM))
    return crop, meta


class TestForwardMono:
    def test_output_dimensions(self, net, config):
        rng = np.random.default_rng(1)
        crop, meta = random_inputs(rng, config)
        pred = forward_mono(net, crop, meta)
        assert ad.val(pred.hand_params.global_rot).shape == (3,)
        assert ad.val(pred.hand_params.global_trans).shape == (3,)
        assert ad.val(pred.hand_params.joint_pose).shape == (15, 3)
        assert ad.val(pred.hand_params.shape).shape == (10,)
        assert ad.val(pred.mesh_latent).shape == (32,)
        assert ad.val(pred.indep_keypoints).shape == (21, 3)
        assert ad.val(pred.keypoint_log_scale).shape == (21,)

    def test_deterministic(self, net, config):
        rng = np.random.default_rng(2)
        crop, meta = random_inputs(rng, config)
        a = forward_mono(net, crop, meta)
        b = forward_mono(net, crop, meta)
        assert np.array_equal(ad.val(a.indep_keypoints), ad.val(b.indep_keypoints))
        assert np.array_equal(ad.val(a.mesh_latent), ad.val(b.mesh_latent))

    def test_finite_outputs(self, net, config):
        rng = np.random.default_rng(3)
        for _ in range(5):
            crop, meta = random_inputs(rng, config)
            pred = forward_mono(net, crop, meta)
            for x in (pred.indep_keypoints, pred.mesh_latent, pred.keypoint_log_scale,
                      pred.hand_params.joint_pose):
                assert np.isfinite(ad.val(x)).all()

    def test_batched_matches_single(self, net, config):
        rng = np.random.default_rng(4)
        crops, metas = random_inputs(rng, config, batch=3)
        batched = forward_mono(net, crops, metas)
        for i in range(3):
            single = forward_mono(net, crops[i, 0], metas[i])
            np.testing.assert_allclose(
                ad.val(batched.indep_keypoints)[i], ad.val(single.indep_keypoints),
                atol=1e-9,
            )

    def test_world_frame_mapping(self, net, config):
        cam_l, _ = make_stereo_rig()
        rng = np.random.default_rng(5)
        crop, meta = random_inputs(rng, config)
        pred_view = forward_mono(net, crop, meta)
        pred_world = forward_mono(net, crop, meta, cam=cam_l)
        expected = cam_l.cam_from_world.inverse().apply(ad.val(pred_view.indep_keypoints))
        np.testing.assert_allclose(ad.val(pred_world.indep_keypoints), expected, atol=1e-9)

    def test_rejects_wrong_crop_size(self, net):
        with pytest.raises(ShapeMismatch):
            forward_mono(net, np.zeros((16, 16)), np.zeros(METADATA_DIM))

    def test_gradient_through_probed_weight(self, net, config):
        rng = np.random.default_rng(6)
        crop, meta = random_inputs(rng, config)
        gt = rng.normal(scale=50.0, size=(21, 3)) + [0, 0, 400.0]

        probe = net.params["trunk_mono/fc0/w"]
        loss = ad.as_tensor(loss_keypoints_3d(
            forward_mono(net, crop, meta).indep_keypoints, gt))
        ad.backward(loss)
        analytic = probe.grad.copy()
        assert analytic is not None and np.abs(analytic).max() > 0

        idx = np.unravel_index(np.abs(analytic).argmax(), analytic.shape)
        h = 1e-5 * max(1.0, abs(probe.value[idx]))
        for p in net.params.values():
            p.zero_grad()
        original = probe.value[idx]
        probe.value[idx] = original + h
        up = loss_keypoints_3d(ad.val(forward_mono(net, crop, meta).indep_keypoints), gt)
        probe.value[idx] = original - h
        dn = loss_keypoints_3d(ad.val(forward_mono(net, crop, meta).indep_keypoints), gt)
        probe.value[idx] = original
        numeric = (up - dn) / (2 * h)
        assert abs(numeric - analytic[idx]) / max(abs(numeric), abs(analytic[idx])) < 1e-4


class TestForwardStereo:
    @pytest.fixture
    def stereo_inputs(self, config):
        rng = np.random.default_rng(7)
        cam_l, cam_r = make_stereo_rig()
        crop_l, meta_l = random_inputs(rng, config)
        crop_r, meta_r = random_inputs(rng, config)
        box_l = BoundingBox(200.0, 180.0, 300.0, 280.0)
        box_r = BoundingBox(320.0, 180.0, 420.0, 280.0)
        rel = flatten_relative_extrinsics(
            virtual_relative_extrinsics(cam_l, box_l, cam_r, box_r))
        return cam_l, cam_r, crop_l, meta_l, crop_r, meta_r, rel

    def test_backbone_runs_exactly_twice(self, net, stereo_inputs):
        cam_l, cam_r, crop_l, meta_l, crop_r, meta_r, rel = stereo_inputs
        before = net.backbone_calls
        forward_stereo(net, crop_l, meta_l, crop_r, meta_r, rel)
        assert net.backbone_calls - before == 2

    def test_outputs_finite(self, net, stereo_inputs):
        _, _, crop_l, meta_l, crop_r, meta_r, rel = stereo_inputs
        pred = forward_stereo(net, crop_l, meta_l, crop_r, meta_r, rel)
        assert np.isfinite(ad.val(pred.indep_keypoints)).all()
        assert ad.val(pred.indep_keypoints).shape == (21, 3)

    def test_swap_is_not_symmetric(self, net, stereo_inputs):
        # the left view is the reference frame; swapping inputs with the
        # inverted extrinsics is a different computation by design
        cam_l, cam_r, crop_l, meta_l, crop_r, meta_r, rel = stereo_inputs
        pred_lr = forward_stereo(net, crop_l, meta_l, crop_r, meta_r, rel, cam_left=cam_l)
        rel_mat = np.asarray(rel)
        inv = np.linalg.inv(
            np.vstack([np.hstack([rel_mat[:9].reshape(3, 3),
                                  (rel_mat[9:] * 1000).reshape(3, 1)]),
                       [0, 0, 0, 1]])
        )
        rel_swapped = np.concatenate([inv[:3, :3].ravel(), inv[:3, 3] / 1000])
        pred_rl = forward_stereo(net, crop_r, meta_r, crop_l, meta_l, rel_swapped,
                                 cam_left=cam_r)
        assert not np.allclose(ad.val(pred_lr.indep_keypoints),
                               ad.val(pred_rl.indep_keypoints), atol=1e-6)

    def test_stereo_adds_only_trunk_parameters(self, net):
        total = net.param_count()
        stereo = net.param_count("trunk_stereo/")
        mono_path = (net.param_count("backbone/") + net.param_count("meta/")
                     + net.param_count("trunk_mono/") + net.param_count("heads/"))
        assert total == mono_path + stereo

    def test_stereo_input_width_invariant(self, config):
        assert config.stereo_input_dim == 2 * config.image_feature_dim + 2 * 28 + 12


class TestPredictState:
    def test_zero_params_gives_template_at_origin(self, net, template, decoder, config):
        rng = np.random.default_rng(8)
        crop, meta = random_inputs(rng, config)
        pred = forward_mono(net, crop, meta).numpy()
        pred.hand_params.global_rot[:] = 0
        pred.hand_params.global_trans[:] = 0
        pred.hand_params.joint_pose[:] = 0
        pred.hand_params.shape[:] = 0
        pred.mesh_latent[:] = 0
        state, decoded = predict_state(template, decoder, pred)
        np.testing.assert_allclose(state.vertices, template.vertices, atol=1e-9)
        np.testing.assert_allclose(decoded, template.vertices, atol=1e-9)

    def test_keypoints_equal_regressor_vertices(self, net, template, decoder, config):
        rng = np.random.default_rng(9)
        crop, meta = random_inputs(rng, config)
        pred = forward_mono(net, crop, meta)
        state, _ = predict_state(template, decoder, pred)
        np.testing.assert_allclose(
            ad.val(state.keypoints3d), template.kp_regressor @ ad.val(state.vertices),
            atol=1e-9,
        )

    def test_mesh_loss_reaches_latent_head(self, net, template, decoder, config):
        rng = np.random.default_rng(10)
        crop, meta = random_inputs(rng, config)
        # nonzero final decoder stage so the latent actually moves vertices
        decoder.w2.value = rng.standard_normal(decoder.w2.shape) * 0.01
        pred = forward_mono(net, crop, meta)
        _, decoded = predict_state(template, decoder, pred)
        gt_verts = rng.normal(scale=30.0, size=ad.val(decoded).shape)
        loss = ad.as_tensor(loss_mesh(decoded, gt_verts))
        ad.backward(loss)
        head_w = net.params["heads/latent/w"]
        assert head_w.grad is not None
        assert np.abs(head_w.grad).max() > 0
        decoder.w2.value[:] = 0.0

    def test_every_head_receives_gradient(self, net, template, decoder, config):
        from direg3d.losses import (
            LossWeights,
            loss_keypoint_variance,
            loss_param_reg,
            total_loss,
        )

        rng = np.random.default_rng(12)
        crop, meta = random_inputs(rng, config)
        decoder.w2.value = rng.standard_normal(decoder.w2.shape) * 0.01
        pred = forward_mono(net, crop, meta)
        state, decoded = predict_state(template, decoder, pred)
        gt_kp = rng.normal(scale=50.0, size=(21, 3)) + [0, 0, 400.0]
        gt_verts = rng.normal(scale=30.0, size=ad.val(decoded).shape) + [0, 0, 400.0]
        terms = {
            "kp3d": loss_keypoints_3d(pred.indep_keypoints, gt_kp),
            "mesh": ad.mul(ad.add(ad.as_tensor(loss_mesh(state.vertices, gt_verts)),
                                  ad.as_tensor(loss_mesh(decoded, gt_verts))), 0.5),
            "var": loss_keypoint_variance(pred.indep_keypoints,
                                          pred.keypoint_log_scale, gt_kp),
            "reg": loss_param_reg(pred.hand_params.joint_pose, pred.hand_params.shape),
        }
        report = total_loss(terms, LossWeights())
        ad.backward(report.total_node)
        for head in ("params", "latent", "keypoints", "log_scale"):
            grad = net.params[f"heads/{head}/w"].grad
            assert grad is not None and np.abs(grad).max() > 0, head
        for p in net.params.values():
            p.zero_grad()
        decoder.w2.value[:] = 0.0
