"""Hand regressor: shared CNN backbone, metadata branch, fusion trunks, heads.

The image backbone runs once per view; its features feed either the mono
trunk (with the metadata branch) or the stereo trunk (both views' features,
both raw metadata vectors, and the virtual-camera relative extrinsics). The
three heads are shared between the two paths, so enabling stereo adds only
the stereo trunk's parameters.

Keypoint and translation heads regress in the frame of the primary view's
camera; the forward pass rigidly maps the keypoints into the world frame
with the known calibration. Metadata carries no extrinsics, so a direct
world-frame regression would be ill-posed across symmetric rigs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch
from .geometry import FisheyeCamera, RigidTransform
from .hand_model import (
    LATENT_DIM,
    N_KEYPOINTS,
    PARAM_DIM,
    FKResult,
    HandParams,
    HandState,
    HandTemplate,
    MeshDecoder,
    apply_skinning,
    decode_mesh,
    forward_kinematics,
)
from .metadata import METADATA_DIM

REL_EXTRINSICS_DIM = 12


@dataclass(frozen=True)
class NetworkConfig:
    crop_size: int = 128
    backbone_widths: tuple[int, ...] = (8, 16, 32, 64)
    meta_widths: tuple[int, ...] = (64, 64)
    fusion_width: int = 128
    fusion_layers: int = 2
    kp_scale_mm: float = 100.0
    trans_scale_mm: float = 100.0
    rel_trans_scale_mm: float = 1000.0
    init_depth_mm: float = 400.0

    @property
    def image_feature_dim(self) -> int:
        return self.backbone_widths[-1]

    @property
    def stereo_input_dim(self) -> int:
        return 2 * self.image_feature_dim + 2 * METADATA_DIM + REL_EXTRINSICS_DIM

    @property
    def head_input_dim(self) -> int:
        return self.fusion_width

    def to_meta(self) -> dict[str, str]:
        return {
            "net.crop_size": str(self.crop_size),
            "net.backbone_widths": ",".join(map(str, self.backbone_widths)),
            "net.meta_widths": ",".join(map(str, self.meta_widths)),
            "net.fusion_width": str(self.fusion_width),
            "net.fusion_layers": str(self.fusion_layers),
            "net.kp_scale_mm": repr(self.kp_scale_mm),
            "net.trans_scale_mm": repr(self.trans_scale_mm),
            "net.rel_trans_scale_mm": repr(self.rel_trans_scale_mm),
            "net.init_depth_mm": repr(self.init_depth_mm),
        }

    @staticmethod
    def from_meta(meta: dict[str, str]) -> "NetworkConfig":
        return NetworkConfig(
            crop_size=int(meta["net.crop_size"]),
            backbone_widths=tuple(int(x) for x in meta["net.backbone_widths"].split(",")),
            meta_widths=tuple(int(x) for x in meta["net.meta_widths"].split(",")),
            fusion_width=int(meta["net.fusion_width"]),
            fusion_layers=int(meta["net.fusion_layers"]),
            kp_scale_mm=float(meta["net.kp_scale_mm"]),
            trans_scale_mm=float(meta["net.trans_scale_mm"]),
            rel_trans_scale_mm=float(meta["net.rel_trans_scale_mm"]),
            init_depth_mm=float(meta["net.init_depth_mm"]),
        )


@dataclass
class Prediction:
    """One forward pass. Fields are Tensors inside training, arrays outside.

    ``indep_keypoints`` is in world mm. ``hand_params`` is expressed in the
    primary view's camera frame; ``world_from_view`` carries the rigid map
    back to world (identity when None).
    """

    hand_params: HandParams
    mesh_latent: object                    # (..., 32)
    indep_keypoints: object                # (..., 21, 3) world mm
    keypoint_log_scale: object             # (..., 21) log mm
    world_from_view: RigidTransform | None = None

    def numpy(self) -> "Prediction":
        hp = self.hand_params
        return Prediction(
            HandParams(ad.val(hp.global_rot), ad.val(hp.global_trans),
                       ad.val(hp.joint_pose), ad.val(hp.shape)),
            ad.val(self.mesh_latent),
            ad.val(self.indep_keypoints),
            ad.val(self.keypoint_log_scale),
            self.world_from_view,
        )


def flatten_relative_extrinsics(rel: RigidTransform,
                                trans_scale_mm: float = 1000.0) -> np.ndarray:
    """12-vector fed to the stereo trunk: row-major R, then t / scale."""
    return np.concatenate([rel.rotation.ravel(),
                           rel.translation / trans_scale_mm])


class Network:
    """Parameter container plus the forward paths. Inference is pure."""

    def __init__(self, config: NetworkConfig, seed: int):
        self.config = config
        self.params: dict[str, ad.Tensor] = {}
        self.backbone_calls = 0  # instrumentation for the weight-sharing contract
        self._init_params(np.random.default_rng(seed))

    # --- parameter setup -------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> ad.Tensor:
        t = ad.parameter(value, name)
        self.params[name] = t
        return t

    def _conv(self, rng, name, c_in, c_out, k=3):
        w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / (c_in * k * k))
        self._add(f"{name}/w", w)
        self._add(f"{name}/b", np.zeros((1, c_out, 1, 1)))

    def _fc(self, rng, name, d_in, d_out, scale=None):
        s = np.sqrt(2.0 / d_in) if scale is None else scale
        self._add(f"{name}/w", rng.standard_normal((d_in, d_out)) * s)
        self._add(f"{name}/b", np.zeros(d_out))

    def _init_params(self, rng):
        cfg = self.config
        widths = cfg.backbone_widths
        self._conv(rng, "backbone/stem", 1, widths[0])
        c_in = widths[0]
        for i, c_out in enumerate(widths):
            self._conv(rng, f"backbone/stage{i}/conv1", c_in, c_out)
            self._conv(rng, f"backbone/stage{i}/conv2", c_out, c_out)
            self._conv(rng, f"backbone/stage{i}/shortcut", c_in, c_out, k=1)
            c_in = c_out

        d_in = METADATA_DIM
        for i, d_out in enumerate(cfg.meta_widths):
            self._fc(rng, f"meta/fc{i}", d_in, d_out)
            d_in = d_out

        d_in = cfg.image_feature_dim + cfg.meta_widths[-1]
        for i in range(cfg.fusion_layers):
            self._fc(rng, f"trunk_mono/fc{i}", d_in, cfg.fusion_width)
            d_in = cfg.fusion_width

        d_in = cfg.stereo_input_dim
        for i in range(cfg.fusion_layers):
            self._fc(rng, f"trunk_stereo/fc{i}", d_in, cfg.fusion_width)
            d_in = cfg.fusion_width

        self._fc(rng, "heads/params", cfg.fusion_width, PARAM_DIM, scale=0.01)
        self._fc(rng, "heads/latent", cfg.fusion_width, LATENT_DIM, scale=0.01)
        self._fc(rng, "heads/keypoints", cfg.fusion_width, N_KEYPOINTS * 3, scale=0.01)
        self._fc(rng, "heads/log_scale", cfg.fusion_width, N_KEYPOINTS, scale=0.01)

        # start the hand in front of the camera so 2D terms are unmasked
        depth = cfg.init_depth_mm
        self.params["heads/keypoints/b"].value[2::3] = depth / cfg.kp_scale_mm
        self.params["heads/params/b"].value[5] = depth / cfg.trans_scale_mm

    def parameters(self) -> dict[str, ad.Tensor]:
        return dict(self.params)

    def param_count(self, prefix: str = "") -> int:
        return sum(t.value.size for n, t in self.params.items() if n.startswith(prefix))

    # --- building blocks --------------------------------------------------

    def _apply_fc_stack(self, x, group: str, n_layers: int):
        for i in range(n_layers):
            w = self.params[f"{group}/fc{i}/w"]
            b = self.params[f"{group}/fc{i}/b"]
            x = ad.relu(ad.add(ad.matmul(x, w), b))
        return x

    def image_features(self, crops):
        """Grayscale crops (B, 1, S, S) -> features (B, F)."""
        x = ad.as_tensor(crops)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.config.crop_size:
            raise ShapeMismatch(
                f"expected (B, 1, {self.config.crop_size}, {self.config.crop_size}) crops, "
                f"got {x.shape}"
            )
        self.backbone_calls += 1
        p = self.params
        x = ad.relu(ad.add(ad.conv2d(x, p["backbone/stem/w"], 1), p["backbone/stem/b"]))
        for i in range(len(self.config.backbone_widths)):
            y = ad.relu(ad.add(ad.conv2d(x, p[f"backbone/stage{i}/conv1/w"], 2),
                               p[f"backbone/stage{i}/conv1/b"]))
            y = ad.add(ad.conv2d(y, p[f"backbone/stage{i}/conv2/w"], 1),
                       p[f"backbone/stage{i}/conv2/b"])
            s = ad.add(ad.conv2d(x, p[f"backbone/stage{i}/shortcut/w"], 2),
                       p[f"backbone/stage{i}/shortcut/b"])
            x = ad.relu(ad.add(y, s))
        return ad.mean(x, axis=(2, 3))

    def meta_features(self, meta):
        m = ad.as_tensor(meta)
        if m.shape[-1] != METADATA_DIM:
            raise ShapeMismatch(f"metadata must be {METADATA_DIM}-D, got {m.shape}")
        return self._apply_fc_stack(m, "meta", len(self.config.meta_widths))

    def _heads(self, trunk_out, world_from_view: RigidTransform | None):
        cfg = self.config
        p = self.params

        def head(name):
            return ad.add(ad.matmul(trunk_out, p[f"heads/{name}/w"]), p[f"heads/{name}/b"])

        raw_params = head("params")
        global_rot = raw_params[:, 0:3]
        global_trans = ad.mul(raw_params[:, 3:6], cfg.trans_scale_mm)
        joint_pose = ad.reshape(raw_params[:, 6:51], (-1, 15, 3))
        shape = raw_params[:, 51:61]

        latent = head("latent")
        kps_view = ad.reshape(ad.mul(head("keypoints"), cfg.kp_scale_mm),
                              (-1, N_KEYPOINTS, 3))
        log_scale = head("log_scale")

        if world_from_view is None:
            kps_world = kps_view
        else:
            kps_world = ad.add(ad.matmul(kps_view, world_from_view.rotation.T),
                               world_from_view.translation)
        return Prediction(
            hand_params=HandParams(global_rot, global_trans, joint_pose, shape),
            mesh_latent=latent,
            indep_keypoints=kps_world,
            keypoint_log_scale=log_scale,
            world_from_view=world_from_view,
        )


def _norm_crop(crop, crop_size: int):
    c = ad.as_tensor(crop)
    if c.ndim == 2:
        c = ad.reshape(c, (1, 1) + c.shape)
        return c, True
    if c.ndim == 3:  # (B, S, S)
        c = ad.reshape(c, (c.shape[0], 1) + c.shape[1:])
        return c, False
    if c.ndim == 4:
        return c, False
    raise ShapeMismatch(f"crop must be 2-D..4-D, got {c.shape}")


def _norm_meta(meta, single_expected: bool):
    m = ad.as_tensor(meta)
    if m.ndim == 1:
        return ad.reshape(m, (1, METADATA_DIM))
    return m


def _world_from_view(cam: FisheyeCamera | RigidTransform | None) -> RigidTransform | None:
    if cam is None:
        return None
    extr = cam if isinstance(cam, RigidTransform) else cam.cam_from_world
    return extr.inverse()


def _maybe_single(pred: Prediction, single: bool) -> Prediction:
    if not single:
        return pred
    hp = pred.hand_params
    return Prediction(
        HandParams(hp.global_rot[0], hp.global_trans[0], hp.joint_pose[0], hp.shape[0]),
        pred.mesh_latent[0],
        pred.indep_keypoints[0],
        pred.keypoint_log_scale[0],
        pred.world_from_view,
    )


def forward_mono(net: Network, crop, meta, cam=None) -> Prediction:
    """Monocular path: backbone + metadata branch -> mono trunk -> heads.

    ``cam`` is the view's camera (or its extrinsics); when given, keypoints
    come back in world mm, otherwise in the view frame.
    """
    crops, single = _norm_crop(crop, net.config.crop_size)
    metas = _norm_meta(meta, single)
    img_feat = net.image_features(crops)
    return forward_mono_from_features(net, img_feat, metas, cam, single)


def forward_mono_from_features(net: Network, img_feat, metas, cam=None,
                               single: bool = False) -> Prediction:
    """Mono heads on precomputed backbone features (no backbone recompute)."""
    meta_feat = net.meta_features(metas)
    fused = ad.concat([img_feat, meta_feat], axis=1)
    trunk = net._apply_fc_stack(fused, "trunk_mono", net.config.fusion_layers)
    pred = net._heads(trunk, _world_from_view(cam))
    return _maybe_single(pred, single)


def forward_stereo(net: Network, crop_l, meta_l, crop_r, meta_r, rel,
                   cam_left=None) -> Prediction:
    """Stereo path: per-view backbone features + raw metadata + virtual-camera
    relative extrinsics (12-vector) through the stereo trunk, shared heads.

    Output frame is the left (primary) view; ``cam_left`` maps it to world.
    Swapping the views is not symmetric: left is the reference.
    """
    crops_l, single = _norm_crop(crop_l, net.config.crop_size)
    crops_r, _ = _norm_crop(crop_r, net.config.crop_size)
    feat_l = net.image_features(crops_l)
    feat_r = net.image_features(crops_r)
    return forward_stereo_from_features(
        net, feat_l, _norm_meta(meta_l, single), feat_r, _norm_meta(meta_r, single),
        rel, cam_left, single,
    )


def forward_stereo_from_features(net: Network, feat_l, meta_l, feat_r, meta_r, rel,
                                 cam_left=None, single: bool = False) -> Prediction:
    r = ad.as_tensor(rel)
    if r.ndim == 1:
        r = ad.reshape(r, (1, REL_EXTRINSICS_DIM))
    if r.shape[-1] != REL_EXTRINSICS_DIM:
        raise ShapeMismatch(f"relative extrinsics must be 12-D, got {r.shape}")
    fused = ad.concat([ad.as_tensor(feat_l), ad.as_tensor(feat_r),
                       ad.as_tensor(meta_l), ad.as_tensor(meta_r), r], axis=1)
    trunk = net._apply_fc_stack(fused, "trunk_stereo", net.config.fusion_layers)
    pred = net._heads(trunk, _world_from_view(cam_left))
    return _maybe_single(pred, single)


def predict_state(template: HandTemplate, decoder: MeshDecoder,
                  prediction: Prediction) -> tuple[HandState, object]:
    """Pose the parametric hand and the decoded mesh from one prediction.

    Returns the world-frame HandState of the parametric branch plus the
    decoded-mesh vertices posed by the same FK transforms.
    """
    hp = prediction.hand_params
    graph = any(ad.is_tensor(x) for x in (hp.global_rot, hp.joint_pose))
    fk = forward_kinematics(template, hp)
    fk_t = FKResult(ad.as_tensor(fk.posed_joints), ad.as_tensor(fk.rel_rot),
                    ad.as_tensor(fk.rel_trans))

    sh = ad.as_tensor(hp.shape)
    single = sh.ndim == 1
    sb = template.shape_basis.reshape(-1, 10)
    offs = ad.matmul(ad.reshape(sh, (-1, 10)), sb.T)
    shaped = ad.add(template.vertices, ad.reshape(offs, (-1, template.n_vertices, 3)))
    if single:
        shaped = shaped[0]
    verts = apply_skinning(template, fk_t, shaped)
    kps = ad.matmul(template.kp_regressor, verts)

    decoded_offsets = decode_mesh(decoder, prediction.mesh_latent)
    decoded_rest = ad.add(template.vertices, ad.as_tensor(decoded_offsets))
    decoded = apply_skinning(template, fk_t, decoded_rest)

    wfv = prediction.world_from_view
    if wfv is not None:
        def to_world(x):
            return ad.add(ad.matmul(x, wfv.rotation.T), wfv.translation)

        verts, kps, decoded = to_world(verts), to_world(kps), to_world(decoded)
        joints = to_world(fk_t.posed_joints)
    else:
        joints = fk_t.posed_joints

    state = HandState(keypoints3d=kps, vertices=verts, posed_joints=joints)
    if not graph:
        state = state.numpy()
        decoded = ad.val(decoded)
    return state, decoded
