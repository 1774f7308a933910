"""Composite training objective: 3D, mesh, bone, variance, and 2D terms.

Every term works on plain arrays or on graph tensors; the graph path is what
training differentiates through. Scalars come back as Tensors when any input
was a Tensor, floats otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import AllMasked, ShapeMismatch
from .geometry import FisheyeCamera
from .hand_model import bone_vectors

LOG_SCALE_CLAMP = 5.0

TERM_NAMES = ("kp3d", "mesh", "bone_len", "bone_ang", "var", "reg", "kp2d", "stereo2d")


@dataclass(frozen=True)
class LossWeights:
    w_kp3d: float = 1.0
    w_mesh: float = 1.0
    w_bone_len: float = 0.5
    w_bone_ang: float = 0.5
    w_var: float = 0.1
    w_reg: float = 0.01
    w_kp2d: float = 0.01
    w_stereo2d: float = 0.01

    def __post_init__(self):
        values = [getattr(self, f.name) for f in fields(self)]
        if any(v < 0 for v in values):
            raise ShapeMismatch("loss weights must be non-negative")
        if not any(v > 0 for v in values):
            raise ShapeMismatch("at least one loss weight must be positive")

    def weight_for(self, term: str) -> float:
        return getattr(self, f"w_{term}")


@dataclass
class LossReport:
    """Per-term scalar values plus the weighted total.

    Absent terms (e.g. the stereo term on a mono sample) are None, not zero.
    ``total_node`` carries the graph scalar when the report was built from
    tensors, for backward().
    """

    terms: dict[str, float | None]
    total: float
    total_node: object = None

    def log_line(self, step: int) -> str:
        cells = [str(step)]
        for name in TERM_NAMES:
            v = self.terms.get(name)
            cells.append("-" if v is None else repr(float(v)))
        cells.append(repr(float(self.total)))
        return "\t".join(cells)

    @staticmethod
    def log_header() -> str:
        return "\t".join(["step", *TERM_NAMES, "total"])


def _check_same_shape(a, b, what: str):
    va, vb = ad.val(a), ad.val(b)
    if va.shape != vb.shape:
        raise ShapeMismatch(f"{what}: {va.shape} vs {vb.shape}")


def _finish(result, graph: bool):
    return result if graph else float(result)


def loss_keypoints_3d(pred, gt):
    """Mean elementwise L1 distance over 21x3 keypoint coordinates (mm)."""
    _check_same_shape(pred, gt, "keypoints")
    graph = ad.is_tensor(pred) or ad.is_tensor(gt)
    return _finish(ad.mean(ad.abs_(ad.sub(pred, gt))), graph)


def loss_mesh(pred, gt):
    """Mean elementwise L1 distance over Vx3 vertex coordinates (mm)."""
    _check_same_shape(pred, gt, "vertices")
    graph = ad.is_tensor(pred) or ad.is_tensor(gt)
    return _finish(ad.mean(ad.abs_(ad.sub(pred, gt))), graph)


def loss_bone_length(pred_kp, gt_kp):
    """Mean L1 over the 20 skeleton edge lengths (mm)."""
    _check_same_shape(pred_kp, gt_kp, "keypoints")
    graph = ad.is_tensor(pred_kp) or ad.is_tensor(gt_kp)
    lp = bone_vectors(ad.as_tensor(pred_kp)).lengths
    lg = bone_vectors(ad.as_tensor(gt_kp)).lengths
    return _finish(ad.mean(ad.abs_(ad.sub(lp, lg))), graph)


def loss_bone_angle(pred_kp, gt_kp):
    """Mean L1 over the 15 inter-bone angles (rad); degenerate bones masked."""
    _check_same_shape(pred_kp, gt_kp, "keypoints")
    graph = ad.is_tensor(pred_kp) or ad.is_tensor(gt_kp)
    rp = bone_vectors(ad.as_tensor(pred_kp))
    rg = bone_vectors(ad.as_tensor(gt_kp))
    mask = (rp.angle_mask & rg.angle_mask).astype(np.float64)
    count = mask.sum()
    if count == 0:
        raise AllMasked("all bone angles degenerate")
    diff = ad.mul(ad.abs_(ad.sub(rp.angles, rg.angles)), mask)
    return _finish(ad.div(ad.sum_(diff), count), graph)


def loss_keypoint_variance(pred, log_scale, gt):
    """Laplace negative log-likelihood with one isotropic scale per keypoint.

    Per keypoint: |pred - gt|_1 * exp(-s) + 3 s, averaged over keypoints;
    s is clamped to [-5, 5] for stability. The per-error optimum sits at
    s* = ln(e / 3).
    """
    _check_same_shape(pred, gt, "keypoints")
    pv, sv = ad.val(pred), ad.val(log_scale)
    if pv.shape[:-1] != sv.shape:
        raise ShapeMismatch(f"log_scale shape {sv.shape} does not match keypoints {pv.shape}")
    graph = any(ad.is_tensor(x) for x in (pred, log_scale, gt))
    s = ad.clip(ad.as_tensor(log_scale), -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
    l1 = ad.sum_(ad.abs_(ad.sub(pred, gt)), axis=-1)
    nll = ad.add(ad.mul(l1, ad.exp(ad.neg(s))), ad.mul(s, 3.0))
    return _finish(ad.mean(nll), graph)


def loss_param_reg(joint_pose, shape):
    """Mean squared magnitude of the 45 pose and 10 shape values (55 total)."""
    graph = ad.is_tensor(joint_pose) or ad.is_tensor(shape)
    jp = ad.as_tensor(joint_pose)
    sh = ad.as_tensor(shape)
    n_samples = ad.val(jp).size // 45
    total = ad.add(ad.sum_(ad.square(jp)), ad.sum_(ad.square(sh)))
    return _finish(ad.div(total, float(n_samples * 55)), graph)


def project_points(cam: FisheyeCamera, points):
    """Differentiable fisheye projection of world points (..., K, 3).

    Returns (pixels (..., K, 2), valid (..., K) bool ndarray). Validity is
    decided on values (z > 0 and theta <= theta_max) and is not part of the
    graph; invalid entries still hold finite garbage and must be masked by
    the caller.
    """
    p = ad.as_tensor(points)
    rot = cam.cam_from_world.rotation
    trans = cam.cam_from_world.translation
    p_cam = ad.add(ad.matmul(p, rot.T), trans)
    x = p_cam[..., 0]
    y = p_cam[..., 1]
    z = p_cam[..., 2]
    r = ad.sqrt(ad.add(ad.add(ad.square(x), ad.square(y)), 1e-18))
    theta = ad.atan2(r, z)
    t2 = ad.square(theta)
    poly = ad.add(1.0, ad.mul(t2, ad.add(cam.k1, ad.mul(t2, ad.add(cam.k2, ad.mul(
        t2, ad.add(cam.k3, ad.mul(t2, cam.k4))))))))
    theta_d = ad.mul(theta, poly)
    scale = ad.div(theta_d, r)
    u = ad.add(ad.mul(ad.mul(scale, x), cam.fx), cam.cx)
    v = ad.add(ad.mul(ad.mul(scale, y), cam.fy), cam.cy)
    pixels = ad.stack([u, v], axis=-1)
    valid = (ad.val(z) > 1e-9) & (ad.val(theta) <= cam.theta_max + 1e-12)
    return pixels, valid


def loss_projection_2d(cam: FisheyeCamera, pred_kp3d, gt_kp2d, visible=None):
    """Mean elementwise L1 pixel error of projected keypoints against GT 2D.

    Keypoints that fall outside the FOV (or are flagged invisible) are masked
    out; raises AllMasked when nothing remains.
    """
    pv = ad.val(pred_kp3d)
    gv = ad.val(gt_kp2d)
    if pv.shape[:-1] != gv.shape[:-1] or gv.shape[-1] != 2 or pv.shape[-1] != 3:
        raise ShapeMismatch(f"keypoints {pv.shape} vs 2D ground truth {gv.shape}")
    graph = ad.is_tensor(pred_kp3d)
    pixels, valid = project_points(cam, pred_kp3d)
    if visible is not None:
        valid = valid & np.asarray(visible, dtype=bool)
    count = valid.sum()
    if count == 0:
        raise AllMasked("no projectable keypoint")
    mask = valid.astype(np.float64)[..., None]
    diff = ad.mul(ad.abs_(ad.sub(pixels, gt_kp2d)), mask)
    return _finish(ad.div(ad.sum_(diff), 2.0 * count), graph)


def loss_stereo_reprojection(
    cam_l: FisheyeCamera,
    cam_r: FisheyeCamera,
    pred_kp3d,
    gt2d_l,
    gt2d_r,
    visible_l=None,
    visible_r=None,
):
    """Cross-view 2D anchoring: mean of the per-view projection losses.

    Keypoints visible in only one view contribute through that view alone;
    a fully masked view drops out of the average.
    """
    graph = ad.is_tensor(pred_kp3d)
    views = []
    for cam, gt2d, visible in ((cam_l, gt2d_l, visible_l), (cam_r, gt2d_r, visible_r)):
        try:
            views.append(ad.as_tensor(loss_projection_2d(cam, pred_kp3d, gt2d, visible)))
        except AllMasked:
            continue
    if not views:
        raise AllMasked("no view has a projectable keypoint")
    total = views[0]
    for v in views[1:]:
        total = ad.add(total, v)
    return _finish(ad.div(total, float(len(views))), graph)


def total_loss(terms: dict[str, object], weights: LossWeights) -> LossReport:
    """Weighted sum of the supplied terms. Missing terms stay absent."""
    report_terms: dict[str, float | None] = {}
    total_node = None
    for name in TERM_NAMES:
        term = terms.get(name)
        if term is None:
            report_terms[name] = None
            continue
        report_terms[name] = float(ad.val(term).reshape(()))
        weighted = ad.mul(ad.as_tensor(term), weights.weight_for(name))
        total_node = weighted if total_node is None else ad.add(total_node, weighted)
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise ShapeMismatch(f"unknown loss terms: {sorted(unknown)}")
    if total_node is None:
        raise ShapeMismatch("no loss terms supplied")
    return LossReport(terms=report_terms, total=float(total_node.value.reshape(())),
                      total_node=total_node)
