"""Parametric hand: procedural template, forward kinematics, blend skinning.

The template is generated, not loaded from a licensed asset: per-finger tube
strips with rings at the joint stations, inverse-distance skinning weights,
a 10-mode linear shape basis, and a 21-row keypoint regressor. Structure:

  joints (16):    0 wrist; finger f in 0..4 -> MCP 1+3f, PIP 2+3f, DIP 3+3f
  keypoints (21): 0 wrist; finger f -> MCP 1+4f, PIP 2+4f, DIP 3+4f, TIP 4+4f

Finger order is thumb, index, middle, ring, pinky. All kinematics run
through the autodiff ops, so FK and skinning are differentiable whenever
the parameters are graph tensors; plain arrays in give plain arrays out.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import BudgetTooSmall, DataError, DimensionMismatch

N_JOINTS = 16
N_KEYPOINTS = 21
N_FINGERS = 5
N_SHAPE = 10
N_POSE_JOINTS = 15
PARAM_DIM = 3 + 3 + N_POSE_JOINTS * 3 + N_SHAPE  # 61

# 21-keypoint skeleton: (parent kp, child kp) per bone, 4 bones per finger.
SKELETON_EDGES = tuple(
    (0 if seg == 0 else seg + 4 * f, seg + 1 + 4 * f)
    for f in range(N_FINGERS)
    for seg in range(4)
)

# Consecutive-bone pairs within each finger chain (indices into SKELETON_EDGES).
ANGLE_PAIRS = tuple(
    (4 * f + seg, 4 * f + seg + 1) for f in range(N_FINGERS) for seg in range(3)
)


@dataclass(frozen=True)
class HandTemplate:
    vertices: np.ndarray          # (V, 3) mm, canonical pose
    faces: np.ndarray             # (F, 3) int vertex indices
    joints: np.ndarray            # (16, 3) rest joint positions
    parents: np.ndarray           # (16,) parent joint index, -1 at the wrist
    weights: np.ndarray           # (V, 16) skinning weights, rows sum to 1
    shape_basis: np.ndarray       # (V, 3, 10) mm per unit shape coefficient
    kp_regressor: np.ndarray      # (21, V) rows sum to 1
    joint_regressor: np.ndarray   # (16, V) rows sum to 1
    joint_shape_basis: np.ndarray  # (16, 3, 10) = joint_regressor . shape_basis
    seed: int
    vertex_budget: int

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def rest_keypoints(self) -> np.ndarray:
        return self.kp_regressor @ self.vertices

    def validate(self):
        v = self.n_vertices
        checks = [
            (self.weights.shape == (v, N_JOINTS), "weight matrix shape"),
            (bool(np.all(self.weights >= 0)), "negative skinning weight"),
            (bool(np.abs(self.weights.sum(axis=1) - 1.0).max() < 1e-9),
             "skinning weight rows must sum to 1"),
            (bool(np.abs(self.kp_regressor.sum(axis=1) - 1.0).max() < 1e-9),
             "keypoint regressor rows must sum to 1"),
            (bool(np.abs(self.joint_regressor.sum(axis=1) - 1.0).max() < 1e-9),
             "joint regressor rows must sum to 1"),
            (self.parents[0] == -1, "joint 0 must be the root"),
            (all(0 <= self.parents[j] < j for j in range(1, N_JOINTS)),
             "joint parents must form a tree rooted at the wrist"),
        ]
        for ok, message in checks:
            if not ok:
                raise DataError(f"invalid hand template: {message}")


@dataclass
class HandParams:
    """Pose and shape: 3 + 3 + 45 + 10 = 61 values.

    Fields may be numpy arrays or autodiff Tensors; an optional leading batch
    dimension is accepted everywhere.
    """

    global_rot: object    # (..., 3) axis-angle, radians
    global_trans: object  # (..., 3) mm
    joint_pose: object    # (..., 15, 3) axis-angle per non-root joint
    shape: object         # (..., 10)

    @staticmethod
    def zeros() -> "HandParams":
        return HandParams(np.zeros(3), np.zeros(3), np.zeros((N_POSE_JOINTS, 3)),
                          np.zeros(N_SHAPE))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([
            ad.val(self.global_rot).reshape(-1),
            ad.val(self.global_trans).reshape(-1),
            ad.val(self.joint_pose).reshape(-1),
            ad.val(self.shape).reshape(-1),
        ])

    @staticmethod
    def from_vector(vec: np.ndarray) -> "HandParams":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.shape[0] != PARAM_DIM:
            raise DimensionMismatch(f"expected {PARAM_DIM} values, got {vec.shape[0]}")
        return HandParams(vec[0:3], vec[3:6], vec[6:51].reshape(N_POSE_JOINTS, 3),
                          vec[51:61])


@dataclass
class HandState:
    """A posed hand: world-space keypoints, vertices, and joints."""

    keypoints3d: object   # (..., 21, 3)
    vertices: object      # (..., V, 3)
    posed_joints: object  # (..., 16, 3)

    def numpy(self) -> "HandState":
        return HandState(ad.val(self.keypoints3d), ad.val(self.vertices),
                         ad.val(self.posed_joints))


@dataclass
class FKResult:
    posed_joints: object  # (..., 16, 3)
    rel_rot: object       # (..., 16, 3, 3) skinning rotations (rest -> posed)
    rel_trans: object     # (..., 16, 3)


# ---------------------------------------------------------------------------
# template construction

_FINGER_ANGLES = np.radians([50.0, 14.0, 0.0, -13.0, -28.0])
_SEGMENT_LENGTHS = np.array([
    [40.0, 30.0, 22.0, 18.0],   # thumb
    [70.0, 40.0, 24.0, 20.0],   # index
    [68.0, 45.0, 27.0, 22.0],   # middle
    [65.0, 42.0, 25.0, 21.0],   # ring
    [62.0, 32.0, 19.0, 17.0],   # pinky
])
_PALM_RADIUS = 9.0
_TIP_RADIUS = 4.5


def _ring_plan(budget: int) -> tuple[int, int]:
    """Pick (sides, rings-per-finger) so 5*rings*sides lands within the budget."""
    best = None
    for sides in (4, 6, 8, 10, 12):
        rings = max(5, round(budget / (N_FINGERS * sides)))
        total = N_FINGERS * rings * sides
        gap = abs(total - budget)
        if best is None or gap < best[0]:
            best = (gap, sides, rings)
    return best[1], best[2]


def _station_params(knots: np.ndarray, rings: int) -> np.ndarray:
    """Arclength stations: the knots plus midpoint subdivisions of widest gaps."""
    stations = list(knots)
    while len(stations) < rings:
        gaps = np.diff(stations)
        i = int(np.argmax(gaps))
        stations.insert(i + 1, 0.5 * (stations[i] + stations[i + 1]))
    return np.array(stations)


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    d = b - a
    t = np.clip((p - a) @ d / (d @ d), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * d)))


def build_template(seed: int, vertex_budget: int = 256) -> HandTemplate:
    """Deterministic procedural hand with MANO-like structure."""
    if vertex_budget < 100:
        raise BudgetTooSmall(f"vertex_budget must be >= 100, got {vertex_budget}")
    rng = np.random.default_rng(seed)
    sides, rings = _ring_plan(vertex_budget)

    angles = _FINGER_ANGLES + rng.uniform(-0.03, 0.03, size=N_FINGERS)
    seg_lengths = _SEGMENT_LENGTHS * (1.0 + rng.uniform(-0.04, 0.04, size=(N_FINGERS, 4)))
    radius_scale = 1.0 + rng.uniform(-0.05, 0.05, size=N_FINGERS)

    joints = np.zeros((N_JOINTS, 3))
    parents = np.full(N_JOINTS, -1, dtype=np.int64)
    tips = np.zeros((N_FINGERS, 3))
    finger_dirs = np.zeros((N_FINGERS, 3))

    verts: list[np.ndarray] = []
    faces: list[tuple[int, int, int]] = []
    # bookkeeping for weights / regressors / shape basis
    vert_finger = []
    vert_station = []     # arclength from the wrist along the finger
    vert_axis_point = []  # ring center
    knot_ring_slices = np.zeros((N_FINGERS, 5, 2), dtype=np.int64)  # per knot: [start, end)

    for f in range(N_FINGERS):
        direction = np.array([np.sin(angles[f]), np.cos(angles[f]), 0.0])
        finger_dirs[f] = direction
        cum = np.concatenate([[0.0], np.cumsum(seg_lengths[f])])
        chain = np.outer(cum, direction)  # wrist, MCP, PIP, DIP, TIP positions
        joints[1 + 3 * f] = chain[1]
        joints[2 + 3 * f] = chain[2]
        joints[3 + 3 * f] = chain[3]
        parents[1 + 3 * f] = 0
        parents[2 + 3 * f] = 1 + 3 * f
        parents[3 + 3 * f] = 2 + 3 * f
        tips[f] = chain[4]

        total_len = cum[-1]
        stations = _station_params(cum, rings)
        n1 = np.array([0.0, 0.0, 1.0])
        n2 = np.cross(direction, n1)
        phase = rng.uniform(0.0, 2 * np.pi)
        for s in stations:
            frac = s / total_len
            radius = radius_scale[f] * (_PALM_RADIUS + (_TIP_RADIUS - _PALM_RADIUS) * frac)
            center = s * direction
            start = len(verts)
            for i in range(sides):
                a = 2 * np.pi * i / sides + phase
                verts.append(center + radius * (np.cos(a) * n2 + np.sin(a) * n1))
                vert_finger.append(f)
                vert_station.append(s)
                vert_axis_point.append(center)
            knot = np.flatnonzero(np.isclose(cum, s))
            if knot.size:
                knot_ring_slices[f, knot[0]] = (start, start + sides)
        # tube faces between consecutive rings
        base = len(verts) - rings * sides
        for r in range(rings - 1):
            for i in range(sides):
                v00 = base + r * sides + i
                v01 = base + r * sides + (i + 1) % sides
                v10 = base + (r + 1) * sides + i
                v11 = base + (r + 1) * sides + (i + 1) % sides
                faces.append((v00, v01, v10))
                faces.append((v01, v11, v10))

    vertices = np.array(verts)
    n_verts = len(verts)
    if not (0.9 * vertex_budget <= n_verts <= 1.1 * vertex_budget):
        raise BudgetTooSmall(
            f"cannot hit vertex budget {vertex_budget} (got {n_verts})"
        )

    # skinning: inverse distance to the two nearest control segments
    segments = []  # (a, b, controlling joint)
    for f in range(N_FINGERS):
        mcp, pip, dip = joints[1 + 3 * f], joints[2 + 3 * f], joints[3 + 3 * f]
        segments.append((np.zeros(3), mcp, 0))
        segments.append((mcp, pip, 1 + 3 * f))
        segments.append((pip, dip, 2 + 3 * f))
        segments.append((dip, tips[f], 3 + 3 * f))
    weights = np.zeros((n_verts, N_JOINTS))
    for vi, p in enumerate(vertices):
        dists = np.array([_point_segment_distance(p, a, b) for a, b, _ in segments])
        nearest = np.argsort(dists)[:2]
        inv = 1.0 / (dists[nearest] + 1.0)
        inv /= inv.sum()
        for ni, wv in zip(nearest, inv):
            weights[vi, segments[ni][2]] += wv

    # keypoint / joint regressors: uniform over the knot ring(s)
    kp_reg = np.zeros((N_KEYPOINTS, n_verts))
    joint_reg = np.zeros((N_JOINTS, n_verts))
    wrist_cols = []
    for f in range(N_FINGERS):
        s0, e0 = knot_ring_slices[f, 0]
        wrist_cols.extend(range(s0, e0))
        for k, kp_index in enumerate((1 + 4 * f, 2 + 4 * f, 3 + 4 * f, 4 + 4 * f)):
            s, e = knot_ring_slices[f, k + 1]
            kp_reg[kp_index, s:e] = 1.0 / (e - s)
        for k, j_index in enumerate((1 + 3 * f, 2 + 3 * f, 3 + 3 * f)):
            s, e = knot_ring_slices[f, k + 1]
            joint_reg[j_index, s:e] = 1.0 / (e - s)
    kp_reg[0, wrist_cols] = 1.0 / len(wrist_cols)
    joint_reg[0, wrist_cols] = 1.0 / len(wrist_cols)

    # joints exactly as regressed, so FK offsets stay consistent under shape
    joints = joint_reg @ vertices

    # shape basis: geometric deformation modes with seeded magnitudes
    basis = np.zeros((n_verts, 3, N_SHAPE))
    station = np.array(vert_station)
    finger_of = np.array(vert_finger)
    axis_pt = np.array(vert_axis_point)
    radial = vertices - axis_pt
    mag = 1.0 + 0.1 * rng.standard_normal(N_SHAPE)
    basis[:, :, 0] = 0.06 * vertices
    basis[:, :, 1] = 0.05 * station[:, None] * finger_dirs[finger_of]
    basis[:, :, 2] = 0.18 * radial
    basis[:, 0, 3] = 0.05 * vertices[:, 0]
    for f in range(N_FINGERS):
        sel = finger_of == f
        basis[sel, :, 4 + f] = 0.04 * station[sel, None] * finger_dirs[f]
    basis[:, 2, 9] = 0.03 * np.linalg.norm(vertices[:, :2], axis=1)
    basis *= mag

    template = HandTemplate(
        vertices=vertices,
        faces=np.array(faces, dtype=np.int64),
        joints=joints,
        parents=parents,
        weights=weights,
        shape_basis=basis,
        kp_regressor=kp_reg,
        joint_regressor=joint_reg,
        joint_shape_basis=np.einsum("jv,vck->jck", joint_reg, basis),
        seed=int(seed),
        vertex_budget=int(vertex_budget),
    )
    template.validate()
    return template


# ---------------------------------------------------------------------------
# kinematics (autodiff-friendly)

def _is_graph(params: HandParams) -> bool:
    return any(ad.is_tensor(x) for x in
               (params.global_rot, params.global_trans, params.joint_pose, params.shape))


def _batched(params: HandParams):
    """Normalize fields to tensors with one leading batch dimension."""
    gr = ad.as_tensor(params.global_rot)
    gt = ad.as_tensor(params.global_trans)
    jp = ad.as_tensor(params.joint_pose)
    sh = ad.as_tensor(params.shape)
    single = gr.ndim == 1
    if single:
        gr = ad.reshape(gr, (1, 3))
        gt = ad.reshape(gt, (1, 3))
        jp = ad.reshape(jp, (1, N_POSE_JOINTS, 3))
        sh = ad.reshape(sh, (1, N_SHAPE))
    return gr, gt, jp, sh, single


def rodrigues(rotvec):
    """Axis-angle (..., J, 3) -> rotation matrices (..., J, 3, 3), smooth at zero."""
    rotvec = ad.as_tensor(rotvec)
    vx = rotvec[..., 0]
    vy = rotvec[..., 1]
    vz = rotvec[..., 2]
    theta_sq = ad.add(ad.add(ad.square(vx), ad.square(vy)), ad.square(vz))
    theta = ad.sqrt(ad.add(theta_sq, 1e-24))
    a = ad.div(ad.sin(theta), theta)                       # sin(t)/t
    b = ad.div(ad.sub(1.0, ad.cos(theta)), ad.add(theta_sq, 1e-24))  # (1-cos t)/t^2
    zero = ad.mul(vx, 0.0)
    k_flat = ad.stack([zero, ad.neg(vz), vy,
                       vz, zero, ad.neg(vx),
                       ad.neg(vy), vx, zero], axis=-1)
    k = ad.reshape(k_flat, k_flat.shape[:-1] + (3, 3))
    k2 = ad.matmul(k, k)
    eye = np.eye(3)
    a_b = ad.reshape(a, a.shape + (1, 1))
    b_b = ad.reshape(b, b.shape + (1, 1))
    return ad.add(eye, ad.add(ad.mul(a_b, k), ad.mul(b_b, k2)))


def forward_kinematics(template: HandTemplate, params: HandParams) -> FKResult:
    """Pose the joint tree. Returns posed joints and skinning transforms."""
    graph = _is_graph(params)
    gr, gt, jp, sh, single = _batched(params)

    # shape-adjusted rest joints: (B, 16, 3)
    jsb = template.joint_shape_basis.reshape(N_JOINTS * 3, N_SHAPE)
    joint_offsets = ad.reshape(ad.matmul(sh, jsb.T), (-1, N_JOINTS, 3))
    rest_joints = ad.add(template.joints, joint_offsets)

    rotvecs = ad.concat([ad.reshape(gr, (-1, 1, 3)), jp], axis=1)  # (B, 16, 3)
    local_rot = rodrigues(rotvecs)                                  # (B, 16, 3, 3)

    g_rot = [None] * N_JOINTS
    g_trans = [None] * N_JOINTS
    for j in range(N_JOINTS):
        rj = local_rot[:, j]                 # (B, 3, 3)
        jj = rest_joints[:, j]               # (B, 3)
        if template.parents[j] < 0:
            g_rot[j] = rj
            root_pos = ad.reshape(ad.matmul(rj, ad.reshape(jj, (-1, 3, 1))), (-1, 3))
            g_trans[j] = ad.add(root_pos, gt)
        else:
            p = int(template.parents[j])
            offset = ad.sub(jj, rest_joints[:, p])
            g_rot[j] = ad.matmul(g_rot[p], rj)
            moved = ad.reshape(ad.matmul(g_rot[p], ad.reshape(offset, (-1, 3, 1))), (-1, 3))
            g_trans[j] = ad.add(moved, g_trans[p])

    rot = ad.stack(g_rot, axis=1)       # (B, 16, 3, 3)
    trans = ad.stack(g_trans, axis=1)   # (B, 16, 3)
    # skinning transform maps REST-pose points: x -> G x; subtract rotated rest joint
    anchored = ad.reshape(ad.matmul(rot, ad.reshape(rest_joints, (-1, N_JOINTS, 3, 1))),
                          (-1, N_JOINTS, 3))
    rel_trans = ad.sub(trans, anchored)

    if single:
        rot, trans, rel_trans = rot[0], trans[0], rel_trans[0]
    result = FKResult(posed_joints=trans, rel_rot=rot, rel_trans=rel_trans)
    if not graph:
        result = FKResult(ad.val(result.posed_joints), ad.val(result.rel_rot),
                          ad.val(result.rel_trans))
    return result


def apply_skinning(template: HandTemplate, fk: FKResult, vertices):
    """Blend-skin rest-pose vertices (..., V, 3) with per-joint transforms."""
    rot = ad.as_tensor(fk.rel_rot)
    trans = ad.as_tensor(fk.rel_trans)
    v = ad.as_tensor(vertices)
    single = rot.ndim == 3
    if single:
        rot = ad.reshape(rot, (1,) + rot.shape)
        trans = ad.reshape(trans, (1,) + trans.shape)
    if v.ndim == 2:
        v = ad.reshape(v, (1,) + v.shape)
    n_verts = v.shape[-2]
    vt = ad.reshape(ad.transpose(v, (0, 2, 1)), (-1, 1, 3, n_verts))   # (B,1,3,V)
    moved = ad.add(ad.matmul(rot, vt), ad.reshape(trans, (-1, N_JOINTS, 3, 1)))
    w = template.weights.T.reshape(1, N_JOINTS, 1, n_verts)
    blended = ad.sum_(ad.mul(moved, w), axis=1)                          # (B,3,V)
    out = ad.transpose(blended, (0, 2, 1))
    return out[0] if single else out


def skin(template: HandTemplate, params: HandParams) -> HandState:
    """Full forward pass: shape blend, FK, LBS, keypoint regression."""
    graph = _is_graph(params)
    gr, gt, jp, sh, single = _batched(params)
    batched_params = HandParams(gr, gt, jp, sh)
    fk = forward_kinematics(template, batched_params)

    sb = template.shape_basis.reshape(-1, N_SHAPE)  # (V*3, 10)
    offs = ad.reshape(ad.matmul(sh, sb.T), (-1, template.n_vertices, 3))
    shaped = ad.add(template.vertices, offs)

    verts = apply_skinning(template, fk, shaped)       # (B, V, 3)
    kps = ad.matmul(template.kp_regressor, verts)      # (B, 21, 3)
    joints = fk.posed_joints

    if single:
        verts, kps, joints = verts[0], kps[0], joints[0]
    state = HandState(keypoints3d=kps, vertices=verts, posed_joints=joints)
    return state if graph else state.numpy()


# ---------------------------------------------------------------------------
# bone quantities

@dataclass
class BoneReport:
    vectors: object   # (..., 20, 3)
    lengths: object   # (..., 20)
    angles: object    # (..., 15) radians; masked entries are 0
    angle_mask: np.ndarray  # (..., 15) bool, False where a bone was degenerate

DEGENERATE_BONE_MM = 1e-9


def bone_vectors(keypoints3d) -> BoneReport:
    """Skeleton bone vectors, lengths, and consecutive inter-bone angles.

    Bones shorter than 1e-9 mm make their angles undefined; those entries are
    masked out (angle reported as 0, mask False) instead of raising, so loss
    code can skip them mid-training.
    """
    kp = ad.as_tensor(keypoints3d)
    graph = ad.is_tensor(keypoints3d)
    heads = np.array([e[0] for e in SKELETON_EDGES])
    tails = np.array([e[1] for e in SKELETON_EDGES])
    vectors = ad.sub(kp[..., tails, :], kp[..., heads, :])
    lengths = ad.sqrt(ad.add(ad.sum_(ad.square(vectors), axis=-1), 1e-300))

    first = np.array([p[0] for p in ANGLE_PAIRS])
    second = np.array([p[1] for p in ANGLE_PAIRS])
    va = vectors[..., first, :]
    vb = vectors[..., second, :]
    la = lengths[..., first]
    lb = lengths[..., second]
    mask = (ad.val(la) > DEGENERATE_BONE_MM) & (ad.val(lb) > DEGENERATE_BONE_MM)
    denom = ad.add(ad.mul(la, lb), 1e-300)
    cosang = ad.div(ad.sum_(ad.mul(va, vb), axis=-1), denom)
    angles = ad.acos(ad.clip(cosang, -1.0 + 1e-12, 1.0 - 1e-12))
    angles = ad.mul(angles, mask.astype(np.float64))
    report = BoneReport(vectors=vectors, lengths=lengths, angles=angles, angle_mask=mask)
    if not graph:
        report = BoneReport(ad.val(vectors), ad.val(lengths), ad.val(angles), mask)
    return report


# ---------------------------------------------------------------------------
# simplified latent-to-vertex decoder (training aid)

LATENT_DIM = 32


@dataclass
class MeshDecoder:
    """Two affine stages with tanh in between; final stage zero-initialized."""

    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor
    latent_dim: int
    n_vertices: int

    @staticmethod
    def create(n_vertices: int, rng: np.random.Generator, latent_dim: int = LATENT_DIM,
               hidden: int = 64) -> "MeshDecoder":
        w1 = rng.standard_normal((latent_dim, hidden)) * np.sqrt(2.0 / latent_dim)
        return MeshDecoder(
            w1=ad.parameter(w1, "decoder/w1"),
            b1=ad.parameter(np.zeros(hidden), "decoder/b1"),
            w2=ad.parameter(np.zeros((hidden, n_vertices * 3)), "decoder/w2"),
            b2=ad.parameter(np.zeros(n_vertices * 3), "decoder/b2"),
            latent_dim=latent_dim,
            n_vertices=n_vertices,
        )

    def parameters(self) -> dict[str, ad.Tensor]:
        return {"decoder/w1": self.w1, "decoder/b1": self.b1,
                "decoder/w2": self.w2, "decoder/b2": self.b2}


def decode_mesh(decoder: MeshDecoder, latent):
    """Latent (..., L) -> per-vertex offsets (..., V, 3) on the template."""
    z = ad.as_tensor(latent)
    graph = ad.is_tensor(latent) or any(p.requires_grad for p in (decoder.w1, decoder.w2))
    single = z.ndim == 1
    if z.shape[-1] != decoder.latent_dim:
        raise DimensionMismatch(
            f"latent must have {decoder.latent_dim} entries, got {z.shape[-1]}"
        )
    zb = ad.reshape(z, (1, -1)) if single else z
    h = ad.tanh(ad.add(ad.matmul(zb, decoder.w1), decoder.b1))
    out = ad.add(ad.matmul(h, decoder.w2), decoder.b2)
    out = ad.reshape(out, (-1, decoder.n_vertices, 3))
    out = out[0] if single else out
    return out if graph else ad.val(out)


# ---------------------------------------------------------------------------
# OBJ export for eyeballing

def obj_string(vertices: np.ndarray, faces: np.ndarray) -> str:
    lines = []
    for v in np.asarray(vertices, dtype=np.float64):
        lines.append(f"v {v[0]:.10g} {v[1]:.10g} {v[2]:.10g}")
    for f in np.asarray(faces, dtype=np.int64):
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    return "\n".join(lines) + "\n"


def write_obj(path: str | Path, vertices: np.ndarray, faces: np.ndarray) -> None:
    Path(path).write_text(obj_string(vertices, faces))


def read_obj(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    if not verts:
        raise DataError(f"{path}: no vertices found")
    return np.array(verts), np.array(faces, dtype=np.int64)
