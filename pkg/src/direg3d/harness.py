"""Training, evaluation (MKPE / AUC), baselines, and inference plumbing.

Everything runs in double precision, single-threaded: a fixed seed gives a
bitwise-reproducible metrics log and checkpoint. The stereo path trains in
the same run as the mono path (``stereo_mode = mixed``): every valid view
contributes the mono loss set, and stereo-flagged records additionally run
the fusion trunk with the cross-view reprojection term.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DataError, EmptyInput, NonFiniteLoss, ShapeMismatch
from .geometry import FisheyeCamera, triangulate, virtual_relative_extrinsics
from .hand_model import (
    N_KEYPOINTS,
    HandTemplate,
    MeshDecoder,
    build_template,
)
from .losses import (
    LossReport,
    LossWeights,
    loss_bone_angle,
    loss_bone_length,
    loss_keypoint_variance,
    loss_keypoints_3d,
    loss_mesh,
    loss_param_reg,
    loss_projection_2d,
    loss_stereo_reprojection,
    total_loss,
    TERM_NAMES,
)
from .errors import AllMasked
from .metadata import NormalizationStats, fit_normalization, normalize
from .regressor import (
    Network,
    NetworkConfig,
    Prediction,
    flatten_relative_extrinsics,
    forward_mono_from_features,
    forward_stereo_from_features,
    predict_state,
)
from .synth import (
    SampleRecord,
    VIEW_NAMES,
    load_rig,
    load_split,
    read_manifest,
)

REPORT_MAGIC = "direg3d-report v1"
PCK_MAX_MM = 50
EVAL_CHUNK = 128

# Published reference numbers printed as context next to our rows; they come
# from a private 150k-image corpus and are not expected values at desk scale.
REFERENCE_ROWS = "DIREG3D-Mono 12.37 mm / 0.755 AUC; DIREG3D-Stereo 11.39 mm / 0.774 AUC"


# ---------------------------------------------------------------------------
# metrics

def compute_mkpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean keypoint error in mm over the 21 keypoints."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ShapeMismatch(f"keypoint arrays {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def pck_curve(errors: np.ndarray, max_mm: int = PCK_MAX_MM) -> np.ndarray:
    """PCK sampled at integer thresholds 0..max_mm (fraction of errors <= tau)."""
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    if errors.size == 0:
        raise EmptyInput("no keypoint errors")
    taus = np.arange(max_mm + 1, dtype=np.float64)
    return (errors[None, :] <= taus[:, None]).mean(axis=1)


def compute_auc(errors: np.ndarray, max_mm: int = PCK_MAX_MM) -> float:
    """Normalized trapezoidal integral of the PCK curve over [0, max_mm]."""
    curve = pck_curve(errors, max_mm)
    return float(np.trapezoid(curve, dx=1.0) / max_mm)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    seed: int
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    stereo_mode: str = "mixed"           # "mixed" or "mono"
    weights: LossWeights = field(default_factory=LossWeights)
    backbone_widths: tuple[int, ...] = (8, 16, 32, 64)
    meta_widths: tuple[int, ...] = (64, 64)
    fusion_width: int = 128
    metadata_ablation: bool = False      # feed zeros to the metadata branch
    limit_train_records: int | None = None
    max_steps: int | None = None

    def __post_init__(self):
        if self.stereo_mode not in ("mixed", "mono"):
            raise DataError(f"stereo_mode must be 'mixed' or 'mono', got {self.stereo_mode}")


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Flat ``key value`` text config; '#' starts a comment."""
    out: dict[str, str] = {}
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition(" ")
        if not value.strip():
            raise DataError(f"{path}: malformed line {raw!r}")
        out[key] = value.strip()
    return out


_BOOL = {"true": True, "false": False, "1": True, "0": False}


def train_config_from_file(path: str | Path) -> TrainConfig:
    kv = parse_kv_file(path)
    if "seed" not in kv:
        raise DataError(f"{path}: 'seed' is mandatory (no wall-clock seeding)")
    weight_kwargs = {}
    for f in dc_fields(LossWeights):
        if f.name in kv:
            weight_kwargs[f.name] = float(kv.pop(f.name))
    known = {f.name for f in dc_fields(TrainConfig)}
    cfg_kwargs = {}
    for key, value in kv.items():
        if key not in known:
            raise DataError(f"{path}: unknown config key '{key}'")
        if key in ("backbone_widths", "meta_widths"):
            cfg_kwargs[key] = tuple(int(x) for x in value.split(","))
        elif key in ("metadata_ablation",):
            cfg_kwargs[key] = _BOOL[value.lower()]
        elif key in ("seed", "batch_size", "epochs", "fusion_width",
                     "limit_train_records", "max_steps"):
            cfg_kwargs[key] = int(value)
        elif key == "stereo_mode":
            cfg_kwargs[key] = value
        else:
            cfg_kwargs[key] = float(value)
    cfg_kwargs["weights"] = LossWeights(**weight_kwargs)
    return TrainConfig(**cfg_kwargs)


# ---------------------------------------------------------------------------
# model bundle (network + decoder + template + normalization, one checkpoint)

@dataclass
class ModelBundle:
    net: Network
    decoder: MeshDecoder
    template: HandTemplate
    stats: NormalizationStats
    meta: dict[str, str]

    def parameters(self) -> dict[str, ad.Tensor]:
        return {**self.net.parameters(), **self.decoder.parameters()}


def save_model(path: str | Path, bundle: ModelBundle) -> None:
    arrays = {name: t.value for name, t in bundle.parameters().items()}
    arrays["norm/min"] = bundle.stats.minimum
    arrays["norm/max"] = bundle.stats.maximum
    ad.save_checkpoint(path, arrays, bundle.meta)


def load_model(path: str | Path) -> ModelBundle:
    arrays, meta = ad.load_checkpoint(path)
    config = NetworkConfig.from_meta(meta)
    net = Network(config, seed=0)
    template = build_template(int(meta["template_seed"]), int(meta["vertex_budget"]))
    decoder = MeshDecoder.create(template.n_vertices, np.random.default_rng(0))
    for name, tensor in {**net.parameters(), **decoder.parameters()}.items():
        if name not in arrays:
            raise DataError(f"{path}: checkpoint missing parameter '{name}'")
        if arrays[name].shape != tensor.value.shape:
            raise DataError(f"{path}: parameter '{name}' has shape {arrays[name].shape}, "
                            f"expected {tensor.value.shape}")
        tensor.value = arrays[name].astype(np.float64)
    stats = NormalizationStats(arrays["norm/min"], arrays["norm/max"])
    return ModelBundle(net=net, decoder=decoder, template=template, stats=stats, meta=meta)


# ---------------------------------------------------------------------------
# batch assembly

@dataclass
class ViewBatch:
    """All tensors for one camera's group of view-samples."""

    camera: FisheyeCamera
    record_ids: list[int]
    crops: np.ndarray        # (B, 1, S, S)
    metas: np.ndarray        # (B, 28) normalized
    gt_kp3d: np.ndarray      # (B, 21, 3)
    gt_vertices: np.ndarray  # (B, V, 3)
    gt_kp2d: np.ndarray      # (B, 21, 2)
    visible: np.ndarray      # (B, 21) bool


def _normalized_meta(record: SampleRecord, view: str, stats: NormalizationStats,
                     ablate: bool) -> np.ndarray:
    if ablate:
        return np.zeros(28)
    return normalize(record.views[view].metadata, stats)


def build_view_batches(records: list[SampleRecord], rig: dict[str, FisheyeCamera],
                       stats: NormalizationStats, ablate: bool) -> dict[str, ViewBatch]:
    """Group every valid view of the records by camera name."""
    batches = {}
    for name in VIEW_NAMES:
        chosen = [r for r in records if name in r.views]
        if not chosen:
            continue
        views = [r.views[name] for r in chosen]
        batches[name] = ViewBatch(
            camera=rig[name],
            record_ids=[r.sample_id for r in chosen],
            crops=np.stack([v.crop.astype(np.float64) for v in views])[:, None],
            metas=np.stack([_normalized_meta(r, name, stats, ablate) for r in chosen]),
            gt_kp3d=np.stack([r.gt_keypoints3d for r in chosen]),
            gt_vertices=np.stack([r.gt_vertices for r in chosen]),
            gt_kp2d=np.stack([np.nan_to_num(v.gt_keypoints2d, nan=0.0) for v in views]),
            visible=np.stack([v.visible for v in views]),
        )
    return batches


@dataclass
class StereoBatch:
    records: list[SampleRecord]
    rel: np.ndarray          # (B, 12)
    left_rows: np.ndarray    # indices into the left ViewBatch
    right_rows: np.ndarray   # indices into the right ViewBatch


def build_stereo_batch(records: list[SampleRecord], rig: dict[str, FisheyeCamera],
                       batches: dict[str, ViewBatch],
                       rel_trans_scale: float) -> StereoBatch | None:
    stereo = [r for r in records if r.stereo]
    if not stereo or "left" not in batches or "right" not in batches:
        return None
    left_index = {rid: i for i, rid in enumerate(batches["left"].record_ids)}
    right_index = {rid: i for i, rid in enumerate(batches["right"].record_ids)}
    rel = np.stack([
        flatten_relative_extrinsics(
            virtual_relative_extrinsics(rig["left"], r.views["left"].box,
                                        rig["right"], r.views["right"].box),
            rel_trans_scale,
        )
        for r in stereo
    ])
    return StereoBatch(
        records=stereo,
        rel=rel,
        left_rows=np.array([left_index[r.sample_id] for r in stereo]),
        right_rows=np.array([right_index[r.sample_id] for r in stereo]),
    )


# ---------------------------------------------------------------------------
# loss over one batch of records

def _unit_losses(bundle: ModelBundle, pred: Prediction, cam: FisheyeCamera,
                 gt_kp3d, gt_vertices, gt_kp2d, visible,
                 stereo_extra=None) -> dict[str, object]:
    """Full loss set for one batched prediction group."""
    terms: dict[str, object] = {}
    terms["kp3d"] = loss_keypoints_3d(pred.indep_keypoints, gt_kp3d)
    state, decoded = predict_state(bundle.template, bundle.decoder, pred)
    terms["mesh"] = ad.mul(
        ad.add(ad.as_tensor(loss_mesh(state.vertices, gt_vertices)),
               ad.as_tensor(loss_mesh(decoded, gt_vertices))), 0.5)
    terms["bone_len"] = loss_bone_length(pred.indep_keypoints, gt_kp3d)
    terms["bone_ang"] = loss_bone_angle(pred.indep_keypoints, gt_kp3d)
    terms["var"] = loss_keypoint_variance(pred.indep_keypoints,
                                          pred.keypoint_log_scale, gt_kp3d)
    terms["reg"] = loss_param_reg(pred.hand_params.joint_pose, pred.hand_params.shape)
    try:
        terms["kp2d"] = loss_projection_2d(cam, pred.indep_keypoints, gt_kp2d, visible)
    except AllMasked:
        pass
    if stereo_extra is not None:
        cam_l, cam_r, gt2d_l, gt2d_r, vis_l, vis_r = stereo_extra
        try:
            terms["stereo2d"] = loss_stereo_reprojection(
                cam_l, cam_r, pred.indep_keypoints, gt2d_l, gt2d_r, vis_l, vis_r)
        except AllMasked:
            pass
    return terms


def compute_batch_loss(bundle: ModelBundle, rig: dict[str, FisheyeCamera],
                       records: list[SampleRecord], stats: NormalizationStats,
                       config: TrainConfig) -> LossReport:
    """Mono losses on every valid view; stereo losses on stereo-flagged records.

    Per-term values aggregate over prediction units (view-samples and stereo
    pairs) weighted by unit count, so the reported numbers stay comparable
    across batch compositions.
    """
    batches = build_view_batches(records, rig, stats, config.metadata_ablation)
    if not batches:
        raise DataError("batch contains no valid views")

    features: dict[str, object] = {}
    groups: list[tuple[int, dict[str, object]]] = []
    for name, vb in batches.items():
        features[name] = bundle.net.image_features(vb.crops)
        pred = forward_mono_from_features(bundle.net, features[name], vb.metas,
                                          cam=vb.camera)
        groups.append((
            len(vb.record_ids),
            _unit_losses(bundle, pred, vb.camera, vb.gt_kp3d, vb.gt_vertices,
                         vb.gt_kp2d, vb.visible),
        ))

    if config.stereo_mode == "mixed":
        sb = build_stereo_batch(records, rig, batches,
                                bundle.net.config.rel_trans_scale_mm)
        if sb is not None:
            lb, rb = batches["left"], batches["right"]
            feat_l = features["left"][sb.left_rows]
            feat_r = features["right"][sb.right_rows]
            meta_l = lb.metas[sb.left_rows]
            meta_r = rb.metas[sb.right_rows]
            pred_s = forward_stereo_from_features(
                bundle.net, feat_l, meta_l, feat_r, meta_r, sb.rel, cam_left=lb.camera)
            gt_kp3d = np.stack([r.gt_keypoints3d for r in sb.records])
            gt_verts = np.stack([r.gt_vertices for r in sb.records])
            stereo_extra = (
                lb.camera, rb.camera,
                lb.gt_kp2d[sb.left_rows], rb.gt_kp2d[sb.right_rows],
                lb.visible[sb.left_rows], rb.visible[sb.right_rows],
            )
            groups.append((
                len(sb.records),
                _unit_losses(bundle, pred_s, lb.camera, gt_kp3d, gt_verts,
                             lb.gt_kp2d[sb.left_rows], lb.visible[sb.left_rows],
                             stereo_extra=stereo_extra),
            ))

    aggregated: dict[str, object] = {}
    for term in TERM_NAMES:
        contributions = [(n, t[term]) for n, t in groups if term in t]
        if not contributions:
            continue
        total_n = sum(n for n, _ in contributions)
        acc = None
        for n, value in contributions:
            weighted = ad.mul(ad.as_tensor(value), n / total_n)
            acc = weighted if acc is None else ad.add(acc, weighted)
        aggregated[term] = acc
    return total_loss(aggregated, config.weights)


# ---------------------------------------------------------------------------
# training

def train(config: TrainConfig, data_dir: str | Path, out_path: str | Path,
          log_path: str | Path | None = None) -> ModelBundle:
    """Train from a generated dataset; writes checkpoint + metrics log."""
    data_dir = Path(data_dir)
    out_path = Path(out_path)
    manifest = read_manifest(data_dir / "manifest.txt")
    rig = load_rig(data_dir)
    records = load_split(data_dir, "train")
    if config.limit_train_records is not None:
        records = records[: config.limit_train_records]
    if not records:
        raise DataError("no training records")

    stats = fit_normalization(
        [r.views[name].metadata for r in records for name in VIEW_NAMES
         if name in r.views]
    )
    template = build_template(manifest.config.template_seed,
                              manifest.config.vertex_budget)
    net_config = NetworkConfig(
        crop_size=manifest.config.crop_size,
        backbone_widths=config.backbone_widths,
        meta_widths=config.meta_widths,
        fusion_width=config.fusion_width,
    )
    net = Network(net_config, seed=config.seed)
    decoder = MeshDecoder.create(template.n_vertices,
                                 np.random.default_rng([config.seed, 1]))
    meta = {
        **net_config.to_meta(),
        "template_seed": str(manifest.config.template_seed),
        "vertex_budget": str(manifest.config.vertex_budget),
        "train_seed": str(config.seed),
        "stereo_mode": config.stereo_mode,
        "metadata_ablation": str(config.metadata_ablation).lower(),
    }
    bundle = ModelBundle(net=net, decoder=decoder, template=template,
                         stats=stats, meta=meta)

    params = bundle.parameters()
    opt = ad.Adam(params.values(), ad.AdamHyper(lr=config.lr))
    shuffle_rng = np.random.default_rng([config.seed, 2])

    log_path = Path(log_path) if log_path is not None else Path(str(out_path) + ".log")
    step = 0
    with open(log_path, "w") as log:
        log.write(LossReport.log_header() + "\n")
        done = False
        for _epoch in range(config.epochs):
            order = shuffle_rng.permutation(len(records))
            for lo in range(0, len(records), config.batch_size):
                batch = [records[i] for i in order[lo:lo + config.batch_size]]
                opt.zero_grad()
                report = compute_batch_loss(bundle, rig, batch, stats, config)
                for name, value in report.terms.items():
                    if value is not None and not np.isfinite(value):
                        raise NonFiniteLoss(name, value)
                ad.backward(report.total_node)
                opt.step()
                log.write(report.log_line(step) + "\n")
                step += 1
                if config.max_steps is not None and step >= config.max_steps:
                    done = True
                    break
            if done:
                break
    save_model(out_path, bundle)
    return bundle


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    mkpe_mono: float
    mkpe_stereo: float | None
    mkpe_overall: float
    mkpe_mono_on_stereo_subset: float | None
    mkpe_mano_mono: float
    auc_mono: float
    auc_stereo: float | None
    auc_overall: float
    auc_mono_on_stereo_subset: float | None
    baseline_mean_pose_mkpe: float
    baseline_mean_pose_auc: float
    baseline_triangulation_mkpe: float | None
    pck: np.ndarray                  # (51,)
    per_keypoint_mkpe: np.ndarray    # (21,)
    n_mono_units: int
    n_stereo_units: int

    def __post_init__(self):
        assert 0.0 <= self.auc_overall <= 1.0
        assert np.all(np.diff(self.pck) >= -1e-12), "PCK must be non-decreasing"


def _chunks(n: int, size: int):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


def _mono_errors(bundle: ModelBundle, rig, records, stats,
                 ablate: bool = False):
    """Per-view-sample keypoint error matrices for the mono path."""
    batches = build_view_batches(records, rig, stats, ablate)
    errors, mano_errors, stereo_flags = [], [], []
    for name, vb in batches.items():
        n = len(vb.record_ids)
        stereo_of = {r.sample_id: r.stereo for r in records}
        for lo, hi in _chunks(n, EVAL_CHUNK):
            feat = bundle.net.image_features(vb.crops[lo:hi])
            pred = forward_mono_from_features(bundle.net, feat, vb.metas[lo:hi],
                                              cam=vb.camera)
            kps = ad.val(pred.indep_keypoints)
            errors.append(np.linalg.norm(kps - vb.gt_kp3d[lo:hi], axis=-1))
            state, _ = predict_state(bundle.template, bundle.decoder, pred)
            mano_errors.append(
                np.linalg.norm(ad.val(state.keypoints3d) - vb.gt_kp3d[lo:hi], axis=-1))
        stereo_flags.extend(stereo_of[rid] for rid in vb.record_ids)
    return (np.concatenate(errors), np.concatenate(mano_errors),
            np.array(stereo_flags, dtype=bool))


def _stereo_errors(bundle: ModelBundle, rig, records, stats, ablate: bool = False):
    stereo_records = [r for r in records if r.stereo]
    if not stereo_records:
        return None
    errors = []
    for lo, hi in _chunks(len(stereo_records), EVAL_CHUNK):
        chunk = stereo_records[lo:hi]
        batches = build_view_batches(chunk, rig, stats, ablate)
        sb = build_stereo_batch(chunk, rig, batches,
                                bundle.net.config.rel_trans_scale_mm)
        feat_l = bundle.net.image_features(batches["left"].crops[sb.left_rows])
        feat_r = bundle.net.image_features(batches["right"].crops[sb.right_rows])
        pred = forward_stereo_from_features(
            bundle.net, feat_l, batches["left"].metas[sb.left_rows],
            feat_r, batches["right"].metas[sb.right_rows], sb.rel,
            cam_left=batches["left"].camera)
        gt = np.stack([r.gt_keypoints3d for r in chunk])
        errors.append(np.linalg.norm(ad.val(pred.indep_keypoints) - gt, axis=-1))
    return np.concatenate(errors)


def mean_pose_baseline(train_records: list[SampleRecord]) -> np.ndarray:
    """The constant predictor: training-set mean keypoint configuration."""
    if not train_records:
        raise EmptyInput("no training records for the mean-pose baseline")
    return np.mean([r.gt_keypoints3d for r in train_records], axis=0)


def triangulation_oracle_errors(rig, records) -> np.ndarray | None:
    """Per-keypoint triangulation errors from noiseless GT 2D, stereo records."""
    errors = []
    for rec in records:
        if not rec.stereo:
            continue
        vl, vr = rec.views["left"], rec.views["right"]
        both = vl.visible & vr.visible
        for k in np.flatnonzero(both):
            point = triangulate(rig["left"], rig["right"],
                                vl.gt_keypoints2d[k], vr.gt_keypoints2d[k])
            errors.append(np.linalg.norm(point - rec.gt_keypoints3d[k]))
    return np.array(errors) if errors else None


def evaluate(bundle: ModelBundle, data_dir: str | Path, split: str = "test",
             ablate_metadata: bool | None = None) -> EvalReport:
    data_dir = Path(data_dir)
    rig = load_rig(data_dir)
    records = load_split(data_dir, split)
    if not records:
        raise EmptyInput(f"split '{split}' is empty")
    if ablate_metadata is None:
        # a model trained with a zeroed metadata branch must be fed zeros
        ablate_metadata = bundle.meta.get("metadata_ablation") == "true"
    train_records = load_split(data_dir, "train")

    mono_err, mano_err, mono_is_stereo = _mono_errors(
        bundle, rig, records, bundle.stats, ablate_metadata)
    stereo_err = _stereo_errors(bundle, rig, records, bundle.stats, ablate_metadata)

    mean_pose = mean_pose_baseline(train_records)
    base_err = np.stack([
        np.linalg.norm(mean_pose - r.gt_keypoints3d, axis=-1) for r in records
    ])
    tri_err = triangulation_oracle_errors(rig, records)

    overall = (np.concatenate([mono_err, stereo_err]) if stereo_err is not None
               else mono_err)
    mono_sub = mono_err[mono_is_stereo] if mono_is_stereo.any() else None
    return EvalReport(
        mkpe_mono=float(mono_err.mean(axis=1).mean()),
        mkpe_stereo=float(stereo_err.mean(axis=1).mean()) if stereo_err is not None else None,
        mkpe_overall=float(overall.mean(axis=1).mean()),
        mkpe_mono_on_stereo_subset=(float(mono_sub.mean(axis=1).mean())
                                    if mono_sub is not None else None),
        mkpe_mano_mono=float(mano_err.mean(axis=1).mean()),
        auc_mono=compute_auc(mono_err),
        auc_stereo=compute_auc(stereo_err) if stereo_err is not None else None,
        auc_overall=compute_auc(overall),
        auc_mono_on_stereo_subset=(compute_auc(mono_sub) if mono_sub is not None else None),
        baseline_mean_pose_mkpe=float(base_err.mean(axis=1).mean()),
        baseline_mean_pose_auc=compute_auc(base_err),
        baseline_triangulation_mkpe=(float(np.mean(tri_err)) if tri_err is not None
                                     else None),
        pck=pck_curve(overall),
        per_keypoint_mkpe=overall.mean(axis=0),
        n_mono_units=mono_err.shape[0],
        n_stereo_units=0 if stereo_err is None else stereo_err.shape[0],
    )


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# report file

def _fmt(x) -> str:
    return "-" if x is None else repr(float(x))


def write_report(path: str | Path, report: EvalReport) -> None:
    lines = [REPORT_MAGIC, "row\tmethod\tmkpe_mm\tauc"]
    lines.append(f"row\tmono\t{_fmt(report.mkpe_mono)}\t{_fmt(report.auc_mono)}")
    lines.append(f"row\tstereo\t{_fmt(report.mkpe_stereo)}\t{_fmt(report.auc_stereo)}")
    lines.append("row\tmono_on_stereo_subset\t"
                 f"{_fmt(report.mkpe_mono_on_stereo_subset)}\t"
                 f"{_fmt(report.auc_mono_on_stereo_subset)}")
    lines.append(f"row\tmano_mono\t{_fmt(report.mkpe_mano_mono)}\t-")
    lines.append("row\tmean_pose_baseline\t"
                 f"{_fmt(report.baseline_mean_pose_mkpe)}\t"
                 f"{_fmt(report.baseline_mean_pose_auc)}")
    lines.append(f"row\ttriangulation_oracle\t{_fmt(report.baseline_triangulation_mkpe)}\t-")
    lines.append(f"mkpe_overall\t{_fmt(report.mkpe_overall)}")
    lines.append(f"auc_overall\t{_fmt(report.auc_overall)}")
    lines.append(f"n_mono_units\t{report.n_mono_units}")
    lines.append(f"n_stereo_units\t{report.n_stereo_units}")
    for k, v in enumerate(report.per_keypoint_mkpe):
        lines.append(f"per_keypoint\t{k}\t{float(v)!r}")
    for tau, p in enumerate(report.pck):
        lines.append(f"pck\t{tau}\t{float(p)!r}")
    lines.append(f"# published reference: {REFERENCE_ROWS}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path: str | Path) -> dict:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != REPORT_MAGIC:
        raise DataError(f"{path}: missing '{REPORT_MAGIC}' header")
    rows, scalars, pck, per_kp = {}, {}, {}, {}
    for ln in lines[1:]:
        if ln.startswith("#"):
            continue
        cells = ln.split("\t")
        if cells[0] == "row" and cells[1] != "method":
            rows[cells[1]] = (
                None if cells[2] == "-" else float(cells[2]),
                None if cells[3] == "-" else float(cells[3]),
            )
        elif cells[0] == "pck":
            pck[int(cells[1])] = float(cells[2])
        elif cells[0] == "per_keypoint":
            per_kp[int(cells[1])] = float(cells[2])
        elif cells[0] != "row":
            scalars[cells[0]] = None if cells[1] == "-" else float(cells[1])
    curve = np.array([pck[i] for i in sorted(pck)])
    return {"rows": rows, "scalars": scalars, "pck": curve,
            "per_keypoint": np.array([per_kp[i] for i in sorted(per_kp)])}


# ---------------------------------------------------------------------------
# inference

@dataclass
class InferView:
    camera_name: str          # "left" or "right"
    crop: np.ndarray          # (S, S) float in [0, 1]
    box: object               # BoundingBox in full-frame pixels


def infer(bundle: ModelBundle, views: list[InferView],
          rig: dict[str, FisheyeCamera]):
    """Route 1 view to the mono path, 2 views to the stereo path.

    Returns (prediction, hand_state, decoded_vertices), all numpy, world frame.
    """
    from .metadata import compute_metadata

    if len(views) not in (1, 2):
        raise DataError(f"infer takes 1 or 2 views, got {len(views)}")
    crop_size = bundle.net.config.crop_size
    for v in views:
        if v.crop.shape != (crop_size, crop_size):
            raise DataError(
                f"crop for '{v.camera_name}' is {v.crop.shape}, expected "
                f"({crop_size}, {crop_size})")
        if v.camera_name not in rig:
            raise DataError(f"unknown camera '{v.camera_name}'")

    def meta_of(v: InferView):
        return normalize(compute_metadata(rig[v.camera_name], v.box, crop_size),
                         bundle.stats)

    if len(views) == 1:
        v = views[0]
        feat = bundle.net.image_features(v.crop[None, None])
        pred = forward_mono_from_features(
            bundle.net, feat, meta_of(v)[None], cam=rig[v.camera_name], single=True)
    else:
        by_name = {v.camera_name: v for v in views}
        if set(by_name) != {"left", "right"}:
            raise DataError("stereo inference needs one left and one right view")
        vl, vr = by_name["left"], by_name["right"]
        rel = flatten_relative_extrinsics(
            virtual_relative_extrinsics(rig["left"], vl.box, rig["right"], vr.box),
            bundle.net.config.rel_trans_scale_mm,
        )
        feat_l = bundle.net.image_features(vl.crop[None, None])
        feat_r = bundle.net.image_features(vr.crop[None, None])
        pred = forward_stereo_from_features(
            bundle.net, feat_l, meta_of(vl)[None], feat_r, meta_of(vr)[None],
            rel, cam_left=rig["left"], single=True)

    state, decoded = predict_state(bundle.template, bundle.decoder, pred)
    return pred.numpy(), state.numpy(), ad.val(decoded)


# ---------------------------------------------------------------------------
# plot-ready tables

def plot_data(input_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Emit tab-separated tables from an eval report or a metrics log."""
    input_path = Path(input_path)
    out_dir = Path(out_dir)
    if not input_path.exists():
        raise DataError(f"input not found: {input_path}")
    text = input_path.read_text()
    if not text.strip():
        raise EmptyInput(f"{input_path} is empty")
    first = text.splitlines()[0]
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if first == REPORT_MAGIC:
        report = read_report(input_path)
        lines = ["threshold_mm\tpck"]
        for tau, p in enumerate(report["pck"]):
            lines.append(f"{tau}\t{float(p)!r}")
        out = out_dir / "pck_curve.tsv"
        out.write_text("\n".join(lines) + "\n")
        written.append(out)
    elif first == LossReport.log_header():
        rows = text.splitlines()
        if len(rows) < 2:
            raise EmptyInput(f"{input_path} has a header but no steps")
        out = out_dir / "loss_curves.tsv"
        out.write_text("\n".join(rows) + "\n")
        written.append(out)
    else:
        raise DataError(f"{input_path}: neither an eval report nor a metrics log")
    return written
