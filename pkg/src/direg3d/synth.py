"""Synthetic stereo-fisheye dataset: HMD-style rig, stick-figure renders.

Renders are deliberately non-photorealistic: bones as anti-aliased segments
with depth-modulated intensity, keypoints as Gaussian blobs whose size falls
off with depth, over seeded background noise. Every drawn position goes
through the true fisheye projection and the crop mapping, so the images
really encode the lens the metadata describes.

Generation is a pure function of (config, seed): each record derives its own
RNG from ``seed XOR record_id``, so shard-parallel and serial runs produce
identical bytes.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyRender
from .geometry import (
    BoundingBox,
    FisheyeCamera,
    RigidTransform,
    crop_pixel,
    project_many,
    square_crop_box,
    unproject,
)
from .hand_model import (
    N_KEYPOINTS,
    PARAM_DIM,
    SKELETON_EDGES,
    HandParams,
    HandTemplate,
    build_template,
    skin,
)
from .metadata import CROP_MARGIN, METADATA_DIM, MetadataVector, compute_metadata

VIEW_NAMES = ("left", "right")
SHARD_MAGIC = b"direg3d-shard v1\n"
MANIFEST_NAME = "manifest.txt"
MANIFEST_MAGIC = "direg3d-manifest v1"


# ---------------------------------------------------------------------------
# rig

@dataclass(frozen=True)
class RigPreset:
    """Stereo pair with overlapping FOVs; coverage checked at construction."""

    left: FisheyeCamera
    right: FisheyeCamera
    name: str = "hmd-default"

    def __post_init__(self):
        coverage = combined_horizontal_coverage(self.left, self.right)
        if coverage < math.pi:
            raise DataError(
                f"rig covers {math.degrees(coverage):.1f} deg horizontally, needs >= 180"
            )

    def cameras(self) -> dict[str, FisheyeCamera]:
        return {"left": self.left, "right": self.right}

    def camera(self, view: str) -> FisheyeCamera:
        return {"left": self.left, "right": self.right}[view]


def _horizontal_interval(cam: FisheyeCamera) -> tuple[float, float]:
    """Azimuth range (rig frame, radians) swept by the sensor's horizontal axis."""
    angles = []
    for px in ((0.0, cam.cy), (float(cam.width), cam.cy)):
        ray_cam = unproject(cam, np.array(px))
        ray_rig = cam.cam_from_world.rotation.T @ ray_cam
        angles.append(math.atan2(ray_rig[0], ray_rig[2]))
    return min(angles), max(angles)


def combined_horizontal_coverage(left: FisheyeCamera, right: FisheyeCamera) -> float:
    """Length of the union of the two cameras' horizontal azimuth intervals."""
    a = _horizontal_interval(left)
    b = _horizontal_interval(right)
    if a[0] > b[0]:
        a, b = b, a
    if b[0] > a[1]:  # disjoint
        return (a[1] - a[0]) + (b[1] - b[0])
    return max(a[1], b[1]) - a[0]


def default_rig(baseline_mm: float = 100.0, toe_out_deg: float = 25.0) -> RigPreset:
    """Two grayscale fisheye cameras on a head-mounted rig, looking outward."""
    def camera(side: float) -> FisheyeCamera:
        yaw = math.radians(toe_out_deg) * side
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
        center = np.array([side * baseline_mm / 2.0, 0.0, 0.0])
        return FisheyeCamera(
            fx=280.0, fy=280.0, cx=320.0, cy=240.0,
            k1=-0.05, k2=0.01, k3=-0.002, k4=0.0005,
            width=640, height=480,
            cam_from_world=RigidTransform(rot, -rot @ center),
        )

    return RigPreset(left=camera(-1.0), right=camera(+1.0))


# ---------------------------------------------------------------------------
# hand sampling

# flexion-biased axis-angle ranges, radians; MCP rows also abduct
POSE_RANGES = {
    "mcp_flex": (-0.25, 1.45),
    "mcp_abduct": (-0.25, 0.25),
    "pip_flex": (-0.05, 1.65),
    "dip_flex": (-0.05, 1.10),
    "twist": (-0.08, 0.08),
}

POSITION_RANGE = {
    "x": (-550.0, 550.0),
    "y": (-180.0, 180.0),
    "z": (200.0, 700.0),
}

SHAPE_STD = 0.5
SHAPE_CLIP = 2.0


def sample_hand(rng: np.random.Generator) -> HandParams:
    """Random hand in the egocentric working volume, anatomically plausible."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    global_rot = axis * rng.uniform(0.0, math.pi)
    global_trans = np.array([
        rng.uniform(*POSITION_RANGE["x"]),
        rng.uniform(*POSITION_RANGE["y"]),
        rng.uniform(*POSITION_RANGE["z"]),
    ])
    joint_pose = np.zeros((15, 3))
    for f in range(5):
        mcp, pip, dip = 3 * f, 3 * f + 1, 3 * f + 2
        joint_pose[mcp, 0] = rng.uniform(*POSE_RANGES["mcp_flex"])
        joint_pose[mcp, 2] = rng.uniform(*POSE_RANGES["mcp_abduct"])
        joint_pose[pip, 0] = rng.uniform(*POSE_RANGES["pip_flex"])
        joint_pose[dip, 0] = rng.uniform(*POSE_RANGES["dip_flex"])
        for j in (mcp, pip, dip):
            joint_pose[j, 1] = rng.uniform(*POSE_RANGES["twist"])
    shape = np.clip(rng.normal(scale=SHAPE_STD, size=10), -SHAPE_CLIP, SHAPE_CLIP)
    return HandParams(global_rot, global_trans, joint_pose, shape)


# ---------------------------------------------------------------------------
# rendering

LINE_SIGMA_PX = 0.8
NOISE_STD = 0.02
MIN_VISIBLE_KEYPOINTS = 8


def _depth_intensity(z_mm: np.ndarray) -> np.ndarray:
    return np.clip(500.0 / z_mm, 0.35, 1.0)


def _blob_sigma(z_mm: np.ndarray) -> np.ndarray:
    return np.clip(1500.0 / z_mm, 0.7, 3.0)


def render_crop(cam: FisheyeCamera, box: BoundingBox, keypoints3d: np.ndarray,
                crop_size: int, rng: np.random.Generator,
                margin: float = CROP_MARGIN) -> np.ndarray:
    """Stick-figure grayscale render of the hand inside the square crop window.

    ``box`` is the tight detector box; the drawn window is its square
    expansion. Raises EmptyRender if no keypoint projects into the FOV.
    """
    px_full, valid = project_many(cam, keypoints3d)
    if not valid.any():
        raise EmptyRender("no visible keypoint to draw")
    square = square_crop_box(box, margin)
    px = np.full((N_KEYPOINTS, 2), np.nan)
    px[valid] = crop_pixel(square, crop_size, px_full[valid])
    z_cam = cam.cam_from_world.apply(keypoints3d)[:, 2]

    ys, xs = np.mgrid[0:crop_size, 0:crop_size]
    grid = np.stack([xs, ys], axis=-1).astype(np.float64) + 0.5  # pixel centers
    img = np.zeros((crop_size, crop_size))

    for head, tail in SKELETON_EDGES:
        if not (valid[head] and valid[tail]):
            continue
        a, b = px[head], px[tail]
        d = b - a
        seg_len2 = float(d @ d)
        if seg_len2 < 1e-12:
            continue
        t = np.clip(((grid - a) @ d) / seg_len2, 0.0, 1.0)
        closest = a + t[..., None] * d
        dist2 = np.sum((grid - closest) ** 2, axis=-1)
        intensity = _depth_intensity(0.5 * (z_cam[head] + z_cam[tail]))
        img = np.maximum(img, intensity * np.exp(-dist2 / (2.0 * LINE_SIGMA_PX**2)))

    for k in range(N_KEYPOINTS):
        if not valid[k]:
            continue
        sigma = _blob_sigma(z_cam[k])
        dist2 = np.sum((grid - px[k]) ** 2, axis=-1)
        img = np.maximum(img, _depth_intensity(z_cam[k]) * np.exp(-dist2 / (2 * sigma**2)))

    img = img + rng.normal(0.0, NOISE_STD, size=img.shape)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# records

@dataclass
class ViewSample:
    box: BoundingBox
    metadata: MetadataVector
    crop: np.ndarray             # (S, S) float32 in [0, 1]
    visible: np.ndarray          # (21,) bool
    gt_keypoints2d: np.ndarray   # (21, 2) full-frame pixels, NaN where invisible


@dataclass
class SampleRecord:
    sample_id: int
    stereo: bool
    views: dict[str, ViewSample]          # keyed by "left" / "right"
    gt_params: HandParams
    gt_keypoints3d: np.ndarray            # (21, 3) world mm
    gt_vertices: np.ndarray               # (V, 3) world mm


@dataclass
class GenConfig:
    n_train: int = 5000
    n_val: int = 500
    n_test: int = 500
    crop_size: int = 32
    stereo_fraction: float = 0.35
    shard_size: int = 1000
    template_seed: int = 0
    vertex_budget: int = 256

    @property
    def total(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def split_of(self, record_id: int) -> str:
        if record_id < self.n_train:
            return "train"
        if record_id < self.n_train + self.n_val:
            return "val"
        return "test"


@dataclass
class DatasetManifest:
    config: GenConfig
    seed: int
    n_records: int
    stereo_count: int
    resampled: int
    n_vertices: int
    rig_name: str
    format_version: int = 1

    @property
    def stereo_fraction_realized(self) -> float:
        return self.stereo_count / self.n_records


def _view_visibility(cam: FisheyeCamera, keypoints3d: np.ndarray):
    px, valid = project_many(cam, keypoints3d)
    inside = valid.copy()
    inside[valid] &= (
        (px[valid, 0] >= 0.0) & (px[valid, 0] <= cam.width)
        & (px[valid, 1] >= 0.0) & (px[valid, 1] <= cam.height)
    )
    return px, inside


def _tight_box(px: np.ndarray, visible: np.ndarray, cam: FisheyeCamera) -> BoundingBox:
    """Integer-rounded tight box around the visible keypoints, on-sensor.

    Outward rounding mimics a real detector's pixel-grid output and keeps
    every visible keypoint strictly inside the box.
    """
    pts = px[visible]
    box = BoundingBox(
        math.floor(pts[:, 0].min()), math.floor(pts[:, 1].min()),
        math.ceil(pts[:, 0].max()) + 1.0, math.ceil(pts[:, 1].max()) + 1.0,
    )
    return box.clamped(cam.width, cam.height)


def make_record(record_id: int, seed: int, rig: RigPreset, template: HandTemplate,
                crop_size: int, want_stereo: bool | None = None,
                max_attempts: int = 300) -> tuple[SampleRecord, int]:
    """Sample one record; resample until the mono/stereo stratum matches.

    Returns (record, number of rejected attempts).
    """
    rng = np.random.default_rng(seed ^ record_id)
    if want_stereo is None:
        want_stereo = bool(rng.random() < 0.5)
    rejected = 0
    for _ in range(max_attempts):
        params = sample_hand(rng)
        state = skin(template, params)
        kp3d = state.keypoints3d
        per_view = {}
        for name in VIEW_NAMES:
            cam = rig.camera(name)
            px, inside = _view_visibility(cam, kp3d)
            if inside.sum() >= MIN_VISIBLE_KEYPOINTS:
                per_view[name] = (px, inside)
        is_stereo = len(per_view) == 2
        if len(per_view) == 0 or is_stereo != want_stereo:
            rejected += 1
            continue
        views = {}
        for name in VIEW_NAMES:  # fixed order keeps the rng stream deterministic
            if name not in per_view:
                continue
            cam = rig.camera(name)
            px, inside = per_view[name]
            box = _tight_box(px, inside, cam)
            crop = render_crop(cam, box, kp3d, crop_size, rng)
            views[name] = ViewSample(
                box=box,
                metadata=compute_metadata(cam, box, crop_size),
                crop=crop.astype(np.float32),
                visible=inside,
                gt_keypoints2d=px,
            )
        record = SampleRecord(
            sample_id=record_id,
            stereo=is_stereo,
            views=views,
            gt_params=params,
            gt_keypoints3d=kp3d,
            gt_vertices=state.vertices,
        )
        return record, rejected
    raise DataError(
        f"record {record_id}: could not sample a {'stereo' if want_stereo else 'mono'} "
        f"hand in {max_attempts} attempts"
    )


# ---------------------------------------------------------------------------
# shard serialization (fixed little-endian layout)

def _record_bytes(rec: SampleRecord, crop_size: int, n_vertices: int) -> bytes:
    parts = [struct.pack("<QB", rec.sample_id, int(rec.stereo))]
    for name in VIEW_NAMES:
        view = rec.views.get(name)
        parts.append(struct.pack("<B", int(view is not None)))
        if view is None:
            continue
        parts.append(view.box.as_array().astype("<f8").tobytes())
        parts.append(view.metadata.raw.astype("<f8").tobytes())
        parts.append(view.crop.astype("<f4").tobytes())
        parts.append(np.packbits(view.visible, bitorder="little").tobytes())
        parts.append(np.nan_to_num(view.gt_keypoints2d, nan=-1e9).astype("<f8").tobytes())
    parts.append(rec.gt_params.as_vector().astype("<f8").tobytes())
    parts.append(rec.gt_keypoints3d.astype("<f8").tobytes())
    parts.append(rec.gt_vertices.astype("<f8").tobytes())
    return b"".join(parts)


def _read_record(buf: bytes, off: int, crop_size: int, n_vertices: int):
    sample_id, stereo = struct.unpack_from("<QB", buf, off)
    off += 9
    views = {}
    for name in VIEW_NAMES:
        present = buf[off]
        off += 1
        if not present:
            continue
        box_vals = np.frombuffer(buf, "<f8", 4, off)
        off += 32
        meta = np.frombuffer(buf, "<f8", METADATA_DIM, off)
        off += METADATA_DIM * 8
        crop = np.frombuffer(buf, "<f4", crop_size * crop_size, off).reshape(
            crop_size, crop_size)
        off += crop_size * crop_size * 4
        vis_bytes = (N_KEYPOINTS + 7) // 8
        visible = np.unpackbits(
            np.frombuffer(buf, np.uint8, vis_bytes, off), bitorder="little"
        )[:N_KEYPOINTS].astype(bool)
        off += vis_bytes
        kp2d = np.frombuffer(buf, "<f8", N_KEYPOINTS * 2, off).reshape(N_KEYPOINTS, 2).copy()
        kp2d[kp2d <= -1e8] = np.nan
        off += N_KEYPOINTS * 2 * 8
        views[name] = ViewSample(
            box=BoundingBox(*box_vals),
            metadata=MetadataVector(meta.copy()),
            crop=crop.copy(),
            visible=visible,
            gt_keypoints2d=kp2d,
        )
    params = HandParams.from_vector(np.frombuffer(buf, "<f8", PARAM_DIM, off))
    off += PARAM_DIM * 8
    kp3d = np.frombuffer(buf, "<f8", N_KEYPOINTS * 3, off).reshape(N_KEYPOINTS, 3).copy()
    off += N_KEYPOINTS * 3 * 8
    verts = np.frombuffer(buf, "<f8", n_vertices * 3, off).reshape(n_vertices, 3).copy()
    off += n_vertices * 3 * 8
    rec = SampleRecord(sample_id, bool(stereo), views, params, kp3d, verts)
    return rec, off


def write_shard(path: Path, records: list[SampleRecord], crop_size: int,
                n_vertices: int) -> None:
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<III", len(records), crop_size, n_vertices))
        for rec in records:
            fh.write(_record_bytes(rec, crop_size, n_vertices))


def read_shard(path: Path) -> list[SampleRecord]:
    buf = Path(path).read_bytes()
    if not buf.startswith(SHARD_MAGIC):
        raise DataError(f"{path}: missing shard magic")
    n, crop_size, n_vertices = struct.unpack_from("<III", buf, len(SHARD_MAGIC))
    off = len(SHARD_MAGIC) + 12
    records = []
    for _ in range(n):
        rec, off = _read_record(buf, off, crop_size, n_vertices)
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# manifest

def write_manifest(path: Path, manifest: DatasetManifest) -> None:
    cfg = manifest.config
    lines = [
        MANIFEST_MAGIC,
        f"format_version {manifest.format_version}",
        f"seed {manifest.seed}",
        f"rig {manifest.rig_name}",
        f"n_train {cfg.n_train}",
        f"n_val {cfg.n_val}",
        f"n_test {cfg.n_test}",
        f"crop_size {cfg.crop_size}",
        f"stereo_fraction_target {cfg.stereo_fraction!r}",
        f"shard_size {cfg.shard_size}",
        f"template_seed {cfg.template_seed}",
        f"vertex_budget {cfg.vertex_budget}",
        f"n_records {manifest.n_records}",
        f"stereo_count {manifest.stereo_count}",
        f"stereo_fraction_realized {manifest.stereo_fraction_realized!r}",
        f"resampled {manifest.resampled}",
        f"n_vertices {manifest.n_vertices}",
    ]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> DatasetManifest:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise DataError(f"{path}: missing '{MANIFEST_MAGIC}' header")
    kv = {}
    for ln in lines[1:]:
        key, _, value = ln.partition(" ")
        kv[key] = value
    cfg = GenConfig(
        n_train=int(kv["n_train"]), n_val=int(kv["n_val"]), n_test=int(kv["n_test"]),
        crop_size=int(kv["crop_size"]),
        stereo_fraction=float(kv["stereo_fraction_target"]),
        shard_size=int(kv["shard_size"]), template_seed=int(kv["template_seed"]),
        vertex_budget=int(kv["vertex_budget"]),
    )
    return DatasetManifest(
        config=cfg, seed=int(kv["seed"]), n_records=int(kv["n_records"]),
        stereo_count=int(kv["stereo_count"]), resampled=int(kv["resampled"]),
        n_vertices=int(kv["n_vertices"]), rig_name=kv["rig"],
        format_version=int(kv["format_version"]),
    )


# ---------------------------------------------------------------------------
# generation

def generate_dataset(config: GenConfig, seed: int, out_dir: str | Path,
                     rig: RigPreset | None = None, workers: int = 1) -> DatasetManifest:
    """Write shards + manifest + rig file. Byte-identical for a fixed seed,
    whether generated serially or shard-parallel."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rig = rig if rig is not None else default_rig()
    template = build_template(config.template_seed, config.vertex_budget)

    # pre-draw the per-record stereo targets from a dedicated stream so the
    # realized fraction tracks the target regardless of per-record outcomes
    strata_rng = np.random.default_rng([seed, 0xD1E6])
    want_stereo = strata_rng.random(config.total) < config.stereo_fraction

    def build_one(rid: int):
        return make_record(rid, seed, rig, template, config.crop_size,
                           want_stereo=bool(want_stereo[rid]))

    n_shards = -(-config.total // config.shard_size)

    def build_shard(shard_idx: int):
        lo = shard_idx * config.shard_size
        hi = min(lo + config.shard_size, config.total)
        records, rejected = [], 0
        for rid in range(lo, hi):
            rec, rej = build_one(rid)
            records.append(rec)
            rejected += rej
        write_shard(out / f"shard-{shard_idx:04d}.bin", records,
                    config.crop_size, template.n_vertices)
        stereo = sum(r.stereo for r in records)
        return stereo, rejected

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(build_shard, range(n_shards)))
    else:
        results = [build_shard(i) for i in range(n_shards)]

    stereo_count = sum(r[0] for r in results)
    resampled = sum(r[1] for r in results)
    manifest = DatasetManifest(
        config=config, seed=seed, n_records=config.total,
        stereo_count=stereo_count, resampled=resampled,
        n_vertices=template.n_vertices, rig_name=rig.name,
    )
    write_manifest(out / MANIFEST_NAME, manifest)
    from .geometry import write_rig

    write_rig(out / "rig.txt", rig.cameras())
    return manifest


def load_split(data_dir: str | Path, split: str) -> list[SampleRecord]:
    """Read all records of one split, ordered by record id."""
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir / MANIFEST_NAME)
    cfg = manifest.config
    records = []
    for shard_path in sorted(data_dir.glob("shard-*.bin")):
        records.extend(read_shard(shard_path))
    chosen = [r for r in records if cfg.split_of(r.sample_id) == split]
    if split not in ("train", "val", "test"):
        raise DataError(f"unknown split '{split}'")
    return sorted(chosen, key=lambda r: r.sample_id)


def load_rig(data_dir: str | Path) -> dict[str, FisheyeCamera]:
    from .geometry import read_rig

    return read_rig(Path(data_dir) / "rig.txt")


# ---------------------------------------------------------------------------
# PGM export for eyeballing

def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """8-bit binary PGM from a float image in [0, 1]."""
    img = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Binary 8-bit PGM back to float in [0, 1]."""
    return parse_pgm(Path(path).read_bytes(), source=str(path))


def parse_pgm(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if not raw.startswith(b"P5"):
        raise DataError(f"{source}: not a binary PGM file")
    fields: list[bytes] = []
    off = 2
    while len(fields) < 3:
        while off < len(raw) and raw[off:off + 1].isspace():
            off += 1
        if raw[off:off + 1] == b"#":
            while off < len(raw) and raw[off] != 0x0A:
                off += 1
            continue
        start = off
        while off < len(raw) and not raw[off:off + 1].isspace():
            off += 1
        fields.append(raw[start:off])
    off += 1  # single whitespace after maxval
    width, height, maxval = (int(f) for f in fields)
    if len(raw) < off + width * height:
        raise DataError(f"{source}: truncated PGM payload")
    data = np.frombuffer(raw, np.uint8, width * height, off)
    return data.reshape(height, width).astype(np.float64) / maxval
