"""Fisheye camera model, rig extrinsics, crop intrinsics, and stereo geometry.

Conventions:
  - World and camera frames are right-handed, millimeters, OpenCV axes
    (x right, y down, z forward through the lens).
  - ``cam_from_world`` maps world points into the camera frame:
    ``x_cam = R @ x_world + t``.
  - The lens follows the equidistant fisheye model with a 4-term odd radial
    polynomial: ``theta_d = theta * (1 + k1*t2 + k2*t2^2 + k3*t2^3 + k4*t2^4)``
    with ``t2 = theta^2``; ``theta`` is the angle of incidence against the
    optical axis. Pixel radius is ``f * theta_d``.

All types are immutable after construction and all operations are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DegenerateBox,
    NearParallelRays,
    NoConvergence,
    OutsideFov,
    OutsideImage,
    PointBehindCamera,
)

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: ``x_out = rotation @ x_in + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL):
            raise DataError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise DataError("rotation determinant is not +1 within 1e-9")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or many (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Returns self after other: ``x -> self(other(x))``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def as_matrix_3x4(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation.reshape(3, 1)])


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in full-frame pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DegenerateBox(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def clamped(self, width: float, height: float) -> "BoundingBox":
        """Clamp into sensor bounds. Raises DegenerateBox if nothing remains."""
        return BoundingBox(
            max(0.0, self.x_min),
            max(0.0, self.y_min),
            min(float(width), self.x_max),
            min(float(height), self.y_max),
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)


def square_crop_box(box: BoundingBox, margin: float = 1.25) -> BoundingBox:
    """Expand a detector box to a square about its center with a margin.

    The square side is ``margin * max(width, height)``. This is the region
    actually cropped and resized to the network input; the square may extend
    past the sensor (out-of-bounds pixels render as background).
    """
    cx, cy = box.center
    half = 0.5 * margin * max(box.width, box.height)
    return BoundingBox(cx - half, cy - half, cx + half, cy + half)


@dataclass(frozen=True)
class CropIntrinsics:
    """Intrinsics of the crop-resized virtual image. Row 3 is exactly (0,0,1)."""

    matrix: np.ndarray
    crop_size: int

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if not np.array_equal(m[2], np.array([0.0, 0.0, 1.0])):
            raise DataError("crop intrinsics row 3 must be exactly (0, 0, 1)")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)


def _distortion_derivative_positive(k: np.ndarray, theta_max: float) -> bool:
    """Exact monotonicity check of theta_d on [0, theta_max].

    theta_d'(theta) = 1 + 3 k1 u + 5 k2 u^2 + 7 k3 u^3 + 9 k4 u^4 with
    u = theta^2; the polynomial's real roots in (0, theta_max^2] decide it.
    """
    coeffs = np.array([9.0 * k[3], 7.0 * k[2], 5.0 * k[1], 3.0 * k[0], 1.0])
    lead = np.flatnonzero(coeffs)
    if lead.size == 0:
        return True
    roots = np.roots(coeffs[lead[0]:])
    u_max = theta_max * theta_max
    for r in roots:
        if abs(r.imag) < 1e-12 and 0.0 < r.real <= u_max:
            return False
    return True


@dataclass(frozen=True)
class FisheyeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float
    k2: float
    k3: float
    k4: float
    width: int
    height: int
    cam_from_world: RigidTransform = field(default_factory=RigidTransform.identity)
    theta_max: float = math.pi / 2

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DataError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DataError("principal point must lie inside the sensor")
        if not _distortion_derivative_positive(np.array(self.distortion), self.theta_max):
            raise DataError(
                "distortion polynomial is not strictly increasing on [0, theta_max]"
            )

    @property
    def distortion(self) -> tuple[float, float, float, float]:
        return (self.k1, self.k2, self.k3, self.k4)

    @property
    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def distort_angle(self, theta):
        """theta -> theta_d through the radial polynomial (array-friendly)."""
        t2 = theta * theta
        return theta * (
            1.0 + t2 * (self.k1 + t2 * (self.k2 + t2 * (self.k3 + t2 * self.k4)))
        )

    def undistort_angle(self, theta_d: float) -> float:
        """Invert the radial polynomial by Newton iteration."""
        if theta_d == 0.0:
            return 0.0
        theta = min(theta_d, self.theta_max)
        for _ in range(20):
            t2 = theta * theta
            f = theta * (
                1.0 + t2 * (self.k1 + t2 * (self.k2 + t2 * (self.k3 + t2 * self.k4)))
            ) - theta_d
            df = 1.0 + t2 * (
                3.0 * self.k1 + t2 * (5.0 * self.k2 + t2 * (7.0 * self.k3 + t2 * 9.0 * self.k4))
            )
            step = f / df
            theta -= step
            if abs(f) < 1e-12:
                return theta
        raise NoConvergence(f"Newton undistortion failed for theta_d={theta_d}")

    def camera_center_world(self) -> np.ndarray:
        e = self.cam_from_world
        return -e.rotation.T @ e.translation


def project(cam: FisheyeCamera, p_world: np.ndarray) -> np.ndarray:
    """Project a world point (mm) to full-frame pixel coordinates.

    Raises PointBehindCamera for z <= 0 in the camera frame and OutsideFov
    when the incidence angle exceeds the lens half-angle.
    """
    p = cam.cam_from_world.apply(np.asarray(p_world, dtype=np.float64).reshape(3))
    x, y, z = p
    if z <= 0.0:
        raise PointBehindCamera(f"z={z:.3f} mm")
    r = math.hypot(x, y)
    theta = math.atan2(r, z)
    if theta > cam.theta_max + 1e-12:
        raise OutsideFov(f"theta={theta:.4f} rad > theta_max={cam.theta_max:.4f}")
    theta_d = float(cam.distort_angle(theta))
    if r < 1e-12:
        return np.array([cam.cx, cam.cy])
    scale = theta_d / r
    return np.array([cam.fx * scale * x + cam.cx, cam.fy * scale * y + cam.cy])


def project_many(cam: FisheyeCamera, points_world: np.ndarray):
    """Vectorized projection with a validity mask instead of exceptions.

    Returns (pixels (N, 2), valid (N,)). Invalid rows (behind camera or
    outside the FOV) hold NaN.
    """
    p = cam.cam_from_world.apply(np.asarray(points_world, dtype=np.float64).reshape(-1, 3))
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    r = np.hypot(x, y)
    theta = np.arctan2(r, np.where(z > 0, z, 1.0))
    valid = (z > 0.0) & (theta <= cam.theta_max + 1e-12)
    theta_d = cam.distort_angle(theta)
    scale = np.where(r > 1e-12, theta_d / np.where(r > 1e-12, r, 1.0), 0.0)
    px = np.stack([cam.fx * scale * x + cam.cx, cam.fy * scale * y + cam.cy], axis=1)
    px[~valid] = np.nan
    return px, valid


def unproject(cam: FisheyeCamera, px: np.ndarray) -> np.ndarray:
    """Pixel -> unit ray in the camera frame.

    Raises OutsideImage for pixels off the sensor, OutsideFov if the implied
    angle exceeds the lens half-angle, NoConvergence if Newton fails.
    """
    u, v = float(px[0]), float(px[1])
    if not (0.0 <= u <= cam.width and 0.0 <= v <= cam.height):
        raise OutsideImage(f"pixel ({u:.1f}, {v:.1f}) outside {cam.width}x{cam.height}")
    dx = (u - cam.cx) / cam.fx
    dy = (v - cam.cy) / cam.fy
    theta_d = math.hypot(dx, dy)
    if theta_d < 1e-15:
        return np.array([0.0, 0.0, 1.0])
    theta = cam.undistort_angle(theta_d)
    if theta > cam.theta_max + 1e-9:
        raise OutsideFov(f"recovered theta={theta:.4f} beyond theta_max")
    s = math.sin(theta) / theta_d
    return np.array([s * dx, s * dy, math.cos(theta)])


def crop_intrinsics(cam: FisheyeCamera, box: BoundingBox, out_size: int) -> CropIntrinsics:
    """Intrinsics of the box region resized to out_size pixels.

    K' = diag(s, s, 1) @ T(-x_min, -y_min) @ K with
    s = out_size / max(box width, box height).
    """
    if out_size <= 0:
        raise DataError("out_size must be positive")
    longest = max(box.width, box.height)
    if longest <= 0:
        raise DegenerateBox("zero-area box")
    s = out_size / longest
    m = np.array(
        [
            [s * cam.fx, 0.0, s * (cam.cx - box.x_min)],
            [0.0, s * cam.fy, s * (cam.cy - box.y_min)],
            [0.0, 0.0, 1.0],
        ]
    )
    return CropIntrinsics(m, int(out_size))


def crop_pixel(box: BoundingBox, out_size: int, px: np.ndarray) -> np.ndarray:
    """Map full-frame pixels (…, 2) into crop coordinates of the square box."""
    s = out_size / max(box.width, box.height)
    p = np.asarray(px, dtype=np.float64)
    return (p - np.array([box.x_min, box.y_min])) * s


def bbox_center_ray(cam: FisheyeCamera, box: BoundingBox) -> np.ndarray:
    """Unit camera-frame ray through the box center pixel."""
    cx, cy = box.center
    return unproject(cam, np.array([cx, cy]))


def rotation_to_ray(ray: np.ndarray) -> np.ndarray:
    """Minimal rotation R with R @ (0,0,1) = ray.

    Rodrigues about axis z x ray. For the antipodal ray (-z within 1e-6) the
    axis is ambiguous; we return the deterministic pi-rotation about +x,
    which still maps z to -z. Unreachable for forward-facing boxes.
    """
    r = np.asarray(ray, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(r) - 1.0) > 1e-9:
        raise DataError("ray must be unit length within 1e-9")
    if np.linalg.norm(r + np.array([0.0, 0.0, 1.0])) < 1e-6:
        return np.diag([1.0, -1.0, -1.0])
    axis = np.array([-r[1], r[0], 0.0])  # z x ray
    s = np.linalg.norm(axis)
    c = r[2]
    if s < 1e-12:
        return np.eye(3)
    axis = axis / s
    angle = math.atan2(s, c)
    kmat = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + math.sin(angle) * kmat + (1.0 - math.cos(angle)) * (kmat @ kmat)


def relative_extrinsics(cam_l: FisheyeCamera, cam_r: FisheyeCamera) -> RigidTransform:
    """Physical left-camera frame -> right-camera frame."""
    return cam_r.cam_from_world.compose(cam_l.cam_from_world.inverse())


def virtual_relative_extrinsics(
    cam_l: FisheyeCamera,
    box_l: BoundingBox,
    cam_r: FisheyeCamera,
    box_r: BoundingBox,
) -> RigidTransform:
    """Rigid transform between the two box-centered virtual cameras.

    Virtual camera i is physical camera i rotated about its optical center by
    Q_i = rotation_to_ray(bbox_center_ray(cam_i, box_i)) so its axis passes
    through the detected box center. Coordinates map as x_virtual = Q_i^T x_cam,
    hence virtual-left -> virtual-right is (Q_r^T R_rl Q_l, Q_r^T t_rl).
    """
    q_l = rotation_to_ray(bbox_center_ray(cam_l, box_l))
    q_r = rotation_to_ray(bbox_center_ray(cam_r, box_r))
    phys = relative_extrinsics(cam_l, cam_r)
    return RigidTransform(q_r.T @ phys.rotation @ q_l, q_r.T @ phys.translation)


def triangulate(
    cam_l: FisheyeCamera,
    cam_r: FisheyeCamera,
    px_l: np.ndarray,
    px_r: np.ndarray,
) -> np.ndarray:
    """Midpoint of the common perpendicular of the two world-frame pixel rays."""
    rays = []
    origins = []
    for cam, px in ((cam_l, px_l), (cam_r, px_r)):
        ray_cam = unproject(cam, px)
        rot = cam.cam_from_world.rotation
        rays.append(rot.T @ ray_cam)
        origins.append(cam.camera_center_world())
    d0, d1 = rays
    o0, o1 = origins
    cross = np.cross(d0, d1)
    sin2 = float(cross @ cross)
    if sin2 < 1e-12:  # angle < ~1e-6 rad
        raise NearParallelRays("rays are parallel within 1e-6 rad")
    b = o1 - o0
    d00 = float(d0 @ d0)
    d11 = float(d1 @ d1)
    d01 = float(d0 @ d1)
    b0 = float(b @ d0)
    b1 = float(b @ d1)
    denom = d00 * d11 - d01 * d01
    s = (b0 * d11 - b1 * d01) / denom
    u = (b0 * d01 - b1 * d00) / denom
    p0 = o0 + s * d0
    p1 = o1 + u * d1
    return 0.5 * (p0 + p1)


# ---------------------------------------------------------------------------
# Rig calibration file: human-readable key-value format, one block per camera.

RIG_MAGIC = "direg3d-rig v1"

_CAM_SCALARS = ["fx", "fy", "cx", "cy", "k1", "k2", "k3", "k4"]


def write_rig(path: str | Path, cameras: dict[str, FisheyeCamera]) -> None:
    lines = [RIG_MAGIC]
    for name, cam in cameras.items():
        lines.append(f"camera {name}")
        for key in _CAM_SCALARS:
            lines.append(f"{key} {getattr(cam, key)!r}")
        lines.append(f"width {cam.width}")
        lines.append(f"height {cam.height}")
        lines.append(f"theta_max {cam.theta_max!r}")
        flat = " ".join(repr(float(v)) for v in cam.cam_from_world.as_matrix_3x4().ravel())
        lines.append(f"cam_from_world {flat}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_rig(path: str | Path) -> dict[str, FisheyeCamera]:
    text = Path(path).read_text()
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != RIG_MAGIC:
        raise DataError(f"{path}: missing '{RIG_MAGIC}' header")
    cameras: dict[str, FisheyeCamera] = {}
    current: dict[str, str] | None = None
    name = None

    def finish():
        if current is None:
            return
        try:
            vals = {k: float(current[k]) for k in _CAM_SCALARS + ["theta_max"]}
            mat = np.array([float(v) for v in current["cam_from_world"].split()]).reshape(3, 4)
            cameras[name] = FisheyeCamera(
                fx=vals["fx"], fy=vals["fy"], cx=vals["cx"], cy=vals["cy"],
                k1=vals["k1"], k2=vals["k2"], k3=vals["k3"], k4=vals["k4"],
                width=int(current["width"]), height=int(current["height"]),
                cam_from_world=RigidTransform(mat[:, :3], mat[:, 3]),
                theta_max=vals["theta_max"],
            )
        except KeyError as exc:
            raise DataError(f"{path}: camera '{name}' missing field {exc}") from exc

    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        if key == "camera":
            finish()
            name = rest
            current = {}
        elif current is None:
            raise DataError(f"{path}: field '{key}' before any camera block")
        else:
            current[key] = rest
    finish()
    if not cameras:
        raise DataError(f"{path}: no camera blocks")
    return cameras
