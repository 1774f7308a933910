"""Shared construction helpers for the test suite."""

import math

import numpy as np

from direg3d.geometry import FisheyeCamera, RigidTransform


def make_camera(
    k=(-0.05, 0.01, -0.002, 0.0005),
    fx=280.0,
    fy=280.0,
    cx=320.0,
    cy=240.0,
    width=640,
    height=480,
    cam_from_world=None,
    theta_max=math.pi / 2,
) -> FisheyeCamera:
    if cam_from_world is None:
        cam_from_world = RigidTransform.identity()
    return FisheyeCamera(
        fx=fx, fy=fy, cx=cx, cy=cy,
        k1=k[0], k2=k[1], k3=k[2], k4=k[3],
        width=width, height=height,
        cam_from_world=cam_from_world,
        theta_max=theta_max,
    )


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    kmat = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + math.sin(angle) * kmat + (1 - math.cos(angle)) * (kmat @ kmat)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    axis = rng.normal(size=3)
    return rotation_about(axis, rng.uniform(0, math.pi))


def random_in_fov_point(rng: np.random.Generator, cam: FisheyeCamera,
                        max_theta_frac: float = 0.8) -> np.ndarray:
    """World point whose camera-frame incidence angle is under frac * theta_max."""
    theta = rng.uniform(0.0, max_theta_frac * cam.theta_max)
    phi = rng.uniform(-math.pi, math.pi)
    depth = rng.uniform(150.0, 900.0)
    ray = np.array(
        [math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)]
    )
    p_cam = depth * ray
    e = cam.cam_from_world
    return e.rotation.T @ (p_cam - e.translation)


def random_visible_point(rng: np.random.Generator, cam: FisheyeCamera,
                         max_theta_frac: float = 0.8) -> np.ndarray:
    """In-FOV world point whose projection also lands on the sensor."""
    from direg3d.geometry import project

    for _ in range(1000):
        p = random_in_fov_point(rng, cam, max_theta_frac)
        px = project(cam, p)
        if 0.0 <= px[0] <= cam.width and 0.0 <= px[1] <= cam.height:
            return p
    raise RuntimeError("rejection sampling failed to find a visible point")


def make_stereo_rig(baseline=100.0, toe_out=math.radians(25.0)):
    rot_l = rotation_about([0, 1, 0], toe_out)
    rot_r = rotation_about([0, 1, 0], -toe_out)
    center_l = np.array([-baseline / 2, 0.0, 0.0])
    center_r = np.array([baseline / 2, 0.0, 0.0])
    cam_l = make_camera(cam_from_world=RigidTransform(rot_l, -rot_l @ center_l))
    cam_r = make_camera(cam_from_world=RigidTransform(rot_r, -rot_r @ center_r))
    return cam_l, cam_r
