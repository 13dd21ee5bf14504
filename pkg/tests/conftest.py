"""Shared builders and independent oracles for the test suite.

The oracles here are deliberately plain python loops (or set arithmetic)
kept separate from the library's vectorized/jitted paths; they share only
the algebraic form of each per-point expression so bitwise comparisons are
meaningful.
"""

import math

import numpy as np
import pytest

from geovos import kernels
from geovos.geometry import CameraFrame, CameraIntrinsics, CameraPose


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    kernels.warmup()


def make_intrinsics(fx=20.0, fy=20.0, width=16, height=16, cx=None, cy=None):
    return CameraIntrinsics(
        fx=fx, fy=fy,
        cx=(width - 1) / 2.0 if cx is None else cx,
        cy=(height - 1) / 2.0 if cy is None else cy,
        width=width, height=height,
    )


def random_rotation(rng) -> np.ndarray:
    m = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng, spread=1.0) -> CameraPose:
    return CameraPose(random_rotation(rng), rng.normal(scale=spread, size=3))


def random_scene_frames(rng, n_frames, intr, max_masked=100, invalid_frac=0.2):
    """Frames with random poses, random depths (some invalid), sparse masks."""
    frames = []
    for fid in range(n_frames):
        depth = rng.uniform(0.5, 5.0, size=(intr.height, intr.width))
        bad = rng.random(depth.shape) < invalid_frac
        depth[bad] = rng.choice([0.0, np.nan, np.inf])
        mask = np.zeros(depth.shape, bool)
        n_px = int(rng.integers(1, max_masked + 1))
        flat = rng.choice(depth.size, size=n_px, replace=False)
        mask.flat[flat] = True
        frames.append(CameraFrame(fid, intr, random_pose(rng), depth.astype(np.float32),
                                  {"obj": mask}))
    return frames


# ---------------------------------------------------------------------------
# frustum-overlap oracle: pure python per-point loop


def naive_frustum_overlap(candidate: CameraFrame, mask, reference: CameraFrame,
                          z_near=1e-4):
    ci = candidate.intrinsics
    ri = reference.intrinsics
    same_camera = (
        ci == ri
        and np.array_equal(candidate.pose.rotation, reference.pose.rotation)
        and np.array_equal(candidate.pose.translation, reference.pose.translation)
    )
    if same_camera:
        # valid masked pixels are inside their own frustum by construction
        valid = np.isfinite(candidate.depth) & (candidate.depth > 0) & mask
        n = int(valid.sum())
        return (1.0 if n else 0.0), n, n
    rot = reference.pose.rotation.T @ candidate.pose.rotation
    trans = reference.pose.rotation.T @ (candidate.pose.translation
                                         - reference.pose.translation)
    n = inside = 0
    for v in range(ci.height):
        for u in range(ci.width):
            if not mask[v, u]:
                continue
            d = float(candidate.depth[v, u])
            if not (math.isfinite(d) and d > 0.0):
                continue
            n += 1
            px = (u - ci.cx) * d / ci.fx
            py = (v - ci.cy) * d / ci.fy
            pz = d
            x = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz + trans[0]
            y = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz + trans[1]
            z = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz + trans[2]
            if z > z_near:
                uu = ri.fx * x / z + ri.cx
                vv = ri.fy * y / z + ri.cy
                if 0.0 <= uu < ri.width and 0.0 <= vv < ri.height:
                    inside += 1
    return (inside / n if n else 0.0), inside, n


# ---------------------------------------------------------------------------
# cluster scene: frames 0, 3, 5 share a view, frames 1, 2, 4 are far away


def make_cluster_scene(width=32, fx=32.0):
    """Six cameras viewing a wall at z=2; only {0, 3, 5} mutually overlap.

    All frames mask the full image (the wall spans everything), so every
    frame is object-visible; the FOV filter alone separates the cluster
    from the strays.
    """
    from geovos.ingest import Scene

    intr = make_intrinsics(fx=fx, fy=fx, width=width, height=width)
    xs = {0: 0.0, 3: 0.1, 5: 0.2, 1: 10.0, 2: 20.0, 4: 30.0}
    frames = []
    for fid in range(6):
        pose = CameraPose(np.eye(3), np.array([xs[fid], 0.0, 0.0]))
        depth = np.full((width, width), 2.0, np.float32)
        mask = np.ones((width, width), bool)
        frames.append(CameraFrame(fid, intr, pose, depth, {"wall": mask}))
    return Scene("cluster", frames)
