"""Synthetic desk-scale scene pairs for experiments and tests.

Both appearance sets are realizable by the renderer exactly (they are
generated as cloud attributes), so reconstruction quality is limited by the
optimizer, not the model class. Opacity and color fields are smooth random
functions of position with independent draws for the scene and the message,
which is what makes the coupling/pruning experiments informative.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .gaussians import DualCloud, CloudGeometry, GaussianCloud, inverse_sigmoid
from .ply_io import save_ply
from .rasterizer import Camera, look_at
from .viewsets import render_views, write_view_dir

SH_DC_SCALE = 0.28209479177387814  # degree-0 basis value


def random_unit_quaternions(rng, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def smooth_field(points: np.ndarray, rng, waves: int = 6, freq: float = 3.0) -> np.ndarray:
    """Smooth pseudo-random scalar field over 3D points, roughly in [-1, 1]."""
    p = np.asarray(points, dtype=np.float64)
    omega = rng.normal(scale=freq, size=(waves, 3))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=waves)
    amp = rng.uniform(0.5, 1.0, size=waves)
    vals = np.sin(p @ omega.T + phase) @ amp
    return vals / np.sum(np.abs(amp))


def _appearance(rng, positions, alpha_range=(0.03, 0.95), color_range=(0.18, 0.82),
                alpha_sharpness=4.0):
    """Opacity logits and SH coefficients driven by smooth spatial fields.

    The opacity field is pushed toward bimodal: each look leans on its own
    subset of primitives and treats the rest as nearly transparent, which is
    what makes pruning experiments on the pair informative.
    """
    n = len(positions)
    alpha = alpha_range[0] + (alpha_range[1] - alpha_range[0]) * (
        0.5 + 0.5 * np.tanh(alpha_sharpness * smooth_field(positions, rng))
    )
    logits = inverse_sigmoid(alpha)

    sh = np.zeros((n, 16, 3))
    lo, hi = color_range
    for ch in range(3):
        color = lo + (hi - lo) * (0.5 + 0.5 * np.tanh(2.0 * smooth_field(positions, rng)))
        sh[:, 0, ch] = (color - 0.5) / SH_DC_SCALE
    # mild view dependence, scaled down with frequency order
    for j in range(1, 16):
        order = int(np.floor(np.sqrt(j)))
        sh[:, j, :] = rng.normal(scale=0.02 / order, size=(n, 3))
    return logits.astype(np.float32), sh.astype(np.float32)


def synthetic_pair(n: int = 2000, seed: int = 0):
    """A ground-truth DualCloud: shared random geometry, independent looks."""
    rng = np.random.default_rng(seed)
    positions = rng.uniform(-1.0, 1.0, size=(n, 3))
    rotations = random_unit_quaternions(rng, n)
    log_scales = np.log(rng.uniform(0.035, 0.08, size=(n, 3)))
    geometry = CloudGeometry(
        positions=positions.astype(np.float32),
        rotations=rotations.astype(np.float32),
        log_scales=log_scales.astype(np.float32),
    )
    scene_logits, scene_sh = _appearance(rng, positions)
    msg_logits, msg_sh = _appearance(rng, positions)
    return DualCloud(
        geometry=geometry,
        scene_opacity_logits=scene_logits,
        scene_sh=scene_sh,
        message_opacity_logits=msg_logits,
        message_sh=msg_sh,
    )


def ring_cameras(count: int = 8, radius: float = 3.3, size: int = 64,
                 focal: float = 72.0) -> list:
    """Inward-facing cameras on a tilted ring around the origin."""
    cams = []
    for i in range(count):
        phi = 2.0 * np.pi * i / count
        height = 1.1 * np.sin(phi * 2.0 + 0.7)
        eye = np.array([radius * np.cos(phi), radius * np.sin(phi), height])
        cams.append(look_at(eye, (0.0, 0.0, 0.0), fx=focal, fy=focal,
                            width=size, height=size))
    return cams


@dataclass
class Fixture:
    root: str
    scene_dir: str
    message_dir: str
    carrier_ply: str
    cameras: list
    truth: DualCloud


def make_fixture(root, n: int = 2000, seed: int = 0, views: int = 8,
                 size: int = 64, background=(0.0, 0.0, 0.0), threads: int = 1) -> Fixture:
    """Write a complete training fixture under `root`.

    scene/ and message/ hold cameras.json + ground-truth renders of the two
    looks; carrier.ply is the public asset (scene attributes) used both as
    geometry source and as the attribute warm start.
    """
    os.makedirs(root, exist_ok=True)
    truth = synthetic_pair(n=n, seed=seed)
    cameras = ring_cameras(count=views, size=size)
    scene_dir = os.path.join(root, "scene")
    message_dir = os.path.join(root, "message")
    write_view_dir(scene_dir, cameras,
                   render_views(truth.scene_cloud(), cameras, background, threads))
    write_view_dir(message_dir, cameras,
                   render_views(truth.message_cloud(), cameras, background, threads))
    carrier = os.path.join(root, "carrier.ply")
    save_ply(truth.scene_cloud(), carrier)
    return Fixture(root=str(root), scene_dir=scene_dir, message_dir=message_dir,
                   carrier_ply=carrier, cameras=cameras, truth=truth)
