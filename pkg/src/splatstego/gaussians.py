"""Domain types for 3DGS assets.

A cloud is stored struct-of-arrays in float32, mirroring the on-disk PLY
payload bit for bit: quaternions are kept exactly as loaded (validated, not
rewritten) so that a load/save round trip is byte-identical. Normalization
happens in the accessors that need it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteValueError, ShapeMismatchError

SH_COEFFS = 16  # degree-3 real basis: (3+1)^2 coefficients per channel


def _as_f32(a, shape, name):
    a = np.asarray(a, dtype=np.float32)
    if a.shape != shape:
        raise ShapeMismatchError(f"{name}: expected shape {shape}, got {a.shape}")
    return a


@dataclass
class GaussianPrimitive:
    """One primitive's attribute ensemble (a row view of a cloud)."""

    position: np.ndarray      # (3,)
    rotation: np.ndarray      # (4,) quaternion (w, x, y, z), stored un-normalized
    log_scale: np.ndarray     # (3,)
    opacity_logit: float
    sh: np.ndarray            # (16, 3) rows = coefficient index j, cols = RGB


@dataclass
class GaussianCloud:
    """A collection of anisotropic Gaussian primitives (vanilla attribute set)."""

    positions: np.ndarray       # (N, 3) float32
    rotations: np.ndarray       # (N, 4) float32, (w, x, y, z)
    log_scales: np.ndarray      # (N, 3) float32
    opacity_logits: np.ndarray  # (N,)   float32
    sh: np.ndarray              # (N, 16, 3) float32
    sh_degree: int = 3

    def __post_init__(self):
        n = len(self.positions)
        self.positions = _as_f32(self.positions, (n, 3), "positions")
        self.rotations = _as_f32(self.rotations, (n, 4), "rotations")
        self.log_scales = _as_f32(self.log_scales, (n, 3), "log_scales")
        self.opacity_logits = _as_f32(self.opacity_logits, (n,), "opacity_logits")
        self.sh = _as_f32(self.sh, (n, SH_COEFFS, 3), "sh")
        if n < 1:
            raise ShapeMismatchError("cloud must contain at least one primitive")
        if not 0 <= self.sh_degree <= 3:
            raise ShapeMismatchError(f"sh_degree must be in [0, 3], got {self.sh_degree}")

    def __len__(self):
        return len(self.positions)

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            position=self.positions[i],
            rotation=self.rotations[i],
            log_scale=self.log_scales[i],
            opacity_logit=float(self.opacity_logits[i]),
            sh=self.sh[i],
        )

    def validate(self):
        """Check finiteness and that every quaternion can be normalized."""
        for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh"):
            a = getattr(self, name)
            if not np.isfinite(a).all():
                idx = int(np.argwhere(~np.isfinite(a).reshape(len(self), -1).all(axis=1))[0, 0])
                raise NonFiniteValueError(f"non-finite value in {name} at primitive {idx}")
        norms = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        bad = np.nonzero(norms == 0.0)[0]
        if bad.size:
            raise NonFiniteValueError(f"zero quaternion at primitive {int(bad[0])}")
        return self

    def rotations_normalized(self) -> np.ndarray:
        """Unit quaternions, float64. Raises on a zero quaternion."""
        q = self.rotations.astype(np.float64)
        norms = np.linalg.norm(q, axis=1, keepdims=True)
        if not np.all(norms > 0):
            raise NonFiniteValueError("zero quaternion cannot be normalized")
        return q / norms

    def activated_opacity(self) -> np.ndarray:
        """sigmoid(opacity_logit), float64, elementwise in (0, 1)."""
        x = self.opacity_logits.astype(np.float64)
        return 1.0 / (1.0 + np.exp(-x))

    def activated_scale(self) -> np.ndarray:
        """exp(log_scale), float64, per-axis standard deviations."""
        return np.exp(self.log_scales.astype(np.float64))

    def activated_view(self):
        """(alpha, scale) for every primitive."""
        return self.activated_opacity(), self.activated_scale()

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh=self.sh.copy(),
            sh_degree=self.sh_degree,
        )

    def select(self, index: np.ndarray) -> "GaussianCloud":
        """Sub-cloud of the given primitive indices (attribute bytes preserved)."""
        return GaussianCloud(
            positions=self.positions[index],
            rotations=self.rotations[index],
            log_scales=self.log_scales[index],
            opacity_logits=self.opacity_logits[index],
            sh=self.sh[index],
            sh_degree=self.sh_degree,
        )


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class CloudGeometry:
    """Positions/rotations/scales shared between two attribute sets."""

    positions: np.ndarray   # (N, 3) float32
    rotations: np.ndarray   # (N, 4) float32
    log_scales: np.ndarray  # (N, 3) float32

    def __post_init__(self):
        n = len(self.positions)
        self.positions = _as_f32(self.positions, (n, 3), "positions")
        self.rotations = _as_f32(self.rotations, (n, 4), "rotations")
        self.log_scales = _as_f32(self.log_scales, (n, 3), "log_scales")

    def __len__(self):
        return len(self.positions)

    @staticmethod
    def of(cloud: GaussianCloud) -> "CloudGeometry":
        return CloudGeometry(cloud.positions, cloud.rotations, cloud.log_scales)


@dataclass
class DualCloud:
    """Shared geometry plus two attribute sets under joint training.

    The scene set is the public carrier; the message set is the hidden
    payload. Both reference the same geometry arrays (no copies), so the
    coupling invariant of the trainer holds by construction.
    """

    geometry: CloudGeometry
    scene_opacity_logits: np.ndarray    # (N,)
    scene_sh: np.ndarray                # (N, 16, 3)
    message_opacity_logits: np.ndarray  # (N,)
    message_sh: np.ndarray              # (N, 16, 3)
    sh_degree: int = 3

    def __post_init__(self):
        n = len(self.geometry)
        self.scene_opacity_logits = _as_f32(self.scene_opacity_logits, (n,), "scene_opacity_logits")
        self.scene_sh = _as_f32(self.scene_sh, (n, SH_COEFFS, 3), "scene_sh")
        self.message_opacity_logits = _as_f32(self.message_opacity_logits, (n,), "message_opacity_logits")
        self.message_sh = _as_f32(self.message_sh, (n, SH_COEFFS, 3), "message_sh")

    def __len__(self):
        return len(self.geometry)

    def scene_cloud(self) -> GaussianCloud:
        return GaussianCloud(
            positions=self.geometry.positions,
            rotations=self.geometry.rotations,
            log_scales=self.geometry.log_scales,
            opacity_logits=self.scene_opacity_logits,
            sh=self.scene_sh,
            sh_degree=self.sh_degree,
        )

    def message_cloud(self) -> GaussianCloud:
        return GaussianCloud(
            positions=self.geometry.positions,
            rotations=self.geometry.rotations,
            log_scales=self.geometry.log_scales,
            opacity_logits=self.message_opacity_logits,
            sh=self.message_sh,
            sh_degree=self.sh_degree,
        )
