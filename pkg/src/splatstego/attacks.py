"""Structural attack simulators and robustness metrics.

Pruning attacks drop whole primitives (by activated opacity or by
accumulated rendering contribution); the noise attack perturbs every SH
coefficient in the float domain. The report quantifies how much faster the
hidden message decays than the public scene: relative decay per domain and
the scene-minus-message differential scaled by 100.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .bitcodec import extract_cloud
from .errors import (
    EmptyViewsError,
    InvalidRatioError,
    ShapeMismatchError,
    ZeroBaselineError,
)
from .gaussians import GaussianCloud, inverse_sigmoid
from .opacity_mapping import StegoKey, recover_opacity
from .rasterizer import render
from .training import ssim

PSNR_CAP = 99.0

ATTACK_KINDS = ("opacity-prune", "contribution-prune", "sh-noise")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    ratio: float = 0.0   # pruning kinds
    sigma: float = 0.0   # sh-noise
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise InvalidRatioError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.ratio < 1.0:
            raise InvalidRatioError(f"ratio must be in [0, 1), got {self.ratio}")
        if self.sigma < 0.0:
            raise InvalidRatioError(f"sigma must be >= 0, got {self.sigma}")


def _prune_by_score(cloud: GaussianCloud, score: np.ndarray, ratio: float) -> GaussianCloud:
    if not 0.0 <= ratio < 1.0:
        raise InvalidRatioError(f"ratio must be in [0, 1), got {ratio}")
    n = len(cloud)
    n_drop = int(np.floor(n * ratio))
    if n_drop == 0:
        return cloud.copy()
    # ascending score; ties resolved so that the lower index survives
    order = np.lexsort((-np.arange(n), score))
    drop = order[:n_drop]
    keep = np.ones(n, dtype=bool)
    keep[drop] = False
    return cloud.select(np.nonzero(keep)[0])


def opacity_prune(cloud: GaussianCloud, ratio: float) -> GaussianCloud:
    """Remove the floor(N*ratio) primitives with the smallest activated opacity."""
    return _prune_by_score(cloud, cloud.activated_opacity(), ratio)


def contribution_prune(cloud: GaussianCloud, cameras, ratio: float,
                       threads: int = 1) -> GaussianCloud:
    """Remove the primitives contributing least to renders over the cameras.

    A stand-in for contribution-aware purification attacks: the score is the
    raw accumulated blend weight over all views, no normalization (ranking
    is normalization-free anyway).
    """
    if len(cameras) == 0:
        raise EmptyViewsError("contribution pruning needs at least one camera")
    total = np.zeros(len(cloud), dtype=np.float64)
    for cam in cameras:
        total += render(cloud, cam, threads=threads).v_raw
    return _prune_by_score(cloud, total, ratio)


def sh_noise(cloud: GaussianCloud, sigma: float, seed: int = 0) -> GaussianCloud:
    """Add i.i.d. zero-mean Gaussian noise of std sigma to every SH coefficient."""
    if sigma < 0:
        raise InvalidRatioError(f"sigma must be >= 0, got {sigma}")
    out = cloud.copy()
    if sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, sigma, size=out.sh.shape)
        out.sh = (out.sh.astype(np.float64) + noise).astype(np.float32)
    return out


def apply_attack(cloud: GaussianCloud, spec: AttackSpec, cameras=None,
                 threads: int = 1) -> GaussianCloud:
    if spec.kind == "opacity-prune":
        return opacity_prune(cloud, spec.ratio)
    if spec.kind == "contribution-prune":
        return contribution_prune(cloud, cameras or [], spec.ratio, threads=threads)
    return sh_noise(cloud, spec.sigma, seed=spec.seed)


def psnr(a, b) -> float:
    """10*log10(1/MSE) for [0,1] images; capped at 99 dB for near-zero MSE."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def relative_decay(m_orig: float, m_attacked: float) -> float:
    """|M_orig - M_attacked| / M_orig."""
    if m_orig == 0.0:
        raise ZeroBaselineError("relative decay undefined for a zero baseline")
    return abs(m_orig - m_attacked) / m_orig


def robustness_score(scene: tuple, message: tuple) -> float:
    """(decay(scene) - decay(message)) * 100, the published percentage convention."""
    return (relative_decay(*scene) - relative_decay(*message)) * 100.0


@dataclass
class DomainMetrics:
    orig: float
    attacked: float

    @property
    def d_rel(self) -> float:
        return relative_decay(self.orig, self.attacked)


@dataclass
class RobustnessReport:
    """Per-metric scene/message values before and after an attack."""

    attack: AttackSpec
    metrics: dict = field(default_factory=dict)  # name -> {scene, message, s_r}

    def add(self, name: str, scene: DomainMetrics, message: DomainMetrics):
        self.metrics[name] = {
            "scene": scene,
            "message": message,
            "s_r": (scene.d_rel - message.d_rel) * 100.0,
        }

    def check(self, tol=1e-6):
        for name, m in self.metrics.items():
            expect = (m["scene"].d_rel - m["message"].d_rel) * 100.0
            if abs(m["s_r"] - expect) > tol:
                raise ZeroBaselineError(f"inconsistent S_R for {name}")
        return self

    def to_dict(self) -> dict:
        out = {
            "attack": {
                "kind": self.attack.kind,
                "ratio": self.attack.ratio,
                "sigma": self.attack.sigma,
                "seed": self.attack.seed,
            },
            "metrics": {},
        }
        for name, m in self.metrics.items():
            out["metrics"][name] = {
                "scene": {"orig": m["scene"].orig, "attacked": m["scene"].attacked,
                          "d_rel": m["scene"].d_rel},
                "message": {"orig": m["message"].orig, "attacked": m["message"].attacked,
                            "d_rel": m["message"].d_rel},
                "s_r": m["s_r"],
            }
        return out

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=1)
            f.write("\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "scene_orig", "scene_attacked",
                        "message_orig", "message_attacked", "s_r"])
            for name, m in self.metrics.items():
                w.writerow([name, repr(m["scene"].orig), repr(m["scene"].attacked),
                            repr(m["message"].orig), repr(m["message"].attacked),
                            repr(m["s_r"])])


def hidden_cloud(stego: GaussianCloud, key: StegoKey) -> GaussianCloud:
    """Materialize the hidden scene: geometry from the stego asset, SH via
    bit-plane extraction, opacity via the mapping network."""
    sh = extract_cloud(stego, key.plan, key.qp)
    alpha = np.clip(recover_opacity(stego, key), 1e-6, 1.0 - 1e-6)
    return GaussianCloud(
        positions=stego.positions.copy(),
        rotations=stego.rotations.copy(),
        log_scales=stego.log_scales.copy(),
        opacity_logits=inverse_sigmoid(alpha).astype(np.float32),
        sh=sh,
        sh_degree=stego.sh_degree,
    )


def _view_metrics(cloud: GaussianCloud, views, background, threads: int):
    """Mean per-view PSNR and SSIM of renders against ground-truth images."""
    if not views:
        raise EmptyViewsError("need at least one evaluation view")
    p_vals, s_vals = [], []
    for cam, gt in views:
        img = render(cloud, cam, background=background, threads=threads).image
        p_vals.append(psnr(img, gt))
        s_vals.append(ssim(img, gt))
    return float(np.mean(p_vals)), float(np.mean(s_vals))


def evaluate(stego: GaussianCloud, key: StegoKey, attacked_stego: GaussianCloud,
             scene_gt_views, message_gt_views, attack: AttackSpec = None,
             background=(0.0, 0.0, 0.0), threads: int = 1) -> RobustnessReport:
    """Score an attack: renders the public scene directly and the hidden
    message via key recovery, before and after the attack, then applies the
    relative-decay arithmetic per metric."""
    if attack is None:
        attack = AttackSpec(kind="opacity-prune", ratio=0.0)
    scene_pre = _view_metrics(stego, scene_gt_views, background, threads)
    scene_post = _view_metrics(attacked_stego, scene_gt_views, background, threads)
    msg_pre = _view_metrics(hidden_cloud(stego, key), message_gt_views, background, threads)
    msg_post = _view_metrics(hidden_cloud(attacked_stego, key), message_gt_views,
                             background, threads)
    report = RobustnessReport(attack=attack)
    for i, name in enumerate(("psnr", "ssim")):
        report.add(name,
                   DomainMetrics(orig=scene_pre[i], attacked=scene_post[i]),
                   DomainMetrics(orig=msg_pre[i], attacked=msg_post[i]))
    return report.check()
