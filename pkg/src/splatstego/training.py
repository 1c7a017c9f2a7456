"""Joint steganographic optimization of the dual attribute sets.

Each iteration renders one sampled view per side, applies the L1+SSIM
reconstruction losses, derives the per-primitive opacity-gradient gate from
the public side's reconstruction gradient, and adds the visibility- and
gate-weighted symmetric Bernoulli-KL consistency term that couples the two
opacity fields. Geometry stays fixed; opacity logits and SH coefficients of
both sides are stepped with per-group Adam.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d
from scipy.special import expit

from .errors import (
    DivergenceError,
    EmptyViewsError,
    ImageTooSmallError,
    ShapeMismatchError,
)
from .gaussians import CloudGeometry, DualCloud, GaussianCloud
from .opacity_mapping import Adam
from .rasterizer import (
    composite,
    composite_backward,
    project_view,
    visibility_weights,
)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2

_offsets = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
_KERNEL = np.exp(-0.5 * (_offsets / SSIM_SIGMA) ** 2)
_KERNEL /= _KERNEL.sum()
_HALF = SSIM_WINDOW // 2


def _windowed_mean(x):
    """Valid-mode separable Gaussian filtering of an (H, W, C) image."""
    out = correlate1d(x, _KERNEL, axis=0, mode="constant")
    out = correlate1d(out, _KERNEL, axis=1, mode="constant")
    return out[_HALF:-_HALF, _HALF:-_HALF]


def _windowed_mean_adjoint(t, shape):
    """Adjoint of _windowed_mean: scatter valid-map values back to image size."""
    pad = [(_HALF, _HALF), (_HALF, _HALF)] + [(0, 0)] * (t.ndim - 2)
    full = np.pad(t, pad)
    out = correlate1d(full, _KERNEL, axis=0, mode="constant")
    out = correlate1d(out, _KERNEL, axis=1, mode="constant")
    return out[: shape[0], : shape[1]]


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _ssim_maps(a, b):
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ImageTooSmallError(f"need at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    mu_a = _windowed_mean(a)
    mu_b = _windowed_mean(b)
    var_a = _windowed_mean(a * a) - mu_a * mu_a
    var_b = _windowed_mean(b * b) - mu_b * mu_b
    cov = _windowed_mean(a * b) - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + _C1
    a2 = 2.0 * cov + _C2
    b1 = mu_a * mu_a + mu_b * mu_b + _C1
    b2 = var_a + var_b + _C2
    return mu_a, mu_b, a1, a2, b1, b2


def ssim(a, b) -> float:
    """Mean local SSIM, 11x11 Gaussian window sigma=1.5, C1=0.01^2, C2=0.03^2."""
    a, b = _check_pair(a, b)
    _, _, a1, a2, b1, b2 = _ssim_maps(a, b)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_grad(a, b) -> np.ndarray:
    """d(ssim)/da, same shape as a. b is treated as the fixed target."""
    a, b = _check_pair(a, b)
    mu_a, mu_b, a1, a2, b1, b2 = _ssim_maps(a, b)
    upstream = 1.0 / a1.size  # mean over positions and channels
    denom = b1 * b2
    ds_dmu = upstream * (2.0 * mu_b * a2 / denom - 2.0 * mu_a * a1 * a2 / (b1 * denom))
    ds_dvar = upstream * (-a1 * a2 / (denom * b2))
    ds_dcov = upstream * (2.0 * a1 / denom)
    grad = _windowed_mean_adjoint(ds_dmu, a.shape)
    grad += 2.0 * a * _windowed_mean_adjoint(ds_dvar, a.shape)
    grad -= 2.0 * _windowed_mean_adjoint(ds_dvar * mu_a, a.shape)
    grad += b * _windowed_mean_adjoint(ds_dcov, a.shape)
    grad -= _windowed_mean_adjoint(ds_dcov * mu_b, a.shape)
    return grad


def recon_loss(pred, gt, ssim_weight: float) -> float:
    """(1-w) * mean L1 + w * (1 - SSIM); zero iff pred matches gt."""
    pred, gt = _check_pair(pred, gt)
    l1 = float(np.mean(np.abs(pred - gt)))
    if ssim_weight == 0.0:
        return l1
    return (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - ssim(pred, gt))


def recon_loss_grad(pred, gt, ssim_weight: float) -> np.ndarray:
    pred, gt = _check_pair(pred, gt)
    grad = (1.0 - ssim_weight) * np.sign(pred - gt) / pred.size
    if ssim_weight != 0.0:
        grad -= ssim_weight * ssim_grad(pred, gt)
    return grad


def gate(grad_norm):
    """exp(-||grad||): relaxes consistency where appearance is still moving."""
    return np.exp(-np.abs(np.asarray(grad_norm, dtype=np.float64)))


_EPS_BERN = 1e-6


def _clamp_prob(p):
    return np.clip(np.asarray(p, dtype=np.float64), _EPS_BERN, 1.0 - _EPS_BERN)


def bern_sym_kl(p, q):
    """Symmetric KL between Bern(p) and Bern(q): (p-q)(ln p/q - ln (1-p)/(1-q))."""
    pc, qc = _clamp_prob(p), _clamp_prob(q)
    ratio = np.log(pc / qc) - np.log((1.0 - pc) / (1.0 - qc))
    out = (pc - qc) * ratio
    return float(out) if np.ndim(p) == 0 and np.ndim(q) == 0 else out


def bern_sym_kl_grads(p, q):
    """(dD/dp, dD/dq); zero where the clamp is active."""
    pc, qc = _clamp_prob(p), _clamp_prob(q)
    ratio = np.log(pc / qc) - np.log((1.0 - pc) / (1.0 - qc))
    dp = (ratio + (pc - qc) * (1.0 / pc + 1.0 / (1.0 - pc)))
    dq = (-ratio - (pc - qc) * (1.0 / qc + 1.0 / (1.0 - qc)))
    p_arr = np.asarray(p, dtype=np.float64)
    q_arr = np.asarray(q, dtype=np.float64)
    dp = dp * ((p_arr > _EPS_BERN) & (p_arr < 1.0 - _EPS_BERN))
    dq = dq * ((q_arr > _EPS_BERN) & (q_arr < 1.0 - _EPS_BERN))
    return dp, dq


def consistency_loss(dual: DualCloud, g, v) -> float:
    """Mean over primitives of g_i * v_i * symKL(alpha_S_i, alpha_M_i)."""
    g = np.asarray(g, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n = len(dual)
    if g.shape != (n,) or v.shape != (n,):
        raise ShapeMismatchError("gate/visibility length must match the cloud")
    p = expit(dual.scene_opacity_logits.astype(np.float64))
    q = expit(dual.message_opacity_logits.astype(np.float64))
    return float(np.mean(g * v * bern_sym_kl(p, q)))


@dataclass
class TrainConfig:
    iterations: int = 500             # desk scale; full scale uses 30000
    lambda_message: float = 1.0
    lambda_cons: float = 0.02
    ssim_weight: float = 0.2          # weight of the SSIM term in both recon losses
    lr_opacity: float = 0.05
    lr_sh_dc: float = 0.0025
    lr_sh_rest: float = 0.000125
    vis_interval: int = 100
    init_opacity: float = 0.1         # both sides start gray at this opacity
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    threads: int = 1


@dataclass
class LossBreakdown:
    scene: float
    message: float
    cons: float
    total: float

    def check(self, lambda_message, lambda_cons, tol=1e-9):
        expect = self.scene + lambda_message * self.message + lambda_cons * self.cons
        if abs(self.total - expect) > tol:
            raise DivergenceError(f"loss decomposition broken: {self.total} vs {expect}")
        return self


class PairTrainer:
    """Stateful trainer over a fixed-geometry dual cloud."""

    def __init__(self, scene_views, message_views, geometry: GaussianCloud,
                 cfg: TrainConfig = None):
        if cfg is None:
            cfg = TrainConfig()
        if not scene_views or not message_views:
            raise EmptyViewsError("need at least one view per side")
        self.cfg = cfg
        self.geometry = CloudGeometry.of(geometry)
        self.quat_unit = geometry.rotations_normalized()
        self.scene_views = scene_views
        self.message_views = message_views
        self.rng = np.random.default_rng(cfg.seed)
        n = len(geometry)

        # both sides start identical and neutral: gray, uniform low opacity
        logit0 = float(np.log(cfg.init_opacity / (1.0 - cfg.init_opacity)))
        self.logits_s = np.full(n, logit0)
        self.logits_m = np.full(n, logit0)
        self.sh_s = np.zeros((n, 16, 3))
        self.sh_m = np.zeros((n, 16, 3))

        self.proj_scene = [project_view(geometry, cam) for cam, _ in scene_views]
        self.proj_message = [project_view(geometry, cam) for cam, _ in message_views]

        self.opt_alpha_s = Adam([self.logits_s], lr=cfg.lr_opacity)
        self.opt_alpha_m = Adam([self.logits_m], lr=cfg.lr_opacity)
        self.opt_dc_s = Adam([self.sh_s[:, :1, :]], lr=cfg.lr_sh_dc)
        self.opt_dc_m = Adam([self.sh_m[:, :1, :]], lr=cfg.lr_sh_dc)
        self.opt_rest_s = Adam([self.sh_s[:, 1:, :]], lr=cfg.lr_sh_rest)
        self.opt_rest_m = Adam([self.sh_m[:, 1:, :]], lr=cfg.lr_sh_rest)

        self.visibility = np.zeros(n)
        self.history: list = []
        self.last_grads: dict = {}

    def dual(self) -> DualCloud:
        return DualCloud(
            geometry=self.geometry,
            scene_opacity_logits=self.logits_s,
            scene_sh=self.sh_s,
            message_opacity_logits=self.logits_m,
            message_sh=self.sh_m,
        )

    def _render_side(self, pv, logits, sh):
        ids = pv.prim_ids
        pre = 0.5 + np.einsum("mj,mjc->mc", pv.basis, sh[ids])
        colors = np.clip(pre, 0.0, 1.0)
        clamp_mask = ((pre > 0.0) & (pre < 1.0)).astype(np.float64)
        alphas = expit(logits[ids])
        product = composite(pv, alphas, colors, self.cfg.background,
                            threads=self.cfg.threads)
        return product, colors, clamp_mask, alphas

    def _side_loss_grads(self, pv, logits, sh, gt):
        """Reconstruction loss of one side plus gradients on (alpha, sh)."""
        product, colors, clamp_mask, alphas = self._render_side(pv, logits, sh)
        loss = recon_loss(product.image, gt, self.cfg.ssim_weight)
        upstream = recon_loss_grad(product.image, gt, self.cfg.ssim_weight)
        da_sorted, dc_sorted = composite_backward(
            pv, alphas, colors, product, upstream, threads=self.cfg.threads)
        dsh_sorted = pv.basis[:, :, None] * (dc_sorted * clamp_mask)[:, None, :]
        n = pv.n_primitives
        d_alpha = np.zeros(n)
        d_sh = np.zeros((n, 16, 3))
        d_alpha[pv.prim_ids] = da_sorted
        d_sh[pv.prim_ids] = dsh_sorted
        return loss, d_alpha, d_sh

    def _refresh_visibility(self):
        cloud = GaussianCloud(
            positions=self.geometry.positions,
            rotations=self.geometry.rotations,
            log_scales=self.geometry.log_scales,
            opacity_logits=self.logits_s,
            sh=self.sh_s,
        )
        self.visibility = visibility_weights(
            cloud, [cam for cam, _ in self.scene_views], threads=self.cfg.threads)

    def step(self, iteration: int) -> LossBreakdown:
        cfg = self.cfg
        s_idx = int(self.rng.integers(len(self.scene_views)))
        m_idx = int(self.rng.integers(len(self.message_views)))
        if iteration % cfg.vis_interval == 0:
            self._refresh_visibility()

        loss_s, da_s, dsh_s = self._side_loss_grads(
            self.proj_scene[s_idx], self.logits_s, self.sh_s, self.scene_views[s_idx][1])
        loss_m, da_m, dsh_m = self._side_loss_grads(
            self.proj_message[m_idx], self.logits_m, self.sh_m, self.message_views[m_idx][1])

        # gate on the recon gradient of the public opacity (message term has none)
        g = gate(da_s)

        alpha_s = expit(self.logits_s)
        alpha_m = expit(self.logits_m)
        kl = bern_sym_kl(alpha_s, alpha_m)
        loss_c = float(np.mean(g * self.visibility * kl))
        dkl_p, dkl_q = bern_sym_kl_grads(alpha_s, alpha_m)
        scale = g * self.visibility / len(alpha_s)
        dc_alpha_s = scale * dkl_p
        dc_alpha_m = scale * dkl_q

        grad_alpha_s = da_s + cfg.lambda_cons * dc_alpha_s
        grad_alpha_m = cfg.lambda_message * da_m + cfg.lambda_cons * dc_alpha_m
        grad_sh_s = dsh_s
        grad_sh_m = cfg.lambda_message * dsh_m

        self.last_grads = {
            "alpha_s_recon": da_s, "alpha_m_recon": da_m,
            "sh_s_recon": dsh_s, "sh_m_recon": dsh_m,
            "alpha_s_cons": dc_alpha_s, "alpha_m_cons": dc_alpha_m,
            "alpha_s": grad_alpha_s, "alpha_m": grad_alpha_m,
            "sh_s": grad_sh_s, "sh_m": grad_sh_m,
        }

        # chain to the stored logits, then step each parameter group
        sig_s = alpha_s * (1.0 - alpha_s)
        sig_m = alpha_m * (1.0 - alpha_m)
        self.opt_alpha_s.step([self.logits_s], [grad_alpha_s * sig_s])
        self.opt_alpha_m.step([self.logits_m], [grad_alpha_m * sig_m])
        self.opt_dc_s.step([self.sh_s[:, :1, :]], [grad_sh_s[:, :1, :]])
        self.opt_dc_m.step([self.sh_m[:, :1, :]], [grad_sh_m[:, :1, :]])
        self.opt_rest_s.step([self.sh_s[:, 1:, :]], [grad_sh_s[:, 1:, :]])
        self.opt_rest_m.step([self.sh_m[:, 1:, :]], [grad_sh_m[:, 1:, :]])

        total = loss_s + cfg.lambda_message * loss_m + cfg.lambda_cons * loss_c
        if not np.isfinite(total):
            raise DivergenceError(f"training loss became non-finite at iteration {iteration}")
        entry = LossBreakdown(scene=loss_s, message=loss_m, cons=loss_c, total=total)
        entry.check(cfg.lambda_message, cfg.lambda_cons)
        self.history.append(entry)
        return entry

    def run(self):
        for it in range(self.cfg.iterations):
            self.step(it)
        return self.history


def train_pair(scene_views, message_views, geometry: GaussianCloud,
               cfg: TrainConfig = None):
    """Joint optimization entry point; returns (DualCloud, loss history)."""
    trainer = PairTrainer(scene_views, message_views, geometry, cfg)
    trainer.run()
    return trainer.dual(), trainer.history
