"""Desk-scale tile-based CPU splatting renderer.

Forward model per pixel: splats overlapping the pixel are blended
front-to-back in exact depth order (global stable sort by camera-space
depth of the primitive center, ties broken by input index),

    C = sum_i c_i * delta_i * prod_{j<i} (1 - delta_j) + bg * prod_j (1 - delta_j)

with delta_i = min(alpha_i * exp(-0.5 d^T conic d), 0.99). A splat only
influences pixels inside its 3-sigma bounding rectangle; pixels whose
transmittance falls below 1e-4 stop accumulating. Both cutoffs are part of
the rendered function, so the naive reference renderer applies them too.

The backward pass replays the forward sweep and produces exact gradients of
the computed function with respect to activated opacity and SH coefficients
only; geometry is treated as constant.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import EmptyViewsError, ShapeMismatchError, StaleProductError
from .gaussians import GaussianCloud

COV_REG = 0.3          # px^2 added to the projected covariance diagonal
DELTA_MAX = 0.99       # effective-opacity clamp
TERMINATE_T = 1e-4     # stop compositing below this transmittance
TILE = 32

# Real SH basis constants, degree 0..3 (vanilla 3DGS ordering and signs).
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)


@dataclass
class Camera:
    """Pinhole camera; x_cam = R @ x_world + t, looking down +z."""

    R: np.ndarray            # (3, 3) world-to-camera rotation, row-major
    t: np.ndarray            # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ShapeMismatchError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ShapeMismatchError("image size must be at least 1x1")

    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.R.T @ self.t

    def to_record(self) -> dict:
        return {
            "R": [float(v) for v in self.R.reshape(-1)],
            "t": [float(v) for v in self.t],
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "w": int(self.width), "h": int(self.height),
        }

    @staticmethod
    def from_record(rec: dict) -> "Camera":
        return Camera(
            R=np.asarray(rec["R"], dtype=np.float64).reshape(3, 3),
            t=np.asarray(rec["t"], dtype=np.float64),
            fx=float(rec["fx"]), fy=float(rec["fy"]),
            cx=float(rec["cx"]), cy=float(rec["cy"]),
            width=int(rec["w"]), height=int(rec["h"]),
        )


def save_cameras(cameras, path) -> None:
    with open(path, "w") as f:
        json.dump([c.to_record() for c in cameras], f, sort_keys=True, indent=1)
        f.write("\n")


def load_cameras(path) -> list:
    with open(path) as f:
        records = json.load(f)
    return [Camera.from_record(rec) for rec in records]


def look_at(eye, target, up=(0.0, 0.0, 1.0), fx=70.0, fy=70.0, width=64, height=64) -> Camera:
    """Camera at `eye` looking toward `target` (z forward, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-12:  # looking along up: pick another axis
        upv = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, upv)
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return Camera(R=R, t=-R @ eye, fx=fx, fy=fy,
                  cx=width / 2.0, cy=height / 2.0, width=width, height=height)


# --- spherical harmonics ---

def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Evaluate the 16 real SH basis functions at unit directions (N, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    single = dirs.ndim == 1
    d = dirs.reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    B = np.empty((len(d), 16), dtype=np.float64)
    B[:, 0] = _C0
    B[:, 1] = -_C1 * y
    B[:, 2] = _C1 * z
    B[:, 3] = -_C1 * x
    B[:, 4] = _C2[0] * xy
    B[:, 5] = _C2[1] * yz
    B[:, 6] = _C2[2] * (2.0 * zz - xx - yy)
    B[:, 7] = _C2[3] * xz
    B[:, 8] = _C2[4] * (xx - yy)
    B[:, 9] = _C3[0] * y * (3.0 * xx - yy)
    B[:, 10] = _C3[1] * xy * z
    B[:, 11] = _C3[2] * y * (4.0 * zz - xx - yy)
    B[:, 12] = _C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    B[:, 13] = _C3[4] * x * (4.0 * zz - xx - yy)
    B[:, 14] = _C3[5] * z * (xx - yy)
    B[:, 15] = _C3[6] * x * (xx - 3.0 * yy)
    return B[0] if single else B


def eval_sh(coeffs: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Linear RGB of one primitive seen from a unit direction, clamped to [0,1]."""
    B = sh_basis(direction)
    rgb = 0.5 + B @ np.asarray(coeffs, dtype=np.float64)
    return np.clip(rgb, 0.0, 1.0)


def _quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Batch unit quaternions (N, 4) wxyz -> rotation matrices (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass
class Splat2D:
    mean: np.ndarray     # (2,) pixel coordinates
    cov: np.ndarray      # (2, 2) projected covariance (regularized)
    conic: np.ndarray    # (3,) [A, B, C]: quad = A dx^2 + 2 B dx dy + C dy^2
    depth: float
    bbox: tuple          # (x0, x1, y0, y1), half-open pixel index ranges
    prim_id: int


class ProjectedView:
    """Geometry-level projection of a cloud for one camera.

    Holds the depth-sorted surviving splats, their Gaussian footprints and
    the SH basis values of the view directions. Everything here depends only
    on geometry and camera, so a training loop computes it once and reuses
    it for both attribute sets in every iteration.
    """

    def __init__(self, cam: Camera, n_primitives: int):
        self.cam = cam
        self.n_primitives = n_primitives
        self.prim_ids = np.empty(0, dtype=np.int64)   # sorted -> original index
        self.depths = np.empty(0)
        self.means = np.empty((0, 2))
        self.conics = np.empty((0, 3))
        self.bboxes = np.empty((0, 4), dtype=np.int64)
        self.footprints: list = []                    # per sorted splat: G over bbox
        self.g_offsets = np.zeros(1, dtype=np.int64)  # footprints packed flat
        self.g_data = np.empty(0)
        self.basis = np.empty((0, 16))                # SH basis per sorted splat
        self.tiles: list = []                         # (y0, y1, x0, x1, splat index array)

    def __len__(self):
        return len(self.prim_ids)


def project_cloud(positions, rotations_unit, log_scales, cam: Camera):
    """Project all primitives; returns per-primitive arrays plus a keep mask."""
    p = np.asarray(positions, dtype=np.float64)
    x_cam = p @ cam.R.T + cam.t
    depth = x_cam[:, 2]
    keep = depth > cam.near

    Rq = _quat_to_rot(np.asarray(rotations_unit, dtype=np.float64))
    S = np.exp(np.asarray(log_scales, dtype=np.float64))
    M = Rq * S[:, None, :]                     # columns scaled: R @ diag(s)
    cov3 = M @ np.transpose(M, (0, 2, 1))
    cov_cam = np.einsum("ab,nbc,dc->nad", cam.R, cov3, cam.R)

    z = np.where(keep, depth, 1.0)
    invz = 1.0 / z
    J = np.zeros((len(p), 2, 3), dtype=np.float64)
    J[:, 0, 0] = cam.fx * invz
    J[:, 0, 2] = -cam.fx * x_cam[:, 0] * invz * invz
    J[:, 1, 1] = cam.fy * invz
    J[:, 1, 2] = -cam.fy * x_cam[:, 1] * invz * invz
    cov2 = np.einsum("nab,nbc,ndc->nad", J, cov_cam, J)
    cov2[:, 0, 0] += COV_REG
    cov2[:, 1, 1] += COV_REG

    mean2 = np.stack([cam.fx * x_cam[:, 0] * invz + cam.cx,
                      cam.fy * x_cam[:, 1] * invz + cam.cy], axis=1)

    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    keep &= det > 0
    det_safe = np.where(det > 0, det, 1.0)
    conic = np.stack([c / det_safe, -b / det_safe, a / det_safe], axis=1)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det_safe, 0.0))
    radius = np.ceil(3.0 * np.sqrt(np.maximum(lam_max, 0.0)))

    # pixel (row r, col cidx) samples at (cidx + 0.5, r + 0.5)
    x0 = np.maximum(np.ceil(mean2[:, 0] - radius - 0.5), 0).astype(np.int64)
    x1 = np.minimum(np.floor(mean2[:, 0] + radius - 0.5), cam.width - 1).astype(np.int64) + 1
    y0 = np.maximum(np.ceil(mean2[:, 1] - radius - 0.5), 0).astype(np.int64)
    y1 = np.minimum(np.floor(mean2[:, 1] + radius - 0.5), cam.height - 1).astype(np.int64) + 1
    keep &= (x1 > x0) & (y1 > y0)

    return keep, depth, mean2, cov2, conic, np.stack([x0, x1, y0, y1], axis=1)


def project_gaussian(primitive, cam: Camera):
    """Project one primitive; returns a Splat2D or None when culled."""
    q = np.asarray(primitive.rotation, dtype=np.float64)
    nq = np.linalg.norm(q)
    keep, depth, mean2, cov2, conic, bbox = project_cloud(
        primitive.position[None, :], (q / nq)[None, :],
        primitive.log_scale[None, :], cam)
    if not keep[0]:
        return None
    return Splat2D(mean=mean2[0], cov=cov2[0], conic=conic[0],
                   depth=float(depth[0]),
                   bbox=(int(bbox[0, 0]), int(bbox[0, 1]), int(bbox[0, 2]), int(bbox[0, 3])),
                   prim_id=0)


def project_view(cloud: GaussianCloud, cam: Camera) -> ProjectedView:
    """Project, depth-sort and precompute Gaussian footprints for a camera."""
    view = ProjectedView(cam, len(cloud))
    keep, depth, mean2, _, conic, bbox = project_cloud(
        cloud.positions, cloud.rotations_normalized(), cloud.log_scales, cam)
    idx = np.nonzero(keep)[0]
    order = idx[np.argsort(depth[idx], kind="stable")]
    view.prim_ids = order
    view.depths = depth[order]
    view.means = mean2[order]
    view.conics = conic[order]
    view.bboxes = bbox[order]

    dirs = cloud.positions.astype(np.float64) - cam.center()
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    view.basis = sh_basis(dirs[order]).reshape(len(order), 16)

    for m in range(len(order)):
        x0, x1, y0, y1 = view.bboxes[m]
        dx = np.arange(x0, x1, dtype=np.float64) + 0.5 - view.means[m, 0]
        dy = np.arange(y0, y1, dtype=np.float64) + 0.5 - view.means[m, 1]
        A, B, C = view.conics[m]
        quad = A * dx[None, :] ** 2 + 2.0 * B * dy[:, None] * dx[None, :] + C * dy[:, None] ** 2
        view.footprints.append(np.exp(-0.5 * quad))

    sizes = [fp.size for fp in view.footprints]
    view.g_offsets = np.zeros(len(order) + 1, dtype=np.int64)
    np.cumsum(sizes, out=view.g_offsets[1:])
    view.g_data = (np.concatenate([fp.reshape(-1) for fp in view.footprints])
                   if view.footprints else np.empty(0))

    # tile lists: indices of sorted splats whose bbox intersects each tile
    for ty in range(0, cam.height, TILE):
        for tx in range(0, cam.width, TILE):
            ty1, tx1 = min(ty + TILE, cam.height), min(tx + TILE, cam.width)
            hit = np.nonzero((view.bboxes[:, 0] < tx1) & (view.bboxes[:, 1] > tx)
                             & (view.bboxes[:, 2] < ty1) & (view.bboxes[:, 3] > ty))[0]
            view.tiles.append((ty, ty1, tx, tx1, hit))
    return view


def splat_colors(cloud: GaussianCloud, view: ProjectedView):
    """Clamped RGB and clamp mask for the view's sorted splats."""
    sh = cloud.sh.astype(np.float64)[view.prim_ids]
    pre = 0.5 + np.einsum("mj,mjc->mc", view.basis, sh)
    colors = np.clip(pre, 0.0, 1.0)
    mask = ((pre > 0.0) & (pre < 1.0)).astype(np.float64)
    return colors, mask


@dataclass
class RenderProduct:
    image: np.ndarray           # (H, W, 3) linear RGB in [0, 1]
    v_raw: np.ndarray           # (N,) accumulated blend weight per primitive
    transmittance: np.ndarray   # (H, W) final per-pixel transmittance
    weight_sum: np.ndarray      # (H, W) accumulated blend weight per pixel
    background: np.ndarray
    view: ProjectedView = None
    colors: np.ndarray = None
    clamp_mask: np.ndarray = None
    alphas: np.ndarray = None   # activated opacity per sorted splat
    fingerprint: int = 0


def _composite_tile_numpy(view, alphas, colors, ty, ty1, tx, tx1, hit):
    """Vectorized fallback; mirrors the compiled kernel operation for operation."""
    h, w = ty1 - ty, tx1 - tx
    T = np.ones((h, w), dtype=np.float64)
    img = np.zeros((h, w, 3), dtype=np.float64)
    wsum = np.zeros((h, w), dtype=np.float64)
    v_part = np.zeros(len(view), dtype=np.float64)
    for m in hit:
        x0, x1, y0, y1 = view.bboxes[m]
        gy0, gy1 = max(y0, ty), min(y1, ty1)
        gx0, gx1 = max(x0, tx), min(x1, tx1)
        Tv = T[gy0 - ty:gy1 - ty, gx0 - tx:gx1 - tx]
        if Tv.max() < TERMINATE_T:
            continue
        G = view.footprints[m][gy0 - y0:gy1 - y0, gx0 - x0:gx1 - x0]
        delta = np.minimum(alphas[m] * G, DELTA_MAX)
        delta = delta * (Tv >= TERMINATE_T)
        wgt = delta * Tv
        img[gy0 - ty:gy1 - ty, gx0 - tx:gx1 - tx] += wgt[:, :, None] * colors[m]
        wsum[gy0 - ty:gy1 - ty, gx0 - tx:gx1 - tx] += wgt
        v_part[m] = wgt.sum()
        Tv *= 1.0 - delta
    return img, T, wsum, v_part


def _composite_tile(view, alphas, colors, ty, ty1, tx, tx1, hit):
    if not _kernels.HAVE_NUMBA:
        return _composite_tile_numpy(view, alphas, colors, ty, ty1, tx, tx1, hit)
    h, w = ty1 - ty, tx1 - tx
    T = np.ones((h, w), dtype=np.float64)
    img = np.zeros((h, w, 3), dtype=np.float64)
    wsum = np.zeros((h, w), dtype=np.float64)
    v_part = np.zeros(len(view), dtype=np.float64)
    _kernels.composite_tile(hit, view.bboxes, view.g_offsets, view.g_data,
                            alphas, colors, ty, ty1, tx, tx1,
                            TERMINATE_T, DELTA_MAX, T, img, wsum, v_part)
    return img, T, wsum, v_part


def composite(view: ProjectedView, alphas, colors, background, threads: int = 1) -> RenderProduct:
    """Front-to-back alpha blending of projected splats over the image.

    Tiles write disjoint pixels; per-splat weights are reduced in fixed tile
    order, so the result is independent of the worker count.
    """
    cam = view.cam
    alphas = np.ascontiguousarray(alphas, dtype=np.float64)
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    image = np.empty((cam.height, cam.width, 3), dtype=np.float64)
    trans = np.empty((cam.height, cam.width), dtype=np.float64)
    wsum = np.empty((cam.height, cam.width), dtype=np.float64)
    v_raw_sorted = np.zeros(len(view), dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)

    def run(tile):
        ty, ty1, tx, tx1, hit = tile
        return _composite_tile(view, alphas, colors, ty, ty1, tx, tx1, hit)

    if threads > 1 and len(view.tiles) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, view.tiles))
    else:
        results = [run(t) for t in view.tiles]

    for (ty, ty1, tx, tx1, _), (img, T, ws, v_part) in zip(view.tiles, results):
        image[ty:ty1, tx:tx1] = img + (T * bg[:, None, None]).transpose(1, 2, 0)
        trans[ty:ty1, tx:tx1] = T
        wsum[ty:ty1, tx:tx1] = ws
        v_raw_sorted += v_part

    v_raw = np.zeros(view.n_primitives, dtype=np.float64)
    v_raw[view.prim_ids] = v_raw_sorted
    return RenderProduct(image=image, v_raw=v_raw, transmittance=trans,
                         weight_sum=wsum, background=bg, view=view,
                         alphas=np.asarray(alphas, dtype=np.float64))


def _fingerprint(cloud: GaussianCloud, cam: Camera, background) -> int:
    h = zlib.crc32(cloud.positions.tobytes())
    for a in (cloud.rotations, cloud.log_scales, cloud.opacity_logits, cloud.sh):
        h = zlib.crc32(a.tobytes(), h)
    h = zlib.crc32(repr(cam.to_record()).encode(), h)
    h = zlib.crc32(np.asarray(background, dtype=np.float64).tobytes(), h)
    return h


def render(cloud: GaussianCloud, cam: Camera, background=(0.0, 0.0, 0.0),
           threads: int = 1) -> RenderProduct:
    """Render a cloud; the returned product carries what backward needs."""
    view = project_view(cloud, cam)
    colors, clamp_mask = splat_colors(cloud, view)
    alphas = cloud.activated_opacity()[view.prim_ids]
    product = composite(view, alphas, colors, background, threads=threads)
    product.colors = colors
    product.clamp_mask = clamp_mask
    product.fingerprint = _fingerprint(cloud, cam, background)
    return product


def composite_backward(view: ProjectedView, alphas, colors, product: RenderProduct,
                       upstream: np.ndarray, threads: int = 1):
    """Exact gradients d(loss)/d(alpha) and d(loss)/d(color) per sorted splat.

    Replays the forward sweep front-to-back; for splat i over pixels where it
    was applied,

        dC/ddelta_i = c_i * T_i - (C - P_i) / (1 - delta_i)

    with P_i the running color prefix including splat i and C the final
    image. The second term folds in every later splat and the background.
    """
    alphas = np.ascontiguousarray(alphas, dtype=np.float64)
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    cam = view.cam
    us = np.ascontiguousarray(upstream, dtype=np.float64)
    if us.shape != (cam.height, cam.width, 3):
        raise ShapeMismatchError(f"upstream shape {us.shape} != image shape")
    image = np.ascontiguousarray(product.image)

    def run_numpy(tile):
        ty, ty1, tx, tx1, hit = tile
        h, w = ty1 - ty, tx1 - tx
        T = np.ones((h, w), dtype=np.float64)
        P = np.zeros((h, w, 3), dtype=np.float64)
        C = image[ty:ty1, tx:tx1]
        U = us[ty:ty1, tx:tx1]
        d_alpha = np.zeros(len(view), dtype=np.float64)
        d_color = np.zeros((len(view), 3), dtype=np.float64)
        for m in hit:
            x0, x1, y0, y1 = view.bboxes[m]
            gy0, gy1 = max(y0, ty), min(y1, ty1)
            gx0, gx1 = max(x0, tx), min(x1, tx1)
            ly, lx = slice(gy0 - ty, gy1 - ty), slice(gx0 - tx, gx1 - tx)
            Tv = T[ly, lx]
            if Tv.max() < TERMINATE_T:
                continue
            G = view.footprints[m][gy0 - y0:gy1 - y0, gx0 - x0:gx1 - x0]
            aG = alphas[m] * G
            delta = np.minimum(aG, DELTA_MAX)
            active = Tv >= TERMINATE_T
            delta = delta * active
            wgt = delta * Tv
            Pv = P[ly, lx]
            Pv += wgt[:, :, None] * colors[m]
            Uv, Cv = U[ly, lx], C[ly, lx]
            d_color[m] = np.einsum("yxc,yx->c", Uv, wgt)
            behind = (Cv - Pv) / (1.0 - delta)[:, :, None]
            grad_delta = np.einsum("yxc,yxc->yx", Uv, colors[m] * Tv[:, :, None] - behind)
            d_delta_d_alpha = G * (aG < DELTA_MAX) * active
            d_alpha[m] = np.sum(grad_delta * d_delta_d_alpha)
            Tv *= 1.0 - delta
        return d_alpha, d_color

    def run(tile):
        if not _kernels.HAVE_NUMBA:
            return run_numpy(tile)
        ty, ty1, tx, tx1, hit = tile
        h, w = ty1 - ty, tx1 - tx
        T = np.ones((h, w), dtype=np.float64)
        P = np.zeros((h, w, 3), dtype=np.float64)
        d_alpha = np.zeros(len(view), dtype=np.float64)
        d_color = np.zeros((len(view), 3), dtype=np.float64)
        _kernels.backward_tile(hit, view.bboxes, view.g_offsets, view.g_data,
                               alphas, colors,
                               np.ascontiguousarray(image[ty:ty1, tx:tx1]),
                               np.ascontiguousarray(us[ty:ty1, tx:tx1]),
                               ty, ty1, tx, tx1, TERMINATE_T, DELTA_MAX,
                               T, P, d_alpha, d_color)
        return d_alpha, d_color

    if threads > 1 and len(view.tiles) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, view.tiles))
    else:
        results = [run(t) for t in view.tiles]

    d_alpha = np.zeros(len(view), dtype=np.float64)
    d_color = np.zeros((len(view), 3), dtype=np.float64)
    for da, dc in results:
        d_alpha += da
        d_color += dc
    return d_alpha, d_color


def render_backward(product: RenderProduct, cloud: GaussianCloud, cam: Camera,
                    upstream: np.ndarray, threads: int = 1):
    """Gradients of a scalar loss with respect to activated opacity and SH.

    Returns (d_alpha (N,), d_sh (N, 16, 3)) indexed by original primitive.
    Raises StaleProductError when the inputs changed since the forward pass.
    """
    if product.fingerprint != _fingerprint(cloud, cam, product.background):
        raise StaleProductError("render inputs changed since the forward pass")
    view = product.view
    d_alpha_sorted, d_color = composite_backward(
        view, product.alphas, product.colors, product, upstream, threads=threads)
    d_sh_sorted = view.basis[:, :, None] * (d_color * product.clamp_mask)[:, None, :]
    d_alpha = np.zeros(view.n_primitives, dtype=np.float64)
    d_sh = np.zeros((view.n_primitives, 16, 3), dtype=np.float64)
    d_alpha[view.prim_ids] = d_alpha_sorted
    d_sh[view.prim_ids] = d_sh_sorted
    return d_alpha, d_sh


def render_reference(cloud: GaussianCloud, cam: Camera, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Naive per-pixel renderer (same function, pixel-major loops). Slow."""
    view = project_view(cloud, cam)
    colors, _ = splat_colors(cloud, view)
    alphas = cloud.activated_opacity()[view.prim_ids]
    bg = np.asarray(background, dtype=np.float64)
    img = np.empty((cam.height, cam.width, 3), dtype=np.float64)
    for py in range(cam.height):
        for px in range(cam.width):
            T = 1.0
            c = np.zeros(3)
            for m in range(len(view)):
                x0, x1, y0, y1 = view.bboxes[m]
                if not (x0 <= px < x1 and y0 <= py < y1):
                    continue
                if T < TERMINATE_T:
                    break
                G = view.footprints[m][py - y0, px - x0]
                delta = min(alphas[m] * G, DELTA_MAX)
                c += delta * T * colors[m]
                T *= 1.0 - delta
            img[py, px] = c + T * bg
    return img


def visibility_weights(cloud: GaussianCloud, cameras, threads: int = 1) -> np.ndarray:
    """Max-normalized accumulated blend weights over a set of cameras."""
    if len(cameras) == 0:
        raise EmptyViewsError("need at least one camera")
    total = np.zeros(len(cloud), dtype=np.float64)
    for cam in cameras:
        total += render(cloud, cam, threads=threads).v_raw
    peak = total.max()
    if peak <= 0.0:
        return np.zeros(len(cloud), dtype=np.float64)
    return total / peak
