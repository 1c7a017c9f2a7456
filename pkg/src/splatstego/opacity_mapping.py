"""Hidden-opacity mapping network and the private key container.

A small MLP consumes the hash-grid descriptor of a primitive's position
concatenated with the public activated opacity and the three DC SH
coefficients, and predicts the hidden opacity. Tables and weights are
trained jointly with full-batch Adam; together with the bit plan and the
quantization lattice they form the private key.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .bitcodec import BitPlan, QuantParams, MODE_FLOATBITS, MODE_QUANTIZED
from .errors import (
    ChecksumError,
    DivergenceError,
    IndexOutOfRangeError,
    KeyVersionError,
    ShapeMismatchError,
)
from .gaussians import DualCloud, GaussianCloud
from .hash_encoding import HashGrid, HashGridConfig, positions_bbox

MLP_DIMS = (68, 64, 64, 1)  # descriptor 64 + activated opacity + 3 DC coefficients


@dataclass
class MlpWeights:
    """Dense layers (W, b); ReLU between, sigmoid on the scalar output."""

    layers: list

    def __post_init__(self):
        dims = [self.layers[0][0].shape[1]]
        for W, b in self.layers:
            if W.shape[0] != b.shape[0] or W.shape[1] != dims[-1]:
                raise ShapeMismatchError("MLP layer dimensions do not chain")
            dims.append(W.shape[0])
        self.dims = tuple(dims)

    def copy(self):
        return MlpWeights([(W.copy(), b.copy()) for W, b in self.layers])

    def params(self):
        return [a for W, b in self.layers for a in (W, b)]


def mlp_init(dims=MLP_DIMS, seed: int = 0) -> MlpWeights:
    """Kaiming-uniform fan-in weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append((W, np.zeros(fan_out)))
    return MlpWeights(layers)


def mlp_forward(x, weights: MlpWeights):
    """Sigmoid-squashed scalar output for one 68-vector or a batch (N, 68)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x.reshape(1, -1) if single else x
    if a.shape[1] != weights.dims[0]:
        raise ShapeMismatchError(f"input width {a.shape[1]} != {weights.dims[0]}")
    for i, (W, b) in enumerate(weights.layers):
        a = a @ W.T + b
        if i + 1 < len(weights.layers):
            a = np.maximum(a, 0.0)
    out = expit(a[:, 0])
    return float(out[0]) if single else out


def _mlp_forward_cache(X, weights: MlpWeights):
    acts = [X]
    a = X
    for i, (W, b) in enumerate(weights.layers):
        z = a @ W.T + b
        a = np.maximum(z, 0.0) if i + 1 < len(weights.layers) else z
        acts.append(a)
    out = expit(acts[-1][:, 0])
    return out, acts


def _mlp_backward(weights: MlpWeights, acts, out, d_out):
    """d(loss)/d(input X) plus parameter gradients, given d(loss)/d(sigmoid out)."""
    delta = (d_out * out * (1.0 - out))[:, None]
    grads = [None] * (2 * len(weights.layers))
    for i in range(len(weights.layers) - 1, -1, -1):
        W, _ = weights.layers[i]
        a_prev = acts[i]
        grads[2 * i] = delta.T @ a_prev
        grads[2 * i + 1] = delta.sum(axis=0)
        delta = delta @ W
        if i > 0:
            delta = delta * (acts[i] > 0.0)
    return delta, grads


class Adam:
    """Adam over a list of parameter arrays (beta1=0.9, beta2=0.999, eps=1e-8).

    The update is computed in place through one scratch buffer per parameter;
    algebraically it is the standard bias-corrected rule
    p -= lr * m_hat / (sqrt(v_hat) + eps).
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self._scratch = [np.empty_like(p) for p in params]

    def step(self, params, grads):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        rbc2 = np.sqrt(1.0 - self.beta2 ** t)
        step_size = self.lr * rbc2 / bc1
        for p, g, m, v, s in zip(params, grads, self.m, self.v, self._scratch):
            g = np.asarray(g)
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=s)
            m += s
            v *= self.beta2
            np.multiply(g, g, out=s)
            s *= 1.0 - self.beta2
            v += s
            np.sqrt(v, out=s)
            s += self.eps * rbc2
            np.divide(m, s, out=s)
            s *= step_size
            p -= s


@dataclass
class MappingTrainConfig:
    epochs: int = 4000
    lr: float = 5e-3
    seed: int = 0


def mapping_inputs(positions, opacity_logits, dc_coeffs, grid: HashGrid) -> np.ndarray:
    """(N, 68) MLP input block: descriptor | activated opacity | DC coefficients."""
    feats = grid.encode(positions)
    alpha = expit(np.asarray(opacity_logits, dtype=np.float64))[:, None]
    dc = np.asarray(dc_coeffs, dtype=np.float64)
    return np.concatenate([feats, alpha, dc], axis=1)


def build_input(i: int, dual: DualCloud, grid: HashGrid) -> np.ndarray:
    """68-vector for one primitive of a dual cloud (scene-side attributes)."""
    if not 0 <= i < len(dual):
        raise IndexOutOfRangeError(f"primitive {i} outside [0, {len(dual)})")
    return mapping_inputs(
        dual.geometry.positions[i:i + 1],
        dual.scene_opacity_logits[i:i + 1],
        dual.scene_sh[i:i + 1, 0, :],
        grid,
    )[0]


def train_mapping(
    dual: DualCloud,
    cfg: MappingTrainConfig = None,
    grid_config: HashGridConfig = None,
    bbox=None,
):
    """Fit {tables, weights} so the mapping reproduces the hidden opacity.

    Full-batch Adam on the mean squared error against the activated message
    opacity. Because positions are fixed, the trilinear stencil (and hence
    the set of touched table rows) is constant, so only those rows are
    trained; untouched rows keep their initialization, exactly as dense Adam
    would leave them.

    Returns (grid, mlp, losses) with losses the per-epoch MSE curve.
    """
    if cfg is None:
        cfg = MappingTrainConfig()
    if grid_config is None:
        grid_config = HashGridConfig(seed=cfg.seed)
    if bbox is None:
        bbox = positions_bbox(dual.geometry.positions)
    grid = HashGrid(grid_config, bbox)
    L, T, F = grid_config.levels, grid_config.table_size, grid_config.feature_dim

    stencil = grid.corner_indices(dual.geometry.positions)
    idx = np.stack([lvl_idx + level * T for level, (lvl_idx, _) in enumerate(stencil)])
    weights8 = np.stack([w for _, w in stencil]).astype(np.float32)  # (L, N, 8)
    uniq, compact_idx = np.unique(idx.reshape(-1), return_inverse=True)
    compact_idx = compact_idx.reshape(idx.shape)                     # (L, N, 8)
    # the table side runs in float32 (the key stores float32 anyway)
    compact = grid.tables.reshape(L * T, F)[uniq].astype(np.float32)  # (U, F)

    n = len(dual)
    alpha = expit(dual.scene_opacity_logits.astype(np.float64))[:, None]
    dc = dual.scene_sh[:, 0, :].astype(np.float64)
    target = expit(dual.message_opacity_logits.astype(np.float64))

    mlp = mlp_init(MLP_DIMS, seed=cfg.seed)
    params = [compact] + mlp.params()
    opt = Adam(params, lr=cfg.lr)
    flat_cidx = compact_idx.reshape(-1)
    losses = np.empty(cfg.epochs)
    g_compact = np.empty_like(compact)

    for epoch in range(cfg.epochs):
        gathered = compact[compact_idx]                              # (L, N, 8, F)
        feats = np.einsum("lnkf,lnk->lnf", gathered, weights8)
        X = np.concatenate([feats.transpose(1, 0, 2).reshape(n, L * F), alpha, dc], axis=1)
        out, acts = _mlp_forward_cache(X, mlp)
        resid = out - target
        loss = float(np.mean(resid * resid))
        losses[epoch] = loss
        if not np.isfinite(loss):
            raise DivergenceError(f"mapping loss became non-finite at epoch {epoch}")

        dX, grads = _mlp_backward(mlp, acts, out, 2.0 * resid / n)
        dfeats = dX[:, :L * F].astype(np.float32).reshape(n, L, F).transpose(1, 0, 2)
        contrib = weights8[:, :, :, None] * dfeats[:, :, None, :]    # (L, N, 8, F)
        flat_vals = contrib.reshape(-1, F)
        for f_dim in range(F):
            g_compact[:, f_dim] = np.bincount(
                flat_cidx, weights=flat_vals[:, f_dim], minlength=len(uniq))
        opt.step(params, [g_compact] + grads)

    tables = grid.tables.reshape(L * T, F)
    tables[uniq] = compact
    grid.tables = tables.reshape(L, T, F)
    return grid, mlp, losses


@dataclass
class StegoKey:
    """Everything needed for deterministic recovery; float32 on disk and in memory."""

    plan: BitPlan
    qp: QuantParams
    grid: HashGrid
    mlp: MlpWeights
    seed: int = 0
    epochs: int = 0
    version: int = 1

    def __post_init__(self):
        # round through float32 up front so saved and in-memory keys agree
        self.grid = HashGrid(
            self.grid.config,
            self.grid.bbox.astype(np.float32).astype(np.float64),
            self.grid.tables.astype(np.float32).astype(np.float64),
        )
        self.mlp = MlpWeights([
            (W.astype(np.float32).astype(np.float64), b.astype(np.float32).astype(np.float64))
            for W, b in self.mlp.layers
        ])


def recover_opacity(stego: GaussianCloud, key: StegoKey) -> np.ndarray:
    """Hidden opacity estimate per primitive via the key's mapping network."""
    if key.version != 1:
        raise KeyVersionError(f"unsupported key version {key.version}")
    X = mapping_inputs(stego.positions, stego.opacity_logits, stego.sh[:, 0, :], key.grid)
    return mlp_forward(X, key.mlp)


_KEY_MAGIC = b"SNS2"
_MODE_CODE = {MODE_QUANTIZED: 0, MODE_FLOATBITS: 1}
_CODE_MODE = {v: k for k, v in _MODE_CODE.items()}


def save_key(key: StegoKey, path) -> None:
    cfg = key.grid.config
    parts = [
        struct.pack("<BBHHH", _MODE_CODE[key.plan.mode], int(key.plan.graded),
                    key.plan.k, key.plan.gamma_bits, key.plan.n),
        struct.pack("<ddI", key.qp.c_min, key.qp.delta, key.qp.gamma_bits),
        key.grid.bbox.astype("<f4").tobytes(),
        struct.pack("<IIIQIBQ", cfg.levels, cfg.r_min, cfg.r_max, cfg.table_size,
                    cfg.feature_dim, int(cfg.always_hash), cfg.seed),
        struct.pack("<QQQ", *cfg.primes),
        key.grid.tables.astype("<f4").tobytes(),
        struct.pack("<I", len(key.mlp.layers)),
    ]
    for W, b in key.mlp.layers:
        parts.append(struct.pack("<II", W.shape[0], W.shape[1]))
        parts.append(W.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    parts.append(struct.pack("<QI", key.seed, key.epochs))
    payload = b"".join(parts)
    with open(path, "wb") as f:
        f.write(_KEY_MAGIC)
        f.write(struct.pack("<I", key.version))
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_key(path) -> StegoKey:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != _KEY_MAGIC:
        raise KeyVersionError("not a stego key file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != 1:
        raise KeyVersionError(f"unsupported key version {version}")
    payload, (crc,) = data[8:-4], struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(payload) != crc:
        raise ChecksumError("key payload failed its CRC check")
    try:
        pos = 0
        mode_c, graded, k, gamma, n = struct.unpack_from("<BBHHH", payload, pos)
        pos += 8
        c_min, delta, qgamma = struct.unpack_from("<ddI", payload, pos)
        pos += 20
        bbox = np.frombuffer(payload, dtype="<f4", count=6, offset=pos).reshape(2, 3)
        pos += 24
        levels, r_min, r_max, table_size, feat, always_hash, gseed = struct.unpack_from(
            "<IIIQIBQ", payload, pos)
        pos += struct.calcsize("<IIIQIBQ")
        primes = struct.unpack_from("<QQQ", payload, pos)
        pos += 24
        n_table = levels * table_size * feat
        tables = np.frombuffer(payload, dtype="<f4", count=n_table, offset=pos)
        tables = tables.reshape(levels, table_size, feat).astype(np.float64)
        pos += 4 * n_table
        (n_layers,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        layers = []
        for _ in range(n_layers):
            rows, cols = struct.unpack_from("<II", payload, pos)
            pos += 8
            W = np.frombuffer(payload, dtype="<f4", count=rows * cols, offset=pos)
            pos += 4 * rows * cols
            b = np.frombuffer(payload, dtype="<f4", count=rows, offset=pos)
            pos += 4 * rows
            layers.append((W.reshape(rows, cols).astype(np.float64), b.astype(np.float64)))
        seed, epochs = struct.unpack_from("<QI", payload, pos)
        pos += 12
    except struct.error as exc:
        raise ChecksumError(f"key payload too short: {exc}") from None
    if pos != len(payload):
        raise ChecksumError("trailing bytes after key payload")
    cfg = HashGridConfig(levels=levels, r_min=r_min, r_max=r_max, table_size=table_size,
                         feature_dim=feat, primes=tuple(int(p) for p in primes),
                         always_hash=bool(always_hash), seed=gseed)
    plan = BitPlan(k=k, n=n, gamma_bits=gamma, mode=_CODE_MODE[mode_c], graded=bool(graded))
    qp = QuantParams(c_min=c_min, delta=delta, gamma_bits=qgamma)
    grid = HashGrid(cfg, bbox.astype(np.float64), tables)
    mlp = MlpWeights(layers)
    return StegoKey(plan=plan, qp=qp, grid=grid, mlp=mlp, seed=seed, epochs=epochs,
                    version=version)
