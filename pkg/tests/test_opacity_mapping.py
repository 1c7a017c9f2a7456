import numpy as np
import pytest
from scipy.special import expit

from splatstego.bitcodec import BitPlan, QuantParams
from splatstego.errors import ChecksumError, IndexOutOfRangeError, KeyVersionError
from splatstego.gaussians import DualCloud, CloudGeometry, inverse_sigmoid
from splatstego.hash_encoding import HashGrid, HashGridConfig, positions_bbox
from splatstego.opacity_mapping import (
    MLP_DIMS,
    Adam,
    MappingTrainConfig,
    MlpWeights,
    StegoKey,
    build_input,
    load_key,
    mapping_inputs,
    mlp_forward,
    mlp_init,
    recover_opacity,
    save_key,
    train_mapping,
)
from splatstego.synthetic import random_unit_quaternions

SMALL_GRID = HashGridConfig(levels=4, r_min=2, r_max=16, table_size=1 << 10,
                            feature_dim=16)  # descriptor 64, cheap tables


def zero_mlp():
    return MlpWeights([(np.zeros((64, 68)), np.zeros(64)),
                       (np.zeros((64, 64)), np.zeros(64)),
                       (np.zeros((1, 64)), np.zeros(1))])


def make_dual(n=50, seed=0, target=None):
    rng = np.random.default_rng(seed)
    geom = CloudGeometry(
        positions=rng.uniform(-1, 1, (n, 3)).astype(np.float32),
        rotations=random_unit_quaternions(rng, n).astype(np.float32),
        log_scales=np.log(rng.uniform(0.02, 0.05, (n, 3))).astype(np.float32),
    )
    if target is None:
        target = rng.uniform(0.2, 0.8, n)
    return DualCloud(
        geometry=geom,
        scene_opacity_logits=rng.normal(size=n).astype(np.float32),
        scene_sh=rng.normal(scale=0.4, size=(n, 16, 3)).astype(np.float32),
        message_opacity_logits=inverse_sigmoid(target).astype(np.float32),
        message_sh=np.zeros((n, 16, 3), np.float32),
    )


class TestMlp:
    def test_zero_weights_give_half(self):
        assert mlp_forward(np.ones(68), zero_mlp()) == pytest.approx(0.5)

    def test_final_bias_shift(self):
        w = zero_mlp()
        w.layers[2][1][0] = 10.0
        assert mlp_forward(np.zeros(68), w) == pytest.approx(0.9999546021312976)

    def test_deterministic(self):
        w = mlp_init(seed=4)
        x = np.random.default_rng(0).normal(size=(10, 68))
        assert np.array_equal(mlp_forward(x, w), mlp_forward(x, w))

    def test_full_network_gradcheck(self):
        # analytic gradients of the training objective vs central differences,
        # through both the MLP weights and the hash-grid tables
        cfg = MappingTrainConfig(epochs=1, lr=0.0, seed=3)
        dual = make_dual(n=25, seed=5)
        grid_cfg = HashGridConfig(levels=4, r_min=2, r_max=16, table_size=1 << 8,
                                  feature_dim=16, seed=3)
        grid, mlp, _ = train_mapping(dual, cfg, grid_cfg)
        target = expit(dual.message_opacity_logits.astype(np.float64))

        def objective(g, w):
            X = mapping_inputs(dual.geometry.positions, dual.scene_opacity_logits,
                               dual.scene_sh[:, 0, :], g)
            pred = mlp_forward(X, w)
            return float(np.mean((pred - target) ** 2))

        # analytic: replicate one forward/backward pass by finite perturbation probes
        from splatstego.opacity_mapping import _mlp_backward, _mlp_forward_cache
        X = mapping_inputs(dual.geometry.positions, dual.scene_opacity_logits,
                           dual.scene_sh[:, 0, :], grid)
        out, acts = _mlp_forward_cache(X, mlp)
        dX, grads = _mlp_backward(mlp, acts, out, 2.0 * (out - target) / len(target))
        rng = np.random.default_rng(11)
        eps = 1e-4
        for _ in range(60):
            li = int(rng.integers(3))
            W, b = mlp.layers[li]
            r, c = int(rng.integers(W.shape[0])), int(rng.integers(W.shape[1]))
            W[r, c] += eps
            up = objective(grid, mlp)
            W[r, c] -= 2 * eps
            dn = objective(grid, mlp)
            W[r, c] += eps
            fd = (up - dn) / (2 * eps)
            an = grads[2 * li][r, c]
            assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-8)
        # table entries via the descriptor chain
        tgrads = grid.encode_backward(dual.geometry.positions, dX[:, :64])
        for level in range(2):
            idx, g = tgrads[level]
            pick = int(rng.integers(len(idx)))
            f_dim = int(rng.integers(grid.config.feature_dim))
            grid.tables[level, idx[pick], f_dim] += eps
            up = objective(grid, mlp)
            grid.tables[level, idx[pick], f_dim] -= 2 * eps
            dn = objective(grid, mlp)
            grid.tables[level, idx[pick], f_dim] += eps
            fd = (up - dn) / (2 * eps)
            an = g[pick, f_dim]
            assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-8)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = np.array([1.0])
        opt = Adam([p], lr=5e-3)
        opt.step([p], [np.array([1.0])])
        assert p[0] == pytest.approx(1.0 - 5e-3, abs=1e-6)

    def test_moment_shapes(self):
        params = [np.zeros((3, 4)), np.zeros(7)]
        opt = Adam(params, lr=1e-3)
        assert opt.m[0].shape == (3, 4) and opt.v[1].shape == (7,)
        assert opt.step_count == 0


class TestBuildInput:
    def test_width_and_slots(self):
        dual = make_dual(n=10, seed=1)
        dual.scene_opacity_logits[4] = 0.0
        grid = HashGrid(SMALL_GRID, positions_bbox(dual.geometry.positions))
        x = build_input(4, dual, grid)
        assert x.shape == (68,)
        assert x[64] == pytest.approx(0.5)          # activated opacity slot
        assert np.allclose(x[65:], dual.scene_sh[4, 0, :])

    def test_purity(self):
        dual = make_dual(n=6, seed=2)
        grid = HashGrid(SMALL_GRID, positions_bbox(dual.geometry.positions))
        assert np.array_equal(build_input(3, dual, grid), build_input(3, dual, grid))

    def test_index_out_of_range(self):
        dual = make_dual(n=6, seed=2)
        grid = HashGrid(SMALL_GRID, positions_bbox(dual.geometry.positions))
        with pytest.raises(IndexOutOfRangeError):
            build_input(6, dual, grid)


class TestTrainMapping:
    def test_constant_target_bias_solution(self):
        dual = make_dual(n=40, seed=3, target=np.full(40, 0.5))
        _, _, losses = train_mapping(dual, MappingTrainConfig(epochs=300, lr=5e-3),
                                     SMALL_GRID)
        assert losses[-1] < 1e-6

    def test_loss_smoothed_non_increasing(self):
        dual = make_dual(n=60, seed=4)
        _, _, losses = train_mapping(dual, MappingTrainConfig(epochs=600, lr=5e-3),
                                     SMALL_GRID)
        smoothed = np.convolve(losses, np.ones(100) / 100, mode="valid")
        drops = np.diff(smoothed)
        assert np.all(drops <= 1e-6)

    def test_reproducible(self):
        dual = make_dual(n=30, seed=5)
        cfg = MappingTrainConfig(epochs=100, lr=5e-3, seed=9)
        _, _, l1 = train_mapping(dual, cfg, SMALL_GRID)
        _, _, l2 = train_mapping(dual, cfg, SMALL_GRID)
        assert abs(l1[-1] - l2[-1]) < 1e-6


class TestRecovery:
    def setup_method(self):
        self.dual = make_dual(n=120, seed=6)
        grid, mlp, _ = train_mapping(self.dual, MappingTrainConfig(epochs=1500, lr=5e-3),
                                     SMALL_GRID)
        self.key = StegoKey(plan=BitPlan(), qp=QuantParams(), grid=grid, mlp=mlp)

    def test_trained_recovery_close(self):
        rec = recover_opacity(self.dual.scene_cloud(), self.key)
        target = expit(self.dual.message_opacity_logits.astype(np.float64))
        assert np.abs(rec - target).max() < 0.05

    def test_wrong_key_much_worse(self):
        target = expit(self.dual.message_opacity_logits.astype(np.float64))
        good_mse = np.mean((recover_opacity(self.dual.scene_cloud(), self.key) - target) ** 2)
        wrong = StegoKey(plan=BitPlan(), qp=QuantParams(),
                         grid=HashGrid(SMALL_GRID, self.key.grid.bbox),
                         mlp=mlp_init(seed=777))
        bad_mse = np.mean((recover_opacity(self.dual.scene_cloud(), wrong) - target) ** 2)
        assert bad_mse >= 10 * max(good_mse, 1e-8)

    def test_recovery_on_pruned_survivors(self):
        cloud = self.dual.scene_cloud().select(np.arange(0, 120, 3))
        rec = recover_opacity(cloud, self.key)
        full = recover_opacity(self.dual.scene_cloud(), self.key)
        assert np.allclose(rec, full[::3])

    def test_recovery_deterministic(self):
        a = recover_opacity(self.dual.scene_cloud(), self.key)
        b = recover_opacity(self.dual.scene_cloud(), self.key)
        assert np.array_equal(a, b)


class TestKeyFile:
    def make_key(self, seed=0):
        grid = HashGrid(SMALL_GRID, np.array([[-1.0, -1, -1], [1.0, 1, 1]]))
        return StegoKey(plan=BitPlan(k=13), qp=QuantParams(), grid=grid,
                        mlp=mlp_init(seed=seed), seed=seed, epochs=123)

    def test_roundtrip_field_exact(self, tmp_path):
        key = self.make_key(seed=3)
        p = tmp_path / "key.bin"
        save_key(key, p)
        back = load_key(p)
        assert back.plan == key.plan
        assert back.qp == key.qp
        assert back.grid.config == key.grid.config
        assert np.array_equal(back.grid.bbox, key.grid.bbox)
        assert np.array_equal(back.grid.tables, key.grid.tables)
        for (W1, b1), (W2, b2) in zip(back.mlp.layers, key.mlp.layers):
            assert np.array_equal(W1, W2) and np.array_equal(b1, b2)
        assert back.seed == key.seed and back.epochs == key.epochs
        save_key(back, tmp_path / "again.bin")
        assert p.read_bytes() == (tmp_path / "again.bin").read_bytes()

    def test_truncated_fails_checksum(self, tmp_path):
        key = self.make_key()
        p = tmp_path / "key.bin"
        save_key(key, p)
        (tmp_path / "trunc.bin").write_bytes(p.read_bytes()[:-10])
        with pytest.raises(ChecksumError):
            load_key(tmp_path / "trunc.bin")

    def test_bad_magic_and_version(self, tmp_path):
        key = self.make_key()
        p = tmp_path / "key.bin"
        save_key(key, p)
        data = bytearray(p.read_bytes())
        data[0] ^= 0xFF
        (tmp_path / "magic.bin").write_bytes(bytes(data))
        with pytest.raises(KeyVersionError):
            load_key(tmp_path / "magic.bin")
        data = bytearray(p.read_bytes())
        data[4] = 9
        (tmp_path / "ver.bin").write_bytes(bytes(data))
        with pytest.raises(KeyVersionError):
            load_key(tmp_path / "ver.bin")

    def test_key_size_arithmetic(self, tmp_path):
        # default grid (T=2^16, F=4, L=16) tables: 16*65536*4*4 B ~ 16.8 MB
        grid = HashGrid(HashGridConfig(), np.array([[-1.0, -1, -1], [1.0, 1, 1]]))
        key = StegoKey(plan=BitPlan(), qp=QuantParams(), grid=grid, mlp=mlp_init())
        p = tmp_path / "key.bin"
        save_key(key, p)
        tables_bytes = 16 * 65536 * 4 * 4
        mlp_params = 68 * 64 + 64 + 64 * 64 + 64 + 64 + 1
        size = p.stat().st_size
        assert tables_bytes < size < tables_bytes + 4 * mlp_params + 4096
        assert mlp_params == pytest.approx(8641)


def test_mlp_dims_contract():
    assert MLP_DIMS == (68, 64, 64, 1)
    w = mlp_init()
    assert w.dims == MLP_DIMS
