import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatstego.errors import (
    MalformedHeaderError,
    NonFiniteValueError,
    TruncatedPayloadError,
)
from splatstego.gaussians import DualCloud, CloudGeometry
from splatstego.ply_io import (
    BYTES_PER_VERTEX,
    N_PROPERTIES,
    _header_bytes,
    load_dual,
    load_ply,
    save_dual,
    save_ply,
)

from conftest import random_cloud


def test_property_count_is_vanilla_schema():
    assert N_PROPERTIES == 62  # 3+3+3+45+1+3+4


def test_save_load_field_exact(tmp_path, small_cloud):
    p = tmp_path / "c.ply"
    save_ply(small_cloud, p)
    back = load_ply(p)
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh"):
        assert np.array_equal(getattr(back, name), getattr(small_cloud, name))


def test_save_deterministic(tmp_path, small_cloud):
    p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
    save_ply(small_cloud, p1)
    save_ply(small_cloud, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_save_byte_identical(tmp_path, small_cloud):
    p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
    save_ply(small_cloud, p1)
    save_ply(load_ply(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_payload_size_formula(tmp_path):
    cloud = random_cloud(n=100, seed=3)
    p = tmp_path / "c.ply"
    save_ply(cloud, p)
    data = p.read_bytes()
    header = _header_bytes(100)
    assert data[: len(header)] == header
    assert len(data) - len(header) == 100 * 62 * 4 == 24800


def test_single_vertex_record_is_248_bytes():
    assert BYTES_PER_VERTEX == 248


def test_truncated_payload(tmp_path, small_cloud):
    p = tmp_path / "c.ply"
    save_ply(small_cloud, p)
    data = p.read_bytes()
    (tmp_path / "short.ply").write_bytes(data[:-1])
    with pytest.raises(TruncatedPayloadError):
        load_ply(tmp_path / "short.ply")
    (tmp_path / "long.ply").write_bytes(data + b"\x00")
    with pytest.raises(TruncatedPayloadError):
        load_ply(tmp_path / "long.ply")


def test_header_permutation_rejected(tmp_path, small_cloud):
    p = tmp_path / "c.ply"
    save_ply(small_cloud, p)
    data = p.read_bytes()
    swapped = data.replace(b"property float x\nproperty float y\n",
                           b"property float y\nproperty float x\n")
    assert swapped != data
    (tmp_path / "swapped.ply").write_bytes(swapped)
    with pytest.raises(MalformedHeaderError):
        load_ply(tmp_path / "swapped.ply")


def test_renamed_property_rejected(tmp_path, small_cloud):
    p = tmp_path / "c.ply"
    save_ply(small_cloud, p)
    data = p.read_bytes().replace(b"property float opacity\n",
                                  b"property float opaque_\n")
    (tmp_path / "renamed.ply").write_bytes(data)
    with pytest.raises(MalformedHeaderError):
        load_ply(tmp_path / "renamed.ply")


def test_nonfinite_payload_reports_index(tmp_path, small_cloud):
    cloud = small_cloud.copy()
    cloud.positions[3, 1] = np.nan
    p = tmp_path / "c.ply"
    save_ply(cloud, p)
    with pytest.raises(NonFiniteValueError, match="3"):
        load_ply(p)


def test_zero_quaternion_rejected(tmp_path, small_cloud):
    cloud = small_cloud.copy()
    cloud.rotations[2] = 0.0
    p = tmp_path / "c.ply"
    save_ply(cloud, p)
    with pytest.raises(NonFiniteValueError):
        load_ply(p)


def test_f_rest_channel_major_layout(tmp_path):
    cloud = random_cloud(n=1, seed=5)
    p = tmp_path / "c.ply"
    save_ply(cloud, p)
    data = p.read_bytes()
    header = _header_bytes(1)
    cols = np.frombuffer(data[len(header):], dtype="<f4")
    # f_rest_[ch*15 + (j-1)] == sh[j, ch]
    for ch in range(3):
        for j in range(1, 16):
            assert cols[9 + ch * 15 + (j - 1)] == cloud.sh[0, j, ch]
    assert np.array_equal(cols[6:9], cloud.sh[0, 0, :])          # f_dc
    assert np.array_equal(cols[3:6], np.zeros(3, np.float32))    # normals zeroed


def test_activated_view_values(small_cloud):
    cloud = small_cloud.copy()
    cloud.opacity_logits[:3] = [0.0, 2.0, -1.0]
    cloud.log_scales[0] = 0.0
    alpha, scale = cloud.activated_view()
    assert alpha[0] == pytest.approx(0.5)
    assert alpha[1] == pytest.approx(0.8807970779778823)
    assert np.all(scale[0] == 1.0)
    assert np.all((alpha > 0) & (alpha < 1)) and np.all(scale > 0)


def test_activated_opacity_monotone():
    cloud = random_cloud(n=64, seed=7)
    logits = np.sort(cloud.opacity_logits)
    cloud.opacity_logits = logits
    alpha = cloud.activated_opacity()
    assert np.all(np.diff(alpha) >= 0)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(min_value=1, max_value=12), seed=st.integers(0, 2 ** 16))
def test_roundtrip_property(tmp_path_factory, n, seed):
    cloud = random_cloud(n=n, seed=seed)
    p = tmp_path_factory.mktemp("ply") / "c.ply"
    save_ply(cloud, p)
    first = p.read_bytes()
    save_ply(load_ply(p), p)
    assert p.read_bytes() == first


def test_dual_cloud_shares_geometry(small_cloud):
    dual = DualCloud(
        geometry=CloudGeometry.of(small_cloud),
        scene_opacity_logits=small_cloud.opacity_logits,
        scene_sh=small_cloud.sh,
        message_opacity_logits=small_cloud.opacity_logits.copy(),
        message_sh=small_cloud.sh.copy(),
    )
    assert dual.scene_cloud().positions is dual.message_cloud().positions


def test_dual_roundtrip(tmp_path, small_cloud):
    dual = DualCloud(
        geometry=CloudGeometry.of(small_cloud),
        scene_opacity_logits=small_cloud.opacity_logits,
        scene_sh=small_cloud.sh,
        message_opacity_logits=small_cloud.opacity_logits + 1,
        message_sh=small_cloud.sh * 0.5,
    )
    p = tmp_path / "dual.bin"
    save_dual(dual, p)
    back = load_dual(p)
    assert np.array_equal(back.geometry.positions, dual.geometry.positions)
    assert np.array_equal(back.message_sh, dual.message_sh)
    assert np.array_equal(back.scene_opacity_logits, dual.scene_opacity_logits)
    save_dual(back, tmp_path / "dual2.bin")
    assert (tmp_path / "dual.bin").read_bytes() == (tmp_path / "dual2.bin").read_bytes()
    bad = bytearray(p.read_bytes())
    bad[-6] ^= 0xFF
    (tmp_path / "bad.bin").write_bytes(bytes(bad))
    with pytest.raises(TruncatedPayloadError):
        load_dual(tmp_path / "bad.bin")
