"""Bit-exact binary PLY I/O for the vanilla 3DGS attribute schema.

The on-disk format is the one emitted by the reference 3DGS exporter:
binary little-endian, 62 float32 properties per vertex in the fixed order
x,y,z, nx,ny,nz, f_dc_0..2, f_rest_0..44, opacity, scale_0..2, rot_0..3.

f_rest is channel-major: all fifteen j=1..15 coefficients of channel 0,
then channel 1, then channel 2, i.e. f_rest[ch*15 + (j-1)] == sh[j, ch].
f_dc holds the three j=0 coefficients. Normals are carried but ignored and
written as zeros. Values are float32; a well-formed asset round-trips
byte-identically because loaded attribute arrays are never rewritten.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import MalformedHeaderError, TruncatedPayloadError
from .gaussians import DualCloud, CloudGeometry, GaussianCloud

PROPERTY_NAMES = (
    ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    + [f"f_rest_{i}" for i in range(45)]
    + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
)
N_PROPERTIES = len(PROPERTY_NAMES)  # 62
BYTES_PER_VERTEX = N_PROPERTIES * 4


def _header_bytes(n: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property float {name}" for name in PROPERTY_NAMES]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _parse_header(data: bytes):
    """Return (vertex_count, payload_offset). Strict against the vanilla schema."""
    end = data.find(b"end_header\n")
    if end < 0:
        raise MalformedHeaderError("no end_header line found")
    offset = end + len(b"end_header\n")
    lines = data[:end].decode("ascii", errors="replace").split("\n")
    # Comment lines are legal PLY and skipped; everything else must match.
    lines = [ln.strip() for ln in lines if ln.strip() and not ln.startswith("comment")]
    if len(lines) != 3 + N_PROPERTIES:
        raise MalformedHeaderError(f"expected {3 + N_PROPERTIES} header lines, got {len(lines)}")
    if lines[0] != "ply":
        raise MalformedHeaderError("missing ply magic line")
    if lines[1] != "format binary_little_endian 1.0":
        raise MalformedHeaderError(f"unsupported format line: {lines[1]!r}")
    parts = lines[2].split()
    if len(parts) != 3 or parts[0] != "element" or parts[1] != "vertex":
        raise MalformedHeaderError(f"expected 'element vertex N', got {lines[2]!r}")
    try:
        n = int(parts[2])
    except ValueError:
        raise MalformedHeaderError(f"bad vertex count {parts[2]!r}") from None
    if n < 1:
        raise MalformedHeaderError(f"vertex count must be >= 1, got {n}")
    for i, name in enumerate(PROPERTY_NAMES):
        if lines[3 + i] != f"property float {name}":
            raise MalformedHeaderError(
                f"property {i}: expected 'property float {name}', got {lines[3 + i]!r}"
            )
    return n, offset


def cloud_from_columns(cols: np.ndarray, sh_degree: int = 3) -> GaussianCloud:
    """Assemble a cloud from an (N, 62) float32 property matrix."""
    n = len(cols)
    sh = np.empty((n, 16, 3), dtype=np.float32)
    sh[:, 0, :] = cols[:, 6:9]
    rest = cols[:, 9:54].reshape(n, 3, 15)  # channel-major on disk
    sh[:, 1:, :] = np.transpose(rest, (0, 2, 1))
    return GaussianCloud(
        positions=cols[:, 0:3],
        rotations=cols[:, 58:62],
        log_scales=cols[:, 55:58],
        opacity_logits=cols[:, 54],
        sh=sh,
        sh_degree=sh_degree,
    )


def cloud_to_columns(cloud: GaussianCloud) -> np.ndarray:
    """Inverse of cloud_from_columns; normals are emitted as zeros."""
    n = len(cloud)
    cols = np.zeros((n, N_PROPERTIES), dtype=np.float32)
    cols[:, 0:3] = cloud.positions
    cols[:, 6:9] = cloud.sh[:, 0, :]
    cols[:, 9:54] = np.transpose(cloud.sh[:, 1:, :], (0, 2, 1)).reshape(n, 45)
    cols[:, 54] = cloud.opacity_logits
    cols[:, 55:58] = cloud.log_scales
    cols[:, 58:62] = cloud.rotations
    return cols


def load_ply(path) -> GaussianCloud:
    """Load a vanilla-schema binary PLY and validate its payload."""
    with open(path, "rb") as f:
        data = f.read()
    n, offset = _parse_header(data)
    expected = n * BYTES_PER_VERTEX
    payload = data[offset:]
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"payload is {len(payload)} bytes, expected {expected} for {n} vertices"
        )
    cols = np.frombuffer(payload, dtype="<f4").reshape(n, N_PROPERTIES)
    return cloud_from_columns(np.ascontiguousarray(cols)).validate()


def save_ply(cloud: GaussianCloud, path) -> None:
    """Write the cloud as a vanilla-schema binary PLY (deterministic bytes)."""
    cols = cloud_to_columns(cloud)
    with open(path, "wb") as f:
        f.write(_header_bytes(len(cloud)))
        f.write(cols.astype("<f4").tobytes())


# --- internal DualCloud container (train-pair artifact) ---

_DUAL_MAGIC = b"SNSD"
_DUAL_VERSION = 1


def save_dual(dual: DualCloud, path) -> None:
    n = len(dual)
    body = struct.pack("<II", n, dual.sh_degree)
    for a in (
        dual.geometry.positions,
        dual.geometry.rotations,
        dual.geometry.log_scales,
        dual.scene_opacity_logits,
        dual.scene_sh,
        dual.message_opacity_logits,
        dual.message_sh,
    ):
        body += a.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_DUAL_MAGIC)
        f.write(struct.pack("<I", _DUAL_VERSION))
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def load_dual(path) -> DualCloud:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:4] != _DUAL_MAGIC:
        raise MalformedHeaderError("not a dual-cloud artifact")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _DUAL_VERSION:
        raise MalformedHeaderError(f"unsupported dual-cloud version {version}")
    body, (crc,) = data[8:-4], struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(body) != crc:
        raise TruncatedPayloadError("dual-cloud artifact failed its CRC check")
    n, sh_degree = struct.unpack_from("<II", body, 0)
    counts = [n * 3, n * 4, n * 3, n, n * 48, n, n * 48]
    need = 8 + 4 * sum(counts)
    if len(body) != need:
        raise TruncatedPayloadError(f"dual-cloud body is {len(body)} bytes, expected {need}")
    arrays, pos = [], 8
    for c in counts:
        arrays.append(np.frombuffer(body, dtype="<f4", count=c, offset=pos).copy())
        pos += 4 * c
    geometry = CloudGeometry(
        positions=arrays[0].reshape(n, 3),
        rotations=arrays[1].reshape(n, 4),
        log_scales=arrays[2].reshape(n, 3),
    )
    return DualCloud(
        geometry=geometry,
        scene_opacity_logits=arrays[3],
        scene_sh=arrays[4].reshape(n, 16, 3),
        message_opacity_logits=arrays[5],
        message_sh=arrays[6].reshape(n, 16, 3),
        sh_degree=sh_degree,
    )
