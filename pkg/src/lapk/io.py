"""Repo-wide on-disk formats.

All formats start with a single ASCII header line and continue with
little-endian binary payloads in x-fastest voxel order:

* ``LAPK-VOL v1 nx=<int> ny=<int> nz=<int> kind=<real|complex>`` --
  float32 per voxel (complex: interleaved re,im).
* ``LAPK-FLOW v1 nx=<int> ny=<int> nz=<int>`` -- float32 (ux,uy,uz) triples,
  then one reliability byte per voxel.
* ``LAPK-MASK v1 nx=<int> ny=<int> nz=<int> kind=<str> rtarget=<float>
  seed=<int>`` -- bits packed MSB-first.
"""

from __future__ import annotations

import numpy as np

from .core import FlowField
from .errors import FormatError

__all__ = [
    "write_volume",
    "read_volume",
    "write_flow",
    "read_flow",
    "write_mask",
    "read_mask",
]

_LE_F32 = np.dtype("<f4")


def _parse_header(line: bytes, magic: str) -> dict:
    try:
        text = line.decode("ascii").strip()
    except UnicodeDecodeError as exc:
        raise FormatError(f"undecodable header: {exc}") from exc
    parts = text.split()
    if parts[:2] != magic.split():
        raise FormatError(f"expected '{magic}' header, got '{text}'")
    fields = {}
    for tok in parts[2:]:
        if "=" not in tok:
            raise FormatError(f"malformed header token '{tok}'")
        key, val = tok.split("=", 1)
        fields[key] = val
    return fields


def _read_exact(f, count: int) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise FormatError(f"truncated payload: wanted {count} bytes, got {len(buf)}")
    return buf


def write_volume(path, values: np.ndarray) -> None:
    """Write a real or complex 3D field as LAPK-VOL v1."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise ValueError("expected a 3D array")
    kind = "complex" if np.iscomplexobj(values) else "real"
    nx, ny, nz = values.shape
    with open(path, "wb") as f:
        f.write(f"LAPK-VOL v1 nx={nx} ny={ny} nz={nz} kind={kind}\n".encode("ascii"))
        flat = values.ravel(order="F")
        if kind == "complex":
            inter = np.empty(2 * flat.size, dtype=_LE_F32)
            inter[0::2] = flat.real
            inter[1::2] = flat.imag
            f.write(inter.tobytes())
        else:
            f.write(flat.astype(_LE_F32).tobytes())


def read_volume(path) -> np.ndarray:
    with open(path, "rb") as f:
        fields = _parse_header(f.readline(), "LAPK-VOL v1")
        nx, ny, nz = int(fields["nx"]), int(fields["ny"]), int(fields["nz"])
        kind = fields["kind"]
        n = nx * ny * nz
        if kind == "real":
            data = np.frombuffer(_read_exact(f, 4 * n), dtype=_LE_F32)
            return data.reshape((nx, ny, nz), order="F").astype(np.float64)
        if kind == "complex":
            inter = np.frombuffer(_read_exact(f, 8 * n), dtype=_LE_F32)
            flat = inter[0::2].astype(np.float64) + 1j * inter[1::2].astype(np.float64)
            return flat.reshape((nx, ny, nz), order="F")
        raise FormatError(f"unknown volume kind '{kind}'")


def write_flow(path, flow: FlowField) -> None:
    """Write a flow field as LAPK-FLOW v1 (vectors then reliability bytes)."""
    nx, ny, nz = flow.dims
    with open(path, "wb") as f:
        f.write(f"LAPK-FLOW v1 nx={nx} ny={ny} nz={nz}\n".encode("ascii"))
        # per-voxel (ux,uy,uz) triples with voxels in x-fastest order
        vecs = flow.vectors.reshape(-1, 3, order="F")
        f.write(vecs.astype(_LE_F32).tobytes())
        rel = flow.reliability.ravel(order="F")
        f.write(rel.astype(np.uint8).tobytes())


def read_flow(path) -> FlowField:
    with open(path, "rb") as f:
        fields = _parse_header(f.readline(), "LAPK-FLOW v1")
        nx, ny, nz = int(fields["nx"]), int(fields["ny"]), int(fields["nz"])
        n = nx * ny * nz
        vec = np.frombuffer(_read_exact(f, 12 * n), dtype=_LE_F32)
        vectors = vec.reshape((n, 3)).reshape((nx, ny, nz, 3), order="F")
        rel = np.frombuffer(_read_exact(f, n), dtype=np.uint8)
        reliability = rel.reshape((nx, ny, nz), order="F").astype(bool)
        return FlowField(vectors.astype(np.float64), reliability)


def write_mask(path, mask) -> None:
    """Write a sampling mask as LAPK-MASK v1 (packed bits)."""
    nx, ny, nz = mask.dims
    header = (
        f"LAPK-MASK v1 nx={nx} ny={ny} nz={nz} kind={mask.kind} "
        f"rtarget={mask.r_target:g} seed={mask.seed}\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.packbits(mask.kept.ravel(order="F")).tobytes())


def read_mask(path):
    from .sampling import SamplingMask

    with open(path, "rb") as f:
        fields = _parse_header(f.readline(), "LAPK-MASK v1")
        nx, ny, nz = int(fields["nx"]), int(fields["ny"]), int(fields["nz"])
        n = nx * ny * nz
        nbytes = (n + 7) // 8
        bits = np.unpackbits(
            np.frombuffer(_read_exact(f, nbytes), dtype=np.uint8), count=n
        )
        kept = bits.astype(bool).reshape((nx, ny, nz), order="F")
        return SamplingMask(
            dims=(nx, ny, nz),
            kept=kept,
            r_target=float(fields["rtarget"]),
            kind=fields["kind"],
            seed=int(fields["seed"]),
        )
