"""Splat file formats: standard 3DGS PLY (degree-0 SH) and a native dump.

PLY stores raw (pre-activation) values: opacity logits, log-scales and
DC spherical-harmonic coefficients. Loading activates them into the
canonical representation; saving inverts the activations. Where a raw
float32 exists whose activation rounds back to the exact stored value,
the saver picks it, so resaving a loaded PLY reproduces the same bytes
(save o load is idempotent). PLY cannot round-trip arbitrary canonical
states bit-exactly - its raw grid is coarser than the activated one in
parts of the range - so lossless persistence uses the native format.

Native layout (little-endian): magic b"GSNA", version u32, asset id
(u16 length + UTF-8), count u64, then count x 14 float32 rows in
canonical channel order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError
from .splats import CH_COLOR, CH_LOGSCALE, CH_OPACITY, CH_POS, CH_QUAT, N_CHANNELS, SplatSet

SH_C0 = 0.28209479177387814
NATIVE_MAGIC = b"GSNA"
NATIVE_VERSION = 1

PLY_FIELDS = ("x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2",
              "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")
_REQUIRED = ("x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3",
             "scale_0", "scale_1", "scale_2", "f_dc_0", "f_dc_1", "f_dc_2", "opacity")


def _logistic64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _exact_inverse(target32: np.ndarray, guess32: np.ndarray, forward) -> np.ndarray:
    """Nudge guess by ulps so float32(forward(guess)) == target32 where possible."""
    best = guess32.astype(np.float32).copy()
    ok = forward(best).astype(np.float32) == target32
    up = best.copy()
    down = best.copy()
    for _ in range(2):
        up = np.nextafter(up, np.float32(np.inf))
        down = np.nextafter(down, np.float32(-np.inf))
        for cand in (up, down):
            hit = ~ok & (forward(cand).astype(np.float32) == target32)
            best[hit] = cand[hit]
            ok |= hit
    return best


def _opacity_to_logit(o: np.ndarray) -> np.ndarray:
    o = np.asarray(o, dtype=np.float32)
    safe = np.clip(o.astype(np.float64), 1e-38, 1.0 - 1e-16)
    guess = np.log(safe / (1.0 - safe)).astype(np.float32)
    guess = np.where(o <= 0.0, np.float32(-104.0), guess)
    guess = np.where(o >= 1.0, np.float32(18.0), guess)
    return _exact_inverse(o, guess, _logistic64)


def _color_to_dc(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float32)
    guess = ((c.astype(np.float64) - 0.5) / SH_C0).astype(np.float32)
    fwd = lambda dc: np.clip(dc.astype(np.float64) * SH_C0 + 0.5, 0.0, 1.0)
    return _exact_inverse(c, guess, fwd)


def _check_finite(name: str, arr: np.ndarray) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = int(np.argwhere(bad)[0][0])
        raise ParseError(f"non-finite value in field {name!r} at element {idx}")


# -- standard 3DGS PLY ----------------------------------------------------------


def load_ply(path) -> SplatSet:
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a PLY file (missing header)")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]

    n_vertex = None
    fields: list[str] = []
    fmt_ok = False
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] != "binary_little_endian":
                raise ParseError(f"{path}: unsupported PLY format {parts[1]!r}")
            fmt_ok = True
        elif parts[0] == "element" and parts[1] == "vertex":
            n_vertex = int(parts[2])
        elif parts[0] == "property":
            if parts[1] != "float":
                raise ParseError(f"{path}: unsupported property type {parts[1]!r} for {parts[-1]!r}")
            fields.append(parts[2])
    if not fmt_ok or n_vertex is None:
        raise ParseError(f"{path}: malformed PLY header")
    for need in _REQUIRED:
        if need not in fields:
            raise ParseError(f"{path}: missing required field {need!r}")

    dtype = np.dtype([(f, "<f4") for f in fields])
    if len(body) < n_vertex * dtype.itemsize:
        raise ParseError(f"{path}: body truncated ({len(body)} bytes for {n_vertex} vertices)")
    rec = np.frombuffer(body[: n_vertex * dtype.itemsize], dtype=dtype)

    def col(*names):
        return np.stack([rec[n] for n in names], axis=1)

    pos = col("x", "y", "z")
    quat = col("rot_0", "rot_1", "rot_2", "rot_3")
    log_scale = col("scale_0", "scale_1", "scale_2")
    dc = col("f_dc_0", "f_dc_1", "f_dc_2")
    op = rec["opacity"]
    for name, arr in (("position", pos), ("rot", quat), ("scale", log_scale),
                      ("f_dc", dc), ("opacity", op)):
        _check_finite(name, arr)

    color = np.clip(dc.astype(np.float64) * SH_C0 + 0.5, 0.0, 1.0).astype(np.float32)
    opacity = _logistic64(op).astype(np.float32)
    norm = np.linalg.norm(quat.astype(np.float64), axis=1, keepdims=True)
    if (norm == 0).any():
        idx = int(np.argwhere(norm[:, 0] == 0)[0][0])
        raise ParseError(f"{path}: zero-norm quaternion in field 'rot' at element {idx}")
    # Renormalize only when needed so reloading our own output keeps bits.
    needs = np.abs(norm - 1.0)[:, 0] > 1e-6
    quat = quat.copy()
    quat[needs] = (quat[needs].astype(np.float64) / norm[needs]).astype(np.float32)

    data = np.concatenate([pos, quat, log_scale, color, opacity[:, None]], axis=1)
    return SplatSet(data.astype(np.float32), asset_id=path.stem)


def save_ply(s: SplatSet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(s)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {f}" for f in PLY_FIELDS]
    header.append("end_header")
    rec = np.zeros(n, dtype=np.dtype([(f, "<f4") for f in PLY_FIELDS]))
    pos = s.data[:, CH_POS]
    rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
    quat = s.data[:, CH_QUAT]
    for i in range(4):
        rec[f"rot_{i}"] = quat[:, i]
    ls = s.data[:, CH_LOGSCALE]
    for i in range(3):
        rec[f"scale_{i}"] = ls[:, i]
    dc = _color_to_dc(s.data[:, CH_COLOR])
    for i in range(3):
        rec[f"f_dc_{i}"] = dc[:, i]
    rec["opacity"] = _opacity_to_logit(s.data[:, 13])
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


# -- native format ----------------------------------------------------------------


def load_native(path) -> SplatSet:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != NATIVE_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != NATIVE_VERSION:
        raise ParseError(f"{path}: unsupported native version {version}")
    (id_len,) = struct.unpack_from("<H", raw, 8)
    asset_id = raw[10: 10 + id_len].decode("utf-8")
    off = 10 + id_len
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    expected = n * N_CHANNELS * 4
    if len(raw) - off < expected:
        raise ParseError(f"{path}: truncated body ({len(raw) - off} bytes for {n} splats)")
    data = np.frombuffer(raw[off: off + expected], dtype="<f4").reshape(n, N_CHANNELS).copy()
    _check_finite("splat", data)
    return SplatSet(data, asset_id=asset_id)


def save_native(s: SplatSet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    idb = s.asset_id.encode("utf-8")
    with open(path, "wb") as f:
        f.write(NATIVE_MAGIC)
        f.write(struct.pack("<I", NATIVE_VERSION))
        f.write(struct.pack("<H", len(idb)))
        f.write(idb)
        f.write(struct.pack("<Q", len(s)))
        f.write(np.ascontiguousarray(s.data, dtype="<f4").tobytes())


# -- front door ------------------------------------------------------------------

FORMATS = ("standard-3dgs-ply", "native")


def load_asset(path, fmt: str | None = None) -> SplatSet:
    """Load a splat asset; format sniffed from the magic bytes when omitted."""
    path = Path(path)
    if fmt is None:
        head = path.open("rb").read(4)
        fmt = "native" if head == NATIVE_MAGIC else "standard-3dgs-ply"
    if fmt == "native":
        return load_native(path)
    if fmt == "standard-3dgs-ply":
        return load_ply(path)
    raise ParseError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def save_asset(s: SplatSet, path, fmt: str | None = None) -> None:
    path = Path(path)
    if fmt is None:
        fmt = "standard-3dgs-ply" if path.suffix.lower() == ".ply" else "native"
    if fmt == "native":
        save_native(s, path)
    elif fmt == "standard-3dgs-ply":
        save_ply(s, path)
    else:
        raise ParseError(f"unknown format {fmt!r}; expected one of {FORMATS}")
