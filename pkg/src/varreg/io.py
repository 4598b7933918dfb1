"""On-disk formats: the VRFIELD1 field container, VRWGHT1 weight files,
binary PGM images and HSV flow renderings.

Everything is little-endian float32 on disk and float64 in memory (PGM
samples follow the netpbm big-endian convention). Writers go through a
temporary file in the target directory followed by a rename, so readers
never observe a half-written file.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .denoise import ConvDenoiserWeights
from .errors import FormatError
from .grid import GridDesc, ScalarField, VectorField

FIELD_MAGIC = b"VRFIELD1"
WEIGHTS_MAGIC = b"VRWGHT1"
MAX_SAMPLES = 1 << 31
_F32 = np.dtype("<f4")


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".",
                               prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise
    except IsADirectoryError as exc:
        raise FormatError(f"{path}: is a directory") from exc


def _fmt_float(x: float) -> str:
    return repr(float(x))


# -- VRFIELD1 ----------------------------------------------------------------------

def encode_field(f: ScalarField | VectorField) -> bytes:
    grid = f.grid
    vals = f.values
    channels = 1 if isinstance(f, ScalarField) else vals.shape[0]
    if not np.all(np.isfinite(vals)):
        raise FormatError("refusing to write non-finite values")
    header = [
        f"rank {grid.rank}",
        "dims " + " ".join(str(d) for d in grid.dims),
        "spacing " + " ".join(_fmt_float(s) for s in grid.spacing),
        f"channels {channels}",
        "dtype f32",
        "end",
    ]
    head = FIELD_MAGIC + b"\n" + "".join(line + "\n" for line in header).encode("ascii")
    return head + np.ascontiguousarray(vals, dtype=_F32).tobytes()


def write_field(path, f: ScalarField | VectorField) -> None:
    atomic_write(path, encode_field(f))


def _expect(line: bytes | None, key: str, what: str) -> list[str]:
    if line is None:
        raise FormatError(f"truncated header: missing {what}")
    try:
        parts = line.decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise FormatError(f"non-ASCII header line for {what}") from exc
    if not parts or parts[0] != key:
        raise FormatError(f"expected '{key}' line, got {line[:40]!r}")
    return parts[1:]


def decode_field(data: bytes) -> ScalarField | VectorField:
    if not data.startswith(FIELD_MAGIC + b"\n"):
        raise FormatError("bad magic: not a VRFIELD1 file")
    pos = len(FIELD_MAGIC) + 1

    def next_line():
        nonlocal pos
        end = data.find(b"\n", pos, pos + 4096)
        if end < 0:
            return None
        line = data[pos:end]
        pos = end + 1
        return line

    try:
        rank_s = _expect(next_line(), "rank", "rank")
        if len(rank_s) != 1 or rank_s[0] not in ("2", "3"):
            raise FormatError(f"rank must be 2 or 3, got {rank_s}")
        rank = int(rank_s[0])
        dims = tuple(int(x) for x in _expect(next_line(), "dims", "dims"))
        spacing = tuple(float(x) for x in _expect(next_line(), "spacing", "spacing"))
        ch = _expect(next_line(), "channels", "channels")
        dtype = _expect(next_line(), "dtype", "dtype")
        if _expect(next_line(), "end", "end") != []:
            raise FormatError("malformed 'end' line")
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed header number: {exc}") from exc
    if len(dims) != rank or len(spacing) != rank:
        raise FormatError("dims/spacing count does not match rank")
    if any(d < 2 for d in dims):
        raise FormatError(f"dims must be >= 2, got {dims}")
    if dtype != ["f32"]:
        raise FormatError(f"unsupported dtype {dtype}")
    if len(ch) != 1:
        raise FormatError("malformed channels line")
    channels = int(ch[0])
    if channels not in (1, rank):
        raise FormatError(f"channels must be 1 or {rank}, got {channels}")
    n = channels
    for d in dims:
        n *= d
        if n > MAX_SAMPLES:
            raise FormatError(f"dimension overflow: {dims} x {channels} samples")
    payload = data[pos:]
    if len(payload) != 4 * n:
        raise FormatError(f"payload holds {len(payload)} bytes, header implies {4 * n}")
    vals = np.frombuffer(payload, dtype=_F32).astype(np.float64)
    if not np.all(np.isfinite(vals)):
        raise FormatError("payload contains non-finite values")
    try:
        grid = GridDesc(dims, spacing)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    if channels == 1:
        return ScalarField(vals.reshape(dims), grid)
    return VectorField(vals.reshape((channels,) + dims), grid)


def read_field(path) -> ScalarField | VectorField:
    return decode_field(_read_bytes(path))


def read_scalar(path) -> ScalarField:
    """Read a scalar image from a VRFIELD1 (any extension) or PGM (``.pgm``) file."""
    if str(path).lower().endswith(".pgm"):
        return read_pgm(path)
    f = read_field(path)
    if not isinstance(f, ScalarField):
        raise FormatError(f"{path}: expected a scalar field")
    return f


def read_vector(path) -> VectorField:
    f = read_field(path)
    if not isinstance(f, VectorField):
        raise FormatError(f"{path}: expected a displacement field")
    return f


def write_scalar(path, f: ScalarField) -> None:
    if str(path).lower().endswith(".pgm"):
        write_pgm(path, f)
    else:
        write_field(path, f)


# -- VRWGHT1 -------------------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a; the hash is inherently sequential, so this walks the bytes."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def encode_weights(tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    lines = [f"count {len(tensors)}"]
    for k, v in (meta or {}).items():
        if any(c.isspace() for c in f"{k}{v}") or not k:
            raise FormatError(f"metadata {k!r}={v!r} must not contain whitespace")
        lines.append(f"meta {k} {v}")
    chunks = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        if not name or any(c.isspace() for c in name):
            raise FormatError(f"bad tensor name {name!r}")
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"tensor {name} has non-finite values")
        lines.append(" ".join(["tensor", name, str(arr.ndim)] + [str(s) for s in arr.shape]))
        chunks.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    lines.append("end")
    payload = b"".join(chunks)
    head = WEIGHTS_MAGIC + b"\n" + "".join(l + "\n" for l in lines).encode("ascii")
    return head + payload + fnv1a64(payload).to_bytes(8, "little")


def decode_weights(data: bytes):
    """Returns ``(tensors, meta)``; tensors keep manifest order."""
    if not data.startswith(WEIGHTS_MAGIC + b"\n"):
        raise FormatError("bad magic: not a VRWGHT1 file")
    end = data.find(b"\nend\n")
    if end < 0:
        raise FormatError("truncated weights manifest")
    try:
        lines = data[len(WEIGHTS_MAGIC) + 1:end].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise FormatError("non-ASCII weights manifest") from exc
    body = data[end + 5:]
    if len(body) < 8:
        raise FormatError("missing checksum")
    payload, check = body[:-8], int.from_bytes(body[-8:], "little")
    if fnv1a64(payload) != check:
        raise FormatError("weights checksum mismatch")
    meta, specs = {}, []
    try:
        head = lines[0].split()
        if head[0] != "count":
            raise FormatError("expected 'count' line")
        count = int(head[1])
        for line in lines[1:]:
            parts = line.split()
            if parts[0] == "meta" and len(parts) == 3:
                meta[parts[1]] = parts[2]
            elif parts[0] == "tensor":
                ndim = int(parts[2])
                shape = tuple(int(s) for s in parts[3:])
                if len(shape) != ndim or any(s < 0 for s in shape):
                    raise FormatError(f"bad shape for tensor {parts[1]}")
                specs.append((parts[1], shape))
            else:
                raise FormatError(f"unexpected manifest line {line!r}")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed weights manifest: {exc}") from exc
    if count != len(specs):
        raise FormatError(f"manifest lists {len(specs)} tensors, count says {count}")
    tensors, pos = {}, 0
    for name, shape in specs:
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 4 * n > len(payload):
            raise FormatError(f"payload too short for tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype=_F32, count=n, offset=pos) \
            .astype(np.float64).reshape(shape)
        pos += 4 * n
    if pos != len(payload):
        raise FormatError("payload longer than the manifest describes")
    return tensors, meta


def write_weights(path, tensors, meta=None) -> None:
    atomic_write(path, encode_weights(tensors, meta))


def read_weights(path):
    return decode_weights(_read_bytes(path))


def save_cascade(path, params, cfg=None) -> None:
    """Store :class:`~varreg.unroll.CascadeParams` plus the settings needed to rerun it."""
    meta = {"kind": "cascade", "sharing": params.sharing,
            "init": "learned" if params.init_net is not None else "none"}
    if cfg is not None:
        meta.update({"s": str(cfg.s), "n_warp": str(cfg.n_warp), "n_iter": str(cfg.n_iter)})
    write_weights(path, params.arrays(), meta)


def load_cascade(path):
    """Inverse of :func:`save_cascade`; returns ``(params, meta)``."""
    from .unroll import CascadeParams

    tensors, meta = read_weights(path)
    if meta.get("kind") != "cascade" or "theta" not in tensors:
        raise FormatError(f"{path}: not a cascade weights file")

    def net(prefix, residual):
        j, ks, bs = 0, [], []
        while f"{prefix}.{j}.weight" in tensors:
            ks.append(tensors[f"{prefix}.{j}.weight"])
            bs.append(tensors[f"{prefix}.{j}.bias"])
            j += 1
        return ConvDenoiserWeights(tuple(ks), tuple(bs), 1.0, residual) if ks else None

    try:
        dens = []
        while True:
            d = net(f"denoiser.{len(dens)}", True)
            if d is None:
                break
            dens.append(d)
        init_net = net("init", False)
        params = CascadeParams(meta.get("sharing", "theta2"), tensors["theta"], tuple(dens),
                               init_net)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: inconsistent cascade weights: {exc}") from exc
    return params, meta


def save_denoiser(path, w: ConvDenoiserWeights) -> None:
    tensors = {}
    for j, (k, b) in enumerate(zip(w.kernels, w.biases)):
        tensors[f"layer.{j}.weight"] = k
        tensors[f"layer.{j}.bias"] = b
    write_weights(path, tensors, {"kind": "denoiser", "residual": str(int(w.residual)),
                                  "residual_scale": _fmt_float(w.residual_scale)})


def load_denoiser(path) -> ConvDenoiserWeights:
    """Read a standalone denoiser, or the first denoiser of a cascade file."""
    tensors, meta = read_weights(path)
    if meta.get("kind") == "cascade":
        prefix, residual, scale = "denoiser.0", True, 1.0
    else:
        prefix = "layer"
        residual = meta.get("residual", "1") == "1"
        scale = float(meta.get("residual_scale", "1.0"))
    ks, bs, j = [], [], 0
    while f"{prefix}.{j}.weight" in tensors:
        ks.append(tensors[f"{prefix}.{j}.weight"])
        bs.append(tensors[f"{prefix}.{j}.bias"])
        j += 1
    if not ks:
        raise FormatError(f"{path}: no denoiser layers found")
    try:
        return ConvDenoiserWeights(tuple(ks), tuple(bs), scale, residual)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -- PGM / PPM ---------------------------------------------------------------------------

def _pnm_header(data: bytes, magic: bytes, n_tokens: int):
    """Parse whitespace-separated header tokens, skipping ``#`` comments.

    Returns the integer tokens and the offset of the first raster byte.
    """
    if data[:2] != magic:
        raise FormatError(f"not a {magic.decode()} file")
    pos, tokens = 2, []
    n = len(data)
    while len(tokens) < n_tokens:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tok = data[start:pos]
        if not tok.isdigit():
            raise FormatError(f"malformed header token {tok[:20]!r}")
        tokens.append(int(tok))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte")
    return tokens, pos + 1


def decode_pgm(data: bytes) -> ScalarField:
    (width, height, maxval), pos = _pnm_header(data, b"P5", 3)
    if maxval not in (255, 65535):
        raise FormatError(f"unsupported maxval {maxval}")
    if width < 2 or height < 2:
        raise FormatError("image must be at least 2x2")
    dtype = np.dtype("u1") if maxval == 255 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    raster = data[pos:]
    if len(raster) != need:
        raise FormatError(f"raster holds {len(raster)} bytes, expected {need}")
    vals = np.frombuffer(raster, dtype=dtype).astype(np.float64) / maxval
    return ScalarField(vals.reshape(height, width))


def read_pgm(path) -> ScalarField:
    return decode_pgm(_read_bytes(path))


def encode_pgm(f: ScalarField, maxval: int = 255) -> bytes:
    if f.grid.rank != 2:
        raise FormatError("PGM holds 2D images only")
    if maxval not in (255, 65535):
        raise FormatError(f"unsupported maxval {maxval}")
    q = np.clip(np.rint(f.values * maxval), 0, maxval)
    dtype = np.dtype("u1") if maxval == 255 else np.dtype(">u2")
    height, width = f.grid.dims
    return f"P5\n{width} {height}\n{maxval}\n".encode("ascii") + q.astype(dtype).tobytes()


def write_pgm(path, f: ScalarField, maxval: int = 255) -> None:
    atomic_write(path, encode_pgm(f, maxval))


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Hue in degrees, saturation and value in [0, 1]; returns ``(..., 3)`` floats."""
    hp = (h % 360.0) / 60.0
    c = v * s
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    sector = np.minimum(hp.astype(np.intp), 5)
    zero = np.zeros_like(c)
    table = [(c, x, zero), (x, c, zero), (zero, c, x), (zero, x, c), (x, zero, c), (c, zero, x)]
    rgb = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(table):
        sel = sector == k
        rgb[sel] = np.stack([r[sel], g[sel], b[sel]], axis=-1)
    return rgb + (v - c)[..., None]


def flow_to_rgb(u: VectorField) -> np.ndarray:
    """HSV rendering as uint8 ``(d0, d1, 3)``: direction is hue, relative length is saturation."""
    if u.grid.rank != 2:
        raise FormatError("flow visualization needs a 2D field")
    ux, uy = u.values
    hue = np.degrees(np.arctan2(uy, ux)) % 360.0
    mag = np.hypot(ux, uy)
    top = mag.max()
    sat = mag / top if top > 0 else np.zeros_like(mag)
    rgb = hsv_to_rgb(hue, sat, np.ones_like(mag))
    return np.clip(np.rint(255.0 * rgb), 0, 255).astype(np.uint8)


def flow_to_hsv_ppm(u: VectorField, path) -> None:
    rgb = flow_to_rgb(u)
    height, width = u.grid.dims
    atomic_write(path, f"P6\n{width} {height}\n255\n".encode("ascii") + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    data = _read_bytes(path)
    (width, height, maxval), pos = _pnm_header(data, b"P6", 3)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    raster = data[pos:]
    if len(raster) != 3 * width * height:
        raise FormatError("truncated PPM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def difference_image(a: ScalarField, b: ScalarField) -> ScalarField:
    """``|a - b|`` rescaled so the largest difference maps to 1."""
    d = np.abs(a.values - b.values)
    top = d.max()
    return ScalarField(d / top if top > 0 else d, a.grid)
