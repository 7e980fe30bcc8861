"""Binary containers (GVOL, GSTK, GGAU) and JSON side files.

Every binary file is::

    4-byte magic | uint32 version | uint64 header length | JSON header | payload

with little-endian integers and a little-endian float32 payload.  Readers
validate everything they touch and raise a :class:`FormatError` subclass
(each with its own ``code``) on malformed input; nothing else escapes.
All writers go through a temporary file and an atomic rename.
"""

from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from .acquisition import SliceStack, Stack
from .gaussians import GaussianSet
from .rigid import RigidTransform
from .volume import GridSpec, VoxelVolume

VERSION = 1
ENCODING = "float32-le"
PREAMBLE = struct.Struct("<4sIQ")
MAX_HEADER = 1 << 24
MAX_ELEMENTS = 1 << 31


class FormatError(Exception):
    code = "format-error"

    def __init__(self, message: str, path=None):
        self.path = None if path is None else str(path)
        super().__init__(f"{self.path}: {message}" if self.path else message)


class BadMagicError(FormatError):
    code = "bad-magic"


class UnsupportedVersionError(FormatError):
    code = "unsupported-version"


class TruncatedError(FormatError):
    code = "truncated"


class SizeMismatchError(FormatError):
    code = "size-mismatch"


class UnsupportedEncodingError(FormatError):
    code = "unsupported-encoding"


class UnknownKeyError(FormatError):
    code = "unknown-key"


class ValidationError(FormatError):
    code = "validation"

    def __init__(self, field: str, message: str, path=None):
        self.field = field
        super().__init__(f"{field}: {message}", path)


# -- low level ---------------------------------------------------------------

def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _pack(magic: bytes, header: dict, payload: np.ndarray) -> bytes:
    body = np.ascontiguousarray(payload, dtype="<f4").tobytes()
    header = dict(header, encoding=ENCODING, payload_bytes=len(body))
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return PREAMBLE.pack(magic, VERSION, len(hb)) + hb + body


def _unpack(raw: bytes, magic: bytes, path=None):
    if len(raw) < PREAMBLE.size:
        raise TruncatedError("file shorter than the fixed preamble", path)
    m, version, hlen = PREAMBLE.unpack_from(raw)
    if m != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {m!r}", path)
    if version != VERSION:
        raise UnsupportedVersionError(f"version {version} is not supported (expected {VERSION})", path)
    if hlen > MAX_HEADER:
        raise ValidationError("header_length", f"{hlen} bytes is implausibly large", path)
    if len(raw) < PREAMBLE.size + hlen:
        raise TruncatedError("file ends inside the header", path)
    try:
        header = json.loads(raw[PREAMBLE.size:PREAMBLE.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ValidationError("header", f"not valid JSON ({exc.__class__.__name__})", path) from None
    if not isinstance(header, dict):
        raise ValidationError("header", "must be a JSON object", path)
    enc = header.get("encoding")
    if enc != ENCODING:
        raise UnsupportedEncodingError(f"payload encoding {enc!r} is not supported "
                                       f"(only {ENCODING!r})", path)
    payload = raw[PREAMBLE.size + hlen:]
    declared = header.get("payload_bytes")
    if not _is_int(declared) or declared < 0:
        raise ValidationError("payload_bytes", "must be a non-negative integer", path)
    if len(payload) != declared:
        raise SizeMismatchError(f"header declares {declared} payload bytes, file holds {len(payload)}",
                                path)
    if declared % 4:
        raise SizeMismatchError("payload is not a whole number of float32 values", path)
    return header, np.frombuffer(payload, dtype="<f4")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def _check_keys(d: dict, allowed, where: str, path) -> None:
    extra = set(d) - set(allowed)
    if extra:
        raise UnknownKeyError(f"unknown key(s) {sorted(extra)} in {where}", path)


def _field(d: dict, key: str, kind: str, where: str, path, length=None):
    name = f"{where}.{key}" if where else key
    if key not in d:
        raise ValidationError(name, "missing", path)
    v = d[key]
    ok = {
        "int": lambda x: _is_int(x),
        "num": lambda x: _is_num(x),
        "str": lambda x: isinstance(x, str),
        "dict": lambda x: isinstance(x, dict),
        "nums": lambda x: isinstance(x, list) and all(_is_num(e) for e in x),
        "ints": lambda x: isinstance(x, list) and all(_is_int(e) for e in x),
        "list": lambda x: isinstance(x, list),
    }[kind](v)
    if not ok:
        raise ValidationError(name, f"expected {kind}", path)
    if length is not None and len(v) != length:
        raise ValidationError(name, f"expected {length} entries", path)
    return v


def _json_safe(obj):
    """Round-trip check for metadata: must be plain JSON."""
    try:
        json.dumps(obj)
    except (TypeError, ValueError):
        raise ValidationError("meta", "metadata must be JSON-serialisable") from None
    return obj


# -- GVOL --------------------------------------------------------------------

_VOL_KEYS = {"origin", "spacing", "dims", "meta", "encoding", "payload_bytes"}


def encode_volume(vol: VoxelVolume) -> bytes:
    header = {"origin": list(vol.grid.origin), "spacing": list(vol.grid.spacing),
              "dims": list(vol.grid.dims), "meta": _json_safe(dict(vol.meta))}
    return _pack(b"GVOL", header, np.asarray(vol.data).ravel())


def decode_volume(raw: bytes, path=None) -> VoxelVolume:
    header, payload = _unpack(raw, b"GVOL", path)
    _check_keys(header, _VOL_KEYS, "GVOL header", path)
    origin = _field(header, "origin", "nums", "", path, 3)
    spacing = _field(header, "spacing", "nums", "", path, 3)
    dims = _field(header, "dims", "ints", "", path, 3)
    meta = _field(header, "meta", "dict", "", path)
    for k, s in enumerate(spacing):
        if not s > 0:
            raise ValidationError(f"spacing[{k}]", "must be positive", path)
    for k, d in enumerate(dims):
        if d < 1:
            raise ValidationError(f"dims[{k}]", "must be >= 1", path)
    n = int(np.prod(dims, dtype=object))
    if n > MAX_ELEMENTS or n != payload.size:
        raise SizeMismatchError(f"dims {dims} need {n} voxels, payload holds {payload.size}", path)
    data = payload.reshape(dims).astype(np.float32)
    return VoxelVolume(data, GridSpec(origin, spacing, dims), meta)


def write_volume(path, vol: VoxelVolume) -> None:
    _atomic_write(path, encode_volume(vol))


def read_volume(path) -> VoxelVolume:
    return decode_volume(Path(path).read_bytes(), path)


# -- GGAU --------------------------------------------------------------------

_GAU_KEYS = {"count", "layout", "meta", "encoding", "payload_bytes"}
GAU_LAYOUT = ["center_x", "center_y", "center_z", "q_w", "q_x", "q_y", "q_z",
              "log_scale_0", "log_scale_1", "log_scale_2", "intensity"]


def encode_gaussians(gset: GaussianSet, meta=None) -> bytes:
    rows = np.hstack([gset.centers, gset.rotations, gset.log_scales, gset.intensities[:, None]])
    header = {"count": gset.count, "layout": GAU_LAYOUT, "meta": _json_safe(dict(meta or {}))}
    return _pack(b"GGAU", header, rows)


def decode_gaussians(raw: bytes, path=None) -> GaussianSet:
    header, payload = _unpack(raw, b"GGAU", path)
    _check_keys(header, _GAU_KEYS, "GGAU header", path)
    count = _field(header, "count", "int", "", path)
    layout = _field(header, "layout", "list", "", path)
    _field(header, "meta", "dict", "", path)
    if layout != GAU_LAYOUT:
        raise ValidationError("layout", "unsupported column layout", path)
    if count < 0:
        raise ValidationError("count", "must be >= 0", path)
    if count * len(GAU_LAYOUT) != payload.size:
        raise SizeMismatchError(f"count {count} needs {count * len(GAU_LAYOUT)} values, "
                                f"payload holds {payload.size}", path)
    with np.errstate(invalid="ignore"):  # signalling NaNs are rejected just below
        rows = payload.reshape(count, len(GAU_LAYOUT)).astype(np.float64)
    q = rows[:, 3:7]
    if count and (not np.all(np.isfinite(rows)) or np.any(np.linalg.norm(q, axis=1) == 0)):
        raise ValidationError("payload", "non-finite values or zero quaternions", path)
    return GaussianSet(rows[:, 0:3], q, rows[:, 7:10], rows[:, 10])


def write_gaussians(path, gset: GaussianSet, meta=None) -> None:
    _atomic_write(path, encode_gaussians(gset, meta))


def read_gaussians(path) -> GaussianSet:
    return decode_gaussians(Path(path).read_bytes(), path)


# -- GSTK --------------------------------------------------------------------

_STK_KEYS = {"stacks", "meta", "encoding", "payload_bytes"}
_STK_ENTRY = {"name", "orientation", "center", "in_plane_spacing", "rows", "cols",
              "slice_thickness", "slice_gap", "n_slices"}


def encode_stacks(stacks: SliceStack) -> bytes:
    entries = []
    for st in stacks.stacks:
        entries.append({"name": st.name, "orientation": [float(v) for v in st.orientation],
                        "center": [float(v) for v in st.center],
                        "in_plane_spacing": [float(v) for v in st.in_plane_spacing],
                        "rows": st.rows, "cols": st.cols, "slice_thickness": st.slice_thickness,
                        "slice_gap": st.slice_gap, "n_slices": st.n_slices})
    payload = np.concatenate([st.slices.ravel() for st in stacks.stacks])
    return _pack(b"GSTK", {"stacks": entries, "meta": _json_safe(dict(stacks.meta))}, payload)


def decode_stacks(raw: bytes, path=None) -> SliceStack:
    header, payload = _unpack(raw, b"GSTK", path)
    _check_keys(header, _STK_KEYS, "GSTK header", path)
    entries = _field(header, "stacks", "list", "", path)
    meta = _field(header, "meta", "dict", "", path)
    if not entries:
        raise ValidationError("stacks", "at least one stack is required", path)
    stacks, pos = [], 0
    for i, e in enumerate(entries):
        where = f"stacks[{i}]"
        if not isinstance(e, dict):
            raise ValidationError(where, "expected an object", path)
        _check_keys(e, _STK_ENTRY, where, path)
        name = _field(e, "name", "str", where, path)
        q = _field(e, "orientation", "nums", where, path, 4)
        c = _field(e, "center", "nums", where, path, 3)
        sp = _field(e, "in_plane_spacing", "nums", where, path, 2)
        rows = _field(e, "rows", "int", where, path)
        cols = _field(e, "cols", "int", where, path)
        th = _field(e, "slice_thickness", "num", where, path)
        gap = _field(e, "slice_gap", "num", where, path)
        n = _field(e, "n_slices", "int", where, path)
        if rows < 1 or cols < 1 or n < 1:
            raise ValidationError(f"{where}.rows", "rows, cols and n_slices must be >= 1", path)
        if not (sp[0] > 0 and sp[1] > 0):
            raise ValidationError(f"{where}.in_plane_spacing", "must be positive", path)
        if not th > 0:
            raise ValidationError(f"{where}.slice_thickness", "must be positive", path)
        if not gap > 0:
            raise ValidationError(f"{where}.slice_gap", "must be positive", path)
        if not math.isfinite(math.hypot(*q)) or math.hypot(*q) == 0:
            raise ValidationError(f"{where}.orientation", "zero quaternion", path)
        size = n * rows * cols
        if size > MAX_ELEMENTS or pos + size > payload.size:
            raise SizeMismatchError(f"{where} needs {size} pixels beyond offset {pos}, payload "
                                    f"holds {payload.size}", path)
        px = payload[pos:pos + size].reshape(n, rows, cols).astype(np.float32)
        pos += size
        try:
            # NaN pixels are data, not a format error; keep the cast quiet
            with np.errstate(invalid="ignore"):
                stacks.append(Stack(np.asarray(q, dtype=np.float64), np.asarray(c, dtype=np.float64),
                                    tuple(sp), rows, cols, float(th), float(gap), px, name=name))
        except ValueError as exc:
            raise ValidationError(where, str(exc), path) from None
    if pos != payload.size:
        raise SizeMismatchError(f"payload holds {payload.size - pos} unclaimed values", path)
    return SliceStack(stacks, meta)


def write_stacks(path, stacks: SliceStack) -> None:
    _atomic_write(path, encode_stacks(stacks))


def read_stacks(path) -> SliceStack:
    return decode_stacks(Path(path).read_bytes(), path)


# -- JSON side files --------------------------------------------------------------

def _write_json(path, obj) -> None:
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ValidationError("file", f"not valid JSON ({exc.__class__.__name__})", path) from None


def transforms_to_json(transforms) -> dict:
    return {"version": VERSION, "kind": "slice-transforms",
            "stacks": [[{"rotation": [float(v) for v in t.rotation],
                         "translation": [float(v) for v in t.translation]} for t in row]
                       for row in transforms]}


def transforms_from_json(obj, path=None) -> list:
    if not isinstance(obj, dict):
        raise ValidationError("file", "expected an object", path)
    _check_keys(obj, {"version", "kind", "stacks"}, "transform sidecar", path)
    if obj.get("version") != VERSION:
        raise UnsupportedVersionError(f"transform sidecar version {obj.get('version')!r}", path)
    if obj.get("kind") != "slice-transforms":
        raise ValidationError("kind", "expected 'slice-transforms'", path)
    rows = _field(obj, "stacks", "list", "", path)
    out = []
    for i, row in enumerate(rows):
        if not isinstance(row, list):
            raise ValidationError(f"stacks[{i}]", "expected a list", path)
        cur = []
        for k, t in enumerate(row):
            where = f"stacks[{i}][{k}]"
            if not isinstance(t, dict):
                raise ValidationError(where, "expected an object", path)
            _check_keys(t, {"rotation", "translation"}, where, path)
            q = _field(t, "rotation", "nums", where, path, 4)
            tr = _field(t, "translation", "nums", where, path, 3)
            if math.hypot(*q) == 0:
                raise ValidationError(f"{where}.rotation", "zero quaternion", path)
            cur.append(RigidTransform(np.asarray(q, dtype=np.float64), np.asarray(tr, dtype=np.float64)))
        out.append(cur)
    return out


def write_transforms(path, transforms) -> None:
    _write_json(path, transforms_to_json(transforms))


def read_transforms(path) -> list:
    return transforms_from_json(_read_json(path), path)


MANIFEST_FILES = ("stacks", "truth_volume", "truth_gaussians", "truth_transforms")


def write_manifest(path, case_id: str, seeds: dict, protocol: dict, files: dict) -> None:
    _write_json(path, {"version": VERSION, "case_id": case_id, "seeds": seeds,
                       "protocol": protocol, "files": files})


def read_manifest(path) -> dict:
    """Load a case manifest; file references are resolved relative to it."""
    obj = _read_json(path)
    if not isinstance(obj, dict):
        raise ValidationError("file", "expected an object", path)
    _check_keys(obj, {"version", "case_id", "seeds", "protocol", "files"}, "manifest", path)
    if obj.get("version") != VERSION:
        raise UnsupportedVersionError(f"manifest version {obj.get('version')!r}", path)
    _field(obj, "case_id", "str", "", path)
    _field(obj, "seeds", "dict", "", path)
    _field(obj, "protocol", "dict", "", path)
    files = _field(obj, "files", "dict", "", path)
    _check_keys(files, MANIFEST_FILES, "manifest.files", path)
    base = Path(path).parent
    resolved = {}
    for k, v in files.items():
        if not isinstance(v, str):
            raise ValidationError(f"files.{k}", "expected a file name", path)
        p = base / v
        if not p.exists():
            raise FileNotFoundError(f"{p} (referenced by {path})")
        resolved[k] = p
    if "stacks" not in resolved:
        raise ValidationError("files.stacks", "missing", path)
    obj["paths"] = resolved
    return obj


def write_report(path, report: dict) -> None:
    _write_json(path, report)


def read_run_log(path) -> list:
    out = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        try:
            out.append(json.loads(line))
        except ValueError:
            raise ValidationError(f"line {i + 1}", "not valid JSON", path) from None
    return out
