"""Binary model files.

Layout (little-endian)::

    magic "SEGD" | version u32 | variant u32 | depth u32 | channels u32 |
    kernel u32 | classes u32 | record count u32 | file length u64
    record*: name_len u16 | name utf-8 | dtype u8 | rank u8 | dims u32*rank | raw data
    crc32 u32 over every preceding byte

``channels`` in the header is the first-stage width; full schedules and the
remaining hyperparameters travel as ``meta/*`` records.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib

import numpy as np

from .arch import ModelSpec, VariantKind, build_variant

MAGIC = b"SEGD"
VERSION = 1
_HEADER = struct.Struct("<4s7IQ")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}


class ModelFileError(ValueError):
    """Base class for unreadable model files."""


class FormatError(ModelFileError):
    pass


class VersionError(ModelFileError):
    pass


class TruncatedError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


def atomic_write_bytes(path, payload):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _record(name, arr):
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise TypeError(f"cannot store dtype {arr.dtype} for {name}")
    raw = name.encode()
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return struct.pack("<HBB", len(raw), code, arr.ndim) + raw + dims + body


def _records(spec: ModelSpec):
    yield "meta/channels", np.array(spec.channels, dtype=np.int64)
    yield "meta/convs_per_stage", np.array(spec.convs_per_stage, dtype=np.int64)
    yield "meta/in_channels", np.array([spec.in_channels], dtype=np.int64)
    yield "meta/dropout", np.array([spec.dropout], dtype=np.float64)
    for name, t in spec.params.items():
        yield f"param/{name}", t.data
    for name, s in spec.bn.items():
        yield f"bn/{name}/running_mean", s.running_mean
        yield f"bn/{name}/running_var", s.running_var
        yield f"bn/{name}/config", np.array([s.momentum, s.epsilon], dtype=np.float64)


def dumps(spec: ModelSpec, extra=None):
    recs = [_record(n, a) for n, a in _records(spec)]
    for name, arr in (extra or {}).items():
        recs.append(_record(f"extra/{name}", arr))
    payload = b"".join(recs)
    total = _HEADER.size + len(payload) + 4
    header = _HEADER.pack(MAGIC, VERSION, spec.kind.code, spec.depth, spec.channels[0],
                          spec.kernel, spec.num_classes, len(recs), total)
    body = header + payload
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(spec: ModelSpec, path, extra=None):
    """Write ``spec`` (and optional named arrays) atomically to ``path``."""
    atomic_write_bytes(path, dumps(spec, extra))


def _parse(buf):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("not a model file: bad magic bytes")
    if len(buf) < _HEADER.size:
        raise TruncatedError(f"file ends inside the header at byte {len(buf)}")
    _, version, variant, depth, channels, kernel, classes, count, total = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionError(f"unsupported model file version {version} (expected {VERSION})")
    if len(buf) < total:
        raise TruncatedError(f"file is {len(buf)} bytes, header declares {total}")
    if len(buf) > total:
        raise FormatError(f"{len(buf) - total} unexpected trailing bytes")
    end = total - 4
    if zlib.crc32(buf[:end]) != struct.unpack_from("<I", buf, end)[0]:
        raise ChecksumError("checksum mismatch: file is corrupted")
    pos = _HEADER.size
    records = {}
    for i in range(count):
        if pos + 4 > end:
            raise FormatError(f"record {i} starts past the payload at byte {pos}")
        name_len, code, rank = struct.unpack_from("<HBB", buf, pos)
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} at byte {pos + 2}")
        pos += 4
        name = bytes(buf[pos:pos + name_len]).decode()
        pos += name_len
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > end:
            raise FormatError(f"record {name!r} overruns the payload at byte {pos}")
        records[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != end:
        raise FormatError(f"{end - pos} unaccounted bytes after the last record")
    header = dict(variant=variant, depth=depth, channels=channels, kernel=kernel, classes=classes)
    return header, records


def loads(buf):
    """Parse a model file image; returns ``(spec, extra)``."""
    header, rec = _parse(bytes(buf))
    kind = VariantKind.from_code(header["variant"])
    chans = [int(c) for c in rec["meta/channels"]]
    if chans[0] != header["channels"]:
        raise FormatError("channel schedule disagrees with the header")
    dtype = next(a.dtype for n, a in rec.items() if n.startswith("param/")).newbyteorder("=")
    spec = build_variant(
        kind,
        header["classes"],
        depth=header["depth"],
        channels=chans,
        kernel=header["kernel"],
        convs_per_stage=[int(c) for c in rec["meta/convs_per_stage"]],
        in_channels=int(rec["meta/in_channels"][0]),
        dropout=float(rec["meta/dropout"][0]),
        dtype=dtype,
        seed=0,
    )
    for name, t in spec.params.items():
        arr = rec.get(f"param/{name}")
        if arr is None or arr.shape != t.shape:
            raise FormatError(f"parameter {name!r} missing or misshapen")
        t.data[...] = arr
    for name, s in spec.bn.items():
        s.running_mean[...] = rec[f"bn/{name}/running_mean"]
        s.running_var[...] = rec[f"bn/{name}/running_var"]
        s.momentum, s.epsilon = (float(v) for v in rec[f"bn/{name}/config"])
    extra = {n[len("extra/"):]: a for n, a in rec.items() if n.startswith("extra/")}
    return spec, extra


def load_model(path):
    with open(path, "rb") as f:
        return loads(f.read())[0]


def load_checkpoint(path):
    with open(path, "rb") as f:
        return loads(f.read())
