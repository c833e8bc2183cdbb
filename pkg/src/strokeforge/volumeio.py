"""Bit-exact on-disk containers.

Volume files (magic ``SFV1``) hold one array up to 4-d: a plain-text header
(dims, optional channel names, value type) followed by raw little-endian
float64 values in row-major order.

Archive files (magic ``SFC1``) hold any number of named arrays plus a JSON
metadata line; checkpoints are stored in this container.
"""
from __future__ import annotations

import json
from collections import OrderedDict

import numpy as np

VOLUME_MAGIC = "SFV1"
ARCHIVE_MAGIC = "SFC1"
_DTYPE = "f64le"


class VolumeFormatError(Exception):
    """Base class for malformed container files."""


class BadMagicError(VolumeFormatError):
    pass


class HeaderError(VolumeFormatError):
    pass


class TruncatedFileError(VolumeFormatError):
    pass


class PayloadMismatchError(VolumeFormatError):
    pass


def write_volume(path, data, channel_names=()):
    """Write one array; ``channel_names``, when given, must match dims[0]."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 0 or data.ndim > 4:
        raise ValueError(f"volume must be 1-d to 4-d, got {data.ndim}-d")
    channel_names = list(channel_names)
    if channel_names and len(channel_names) != data.shape[0]:
        raise ValueError(
            f"{len(channel_names)} channel names for leading extent {data.shape[0]}")
    for name in channel_names:
        if "," in name or "\n" in name:
            raise ValueError(f"bad channel name {name!r}")
    header = (f"{VOLUME_MAGIC}\n"
              f"dims: {' '.join(str(d) for d in data.shape)}\n"
              f"channels: {','.join(channel_names) if channel_names else '-'}\n"
              f"dtype: {_DTYPE}\n"
              f"end\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def _read_header_lines(fh, magic):
    first = fh.readline().decode("ascii", errors="replace").rstrip("\n")
    if first != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {first!r}")
    fields = {}
    lines = []
    while True:
        raw = fh.readline()
        if not raw:
            raise HeaderError("header ended before 'end' line")
        line = raw.decode("ascii", errors="replace").rstrip("\n")
        if line == "end":
            return fields, lines
        if ": " not in line:
            raise HeaderError(f"malformed header line {line!r}")
        key, value = line.split(": ", 1)
        fields[key] = value
        lines.append((key, value))


def read_volume(path):
    """Returns (data, channel_names); inverse of :func:`write_volume`."""
    with open(path, "rb") as fh:
        fields, _ = _read_header_lines(fh, VOLUME_MAGIC)
        for key in ("dims", "channels", "dtype"):
            if key not in fields:
                raise HeaderError(f"missing header field {key!r}")
        if fields["dtype"] != _DTYPE:
            raise HeaderError(f"unsupported dtype {fields['dtype']!r}")
        try:
            dims = tuple(int(d) for d in fields["dims"].split())
        except ValueError:
            raise HeaderError(f"bad dims line {fields['dims']!r}") from None
        names = [] if fields["channels"] == "-" else fields["channels"].split(",")
        expected = int(np.prod(dims)) * 8
        payload = fh.read()
    if len(payload) < expected:
        raise TruncatedFileError(
            f"payload truncated: expected {expected} bytes, found {len(payload)}")
    if len(payload) > expected:
        raise PayloadMismatchError(
            f"payload exceeds header dims: expected {expected} bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return data, names


def write_archive(path, named_arrays, meta=None):
    """Write named float64 arrays with a JSON metadata line, bit-exactly."""
    named_arrays = OrderedDict(named_arrays)
    head = [ARCHIVE_MAGIC, "meta: " + json.dumps(meta if meta is not None else {})]
    for name, arr in named_arrays.items():
        if " " in name or "\n" in name:
            raise ValueError(f"bad array name {name!r}")
        arr = np.asarray(arr, dtype=np.float64)
        head.append(f"array: {name} {' '.join(str(d) for d in arr.shape)}")
    head.append(f"dtype: {_DTYPE}")
    head.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        for arr in named_arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_archive(path):
    """Returns (meta, OrderedDict name -> array)."""
    with open(path, "rb") as fh:
        fields, lines = _read_header_lines(fh, ARCHIVE_MAGIC)
        if "meta" not in fields:
            raise HeaderError("missing meta line")
        meta = json.loads(fields["meta"])
        entries = []
        for key, value in lines:
            if key != "array":
                continue
            parts = value.split(" ")
            name, dims = parts[0], tuple(int(d) for d in parts[1:])
            entries.append((name, dims))
        payload = fh.read()
    expected = sum(int(np.prod(d)) * 8 for _, d in entries)
    if len(payload) < expected:
        raise TruncatedFileError(
            f"payload truncated: expected {expected} bytes, found {len(payload)}")
    if len(payload) > expected:
        raise PayloadMismatchError(
            f"payload exceeds header: expected {expected} bytes, found {len(payload)}")
    out = OrderedDict()
    offset = 0
    for name, dims in entries:
        nbytes = int(np.prod(dims)) * 8
        out[name] = (np.frombuffer(payload[offset:offset + nbytes], dtype="<f8")
                     .reshape(dims).copy())
        offset += nbytes
    return meta, out
