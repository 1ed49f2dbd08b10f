"""Versioned binary container used by checkpoints, datasets and program dumps.

Layout: 8-byte magic, u32 version, u64 header length, JSON header (utf-8),
then the raw array payloads back to back in little-endian order. Writing the
same content twice produces byte-identical files (no timestamps, sorted
header keys), which the reproducibility guarantees depend on.
"""

import json
import struct

import numpy as np

_HEAD = struct.Struct("<8sIQ")

# dtypes allowed in payloads; everything is stored little-endian
_DTYPES = {"int8", "uint8", "int16", "int32", "int64", "float32", "float64"}


class ContainerError(ValueError):
    """Malformed, truncated or unsupported container file."""


def write_container(path, magic, version, meta, arrays):
    """Write a container file.

    ``meta`` is a JSON-serializable dict; ``arrays`` maps names to numpy
    arrays. Array order in the file follows the insertion order of ``arrays``.
    """
    if len(magic) != 8:
        raise ValueError(f"magic must be exactly 8 bytes, got {magic!r}")
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise ContainerError(f"unsupported array dtype {dtype!r} for {name!r}")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "nbytes": len(blob)})
        blobs.append(blob)
    header = {"version": version, "meta": meta, "arrays": entries}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(magic if isinstance(magic, bytes) else magic.encode(), version,
                            len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def read_container(path, magic, max_version):
    """Read a container file, returning (version, meta, arrays).

    Rejects wrong magic and versions above ``max_version`` loudly.
    """
    expected = magic if isinstance(magic, bytes) else magic.encode()
    with open(path, "rb") as fh:
        head = fh.read(_HEAD.size)
        if len(head) < _HEAD.size:
            raise ContainerError(f"{path}: truncated header")
        got_magic, version, header_len = _HEAD.unpack(head)
        if got_magic != expected:
            raise ContainerError(
                f"{path}: bad magic {got_magic!r}, expected {expected!r}")
        if version > max_version:
            raise ContainerError(
                f"{path}: unsupported version {version} (reader supports <= {max_version})")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            blob = fh.read(entry["nbytes"])
            if len(blob) != entry["nbytes"]:
                raise ContainerError(f"{path}: truncated payload for {entry['name']!r}")
            arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
            arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return version, header["meta"], arrays
