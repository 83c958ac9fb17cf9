"""Versioned binary model container.

Layout: magic ``UMB1``, u32 section count, section table (16-byte name,
u64 offset, u64 size, little-endian), then section payloads. Each payload
is a u32 JSON header length, a UTF-8 JSON header holding metadata and
array descriptors, and a blob of little-endian arrays (float64 unless
declared otherwise). Byte output is deterministic for identical content.
"""

import json
import struct

import numpy as np

MAGIC = b"UMB1"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f8", "<f4", "<i8", "<i4"}


def write_sections(path, sections: dict) -> None:
    """Write {name: (meta_dict, {array_name: ndarray})} to a container file."""
    payloads = []
    for name, (meta, arrays) in sections.items():
        if len(name.encode("ascii")) > 16:
            raise ValueError(f"section name {name!r} exceeds 16 bytes")
        descriptors = []
        blob = bytearray()
        for arr_name, arr in arrays.items():
            arr = np.asarray(arr)
            dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
            raw = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
            descriptors.append(
                {
                    "name": arr_name,
                    "shape": list(arr.shape),
                    "dtype": dtype,
                    "offset": len(blob),
                    "nbytes": len(raw),
                }
            )
            blob.extend(raw)
        header = json.dumps(
            {"format_version": FORMAT_VERSION, "meta": meta, "arrays": descriptors},
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
        payloads.append((name, struct.pack("<I", len(header)) + header + bytes(blob)))

    table_offset = len(MAGIC) + 4
    data_offset = table_offset + 32 * len(payloads)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(payloads)))
        offset = data_offset
        for name, payload in payloads:
            fh.write(name.encode("ascii").ljust(16, b"\0"))
            fh.write(struct.pack("<QQ", offset, len(payload)))
            offset += len(payload)
        for _, payload in payloads:
            fh.write(payload)


def read_sections(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a model container (bad magic {data[:4]!r})")
    (count,) = struct.unpack_from("<I", data, 4)
    sections = {}
    pos = 8
    for _ in range(count):
        name = data[pos : pos + 16].rstrip(b"\0").decode("ascii")
        offset, size = struct.unpack_from("<QQ", data, pos + 16)
        pos += 32
        payload = data[offset : offset + size]
        if len(payload) != size:
            raise ValueError(f"{path}: truncated section {name!r}")
        (header_len,) = struct.unpack_from("<I", payload, 0)
        header = json.loads(payload[4 : 4 + header_len].decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported container version {header.get('format_version')}"
            )
        blob = payload[4 + header_len :]
        arrays = {}
        for desc in header["arrays"]:
            if desc["dtype"] not in _ALLOWED_DTYPES:
                raise ValueError(f"{path}: unsupported array dtype {desc['dtype']}")
            raw = blob[desc["offset"] : desc["offset"] + desc["nbytes"]]
            arrays[desc["name"]] = np.frombuffer(raw, dtype=np.dtype(desc["dtype"])).reshape(
                desc["shape"]
            ).copy()
        sections[name] = (header["meta"], arrays)
    return sections
