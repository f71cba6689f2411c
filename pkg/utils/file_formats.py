"""
Binary containers for reference solutions and checkpoints.

Layout: uint32 LE header length, UTF-8 JSON header, then one block per array,
each a uint64 LE byte length followed by raw float64 little-endian data. The
header lists the magic string, the block names and shapes, and a CRC32 of
the block payloads. Files are written to a temporary sibling and renamed.
"""
import json
import logging
import os
import struct
import tempfile
import zlib

import numpy as np

from utils.errors import CheckpointError, FileFormatError, ReferenceFormatError

logger = logging.getLogger(__name__)

REFERENCE_MAGIC = "SPINN-REF-1"
CHECKPOINT_MAGIC = "SPINN-CKPT-1"

_ERRORS = {REFERENCE_MAGIC: ReferenceFormatError, CHECKPOINT_MAGIC: CheckpointError}


def atomic_write_bytes(path, payload):
    """Write bytes to path through a temporary file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    # Temp file lives in the target directory
    os.makedirs(directory, exist_ok=True)
    handle, temp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(handle, "wb") as f:
            f.write(payload)
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise


def write_container(path, magic, header, blocks):
    """
    Serialize named float64 arrays with a JSON header

    Parameters:
    - path: destination file
    - magic: REFERENCE_MAGIC or CHECKPOINT_MAGIC
    - header: JSON-serializable dict of metadata
    - blocks: dict name -> array (written in insertion order)
    """
    # Little-endian float64 payloads, one per block
    payloads = []
    layout = []
    for name, array in blocks.items():
        data = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
        layout.append({"name": name, "shape": list(data.shape)})
        payloads.append(data.tobytes())
    # Running CRC32 over every payload
    crc = 0
    for payload in payloads:
        crc = zlib.crc32(payload, crc)

    # Caller metadata plus the container fields
    full_header = dict(header)
    full_header.update({"magic": magic, "endianness": "little", "blocks": layout, "crc32": crc})
    header_bytes = json.dumps(full_header, sort_keys=True).encode("utf-8")

    # Length-prefixed header, then length-prefixed blocks
    parts = [struct.pack("<I", len(header_bytes)), header_bytes]
    for payload in payloads:
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    atomic_write_bytes(path, b"".join(parts))
    logger.debug("Wrote %s container %s with %d blocks", magic, path, len(payloads))


def read_container(path, magic):
    """
    Read a container written by write_container

    Returns:
    - header dict and a dict name -> float64 array

    Raises the format error of the magic (ReferenceFormatError or CheckpointError)
    on a wrong magic, truncation, checksum mismatch or shape mismatch.
    """
    error = _ERRORS.get(magic, FileFormatError)
    with open(path, "rb") as f:
        raw = f.read()

    # Header length prefix
    if len(raw) < 4:
        raise error(f"{path}: file too short for a header")
    (header_length,) = struct.unpack_from("<I", raw, 0)
    if 4 + header_length > len(raw):
        raise error(f"{path}: truncated header")
    try:
        header = json.loads(raw[4:4 + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise error(f"{path}: malformed header ({exc})") from exc
    # A reference opened as a checkpoint fails here
    if not isinstance(header, dict) or header.get("magic") != magic:
        found = header.get("magic") if isinstance(header, dict) else None
        raise error(f"{path}: wrong magic {found!r}, expected {magic!r}")
    if header.get("endianness") != "little":
        raise error(f"{path}: unsupported endianness {header.get('endianness')!r}")

    # Walk the blocks in header order
    offset = 4 + header_length
    blocks = {}
    crc = 0
    for entry in header.get("blocks", []):
        if offset + 8 > len(raw):
            raise error(f"{path}: truncated before block {entry['name']}")
        (length,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        # Byte length must agree with the declared shape
        expected = 8 * int(np.prod(entry["shape"], dtype=np.int64))
        if length != expected:
            raise error(f"{path}: block {entry['name']} has {length} bytes, shape needs {expected}")
        if offset + length > len(raw):
            raise error(f"{path}: truncated block {entry['name']}")
        payload = raw[offset:offset + length]
        crc = zlib.crc32(payload, crc)
        blocks[entry["name"]] = np.frombuffer(payload, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        offset += length

    # Nothing may follow the last block
    if offset != len(raw):
        raise error(f"{path}: {len(raw) - offset} trailing bytes")
    if crc != header.get("crc32"):
        raise error(f"{path}: checksum mismatch")
    return header, blocks
