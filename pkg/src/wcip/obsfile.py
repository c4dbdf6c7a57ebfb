"""Binary observation-file format.

Layout: a little-endian header (magic ``WCIP``, version, node count,
node coordinates, step count, dt, mask bitmap, noise level, seed)
protected by a CRC32, followed by the payload of float64 samples in
step-major order (step, then node, then x/y/z component).
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .objective import ObservationSet
from .solver import TraceRecord

__all__ = [
    "ObservationFileError",
    "MAGIC",
    "VERSION",
    "write_observation_file",
    "read_observation_file",
]

MAGIC = b"WCIP"
VERSION = 1


class ObservationFileError(ValueError):
    """Malformed, truncated, or corrupted observation file."""


def _pack_header(obs: ObservationSet, seed: int) -> bytes:
    tr = obs.trace
    n_nodes = len(tr.node_ids)
    mask_set = set(int(v) for v in obs.mask)
    bits = bytearray((n_nodes + 7) // 8)
    for i, nid in enumerate(tr.node_ids):
        if int(nid) in mask_set:
            bits[i // 8] |= 1 << (i % 8)
    body = struct.pack("<4sII", MAGIC, VERSION, n_nodes)
    body += np.asarray(tr.node_ids, dtype="<i8").tobytes()
    body += np.asarray(tr.coords, dtype="<f8").tobytes()
    body += struct.pack("<Id", tr.n_steps, tr.dt)
    body += bytes(bits)
    body += struct.pack("<ddQ", obs.noise_level, obs.zeta, seed)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    return struct.pack("<I", len(body)) + body + struct.pack("<I", crc)


def write_observation_file(path, obs: ObservationSet, seed: int = 0):
    """Serialize an observation set; payload is bit-reproducible."""
    payload = np.ascontiguousarray(obs.trace.values, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_pack_header(obs, seed))
        fh.write(payload)


def read_observation_file(path):
    """Deserialize; returns ``(ObservationSet, seed)``.

    Rejects wrong magic, unsupported versions, corrupted headers
    (checksum) and truncated payloads.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ObservationFileError("file too short for a header")
    (hlen,) = struct.unpack_from("<I", raw, 0)
    if len(raw) < 4 + hlen + 4:
        raise ObservationFileError("truncated header")
    body = raw[4:4 + hlen]
    (crc_stored,) = struct.unpack_from("<I", raw, 4 + hlen)
    if (zlib.crc32(body) & 0xFFFFFFFF) != crc_stored:
        raise ObservationFileError("header checksum mismatch")
    off = 0
    magic, version, n_nodes = struct.unpack_from("<4sII", body, off)
    off += struct.calcsize("<4sII")
    if magic != MAGIC:
        raise ObservationFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ObservationFileError(f"unsupported version {version}")
    node_ids = np.frombuffer(body, dtype="<i8", count=n_nodes, offset=off)
    off += n_nodes * 8
    coords = np.frombuffer(body, dtype="<f8", count=3 * n_nodes,
                           offset=off).reshape(n_nodes, 3)
    off += n_nodes * 24
    n_steps, dt = struct.unpack_from("<Id", body, off)
    off += struct.calcsize("<Id")
    nbits = (n_nodes + 7) // 8
    bits = body[off:off + nbits]
    off += nbits
    noise_level, zeta, seed = struct.unpack_from("<ddQ", body, off)

    payload = raw[4 + hlen + 4:]
    expect = n_steps * n_nodes * 3 * 8
    if len(payload) != expect:
        raise ObservationFileError(
            f"payload has {len(payload)} bytes, expected {expect}"
        )
    values = np.frombuffer(payload, dtype="<f8").reshape(
        n_steps, n_nodes, 3).copy()
    mask = np.array(
        [int(node_ids[i]) for i in range(n_nodes)
         if bits[i // 8] & (1 << (i % 8))],
        dtype=np.int64,
    )
    trace = TraceRecord(node_ids.copy(), coords.copy(), values,
                        float(dt), int(n_steps))
    obs = ObservationSet(trace=trace, mask=mask, zeta=float(zeta),
                         noise_level=float(noise_level))
    return obs, int(seed)
