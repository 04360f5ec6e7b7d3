"""Versioned binary checkpoints with bit-exact round trips.

Layout: 8-byte magic, little-endian u32 format version, little-endian u64
header length, a sorted-key JSON header of that length, then the raw
little-endian float64 tensor payload. The header indexes every buffer by
byte offset into the payload, and optionally carries optimizer velocities,
an RNG state, and the plan text that produced the network.
"""

import json
import struct

import numpy as np

from .graph import NetworkGraph

__all__ = ["MAGIC", "FORMAT_VERSION", "CheckpointBundle", "save_checkpoint",
           "load_checkpoint"]

MAGIC = b"CAPROJv1"
FORMAT_VERSION = 1


class CheckpointBundle:
    """Everything a checkpoint holds, reassembled."""

    def __init__(self, net, velocities=None, optimizer=None, rng_state=None,
                 plan_text=None, extra=None):
        self.net = net
        self.velocities = velocities
        self.optimizer = optimizer
        self.rng_state = rng_state
        self.plan_text = plan_text
        self.extra = extra or {}


def _as_le64(arr):
    return np.ascontiguousarray(np.asarray(arr, dtype="<f8"))


def save_checkpoint(path, net, optimizer=None, rng_state=None, plan_text=None,
                    extra=None):
    """Write the network (and optional training state) to ``path``."""
    buffers = []
    offset = 0

    def push(arr):
        nonlocal offset
        arr = _as_le64(arr)
        entry_offset = offset
        buffers.append(arr)
        offset += arr.nbytes
        return entry_offset

    tensors = []
    for name, t in net.named_parameters():
        tensors.append(
            {
                "name": name,
                "shape": list(t.data.shape),
                "offset": push(t.data),
            }
        )
    opt_entry = None
    if optimizer is not None:
        vels = []
        for (name, _), v in zip(net.named_parameters(),
                                optimizer.state_arrays()):
            vels.append(
                {"name": name, "shape": list(v.shape), "offset": push(v)}
            )
        opt_entry = {
            "lr": optimizer.lr,
            "momentum": optimizer.momentum,
            "velocities": vels,
        }
    header = {
        "topology": net.to_spec(),
        "tensors": tensors,
        "optimizer": opt_entry,
        "rng": rng_state,
        "plan": plan_text,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for arr in buffers:
            fh.write(arr.tobytes())


def _read_buffer(payload, entry):
    shape = tuple(entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    start = entry["offset"]
    end = start + count * 8
    if end > len(payload):
        raise IOError(
            f"checkpoint payload truncated: buffer {entry['name']} needs "
            f"bytes [{start}, {end}) of {len(payload)}"
        )
    flat = np.frombuffer(payload[start:end], dtype="<f8")
    return flat.reshape(shape).astype(np.float64)


def load_checkpoint(path):
    """Read a checkpoint back into a CheckpointBundle."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4 + 8:
        raise IOError(f"{path}: too short to be a checkpoint")
    if raw[: len(MAGIC)] != MAGIC:
        raise IOError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise IOError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header_end = pos + header_len
    if header_end > len(raw):
        raise IOError(f"{path}: header length {header_len} overruns the file")
    header = json.loads(raw[pos:header_end].decode("utf-8"))
    payload = raw[header_end:]

    net = NetworkGraph.from_spec(header["topology"])
    values = {
        entry["name"]: _read_buffer(payload, entry)
        for entry in header["tensors"]
    }
    net.load_values(values)

    velocities = None
    optimizer = header.get("optimizer")
    if optimizer is not None:
        velocities = [
            _read_buffer(payload, entry) for entry in optimizer["velocities"]
        ]
    return CheckpointBundle(
        net,
        velocities=velocities,
        optimizer=optimizer,
        rng_state=header.get("rng"),
        plan_text=header.get("plan"),
        extra=header.get("extra") or {},
    )
