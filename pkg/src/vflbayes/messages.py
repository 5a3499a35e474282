"""Protocol messages and their byte encoding.

Frame layout (all integers big-endian)::

    uint32  body length in bytes (not counting these 4 bytes)
    body:
      uint8   tag
      uint64  run id
      uint64  iteration
      uint32  actor id (client the message concerns; 0 = server)
      uint32  number of parts P
      P x (uint32 key, uint32 length)     part directory
      float64[sum of lengths]             part payloads, big-endian, in directory order

Part keys are client ids (1-based) or :data:`SHARED_KEY` for the shared
parameter block. See ``docs/wire_format.md`` for the per-tag meaning.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

TAGS = {
    "AuxUpdate": 1,
    "ServerZGrad": 2,
    "AuxBroadcast": 3,
    "CrossGrad": 4,
    "CrossGradSum": 5,
    "SharedParamGrad": 6,
    "Control": 7,
    "SigmaGrad": 8,
}
TAG_NAMES = {v: k for k, v in TAGS.items()}

SHARED_KEY = 0xFFFFFFFF
CONTROL_CODES = {"start": 1.0, "stop": 2.0, "checkpoint": 3.0}

_HEAD = struct.Struct(">BQQII")
_PART = struct.Struct(">II")
_LEN = struct.Struct(">I")


class WireError(ValueError):
    """Malformed frame."""


@dataclass
class Message:
    tag: str
    run_id: int
    iteration: int
    actor: int
    parts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in TAGS:
            raise WireError(f"unknown message tag {self.tag!r}")
        self.parts = {int(k): np.asarray(v, dtype=np.float64).ravel() for k, v in self.parts.items()}

    def payload_values(self) -> np.ndarray:
        if not self.parts:
            return np.zeros(0)
        return np.concatenate([self.parts[k] for k in sorted(self.parts)])

    def to_record(self) -> dict:
        """JSON-ready record used by the message log."""
        return {
            "tag": self.tag,
            "run_id": self.run_id,
            "iteration": self.iteration,
            "actor": self.actor,
            "parts": {str(k): v.tolist() for k, v in sorted(self.parts.items())},
        }


def encode(msg: Message) -> bytes:
    keys = sorted(msg.parts)
    head = _HEAD.pack(TAGS[msg.tag], msg.run_id, msg.iteration, msg.actor, len(keys))
    directory = b"".join(_PART.pack(k, msg.parts[k].size) for k in keys)
    data = b"".join(msg.parts[k].astype(">f8").tobytes() for k in keys)
    body = head + directory + data
    return _LEN.pack(len(body)) + body


def decode(frame: bytes) -> Message:
    if len(frame) < _LEN.size + _HEAD.size:
        raise WireError("frame too short")
    (length,) = _LEN.unpack_from(frame, 0)
    if length != len(frame) - _LEN.size:
        raise WireError(f"length prefix {length} does not match body size {len(frame) - _LEN.size}")
    tag, run_id, iteration, actor, n_parts = _HEAD.unpack_from(frame, _LEN.size)
    if tag not in TAG_NAMES:
        raise WireError(f"unknown tag byte {tag}")
    off = _LEN.size + _HEAD.size
    directory = []
    for _ in range(n_parts):
        directory.append(_PART.unpack_from(frame, off))
        off += _PART.size
    parts = {}
    for key, n in directory:
        parts[key] = np.frombuffer(frame, dtype=">f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
    if off != len(frame):
        raise WireError("trailing bytes after payload")
    return Message(TAG_NAMES[tag], run_id, iteration, actor, parts)


def frame_size(msg: Message) -> int:
    n_values = sum(v.size for v in msg.parts.values())
    return _LEN.size + _HEAD.size + _PART.size * len(msg.parts) + 8 * n_values


class MessageLog:
    """Append-only JSON-lines record of every message sent in a run."""

    def __init__(self, path=None):
        self.path = path
        self.records = []
        self._fh = open(path, "w", encoding="utf-8") if path is not None else None

    def write(self, src: int, dst: int, msg: Message):
        rec = msg.to_record()
        rec["src"] = src
        rec["dst"] = dst
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None
