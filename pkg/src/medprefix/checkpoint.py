"""Binary checkpoint format.

Layout::

    b"PFXBRDG1"                 8-byte magic; the final byte is the format version
    u32 little-endian           header length in bytes
    header                      UTF-8 JSON: version, configs, vocab, manifest
    payload                     contiguous little-endian float32 tensors

Each manifest entry is ``{"name", "shape", "offset"}`` with ``offset`` in
bytes from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import FormatError, VersionError

MAGIC_STEM = b"PFXBRDG"
FORMAT_VERSION = 1
MAGIC = MAGIC_STEM + str(FORMAT_VERSION).encode()
_LEN = struct.Struct("<I")


@dataclass
class Checkpoint:
    configs: dict
    vocab: list[str]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.version == other.version
            and self.configs == other.configs
            and self.vocab == other.vocab
            and list(self.tensors) == list(other.tensors)
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(self.tensors.values(), other.tensors.values())
            )
        )

    def to_bytes(self) -> bytes:
        manifest = []
        chunks = []
        offset = 0
        for name, arr in self.tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
        header = json.dumps(
            {"version": self.version, "configs": self.configs, "vocab": self.vocab, "manifest": manifest},
            separators=(",", ":"),
        ).encode("utf-8")
        return MAGIC + _LEN.pack(len(header)) + header + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < len(MAGIC) + _LEN.size:
            raise FormatError("file too short for a checkpoint header")
        if blob[: len(MAGIC_STEM)] != MAGIC_STEM:
            raise FormatError("bad magic; not a checkpoint file")
        if blob[len(MAGIC_STEM): len(MAGIC)] != MAGIC[len(MAGIC_STEM):]:
            raise VersionError(f"unsupported checkpoint version byte {blob[len(MAGIC) - 1:len(MAGIC)]!r}")
        (header_len,) = _LEN.unpack_from(blob, len(MAGIC))
        start = len(MAGIC) + _LEN.size
        if start + header_len > len(blob):
            raise FormatError("header length runs past end of file")
        try:
            header = json.loads(blob[start: start + header_len].decode("utf-8"))
            version = header["version"]
            configs = header["configs"]
            vocab = header["vocab"]
            manifest = header["manifest"]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"corrupt checkpoint header: {exc}") from None
        if version != FORMAT_VERSION:
            raise VersionError(f"checkpoint version {version!r}, expected {FORMAT_VERSION}")
        payload = memoryview(blob)[start + header_len:]

        tensors = {}
        spans = []
        try:
            for entry in manifest:
                name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
                if not isinstance(offset, int) or offset < 0 or any(not isinstance(s, int) or s < 1 for s in shape):
                    raise FormatError(f"invalid manifest entry for {name!r}")
                nbytes = 4 * int(np.prod(shape))
                if offset + nbytes > len(payload):
                    raise FormatError(f"tensor {name!r} extends past end of file")
                spans.append((offset, offset + nbytes, name))
                tensors[name] = np.frombuffer(payload[offset: offset + nbytes], dtype="<f4").astype(
                    np.float32).reshape(shape)
        except (KeyError, TypeError) as exc:
            raise FormatError(f"corrupt manifest: {exc}") from None
        spans.sort()
        for (_, end, a), (begin, _, b) in zip(spans, spans[1:]):
            if begin < end:
                raise FormatError(f"manifest entries {a!r} and {b!r} overlap")
        if spans and spans[-1][1] != len(payload) or not spans and len(payload):
            raise FormatError("payload size does not match manifest")
        return cls(configs=configs, vocab=vocab, tensors=tensors, version=version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
