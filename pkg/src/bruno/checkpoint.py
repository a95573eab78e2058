"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"BRUNOCKP"  magic
    u32          format version
    u32          section count
    sections     u32 name length, name (utf-8), u64 payload length, payload
    u32          CRC32 of every preceding byte

Sections are ``hyper`` and ``config`` (JSON objects), ``iteration`` (u64),
``rng`` (JSON bit-generator state), and one ``param/<name>`` or
``opt/<name>`` per array. Arrays are stored as u8 dtype-string length,
dtype string, u32 ndim, u64 dims and little-endian data, so they reload
bit for bit.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptFile, VersionMismatch
from .model import BrunoModel
from .train import RMSProp

MAGIC = b"BRUNOCKP"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: BrunoModel
    iteration: int = 0
    optimizer: RMSProp = None
    rng_state: dict = None
    config: dict = field(default_factory=dict)

    def rng(self):
        """A generator positioned where the saved one stopped (None if none was saved)."""
        if self.rng_state is None:
            return None
        bitgen = getattr(np.random, self.rng_state["bit_generator"])()
        bitgen.state = self.rng_state
        return np.random.Generator(bitgen)


def _pack_array(arr):
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "|" else arr.dtype
    code = dt.str.encode()
    head = struct.pack("<B", len(code)) + code + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype(dt, copy=False).tobytes()


def _unpack_array(buf):
    (clen,) = struct.unpack_from("<B", buf, 0)
    code = buf[1:1 + clen].decode()
    pos = 1 + clen
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    dt = np.dtype(code)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - pos != count * dt.itemsize:
        raise CorruptFile("array payload has the wrong length")
    return np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape).astype(dt.newbyteorder("="))


def _json(obj):
    return json.dumps(obj, sort_keys=True).encode()


def save_checkpoint(path, model, iteration=0, optimizer=None, rng=None, config=None):
    """Write ``model`` (plus optional training state) to ``path``."""
    sections = [
        ("hyper", _json(model.hyperparameters())),
        ("config", _json(config or {})),
        ("iteration", struct.pack("<Q", iteration)),
    ]
    if rng is not None:
        sections.append(("rng", _json(rng.bit_generator.state)))
    for name, arr in sorted(model.parameters().items()):
        sections.append((f"param/{name}", _pack_array(arr)))
    if optimizer is not None:
        sections.append(("optmeta", _json({"decay": optimizer.decay, "eps": optimizer.eps})))
        for name, arr in sorted(optimizer.mean_square.items()):
            sections.append((f"opt/{name}", _pack_array(arr)))

    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(sections))
    for name, payload in sections:
        encoded = name.encode()
        out += struct.pack("<I", len(encoded)) + encoded
        out += struct.pack("<Q", len(payload)) + payload
    out += struct.pack("<I", zlib.crc32(out))
    with open(path, "wb") as fh:
        fh.write(out)


def _read_sections(raw):
    if len(raw) < len(MAGIC) + 12 or raw[:len(MAGIC)] != MAGIC:
        raise CorruptFile("not a checkpoint file (bad magic or too short)")
    version, count = struct.unpack_from("<II", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    body, (stored_crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != stored_crc:
        raise CorruptFile("checkpoint checksum mismatch")
    pos = len(MAGIC) + 8
    sections = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + nlen].decode()
            pos += 4 + nlen
            (plen,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            if pos + plen > len(body):
                raise CorruptFile(f"section {name!r} runs past the end of the file")
            sections[name] = body[pos:pos + plen]
            pos += plen
    except struct.error as err:
        raise CorruptFile(f"malformed section table: {err}") from None
    if pos != len(body):
        raise CorruptFile("trailing bytes after the last section")
    return sections


def load_checkpoint(path):
    """Read a file written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    sections = _read_sections(raw)
    try:
        hyper = json.loads(sections["hyper"])
        model = BrunoModel.from_hyperparameters(hyper)
        params = model.parameters()
        for name, arr in params.items():
            stored = _unpack_array(sections[f"param/{name}"])
            if stored.shape != arr.shape:
                raise CorruptFile(f"parameter {name} has shape {stored.shape}, expected {arr.shape}")
            arr[...] = stored
        (iteration,) = struct.unpack("<Q", sections["iteration"])
        config = json.loads(sections["config"])
    except KeyError as err:
        raise CorruptFile(f"missing section {err}") from None
    rng_state = json.loads(sections["rng"]) if "rng" in sections else None
    optimizer = None
    if "optmeta" in sections:
        meta = json.loads(sections["optmeta"])
        optimizer = RMSProp(meta["decay"], meta["eps"])
        for name, payload in sections.items():
            if name.startswith("opt/"):
                optimizer.mean_square[name[4:]] = _unpack_array(payload)
    return Checkpoint(model, iteration, optimizer, rng_state, config)
