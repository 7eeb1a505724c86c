"""Single-file checkpoint container.

Layout::

    b"ECNN1\\n"                      magic
    uint64 little-endian             header length in bytes
    header                           UTF-8 JSON, human readable
    payload                          tensors, little-endian, row-major

The header carries the architecture, the layer graph with its origin maps,
the level-stack metadata, the training config and a tensor directory of
``(name, dtype, shape, offset, length)`` rows.  Offsets are relative to the
start of the payload, ascending and contiguous.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .depgraph import CouplingEntry, SavedSlice
from .elastic import GroupDrop, LevelStack, PruneRecord
from .errors import DataError
from .graph import ModelGraph
from .zoo import ArchSpec

MAGIC = b"ECNN1\n"
FORMAT_VERSION = 1
_DTYPES = {"f4": np.float32, "f8": np.float64, "i8": np.int64, "b1": np.bool_}


@dataclass
class Checkpoint:
    """A model plus, optionally, the level stack it belongs to.

    When ``stack`` is set, ``model`` is the stack's materialised level.
    """

    model: ModelGraph
    stack: LevelStack | None = None
    config: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.stack is not None and self.stack.model is not self.model:
            raise ValueError("checkpoint model must be the stack's materialised model")

    @property
    def arch(self) -> ArchSpec | None:
        return self.model.arch

    @property
    def level(self) -> int:
        return 0 if self.stack is None else self.stack.top_level

    @property
    def depth(self) -> int:
        return 0 if self.stack is None else self.stack.depth


def _dtype_tag(arr: np.ndarray) -> str:
    tag = arr.dtype.str[1:]
    if tag not in _DTYPES:
        raise DataError(f"cannot store dtype {arr.dtype}")
    return tag


class _Blobs:
    def __init__(self):
        self.directory: list[dict] = []
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, name: str, arr: np.ndarray) -> str:
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[tag]).newbyteorder("<")).tobytes()
        self.directory.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": self.offset, "length": len(raw)})
        self.chunks.append(raw)
        self.offset += len(raw)
        return name


def _encode(ckpt: Checkpoint) -> tuple[dict, bytes]:
    blobs = _Blobs()
    model = ckpt.model
    for key, t in model.params.items():
        blobs.add(f"param/{key}", t.data)
    for key, b in model.buffers.items():
        blobs.add(f"buffer/{key}", b)

    header = {
        "format": FORMAT_VERSION,
        "arch": model.arch.to_dict() if model.arch is not None else None,
        "graph": model.to_dict(),
        "origin": [{"layer": l, "dim": d, "index": omap.tolist()} for (l, d), omap in model.origin.items()],
        "config": ckpt.config,
        "history": ckpt.history,
        "stack": None,
    }
    if ckpt.stack is not None:
        st = ckpt.stack
        records = []
        for ri, r in enumerate(st.records):
            groups = []
            for gi, gd in enumerate(r.groups):
                slices = []
                for si, s in enumerate(gd.slices):
                    name = blobs.add(f"record/{ri}/group/{gi}/slice/{si}", s.values)
                    slices.append({"layer": s.layer, "dim": s.dim, "key": s.key, "axis": s.axis, "factor": s.factor, "buffer": s.buffer, "tensor": name})
                groups.append({
                    "entries": [e.to_dict() for e in gd.entries],
                    "dropped": np.asarray(gd.dropped).tolist(),
                    "pre_width": gd.pre_width,
                    "slices": slices,
                })
            records.append({
                "step": r.step,
                "pre_checksum": r.pre_checksum,
                "post_signature": r.post_signature,
                "pre_params": r.pre_params,
                "post_params": r.post_params,
                "groups": groups,
            })
        header["stack"] = {"top_level": st.top_level, "costs": st.costs, "records": records}
    header["tensors"] = blobs.directory
    return header, b"".join(blobs.chunks)


def to_bytes(ckpt: Checkpoint) -> bytes:
    header, payload = _encode(ckpt)
    text = json.dumps(header, indent=1).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(text)) + text + payload


def save(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Write ``ckpt`` atomically (temp file in the same directory, then rename)."""
    data = to_bytes(ckpt)
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ecnn-", dir=folder)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def split_file(data: bytes) -> tuple[dict, bytes]:
    """Return ``(header, payload)`` of a serialised checkpoint."""
    if not data.startswith(MAGIC):
        raise DataError("not an ECNN1 checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise DataError("checkpoint truncated inside the header length")
    (n,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    if len(data) < pos + n:
        raise DataError("checkpoint truncated inside the header")
    try:
        header = json.loads(data[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"checkpoint header is not valid JSON: {exc}") from exc
    if header.get("format") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format {header.get('format')!r}")
    return header, data[pos + n:]


def _read_tensors(header: dict, payload: bytes) -> dict[str, np.ndarray]:
    out = {}
    expect = 0
    for row in header["tensors"]:
        if row["offset"] != expect:
            raise DataError(f"tensor {row['name']!r} starts at {row['offset']}, expected {expect}")
        if row["dtype"] not in _DTYPES:
            raise DataError(f"tensor {row['name']!r} has unknown dtype tag {row['dtype']!r}")
        dt = np.dtype(_DTYPES[row["dtype"]]).newbyteorder("<")
        count = int(np.prod(row["shape"], dtype=np.int64))
        if count * dt.itemsize != row["length"]:
            raise DataError(f"tensor {row['name']!r}: shape {row['shape']} does not fit {row['length']} bytes")
        end = expect + row["length"]
        if end > len(payload):
            raise DataError(f"payload truncated inside tensor {row['name']!r}")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=expect).reshape(row["shape"])
        out[row["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        expect = end
    if expect != len(payload):
        raise DataError(f"payload has {len(payload) - expect} trailing bytes")
    return out


def from_bytes(data: bytes) -> Checkpoint:
    header, payload = split_file(data)
    tensors = _read_tensors(header, payload)
    try:
        params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
        buffers = {k[len("buffer/"):]: v for k, v in tensors.items() if k.startswith("buffer/")}
        origin = {(o["layer"], o["dim"]): np.asarray(o["index"], dtype=np.int64) for o in header["origin"]}
        model = ModelGraph.from_state(header["graph"], params, buffers, origin)
        model.arch = ArchSpec.from_dict(header["arch"]) if header["arch"] else None

        stack = None
        if header["stack"] is not None:
            sh = header["stack"]
            records = []
            for r in sh["records"]:
                groups = []
                for g in r["groups"]:
                    slices = [
                        SavedSlice(s["layer"], s["dim"], s["key"], int(s["axis"]), int(s["factor"]), bool(s["buffer"]), tensors[s["tensor"]])
                        for s in g["slices"]
                    ]
                    groups.append(GroupDrop(
                        [CouplingEntry.from_dict(e) for e in g["entries"]],
                        np.asarray(g["dropped"], dtype=np.int64),
                        int(g["pre_width"]),
                        slices,
                    ))
                records.append(PruneRecord(int(r["step"]), groups, r["pre_checksum"], r["post_signature"], int(r["pre_params"]), int(r["post_params"])))
            stack = LevelStack(records, model, int(sh["top_level"]), model.arch, list(sh["costs"]))
            if not 0 <= stack.top_level <= stack.depth:
                raise DataError(f"stack level {stack.top_level} outside 0..{stack.depth}")
    except (KeyError, TypeError) as exc:
        raise DataError(f"checkpoint header is missing or mangles field {exc}") from exc
    return Checkpoint(model, stack, dict(header.get("config") or {}), list(header.get("history") or []))


def load(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def payload_bytes(path: str | os.PathLike) -> bytes:
    """The raw tensor payload of a checkpoint file."""
    with open(path, "rb") as fh:
        return split_file(fh.read())[1]
