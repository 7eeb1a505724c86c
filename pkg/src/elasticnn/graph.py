"""Layer-graph model representation and execution.

A :class:`ModelGraph` is an insertion-ordered DAG of :class:`LayerNode`
objects.  Parameters live in ``model.params`` (trainable :class:`Tensor`
objects) and persistent statistics in ``model.buffers``; nodes refer to
them by registry key.  ``model.origin`` maps every channel-carrying
``(layer, dim)`` slot to the original-model index of each current channel,
so index sets from different pruning steps can be compared directly.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import GraphError, ShapeError

KINDS = ("conv2d", "batchnorm2d", "relu", "maxpool2d", "avgpool2d", "add", "flatten", "linear")
INPUT = "input"

# channel-carrying dimensions per kind, with the attr holding the extent
_DIM_ATTR = {
    "conv2d": {"out": "out_channels", "in": "in_channels"},
    "batchnorm2d": {"ch": "channels"},
    "linear": {"out": "out_features", "in": "in_features"},
}


@dataclass
class LayerNode:
    id: str
    kind: str
    attrs: dict
    inputs: list[str]
    params: dict[str, str] = field(default_factory=dict)
    buffers: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "attrs": dict(self.attrs),
            "inputs": list(self.inputs),
            "params": dict(self.params),
            "buffers": dict(self.buffers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerNode":
        return cls(d["id"], d["kind"], dict(d["attrs"]), list(d["inputs"]), dict(d["params"]), dict(d["buffers"]))


def channel_dims(kind: str) -> tuple[str, ...]:
    return tuple(_DIM_ATTR.get(kind, ()))


def dim_extent(node: LayerNode, dim: str) -> int:
    return int(node.attrs[_DIM_ATTR[node.kind][dim]])


def set_dim_extent(node: LayerNode, dim: str, n: int) -> None:
    node.attrs[_DIM_ATTR[node.kind][dim]] = int(n)


def expected_shapes(node: LayerNode) -> dict[str, tuple[int, ...]]:
    """Registry tensor shapes implied by a node's attributes, keyed by role."""
    a = node.attrs
    if node.kind == "conv2d":
        out = {"weight": (a["out_channels"], a["in_channels"], a["k"], a["k"]), "bias": (a["out_channels"],)}
    elif node.kind == "batchnorm2d":
        out = {r: (a["channels"],) for r in ("weight", "bias", "running_mean", "running_var")}
    elif node.kind == "linear":
        out = {"weight": (a["out_features"], a["in_features"]), "bias": (a["out_features"],)}
    else:
        out = {}
    return out


def dim_tensors(node: LayerNode, dim: str) -> list[tuple[str, int, bool]]:
    """Registry tensors indexed by ``dim`` of ``node``: (key, axis, is_buffer)."""
    if node.kind == "conv2d" or node.kind == "linear":
        if dim == "out":
            out = [(node.params["weight"], 0, False)]
            if "bias" in node.params:
                out.append((node.params["bias"], 0, False))
            return out
        return [(node.params["weight"], 1, False)]
    if node.kind == "batchnorm2d":
        return [
            (node.params["weight"], 0, False),
            (node.params["bias"], 0, False),
            (node.buffers["running_mean"], 0, True),
            (node.buffers["running_var"], 0, True),
        ]
    raise GraphError(f"{node.kind} has no channel dimension {dim!r}")


class ModelGraph:
    """Directed acyclic graph of layers plus its parameter registry."""

    def __init__(self, input_shape: tuple[int, int, int], num_classes: int, name: str = "model"):
        self.name = name
        self.input_shape = tuple(int(v) for v in input_shape)
        self.num_classes = int(num_classes)
        self.nodes: dict[str, LayerNode] = {}
        self.params: dict[str, T.Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.origin: dict[tuple[str, str], np.ndarray] = {}
        self.output: str | None = None
        self.arch = None  # ArchSpec, set by the zoo builder

    # ------------------------------------------------------------ building

    def _add(self, node: LayerNode) -> str:
        if node.id in self.nodes or node.id == INPUT:
            raise GraphError(f"duplicate node id {node.id!r}")
        if node.kind not in KINDS:
            raise GraphError(f"unknown layer kind {node.kind!r}; known: {', '.join(KINDS)}")
        for src in node.inputs:
            if src != INPUT and src not in self.nodes:
                raise GraphError(f"node {node.id!r} reads from unknown node {src!r}")
        self.nodes[node.id] = node
        for dim in channel_dims(node.kind):
            self.origin[(node.id, dim)] = np.arange(dim_extent(node, dim), dtype=np.int64)
        self.output = node.id
        return node.id

    def _param(self, key: str, arr: np.ndarray) -> str:
        self.params[key] = T.Tensor(arr, requires_grad=True, name=key)
        return key

    def add_conv(self, id, src, in_ch, out_ch, k, stride=1, pad=0, bias=False, rng=None, dtype=T.DEFAULT_DTYPE):
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * k * k
        params = {"weight": self._param(f"{id}.weight", _kaiming((out_ch, in_ch, k, k), fan_in, rng, dtype))}
        if bias:
            params["bias"] = self._param(f"{id}.bias", _uniform((out_ch,), 1 / np.sqrt(fan_in), rng, dtype))
        attrs = dict(in_channels=in_ch, out_channels=out_ch, k=k, stride=stride, pad=pad, bias=bool(bias))
        return self._add(LayerNode(id, "conv2d", attrs, [src], params))

    def add_bn(self, id, src, ch, dtype=T.DEFAULT_DTYPE):
        params = {
            "weight": self._param(f"{id}.weight", np.ones(ch, dtype=dtype)),
            "bias": self._param(f"{id}.bias", np.zeros(ch, dtype=dtype)),
        }
        self.buffers[f"{id}.running_mean"] = np.zeros(ch, dtype=dtype)
        self.buffers[f"{id}.running_var"] = np.ones(ch, dtype=dtype)
        buffers = {"running_mean": f"{id}.running_mean", "running_var": f"{id}.running_var"}
        attrs = dict(channels=ch, eps=T.BN_EPS, momentum=T.BN_MOMENTUM)
        return self._add(LayerNode(id, "batchnorm2d", attrs, [src], params, buffers))

    def add_linear(self, id, src, in_f, out_f, bias=True, rng=None, dtype=T.DEFAULT_DTYPE):
        rng = rng or np.random.default_rng(0)
        params = {"weight": self._param(f"{id}.weight", _kaiming((out_f, in_f), in_f, rng, dtype))}
        if bias:
            params["bias"] = self._param(f"{id}.bias", _uniform((out_f,), 1 / np.sqrt(in_f), rng, dtype))
        attrs = dict(in_features=in_f, out_features=out_f, bias=bool(bias))
        return self._add(LayerNode(id, "linear", attrs, [src], params))

    def add_relu(self, id, src):
        return self._add(LayerNode(id, "relu", {}, [src]))

    def add_maxpool(self, id, src, k, stride=None):
        return self._add(LayerNode(id, "maxpool2d", dict(k=k, stride=stride or k), [src]))

    def add_avgpool(self, id, src, k=None, stride=None):
        return self._add(LayerNode(id, "avgpool2d", dict(k=k, stride=stride), [src]))

    def add_sum(self, id, a, b):
        return self._add(LayerNode(id, "add", {}, [a, b]))

    def add_flatten(self, id, src):
        return self._add(LayerNode(id, "flatten", {}, [src]))

    # ------------------------------------------------------------ accounting

    def count_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def count_buffers(self) -> int:
        return int(sum(b.size for b in self.buffers.values()))

    def model_size_bytes(self) -> int:
        return 4 * (self.count_params() + self.count_buffers())

    @property
    def dtype(self):
        for t in self.params.values():
            return t.dtype
        return np.dtype(T.DEFAULT_DTYPE)

    # ------------------------------------------------------------ utilities

    def copy(self) -> "ModelGraph":
        other = ModelGraph(self.input_shape, self.num_classes, self.name)
        other.nodes = {k: copy.deepcopy(v) for k, v in self.nodes.items()}
        other.params = {k: T.Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.params.items()}
        other.buffers = {k: b.copy() for k, b in self.buffers.items()}
        other.origin = {k: v.copy() for k, v in self.origin.items()}
        other.output = self.output
        other.arch = self.arch
        return other

    def astype(self, dtype) -> "ModelGraph":
        other = self.copy()
        for key, t in other.params.items():
            t.data = t.data.astype(dtype)
        for key in other.buffers:
            other.buffers[key] = other.buffers[key].astype(dtype)
        return other

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {INPUT: []}
        for nid in self.nodes:
            out[nid] = []
        for node in self.nodes.values():
            for src in node.inputs:
                out[src].append(node.id)
        return out

    def validate(self) -> None:
        """Check registry ownership, origin maps and acyclicity."""
        seen: dict[str, str] = {}
        order = {INPUT: -1}
        for i, node in enumerate(self.nodes.values()):
            for src in node.inputs:
                if src not in order:
                    raise GraphError(f"node {node.id!r} reads {src!r} before it is defined (cycle or bad order)")
            order[node.id] = i
            if node.kind == "add" and len(node.inputs) != 2:
                raise GraphError(f"add node {node.id!r} needs exactly two inputs")
            for key in list(node.params.values()) + list(node.buffers.values()):
                if key in seen:
                    raise GraphError(f"registry tensor {key!r} shared by {seen[key]!r} and {node.id!r}")
                seen[key] = node.id
        orphans = (set(self.params) | set(self.buffers)) - set(seen)
        if orphans:
            raise GraphError(f"registry tensors without an owner: {sorted(orphans)}")
        for (nid, dim), omap in self.origin.items():
            if len(omap) != dim_extent(self.nodes[nid], dim):
                raise GraphError(f"origin map of {nid}.{dim} has {len(omap)} entries, layer has {dim_extent(self.nodes[nid], dim)}")
            if len(omap) > 1 and not np.all(np.diff(omap) > 0):
                raise GraphError(f"origin map of {nid}.{dim} is not strictly increasing")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "output": self.output,
            "nodes": [n.to_dict() for n in self.nodes.values()],
        }

    @classmethod
    def from_state(
        cls,
        d: dict,
        params: dict[str, np.ndarray],
        buffers: dict[str, np.ndarray],
        origin: dict[tuple[str, str], np.ndarray] | None = None,
    ) -> "ModelGraph":
        """Reassemble a graph from :meth:`to_dict` output and its tensors."""
        model = cls(tuple(d["input_shape"]), d["num_classes"], d["name"])
        for nd in d["nodes"]:
            model._add(LayerNode.from_dict(nd))
        model.output = d["output"]
        model.params = {k: T.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
        model.buffers = dict(buffers)
        if origin is not None:
            for key, omap in origin.items():
                if key not in model.origin:
                    raise GraphError(f"origin map for unknown slot {key[0]}.{key[1]}")
                model.origin[key] = np.asarray(omap, dtype=np.int64)
        model.validate()
        for node in model.nodes.values():
            want = expected_shapes(node)
            for role, key in list(node.params.items()) + list(node.buffers.items()):
                arr = model.params[key].data if key in model.params else model.buffers.get(key)
                if arr is None:
                    raise GraphError(f"node {node.id!r} is missing tensor {key!r}")
                if arr.shape != want[role]:
                    raise ShapeError(f"tensor {key!r} has shape {arr.shape}, node {node.id!r} expects {want[role]}")
        infer_shapes(model)
        return model


def _kaiming(shape, fan_in, rng, dtype):
    return _uniform(shape, np.sqrt(6.0 / fan_in), rng, dtype)


def _uniform(shape, bound, rng, dtype):
    u = rng.random(shape, dtype=np.float64 if np.dtype(dtype) == np.float64 else np.float32)
    return ((u * 2 - 1) * bound).astype(dtype)


# ---------------------------------------------------------------- execution


def infer_shapes(model: ModelGraph, input_shape: tuple[int, ...] | None = None) -> dict[str, tuple[int, ...]]:
    """Per-node output shapes (without the batch axis), validating every node."""
    shapes: dict[str, tuple[int, ...]] = {INPUT: tuple(input_shape or model.input_shape)}
    for node in model.nodes.values():
        ins = [shapes[s] for s in node.inputs]
        a = node.attrs
        try:
            if node.kind == "conv2d":
                c, h, w = _expect_chw(ins[0])
                if c != a["in_channels"]:
                    raise ShapeError(f"input has {c} channels but layer expects {a['in_channels']}")
                ho = T.conv_output_size(h, a["k"], a["stride"], a["pad"])
                wo = T.conv_output_size(w, a["k"], a["stride"], a["pad"])
                if ho < 1 or wo < 1:
                    raise ShapeError(f"{h}x{w} input too small for k={a['k']}")
                shapes[node.id] = (a["out_channels"], ho, wo)
            elif node.kind == "batchnorm2d":
                c, h, w = _expect_chw(ins[0])
                if c != a["channels"]:
                    raise ShapeError(f"input has {c} channels but layer expects {a['channels']}")
                shapes[node.id] = ins[0]
            elif node.kind == "relu":
                shapes[node.id] = ins[0]
            elif node.kind in ("maxpool2d", "avgpool2d"):
                c, h, w = _expect_chw(ins[0])
                k, s = a.get("k"), a.get("stride")
                if k is None:
                    shapes[node.id] = (c, 1, 1)
                else:
                    s = s or k
                    ho, wo = (h - k) // s + 1, (w - k) // s + 1
                    if ho < 1 or wo < 1:
                        raise ShapeError(f"{h}x{w} input too small for k={k}")
                    shapes[node.id] = (c, ho, wo)
            elif node.kind == "add":
                if ins[0] != ins[1]:
                    raise ShapeError(f"operand shapes differ, {ins[0]} vs {ins[1]}")
                shapes[node.id] = ins[0]
            elif node.kind == "flatten":
                shapes[node.id] = (int(np.prod(ins[0])),)
            elif node.kind == "linear":
                if len(ins[0]) != 1 or ins[0][0] != a["in_features"]:
                    raise ShapeError(f"input has {ins[0]} features but layer expects {a['in_features']}")
                shapes[node.id] = (a["out_features"],)
            else:
                raise GraphError(f"unsupported layer kind {node.kind!r} at node {node.id!r}")
        except ShapeError as exc:
            raise ShapeError(f"node {node.id!r} ({node.kind}): {exc}") from exc
    return shapes


def _expect_chw(shape):
    if len(shape) != 3:
        raise ShapeError(f"expected a C x H x W feature map, got shape {shape}")
    return shape


def forward(model: ModelGraph, batch, mode: str = "eval", bn_update: dict[str, np.ndarray] | None = None) -> T.Tensor:
    """Run ``batch`` (NCHW) through the graph and return the logits.

    ``mode="train"`` normalises with batch statistics and updates the
    batchnorm running buffers; ``bn_update`` maps a batchnorm node id to a
    boolean channel mask of statistics allowed to change.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = batch if isinstance(batch, T.Tensor) else T.Tensor(np.asarray(batch, dtype=model.dtype))
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"node {INPUT!r}: batch shape {x.shape[1:]} does not match model input {model.input_shape}")
    training = mode == "train"
    values: dict[str, T.Tensor] = {INPUT: x}
    P, B = model.params, model.buffers
    for node in model.nodes.values():
        a = node.attrs
        ins = [values[s] for s in node.inputs]
        try:
            if node.kind == "conv2d":
                bias = P[node.params["bias"]] if "bias" in node.params else None
                out = T.conv2d(ins[0], P[node.params["weight"]], bias, a["stride"], a["pad"])
            elif node.kind == "batchnorm2d":
                out = T.batchnorm2d(
                    ins[0],
                    P[node.params["weight"]],
                    P[node.params["bias"]],
                    B[node.buffers["running_mean"]],
                    B[node.buffers["running_var"]],
                    training,
                    a.get("momentum", T.BN_MOMENTUM),
                    a.get("eps", T.BN_EPS),
                    None if bn_update is None else bn_update.get(node.id),
                )
            elif node.kind == "relu":
                out = T.relu(ins[0])
            elif node.kind == "maxpool2d":
                out = T.maxpool2d(ins[0], a["k"], a.get("stride"))
            elif node.kind == "avgpool2d":
                out = T.avgpool2d(ins[0], a.get("k"), a.get("stride"))
            elif node.kind == "add":
                out = T.add(ins[0], ins[1])
            elif node.kind == "flatten":
                out = T.flatten(ins[0])
            elif node.kind == "linear":
                bias = P[node.params["bias"]] if "bias" in node.params else None
                out = T.linear(ins[0], P[node.params["weight"]], bias)
            else:
                raise GraphError(f"unknown kind {node.kind!r}")
        except ShapeError as exc:
            raise ShapeError(f"node {node.id!r} ({node.kind}): {exc}") from exc
        values[node.id] = out
    return values[model.output]


def count_params(model: ModelGraph) -> int:
    return model.count_params()


def count_buffers(model: ModelGraph) -> int:
    return model.count_buffers()


def model_size_bytes(model: ModelGraph) -> int:
    return model.model_size_bytes()


def registry_checksum(model: ModelGraph) -> str:
    """SHA-256 over every parameter and buffer, in key order."""
    h = hashlib.sha256()
    for store in (model.params, model.buffers):
        for key in sorted(store):
            arr = store[key].data if isinstance(store[key], T.Tensor) else store[key]
            h.update(key.encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def structure_signature(model: ModelGraph) -> str:
    """Hash of layer attributes and origin maps, independent of weight values."""
    h = hashlib.sha256()
    h.update(json.dumps([n.to_dict() for n in model.nodes.values()], sort_keys=True).encode())
    for key in sorted(model.origin):
        h.update(f"{key}".encode())
        h.update(model.origin[key].astype("<i8").tobytes())
    return h.hexdigest()
