"""Coupled channel groups and dependency-aware index dropping.

Every channel-carrying slot ``(layer, dim)`` of a graph is a member of
exactly one :class:`DependencyGroup`: the set of slots that must lose the
same channel indices for the graph to stay shape-valid.  Groups are found by
pushing a slot label forward through the graph and merging labels with a
union-find wherever two slots meet (a conv reading a feature map, a
batchnorm normalising it, an ``add`` joining two branches).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GraphError, PruneError
from .graph import INPUT, ModelGraph, dim_extent, dim_tensors, infer_shapes, set_dim_extent

_INPUT_SLOT = (INPUT, "ch")


class UnionFind:
    def __init__(self):
        self.parent: dict = {}
        self.order: list = []

    def add(self, x):
        if x not in self.parent:
            self.parent[x] = x
            self.order.append(x)

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the earlier-created slot as root so group order is stable
            if self.order.index(ra) > self.order.index(rb):
                ra, rb = rb, ra
            self.parent[rb] = ra
        return ra


@dataclass(frozen=True)
class CouplingEntry:
    """One coupled slot; ``factor`` > 1 maps a channel to that many linear columns."""

    layer: str
    dim: str  # "out" | "in" | "ch"
    factor: int = 1

    def to_dict(self) -> dict:
        return {"layer": self.layer, "dim": self.dim, "factor": self.factor}

    @classmethod
    def from_dict(cls, d: dict) -> "CouplingEntry":
        return cls(d["layer"], d["dim"], int(d.get("factor", 1)))


@dataclass
class DependencyGroup:
    entries: list[CouplingEntry]
    width: int
    prunable: bool

    @property
    def name(self) -> str:
        e = self.entries[0]
        return f"{e.layer}.{e.dim}"

    def conv_out_entries(self, model: ModelGraph) -> list[CouplingEntry]:
        return [e for e in self.entries if e.dim == "out" and model.nodes[e.layer].kind == "conv2d"]

    def to_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries], "width": self.width, "prunable": self.prunable}

    @classmethod
    def from_dict(cls, d: dict) -> "DependencyGroup":
        return cls([CouplingEntry.from_dict(e) for e in d["entries"]], int(d["width"]), bool(d["prunable"]))


def build_groups(model: ModelGraph, protected: set[str] | None = None) -> list[DependencyGroup]:
    """Partition the model's channel slots into coupled groups.

    A group is prunable when it holds at least one conv output, does not
    touch the network input, and contains no output slot of a protected
    layer.  The final classifier is always protected.
    """
    protected = set(protected or ()) | {model.output}
    shapes = infer_shapes(model)
    uf = UnionFind()
    uf.add(_INPUT_SLOT)
    factor: dict[tuple[str, str], int] = {}
    feat: dict[str, tuple[tuple[str, str], int]] = {INPUT: (_INPUT_SLOT, 1)}

    for node in model.nodes.values():
        src = node.inputs[0]
        if node.kind == "conv2d":
            slot_in, f = feat[src]
            if f != 1:
                raise GraphError(f"conv2d {node.id!r} reads a flattened tensor")
            uf.add((node.id, "out"))
            uf.add((node.id, "in"))
            uf.union(slot_in, (node.id, "in"))
            feat[node.id] = ((node.id, "out"), 1)
        elif node.kind == "batchnorm2d":
            uf.add((node.id, "ch"))
            uf.union(feat[src][0], (node.id, "ch"))
            feat[node.id] = feat[src]
        elif node.kind in ("relu", "maxpool2d", "avgpool2d"):
            feat[node.id] = feat[src]
        elif node.kind == "add":
            (a, fa), (b, fb) = feat[node.inputs[0]], feat[node.inputs[1]]
            if fa != fb:
                raise GraphError(f"add {node.id!r} joins tensors with different channel layouts")
            uf.union(a, b)
            feat[node.id] = (a, fa)
        elif node.kind == "flatten":
            slot, f = feat[src]
            shape = shapes[src]
            spatial = int(np.prod(shape[1:])) if len(shape) == 3 else 1
            feat[node.id] = (slot, f * spatial)
        elif node.kind == "linear":
            slot, f = feat[src]
            uf.add((node.id, "out"))
            uf.add((node.id, "in"))
            uf.union(slot, (node.id, "in"))
            factor[(node.id, "in")] = f
            feat[node.id] = ((node.id, "out"), 1)
        else:
            raise GraphError(f"unsupported node kind {node.kind!r} in a coupled path")

    members: dict = {}
    for slot in uf.order:
        members.setdefault(uf.find(slot), []).append(slot)

    groups = []
    for slots in members.values():
        entries = [CouplingEntry(l, d, factor.get((l, d), 1)) for l, d in slots if (l, d) != _INPUT_SLOT]
        if not entries:
            continue
        widths = {_entry_width(model, e) for e in entries}
        if len(widths) != 1:
            raise GraphError(f"coupled slots disagree on width: {sorted(widths)} in group {entries[0].layer}.{entries[0].dim}")
        has_conv_out = any(e.dim == "out" and model.nodes[e.layer].kind == "conv2d" for e in entries)
        locked = _INPUT_SLOT in slots or any(e.dim == "out" and e.layer in protected for e in entries)
        groups.append(DependencyGroup(entries, widths.pop(), has_conv_out and not locked))
    return groups


def _entry_width(model: ModelGraph, e: CouplingEntry) -> int:
    n = dim_extent(model.nodes[e.layer], e.dim)
    if n % e.factor:
        raise GraphError(f"{e.layer}.{e.dim} extent {n} is not a multiple of {e.factor}")
    return n // e.factor


def check_partition(model: ModelGraph, groups: list[DependencyGroup]) -> None:
    """Raise unless every channel slot of ``model`` is in exactly one group."""
    seen: dict[tuple[str, str], int] = {}
    for gi, g in enumerate(groups):
        for e in g.entries:
            key = (e.layer, e.dim)
            if key in seen:
                raise GraphError(f"slot {e.layer}.{e.dim} is in groups {seen[key]} and {gi}")
            seen[key] = gi
    missing = set(model.origin) - set(seen)
    if missing:
        raise GraphError(f"slots not covered by any group: {sorted(missing)}")


def expand_indices(idx: np.ndarray, factor: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if factor == 1:
        return idx
    return (idx[:, None] * factor + np.arange(factor)).ravel()


def channel_origin(model: ModelGraph, e: CouplingEntry) -> np.ndarray:
    """Original channel index of each current channel of slot ``e``.

    Linear inputs keep their origin map per column; a channel there spans
    ``factor`` consecutive columns, so its origin is the first column's
    origin divided by the factor.
    """
    omap = model.origin[(e.layer, e.dim)]
    return omap if e.factor == 1 else omap[::e.factor] // e.factor


def set_channel_origin(model: ModelGraph, e: CouplingEntry, channels: np.ndarray) -> None:
    model.origin[(e.layer, e.dim)] = expand_indices(np.asarray(channels, dtype=np.int64), e.factor)


def validate_drop(group: DependencyGroup, drop) -> np.ndarray:
    drop = np.asarray(sorted(set(int(i) for i in np.asarray(drop).ravel())), dtype=np.int64)
    if drop.size and (drop[0] < 0 or drop[-1] >= group.width):
        raise PruneError(f"group {group.name}: drop index out of range [0, {group.width})")
    if drop.size >= group.width:
        raise PruneError(f"group {group.name}: cannot drop all {group.width} channels")
    return drop


@dataclass
class SavedSlice:
    """Values removed from one registry tensor along one axis."""

    layer: str
    dim: str
    key: str
    axis: int
    factor: int
    buffer: bool
    values: np.ndarray


def apply_index_drop(model: ModelGraph, group: DependencyGroup, drop) -> tuple[np.ndarray, list[SavedSlice]]:
    """Remove channels ``drop`` (current indices) from every slot of ``group``.

    Mutates ``model`` and ``group.width``.  Returns the dropped channels in
    original-model coordinates and the removed tensor slices in the order
    they were cut.
    """
    drop = validate_drop(group, drop)
    e0 = group.entries[0]
    dropped_orig = channel_origin(model, e0)[drop]
    if drop.size == 0:
        return dropped_orig, []
    keep = np.setdiff1d(np.arange(group.width), drop)
    saved: list[SavedSlice] = []
    for e in group.entries:
        node = model.nodes[e.layer]
        omap = channel_origin(model, e)
        if not np.array_equal(omap[drop], dropped_orig):
            raise PruneError(f"origin map of {e.layer}.{e.dim} disagrees with its group")
        for key, axis, is_buf in dim_tensors(node, e.dim):
            f = e.factor if (node.kind == "linear" and e.dim == "in") else 1
            idx = expand_indices(drop, f)
            arr = model.buffers[key] if is_buf else model.params[key].data
            saved.append(SavedSlice(e.layer, e.dim, key, axis, f, is_buf, np.take(arr, idx, axis=axis)))
            new = np.delete(arr, idx, axis=axis)
            if is_buf:
                model.buffers[key] = new
            else:
                model.params[key].data = new
                model.params[key].grad = None
        set_dim_extent(node, e.dim, (group.width - drop.size) * (e.factor if node.kind == "linear" and e.dim == "in" else 1))
        set_channel_origin(model, e, omap[keep])
    group.width -= int(drop.size)
    return dropped_orig, saved


def entry_param_cost(model: ModelGraph, e: CouplingEntry) -> tuple[int, int]:
    """Parameters and buffers attached to one channel of slot ``e``."""
    node = model.nodes[e.layer]
    a = node.attrs
    if node.kind == "conv2d":
        k2 = a["k"] * a["k"]
        if e.dim == "out":
            return k2 * a["in_channels"] + (1 if a["bias"] else 0), 0
        return k2 * a["out_channels"], 0
    if node.kind == "batchnorm2d":
        return 2, 2
    if node.kind == "linear":
        if e.dim == "out":
            return a["in_features"] + (1 if a["bias"] else 0), 0
        return e.factor * a["out_features"], 0
    raise GraphError(f"{node.kind} has no channel cost")


def drop_param_delta(model: ModelGraph, group: DependencyGroup, n: int) -> int:
    """Exact parameter decrease when ``n`` channels of ``group`` are dropped."""
    total = sum(entry_param_cost(model, e)[0] for e in group.entries) * n
    for layer in {e.layer for e in group.entries}:
        ents = [e for e in group.entries if e.layer == layer]
        if len(ents) == 2:
            node = model.nodes[layer]
            f = next(e.factor for e in ents if e.dim == "in")
            per = node.attrs["k"] ** 2 if node.kind == "conv2d" else 1
            total -= per * f * n * n
    return total
