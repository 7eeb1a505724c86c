"""Prune, extract, rebuild and switch between nested capacity levels.

A :class:`PruneRecord` holds everything needed to undo one pruning step:
for every pruned group, the dropped channels in original-model coordinates
and the exact tensor slices that were cut.  Rebuilding reinserts those
slices at their original positions around the (possibly fine-tuned) core
and returns a :class:`FreezeMask` marking the core's coordinates, so
masked fine-tuning leaves the core embedded bit-for-bit in the larger
model.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .depgraph import (
    CouplingEntry,
    DependencyGroup,
    SavedSlice,
    apply_index_drop,
    build_groups,
    channel_origin,
    expand_indices,
    set_channel_origin,
    validate_drop,
)
from .errors import PruneError
from .graph import ModelGraph, dim_extent, dim_tensors, infer_shapes, registry_checksum, set_dim_extent, structure_signature
from .importance import score_groups, rank_for_drop

log = logging.getLogger(__name__)


@dataclass
class GroupDrop:
    entries: list[CouplingEntry]
    dropped: np.ndarray  # original-model channel indices, sorted
    pre_width: int
    slices: list[SavedSlice]

    @property
    def post_width(self) -> int:
        return self.pre_width - len(self.dropped)


@dataclass
class PruneRecord:
    step: int
    groups: list[GroupDrop]
    pre_checksum: str
    post_signature: str
    pre_params: int = 0
    post_params: int = 0


@dataclass
class FreezeMask:
    """``True`` marks frozen (core) coordinates."""

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    def bn_update(self, model: ModelGraph) -> dict[str, np.ndarray]:
        """Per-batchnorm channel masks of statistics still allowed to move."""
        out = {}
        for node in model.nodes.values():
            if node.kind == "batchnorm2d":
                out[node.id] = ~self.buffers[node.buffers["running_mean"]]
        return out

    def frozen_fraction(self) -> float:
        total = sum(m.size for m in self.params.values())
        return sum(int(m.sum()) for m in self.params.values()) / total if total else 0.0


def cost_report(model: ModelGraph, input_shape: tuple[int, ...] | None = None) -> dict:
    """Parameters, FLOPs and storage bytes of ``model``.

    A conv layer costs ``out * k^2 * in * h_out * w_out`` FLOPs and a linear
    layer ``out * in``; pooling, activations and normalisation are free.
    """
    shapes = infer_shapes(model, input_shape)
    flops = 0
    for node in model.nodes.values():
        a = node.attrs
        if node.kind == "conv2d":
            _, h, w = shapes[node.id]
            flops += a["out_channels"] * a["k"] ** 2 * a["in_channels"] * h * w
        elif node.kind == "linear":
            flops += a["out_features"] * a["in_features"]
    nbytes = model.model_size_bytes()
    return {"params": model.count_params(), "flops": int(flops), "bytes": nbytes, "mb": nbytes / 2**20}


def _copy_groups(groups: Sequence[DependencyGroup]) -> list[DependencyGroup]:
    return [DependencyGroup(list(g.entries), g.width, g.prunable) for g in groups]


def _as_drop_list(groups: Sequence[DependencyGroup], drops) -> list[np.ndarray]:
    if isinstance(drops, dict):
        drops = [drops.get(i, ()) for i in range(len(groups))]
    drops = list(drops)
    if len(drops) != len(groups):
        raise PruneError(f"{len(drops)} drop sets for {len(groups)} groups")
    out = []
    for g, d in zip(groups, drops):
        d = validate_drop(g, d)
        if d.size and not g.prunable:
            raise PruneError(f"group {g.name} is protected and cannot be pruned")
        out.append(d)
    return out


def hard_prune(model: ModelGraph, groups: Sequence[DependencyGroup], drops, step: int = 1) -> tuple[ModelGraph, PruneRecord]:
    """Physically remove channels; ``model`` itself is left untouched."""
    drops = _as_drop_list(groups, drops)
    core = model.copy()
    record_groups = []
    for g, d in zip(_copy_groups(groups), drops):
        if d.size == 0:
            continue
        pre = g.width
        dropped, saved = apply_index_drop(core, g, d)
        record_groups.append(GroupDrop(list(g.entries), dropped, pre, saved))
    record = PruneRecord(
        step,
        record_groups,
        registry_checksum(model),
        structure_signature(core),
        model.count_params(),
        core.count_params(),
    )
    return core, record


def soft_prune(model: ModelGraph, groups: Sequence[DependencyGroup], drops) -> ModelGraph:
    """Zero the dropped channels in place of removing them.

    Producer slices (conv filters and biases, batchnorm affine terms, linear
    rows) are zeroed and batchnorm statistics reset to mean 0, variance 1,
    so a dropped channel outputs exactly zero.  Shapes do not change.
    """
    drops = _as_drop_list(groups, drops)
    out = model.copy()
    for g, d in zip(groups, drops):
        if d.size == 0:
            continue
        for e in g.entries:
            node = out.nodes[e.layer]
            if e.dim == "in":
                continue
            for key, axis, is_buf in dim_tensors(node, e.dim):
                arr = out.buffers[key] if is_buf else out.params[key].data
                fill = 1 if key.endswith("running_var") else 0
                index = [slice(None)] * arr.ndim
                index[axis] = d
                arr[tuple(index)] = fill
    return out


def _zero_channels(model: ModelGraph, group: DependencyGroup) -> np.ndarray:
    zero = np.ones(group.width, dtype=bool)
    for e in group.entries:
        if e.dim == "in":
            continue
        for key, axis, is_buf in dim_tensors(model.nodes[e.layer], e.dim):
            if is_buf:
                continue
            arr = np.moveaxis(model.params[key].data, axis, 0).reshape(group.width, -1)
            zero &= ~np.any(arr != 0, axis=1)
    return zero


def extract_core(
    soft_model: ModelGraph,
    groups: Sequence[DependencyGroup],
    original: ModelGraph | None = None,
    step: int = 1,
) -> tuple[ModelGraph, PruneRecord]:
    """Build the compact model holding only the non-zero channels.

    Channels whose producer weights are zero across the whole group are
    treated as pruned.  When ``original`` (the model before soft pruning) is
    given, the record keeps its values for the removed channels so a later
    rebuild restores the original weights rather than zeros.
    """
    drops = []
    for g in groups:
        if not g.prunable:
            drops.append(np.zeros(0, dtype=np.int64))
            continue
        zero = _zero_channels(soft_model, g)
        if zero.all():
            raise PruneError(f"group {g.name}: every channel is zero, nothing to keep")
        idx = np.flatnonzero(zero)
        suspicious = _unreset_stats(soft_model, g, idx)
        if suspicious.size:
            warnings.warn(
                f"group {g.name}: channels {suspicious.tolist()} have zero weights but live batchnorm "
                "statistics; treating them as pruned",
                stacklevel=2,
            )
        drops.append(idx)
    core, record = hard_prune(soft_model, groups, drops, step)
    if original is not None:
        _, orig_record = hard_prune(original, groups, drops, step)
        if orig_record.post_signature != record.post_signature:
            raise PruneError("original model does not match the soft-pruned model's structure")
        record = orig_record
        record.post_params = core.count_params()
    return core, record


def _unreset_stats(model: ModelGraph, group: DependencyGroup, idx: np.ndarray) -> np.ndarray:
    bad = np.zeros(idx.size, dtype=bool)
    for e in group.entries:
        node = model.nodes[e.layer]
        if node.kind == "batchnorm2d":
            mean = model.buffers[node.buffers["running_mean"]][idx]
            var = model.buffers[node.buffers["running_var"]][idx]
            bad |= (mean != 0) | (var != 1)
    return idx[bad]


def _reinsert(arr: np.ndarray, axis: int, positions: np.ndarray, values: np.ndarray) -> np.ndarray:
    n = arr.shape[axis] + positions.size
    shape = list(arr.shape)
    shape[axis] = n
    out = np.empty(shape, dtype=arr.dtype)
    keep = np.ones(n, dtype=bool)
    keep[positions] = False
    index = [slice(None)] * arr.ndim
    index[axis] = np.flatnonzero(keep)
    out[tuple(index)] = arr
    index[axis] = positions
    out[tuple(index)] = values
    return out


def rebuild(core: ModelGraph, record: PruneRecord) -> tuple[ModelGraph, FreezeMask]:
    """Undo one pruning step around ``core``.

    Every channel the record dropped is reinserted at its original position
    with the saved values; the core's own values are kept.  The returned
    mask freezes exactly the coordinates that came from the core.
    """
    if structure_signature(core) != record.post_signature:
        raise PruneError(f"core does not match the structure recorded by prune step {record.step}")
    for gd in record.groups:
        for e in gd.entries:
            if np.intersect1d(channel_origin(core, e), gd.dropped).size:
                raise PruneError(f"step {record.step}: dropped channels of {e.layer}.{e.dim} overlap kept channels")

    full = core.copy()
    pmask = {k: np.ones(t.shape, dtype=bool) for k, t in full.params.items()}
    bmask = {k: np.ones(b.shape, dtype=bool) for k, b in full.buffers.items()}
    for gd in reversed(record.groups):
        positions = {}
        pre_maps = {}
        for e in gd.entries:
            pre = np.union1d(channel_origin(full, e), gd.dropped)
            if pre.size != gd.pre_width:
                raise PruneError(f"step {record.step}: {e.layer}.{e.dim} would rebuild to {pre.size} channels, expected {gd.pre_width}")
            positions[(e.layer, e.dim)] = np.searchsorted(pre, gd.dropped)
            pre_maps[(e.layer, e.dim)] = pre
        for s in reversed(gd.slices):
            pos = expand_indices(positions[(s.layer, s.dim)], s.factor)
            masks = bmask if s.buffer else pmask
            arr = full.buffers[s.key] if s.buffer else full.params[s.key].data
            new = _reinsert(arr, s.axis, pos, s.values.astype(arr.dtype, copy=False))
            masks[s.key] = _reinsert(masks[s.key], s.axis, pos, np.zeros(s.values.shape, dtype=bool))
            if s.buffer:
                full.buffers[s.key] = new
            else:
                full.params[s.key].data = new
        for e in gd.entries:
            node = full.nodes[e.layer]
            set_dim_extent(node, e.dim, gd.pre_width * e.factor)
            set_channel_origin(full, e, pre_maps[(e.layer, e.dim)])
    return full, FreezeMask(pmask, bmask)


def slice_to(model: ModelGraph, record: PruneRecord) -> ModelGraph:
    """Apply a recorded step's drops (given in original coordinates) to ``model``."""
    out = model.copy()
    for gd in record.groups:
        e0 = gd.entries[0]
        omap = channel_origin(out, e0)
        current = np.searchsorted(omap, gd.dropped)
        if current.size and (current.max() >= omap.size or not np.array_equal(omap[current], gd.dropped)):
            raise PruneError(f"step {record.step}: channels {gd.dropped.tolist()} of {e0.layer}.{e0.dim} are not present")
        group = DependencyGroup(list(gd.entries), dim_extent(out.nodes[e0.layer], e0.dim) // e0.factor, True)
        apply_index_drop(out, group, current)
    return out


def models_equal(a: ModelGraph, b: ModelGraph) -> bool:
    """Bitwise equality of structure, parameters and buffers."""
    if structure_signature(a) != structure_signature(b):
        return False
    if a.params.keys() != b.params.keys() or a.buffers.keys() != b.buffers.keys():
        return False
    for k in a.params:
        x, y = a.params[k].data, b.params[k].data
        if x.dtype != y.dtype or x.shape != y.shape or x.tobytes() != y.tobytes():
            return False
    for k in a.buffers:
        x, y = a.buffers[k], b.buffers[k]
        if x.dtype != y.dtype or x.shape != y.shape or x.tobytes() != y.tobytes():
            return False
    return True


@dataclass
class LevelStack:
    """Prune records for levels 1..S plus one materialised model.

    Level 0 is the full network and level S the smallest core.  ``model``
    holds the weights of level ``top_level``; every other level is derived
    from it, by slicing for smaller levels and by reinserting recorded
    slices for larger ones.
    """

    records: list[PruneRecord]
    model: ModelGraph
    top_level: int
    arch: object = None
    costs: list[dict] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.records)

    def widths(self) -> list[dict[str, int]]:
        """Per-level width of every group touched by any record."""
        names = {}
        for r in self.records:
            for gd in r.groups:
                names.setdefault(f"{gd.entries[0].layer}.{gd.entries[0].dim}", gd)
        out = []
        for level in range(self.depth + 1):
            row = {}
            for name, first in names.items():
                w = first.pre_width
                for r in self.records[:level]:
                    for gd in r.groups:
                        if f"{gd.entries[0].layer}.{gd.entries[0].dim}" == name:
                            w = gd.post_width
                row[name] = w
            out.append(row)
        return out

    def switch_capacity(self, level: int) -> ModelGraph:
        """Materialise the model at ``level`` without any training."""
        if not 0 <= level <= self.depth:
            raise PruneError(f"level {level} is not materialised; stack holds levels 0..{self.depth}")
        m = self.model.copy()
        for step in range(self.top_level + 1, level + 1):
            m = slice_to(m, self.records[step - 1])
        for step in range(self.top_level, level, -1):
            m, _ = rebuild(m, self.records[step - 1])
        return m


def nesting_holds(stack: LevelStack, level: int, reference: ModelGraph) -> bool:
    """True when the stack's view of ``level`` equals ``reference`` bitwise."""
    return models_equal(stack.switch_capacity(level), reference)


Finetune = Callable[..., ModelGraph]


@dataclass
class PipelineResult:
    stack: LevelStack
    levels: list[ModelGraph]  # model right after each prune step, level 0 = input


def prune_step(
    model: ModelGraph,
    ratio: float,
    method: str = "l2_global",
    scope: str | None = None,
    layers: str = "all",
    protected: set[str] | None = None,
    batches: Sequence | None = None,
    step: int = 1,
) -> tuple[ModelGraph, PruneRecord]:
    """Score, rank and remove one fraction of channels."""
    scope = scope or ("local" if method == "l1" else "global")
    if layers not in ("all", "alternate"):
        raise PruneError(f"layers must be 'all' or 'alternate', got {layers!r}")
    groups = build_groups(model, protected)
    candidates = [i for i, g in enumerate(groups) if g.prunable]
    if layers == "alternate":
        candidates = candidates[::2]
    if not candidates:
        raise PruneError("no prunable groups left after applying protection and layer selection")
    vectors = score_groups(model, [groups[i] for i in candidates], method, batches)
    chosen = rank_for_drop(vectors, ratio, scope)
    drops = {i: d for i, d in zip(candidates, chosen)}
    if method == "soft":
        soft = soft_prune(model, groups, drops)
        return extract_core(soft, groups, original=model, step=step)
    return hard_prune(model, groups, drops, step)


def iterative_pipeline(
    model: ModelGraph,
    steps: int,
    ratio: float,
    method: str = "l2_global",
    finetune_each_step: bool = False,
    finetune: Finetune | None = None,
    scope: str | None = None,
    layers: str = "all",
    protected: set[str] | None = None,
    batches: Sequence | None = None,
) -> PipelineResult:
    """Prune ``steps`` times by ``ratio`` of the current widths.

    ``finetune(model)`` is called after every step when
    ``finetune_each_step`` is set, otherwise once on the final core.  A step
    that fails leaves earlier steps intact and ``model`` is never mutated.
    """
    if steps < 1:
        raise PruneError(f"steps must be >= 1, got {steps}")
    current = model
    records, levels = [], [model]
    costs = [cost_report(model)]
    for s in range(1, steps + 1):
        core, record = prune_step(current, ratio, method, scope, layers, protected, batches, step=s)
        levels.append(core)
        log.info("prune step %d: %d -> %d params", s, record.pre_params, record.post_params)
        if finetune is not None and (finetune_each_step or s == steps):
            core = finetune(core)
        records.append(record)
        costs.append(cost_report(core))
        current = core
    stack = LevelStack(records, current, steps, getattr(model, "arch", None), costs)
    return PipelineResult(stack, levels)


def rebuild_levels(stack: LevelStack, k: int, finetune: Finetune | None = None) -> tuple[LevelStack, list[ModelGraph]]:
    """Grow the stack's model by ``k`` levels, fine-tuning with the core frozen.

    ``finetune(model, mask)`` receives the freeze mask of each rebuilt level.
    Returns the updated stack and the model at every new level.
    """
    if k < 0 or k > stack.top_level:
        raise PruneError(f"cannot rebuild {k} levels from level {stack.top_level}")
    model, top = stack.model, stack.top_level
    grown = []
    for _ in range(k):
        model, mask = rebuild(model, stack.records[top - 1])
        if finetune is not None:
            model = finetune(model, mask)
        top -= 1
        grown.append(model)
    new = LevelStack(stack.records, model, top, stack.arch, list(stack.costs))
    return new, grown
