"""Channel importance scores and drop-set ranking.

Scores are computed per dependency group.  Each slot of a group exposes a
``width x n`` matrix whose row ``c`` holds every value attached to channel
``c`` in that slot (a conv filter, a conv input slice, a batchnorm
``(gamma, beta)`` pair, the linear columns fed by the channel).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .depgraph import CouplingEntry, DependencyGroup
from .errors import DataError, PruneError
from .graph import ModelGraph, forward

METHODS = ("l1", "l2_global", "taylor", "hessian", "soft")


@dataclass
class ImportanceVector:
    group: DependencyGroup
    scores: np.ndarray
    method: str
    scope: str = "local"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (self.group.width,):
            raise PruneError(f"{self.method}: {self.scores.size} scores for a group of width {self.group.width}")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise PruneError(f"{self.method}: scores must be finite and non-negative")


def channel_matrix(model: ModelGraph, entry: CouplingEntry, source: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """Values attached to each channel of ``entry``, one row per channel.

    ``source`` maps registry keys to arrays (e.g. gradients); it defaults to
    the model's parameter values.  Biases are left out of conv and linear
    slices.
    """
    node = model.nodes[entry.layer]

    def get(role):
        key = node.params[role]
        return np.asarray(source[key] if source is not None else model.params[key].data, dtype=np.float64)

    if node.kind == "conv2d":
        w = get("weight")
        if entry.dim == "out":
            return w.reshape(w.shape[0], -1)
        return w.swapaxes(0, 1).reshape(w.shape[1], -1)
    if node.kind == "batchnorm2d":
        return np.stack([get("weight"), get("bias")], axis=1)
    if node.kind == "linear":
        w = get("weight")
        if entry.dim == "out":
            return w
        f = entry.factor
        return w.reshape(w.shape[0], w.shape[1] // f, f).transpose(1, 0, 2).reshape(w.shape[1] // f, -1)
    raise PruneError(f"{node.kind} has no channel slices")


def _designated_conv(model: ModelGraph, group: DependencyGroup) -> CouplingEntry:
    convs = group.conv_out_entries(model)
    if not convs:
        raise PruneError(f"group {group.name} has no conv output entry to score")
    return convs[0]


def l1_filter(model: ModelGraph, group: DependencyGroup) -> ImportanceVector:
    """L1 norm of each filter of the group's first conv output slot."""
    rows = channel_matrix(model, _designated_conv(model, group))
    return ImportanceVector(group, np.abs(rows).sum(axis=1), "l1", "local")


def magnitude_l2(model: ModelGraph, group: DependencyGroup, all_entries: bool = True) -> ImportanceVector:
    """Per-channel L2 norm, averaged over the group's slots."""
    entries = group.entries if all_entries else [_designated_conv(model, group)]
    norms = [np.sqrt((channel_matrix(model, e) ** 2).sum(axis=1)) for e in entries]
    return ImportanceVector(group, np.mean(norms, axis=0), "l2_global", "global")


def gradients(model: ModelGraph, batch, labels) -> dict[str, np.ndarray]:
    """Cross-entropy gradients of every parameter for one labelled batch.

    Runs in eval mode so batchnorm statistics are not touched.
    """
    if labels is None:
        raise DataError("gradient-based importance needs labels")
    with T.Tape() as tape:
        logits = forward(model, batch, "eval")
        loss = T.cross_entropy(logits, np.asarray(labels))
    return tape.backward(loss, model.params)


def taylor(model: ModelGraph, batch, labels, group: DependencyGroup, grads: Mapping[str, np.ndarray] | None = None) -> ImportanceVector:
    """First-order Taylor score ``|sum(w * dL/dw)|`` per channel, averaged over slots."""
    if grads is None:
        grads = gradients(model, batch, labels)
    per_entry = []
    for e in group.entries:
        w = channel_matrix(model, e)
        g = channel_matrix(model, e, grads)
        per_entry.append(np.abs((w * g).sum(axis=1)))
    return ImportanceVector(group, np.mean(per_entry, axis=0), "taylor", "global")


def hessian_diag(
    model: ModelGraph,
    batches: Sequence,
    group: DependencyGroup,
    scale: bool = True,
    grads_list: Sequence[Mapping[str, np.ndarray]] | None = None,
) -> ImportanceVector:
    """Empirical-Fisher diagonal (summed squared gradients) per channel.

    Averaged over slots and batches, then min-max scaled to [0, 1] within
    the group when ``scale`` is set.  ``batches`` is a sequence of
    ``(images, labels)`` pairs.
    """
    if grads_list is None:
        if len(batches) == 0:
            raise DataError("hessian importance needs at least one batch")
        grads_list = [gradients(model, x, y) for x, y in batches]
    if len(grads_list) == 0:
        raise DataError("hessian importance needs at least one batch")
    acc = np.zeros(group.width)
    for grads in grads_list:
        acc += np.mean([(channel_matrix(model, e, grads) ** 2).sum(axis=1) for e in group.entries], axis=0)
    scores = acc / len(grads_list)
    if scale:
        lo, hi = scores.min(), scores.max()
        scores = (scores - lo) / (hi - lo) if hi > lo else np.zeros_like(scores)
    return ImportanceVector(group, scores, "hessian", "global")


def score_groups(
    model: ModelGraph,
    groups: Sequence[DependencyGroup],
    method: str,
    batches: Sequence | None = None,
) -> list[ImportanceVector]:
    """Score every group in ``groups`` with one method.

    Gradient methods reuse one backward pass per batch across all groups:
    taylor uses the first batch, hessian all of them.
    """
    if method not in METHODS:
        raise PruneError(f"unknown importance method {method!r}; known: {', '.join(METHODS)}")
    if method == "l1":
        return [l1_filter(model, g) for g in groups]
    if method in ("l2_global", "soft"):
        return [magnitude_l2(model, g) for g in groups]
    if not batches:
        raise DataError(f"{method} importance needs labelled batches")
    if method == "taylor":
        x, y = batches[0]
        grads = gradients(model, x, y)
        return [taylor(model, x, y, g, grads) for g in groups]
    grads_list = [gradients(model, x, y) for x, y in batches]
    return [hessian_diag(model, batches, g, grads_list=grads_list) for g in groups]


def rank_for_drop(vectors: Sequence[ImportanceVector], ratio: float, scope: str = "local") -> list[np.ndarray]:
    """Choose the channels to drop from each scored group.

    ``local`` drops ``floor(width * ratio)`` lowest scores per group.
    ``global`` divides each group's scores by the group mean, pools all
    channels and drops the ``floor(total * ratio)`` lowest.  Either way every
    group keeps at least one channel and ties go to the lower index.
    """
    if not 0 <= ratio < 1:
        raise PruneError(f"pruning ratio must lie in [0, 1), got {ratio}")
    if scope not in ("local", "global"):
        raise PruneError(f"scope must be 'local' or 'global', got {scope!r}")

    if scope == "local":
        drops = []
        for v in vectors:
            n = min(int(np.floor(v.group.width * ratio)), v.group.width - 1)
            order = np.lexsort((np.arange(v.scores.size), v.scores))
            drops.append(np.sort(order[:n]).astype(np.int64))
        return drops

    pooled_score, pooled_chan, pooled_group = [], [], []
    for gi, v in enumerate(vectors):
        mean = v.scores.mean() if v.scores.size else 0.0
        norm = v.scores / mean if mean > 0 else np.zeros_like(v.scores)
        pooled_score.append(norm)
        pooled_chan.append(np.arange(v.scores.size))
        pooled_group.append(np.full(v.scores.size, gi))
    if not vectors:
        return []
    score = np.concatenate(pooled_score)
    chan = np.concatenate(pooled_chan)
    grp = np.concatenate(pooled_group)
    n_total = int(np.floor(score.size * ratio))
    order = np.lexsort((grp, chan, score))
    chosen: list[list[int]] = [[] for _ in vectors]
    for i in order[:n_total]:
        chosen[grp[i]].append(int(chan[i]))
    drops = []
    for gi, v in enumerate(vectors):
        picked = chosen[gi]  # ascending importance order
        if len(picked) >= v.group.width:
            picked = picked[: v.group.width - 1]
        drops.append(np.array(sorted(picked), dtype=np.int64))
    return drops
