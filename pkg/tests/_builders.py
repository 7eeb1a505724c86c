"""Small hand-built models shared by several test modules."""

import numpy as np

from elasticnn import graph as G


def chain_model(c0=4, c1=8, c2=6, k=3, bias=False, seed=0):
    m = G.ModelGraph((c0, 6, 6), 3, "chain")
    rng = np.random.default_rng(seed)
    m.add_conv("conv1", "input", c0, c1, k, 1, 1, bias=bias, rng=rng, dtype=np.float64)
    m.add_bn("bn1", "conv1", c1, dtype=np.float64)
    m.add_relu("relu1", "bn1")
    m.add_conv("conv2", "relu1", c1, c2, k, 1, 1, bias=bias, rng=rng, dtype=np.float64)
    m.add_avgpool("gap", "conv2")
    m.add_flatten("flat", "gap")
    m.add_linear("fc", "flat", c2, 3, rng=rng, dtype=np.float64)
    return m


def slots(group):
    return {(e.layer, e.dim) for e in group.entries}


def group_of(groups, layer, dim):
    for g in groups:
        if (layer, dim) in slots(g):
            return g
    raise AssertionError(f"{layer}.{dim} not grouped")
