"""Independent reference implementations used as test oracles.

Nothing here imports the package's kernels; each function recomputes a
quantity from its textbook definition with plain loops.
"""

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, pad=0):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[ni, oi, i, j] = np.sum(patch * w[oi]) + (b[oi] if b is not None else 0.0)
    return out


def maxpool_loops(x, k, stride):
    n, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.empty((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, :, i, j] = x[:, :, i * stride:i * stride + k, j * stride:j * stride + k].max(axis=(2, 3))
    return out


def central_diff(f, arr, h=1e-4):
    """Numerical gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def closed_form_param_count(model):
    """Count parameters from layer attributes alone."""
    total = 0
    for node in model.nodes.values():
        a = node.attrs
        if node.kind == "conv2d":
            total += a["out_channels"] * a["in_channels"] * a["k"] ** 2 + (a["out_channels"] if a["bias"] else 0)
        elif node.kind == "batchnorm2d":
            total += 2 * a["channels"]
        elif node.kind == "linear":
            total += a["out_features"] * a["in_features"] + (a["out_features"] if a["bias"] else 0)
    return total


def zero_channel(model, group, c):
    """Copy of ``model`` with every value tied to channel ``c`` of ``group`` set to zero."""
    out = model.copy()
    for e in group.entries:
        node = out.nodes[e.layer]
        for role, key in node.params.items():
            d = out.params[key].data
            if node.kind == "batchnorm2d":
                d[c] = 0
            elif e.dim == "out":
                d[c] = 0
            elif role == "weight" and node.kind == "conv2d":
                d[:, c] = 0
            elif role == "weight":
                d[:, c * e.factor:(c + 1) * e.factor] = 0
    return out
