"""Architecture specs and builders.

The CIFAR-style VGG/ResNet layouts follow the widely used
``pytorch-cifar-models`` definitions; AlexNet follows the torchvision
layout at 224x224 input with a 10-way head.  ``tinynet`` is a desk-scale
residual net for runnable training tests.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import GraphError
from .graph import ModelGraph

VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]


@dataclass
class ArchSpec:
    name: str
    family: str
    plan: dict = field(default_factory=dict)
    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(d["name"], d["family"], dict(d["plan"]), tuple(d["input_shape"]), int(d["num_classes"]))


ZOO: dict[str, ArchSpec] = {
    "vgg16_bn_cifar10": ArchSpec("vgg16_bn_cifar10", "vgg", {"cfg": VGG16_CFG, "classifier": [512, 512]}),
    "resnet20_cifar10": ArchSpec("resnet20_cifar10", "resnet", {"blocks": 3, "widths": [16, 32, 64]}),
    "resnet56_cifar10": ArchSpec("resnet56_cifar10", "resnet", {"blocks": 9, "widths": [16, 32, 64]}),
    "alexnet_10class": ArchSpec("alexnet_10class", "alexnet", {}, (3, 224, 224), 10),
    "tinynet": ArchSpec("tinynet", "tiny", {"widths": [20, 40]}, (3, 16, 16), 4),
}


def get_spec(name: str) -> ArchSpec:
    try:
        return ZOO[name]
    except KeyError:
        raise GraphError(f"unknown architecture {name!r}; known: {', '.join(sorted(ZOO))}") from None


def build(spec: ArchSpec | str, seed: int = 0, dtype=T.DEFAULT_DTYPE, num_classes: int | None = None) -> ModelGraph:
    """Realise ``spec`` as a freshly initialised :class:`ModelGraph`."""
    if isinstance(spec, str):
        spec = get_spec(spec)
    if num_classes is not None and num_classes != spec.num_classes:
        spec = ArchSpec(spec.name, spec.family, dict(spec.plan), spec.input_shape, num_classes)
    builders = {"vgg": _vgg, "resnet": _resnet, "alexnet": _alexnet, "tiny": _tiny}
    if spec.family not in builders:
        raise GraphError(f"unknown architecture family {spec.family!r}")
    rng = np.random.default_rng(seed)
    model = ModelGraph(spec.input_shape, spec.num_classes, spec.name)
    builders[spec.family](model, spec, rng, dtype)
    model.arch = spec
    model.validate()
    return model


def _vgg(m: ModelGraph, spec: ArchSpec, rng, dtype):
    src, ch, n = "input", spec.input_shape[0], 0
    for v in spec.plan["cfg"]:
        if v == "M":
            src = m.add_maxpool(f"pool{n}", src, 2)
            continue
        n += 1
        src = m.add_conv(f"conv{n}", src, ch, v, 3, 1, 1, rng=rng, dtype=dtype)
        src = m.add_bn(f"bn{n}", src, ch := v, dtype=dtype)
        src = m.add_relu(f"relu{n}", src)
    src = m.add_flatten("flatten", src)
    spatial = spec.input_shape[1] // 2 ** spec.plan["cfg"].count("M")
    feats = ch * spatial * spatial
    for i, width in enumerate(spec.plan.get("classifier", [])):
        src = m.add_linear(f"fc{i + 1}", src, feats, width, rng=rng, dtype=dtype)
        src = m.add_relu(f"fc{i + 1}_relu", src)
        feats = width
    m.add_linear("classifier", src, feats, spec.num_classes, rng=rng, dtype=dtype)


def _basic_block(m, name, src, cin, cout, stride, rng, dtype):
    h = m.add_conv(f"{name}.conv1", src, cin, cout, 3, stride, 1, rng=rng, dtype=dtype)
    h = m.add_bn(f"{name}.bn1", h, cout, dtype=dtype)
    h = m.add_relu(f"{name}.relu1", h)
    h = m.add_conv(f"{name}.conv2", h, cout, cout, 3, 1, 1, rng=rng, dtype=dtype)
    h = m.add_bn(f"{name}.bn2", h, cout, dtype=dtype)
    if stride != 1 or cin != cout:
        s = m.add_conv(f"{name}.down", src, cin, cout, 1, stride, 0, rng=rng, dtype=dtype)
        src = m.add_bn(f"{name}.down_bn", s, cout, dtype=dtype)
    h = m.add_sum(f"{name}.add", h, src)
    return m.add_relu(f"{name}.relu2", h)


def _resnet(m: ModelGraph, spec: ArchSpec, rng, dtype):
    widths = spec.plan["widths"]
    blocks = spec.plan["blocks"]
    blocks = [blocks] * len(widths) if isinstance(blocks, int) else list(blocks)
    src = m.add_conv("conv1", "input", spec.input_shape[0], widths[0], 3, 1, 1, rng=rng, dtype=dtype)
    src = m.add_bn("bn1", src, widths[0], dtype=dtype)
    src = m.add_relu("relu1", src)
    ch, size = widths[0], spec.input_shape[1]
    for si, (width, nblocks) in enumerate(zip(widths, blocks)):
        for bi in range(nblocks):
            stride = 2 if si > 0 and bi == 0 else 1
            src = _basic_block(m, f"layer{si + 1}.{bi}", src, ch, width, stride, rng, dtype)
            size = (size - 1) // stride + 1
            ch = width
    if spec.plan.get("head", "avg") == "flatten":
        src = m.add_flatten("flatten", src)
        m.add_linear("fc", src, ch * size * size, spec.num_classes, rng=rng, dtype=dtype)
    else:
        src = m.add_avgpool("avgpool", src)
        src = m.add_flatten("flatten", src)
        m.add_linear("fc", src, ch, spec.num_classes, rng=rng, dtype=dtype)


def _alexnet(m: ModelGraph, spec: ArchSpec, rng, dtype):
    layers = [(64, 11, 4, 2, True), (192, 5, 1, 2, True), (384, 3, 1, 1, False), (256, 3, 1, 1, False), (256, 3, 1, 1, True)]
    src, ch = "input", spec.input_shape[0]
    for i, (out, k, s, p, pool) in enumerate(layers, 1):
        src = m.add_conv(f"conv{i}", src, ch, out, k, s, p, bias=True, rng=rng, dtype=dtype)
        src = m.add_relu(f"relu{i}", src)
        if pool:
            src = m.add_maxpool(f"pool{i}", src, 3, 2)
        ch = out
    src = m.add_flatten("flatten", src)
    src = m.add_linear("fc1", src, ch * 6 * 6, 4096, rng=rng, dtype=dtype)
    src = m.add_relu("fc1_relu", src)
    src = m.add_linear("fc2", src, 4096, 4096, rng=rng, dtype=dtype)
    src = m.add_relu("fc2_relu", src)
    m.add_linear("classifier", src, 4096, spec.num_classes, rng=rng, dtype=dtype)


def _tiny(m: ModelGraph, spec: ArchSpec, rng, dtype):
    w1, w2 = spec.plan["widths"]
    src = m.add_conv("stem", "input", spec.input_shape[0], w1, 3, 1, 1, rng=rng, dtype=dtype)
    src = m.add_bn("stem_bn", src, w1, dtype=dtype)
    src = m.add_relu("stem_relu", src)
    src = _basic_block(m, "block1", src, w1, w1, 1, rng, dtype)
    src = m.add_maxpool("pool", src, 2)
    src = _basic_block(m, "block2", src, w1, w2, 1, rng, dtype)
    src = m.add_avgpool("avgpool", src)
    src = m.add_flatten("flatten", src)
    m.add_linear("fc", src, w2, spec.num_classes, rng=rng, dtype=dtype)


def random_spec(rng: np.random.Generator, name: str = "random") -> ArchSpec:
    """A small random residual or plain architecture, used by fuzz tests."""
    if rng.random() < 0.7:
        stages = int(rng.integers(1, 4))
        widths = [int(rng.integers(2, 9)) for _ in range(stages)]
        blocks = [int(rng.integers(1, 3)) for _ in range(stages)]
        head = "flatten" if rng.random() < 0.4 else "avg"
        return ArchSpec(name, "resnet", {"blocks": blocks, "widths": widths, "head": head}, (3, 8, 8), int(rng.integers(2, 5)))
    cfg: list = []
    for _ in range(int(rng.integers(1, 3))):
        cfg += [int(rng.integers(2, 9)) for _ in range(int(rng.integers(1, 3)))] + ["M"]
    classifier = [int(rng.integers(3, 8))] if rng.random() < 0.5 else []
    return ArchSpec(name, "vgg", {"cfg": cfg, "classifier": classifier}, (3, 8, 8), int(rng.integers(2, 5)))
