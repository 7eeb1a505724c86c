import numpy as np
import pytest

from elasticnn import graph as G
from elasticnn import tensor as T
from elasticnn import zoo
from elasticnn.errors import GraphError, ShapeError

from _oracles import central_diff, closed_form_param_count, rel_err

BASELINE_PARAMS = {  # millions, baseline table
    "vgg16_bn_cifar10": (15.25, 0.01),
    "resnet20_cifar10": (0.27, 0.02),
    "resnet56_cifar10": (0.86, 0.02),
    "alexnet_10class": (57.04, 0.01),
}
BASELINE_MB = {"vgg16_bn_cifar10": 58.244, "resnet20_cifar10": 1.078, "resnet56_cifar10": 3.369, "alexnet_10class": 217.614}


@pytest.fixture(scope="module")
def zoo_models():
    return {name: zoo.build(name) for name in BASELINE_PARAMS}


class TestCounting:
    def test_single_conv(self):
        m = G.ModelGraph((3, 8, 8), 10)
        m.add_conv("c", "input", 3, 16, 3, bias=True)
        assert m.count_params() == 448

    def test_single_linear(self):
        m = G.ModelGraph((4096,), 10)
        m.add_linear("fc", "input", 4096, 10)
        assert G.count_params(m) == 40_970

    def test_empty_registry(self):
        m = G.ModelGraph((3, 4, 4), 2)
        assert G.model_size_bytes(m) == 0 and G.count_buffers(m) == 0

    def test_size_includes_buffers(self):
        m = zoo.build("tinynet")
        assert m.model_size_bytes() == 4 * (m.count_params() + m.count_buffers())

    @pytest.mark.parametrize("name", sorted(BASELINE_PARAMS))
    def test_zoo_params_match_baseline(self, zoo_models, name):
        want, tol = BASELINE_PARAMS[name]
        got = zoo_models[name].count_params() / 1e6
        assert abs(got - want) / want <= tol, f"{name}: {got:.4f}M vs {want}M"

    @pytest.mark.parametrize("name", sorted(BASELINE_MB))
    def test_zoo_sizes_match_baseline(self, zoo_models, name):
        got = zoo_models[name].model_size_bytes() / 2**20
        assert abs(got - BASELINE_MB[name]) / BASELINE_MB[name] <= 0.05

    def test_vgg_size_tight(self, zoo_models):
        got = zoo_models["vgg16_bn_cifar10"].model_size_bytes() / 2**20
        assert abs(got - 58.244) / 58.244 <= 0.02

    @pytest.mark.parametrize("name", sorted(BASELINE_PARAMS) + ["tinynet"])
    def test_registry_matches_closed_form(self, zoo_models, name):
        m = zoo_models.get(name) or zoo.build(name)
        assert m.count_params() == closed_form_param_count(m)

    def test_tinynet_scale(self):
        assert 25_000 <= zoo.build("tinynet").count_params() <= 35_000


class TestBuild:
    def test_unknown_name_lists_known(self):
        with pytest.raises(GraphError, match="resnet20_cifar10"):
            zoo.build("resnet1000")

    def test_bn_init_and_no_conv_bias(self):
        m = zoo.build("resnet20_cifar10")
        for node in m.nodes.values():
            if node.kind == "batchnorm2d":
                np.testing.assert_array_equal(m.params[node.params["weight"]].data, 1)
                np.testing.assert_array_equal(m.params[node.params["bias"]].data, 0)
            if node.kind == "conv2d":
                assert "bias" not in node.params

    def test_kaiming_uniform_bounds(self):
        m = zoo.build("tinynet", seed=3)
        w = m.params["stem.weight"].data
        bound = np.sqrt(6 / (3 * 9))
        assert np.abs(w).max() <= bound and np.abs(w).max() > 0.8 * bound

    def test_identity_origin_maps(self):
        m = zoo.build("tinynet")
        for (layer, dim), omap in m.origin.items():
            np.testing.assert_array_equal(omap, np.arange(G.dim_extent(m.nodes[layer], dim)))

    def test_residual_adds_match(self, zoo_models):
        for name in ("resnet20_cifar10", "resnet56_cifar10"):
            m = zoo_models[name]
            shapes = G.infer_shapes(m)
            adds = [n for n in m.nodes.values() if n.kind == "add"]
            assert adds
            for n in adds:
                assert shapes[n.inputs[0]] == shapes[n.inputs[1]]

    def test_seed_determinism(self):
        a, b = zoo.build("tinynet", seed=5), zoo.build("tinynet", seed=5)
        assert G.registry_checksum(a) == G.registry_checksum(b)
        assert G.registry_checksum(a) != G.registry_checksum(zoo.build("tinynet", seed=6))

    def test_validate_rejects_shared_tensor(self):
        m = zoo.build("tinynet")
        m.nodes["block1.conv2"].params["weight"] = m.nodes["block1.conv1"].params["weight"]
        with pytest.raises(GraphError, match="shared"):
            m.validate()


class TestForward:
    def test_zero_input_gives_classifier_bias(self):
        m = zoo.build("tinynet", seed=1)
        logits = G.forward(m, np.zeros((3, 3, 16, 16), dtype=np.float32)).data
        np.testing.assert_array_equal(logits, np.broadcast_to(m.params["fc.bias"].data, logits.shape))

    def test_eval_is_pure(self):
        m = zoo.build("tinynet")
        x = np.random.default_rng(0).normal(size=(4, 3, 16, 16)).astype(np.float32)
        before = G.registry_checksum(m)
        a, b = G.forward(m, x).data, G.forward(m, x).data
        assert a.tobytes() == b.tobytes()
        assert G.registry_checksum(m) == before

    def test_train_mode_touches_only_bn_stats(self):
        m = zoo.build("tinynet")
        params = {k: t.data.copy() for k, t in m.params.items()}
        G.forward(m, np.random.default_rng(0).normal(size=(4, 3, 16, 16)).astype(np.float32), "train")
        for k, t in m.params.items():
            np.testing.assert_array_equal(t.data, params[k])
        assert not np.array_equal(m.buffers["stem_bn.running_mean"], 0)

    def test_resnet20_single_image(self, zoo_models):
        x = np.random.default_rng(0).normal(size=(1, 3, 32, 32)).astype(np.float32)
        assert G.forward(zoo_models["resnet20_cifar10"], x).shape == (1, 10)

    @pytest.mark.parametrize("name", ["tinynet", "resnet20_cifar10", "resnet56_cifar10", "vgg16_bn_cifar10"])
    @pytest.mark.parametrize("batch", [1, 4])
    def test_zoo_shapes(self, zoo_models, name, batch):
        m = zoo_models.get(name) or zoo.build(name)
        x = np.zeros((batch,) + m.input_shape, dtype=np.float32)
        out = G.forward(m, x)
        assert out.shape == (batch, m.num_classes) and np.all(np.isfinite(out.data))

    def test_alexnet_shapes(self, zoo_models):
        m = zoo_models["alexnet_10class"]
        shapes = G.infer_shapes(m)
        assert shapes[m.output] == (10,)
        assert G.forward(m, np.zeros((1, 3, 224, 224), dtype=np.float32)).shape == (1, 10)

    def test_wrong_input_rejected(self):
        m = zoo.build("tinynet")
        with pytest.raises(ShapeError, match="input"):
            G.forward(m, np.zeros((1, 4, 16, 16), dtype=np.float32))

    def test_inner_mismatch_names_node(self):
        m = zoo.build("tinynet")
        m.nodes["block2.conv1"].attrs["in_channels"] = 7
        m.params["block2.conv1.weight"].data = np.zeros((40, 7, 3, 3), dtype=np.float32)
        with pytest.raises(ShapeError, match="block2.conv1"):
            G.forward(m, np.zeros((1, 3, 16, 16), dtype=np.float32))

    def test_count_invariant_under_execution(self):
        m = zoo.build("tinynet")
        n = m.count_params()
        x = np.random.default_rng(0).normal(size=(2, 3, 16, 16)).astype(np.float32)
        with T.Tape() as tape:
            loss = T.cross_entropy(G.forward(m, x, "train"), np.array([0, 1]))
        tape.backward(loss, m.params)
        assert m.count_params() == n

    def test_whole_graph_gradient(self):
        m = zoo.build(zoo.ArchSpec("g", "resnet", {"blocks": [1], "widths": [3], "head": "flatten"}, (3, 4, 4), 3), seed=2, dtype=np.float64)
        x = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
        y = np.array([0, 2])
        with T.Tape() as tape:
            loss = T.cross_entropy(G.forward(m, x, "eval"), y)
        grads = tape.backward(loss, m.params)
        for key in ("conv1.weight", "layer1.0.conv2.weight", "bn1.weight", "fc.weight"):
            numeric = central_diff(lambda: float(T.cross_entropy(G.forward(m, x, "eval"), y).data), m.params[key].data)
            assert rel_err(grads[key], numeric) <= 1e-5


class TestSerialisation:
    def test_from_state_round_trip(self):
        m = zoo.build("tinynet", seed=4)
        again = G.ModelGraph.from_state(
            m.to_dict(), {k: t.data for k, t in m.params.items()}, dict(m.buffers), dict(m.origin)
        )
        assert G.registry_checksum(again) == G.registry_checksum(m)
        assert G.structure_signature(again) == G.structure_signature(m)

    def test_from_state_rejects_bad_shape(self):
        m = zoo.build("tinynet")
        params = {k: t.data for k, t in m.params.items()}
        params["fc.weight"] = params["fc.weight"][:, :3]
        with pytest.raises(ShapeError, match="fc.weight"):
            G.ModelGraph.from_state(m.to_dict(), params, dict(m.buffers), dict(m.origin))
