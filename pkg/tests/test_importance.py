import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elasticnn import depgraph as D
from elasticnn import graph as G
from elasticnn import importance as I
from elasticnn import tensor as T
from elasticnn import zoo
from elasticnn.data import make_synth
from elasticnn.depgraph import CouplingEntry, DependencyGroup
from elasticnn.errors import DataError, PruneError

from _builders import chain_model, group_of
from _oracles import zero_channel


def _fake_group(width, layer="x"):
    return DependencyGroup([CouplingEntry(layer, "out")], width, True)


def _vec(scores, layer="x"):
    return I.ImportanceVector(_fake_group(len(scores), layer), np.asarray(scores, dtype=float), "test")


def _pair_model():
    """conv1 (1 -> 2 channels, 1x1) feeding conv2 (2 -> 1, 1x1)."""
    m = G.ModelGraph((1, 2, 2), 2, "pair")
    m.add_conv("conv1", "input", 1, 2, 1, dtype=np.float64)
    m.add_conv("conv2", "conv1", 2, 1, 1, dtype=np.float64)
    m.add_avgpool("gap", "conv2")
    m.add_flatten("flat", "gap")
    m.add_linear("fc", "flat", 1, 2, dtype=np.float64)
    return m


@pytest.fixture(scope="module")
def tiny_batches():
    ds = make_synth(128, 4, 16, seed=3)
    return [(x.astype(np.float64), y) for x, y in ds.batches(16)]


class TestL1Filter:
    def _model(self, w):
        m = G.ModelGraph((2, 3, 3), 2, "l1")
        m.add_conv("c", "input", 2, 3, 1, dtype=np.float64)
        m.add_avgpool("gap", "c")
        m.add_flatten("flat", "gap")
        m.add_linear("fc", "flat", 3, 2, dtype=np.float64)
        m.params["c.weight"].data[...] = np.asarray(w, dtype=float).reshape(3, 2, 1, 1)
        return m, group_of(D.build_groups(m), "c", "out")

    def test_hand_sum(self):
        m, g = self._model([[1, -1], [0, 0], [2, 2]])
        np.testing.assert_array_equal(I.l1_filter(m, g).scores, [2, 0, 4])

    def test_zero_layer(self):
        m, g = self._model(np.zeros((3, 2)))
        np.testing.assert_array_equal(I.l1_filter(m, g).scores, 0)

    def test_homogeneous(self):
        m, g = self._model([[1, -1], [0, 0.5], [2, 2]])
        before = I.l1_filter(m, g).scores
        m.params["c.weight"].data *= 3
        after = I.l1_filter(m, g).scores
        np.testing.assert_allclose(after, 3 * before, rtol=1e-15)
        np.testing.assert_array_equal(np.argsort(after), np.argsort(before))

    def test_needs_conv_entry(self):
        m = chain_model()
        with pytest.raises(PruneError, match="conv"):
            I.l1_filter(m, DependencyGroup([CouplingEntry("bn1", "ch")], 8, True))


class TestMagnitudeL2:
    def test_euclidean(self):
        # single slot holding the 2-value slices [3, 4] and [0, 0]
        m2 = G.ModelGraph((2, 2, 2), 2)
        m2.add_conv("c", "input", 2, 2, 1, dtype=np.float64)
        m2.params["c.weight"].data[...] = np.array([[3.0, 4.0], [0.0, 0.0]]).reshape(2, 2, 1, 1)
        v = I.magnitude_l2(m2, DependencyGroup([CouplingEntry("c", "out")], 2, True))
        np.testing.assert_allclose(v.scores, [5.0, 0.0], rtol=1e-15)
        assert v.scope == "global"

    def test_identical_channels_tie(self):
        m = chain_model()
        m.params["conv1.weight"].data[3] = m.params["conv1.weight"].data[5]
        m.params["conv2.weight"].data[:, 3] = m.params["conv2.weight"].data[:, 5]
        v = I.magnitude_l2(m, group_of(D.build_groups(m), "conv1", "out"))
        assert v.scores[3] == v.scores[5]

    def test_mean_over_entries(self):
        m = _pair_model()
        m.params["conv1.weight"].data[...] = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        m.params["conv2.weight"].data[...] = np.array([3.0, 1.0]).reshape(1, 2, 1, 1)
        g = group_of(D.build_groups(m), "conv1", "out")
        assert {(e.layer, e.dim) for e in g.entries} == {("conv1", "out"), ("conv2", "in")}
        np.testing.assert_allclose(I.magnitude_l2(m, g).scores, [2.0, 2.0], rtol=1e-15)


class TestTaylor:
    def test_zero_gradient(self):
        m = chain_model()
        g = group_of(D.build_groups(m), "conv1", "out")
        grads = {k: np.zeros_like(t.data) for k, t in m.params.items()}
        np.testing.assert_array_equal(I.taylor(m, None, None, g, grads).scores, 0)

    def test_single_weight(self):
        m = G.ModelGraph((1, 1, 1), 2)
        m.add_conv("c", "input", 1, 1, 1, dtype=np.float64)
        m.params["c.weight"].data[...] = -1.5
        g = DependencyGroup([CouplingEntry("c", "out")], 1, True)
        v = I.taylor(m, None, None, g, {"c.weight": np.full((1, 1, 1, 1), 0.4)})
        assert v.scores[0] == pytest.approx(0.6, rel=1e-15)

    def test_missing_labels(self):
        m = chain_model()
        g = group_of(D.build_groups(m), "conv1", "out")
        with pytest.raises(DataError, match="labels"):
            I.taylor(m, np.zeros((2, 4, 6, 6)), None, g)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_zero_one_channel_oracle(self, tiny_batches, seed):
        x, y = tiny_batches[0]
        m = zoo.build("tinynet", seed=seed, dtype=np.float64)

        def loss(model):
            return float(T.cross_entropy(G.forward(model, x, "eval"), y).data)

        base = loss(m)
        for g in (g for g in D.build_groups(m) if g.prunable):
            s = I.taylor(m, x, y, g).scores
            lo = abs(loss(zero_channel(m, g, int(np.argmin(s)))) - base)
            hi = abs(loss(zero_channel(m, g, int(np.argmax(s)))) - base)
            assert lo <= hi, g.name


class TestHessian:
    def _single(self):
        m = G.ModelGraph((1, 2, 2), 2)
        m.add_conv("c", "input", 1, 2, 1, dtype=np.float64)
        return m, DependencyGroup([CouplingEntry("c", "out")], 2, True)

    def test_zero_gradients(self):
        m, g = self._single()
        zeros = {"c.weight": np.zeros((2, 1, 1, 1))}
        np.testing.assert_array_equal(I.hessian_diag(m, [None, None], g, grads_list=[zeros, zeros]).scores, 0)

    def test_min_max(self):
        m, g = self._single()
        grads = {"c.weight": np.array([0.1, 0.5]).reshape(2, 1, 1, 1)}
        np.testing.assert_allclose(I.hessian_diag(m, [None], g, grads_list=[grads]).scores, [0.0, 1.0])
        raw = I.hessian_diag(m, [None], g, scale=False, grads_list=[grads]).scores
        np.testing.assert_allclose(raw, [0.01, 0.25], rtol=1e-12)

    def test_empty_batches(self):
        m, g = self._single()
        with pytest.raises(DataError, match="batch"):
            I.hessian_diag(m, [], g)

    def test_more_batches_converge(self, tiny_batches):
        m = zoo.build("tinynet", seed=0, dtype=np.float64)
        g = group_of(D.build_groups(m), "block2.conv1", "out")
        grads = [I.gradients(m, x, y) for x, y in tiny_batches]
        single = np.array([I.hessian_diag(m, [b], g, scale=False, grads_list=[gr]).scores for b, gr in zip(tiny_batches, grads)])
        four = np.array([I.hessian_diag(m, tiny_batches[i:i + 4], g, scale=False, grads_list=grads[i:i + 4]).scores for i in (0, 4)])
        assert four.var(axis=0, ddof=1).mean() < single.var(axis=0, ddof=1).mean()


class TestRankForDrop:
    def test_local_sort(self):
        [drop] = I.rank_for_drop([_vec([0.1, 0.5, 0.3, 0.9])], 0.5)
        np.testing.assert_array_equal(drop, [0, 2])

    def test_ratio_zero(self):
        drops = I.rank_for_drop([_vec([0.1, 0.5]), _vec([3.0, 1.0, 2.0])], 0.0, "global")
        assert all(d.size == 0 for d in drops)

    def test_floor(self):
        [drop] = I.rank_for_drop([_vec(np.arange(10.0))], 0.3)
        np.testing.assert_array_equal(drop, [0, 1, 2])

    def test_ties_lower_index_first(self):
        [drop] = I.rank_for_drop([_vec([1.0, 1.0, 1.0, 1.0])], 0.5)
        np.testing.assert_array_equal(drop, [0, 1])

    def test_global_normalises_scale(self):
        small = _vec([0.5, 1.5, 0.9, 1.1], "a")
        large = _vec([50.0, 150.0, 90.0, 110.0], "b")
        a, b = I.rank_for_drop([small, large], 0.5, "global")
        assert a.size > 0 and b.size > 0
        np.testing.assert_array_equal(a, [0, 2])
        np.testing.assert_array_equal(b, [0, 2])

    def test_global_zero_mean_group(self):
        a, b = I.rank_for_drop([_vec([0.0, 0.0, 0.0], "a"), _vec([1.0, 2.0, 3.0], "b")], 0.5, "global")
        np.testing.assert_array_equal(a, [0, 1])
        np.testing.assert_array_equal(b, [])

    @pytest.mark.parametrize("ratio", [-0.1, 1.0, 1.5])
    def test_bad_ratio(self, ratio):
        with pytest.raises(PruneError, match="ratio"):
            I.rank_for_drop([_vec([1.0, 2.0])], ratio)

    def test_bad_scope(self):
        with pytest.raises(PruneError, match="scope"):
            I.rank_for_drop([_vec([1.0, 2.0])], 0.5, "layer")


@settings(max_examples=60, deadline=None)
@given(
    widths=st.lists(st.integers(1, 12), min_size=1, max_size=5),
    ratio=st.floats(0.0, 0.99),
    scope=st.sampled_from(["local", "global"]),
    seed=st.integers(0, 10_000),
)
def test_drop_sets_well_formed(widths, ratio, scope, seed):
    rng = np.random.default_rng(seed)
    vectors = [_vec(rng.exponential(size=w) * rng.choice([0.0, 1.0, 100.0]), f"g{i}") for i, w in enumerate(widths)]
    drops = I.rank_for_drop(vectors, ratio, scope)
    for v, d in zip(vectors, drops):
        assert d.size < v.group.width
        assert np.all(np.diff(d) > 0)
        assert d.size == 0 or (d.min() >= 0 and d.max() < v.group.width)
        if scope == "local":
            assert d.size == min(int(np.floor(v.group.width * ratio)), v.group.width - 1)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), method=st.sampled_from(list(I.METHODS)))
def test_scorers_well_formed(seed, method):
    rng = np.random.default_rng(seed)
    m = zoo.build(zoo.random_spec(rng), seed=seed, dtype=np.float64)
    x = rng.normal(size=(4,) + m.input_shape)
    y = rng.integers(0, m.num_classes, size=4)
    groups = [g for g in D.build_groups(m) if g.prunable]
    for v, g in zip(I.score_groups(m, groups, method, [(x, y), (x[::-1], y[::-1])]), groups):
        assert v.scores.shape == (g.width,)
        assert np.all(np.isfinite(v.scores)) and np.all(v.scores >= 0)


@settings(max_examples=15, deadline=None)
@given(c=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
def test_scaling_preserves_ranking(c, seed):
    m = chain_model(seed=seed)
    g = group_of(D.build_groups(m), "conv1", "out")
    l1, l2 = I.l1_filter(m, g).scores, I.magnitude_l2(m, g).scores
    scaled = m.copy()
    scaled.params["conv1.weight"].data *= c
    np.testing.assert_array_equal(np.argsort(I.l1_filter(scaled, g).scores, kind="stable"), np.argsort(l1, kind="stable"))
    # the L2 mean spans several layers, so every layer in the group is scaled together
    for key in ("conv1.weight", "bn1.weight", "bn1.bias", "conv2.weight"):
        scaled.params[key].data *= c if key != "conv1.weight" else 1.0
    np.testing.assert_array_equal(np.argsort(I.magnitude_l2(scaled, g).scores, kind="stable"), np.argsort(l2, kind="stable"))


def test_gradient_scores_deterministic(tiny_batches):
    m = zoo.build("tinynet", seed=4, dtype=np.float64)
    groups = [g for g in D.build_groups(m) if g.prunable]
    for method in ("taylor", "hessian"):
        a = I.score_groups(m, groups, method, tiny_batches[:3])
        b = I.score_groups(m.copy(), groups, method, tiny_batches[:3])
        for u, v in zip(a, b):
            assert u.scores.tobytes() == v.scores.tobytes()


def test_unknown_method():
    m = chain_model()
    with pytest.raises(PruneError, match="l2_global"):
        I.score_groups(m, D.build_groups(m), "random")
