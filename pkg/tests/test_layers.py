"""Layer semantics, initialisation laws, model assembly, checkpoints."""

import io

import numpy as np
import pytest

from amlgnn import ModelConfig, Tensor, build_model, load_checkpoint, save_checkpoint
from amlgnn import autodiff as ad
from amlgnn.errors import BadShape, ConfigOutOfRange, UnknownAggregator
from amlgnn.layers import (
    GRAPHNORM_EPS,
    LEAKY_SLOPE,
    GatLayer,
    GcnLayer,
    GraphContext,
    GraphNorm,
    LinearLayer,
    SageLayer,
)
from amlgnn.rng import RngStream

from conftest import gradcheck, make_graph, permute_graph


def ctx_for(edges, n, feat=None):
    g = make_graph(n, edges, [1] * n, [1] * n, features=feat)
    return g, GraphContext(g)


class TestInitialisers:
    def test_xavier_bound(self):
        from amlgnn import xavier_uniform

        sample = xavier_uniform((100, 200), RngStream(0))
        bound = np.sqrt(6.0 / 300.0)
        assert np.all(np.abs(sample) < bound)
        assert sample.max() > 0.9 * bound  # actually fills the support

    def test_xavier_variance(self):
        from amlgnn import xavier_uniform

        sample = xavier_uniform((500, 500), RngStream(1))
        target = 2.0 / 1000.0
        assert abs(sample.var() - target) / target < 0.05

    def test_xavier_gain(self):
        from amlgnn import xavier_uniform

        zeros = xavier_uniform((10, 10), RngStream(2), gain=0.0)
        np.testing.assert_array_equal(zeros, np.zeros((10, 10)))
        doubled = np.abs(xavier_uniform((100, 100), RngStream(3), gain=2.0))
        assert doubled.max() > np.sqrt(6.0 / 200.0)  # exceeds the gain-1 bound

    def test_kaiming_bound_and_variance(self):
        from amlgnn import kaiming_uniform

        sample = kaiming_uniform((3, 2000), RngStream(4))
        assert np.all(np.abs(sample) < np.sqrt(2.0) + 1e-12)
        big = kaiming_uniform((500, 500), RngStream(5))
        target = 2.0 / 500.0
        assert abs(big.var() - target) / target < 0.05

    def test_bad_shape(self):
        from amlgnn import kaiming_uniform, xavier_uniform

        with pytest.raises(BadShape):
            xavier_uniform((5,), RngStream(0))
        with pytest.raises(BadShape):
            kaiming_uniform((0, 3), RngStream(0))

    def test_reset_deterministic(self):
        a = GcnLayer(4, 3)
        b = GcnLayer(4, 3)
        a.reset_default(RngStream(9, ("layer",)))
        b.reset_default(RngStream(9, ("layer",)))
        np.testing.assert_array_equal(a.weight.data, b.weight.data)

    def test_sage_default_bound(self):
        layer = SageLayer(100, 50)
        layer.reset_default(RngStream(1))
        assert np.all(np.abs(layer.w_self.data) <= 0.1)
        assert np.all(np.abs(layer.w_neigh.data) <= 0.1)
        np.testing.assert_array_equal(layer.bias.data, 0.0)

    def test_graphnorm_reset_constants(self):
        norm = GraphNorm(5)
        norm.gamma.data[...] = 9.0
        norm.reset_default()
        np.testing.assert_array_equal(norm.gamma.data, 1.0)
        np.testing.assert_array_equal(norm.beta.data, 0.0)
        np.testing.assert_array_equal(norm.alpha.data, 1.0)


class TestGcn:
    def test_isolated_node_identity(self):
        g, ctx = ctx_for([], 1, feat=np.array([[2.0, -1.0]]))
        layer = GcnLayer(2, 2)
        layer.weight.data[...] = np.eye(2)
        out = layer.forward(ctx, Tensor(g.features))
        np.testing.assert_allclose(out.data, g.features)  # self-loop coeff 1/1

    def test_two_node_hand_value(self):
        g, ctx = ctx_for([(0, 1)], 2, feat=np.array([[1.0], [3.0]]))
        layer = GcnLayer(1, 1)
        layer.weight.data[...] = 1.0
        out = layer.forward(ctx, Tensor(g.features))
        np.testing.assert_allclose(out.data, [[2.0], [2.0]])

    def test_coefficients(self):
        _, ctx = ctx_for([(0, 1)], 2)
        adj = ctx.gcn_adj
        np.testing.assert_allclose(adj.coeffs, [0.5, 0.5, 0.5, 0.5])

    def test_duplicate_edges_do_not_change_output(self):
        feat = np.random.default_rng(0).normal(size=(4, 3))
        g1, ctx1 = ctx_for([(0, 1), (1, 2), (2, 3)], 4, feat)
        g2, ctx2 = ctx_for([(0, 1), (1, 0), (1, 2), (1, 2), (2, 3)], 4, feat)
        layer = GcnLayer(3, 2)
        layer.reset_default(RngStream(1))
        out1 = layer.forward(ctx1, Tensor(feat))
        out2 = layer.forward(ctx2, Tensor(feat))
        np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)


class TestGat:
    @staticmethod
    def oracle(layer, g, H):
        """Scalar recomputation of single-head attention."""
        W = layer.weights[0].data
        a_src = layer.att_src[0].data.reshape(-1)
        a_dst = layer.att_dst[0].data.reshape(-1)
        Z = H @ W
        s_src, s_dst = Z @ a_src, Z @ a_dst
        leaky = lambda v: v if v > 0 else LEAKY_SLOPE * v
        out = np.zeros_like(Z)
        for i in range(g.num_nodes):
            nbrs = sorted(set(g.neighbors(i).tolist()) | {i})
            e = np.array([leaky(s_src[i] + s_dst[j]) for j in nbrs])
            e = np.exp(e - e.max())
            alpha = e / e.sum()
            out[i] = sum(a * Z[j] for a, j in zip(alpha, nbrs))
        return out + layer.bias.data

    def test_isolated_node_self_attention(self):
        g, ctx = ctx_for([], 1, feat=np.array([[1.0, 2.0]]))
        layer = GatLayer(2, 2)
        layer.reset_default(RngStream(0))
        out = layer.forward(ctx, Tensor(g.features))
        expected = g.features @ layer.weights[0].data + layer.bias.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_zero_attention_vectors_give_uniform_mean(self):
        feat = np.random.default_rng(1).normal(size=(3, 2))
        g, ctx = ctx_for([(0, 1), (0, 2)], 3, feat)
        layer = GatLayer(2, 3)
        layer.reset_default(RngStream(2))
        layer.att_src[0].data[...] = 0.0
        layer.att_dst[0].data[...] = 0.0
        out = layer.forward(ctx, Tensor(feat))
        Z = feat @ layer.weights[0].data
        expected = np.array([Z[[0, 1, 2]].mean(0), Z[[0, 1]].mean(0), Z[[0, 2]].mean(0)])
        np.testing.assert_allclose(out.data, expected + layer.bias.data, atol=1e-12)

    def test_star_matches_scalar_oracle(self):
        feat = np.array([[0.3, -1.2], [2.0, 0.5], [-0.7, 1.1]])
        g, ctx = ctx_for([(0, 1), (0, 2)], 3, feat)
        layer = GatLayer(2, 2)
        layer.weights[0].data[...] = [[0.5, -0.3], [1.1, 0.7]]
        layer.att_src[0].data[...] = [[0.9], [-0.4]]
        layer.att_dst[0].data[...] = [[0.2], [0.6]]
        layer.bias.data[...] = [[0.1, -0.2]]
        out = layer.forward(ctx, Tensor(feat))
        np.testing.assert_allclose(out.data, self.oracle(layer, g, feat), atol=1e-10)

    def test_multi_head_concat_width(self):
        g, ctx = ctx_for([(0, 1)], 2)
        layer = GatLayer(3, 4, heads=3, average_heads=False)
        layer.reset_default(RngStream(3))
        out = layer.forward(ctx, Tensor(g.features))
        assert out.data.shape == (2, 12)

    def test_multi_head_average_width(self):
        g, ctx = ctx_for([(0, 1)], 2)
        layer = GatLayer(3, 4, heads=3, average_heads=True)
        layer.reset_default(RngStream(3))
        out = layer.forward(ctx, Tensor(g.features))
        assert out.data.shape == (2, 4)


class TestSage:
    def test_isolated_node(self):
        g, ctx = ctx_for([], 1, feat=np.array([[1.5, -2.0]]))
        layer = SageLayer(2, 2)
        layer.reset_default(RngStream(0))
        out = layer.forward(ctx, Tensor(g.features))
        expected = g.features @ layer.w_self.data + layer.bias.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    @pytest.mark.parametrize(
        "aggregator,expected", [("mean", [[5.0], [2.0], [5.0]]), ("max", [[5.0], [3.0], [5.0]])]
    )
    def test_path_hand_values(self, aggregator, expected):
        feat = np.array([[1.0], [5.0], [3.0]])
        g, ctx = ctx_for([(0, 1), (1, 2)], 3, feat)
        layer = SageLayer(1, 1, aggregator)
        layer.w_self.data[...] = 0.0
        layer.w_neigh.data[...] = 1.0
        out = layer.forward(ctx, Tensor(feat))
        np.testing.assert_allclose(out.data, expected)

    def test_unknown_aggregator(self):
        with pytest.raises(UnknownAggregator):
            SageLayer(2, 2, "lstm")


class TestGraphNorm:
    @staticmethod
    def oracle(H, alpha, gamma, beta):
        out = np.empty_like(H)
        for k in range(H.shape[1]):
            col = H[:, k]
            centered = col - alpha[k] * col.mean()
            sigma = np.sqrt((centered**2).mean() + GRAPHNORM_EPS)
            out[:, k] = gamma[k] * centered / sigma + beta[k]
        return out

    def test_normalisation_identity(self):
        rng = np.random.default_rng(0)
        h = rng.normal(loc=3.0, scale=2.5, size=(200, 4))
        norm = GraphNorm(4)
        out = norm.forward(Tensor(h)).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-4)

    def test_constant_column_collapses_to_beta(self):
        norm = GraphNorm(2)
        norm.beta.data[...] = [[0.7, -0.3]]
        h = np.full((10, 2), 4.2)
        out = norm.forward(Tensor(h)).data
        np.testing.assert_allclose(out, np.broadcast_to([0.7, -0.3], (10, 2)), atol=1e-12)

    def test_matches_scalar_oracle_and_gradients(self):
        rng = np.random.default_rng(1)
        h = rng.normal(size=(5, 3))
        norm = GraphNorm(3)
        norm.alpha.data[...] = 0.5
        norm.gamma.data[...] = 2.0
        norm.beta.data[...] = 1.0
        out = norm.forward(Tensor(h)).data
        np.testing.assert_allclose(
            out, self.oracle(h, [0.5] * 3, [2.0] * 3, [1.0] * 3), atol=1e-12
        )
        x = Tensor(h)
        weights = Tensor(rng.normal(size=(5, 3)))
        params = [norm.alpha, norm.gamma, norm.beta]
        assert gradcheck(lambda: ad.reduce_sum(ad.mul(norm.forward(x), weights)), params) < 1e-6


class TestEquivariance:
    @pytest.mark.parametrize("layer_type", ["gcn", "gat", "sage_mean", "sage_max"])
    def test_permutation_equivariance(self, layer_type):
        rng = np.random.default_rng(42)
        edges = [(int(a), int(b)) for a, b in rng.integers(0, 20, size=(30, 2)) if a != b]
        g = make_graph(20, edges, [1] * 20, [1] * 20, features=rng.normal(size=(20, 5)))
        ctx = GraphContext(g)
        if layer_type == "gcn":
            layer = GcnLayer(5, 4)
        elif layer_type == "gat":
            layer = GatLayer(5, 4, heads=2)
        else:
            layer = SageLayer(5, 4, layer_type.split("_")[1])
        layer.reset_default(RngStream(7))
        norm = GraphNorm(4)
        norm.alpha.data[...] = 0.8

        def stack(c, feats):
            return norm.forward(ad.relu(layer.forward(c, Tensor(feats)))).data

        out = stack(ctx, g.features)
        perm = rng.permutation(20)
        permuted = permute_graph(g, perm)
        out_perm = stack(GraphContext(permuted), permuted.features)
        np.testing.assert_allclose(out_perm[perm], out, atol=1e-9)


class TestBuildModel:
    def test_gcn_tuned_shapes(self):
        model = build_model(ModelConfig("gcn", init="xavier"), input_dim=166)
        shapes = {name: t.data.shape for name, t in model.named_params()}
        assert shapes["gnn0.weight"] == (166, 211)
        assert shapes["gnn1.weight"] == (211, 211)
        assert shapes["embed.weight"] == (211, 90)
        assert shapes["head.weight"] == (90, 2)
        assert shapes["gnn0.bias"] == (1, 211)

    def test_sage_tuned_shapes(self):
        model = build_model(ModelConfig("sage"), input_dim=166)
        shapes = {name: t.data.shape for name, t in model.named_params()}
        assert shapes["gnn0.w_self"] == (166, 140)
        assert shapes["gnn0.w_neigh"] == (166, 140)
        assert shapes["gnn1.w_self"] == (140, 140)
        assert shapes["embed.weight"] == (140, 103)
        assert shapes["head.weight"] == (103, 2)

    def test_single_layer_stack(self):
        model = build_model(ModelConfig("gcn", num_layers=1, hidden_dim=128, embedding_dim=64, dropout=0.1), 10)
        assert len(model.gnn_layers) == 1

    def test_graphnorm_dims_follow_widths(self):
        config = ModelConfig("gat", num_layers=2, hidden_dim=128, embedding_dim=64,
                             dropout=0.1, norm="graphnorm", gat_heads=2)
        model = build_model(config, 10)
        assert model.norms[0].dim == 256  # concat on the hidden layer
        assert model.norms[1].dim == 128  # averaged on the last layer

    def test_out_of_range_config_rejected(self):
        for bad in (
            dict(hidden_dim=64),
            dict(embedding_dim=32),
            dict(dropout=0.7),
            dict(num_layers=4),
            dict(norm="batchnorm"),
            dict(init="orthogonal"),
        ):
            with pytest.raises(ConfigOutOfRange):
                build_model(ModelConfig("gcn", **bad), 10)
        with pytest.raises(ConfigOutOfRange):
            build_model(ModelConfig("transformer"), 10)

    def test_same_seed_reproduces_parameters(self):
        config = ModelConfig("gat", init="xavier", seed=5)
        m1 = build_model(config, 12)
        m2 = build_model(ModelConfig("gat", init="xavier", seed=5), 12)
        for (n1, t1), (n2, t2) in zip(m1.named_params(), m2.named_params()):
            assert n1 == n2
            np.testing.assert_array_equal(t1.data, t2.data)

    def test_head_only_policy_mixes_inits(self):
        seed = 11
        default = build_model(ModelConfig("sage", init="default", seed=seed), 8)
        head_only = build_model(ModelConfig("sage", init="xavier_head_only", seed=seed), 8)
        full = build_model(ModelConfig("sage", init="xavier", seed=seed), 8)
        d, h, f = (dict(m.named_params()) for m in (default, head_only, full))
        np.testing.assert_array_equal(h["gnn0.w_self"].data, d["gnn0.w_self"].data)
        np.testing.assert_array_equal(h["head.weight"].data, f["head.weight"].data)
        assert not np.array_equal(h["head.weight"].data, d["head.weight"].data)
        assert not np.array_equal(f["gnn0.w_self"].data, d["gnn0.w_self"].data)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        model = build_model(ModelConfig("gat", gat_heads=2, norm="graphnorm", seed=3), 9)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, extra={"step": np.array([3.0])}, extra_meta={"selection": "final"})
        loaded, extra, meta = load_checkpoint(path)
        for (n1, t1), (n2, t2) in zip(model.named_params(), loaded.named_params()):
            assert n1 == n2
            assert t1.data.tobytes() == t2.data.tobytes()
        assert extra["step"][0] == 3.0
        assert meta["selection"] == "final"
        assert loaded.config.to_dict() == model.config.to_dict()

    def test_in_memory_round_trip(self):
        model = build_model(ModelConfig("gcn", seed=1), 7)
        buf = io.BytesIO()
        save_checkpoint(buf, model)
        buf.seek(0)
        loaded, _, _ = load_checkpoint(buf)
        assert dict(loaded.named_params())["gnn0.weight"].data.tobytes() == \
            dict(model.named_params())["gnn0.weight"].data.tobytes()
