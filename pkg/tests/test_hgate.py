import numpy as np
import pytest

from acctid import autodiff as ad
from acctid.errors import ShapeMismatch
from acctid.hgate import HGATE, FeatureNormalizer, SubgraphBatch, load_checkpoint, save_checkpoint, undirected_messages
from acctid.sampler import AccountSubgraph
from conftest import naive_encode, random_subgraph

F = 6


def model_and_norm(graphs, dim=8, layers=2, seed=0):
    return HGATE(F, 3, dim=dim, layers=layers, seed=seed), FeatureNormalizer.fit(graphs)


def permuted(g, perm):
    """Relabel local nodes: new node k is old node perm[k]; target stays first."""
    inv = np.argsort(perm)
    return AccountSubgraph(g.nodes[perm], inv[g.src], inv[g.dst], g.edge_features.copy(),
                           g.node_features[perm], g.label, g.account, g.strategy)


@pytest.mark.parametrize("seed", range(6))
def test_encoder_matches_naive_loop(seed):
    rng = np.random.default_rng(seed)
    graphs = [random_subgraph(rng, n=int(rng.integers(1, 9)), p=0.35, num_features=F, self_loops=True)
              for _ in range(3)]
    model, norm = model_and_norm(graphs, seed=seed)
    out = model.encode(SubgraphBatch.build(graphs, norm))
    for b, g in enumerate(graphs):
        want, _, _ = naive_encode(model, norm, g)
        assert np.allclose(out.g.value[b], want, atol=1e-12)


def test_alpha_and_beta_match_naive_loop(rng):
    g = random_subgraph(rng, n=7, p=0.4, num_features=F)
    model, norm = model_and_norm([g])
    out = model.encode(SubgraphBatch.build([g], norm))
    _, alphas, beta = naive_encode(model, norm, g)
    for (w, centers), ref in zip(out.alphas, alphas):
        for i, a in ref.items():
            assert np.allclose(w.value[centers == i, 0], a, atol=1e-12)
    assert np.allclose(out.beta.value[:, 0], beta, atol=1e-12)


def test_alignment_rows(rng):
    g = random_subgraph(rng, n=5, p=0.5, num_features=F)
    model, norm = model_and_norm([g])
    batch = SubgraphBatch.build([g], norm)
    h_self, h_nbr = model.align(batch)
    x = np.log1p(g.node_features.toarray())
    w0, wx = model.params["theta_x0"].value, model.params["theta_x"].value
    assert np.allclose(h_self.value, x @ w0.T)
    e = norm.edges(g.edge_features)
    for r, (i, j) in enumerate(zip(batch.msg_dst, batch.msg_src)):
        row = np.flatnonzero((g.src == j) & (g.dst == i))
        if row.size == 0:
            row = np.flatnonzero((g.src == i) & (g.dst == j))
        raw = wx @ np.concatenate([x[j], e[row[0]]])
        assert np.allclose(h_nbr.value[r], np.where(raw > 0, raw, 0.2 * raw))


def test_messages_cover_each_unordered_pair_twice():
    g = AccountSubgraph(np.arange(4), np.array([0, 1, 2, 2]), np.array([1, 0, 3, 2]),
                        np.array([[1, 10.0], [2, 20.0], [3, 30.0], [4, 40.0]]),
                        random_subgraph(np.random.default_rng(0), 4, 0, F).node_features)
    dst, src, erow = undirected_messages(g)
    got = {(int(d), int(s)): int(r) for d, s, r in zip(dst, src, erow)}
    # 0<->1 use their own edges, 2->3 is borrowed for 3->2, the self-loop is dropped
    assert got == {(1, 0): 0, (0, 1): 1, (3, 2): 2, (2, 3): 2}


def test_zero_attention_vector_gives_uniform_weights(rng):
    g = random_subgraph(rng, n=6, p=0.5, num_features=F)
    model, norm = model_and_norm([g])
    for l in range(model.layers):
        model.params[f"theta_n.{l}"].value[:] = 0.0
    out = model.encode(SubgraphBatch.build([g], norm))
    for w, centers in out.alphas:
        for i in range(g.num_nodes):
            a = w.value[centers == i, 0]
            assert np.allclose(a, 1.0 / a.size)


def test_isolated_node_attends_to_itself():
    x = random_subgraph(np.random.default_rng(1), 1, 0, F)
    model, norm = model_and_norm([x])
    out = model.encode(SubgraphBatch.build([x], norm))
    w, centers = out.alphas[0]
    assert w.value.shape == (1, 1) and w.value[0, 0] == 1.0
    # single node: max pool equals the node, so pooling returns elu(W h)
    h = out.node_embeddings.value[0]
    raw = model.params["theta_beta"].value @ h
    assert np.allclose(out.g.value[0], np.where(raw > 0, raw, np.expm1(np.minimum(raw, 0))))


def test_segments_do_not_leak(rng):
    a = random_subgraph(rng, n=6, p=0.4, num_features=F)
    b = random_subgraph(rng, n=5, p=0.4, num_features=F)
    c = random_subgraph(rng, n=7, p=0.4, num_features=F)
    model, norm = model_and_norm([a, b, c])
    both = model.encode(SubgraphBatch.build([a, b], norm)).g.value
    other = model.encode(SubgraphBatch.build([a, c], norm)).g.value
    alone = model.encode(SubgraphBatch.build([a], norm)).g.value
    assert np.allclose(both[0], alone[0], atol=1e-13) and np.allclose(other[0], alone[0], atol=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    g = random_subgraph(rng, n=9, p=0.3, num_features=F)
    model, norm = model_and_norm([g], dim=16)
    base = model.encode(SubgraphBatch.build([g], norm)).g.value
    perm = np.concatenate([[0], 1 + rng.permutation(g.num_nodes - 1)])
    moved = model.encode(SubgraphBatch.build([permuted(g, perm)], norm)).g.value
    assert np.max(np.abs(base - moved)) < 1e-10


def test_attention_sums_to_one(rng):
    graphs = [random_subgraph(rng, n=int(rng.integers(1, 12)), p=0.3, num_features=F) for _ in range(5)]
    model, norm = model_and_norm(graphs)
    out = model.encode(SubgraphBatch.build(graphs, norm))
    for w, centers in out.alphas:
        assert np.allclose(np.bincount(centers, w.value[:, 0]), 1.0, atol=1e-12)
    assert np.allclose(np.bincount(out.beta_seg, out.beta.value[:, 0]), 1.0, atol=1e-12)


def test_heads(rng):
    model = HGATE(F, 3, dim=8, seed=2)
    zero = ad.const(np.zeros((2, 8)))
    assert np.allclose(model.project(zero).value, model.params["proj.b2"].value)
    w1_relu = np.maximum(model.params["pred.b1"].value, 0)
    want = w1_relu @ model.params["pred.w2"].value.T + model.params["pred.b2"].value
    assert np.allclose(model.logits(zero).value, want)
    probs = model.predict(ad.const(rng.normal(size=(5, 8)))).value
    assert np.allclose(probs.sum(axis=1), 1.0) and (probs > 0).all()


def test_heads_gradcheck(rng):
    model = HGATE(F, 3, dim=6, seed=3)
    g = ad.param(rng.normal(size=(4, 6)))
    w = rng.normal(size=(4, 6))
    err = ad.gradcheck(lambda: ad.add(ad.sum_all(ad.mul(model.project(g), w)),
                                      ad.cross_entropy(model.logits(g), np.array([0, 1, 2, 1]))),
                       [g] + [model.params[k] for k in ("proj.w1", "proj.skip", "pred.w1", "pred.b2")])
    assert err < 1e-4


def test_full_model_gradcheck(rng):
    graphs = [random_subgraph(rng, n=5, p=0.4, num_features=F, label=c) for c in ("a", "b")]
    model, norm = model_and_norm(graphs, dim=8)
    batch = SubgraphBatch.build(graphs, norm, ["a", "b", "c"])

    def loss():
        out = model.encode(batch)
        w = np.linspace(-1, 1, 16).reshape(2, 8)
        return ad.add(ad.cross_entropy(model.logits(out.g), batch.labels),
                      ad.sum_all(ad.mul(model.project(out.g), w)))
    assert ad.gradcheck(loss, list(model.params.values())) < 1e-4


def test_feature_count_checked(rng):
    g = random_subgraph(rng, n=4, p=0.5, num_features=F)
    model = HGATE(F + 1, 2, dim=4)
    with pytest.raises(ShapeMismatch):
        model.encode(SubgraphBatch.build([g], FeatureNormalizer()))


def test_checkpoint_round_trip(tmp_path, rng):
    graphs = [random_subgraph(rng, n=6, p=0.4, num_features=F) for _ in range(2)]
    model, norm = model_and_norm(graphs, dim=8)
    path = tmp_path / "m.hgate"
    save_checkpoint(path, model, norm, ["a", "b", "c"], {"strategy": "amount"})
    back, norm2, classes, meta = load_checkpoint(path)
    assert classes == ["a", "b", "c"] and meta["strategy"] == "amount"
    batch = SubgraphBatch.build(graphs, norm)
    assert np.array_equal(model.encode(batch).g.value, back.encode(SubgraphBatch.build(graphs, norm2)).g.value)


def test_normalizer_fit():
    g = AccountSubgraph(np.arange(2), np.array([0]), np.array([1]), np.array([[1.0, 0.0]]),
                        random_subgraph(np.random.default_rng(0), 2, 0, F).node_features)
    norm = FeatureNormalizer.fit([g, g])
    assert np.allclose(norm.edges(g.edge_features), 0.0)  # constant columns: std falls back to 1
