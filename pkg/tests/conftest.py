"""Shared fixtures and independent reference implementations for the tests."""
from __future__ import annotations

from collections import defaultdict

import numpy as np
import pytest

from acctid.graph import build_lw_aig
from acctid.records import InteractionRecord


def tx(sender, receiver, value, ts=1_600_000_000, block=1):
    return InteractionRecord(block, ts, sender, receiver, False, False, None, value)


def call(sender, contract, ts=1_600_000_000, fn="transfer", from_ca=False):
    return InteractionRecord(1, ts, sender, contract, from_ca, True, fn, 0)


def random_records(rng, n_eoa=20, n_ca=5, m=200, self_loops=True, big=False):
    """Mix of EOA->EOA transfers, EOA->CA calls and a few CA-initiated calls."""
    eoas = [f"0xe{i:03d}" for i in range(n_eoa)]
    cas = [f"0xc{i:03d}" for i in range(n_ca)]
    out = []
    for r in range(m):
        kind = rng.random()
        ts = 1_500_000_000 + int(rng.integers(0, 10 ** 7))
        if kind < 0.65 or not cas:
            a, b = rng.integers(0, n_eoa, size=2)
            if a == b and not self_loops:
                continue
            value = int(rng.integers(0, 2 ** 62)) * int(rng.integers(0, 2 ** 40)) if big else int(rng.integers(0, 1000))
            out.append(InteractionRecord(r + 1, ts, eoas[a], eoas[b], False, False, None, value))
        elif kind < 0.95:
            a = int(rng.integers(0, n_eoa))
            c = int(rng.integers(0, n_ca))
            out.append(InteractionRecord(r + 1, ts, eoas[a], cas[c], False, True, "f", 0))
        else:
            c1, c2 = rng.integers(0, n_ca, size=2)
            out.append(InteractionRecord(r + 1, ts, cas[c1], cas[c2], True, True, "g", 0))
    return out


def random_graph(rng, n=30, p=0.1, max_times=5):
    """Random lw-AIG through the public builder: directed edges with random t, w."""
    recs = []
    ids = [f"0x{i:04x}" for i in range(n)]
    for i in range(n):
        recs.append(tx(ids[i], ids[i], 0))  # make every id an EOA node in a fixed order
    for i in range(n):
        for j in range(n):
            if i != j and rng.random() < p:
                for _ in range(int(rng.integers(1, max_times + 1))):
                    recs.append(tx(ids[i], ids[j], int(rng.integers(0, 50))))
    return build_lw_aig(recs)


# --- brute-force oracles ------------------------------------------------------

def groupby_edges(records):
    """Independent merge: {(sender, receiver): [count, total]} over EOA->EOA transfers."""
    acc = defaultdict(lambda: [0, 0])
    for r in records:
        if r.calling_function is None and not r.from_is_contract and not r.to_is_contract:
            acc[(r.sender, r.receiver)][0] += 1
            acc[(r.sender, r.receiver)][1] += r.value
    return dict(acc)


def brute_neighborhood(graph, target, indicator, hops, k):
    """Materialize full neighbor lists from the raw edge list, sort, take top k."""
    stats = {}
    for e in range(graph.num_edges):
        s, d = int(graph.src[e]), int(graph.dst[e])
        t = int(graph.times[e])
        w = graph.amounts[e]
        score = {"amount": float(w), "times": float(t), "avgAmount": float(w) / t}[indicator]
        stats[(s, d)] = score
    nbrs = defaultdict(dict)
    for (s, d), score in stats.items():
        if s == d:
            continue
        nbrs[s][d] = max(nbrs[s].get(d, -np.inf), score)
        nbrs[d][s] = max(nbrs[d].get(s, -np.inf), score)
    selected = {target}
    frontier = {target}
    for _ in range(hops):
        layer = set()
        for v in frontier:
            ranked = sorted(nbrs[v].items(), key=lambda kv: (-kv[1], kv[0]))
            layer.update(u for u, _ in ranked[:k])
        selected |= layer
        frontier = layer
    return selected


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_subgraph(rng, n=8, p=0.3, num_features=6, label="x", self_loops=False):
    """Random AccountSubgraph with integer-valued edge and node features."""
    from scipy import sparse

    from acctid.sampler import AccountSubgraph

    src, dst = [], []
    for i in range(n):
        for j in range(n):
            if (i != j or self_loops) and rng.random() < p:
                src.append(i)
                dst.append(j)
    m = len(src)
    e = np.column_stack([rng.integers(1, 20, size=m), rng.integers(0, 10 ** 6, size=m)]).astype(np.float64)
    x = sparse.random(n, num_features, density=0.4, format="csr", random_state=int(rng.integers(0, 2 ** 31)))
    x.data = np.ceil(x.data * 9)
    return AccountSubgraph(np.arange(n) + 1000, np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64),
                           e.reshape(m, 2), x, label, "0xt", "amount")


def _lrelu(v, slope=0.2):
    return np.where(v > 0, v, slope * v)


def _elu(v):
    return np.where(v > 0, v, np.expm1(np.minimum(v, 0)))


def _softmax(v):
    v = np.asarray(v, dtype=np.float64)
    z = np.exp(v - v.max())
    return z / z.sum()


def naive_encode(model, normalizer, g):
    """Dense per-node loop reference for the encoder in eval mode.

    Returns (g_vector, per-layer list of {node: alpha weights}, beta weights).
    """
    p = {k: v.value for k, v in model.params.items()}
    d = model.dim
    x = np.log1p(g.node_features.toarray())
    e = (np.log1p(g.edge_features) - normalizer.edge_mean) / normalizer.edge_std
    edge = {}
    for r, (s, t) in enumerate(zip(g.src.tolist(), g.dst.tolist())):
        edge[(s, t)] = r
    n = g.num_nodes
    nbrs = {i: [] for i in range(n)}
    for (s, t) in edge:
        if s == t:
            continue
        nbrs[t].append(s)
        nbrs[s].append(t)
    nbrs = {i: sorted(set(v)) for i, v in nbrs.items()}

    def edge_feat(j, i):  # feature carried by the message j -> i
        return e[edge[(j, i)]] if (j, i) in edge else e[edge[(i, j)]]

    h = np.array([p["theta_x0"] @ x[i] for i in range(n)])
    cands = {i: [h[i]] + [_lrelu(p["theta_x"] @ np.concatenate([x[j], edge_feat(j, i)]), model.slope)
                          for j in nbrs[i]] for i in range(n)}
    alphas = []
    for l in range(model.layers):
        th = p[f"theta_n.{l}"][0]
        new = np.zeros((n, d))
        layer_alpha = {}
        for i in range(n):
            c = cands[i]
            scores = [_lrelu(th[:d] @ h[i] + th[d:] @ cj, model.slope) for cj in c]
            a = _softmax(scores)
            layer_alpha[i] = a
            new[i] = _elu(p[f"theta_alpha.{l}"] @ sum(ak * cj for ak, cj in zip(a, c)))
        h = new
        alphas.append(layer_alpha)
        cands = {i: [h[i]] + [h[j] for j in nbrs[i]] for i in range(n)}
    s = h.max(axis=0)
    c = [s] + list(h)
    th = p["theta_s"][0]
    beta = _softmax([_lrelu(th[:d] @ s + th[d:] @ cj, model.slope) for cj in c])
    out = _elu(p["theta_beta"] @ sum(b * cj for b, cj in zip(beta, c)))
    return out, alphas, beta


# --- acceptance report ----------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
