"""Graph augmentation operators and paired views for subgraph contrast."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ResampleWithoutGraph
from .graph import LwAig
from .sampler import STRATEGIES, AccountSubgraph, SamplingStrategy, sample_subgraph, strategy_name

KINDS = ("identity", "nodeDrop", "edgeRemove", "nodeAttrMask", "edgeAttrMask", "resample")
_KIND_ALIASES = {k.lower(): k for k in KINDS}
_KIND_ALIASES.update({"none": "identity", "id": "identity", "sample": "resample"})

DEFAULT_P = 0.10


def next_strategy(current: str | None) -> str:
    """Lexicographically next of the other two strategies, wrapping around."""
    order = sorted(STRATEGIES, key=str.lower)
    cur = strategy_name(current or "amount")
    return order[(order.index(cur) + 1) % len(order)]


@dataclass(frozen=True)
class AugmentOp:
    kind: str = "identity"
    p: float = DEFAULT_P
    strategy: str | None = None  # resample only; None picks next_strategy
    hops: int = 2
    k: int = 20

    def __post_init__(self):
        key = self.kind.strip().lower()
        if key not in _KIND_ALIASES:
            raise ValueError(f"unknown augmentation {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", _KIND_ALIASES[key])
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"augmentation probability must be in [0, 1], got {self.p}")


def parse_pair(text: str, p: float = DEFAULT_P, hops: int = 2, k: int = 20) -> tuple[AugmentOp, AugmentOp]:
    """Parse ``"edgeRemove&nodeDrop"`` (``,`` also accepted) into two ops."""
    sep = "&" if "&" in text else ","
    parts = [s for s in text.split(sep) if s.strip()]
    if len(parts) != 2:
        raise ValueError(f"augmentation pair must name two operators, got {text!r}")
    return tuple(AugmentOp(s, p, hops=hops, k=k) for s in parts)


def pair_name(t1: AugmentOp, t2: AugmentOp) -> str:
    return f"{t1.kind}&{t2.kind}"


def _keep_nodes(g: AccountSubgraph, keep: np.ndarray) -> AccountSubgraph:
    remap = np.full(g.num_nodes, -1, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    emask = keep[g.src] & keep[g.dst]
    return AccountSubgraph(
        g.nodes[keep], remap[g.src[emask]], remap[g.dst[emask]],
        g.edge_features[emask], sp.csr_matrix(g.node_features[np.flatnonzero(keep)]),
        g.label, g.account, g.strategy,
    )


def apply(op: AugmentOp, subgraph: AccountSubgraph, seed=None, graph: LwAig | None = None) -> AccountSubgraph:
    """Return an augmented copy; the target node and the label always survive."""
    g = subgraph
    rng = np.random.default_rng(seed)
    kind = op.kind
    if kind == "identity":
        return AccountSubgraph(g.nodes.copy(), g.src.copy(), g.dst.copy(), g.edge_features.copy(),
                               g.node_features.copy(), g.label, g.account, g.strategy)
    if kind == "nodeDrop":
        keep = rng.random(g.num_nodes) >= op.p
        keep[0] = True
        return _keep_nodes(g, keep)
    if kind == "edgeRemove":
        emask = rng.random(g.num_edges) >= op.p
        return AccountSubgraph(g.nodes.copy(), g.src[emask], g.dst[emask], g.edge_features[emask],
                               g.node_features.copy(), g.label, g.account, g.strategy)
    if kind == "nodeAttrMask":
        x = g.node_features.copy()
        x.data = np.where(rng.random(x.data.shape[0]) < op.p, 0, x.data)
        x.eliminate_zeros()
        return AccountSubgraph(g.nodes.copy(), g.src.copy(), g.dst.copy(), g.edge_features.copy(),
                               x, g.label, g.account, g.strategy)
    if kind == "edgeAttrMask":
        e = g.edge_features.copy()
        e[rng.random(e.shape) < op.p] = 0.0
        return AccountSubgraph(g.nodes.copy(), g.src.copy(), g.dst.copy(), e,
                               g.node_features.copy(), g.label, g.account, g.strategy)
    # resample
    if graph is None:
        raise ResampleWithoutGraph("resample augmentation needs the source graph")
    alt = op.strategy or next_strategy(g.strategy)
    out = sample_subgraph(graph, g.target, SamplingStrategy(alt, op.hops, op.k), g.label)
    out.account = g.account or out.account
    return out


def make_view_pair(subgraph: AccountSubgraph, t1: AugmentOp, t2: AugmentOp, seed=None,
                   graph: LwAig | None = None) -> tuple[AccountSubgraph, AccountSubgraph]:
    s1, s2 = np.random.SeedSequence(seed).spawn(2)
    return apply(t1, subgraph, s1, graph), apply(t2, subgraph, s2, graph)
