"""TopK h-hop subgraph sampling around target accounts."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import InsufficientNegatives, SnapshotFormatError, UnknownNode
from .graph import LwAig

STRATEGIES = ("amount", "times", "avgAmount")
SUFFIX = {"amount": "-A", "times": "-T", "avgAmount": "-aA"}
_ALIASES = {
    "amount": "amount", "a": "amount",
    "times": "times", "t": "times",
    "avgamount": "avgAmount", "avg_amount": "avgAmount", "aa": "avgAmount",
}


def strategy_name(name: str) -> str:
    key = name.strip().lower()
    if key not in _ALIASES:
        raise ValueError(f"unknown sampling strategy {name!r}; expected one of {STRATEGIES}")
    return _ALIASES[key]


@dataclass(frozen=True)
class SamplingStrategy:
    indicator: str = "amount"
    hops: int = 2
    k: int = 20

    def __post_init__(self):
        object.__setattr__(self, "indicator", strategy_name(self.indicator))
        if self.hops < 1 or self.k < 1:
            raise ValueError("hops and k must be >= 1")

    @property
    def suffix(self) -> str:
        return SUFFIX[self.indicator]

    def edge_scores(self, graph: LwAig) -> np.ndarray:
        if self.indicator == "amount":
            return graph.amount_f
        if self.indicator == "times":
            return graph.times.astype(np.float64)
        return graph.amount_f / graph.times


@dataclass(eq=False)
class AccountSubgraph:
    """Induced neighborhood of one target; local node 0 is the target."""

    nodes: np.ndarray  # global node indices, nodes[0] == target
    src: np.ndarray  # local indices
    dst: np.ndarray
    edge_features: np.ndarray  # (m, 2) float64: [times, total_amount]
    node_features: sp.csr_matrix  # (n, F) call counts
    label: str | None = None
    account: str = ""
    strategy: str | None = None

    @property
    def target(self) -> int:
        return int(self.nodes[0])

    @property
    def num_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    def with_label(self, label):
        return AccountSubgraph(
            self.nodes, self.src, self.dst, self.edge_features,
            self.node_features, label, self.account, self.strategy,
        )

    def __eq__(self, other):
        if not isinstance(other, AccountSubgraph):
            return NotImplemented
        return (
            np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.edge_features, other.edge_features)
            and self.node_features.shape == other.node_features.shape
            and (self.node_features != other.node_features).nnz == 0
            and self.label == other.label
        )

    __hash__ = None


def _ranked_neighbors(graph: LwAig, indicator: str):
    cache = graph.__dict__.setdefault("_ranked", {})
    if indicator in cache:
        return cache[indicator]
    indptr, nbr, out_e, in_e = graph.undirected()
    escore = SamplingStrategy(indicator, 1, 1).edge_scores(graph)
    score = np.full(nbr.shape[0], -np.inf)
    has_out = out_e >= 0
    has_in = in_e >= 0
    score[has_out] = escore[out_e[has_out]]
    score[has_in] = np.maximum(score[has_in], escore[in_e[has_in]])
    owner = np.repeat(np.arange(graph.num_nodes), np.diff(indptr))
    # per row: descending score, ties by ascending node index
    order = np.lexsort((nbr, -score, owner))
    cache[indicator] = (indptr, nbr[order])
    return cache[indicator]


def _resolve(graph: LwAig, target) -> int:
    if isinstance(target, str):
        if target not in graph.eoa_index:
            raise UnknownNode(f"account {target!r} is not an EOA node")
        return graph.eoa_index[target]
    t = int(target)
    if not 0 <= t < graph.num_nodes:
        raise UnknownNode(f"node index {t} out of range 0..{graph.num_nodes - 1}")
    return t


def sample_neighborhood(graph: LwAig, target, strategy: SamplingStrategy) -> set[int]:
    """Node set of the h-hop TopK neighborhood of ``target``.

    Each hop expands every node picked at the previous hop by its ``k`` best
    neighbors (in- or out-neighbors, scored by the edge statistic, max over
    both directions). Nodes picked earlier are not excluded from the ranking.
    """
    t = _resolve(graph, target)
    indptr, ranked = _ranked_neighbors(graph, strategy.indicator)
    selected = {t}
    frontier = [t]
    for _ in range(strategy.hops):
        layer = set()
        for v in frontier:
            lo = indptr[v]
            hi = min(indptr[v + 1], lo + strategy.k)
            layer.update(ranked[lo:hi].tolist())
        selected |= layer
        frontier = sorted(layer)
        if not frontier:
            break
    return selected


def induce_subgraph(graph: LwAig, nodes, label=None, target=None, strategy=None) -> AccountSubgraph:
    """Copy every edge of ``graph`` whose endpoints both lie in ``nodes``.

    The target (``target`` or, when omitted, the smallest index) is placed at
    local position 0, the rest follow in ascending global order.
    """
    nodes = {int(v) for v in nodes}
    if target is None:
        target = min(nodes)
    target = int(target)
    order = np.array([target] + sorted(nodes - {target}), dtype=np.int64)

    indptr = graph.__dict__.get("_out_indptr")
    if indptr is None:
        indptr = graph.__dict__["_out_indptr"] = graph.out_indptr()
    lo, hi = indptr[order], indptr[order + 1]
    counts = hi - lo
    eids = np.repeat(lo - np.cumsum(counts) + counts, counts) + np.arange(int(counts.sum()))
    eids = eids[np.isin(graph.dst[eids], order)]
    lookup = np.argsort(order)
    sorted_nodes = order[lookup]
    src = lookup[np.searchsorted(sorted_nodes, graph.src[eids])]
    dst = lookup[np.searchsorted(sorted_nodes, graph.dst[eids])]
    if eids.size:
        perm = np.lexsort((dst, src))
        src, dst, eids = src[perm], dst[perm], eids[perm]
    feats = np.column_stack([graph.times[eids].astype(np.float64), graph.amount_f[eids]]) \
        if eids.size else np.zeros((0, 2))
    x = graph.features[order]
    return AccountSubgraph(
        order, src, dst, feats, sp.csr_matrix(x), label,
        graph.eoa_ids[target] if graph.num_nodes else "", strategy,
    )


def sample_subgraph(graph: LwAig, target, strategy: SamplingStrategy, label=None) -> AccountSubgraph:
    t = _resolve(graph, target)
    nodes = sample_neighborhood(graph, t, strategy)
    return induce_subgraph(graph, nodes, label=label, target=t, strategy=strategy.indicator)


def build_dataset(graph: LwAig, strategy: SamplingStrategy, positive_label: str,
                  negative_ratio: float = 1.0, seed: int = 0,
                  negative_label: str = "other") -> list[AccountSubgraph]:
    """Binary dataset: every ``positive_label`` account plus sampled negatives.

    Negatives are drawn uniformly without replacement from accounts carrying
    any other label.
    """
    pos = sorted(i for i, y in graph.labels.items() if y == positive_label)
    others = sorted(i for i, y in graph.labels.items() if y != positive_label)
    if not pos:
        raise InsufficientNegatives(f"no account labeled {positive_label!r}")
    want = int(round(len(pos) * negative_ratio))
    if want > len(others):
        raise InsufficientNegatives(
            f"need {want} negatives for {len(pos)} {positive_label!r} accounts, only {len(others)} available"
        )
    rng = np.random.default_rng(seed)
    neg = sorted(rng.choice(np.array(others, dtype=np.int64), size=want, replace=False).tolist())
    out = [sample_subgraph(graph, t, strategy, positive_label) for t in pos]
    out += [sample_subgraph(graph, t, strategy, negative_label) for t in neg]
    return out


def build_multiclass_dataset(graph: LwAig, strategy: SamplingStrategy, classes=None) -> list[AccountSubgraph]:
    """One subgraph per labeled account (restricted to ``classes`` if given)."""
    keep = None if classes is None else set(classes)
    targets = sorted(i for i, y in graph.labels.items() if keep is None or y in keep)
    return [sample_subgraph(graph, t, strategy, graph.labels[t]) for t in targets]


# --- dataset directory format ---------------------------------------------

DATASET_MAGIC = b"SUBG1"


def dataset_dir_name(base: str, strategy: SamplingStrategy) -> str:
    return f"{base}{strategy.suffix}"


def save_dataset(subgraphs: list[AccountSubgraph], directory, meta: dict) -> Path:
    """Write ``meta.json`` and ``subgraphs.bin`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    classes = meta.get("classes") or sorted({g.label for g in subgraphs if g.label is not None})
    cidx = {c: i for i, c in enumerate(classes)}
    nfeat = subgraphs[0].node_features.shape[1] if subgraphs else int(meta.get("num_features", 0))
    buf = bytearray(DATASET_MAGIC)
    buf += struct.pack("<QQ", len(subgraphs), nfeat)
    for g in subgraphs:
        acct = g.account.encode("utf-8")
        strat = (g.strategy or "").encode("utf-8")
        coo = g.node_features.tocoo()
        perm = np.lexsort((coo.col, coo.row))
        buf += struct.pack(
            "<IIIiII", g.num_nodes, g.num_edges, coo.nnz,
            cidx[g.label] if g.label is not None else -1, len(acct), len(strat),
        )
        buf += acct + strat
        buf += g.nodes.astype("<u8").tobytes()
        buf += g.src.astype("<u4").tobytes() + g.dst.astype("<u4").tobytes()
        buf += np.ascontiguousarray(g.edge_features, dtype="<f8").tobytes()
        buf += coo.row[perm].astype("<u4").tobytes() + coo.col[perm].astype("<u4").tobytes()
        buf += coo.data[perm].astype("<i8").tobytes()
    (directory / "subgraphs.bin").write_bytes(bytes(buf))
    full = dict(meta)
    full["classes"] = list(classes)
    full["num_subgraphs"] = len(subgraphs)
    full["num_features"] = int(nfeat)
    (directory / "meta.json").write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory) -> tuple[list[AccountSubgraph], dict]:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    data = (directory / "subgraphs.bin").read_bytes()
    if not data.startswith(DATASET_MAGIC):
        raise SnapshotFormatError(f"{directory}: bad subgraph file", path=directory)
    pos = len(DATASET_MAGIC)
    count, nfeat = struct.unpack_from("<QQ", data, pos)
    pos += 16
    classes = meta["classes"]

    def arr(dtype, n):
        nonlocal pos
        a = np.frombuffer(data, dtype=dtype, count=n, offset=pos)
        pos += a.nbytes
        return a

    out = []
    for _ in range(count):
        n, m, nnz, lab, la, ls = struct.unpack_from("<IIIiII", data, pos)
        pos += 24
        acct = data[pos:pos + la].decode("utf-8")
        pos += la
        strat = data[pos:pos + ls].decode("utf-8") or None
        pos += ls
        nodes = arr("<u8", n).astype(np.int64)
        src = arr("<u4", m).astype(np.int64)
        dst = arr("<u4", m).astype(np.int64)
        feats = arr("<f8", 2 * m).reshape(m, 2).copy()
        rows = arr("<u4", nnz).astype(np.int64)
        cols = arr("<u4", nnz).astype(np.int64)
        vals = arr("<i8", nnz).astype(np.int64)
        x = sp.csr_matrix((vals, (rows, cols)), shape=(n, nfeat), dtype=np.int64)
        x.sort_indices()
        out.append(AccountSubgraph(nodes, src, dst, feats, x,
                                   classes[lab] if lab >= 0 else None, acct, strat))
    if pos != len(data):
        raise SnapshotFormatError(f"{directory}: trailing bytes in subgraph file", path=directory)
    return out, meta
