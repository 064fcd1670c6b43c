"""Hierarchical graph attention encoder with projection and prediction heads.

Per subgraph the encoder:

1. aligns features: every node ``i`` gets a self embedding ``Wx0 x_i`` and every
   neighbor ``j`` of ``i`` contributes ``LeakyRelu(Wx [x_j || e_ij])``;
2. runs ``k`` node-level attention layers; attention for node ``i`` is a softmax
   over its neighbors plus itself;
3. max-pools node embeddings into ``s`` and attends over ``{s} + nodes`` to get
   the subgraph embedding ``g``.

Neighborhoods ignore edge direction. The edge feature attached to a message
``j -> i`` is the ``j -> i`` edge when it exists, otherwise the ``i -> j`` edge.
Self-loops are not neighbors: every node already attends to itself.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptySegment, ShapeMismatch
from .sampler import AccountSubgraph


class FeatureNormalizer:
    """log1p + z-score for edge columns, log1p for node call counts.

    Edge statistics are fitted on the training split only.
    """

    def __init__(self, edge_mean=None, edge_std=None):
        self.edge_mean = np.zeros(2) if edge_mean is None else np.asarray(edge_mean, dtype=np.float64)
        self.edge_std = np.ones(2) if edge_std is None else np.asarray(edge_std, dtype=np.float64)

    @classmethod
    def fit(cls, subgraphs) -> "FeatureNormalizer":
        feats = [g.edge_features for g in subgraphs if g.num_edges]
        if not feats:
            return cls()
        e = np.log1p(np.concatenate(feats, axis=0))
        std = e.std(axis=0)
        std[std == 0] = 1.0
        return cls(e.mean(axis=0), std)

    def edges(self, e: np.ndarray) -> np.ndarray:
        return (np.log1p(e) - self.edge_mean) / self.edge_std

    def nodes(self, x) -> sp.csr_matrix:
        x = sp.csr_matrix(x, dtype=np.float64, copy=True)
        x.data = np.log1p(x.data)
        return x

    def to_dict(self):
        return {"norm.edge_mean": self.edge_mean.reshape(1, 2), "norm.edge_std": self.edge_std.reshape(1, 2)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["norm.edge_mean"].reshape(-1), d["norm.edge_std"].reshape(-1))


def undirected_messages(g: AccountSubgraph):
    """Messages ``(dst, src, edge_row)`` for one subgraph in local indices.

    One message per ordered pair of distinct adjacent nodes, sorted by
    ``(dst, src)``; ``edge_row`` indexes ``g.edge_features``.
    """
    keep = g.src != g.dst
    s, d = g.src[keep], g.dst[keep]
    k = np.flatnonzero(keep)
    n = max(g.num_nodes, 1)
    # message s -> d always uses edge s->d; d -> s borrows it only when d->s is absent
    absent = ~np.isin(d * n + s, s * n + d)
    dst = np.concatenate([d, s[absent]])
    src = np.concatenate([s, d[absent]])
    erow = np.concatenate([k, k[absent]])
    order = np.lexsort((src, dst))
    return dst[order], src[order], erow[order]


@dataclass
class SubgraphBatch:
    x: sp.csr_matrix  # (n, F) normalized node features
    node_seg: np.ndarray  # (n,) subgraph id per node, sorted
    msg_dst: np.ndarray  # (M,) batch node ids
    msg_src: np.ndarray
    msg_input: sp.csr_matrix  # (M, F + 2) rows [x_src || e]
    targets: np.ndarray  # (B,) batch index of each target node
    labels: np.ndarray  # (B,) class ids, -1 when unlabeled
    num_graphs: int

    @property
    def num_nodes(self) -> int:
        return int(self.node_seg.shape[0])

    @classmethod
    def build(cls, subgraphs, normalizer: FeatureNormalizer, classes=None) -> "SubgraphBatch":
        if not subgraphs:
            raise EmptySegment("cannot batch zero subgraphs")
        cidx = {c: i for i, c in enumerate(classes or [])}
        xs, segs, dsts, srcs, efeats, targets, labels = [], [], [], [], [], [], []
        offset = 0
        for b, g in enumerate(subgraphs):
            n = g.num_nodes
            xs.append(g.node_features)
            segs.append(np.full(n, b, dtype=np.int64))
            d, s, erow = undirected_messages(g)
            dsts.append(d + offset)
            srcs.append(s + offset)
            efeats.append(g.edge_features[erow])
            targets.append(offset)
            labels.append(cidx.get(g.label, -1))
            offset += n
        x = normalizer.nodes(sp.vstack(xs, format="csr"))
        msg_dst = np.concatenate(dsts)
        msg_src = np.concatenate(srcs)
        e = normalizer.edges(np.concatenate(efeats, axis=0))
        msg_input = sp.hstack([x[msg_src], sp.csr_matrix(e)], format="csr")
        return cls(x, np.concatenate(segs), msg_dst, msg_src, msg_input,
                   np.array(targets, dtype=np.int64), np.array(labels, dtype=np.int64), len(subgraphs))


def glorot(rng, rows, cols):
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass
class EncoderOutput:
    g: Tensor
    node_embeddings: Tensor
    alphas: list  # per layer: (weights (n + M, 1), center ids)
    beta: Tensor
    beta_seg: np.ndarray


class HGATE:
    """Encoder ``f_theta`` plus heads ``f_phi`` (projection) and ``f_psi`` (prediction)."""

    def __init__(self, num_features: int, num_classes: int, dim: int = 128, layers: int = 2,
                 dropout: float = 0.2, slope: float = 0.2, seed: int = 0):
        self.num_features = num_features
        self.num_classes = num_classes
        self.dim = dim
        self.layers = layers
        self.dropout = dropout
        self.slope = slope
        rng = np.random.default_rng(seed)
        d, f = dim, num_features
        p = {
            "theta_x": glorot(rng, d, f + 2),
            "theta_x0": glorot(rng, d, f),
        }
        for l in range(layers):
            p[f"theta_n.{l}"] = glorot(rng, 1, 2 * d)
            p[f"theta_alpha.{l}"] = glorot(rng, d, d)
        p["theta_s"] = glorot(rng, 1, 2 * d)
        p["theta_beta"] = glorot(rng, d, d)
        p["proj.w1"] = glorot(rng, d, d)
        p["proj.b1"] = np.zeros((1, d))
        p["proj.w2"] = glorot(rng, d, d)
        p["proj.b2"] = np.zeros((1, d))
        p["proj.skip"] = glorot(rng, d, d)
        p["pred.w1"] = glorot(rng, d, d)
        p["pred.b1"] = np.zeros((1, d))
        p["pred.w2"] = glorot(rng, num_classes, d)
        p["pred.b2"] = np.zeros((1, num_classes))
        self.params = {k: ad.param(v, name=k) for k, v in p.items()}

    # --- encoder pieces -------------------------------------------------------

    def align(self, batch: SubgraphBatch):
        """Self embeddings ``(n, d)`` and per-message neighbor embeddings ``(M, d)``."""
        p = self.params
        if batch.x.shape[1] != self.num_features:
            raise ShapeMismatch(f"batch has {batch.x.shape[1]} node features, model expects {self.num_features}")
        h_self = ad.matmul(batch.x, ad.transpose(p["theta_x0"]))
        h_nbr = ad.leaky_relu(ad.matmul(batch.msg_input, ad.transpose(p["theta_x"])), self.slope)
        return h_self, h_nbr

    def _attend(self, center, cand, cand_seg, nseg, theta, transform):
        """Shared attention step: score candidates against their segment's center."""
        d = self.dim
        th = ad.transpose(theta)
        left = ad.matmul(center, ad.rows(th, slice(0, d)))
        right = ad.matmul(cand, ad.rows(th, slice(d, 2 * d)))
        scores = ad.leaky_relu(ad.add(ad.rows(left, cand_seg), right), self.slope)
        w = ad.segment_softmax(scores, cand_seg, nseg)
        agg = ad.segment_weighted_sum(w, cand, cand_seg, nseg)
        return ad.elu(ad.matmul(agg, ad.transpose(transform))), w

    def node_layer(self, h: Tensor, cand: Tensor, cand_dst, layer: int):
        return self._attend(h, cand, cand_dst, h.shape[0],
                            self.params[f"theta_n.{layer}"], self.params[f"theta_alpha.{layer}"])

    def attentive_pool(self, h: Tensor, node_seg, num_graphs: int):
        s = ad.segment_max(h, node_seg, num_graphs)
        cand = ad.concat_rows([s, h])
        cand_seg = np.concatenate([np.arange(num_graphs), node_seg])
        g, beta = self._attend(s, cand, cand_seg, num_graphs, self.params["theta_s"], self.params["theta_beta"])
        return g, beta, cand_seg

    def encode(self, batch: SubgraphBatch, train: bool = False, rng=None) -> EncoderOutput:
        n = batch.num_nodes
        self_ids = np.arange(n)
        cand_dst = np.concatenate([self_ids, batch.msg_dst])
        cand_src = np.concatenate([self_ids, batch.msg_src])
        h_self, h_nbr = self.align(batch)
        h = h_self
        cand = ad.concat_rows([h_self, h_nbr])
        alphas = []
        for l in range(self.layers):
            if l > 0:
                cand = ad.rows(h, cand_src)
            h, w = self.node_layer(h, cand, cand_dst, l)
            alphas.append((w, cand_dst))
            if l < self.layers - 1:
                h = ad.dropout(h, self.dropout, train, rng)
        g, beta, beta_seg = self.attentive_pool(h, batch.node_seg, batch.num_graphs)
        return EncoderOutput(g, h, alphas, beta, beta_seg)

    # --- heads --------------------------------------------------------------------

    def project(self, g: Tensor) -> Tensor:
        p = self.params
        hidden = ad.relu(ad.add(ad.matmul(g, ad.transpose(p["proj.w1"])), p["proj.b1"]))
        out = ad.add(ad.matmul(hidden, ad.transpose(p["proj.w2"])), p["proj.b2"])
        return ad.add(out, ad.matmul(g, ad.transpose(p["proj.skip"])))

    def logits(self, g: Tensor) -> Tensor:
        p = self.params
        hidden = ad.relu(ad.add(ad.matmul(g, ad.transpose(p["pred.w1"])), p["pred.b1"]))
        return ad.add(ad.matmul(hidden, ad.transpose(p["pred.w2"])), p["pred.b2"])

    def predict(self, g: Tensor) -> Tensor:
        return ad.softmax_rows(self.logits(g))

    # --- persistence --------------------------------------------------------------

    def config(self) -> dict:
        return {
            "num_features": self.num_features, "num_classes": self.num_classes, "dim": self.dim,
            "layers": self.layers, "dropout": self.dropout, "slope": self.slope,
        }

    def state(self) -> dict:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ShapeMismatch(f"checkpoint tensor {k} has shape {state[k].shape}, expected {p.shape}")
            p.value = np.array(state[k], dtype=np.float64, copy=True)


def save_checkpoint(path, model: HGATE, normalizer: FeatureNormalizer, classes, extra=None) -> None:
    tensors = dict(model.state())
    tensors.update(normalizer.to_dict())
    meta = {"model": model.config(), "classes": list(classes)}
    if extra:
        meta.update(extra)
    ad.save_tensors(path, tensors, meta)


def load_checkpoint(path):
    tensors, meta = ad.load_tensors(path)
    model = HGATE(**meta["model"])
    model.load_state(tensors)
    return model, FeatureNormalizer.from_dict(tensors), meta["classes"], meta
