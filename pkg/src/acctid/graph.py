"""Lightweight account interaction graph (lw-AIG).

Nodes are externally owned accounts (EOAs). Repeated EOA->EOA transactions are
merged into one directed edge carrying ``[times, total_amount]``; contract
calls made by an EOA become per-contract call counts in that EOA's feature row.
Amounts stay exact Python integers (wei) inside the graph.
"""
from __future__ import annotations

import csv
import struct
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DuplicateConflictingLabel, SnapshotFormatError
from .records import InteractionRecord

MAGIC = b"LWAIG1"
_U64 = (1 << 64) - 1
_U128 = (1 << 128) - 1


@dataclass(eq=False)
class LwAig:
    eoa_ids: list[str]
    ca_ids: list[str]
    src: np.ndarray  # int64, edges sorted by (src, dst)
    dst: np.ndarray
    times: np.ndarray  # int64, >= 1
    amounts: list[int]  # exact wei totals, aligned with src/dst
    features: sp.csr_matrix  # (n, F) int64 call counts
    labels: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.eoa_index = {a: i for i, a in enumerate(self.eoa_ids)}
        self.ca_index = {a: i for i, a in enumerate(self.ca_ids)}
        self.amount_f = np.array([float(w) for w in self.amounts], dtype=np.float64)
        self._undirected = None

    @property
    def num_nodes(self) -> int:
        return len(self.eoa_ids)

    @property
    def num_contracts(self) -> int:
        return len(self.ca_ids)

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    def edge_features(self) -> np.ndarray:
        """(m, 2) float array of ``[times, total_amount]``."""
        return np.column_stack([self.times.astype(np.float64), self.amount_f])

    def out_indptr(self) -> np.ndarray:
        return np.searchsorted(self.src, np.arange(self.num_nodes + 1)).astype(np.int64)

    def edge_lookup(self) -> dict[tuple[int, int], int]:
        return {(int(s), int(d)): k for k, (s, d) in enumerate(zip(self.src, self.dst))}

    def undirected(self):
        """CSR view of in-or-out adjacency, excluding self-loops.

        Returns ``(indptr, neighbors, out_edge, in_edge)`` where ``out_edge[p]``
        is the edge id of ``v -> neighbors[p]`` (or -1) and ``in_edge[p]`` the
        edge id of ``neighbors[p] -> v`` (or -1). Neighbors of each node are
        sorted by index.
        """
        if self._undirected is not None:
            return self._undirected
        n = self.num_nodes
        eid = np.arange(self.num_edges, dtype=np.int64)
        keep = self.src != self.dst
        s, d, e = self.src[keep], self.dst[keep], eid[keep]
        # each directed edge appears once from each endpoint's point of view
        owner = np.concatenate([s, d])
        other = np.concatenate([d, s])
        out_e = np.concatenate([e, np.full_like(e, -1)])
        in_e = np.concatenate([np.full_like(e, -1), e])
        order = np.lexsort((other, owner))
        owner, other, out_e, in_e = owner[order], other[order], out_e[order], in_e[order]
        if owner.size:
            first = np.ones(owner.size, dtype=bool)
            first[1:] = (owner[1:] != owner[:-1]) | (other[1:] != other[:-1])
            group = np.cumsum(first) - 1
            k = int(group[-1]) + 1
            u_owner = owner[first]
            u_other = other[first]
            u_out = np.full(k, -1, dtype=np.int64)
            u_in = np.full(k, -1, dtype=np.int64)
            np.maximum.at(u_out, group, out_e)
            np.maximum.at(u_in, group, in_e)
        else:
            u_owner = u_other = u_out = u_in = np.zeros(0, dtype=np.int64)
        indptr = np.searchsorted(u_owner, np.arange(n + 1)).astype(np.int64)
        self._undirected = (indptr, u_other, u_out, u_in)
        return self._undirected

    def __eq__(self, other):
        if not isinstance(other, LwAig):
            return NotImplemented
        return (
            self.eoa_ids == other.eoa_ids
            and self.ca_ids == other.ca_ids
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.times, other.times)
            and self.amounts == other.amounts
            and self.features.shape == other.features.shape
            and (self.features != other.features).nnz == 0
            and self.labels == other.labels
        )

    __hash__ = None


def build_lw_aig(records: Iterable[InteractionRecord]) -> LwAig:
    """Merge raw records into an lw-AIG.

    Account kinds come from the record flags; an id flagged as a contract
    anywhere is treated as a contract. Node and contract indices follow first
    appearance. Calls initiated by contracts are dropped because only EOAs are
    nodes. Self-transfers become self-loop edges, zero-value transfers still
    count towards ``times``.
    """
    records = list(records)
    contracts = set()
    for r in records:
        if r.from_is_contract:
            contracts.add(r.sender)
        if r.to_is_contract:
            contracts.add(r.receiver)

    eoa_index: dict[str, int] = {}
    ca_index: dict[str, int] = {}
    for r in records:
        for acct in (r.sender, r.receiver):
            table = ca_index if acct in contracts else eoa_index
            if acct not in table:
                table[acct] = len(table)

    merged: dict[tuple[int, int], list[int]] = {}
    calls: dict[tuple[int, int], int] = {}
    for r in records:
        if r.sender in contracts:
            continue
        i = eoa_index[r.sender]
        if r.receiver in contracts:
            if r.is_call:
                key = (i, ca_index[r.receiver])
                calls[key] = calls.get(key, 0) + 1
            continue
        if r.is_call:
            continue
        j = eoa_index[r.receiver]
        acc = merged.get((i, j))
        if acc is None:
            merged[(i, j)] = [1, r.value]
        else:
            acc[0] += 1
            acc[1] += r.value

    keys = sorted(merged)
    src = np.array([k[0] for k in keys], dtype=np.int64)
    dst = np.array([k[1] for k in keys], dtype=np.int64)
    times = np.array([merged[k][0] for k in keys], dtype=np.int64)
    amounts = [merged[k][1] for k in keys]
    features = _call_matrix(calls, len(eoa_index), len(ca_index))
    return LwAig(list(eoa_index), list(ca_index), src, dst, times, amounts, features)


def _call_matrix(calls, n, f):
    if calls:
        rows, cols = zip(*calls.keys())
        vals = list(calls.values())
    else:
        rows, cols, vals = (), (), ()
    mat = sp.coo_matrix(
        (np.asarray(vals, dtype=np.int64), (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))),
        shape=(n, f),
    ).tocsr()
    mat.sort_indices()
    return mat


def attach_labels(graph: LwAig, labels) -> tuple[LwAig, list[str]]:
    """Return a copy of ``graph`` with identity labels and the unresolved ids.

    ``labels`` is a mapping or an iterable of ``(account_id, label)`` pairs; the
    pair form lets duplicates be detected. Ids that are not EOA nodes are
    reported in the returned list instead of failing.
    """
    pairs = labels.items() if isinstance(labels, Mapping) else labels
    new = dict(graph.labels)
    seen: dict[int, str] = {}
    unresolved = []
    for acct, label in pairs:
        idx = graph.eoa_index.get(acct)
        if idx is None:
            unresolved.append(acct)
            continue
        label = str(label)
        prev = seen.get(idx, graph.labels.get(idx))
        if prev is not None and prev != label:
            raise DuplicateConflictingLabel(
                f"account {acct} labeled both {prev!r} and {label!r}"
            )
        seen[idx] = label
        new[idx] = label
    out = LwAig(
        graph.eoa_ids, graph.ca_ids, graph.src, graph.dst, graph.times,
        graph.amounts, graph.features, dict(sorted(new.items())),
    )
    return out, unresolved


def read_labels(path) -> list[tuple[str, str]]:
    """Read an ``account,label`` CSV (header optional)."""
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or not row[0].strip():
                continue
            if i == 0 and row[0].strip().lower() in ("account", "address", "id"):
                continue
            pairs.append((row[0].strip(), row[1].strip()))
    return pairs


def write_labels(pairs: Iterable[tuple[str, str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("account,label\n")
        for acct, label in pairs:
            fh.write(f"{acct},{label}\n")


# --- binary snapshot -------------------------------------------------------

def _pack_strings(items):
    out = bytearray()
    for s in items:
        b = s.encode("utf-8")
        out += struct.pack("<I", len(b))
        out += b
    return bytes(out)


def save_snapshot(graph: LwAig, path) -> None:
    """Write the ``LWAIG1`` little-endian snapshot."""
    n, f, m = graph.num_nodes, graph.num_contracts, graph.num_edges
    coo = graph.features.tocoo()
    order = np.lexsort((coo.col, coo.row))
    rows, cols, vals = coo.row[order], coo.col[order], coo.data[order]
    buf = bytearray(MAGIC)
    buf += struct.pack("<5Q", n, f, m, len(vals), len(graph.labels))
    buf += _pack_strings(graph.eoa_ids)
    buf += _pack_strings(graph.ca_ids)
    buf += graph.out_indptr().astype("<u8").tobytes()
    buf += graph.dst.astype("<u8").tobytes()
    edge = np.empty((m, 3), dtype="<u8")
    for k, (t, w) in enumerate(zip(graph.times, graph.amounts)):
        if w > _U128:
            raise SnapshotFormatError(f"edge {k} amount exceeds 128 bits")
        edge[k] = (int(t), w & _U64, w >> 64)
    buf += edge.tobytes()
    trip = np.column_stack([rows, cols, vals]).astype("<u8") if len(vals) else np.zeros((0, 3), "<u8")
    buf += trip.tobytes()
    for idx, label in graph.labels.items():
        buf += struct.pack("<Q", idx)
        buf += _pack_strings([label])
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, k):
        if self.pos + k > len(self.data):
            raise SnapshotFormatError("truncated snapshot")
        out = self.data[self.pos:self.pos + k]
        self.pos += k
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def strings(self, count):
        out = []
        for _ in range(count):
            (length,) = self.unpack("<I")
            out.append(self.take(length).decode("utf-8"))
        return out

    def u64(self, count):
        return np.frombuffer(self.take(8 * count), dtype="<u8").astype(np.int64)


def load_snapshot(path) -> LwAig:
    rd = _Reader(Path(path).read_bytes())
    if rd.take(len(MAGIC)) != MAGIC:
        raise SnapshotFormatError(f"{path}: not an LWAIG1 snapshot", path=path)
    n, f, m, nnz, nlab = rd.unpack("<5Q")
    eoa_ids = rd.strings(n)
    ca_ids = rd.strings(f)
    indptr = rd.u64(n + 1)
    dst = rd.u64(m)
    raw_edges = np.frombuffer(rd.take(24 * m), dtype="<u8").reshape(m, 3)
    trip = np.frombuffer(rd.take(24 * nnz), dtype="<u8").reshape(nnz, 3).astype(np.int64)
    labels = {}
    for _ in range(nlab):
        (idx,) = rd.unpack("<Q")
        labels[int(idx)] = rd.strings(1)[0]
    if rd.pos != len(rd.data):
        raise SnapshotFormatError(f"{path}: trailing bytes in snapshot", path=path)
    src = np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr))
    times = raw_edges[:, 0].astype(np.int64)
    amounts = [int(lo) | (int(hi) << 64) for lo, hi in raw_edges[:, 1:]]
    feats = sp.csr_matrix((trip[:, 2], (trip[:, 0], trip[:, 1])), shape=(n, f), dtype=np.int64)
    feats.sort_indices()
    return LwAig(eoa_ids, ca_ids, src, dst, times, amounts, feats, labels)
