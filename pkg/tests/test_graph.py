import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acctid.errors import DuplicateConflictingLabel, SnapshotFormatError
from acctid.graph import attach_labels, build_lw_aig, load_snapshot, read_labels, save_snapshot, write_labels
from acctid.records import records_from_text, write_records
from conftest import call, groupby_edges, random_records, tx


def edge_dict(g):
    return {(g.eoa_ids[s], g.eoa_ids[d]): [int(t), w]
            for s, d, t, w in zip(g.src, g.dst, g.times, g.amounts)}


def test_merge_three_transfers():
    g = build_lw_aig([tx("A", "B", 1), tx("A", "B", 2), tx("A", "B", 3)])
    assert edge_dict(g) == {("A", "B"): [3, 6]}


def test_direction_preserved():
    g = build_lw_aig([tx("A", "B", 5), tx("B", "A", 7)])
    assert edge_dict(g) == {("A", "B"): [1, 5], ("B", "A"): [1, 7]}


def test_call_counts():
    g = build_lw_aig([call("A", "C"), call("A", "C"), call("A", "D"), tx("A", "B", 1)])
    row = g.features[g.eoa_index["A"]].toarray()[0]
    assert row[g.ca_index["C"]] == 2 and row[g.ca_index["D"]] == 1
    assert row.sum() == 3
    assert g.features[g.eoa_index["B"]].nnz == 0


def test_contract_initiated_calls_dropped():
    g = build_lw_aig([call("C", "D", from_ca=True), call("A", "C")])
    assert g.num_nodes == 1 and g.features.sum() == 1


def test_self_loop_and_zero_value_kept():
    g = build_lw_aig([tx("A", "A", 4), tx("A", "B", 0), tx("A", "B", 0)])
    assert edge_dict(g) == {("A", "A"): [1, 4], ("A", "B"): [2, 0]}


def test_empty_input():
    g = build_lw_aig([])
    assert g.num_nodes == 0 and g.num_edges == 0 and g.features.shape == (0, 0)


@pytest.mark.parametrize("seed", range(5))
def test_matches_groupby_oracle(seed):
    recs = random_records(np.random.default_rng(seed), n_eoa=6, n_ca=3, m=10)
    g = build_lw_aig(recs)
    assert edge_dict(g) == {k: v for k, v in groupby_edges(recs).items()}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_invariants(seed):
    recs = random_records(np.random.default_rng(seed), m=60, big=True)
    g = build_lw_aig(recs)
    # amount conservation, exact integers
    assert sum(g.amounts) == sum(r.value for r in recs if not r.is_call and not r.from_is_contract
                                 and not r.to_is_contract)
    # one edge per ordered pair
    assert len(set(zip(g.src.tolist(), g.dst.tolist()))) == g.num_edges
    assert (g.times >= 1).all()
    # every EOA-initiated call lands in the feature matrix
    assert g.features.sum() == sum(1 for r in recs if r.is_call and not r.from_is_contract)
    # dense contiguous indices
    assert sorted(g.eoa_index.values()) == list(range(g.num_nodes))


def test_rebuild_after_reserialization_is_identical(rng):
    recs = random_records(rng, m=120, big=True)
    buf = io.StringIO()
    write_records(recs, buf)
    assert build_lw_aig(records_from_text(buf.getvalue())) == build_lw_aig(recs)


def test_snapshot_round_trip(tmp_path, rng):
    g, _ = attach_labels(build_lw_aig(random_records(rng, m=150, big=True)), {"0xe001": "exchange"})
    g.amounts[0] = (1 << 127) + 5  # exercise the high word
    path = tmp_path / "g.lwaig"
    save_snapshot(g, path)
    assert path.read_bytes().startswith(b"LWAIG1")
    back = load_snapshot(path)
    assert back == g
    assert back.amounts[0] == (1 << 127) + 5


def test_snapshot_rejects_garbage(tmp_path):
    path = tmp_path / "x"
    path.write_bytes(b"NOTAGRAPH")
    with pytest.raises(SnapshotFormatError):
        load_snapshot(path)
    g = build_lw_aig([tx("A", "B", 1)])
    save_snapshot(g, path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(SnapshotFormatError):
        load_snapshot(path)


def test_attach_labels():
    g = build_lw_aig([tx("0xa", "0xb", 1)])
    g2, missing = attach_labels(g, {"0xa": "exchange"})
    assert g2.labels == {0: "exchange"} and missing == []
    g3, missing = attach_labels(g2, {"0xzz": "phish"})
    assert g3.labels == g2.labels and missing == ["0xzz"]
    with pytest.raises(DuplicateConflictingLabel):
        attach_labels(g, [("0xa", "exchange"), ("0xa", "phish")])
    g4, _ = attach_labels(g, [("0xa", "exchange"), ("0xa", "exchange")])
    assert g4.labels == {0: "exchange"}


def test_label_file_round_trip(tmp_path):
    pairs = [("0xa", "exchange"), ("0xb", "phish-hack")]
    write_labels(pairs, tmp_path / "l.csv")
    assert read_labels(tmp_path / "l.csv") == pairs


def test_undirected_view():
    g = build_lw_aig([tx("A", "B", 1), tx("B", "A", 2), tx("A", "C", 3), tx("C", "C", 1)])
    indptr, nbr, out_e, in_e = g.undirected()
    a = g.eoa_index["A"]
    assert nbr[indptr[a]:indptr[a + 1]].tolist() == [g.eoa_index["B"], g.eoa_index["C"]]
    c = g.eoa_index["C"]
    assert nbr[indptr[c]:indptr[c + 1]].tolist() == [a]  # self-loop is not a neighbor
    p = indptr[a]
    assert out_e[p] >= 0 and in_e[p] >= 0
