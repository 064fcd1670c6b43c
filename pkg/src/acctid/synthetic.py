"""Seeded synthetic transaction data with four behavior archetypes.

* exchange: hub with many in- and out-counterparts, many repeated interactions,
  frequent contract use;
* ico-wallet: a few large incoming investments, many moderate outgoing rewards;
* mining: many outgoing payouts with a near-constant per-payout amount;
* phish-hack: many incoming transfers of clustered size, almost no outgoing
  transfers and few mutual counterparts.

Labeled accounts only transact with background accounts; background accounts
also transact among themselves so 2-hop neighborhoods are non-trivial. Each
class calls contracts from its own preferred subset, and its counterparts pick
up a few calls from the same subset, so node features carry class signal.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .graph import LwAig, attach_labels, build_lw_aig
from .records import InteractionRecord

WEI = 10 ** 18
BASE_TS = 1_438_560_000  # 2015-08-03 UTC
FUNCTIONS = ("transfer", "approve", "deposit", "withdraw", "swap", "claim", "mint", "buy")


@dataclass(frozen=True)
class Archetype:
    in_degree: tuple[int, int]
    out_degree: tuple[int, int]
    in_times: tuple[int, int] = (1, 1)
    out_times: tuple[int, int] = (1, 1)
    in_avg: tuple[float, float] = (1.0, 0.5)  # mean, std of per-transfer Ether
    out_avg: tuple[float, float] = (1.0, 0.5)
    bidirectional: float = 0.0  # share of the smaller side reused on the other side
    calls: tuple[int, int] = (0, 5)
    active_days: int = 300


ARCHETYPES = {
    "exchange": Archetype(in_degree=(25, 45), out_degree=(25, 45), in_times=(3, 12), out_times=(3, 12),
                          in_avg=(5.0, 4.0), out_avg=(5.0, 4.0), bidirectional=0.5, calls=(30, 80),
                          active_days=700),
    "ico-wallet": Archetype(in_degree=(5, 12), out_degree=(30, 50), in_times=(1, 2), out_times=(1, 2),
                            in_avg=(20.0, 10.0), out_avg=(3.0, 1.5), bidirectional=0.1, calls=(3, 10),
                            active_days=550),
    "mining": Archetype(in_degree=(0, 2), out_degree=(30, 50), in_times=(1, 1), out_times=(5, 15),
                        in_avg=(2.0, 1.0), out_avg=(1.0, 0.05), bidirectional=0.05, calls=(20, 60),
                        active_days=600),
    "phish-hack": Archetype(in_degree=(20, 40), out_degree=(0, 2), in_times=(1, 2), out_times=(1, 1),
                            in_avg=(0.5, 0.05), out_avg=(8.0, 4.0), bidirectional=0.02, calls=(0, 5),
                            active_days=80),
}


@dataclass(frozen=True)
class SyntheticSpec:
    counts: dict = field(default_factory=lambda: {c: 200 for c in ARCHETYPES})
    archetypes: dict = field(default_factory=lambda: dict(ARCHETYPES))
    background: int = 20000
    background_degree: float = 1.0
    background_calls: float = 1.0
    num_contracts: int = 64
    preferred_per_class: int = 8
    preferred_share: float = 0.7
    counterpart_calls: float = 1.0  # mean class-preferred calls added per counterpart

    def with_counts(self, **counts) -> "SyntheticSpec":
        return replace(self, counts=dict(counts))

    def with_archetype(self, name: str, **params) -> "SyntheticSpec":
        arche = dict(self.archetypes)
        arche[name] = replace(arche[name], **params)
        return replace(self, archetypes=arche)


def _address(rng) -> str:
    return "0x" + rng.bytes(20).hex()


def _amount_wei(rng, mean, std) -> int:
    ether = max(rng.normal(mean, std), 1e-6)
    return int(round(ether * WEI))


class _Builder:
    def __init__(self, rng):
        self.rng = rng
        self.rows = []  # (timestamp, seq, record)

    def stamps(self, count, start_day, span_days):
        days = start_day + self.rng.integers(0, max(span_days, 1), size=count)
        return (BASE_TS + days * 86400 + self.rng.integers(0, 86400, size=count)).tolist()

    def add(self, ts, sender, receiver, value, fn=None, to_ca=False):
        rec = InteractionRecord((ts - BASE_TS) // 15 + 1, ts, sender, receiver, False, to_ca, fn, value)
        self.rows.append((ts, len(self.rows), rec))


def gen_synthetic(spec: SyntheticSpec | None = None, seed: int = 0):
    """Generate ``(records, labels)``; labels is a list of ``(account, class)``."""
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(seed)
    contracts = [_address(rng) for _ in range(spec.num_contracts)]
    background = [_address(rng) for _ in range(spec.background)]
    classes = list(spec.counts)
    order = rng.permutation(spec.num_contracts)
    preferred = {}
    for ci, c in enumerate(classes):
        lo = (ci * spec.preferred_per_class) % max(spec.num_contracts, 1)
        preferred[c] = np.array([int(order[(lo + t) % spec.num_contracts])
                                 for t in range(spec.preferred_per_class)], dtype=np.int64)
    generic = 1.0 / np.arange(1, spec.num_contracts + 1)
    generic = generic[np.argsort(order)]
    generic /= generic.sum()

    out = _Builder(rng)

    def calls(acct, count, pref, start, span, share):
        if count <= 0:
            return
        picks = rng.choice(spec.num_contracts, size=count, p=generic)
        if pref is not None and pref.size:
            use = rng.random(count) < share
            picks[use] = pref[rng.integers(0, pref.size, size=int(use.sum()))]
        fns = rng.integers(0, len(FUNCTIONS), size=count)
        for ts, c, f in zip(out.stamps(count, start, span), picks.tolist(), fns.tolist()):
            out.add(ts, acct, contracts[c], 0, FUNCTIONS[f], to_ca=True)

    def transfers(a, b, times, amount, start, span):
        for ts in out.stamps(times, start, span):
            out.add(ts, a, b, amount)

    # background noise
    for i, acct in enumerate(background):
        for _ in range(int(rng.poisson(spec.background_degree))):
            j = int(rng.integers(0, spec.background))
            if j == i:
                continue
            t = int(rng.integers(1, 4))
            transfers(acct, background[j], t, _amount_wei(rng, 2.0, 1.5), 0, 1500)
        calls(acct, int(rng.poisson(spec.background_calls)), None, 0, 1500, 0.0)

    labels = []
    for c in classes:
        arche = spec.archetypes[c]
        for _ in range(spec.counts[c]):
            acct = _address(rng)
            labels.append((acct, c))
            start = int(rng.integers(0, 800))
            span = arche.active_days
            n_in = int(rng.integers(arche.in_degree[0], arche.in_degree[1] + 1))
            n_out = int(rng.integers(arche.out_degree[0], arche.out_degree[1] + 1))
            n_bi = int(round(arche.bidirectional * min(n_in, n_out)))
            picks = rng.choice(spec.background, size=n_in + n_out - n_bi, replace=False)
            ins = picks[:n_in]
            outs = np.concatenate([ins[:n_bi], picks[n_in:]])
            for j in ins:
                t = int(rng.integers(arche.in_times[0], arche.in_times[1] + 1))
                transfers(background[int(j)], acct, t, _amount_wei(rng, *arche.in_avg), start, span)
            for j in outs:
                t = int(rng.integers(arche.out_times[0], arche.out_times[1] + 1))
                transfers(acct, background[int(j)], t, _amount_wei(rng, *arche.out_avg), start, span)
            calls(acct, int(rng.integers(arche.calls[0], arche.calls[1] + 1)), preferred[c], start, span,
                  spec.preferred_share)
            # counterparts pick up some of the class's contract habits
            for j in picks:
                calls(background[int(j)], int(rng.poisson(spec.counterpart_calls)), preferred[c],
                      start, span, 1.0)

    out.rows.sort(key=lambda r: (r[0], r[1]))
    return [r[2] for r in out.rows], labels


def generate_graph(spec: SyntheticSpec | None = None, seed: int = 0) -> LwAig:
    records, labels = gen_synthetic(spec, seed)
    graph, _ = attach_labels(build_lw_aig(records), labels)
    return graph
