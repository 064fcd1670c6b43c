"""Hand-crafted per-account features and a logistic-regression classifier.

Transactions (records without a calling function) feed the received/output
groups; contract calls feed the call group. Amounts are in Ether. A day is a
UTC calendar day and any record involving the account makes it active.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateLabels, ShapeMismatch
from .records import InteractionRecord
from .trainer import micro_f1, stratified_folds

WEI_PER_ETHER = 10 ** 18
FEATURE_NAMES = (
    "active_days",
    "total_received",
    "num_received_tx",
    "inter_acct_received",
    "total_output",
    "num_output_tx",
    "inter_acct_output",
    "avg_received",
    "avg_received_day",
    "avg_received_tx_day",
    "avg_output",
    "avg_output_day",
    "avg_output_tx_day",
    "times_contract_called",
    "times_contract_called_day",
    "num_contract_called",
)


def _ratio(num, den) -> float:
    return num / den if den else 0.0


def extract_manual_features(account: str, records) -> np.ndarray:
    """The 16 features of ``account`` from the records that involve it."""
    days = set()
    recv_wei = out_wei = 0
    n_recv = n_out = n_call = 0
    senders, receivers, contracts = set(), set(), set()
    for r in records:
        involved = False
        if r.is_call:
            if r.sender == account:
                n_call += 1
                contracts.add(r.receiver)
                involved = True
        else:
            if r.receiver == account:
                recv_wei += r.value
                n_recv += 1
                senders.add(r.sender)
                involved = True
            if r.sender == account:
                out_wei += r.value
                n_out += 1
                receivers.add(r.receiver)
                involved = True
        if involved:
            days.add(r.timestamp // 86400)
    active = len(days)
    recv = recv_wei / WEI_PER_ETHER
    out = out_wei / WEI_PER_ETHER
    return np.array([
        active, recv, n_recv, len(senders),
        out, n_out, len(receivers),
        _ratio(recv, n_recv), _ratio(recv, active), _ratio(n_recv, active),
        _ratio(out, n_out), _ratio(out, active), _ratio(n_out, active),
        n_call, _ratio(n_call, active), len(contracts),
    ], dtype=np.float64)


def account_features(records, accounts) -> np.ndarray:
    """Feature matrix with one row per account, in the order given."""
    wanted = set(accounts)
    by_acct: dict[str, list[InteractionRecord]] = defaultdict(list)
    for r in records:
        if r.sender in wanted:
            by_acct[r.sender].append(r)
        if r.receiver in wanted and r.receiver != r.sender:
            by_acct[r.receiver].append(r)
    rows = [extract_manual_features(a, by_acct.get(a, ())) for a in accounts]
    return np.vstack(rows) if rows else np.zeros((0, len(FEATURE_NAMES)))


def write_feature_csv(path, accounts, labels, features) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("account", "label") + FEATURE_NAMES)
        for a, y, row in zip(accounts, labels, features):
            w.writerow([a, "" if y is None else y] + [repr(float(v)) for v in row])


def read_feature_csv(path):
    """Returns ``(accounts, labels, features)``; empty labels become None."""
    accounts, labels, rows = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("account", "label") + FEATURE_NAMES if c not in (reader.fieldnames or [])]
        if missing:
            raise ShapeMismatch(f"{path}: feature CSV lacks columns {missing}", path=Path(path))
        for row in reader:
            accounts.append(row["account"])
            labels.append(row["label"] or None)
            rows.append([float(row[c]) for c in FEATURE_NAMES])
    feats = np.array(rows, dtype=np.float64).reshape(-1, len(FEATURE_NAMES))
    return accounts, labels, feats


# --- logistic regression -----------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        std[std == 0] = 1.0
        return cls(x.mean(axis=0), std)

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def logreg_loss_grad(w, x, y, l2: float):
    """Mean log-loss plus ``l2/2 * |w[:-1]|^2``; ``w[-1]`` is the bias."""
    z = x @ w[:-1] + w[-1]
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * np.dot(w[:-1], w[:-1]))
    r = (_sigmoid(z) - y) / len(y)
    grad = np.empty_like(w)
    grad[:-1] = x.T @ r + l2 * w[:-1]
    grad[-1] = r.sum()
    return loss, grad


def logreg_fit(x, y, l2: float = 1e-3, epochs: int = 500, lr: float = 0.5) -> np.ndarray:
    """Binary logistic regression by full-batch gradient descent."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise DegenerateLabels("logistic regression needs both classes present")
    w = np.zeros(x.shape[1] + 1)
    for _ in range(epochs):
        _, g = logreg_loss_grad(w, x, y, l2)
        w -= lr * g
    return w


def logreg_predict(w, x) -> np.ndarray:
    return _sigmoid(np.asarray(x, dtype=np.float64) @ w[:-1] + w[-1])


@dataclass
class LogRegClassifier:
    """One-vs-rest logistic regression over standardized features."""

    classes: list
    weights: np.ndarray  # (C, F + 1); a single row for two classes
    scaler: Standardizer

    @classmethod
    def fit(cls, x, labels, l2: float = 1e-3, epochs: int = 500, lr: float = 0.5) -> "LogRegClassifier":
        classes = sorted(set(labels))
        if len(classes) < 2:
            raise DegenerateLabels("need at least two classes")
        scaler = Standardizer.fit(x)
        xs = scaler.transform(x)
        lab = np.asarray(labels, dtype=object)
        targets = classes[1:] if len(classes) == 2 else classes
        w = np.vstack([logreg_fit(xs, (lab == c).astype(np.float64), l2, epochs, lr) for c in targets])
        return cls(classes, w, scaler)

    def predict(self, x) -> list:
        xs = self.scaler.transform(x)
        scores = np.column_stack([logreg_predict(w, xs) for w in self.weights])
        if len(self.classes) == 2:
            return [self.classes[int(s >= 0.5)] for s in scores[:, 0]]
        return [self.classes[i] for i in np.argmax(scores, axis=1)]


def cross_validate_lr(x, labels, folds: int = 3, repeats: int = 1, seed: int = 0,
                      l2: float = 1e-3, epochs: int = 500) -> dict:
    """Repeated stratified k-fold: train on ``folds - 1`` parts, test on the rest."""
    x = np.asarray(x, dtype=np.float64)
    lab = np.asarray(labels, dtype=object)
    classes = sorted(set(labels))
    y = np.array([classes.index(v) for v in labels])
    scores = []
    for r in range(repeats):
        parts = stratified_folds(y, folds, [seed, r])
        for f, test in enumerate(parts):
            train = np.sort(np.concatenate([p for i, p in enumerate(parts) if i != f]))
            clf = LogRegClassifier.fit(x[train], lab[train].tolist(), l2, epochs)
            pred = clf.predict(x[test])
            scores.append(micro_f1(lab[test].tolist(), pred))
    return {"folds": [{"f1": s} for s in scores], "mean_f1": float(np.mean(scores)),
            "std_f1": float(np.std(scores))}
