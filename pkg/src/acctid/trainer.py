"""Joint subgraph-contrast + classification training and micro-F1 evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .augment import make_view_pair, parse_pair
from .config import TrainConfig
from .errors import EmptySplit, NonFiniteLoss, NonFiniteValue, SingleClassFold, ZeroVector
from .hgate import HGATE, FeatureNormalizer, SubgraphBatch

log = logging.getLogger(__name__)


# --- losses -------------------------------------------------------------------

def contrastive_loss(z1, z2, tau: float = 0.2, symmetric: bool = False) -> ad.Tensor:
    """Subgraph contrast between two (N, d) views in matching row order.

    ``L_i = -log(exp(cos(z1_i, z2_i)/tau) / sum_{j != i} exp(cos(z1_i, z2_j)/tau))``
    averaged over rows. The positive pair is left out of the denominator.
    """
    z1, z2 = ad.const(z1), ad.const(z2)
    n = z1.shape[0]
    if n < 2:
        raise EmptySplit("contrastive loss needs at least 2 rows")
    n1 = ad.l2_normalize_rows(z1)
    n2 = ad.l2_normalize_rows(z2)
    sim = ad.scale(ad.matmul(n1, ad.transpose(n2)), 1.0 / tau)
    negatives = ~np.eye(n, dtype=bool)
    loss = ad.mean(ad.sub(ad.logsumexp_rows(sim, negatives), ad.diagonal(sim)))
    if not symmetric:
        return loss
    sim_t = ad.transpose(sim)
    other = ad.mean(ad.sub(ad.logsumexp_rows(sim_t, negatives), ad.diagonal(sim_t)))
    return ad.scale(ad.add(loss, other), 0.5)


def prediction_loss(probabilities, labels) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    picked = np.clip(p[np.arange(len(y)), y], 1e-12, None)
    return float(-np.mean(np.log(picked)))


# --- metrics --------------------------------------------------------------------

def micro_f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def micro_f1(y_true, y_pred) -> float:
    """Micro-F1 from pooled per-class counts (single-label: equals accuracy)."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    tp = int((y_true == y_pred).sum())
    wrong = int(y_true.size - tp)
    return micro_f1_from_counts(tp, wrong, wrong)


def stratified_folds(labels, folds: int, seed) -> list[np.ndarray]:
    """Split indices into ``folds`` parts with per-class round-robin assignment."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts = [[] for _ in range(folds)]
    start = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        for i, v in enumerate(idx):
            parts[(start + i) % folds].append(int(v))
        start = (start + len(idx)) % folds
    out = [np.array(sorted(p), dtype=np.int64) for p in parts]
    if len(np.unique(labels)) > 1:
        for f, p in enumerate(out):
            if len(np.unique(labels[p])) < 2:
                raise SingleClassFold(f"fold {f} holds a single class; dataset too small for {folds} folds")
    return out


def split_three(labels, seed, fold: int = 0, folds: int = 3):
    """Train/val/test indices (1:1:1) from a stratified fold assignment."""
    parts = stratified_folds(labels, folds, seed)
    test = parts[fold % folds]
    val = parts[(fold + 1) % folds]
    train = np.sort(np.concatenate([parts[i] for i in range(folds) if i not in (fold % folds, (fold + 1) % folds)]))
    return train, val, test


def subsample_labels(indices, labels, fraction: float, seed) -> np.ndarray:
    """Stratified subset keeping ``fraction`` of each class (at least one)."""
    if fraction >= 1.0:
        return np.asarray(indices)
    rng = np.random.default_rng(seed)
    indices = np.asarray(indices)
    keep = []
    lab = np.asarray(labels)[indices]
    for c in np.unique(lab):
        members = indices[lab == c]
        take = max(1, int(round(len(members) * fraction)))
        keep.extend(rng.choice(members, size=take, replace=False).tolist())
    return np.array(sorted(keep), dtype=np.int64)


# --- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    model: HGATE
    normalizer: FeatureNormalizer
    classes: list
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_f1: float = -1.0


def predict_labels(model: HGATE, normalizer: FeatureNormalizer, subgraphs, classes, chunk: int = 256) -> np.ndarray:
    preds = []
    for lo in range(0, len(subgraphs), chunk):
        batch = SubgraphBatch.build(subgraphs[lo:lo + chunk], normalizer, classes)
        out = model.encode(batch, train=False)
        preds.append(np.argmax(model.logits(out.g).value, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def embed(model: HGATE, normalizer: FeatureNormalizer, subgraphs, chunk: int = 256) -> np.ndarray:
    rows = []
    for lo in range(0, len(subgraphs), chunk):
        batch = SubgraphBatch.build(subgraphs[lo:lo + chunk], normalizer)
        rows.append(model.encode(batch, train=False).g.value)
    return np.concatenate(rows, axis=0)


def _label_ids(subgraphs, classes):
    cidx = {c: i for i, c in enumerate(classes)}
    return np.array([cidx[g.label] for g in subgraphs], dtype=np.int64)


def _step_loss(model, views1, views2, raw, normalizer, classes, cfg, rng, use_contrast):
    n = len(views1)
    batch = SubgraphBatch.build(views1 + views2, normalizer, classes)
    out = model.encode(batch, train=True, rng=rng)
    if cfg.pred_on == "views":
        g, labels = out.g, batch.labels
    else:
        raw_batch = SubgraphBatch.build(raw, normalizer, classes)
        g, labels = model.encode(raw_batch, train=True, rng=rng).g, raw_batch.labels
    known = np.flatnonzero(labels >= 0)
    if known.size == labels.size:
        l_pred = ad.cross_entropy(model.logits(g), labels)
    elif known.size:
        l_pred = ad.cross_entropy(model.logits(ad.rows(g, known)), labels[known])
    else:
        l_pred = ad.const(np.zeros((1, 1)))
    if not use_contrast:
        return l_pred, l_pred, None
    z = model.project(out.g)
    l_self = contrastive_loss(ad.rows(z, slice(0, n)), ad.rows(z, slice(n, 2 * n)), cfg.tau, cfg.symmetric)
    total = ad.add(l_pred, ad.scale(l_self, cfg.lam))
    return total, l_pred, l_self


def train(train_set, val_set, cfg: TrainConfig, classes=None, graph=None,
          use_contrast: bool = True, history_sink=None, unlabeled=None) -> TrainResult:
    """Train an HGATE on ``train_set``; early-stop on validation micro-F1.

    Each batch encodes two augmented views of every subgraph, both carrying the
    target's label. Loss is ``L_pred + lam * L_self``. ``use_contrast=False``
    drops the contrast term from the graph entirely. Subgraphs in ``unlabeled``
    join the batches with their labels hidden and only feed the contrast term;
    they are ignored when ``use_contrast`` is off. The returned model holds the
    parameters of the best validation epoch.
    """
    if not train_set:
        raise EmptySplit("training split is empty")
    if not val_set:
        raise EmptySplit("validation split is empty")
    classes = list(classes) if classes is not None else sorted({g.label for g in train_set} | {g.label for g in val_set})
    if unlabeled and use_contrast:
        train_set = list(train_set) + [g.with_label(None) for g in unlabeled]
    nfeat = train_set[0].node_features.shape[1]
    model = HGATE(nfeat, len(classes), cfg.dim, cfg.layers, cfg.dropout, seed=cfg.seed)
    normalizer = FeatureNormalizer.fit(train_set)
    opt = ad.Adam(model.params, lr=cfg.lr) if cfg.optimizer == "adam" else ad.SGD(model.params, lr=cfg.lr)
    t1, t2 = parse_pair(cfg.aug, cfg.p, cfg.hops, cfg.k)
    val_y = _label_ids(val_set, classes)
    result = TrainResult(model, normalizer, classes)
    best_state = model.state()
    n_train = len(train_set)

    for epoch in range(cfg.max_epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n_train)
        sums = {"l_pred": 0.0, "l_self": 0.0, "loss": 0.0}
        nb = 0
        for b, lo in enumerate(range(0, n_train, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            if len(idx) < 2:
                continue  # contrast needs a negative
            raw = [train_set[i] for i in idx]
            pairs = [make_view_pair(raw[j], t1, t2, seed=[cfg.seed, epoch, b, j], graph=graph)
                     for j in range(len(raw))]
            views1 = [p[0] for p in pairs]
            views2 = [p[1] for p in pairs]
            opt.zero_grad()
            try:
                with ad.Tape() as tape:
                    total, l_pred, l_self = _step_loss(model, views1, views2, raw, normalizer, classes,
                                                       cfg, rng, use_contrast)
                tape.backward(total)
            except (NonFiniteValue, ZeroVector) as exc:
                raise NonFiniteLoss(f"epoch {epoch} batch {b}: {exc}") from exc
            opt.step()
            sums["loss"] += total.item()
            sums["l_pred"] += l_pred.item()
            sums["l_self"] += l_self.item() if l_self is not None else 0.0
            nb += 1
        if nb == 0:
            raise EmptySplit("training split has no batch of size >= 2")
        val_f1 = micro_f1(val_y, predict_labels(model, normalizer, val_set, classes))
        entry = {"epoch": epoch, "loss": sums["loss"] / nb, "l_pred": sums["l_pred"] / nb,
                 "l_self": sums["l_self"] / nb, "val_f1": val_f1}
        result.history.append(entry)
        if history_sink is not None:
            history_sink(entry)
        log.debug("epoch %d loss %.4f val_f1 %.4f", epoch, entry["loss"], val_f1)
        if val_f1 > result.best_val_f1:
            result.best_val_f1 = val_f1
            result.best_epoch = epoch
            best_state = model.state()
        elif epoch - result.best_epoch >= cfg.patience:
            break
    model.load_state(best_state)
    return result


# --- evaluation -----------------------------------------------------------------

def evaluate(model: HGATE, normalizer: FeatureNormalizer, dataset, classes, folds: int = 3,
             repeats: int = 1, seed: int = 0) -> dict:
    """Micro-F1 of fixed parameters over stratified folds of ``dataset``."""
    y = _label_ids(dataset, classes)
    pred = predict_labels(model, normalizer, dataset, classes)
    scores = []
    for r in range(repeats):
        for part in stratified_folds(y, folds, [seed, r]):
            scores.append(micro_f1(y[part], pred[part]))
    return {"folds": [{"f1": s} for s in scores], "mean_f1": float(np.mean(scores)),
            "std_f1": float(np.std(scores)), "pooled_f1": micro_f1(y, pred)}


def cross_validate(dataset, cfg: TrainConfig, classes=None, graph=None, use_contrast: bool = True,
                   history_sink=None) -> dict:
    """Repeated stratified k-fold: per fold, train/val/test in ratio 1:1:1 for 3 folds.

    Returns per-fold test micro-F1 plus mean and std, and the best-validation
    run's ``TrainResult`` under ``"best"``.
    """
    classes = list(classes) if classes is not None else sorted({g.label for g in dataset})
    y = _label_ids(dataset, classes)
    fold_scores = []
    best = None
    for r in range(cfg.repeats):
        for f in range(cfg.folds):
            tr, va, te = split_three(y, [cfg.seed, r], f, cfg.folds)
            kept = subsample_labels(tr, y, cfg.label_fraction, [cfg.seed, r, f])
            hidden = np.setdiff1d(tr, kept)
            tr = kept
            run_cfg = cfg.updated(seed=cfg.seed * 1000 + r * cfg.folds + f)

            def sink(entry, r=r, f=f):
                if history_sink is not None:
                    history_sink({"repeat": r, "fold": f, **entry})

            res = train([dataset[i] for i in tr], [dataset[i] for i in va], run_cfg, classes, graph,
                        use_contrast, sink, unlabeled=[dataset[i] for i in hidden])
            f1 = micro_f1(y[te], predict_labels(res.model, res.normalizer, [dataset[i] for i in te], classes))
            fold_scores.append({"repeat": r, "fold": f, "f1": f1, "val_f1": res.best_val_f1,
                                "best_epoch": res.best_epoch})
            if best is None or res.best_val_f1 > best.best_val_f1:
                best = res
    scores = [s["f1"] for s in fold_scores]
    return {"folds": fold_scores, "mean_f1": float(np.mean(scores)), "std_f1": float(np.std(scores)),
            "best": best}


def history_writer(path):
    fh = open(path, "w", encoding="utf-8")

    def sink(entry):
        fh.write(json.dumps(entry, sort_keys=True) + "\n")
        fh.flush()
    sink.close = fh.close
    return sink
