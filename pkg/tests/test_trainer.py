import math

import numpy as np
import pytest
import scipy.sparse as sp

from acctid import autodiff as ad
from acctid.augment import make_view_pair, parse_pair
from acctid.config import TrainConfig
from acctid.errors import EmptySplit, SingleClassFold
from acctid.hgate import HGATE, FeatureNormalizer
from acctid.sampler import AccountSubgraph
from acctid.trainer import (
    _step_loss,
    contrastive_loss,
    cross_validate,
    micro_f1,
    micro_f1_from_counts,
    prediction_loss,
    split_three,
    stratified_folds,
    subsample_labels,
    train,
)


def loop_contrast(z1, z2, tau):
    """Reference: per-row -log(exp(pos) / sum over negatives), averaged."""
    n = len(z1)
    cos = lambda a, b: float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    total = 0.0
    for i in range(n):
        pos = math.exp(cos(z1[i], z2[i]) / tau)
        neg = sum(math.exp(cos(z1[i], z2[j]) / tau) for j in range(n) if j != i)
        total += -math.log(pos / neg)
    return total / n


@pytest.mark.parametrize("n", [2, 4, 8])
def test_contrast_matches_loop(n, rng):
    for _ in range(5):
        z1, z2 = rng.normal(size=(n, 5)), rng.normal(size=(n, 5))
        assert abs(contrastive_loss(z1, z2, 0.2).item() - loop_contrast(z1, z2, 0.2)) < 1e-10


def test_contrast_identical_orthogonal_pair():
    z = np.eye(2)
    ref = loop_contrast(z, z, 0.2)
    assert ref == pytest.approx(-5.0, abs=1e-12)
    assert contrastive_loss(z, z, 0.2).item() == pytest.approx(ref, abs=1e-12)


def test_contrast_scale_invariant(rng):
    z1, z2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    a = contrastive_loss(z1, z2).item()
    assert contrastive_loss(3.0 * z1, 0.5 * z2).item() == pytest.approx(a, abs=1e-12)


def test_contrast_decreases_as_positives_align(rng):
    z1, noise = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    losses = [contrastive_loss(z1, z1 + s * noise).item() for s in (2.0, 1.0, 0.5, 0.0)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_contrast_symmetric_and_gradcheck(rng):
    z1, z2 = ad.param(rng.normal(size=(4, 3))), ad.param(rng.normal(size=(4, 3)))
    sym = contrastive_loss(z1, z2, 0.5, symmetric=True).item()
    want = 0.5 * (loop_contrast(z1.value, z2.value, 0.5) + loop_contrast(z2.value, z1.value, 0.5))
    assert sym == pytest.approx(want, abs=1e-10)
    assert ad.gradcheck(lambda: contrastive_loss(z1, z2, 0.2), [z1, z2]) < 1e-4
    with pytest.raises(EmptySplit):
        contrastive_loss(np.ones((1, 3)), np.ones((1, 3)))


def test_prediction_loss():
    assert prediction_loss(np.eye(3), [0, 1, 2]) == pytest.approx(0.0, abs=1e-12)
    assert prediction_loss(np.full((4, 2), 0.5), [0, 1, 1, 0]) == pytest.approx(math.log(2))
    p = np.array([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]])
    y = [1, 2]
    ref = -sum(math.log(p[i][y[i]]) for i in range(2)) / 2
    assert prediction_loss(p, y) == pytest.approx(ref, abs=1e-12)
    logits = np.log(p)
    assert ad.cross_entropy(logits, np.array(y)).item() == pytest.approx(ref, abs=1e-12)


def test_micro_f1():
    assert micro_f1_from_counts(3, 1, 2) == pytest.approx(0.6667, abs=1e-4)
    y = np.array([0, 1] * 50)
    assert micro_f1(y, np.zeros_like(y)) == pytest.approx(0.5)
    assert micro_f1(y, y) == 1.0


def test_stratified_folds_partition(rng):
    y = rng.integers(0, 4, size=97)
    parts = stratified_folds(y, 3, 7)
    joined = np.sort(np.concatenate(parts))
    assert np.array_equal(joined, np.arange(97))
    for c in range(4):
        counts = [int((y[p] == c).sum()) for p in parts]
        assert max(counts) - min(counts) <= 1
    assert all(np.array_equal(a, b) for a, b in zip(parts, stratified_folds(y, 3, 7)))
    tr, va, te = split_three(y, 7)
    assert not set(tr) & set(va) and not set(va) & set(te)
    assert abs(len(tr) - len(te)) <= 4


def test_single_class_fold():
    with pytest.raises(SingleClassFold):
        stratified_folds(np.array([0] * 10 + [1]), 3, 0)


def test_subsample_labels_stratified():
    y = np.array([0] * 40 + [1] * 20)
    kept = subsample_labels(np.arange(60), y, 0.25, 0)
    assert (y[kept] == 0).sum() == 10 and (y[kept] == 1).sum() == 5


# --- training on a toy set ------------------------------------------------------

F = 6


def toy_graph(rng, label):
    """Class 'a' calls contracts 0-2, class 'b' calls 3-5; random small topology."""
    n = int(rng.integers(3, 7))
    src = rng.integers(0, n, size=2 * n)
    dst = rng.integers(0, n, size=2 * n)
    keep = np.unique(src * n + dst)
    src, dst = keep // n, keep % n
    e = np.column_stack([rng.integers(1, 5, size=len(src)), rng.integers(1, 1000, size=len(src))]).astype(float)
    x = np.zeros((n, F))
    cols = slice(0, 3) if label == "a" else slice(3, 6)
    x[:, cols] = rng.integers(0, 4, size=(n, 3))
    return AccountSubgraph(np.arange(n), src, dst, e, sp.csr_matrix(x), label, "0x", "amount")


def toy_set(seed, n=24):
    rng = np.random.default_rng(seed)
    return [toy_graph(rng, "a" if i % 2 else "b") for i in range(n)]


def toy_cfg(**kw):
    base = dict(dim=8, batch_size=8, max_epochs=8, patience=50, lr=0.01, seed=1, k=3)
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_deterministic():
    data = toy_set(0)
    r1 = train(data[:16], data[16:], toy_cfg())
    r2 = train(data[:16], data[16:], toy_cfg())
    assert r1.history == r2.history
    assert all(np.array_equal(r1.model.state()[k], r2.model.state()[k]) for k in r1.model.state())


def test_zero_lambda_identity_equals_no_contrast():
    data = toy_set(1)
    cfg = toy_cfg(lam=0.0, aug="identity&identity")
    with_term = train(data[:16], data[16:], cfg)
    without = train(data[:16], data[16:], cfg, use_contrast=False)
    assert [h["l_pred"] for h in with_term.history] == [h["l_pred"] for h in without.history]
    for k, v in with_term.model.state().items():
        assert np.array_equal(v, without.model.state()[k])


def test_total_loss_decomposes():
    data = toy_set(2, n=8)
    cfg = toy_cfg()
    model = HGATE(F, 2, dim=8, seed=0)
    norm = FeatureNormalizer.fit(data)
    t1, t2 = parse_pair(cfg.aug, cfg.p)
    pairs = [make_view_pair(g, t1, t2, seed=i) for i, g in enumerate(data)]
    v1, v2 = [p[0] for p in pairs], [p[1] for p in pairs]

    def run(lam):
        return _step_loss(model, v1, v2, data, norm, ["a", "b"], cfg.updated(lam=lam),
                          np.random.default_rng(5), True)
    zero, _, _ = run(0.0)
    total, l_pred, l_self = run(0.7)
    assert total.item() == pytest.approx(zero.item() + 0.7 * l_self.item(), abs=1e-12)
    assert l_pred.item() == pytest.approx(zero.item(), abs=1e-12)


def test_early_stopping_patience():
    data = toy_set(3)
    res = train(data[:16], data[16:], toy_cfg(patience=2, max_epochs=40))
    assert len(res.history) <= res.best_epoch + 3
    assert res.best_val_f1 == max(h["val_f1"] for h in res.history)


def test_loss_decreases_on_most_seeds():
    wins = 0
    for seed in range(5):
        data = toy_set(10 + seed)
        res = train(data[:16], data[16:], toy_cfg(seed=seed, max_epochs=15, lam=0.0))
        wins += res.history[-1]["loss"] < res.history[0]["loss"]
    assert wins >= 4


def test_unlabeled_feed_only_the_contrast_term():
    data = toy_set(4, n=30)
    cfg = toy_cfg(max_epochs=3)
    base = train(data[:12], data[12:20], cfg, use_contrast=False)
    ignored = train(data[:12], data[12:20], cfg, use_contrast=False, unlabeled=data[20:])
    assert base.history == ignored.history
    used = train(data[:12], data[12:20], cfg, unlabeled=data[20:])
    assert len(used.history) == 3 and all(np.isfinite(h["loss"]) for h in used.history)


def test_empty_splits():
    data = toy_set(5, n=4)
    with pytest.raises(EmptySplit):
        train([], data, toy_cfg())
    with pytest.raises(EmptySplit):
        train(data, [], toy_cfg())


def test_cross_validate_shape():
    data = toy_set(6, n=30)
    out = cross_validate(data, toy_cfg(repeats=1, max_epochs=3, label_fraction=0.5))
    assert len(out["folds"]) == 3
    assert 0.0 <= out["mean_f1"] <= 1.0
    assert out["best"].best_val_f1 == max(f["val_f1"] for f in out["folds"])
