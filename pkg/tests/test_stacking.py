"""Fold, predictor, out-of-fold provenance, and persistence tests."""

import numpy as np
import pytest
from sklearn.neighbors import KNeighborsClassifier

from lithoflow.stacking import (
    KnnPredictor,
    LogisticPredictor,
    MasterModel,
    OofRecord,
    StackedPredictor,
    StackingError,
    generate_oof,
    kfold_split,
    load_oof_csv,
    load_predictor,
    make_predictor,
    save_oof_csv,
    save_predictor,
    verify_oof_provenance,
    window_key,
)
from lithoflow.welldata import Window, make_synth_spec, synth_wells, window


def mkwin(values, well_id="w", start=0, labels=None):
    values = np.asarray(values, dtype=float)
    L = values.shape[0]
    return Window(
        well_id=well_id, start_index=start, values=values,
        depths=np.arange(L) * 0.5,
        labels=None if labels is None else np.asarray(labels, dtype=int),
        channel_names=tuple(f"c{j}" for j in range(values.shape[1])),
    )


def labeled_corpus(num_wells=6, T=60, num_classes=3, sep=1.5, std=0.5, seed=0):
    spec = make_synth_spec(num_classes, num_channels=2, emission_sep=sep,
                           emission_std=std, seed=seed)
    wells = synth_wells(spec, num_wells, T)
    wins = []
    for w in wells:
        wins.extend(window(w, 8, 8))
    return wins


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

def test_kfold_partition_properties():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n = int(rng.integers(4, 50))
        k = int(rng.integers(2, min(n, 8) + 1))
        folds = kfold_split(n, k, seed=int(rng.integers(1000)))
        allidx = np.concatenate(folds)
        assert sorted(allidx.tolist()) == list(range(n))  # disjoint cover
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1


def test_kfold_deterministic_and_seed_sensitive():
    a = kfold_split(20, 4, seed=7)
    b = kfold_split(20, 4, seed=7)
    c = kfold_split(20, 4, seed=8)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    assert any(not np.array_equal(x, y) for x, y in zip(a, c))


def test_kfold_validation():
    with pytest.raises(StackingError):
        kfold_split(5, 1, seed=0)
    with pytest.raises(StackingError, match="exceeds"):
        kfold_split(3, 4, seed=0)


# ---------------------------------------------------------------------------
# knn predictor
# ---------------------------------------------------------------------------

def test_knn_k1_reproduces_nearest_labels():
    train = [
        mkwin(np.zeros((3, 1)), well_id="a", labels=[0, 0, 0]),
        mkwin(np.full((3, 1), 5.0), well_id="b", labels=[1, 2, 1]),
    ]
    pred = KnnPredictor(num_classes=3, k=1).fit(train)
    probs = pred.predict_proba(mkwin(np.full((3, 1), 4.8), well_id="q"))
    np.testing.assert_array_equal(np.argmax(probs, axis=1), [1, 2, 1])
    np.testing.assert_array_equal(probs[0], [0, 1, 0])


def test_knn_vote_fractions():
    train = [
        mkwin(np.zeros((2, 1)), well_id="a", labels=[0, 0]),
        mkwin(np.full((2, 1), 0.1), well_id="b", labels=[0, 1]),
        mkwin(np.full((2, 1), 0.2), well_id="c", labels=[1, 1]),
        mkwin(np.full((2, 1), 9.0), well_id="d", labels=[2, 2]),
    ]
    pred = KnnPredictor(num_classes=3, k=3).fit(train)
    probs = pred.predict_proba(mkwin(np.zeros((2, 1)), well_id="q"))
    np.testing.assert_allclose(probs[0], [2 / 3, 1 / 3, 0])
    np.testing.assert_allclose(probs[1], [1 / 3, 2 / 3, 0])


def test_knn_matches_sklearn_per_position():
    rng = np.random.default_rng(6)
    L, d, C, n = 4, 2, 3, 30
    train = [
        mkwin(rng.standard_normal((L, d)), well_id=f"w{i}", start=i,
              labels=rng.integers(0, C, L))
        for i in range(n)
    ]
    pred = KnnPredictor(num_classes=C, k=5).fit(train)
    flat = np.stack([w.flat() for w in train])
    labels = np.stack([w.labels for w in train])
    for _ in range(10):
        q = mkwin(rng.standard_normal((L, d)), well_id="q")
        ours = pred.predict_proba(q)
        for t in range(L):
            clf = KNeighborsClassifier(n_neighbors=5, algorithm="brute")
            clf.fit(flat, labels[:, t])
            sk = clf.predict_proba(q.flat()[None, :])[0]
            full = np.zeros(C)
            for cls, p in zip(clf.classes_, sk):
                full[cls] = p
            np.testing.assert_allclose(ours[t], full, atol=1e-12)


def test_knn_in_fold_accuracy_is_perfect_with_k1():
    wins = labeled_corpus(seed=3)
    pred = KnnPredictor(num_classes=3, k=1).fit(wins)
    for w in wins:
        got = np.argmax(pred.predict_proba(w), axis=1)
        np.testing.assert_array_equal(got, w.labels)


def test_knn_validation():
    with pytest.raises(StackingError):
        KnnPredictor(num_classes=2, k=0)
    with pytest.raises(StackingError, match="not fitted"):
        KnnPredictor(num_classes=2).predict_proba(mkwin(np.zeros((2, 1))))
    with pytest.raises(StackingError, match="no labels"):
        KnnPredictor(num_classes=2, k=1).fit([mkwin(np.zeros((2, 1)))])


# ---------------------------------------------------------------------------
# logistic predictor
# ---------------------------------------------------------------------------

def test_logistic_learns_separable_data():
    wins = labeled_corpus(sep=3.0, std=0.3, seed=4)
    pred = LogisticPredictor(num_classes=3).fit(wins)
    correct = total = 0
    for w in wins:
        got = np.argmax(pred.predict_proba(w), axis=1)
        correct += int(np.sum(got == w.labels))
        total += w.labels.size
    assert correct / total > 0.9


def test_logistic_deterministic():
    wins = labeled_corpus(seed=5)
    a = LogisticPredictor(num_classes=3, epochs=50).fit(wins)
    b = LogisticPredictor(num_classes=3, epochs=50).fit(wins)
    np.testing.assert_array_equal(a.weights, b.weights)


def test_logistic_probs_are_distributions():
    wins = labeled_corpus(seed=6)
    pred = LogisticPredictor(num_classes=3, epochs=30).fit(wins)
    probs = pred.predict_proba(wins[0])
    assert probs.shape == (8, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(probs >= 0)


def test_make_predictor_dispatch():
    assert isinstance(make_predictor("knn", 3, k=2), KnnPredictor)
    assert isinstance(make_predictor("logistic", 3), LogisticPredictor)
    with pytest.raises(StackingError, match="unknown predictor"):
        make_predictor("mlp", 3)


# ---------------------------------------------------------------------------
# out-of-fold generation
# ---------------------------------------------------------------------------

def test_oof_provenance_is_clean_and_complete():
    wins = labeled_corpus(seed=7)
    result = generate_oof(wins, num_folds=5, seed=1,
                          factory=lambda: KnnPredictor(num_classes=3, k=3))
    assert len(result.records) == len(wins)
    assert verify_oof_provenance(result) == []
    keys = {(r.well_id, r.start_index) for r in result.records}
    assert keys == {window_key(w) for w in wins}


def test_oof_strictly_below_in_fold_for_k1():
    # heavy class overlap makes memorization beat generalization
    wins = labeled_corpus(num_wells=8, sep=0.6, std=0.8, seed=8)
    pred = KnnPredictor(num_classes=3, k=1).fit(wins)
    in_fold = np.mean([
        np.mean(np.argmax(pred.predict_proba(w), axis=1) == w.labels) for w in wins
    ])
    result = generate_oof(wins, num_folds=5, seed=2,
                          factory=lambda: KnnPredictor(num_classes=3, k=1))
    by_key = {(r.well_id, r.start_index): r for r in result.records}
    oof = np.mean([
        np.mean(np.argmax(by_key[window_key(w)].probs, axis=1) == w.labels)
        for w in wins
    ])
    assert in_fold == 1.0
    assert oof < in_fold


def test_verify_catches_leaked_record():
    wins = labeled_corpus(seed=9)
    result = generate_oof(wins, num_folds=4, seed=3,
                          factory=lambda: KnnPredictor(num_classes=3, k=2))
    # forge a record claiming to come from a model trained on its own window
    victim = result.records[0]
    leaky_fp = next(
        fp for fp, keys in result.training_keys.items()
        if (victim.well_id, victim.start_index) in keys
    )
    result.records[0] = OofRecord(
        well_id=victim.well_id, start_index=victim.start_index,
        fold=victim.fold, fingerprint=leaky_fp, probs=victim.probs,
    )
    violations = verify_oof_provenance(result)
    assert len(violations) == 1
    assert "trained on it" in violations[0]


# ---------------------------------------------------------------------------
# master model
# ---------------------------------------------------------------------------

def test_master_leans_on_informative_base():
    rng = np.random.default_rng(11)
    n, L, C = 40, 6, 3
    labels = rng.integers(0, C, size=(n, L))
    onehot = np.zeros((n, L, C))
    for i in range(n):
        onehot[i, np.arange(L), labels[i]] = 1.0
    # informative base: softened one-hot; distractor base: uniform
    good = 0.85 * onehot + 0.05
    noise = np.full((n, L, C), 1.0 / C)
    master = MasterModel(num_classes=C, num_bases=2).fit([good, noise], labels)
    correct = 0
    for i in range(n):
        pred = np.argmax(master.predict_proba([good[i], noise[i]]), axis=1)
        correct += int(np.sum(pred == labels[i]))
    assert correct / (n * L) > 0.95


def test_master_validates_base_count():
    with pytest.raises(StackingError, match="base"):
        MasterModel(num_classes=2, num_bases=2).fit(
            [np.zeros((1, 2, 2))], np.zeros((1, 2), dtype=int)
        )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["knn", "logistic"])
def test_predictor_roundtrip(tmp_path, kind):
    wins = labeled_corpus(seed=13)
    pred = make_predictor(kind, 3, **({"k": 3} if kind == "knn" else {"epochs": 40}))
    pred.fit(wins)
    p = tmp_path / f"{kind}.pred"
    save_predictor(pred, p)
    back = load_predictor(p)
    assert back.fingerprint() == pred.fingerprint()
    for w in wins[:5]:
        np.testing.assert_allclose(back.predict_proba(w), pred.predict_proba(w),
                                   atol=1e-15)


def test_master_roundtrip(tmp_path):
    rng = np.random.default_rng(14)
    labels = rng.integers(0, 2, size=(10, 4))
    base = rng.dirichlet(np.ones(2), size=(10, 4))
    master = MasterModel(num_classes=2, num_bases=1, epochs=50).fit([base], labels)
    p = tmp_path / "master.pred"
    save_predictor(master, p)
    back = load_predictor(p)
    np.testing.assert_allclose(
        back.predict_proba([base[0]]), master.predict_proba([base[0]]), atol=1e-15
    )


def test_stacked_roundtrip(tmp_path):
    wins = labeled_corpus(seed=16)
    oof = generate_oof(wins, num_folds=3, seed=5,
                       factory=lambda: KnnPredictor(num_classes=3, k=3))
    base_probs = np.stack([oof.probs_for(window_key(w)) for w in wins])
    labels = np.stack([w.labels for w in wins])
    master = MasterModel(num_classes=3, num_bases=1, epochs=60).fit(
        [base_probs], labels, keys=[window_key(w) for w in wins])
    full = KnnPredictor(num_classes=3, k=3).fit(wins)
    stacked = StackedPredictor([full], master)
    p = tmp_path / "stacked.pred"
    save_predictor(stacked, p)
    back = load_predictor(p)
    assert back.kind == "stacked"
    assert back.fingerprint() == stacked.fingerprint()
    for w in wins[:5]:
        np.testing.assert_allclose(back.predict_proba(w), stacked.predict_proba(w),
                                   atol=1e-15)


def test_save_unfitted_predictor_rejected(tmp_path):
    with pytest.raises(StackingError, match="unfitted"):
        save_predictor(KnnPredictor(num_classes=2), tmp_path / "x.pred")


def test_oof_csv_roundtrip(tmp_path):
    wins = labeled_corpus(seed=15)
    result = generate_oof(wins, num_folds=3, seed=4,
                          factory=lambda: KnnPredictor(num_classes=3, k=2))
    p = tmp_path / "oof.csv"
    save_oof_csv(result, p)
    back = load_oof_csv(p)
    assert len(back) == len(result.records)
    by_key = {(r.well_id, r.start_index): r for r in back}
    for r in result.records:
        b = by_key[(r.well_id, r.start_index)]
        assert b.fold == r.fold
        assert b.fingerprint == r.fingerprint
        np.testing.assert_allclose(b.probs, r.probs, atol=1e-8)
