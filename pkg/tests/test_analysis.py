"""Conflict scanning and transition model tests."""

import itertools

import numpy as np
import pytest

from lithoflow.analysis import (
    AnalysisError,
    TransitionModel,
    fit_transition,
    load_transition,
    save_transition,
    scan_conflict,
    scan_position,
    validate_sequence,
)


# ---------------------------------------------------------------------------
# conflict scanning
# ---------------------------------------------------------------------------

def test_scan_position_hand_cases():
    full = scan_position({"nbr": 2, "nn": 2, "llm": 2})
    assert (full.agreement_count, full.agreement_level) == (3, 3)
    assert full.majority_label == 2
    assert full.conflict is False

    pair = scan_position({"nbr": 1, "nn": 1, "llm": 0})
    assert (pair.agreement_count, pair.agreement_level) == (1, 2)
    assert pair.majority_label == 1
    assert pair.conflict is True

    split = scan_position({"nbr": 0, "nn": 1, "llm": 2})
    assert (split.agreement_count, split.agreement_level) == (0, 1)
    assert split.majority_label is None
    assert split.conflict is True


def test_three_source_structure_exhaustive():
    # every label triple over up to 6 classes: pair count in {0,1,3}, never
    # 2, and the count determines the bloc size bijectively
    mapping = {3: 3, 1: 2, 0: 1}
    for C in range(1, 7):
        for a, b, c in itertools.product(range(C), repeat=3):
            p = scan_position({"nbr": a, "nn": b, "llm": c})
            assert p.agreement_count in (0, 1, 3)
            assert p.agreement_count != 2
            assert p.agreement_level == mapping[p.agreement_count]
            # independent oracle for the bloc size
            assert p.agreement_level == max(
                sum(1 for x in (a, b, c) if x == v) for v in (a, b, c)
            )


def test_two_source_scan():
    agree = scan_position({"nbr": 3, "llm": 3})
    assert (agree.agreement_count, agree.agreement_level) == (1, 2)
    assert agree.conflict is False
    differ = scan_position({"nbr": 3, "llm": 1})
    assert (differ.agreement_count, differ.agreement_level) == (0, 1)
    assert differ.conflict is True
    assert differ.majority_label is None


def test_single_source_never_conflicts():
    p = scan_position({"llm": 4})
    assert p.conflict is False
    assert p.agreement_level == 1
    assert p.agreement_count == 0


def test_scan_conflict_vectors():
    scan = scan_conflict({
        "nbr": np.array([0, 0, 1]),
        "nn": np.array([0, 1, 1]),
        "llm": np.array([0, 2, 2]),
    })
    np.testing.assert_array_equal(scan.agreement_counts, [3, 0, 1])
    np.testing.assert_array_equal(scan.agreement_levels, [3, 1, 2])
    np.testing.assert_array_equal(scan.conflict_mask, [False, True, True])
    assert scan.positions[2].majority_label == 1


def test_scan_conflict_rejects_ragged_sources():
    with pytest.raises(AnalysisError, match="length"):
        scan_conflict({"a": np.array([1, 2]), "b": np.array([1])})
    with pytest.raises(AnalysisError, match="source"):
        scan_conflict({})


# ---------------------------------------------------------------------------
# transition model
# ---------------------------------------------------------------------------

def test_fit_transition_hand_counts():
    model = fit_transition([np.array([0, 1]), np.array([1, 0])], num_classes=2)
    np.testing.assert_array_equal(model.counts, [[0, 1], [1, 0]])
    # add-one smoothing over 2 classes
    np.testing.assert_allclose(model.probs, [[1 / 3, 2 / 3], [2 / 3, 1 / 3]])


def test_fit_transition_never_chains_across_sequences():
    # sequence boundary 1 -> 0 must not be counted
    model = fit_transition([np.array([0, 1]), np.array([0, 1])], num_classes=2)
    assert model.counts[1, 0] == 0
    assert model.counts[0, 1] == 2


def test_fit_transition_matches_bruteforce_smoothing():
    rng = np.random.default_rng(12)
    for _ in range(20):
        C = int(rng.integers(2, 6))
        lam = float(rng.uniform(0.1, 3.0))
        seqs = [rng.integers(0, C, size=int(rng.integers(2, 40))) for _ in range(3)]
        model = fit_transition(seqs, C, smoothing=lam)
        counts = np.zeros((C, C))
        for s in seqs:
            for a, b in zip(s[:-1], s[1:]):
                counts[a, b] += 1
        want = (counts + lam) / (counts.sum(axis=1, keepdims=True) + lam * C)
        np.testing.assert_allclose(model.probs, want, atol=1e-12)
        np.testing.assert_allclose(model.probs.sum(axis=1), 1.0, atol=1e-12)


def test_unseen_predecessor_row_is_exactly_uniform():
    model = fit_transition([np.array([0, 1, 0, 1])], num_classes=3)
    np.testing.assert_array_equal(model.probs[2], [1 / 3, 1 / 3, 1 / 3])


def test_markov_chain_recovery():
    # sample a known chain and check the fitted table converges to it
    rng = np.random.default_rng(3)
    true = np.array([
        [0.80, 0.10, 0.05, 0.05],
        [0.15, 0.70, 0.10, 0.05],
        [0.05, 0.10, 0.80, 0.05],
        [0.10, 0.10, 0.10, 0.70],
    ])
    n = 12000
    seq = np.empty(n, dtype=int)
    seq[0] = 0
    for t in range(1, n):
        seq[t] = rng.choice(4, p=true[seq[t - 1]])
    model = fit_transition([seq], 4, smoothing=1.0)
    l1 = np.abs(model.probs - true).sum(axis=1)
    assert l1.max() < 0.05


def test_fit_transition_rejects_bad_labels():
    with pytest.raises(AnalysisError, match="outside"):
        fit_transition([np.array([0, 5])], num_classes=3)
    with pytest.raises(AnalysisError, match="smoothing"):
        TransitionModel(num_classes=2, smoothing=0.0, counts=np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def make_sticky_model():
    counts = np.array([[80.0, 2.0], [2.0, 80.0]])
    return TransitionModel(num_classes=2, smoothing=1.0, counts=counts)


def test_validate_flags_rare_transitions():
    model = make_sticky_model()
    # off-diagonal probability is (2+1)/(82+2) = 3/84, below a 0.1 threshold
    report = validate_sequence(np.array([0, 0, 1, 1, 0]), model, threshold=0.1)
    assert not report.ok
    np.testing.assert_array_equal(report.flagged_positions(), [2, 4])
    flag = report.flags[0]
    assert (flag.prev_label, flag.label) == (0, 1)
    assert flag.prob == pytest.approx(3 / 84)


def test_validate_clean_sequence_ok():
    report = validate_sequence(np.array([0, 0, 0]), make_sticky_model(), threshold=0.1)
    assert report.ok
    assert report.flags == ()


def test_validate_single_sample_trivially_ok():
    assert validate_sequence(np.array([1]), make_sticky_model()).ok


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def test_transition_roundtrip(tmp_path):
    model = fit_transition(
        [np.array([0, 1, 2, 1, 0]), np.array([2, 2, 2])], num_classes=3, smoothing=0.5
    )
    p = tmp_path / "trans.txt"
    save_transition(model, p)
    back = load_transition(p)
    assert back.num_classes == 3
    assert back.smoothing == 0.5
    np.testing.assert_array_equal(back.counts, model.counts)
    np.testing.assert_allclose(back.probs, model.probs)


def test_load_transition_rejects_garbage(tmp_path):
    p = tmp_path / "junk.txt"
    p.write_text("not a model\n")
    with pytest.raises(AnalysisError):
        load_transition(p)
