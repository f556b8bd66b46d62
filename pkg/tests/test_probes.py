from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_boards, solutions
from sudoku_mechlab.errors import UsageError
from sudoku_mechlab.grid import UNITS, Board, Cell, compute_candidates, parse_grid, presence_map
from sudoku_mechlab.model import capture_at_clues_end
from sudoku_mechlab.probes import (
    COSINE_CATEGORIES,
    Family,
    Labels,
    ProbeBank,
    build_labels,
    candidate_directions,
    cosine_map,
    cross_layer_transfer,
    cross_position_transfer,
    evaluate_probes,
    fit_bank,
    fit_binary_probes,
    fit_probe,
    load_probe_banks,
    pair_category,
    probe_cosine_structure,
    probe_index,
    roc_auc,
    save_probe_banks,
    target_names,
)
from sudoku_mechlab.tracegen import replay_trace


def _clusters(n, d, margin_sigma, seed):
    rng = np.random.default_rng(seed)
    y = rng.random(n) < 0.5
    u = np.zeros(d)
    u[0] = 1.0
    X = rng.standard_normal((n, d))
    # truncate the informative axis at 2.4 sigma, then open a gap of margin_sigma
    X[:, 0] = np.clip(X[:, 0], -2.4, 2.4)
    off = 2.4 + margin_sigma / 2
    X += np.where(y, off, -off)[:, None] * u
    return X, y


def test_separable_binary():
    X, y = _clusters(400, 6, 5.0, 0)
    p = fit_probe(X, y, "binary")
    pr = p.predict_proba(X)
    assert roc_auc(pr, y) == 1.0
    assert ((pr > 0.5) == y).mean() == 1.0
    assert abs(np.linalg.norm(p.unit_direction) - 1.0) < 1e-9


def test_random_labels_chance():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((10_000, 5))
    y = rng.random(10_000) < 0.5
    p = fit_probe(X, y, "binary")
    assert abs(roc_auc(p.predict_proba(X), y) - 0.5) < 0.05


def test_nine_class_recoverable():
    rng = np.random.default_rng(2)
    emb = rng.standard_normal((9, 12)) * 3
    y = rng.integers(0, 9, 600)
    X = emb[y] + 0.05 * rng.standard_normal((600, 12))
    p = fit_probe(X, y, "9-class")
    assert p.weights.shape == (9, 12)
    assert (p.predict_proba(X).argmax(1) == y).mean() == 1.0


def test_degenerate_single_class():
    X = np.random.default_rng(3).standard_normal((50, 4))
    p = fit_probe(X, np.ones(50, bool), "binary")
    assert p.degenerate and np.all(p.weights == 0)
    assert np.all(p.predict_proba(X) > 0.5)
    with pytest.raises(UsageError):
        fit_probe(X, np.ones(50, bool), "ternary")


def test_gradient_tolerance_reached():
    X, y = _clusters(300, 4, 1.0, 4)
    W, b, _ = fit_binary_probes(X, y[:, None], l2=1e-3)
    from scipy.special import expit

    s = expit(X @ W[0] + b[0])
    g = np.concatenate([X.T @ (s - y) / len(y) + 1e-3 * W[0], [np.mean(s - y)]])
    assert np.linalg.norm(g) < 1e-6


def test_permutation_invariance():
    X, y = _clusters(300, 5, 1.5, 5)
    perm = np.random.default_rng(6).permutation(300)
    a = fit_probe(X, y, "binary")
    b = fit_probe(X[perm], y[perm], "binary")
    assert np.allclose(a.weights, b.weights, atol=1e-8) and np.allclose(a.bias, b.bias, atol=1e-8)
    rng = np.random.default_rng(7)
    yc = rng.integers(0, 9, 300)
    Xc = rng.standard_normal((300, 5)) + np.eye(9, 5)[yc] * 2
    a = fit_probe(Xc, yc, "9-class")
    b = fit_probe(Xc[perm], yc[perm], "9-class")
    # L-BFGS stops on a gradient tolerance, so the match is to that tolerance
    assert np.allclose(a.weights, b.weights, atol=1e-4)


def test_roc_auc_examples():
    assert roc_auc(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1])) == 1.0
    assert roc_auc(np.array([0.9, 0.8, 0.2, 0.1]), np.array([0, 0, 1, 1])) == 0.0
    assert roc_auc(np.ones(4), np.array([0, 1, 0, 1])) == 0.5
    assert np.isnan(roc_auc(np.ones(3), np.ones(3)))


# --- labels -------------------------------------------------------------------------

def test_labels_empty_and_solved():
    lab = build_labels(Family.SUBSTRUCTURE, [Board()])
    assert lab.y.shape == (1, 243) and not lab.y.any()
    solved = parse_grid(solutions()[0])
    assert build_labels("substructure", [solved]).y.all()
    cand = build_labels("cell_candidate", [solved])
    assert not cand.mask.any()
    state = build_labels("cell_state", [solved])
    assert state.mask.all() and (state.y[0] == np.array(solved.values) - 1).all()
    assert not build_labels("cell_state", [Board()]).mask.any()


def check_labels_against_oracles(boards) -> None:
    st_ = build_labels(Family.CELL_STATE, boards)
    ca = build_labels(Family.CELL_CANDIDATE, boards)
    su = build_labels(Family.SUBSTRUCTURE, boards)
    for k, b in enumerate(boards):
        cg = compute_candidates(b)
        pm = presence_map(b)
        for i in range(81):
            cell = Cell.from_index(i)
            v = b.values[i]
            assert st_.mask[k, i] == bool(v)
            if v:
                assert st_.y[k, i] == v - 1
            for d in range(1, 10):
                j = probe_index(Family.CELL_CANDIDATE, (cell, d))
                assert ca.mask[k, j] == (cg[cell] is not None)
                if cg[cell] is not None:
                    assert ca.y[k, j] == (d in cg[cell])
        for u in UNITS:
            for d in range(1, 10):
                assert su.y[k, probe_index(Family.SUBSTRUCTURE, (u, d))] == pm[u, d]


def test_labels_match_oracles():
    check_labels_against_oracles(random_boards(25, seed=11))


def test_target_names():
    assert len(target_names(Family.CELL_STATE)) == 81
    assert target_names(Family.CELL_CANDIDATE)[10] == "R1C2=2"
    assert target_names(Family.SUBSTRUCTURE)[0] == "row1=1"
    assert len(target_names(Family.SUBSTRUCTURE)) == 243
    assert Family.parse("cell-candidate") is Family.CELL_CANDIDATE and Family.parse("sub") is Family.SUBSTRUCTURE


# --- synthetic world-model activations ----------------------------------------------

def onehot_boards(boards, scale=4.0, noise=0.01, seed=0):
    """One-hot digit-per-cell encoding (729 dims). Cell state is read off directly;
    presence and candidacy are thresholds of sums of these features, so all three
    families are linearly separable."""
    rng = np.random.default_rng(seed)
    oh = np.zeros((len(boards), 81, 9))
    for k, b in enumerate(boards):
        for i, v in enumerate(b.values):
            if v:
                oh[k, i, v - 1] = 1.0
    return scale * oh.reshape(len(boards), 729) + noise * rng.standard_normal((len(boards), 729))


def presence_features(boards, scale=4.0, noise=0.01, seed=0):
    """243-dim presence encoding: presence is the identity, candidacy a threshold of
    three presence bits."""
    rng = np.random.default_rng(seed)
    P = build_labels(Family.SUBSTRUCTURE, boards).y.astype(float)
    return scale * P + noise * rng.standard_normal(P.shape)


def test_synthetic_substructure_pipeline():
    boards = random_boards(60, seed=12)
    X = presence_features(boards)
    lab = build_labels("substructure", boards)
    rep = evaluate_probes(fit_bank("substructure", X, lab, layer=3), X, lab)
    s = rep.summary
    assert s["accuracy"] == 1.0 and s["exact_match"] == 1.0 and s["exact_match_all27"] == 1.0
    assert s["auc"] == 1.0 and s["mse"] < 1e-3
    rows = rep.rows(target_names(Family.SUBSTRUCTURE))
    assert rows[0][:4] == ("substructure", "ALL", 3, "3")
    assert all(len(r) == 6 for r in rows)


def test_perfect_probes_all_ones():
    # hand-built probes on presence features: w = 20 e_j, b = -10
    boards = random_boards(30, seed=13)
    X = build_labels("substructure", boards).y.astype(float)
    bank = ProbeBank(Family.SUBSTRUCTURE, 1, 20 * np.eye(243)[:, None, :], np.full((243, 1), -10.0), np.zeros(243, bool))
    rep = evaluate_probes(bank, X, build_labels("substructure", boards))
    assert rep.summary["accuracy"] == 1.0 and rep.summary["auc"] == 1.0 and rep.summary["mse"] < 1e-6


def test_constant_probe():
    boards = random_boards(40, seed=14)
    lab = build_labels("substructure", boards)
    X = np.zeros((40, 3))
    bank = ProbeBank(Family.SUBSTRUCTURE, 1, np.zeros((243, 1, 3)), np.full((243, 1), 2.0), np.zeros(243, bool))
    rep = evaluate_probes(bank, X, lab)
    assert rep.summary["auc"] == 0.5
    assert rep.summary["accuracy"] == pytest.approx(lab.y.mean())


def test_evaluate_shape_mismatch():
    boards = random_boards(5, seed=15)
    lab = build_labels("substructure", boards)
    bank = ProbeBank(Family.SUBSTRUCTURE, 1, np.zeros((243, 1, 3)), np.zeros((243, 1)), np.zeros(243, bool))
    with pytest.raises(UsageError):
        evaluate_probes(bank, np.zeros((4, 3)), lab)
    with pytest.raises(UsageError):
        evaluate_probes(bank, np.zeros((5, 3)), build_labels("cell_candidate", boards))


def _grouped_oracle(bank, X, lab):
    probs = bank.predict_proba(X)
    n = X.shape[0]
    hits = total = 0
    for k in range(n):
        for g in range(len(bank) // 9):
            cols = range(g * 9, g * 9 + 9)
            if not any(lab.mask[k, j] for j in cols):
                continue
            ok = all((probs[k, j] > 0.5) == bool(lab.y[k, j]) for j in cols if lab.mask[k, j])
            hits += ok
            total += 1
    return hits / total


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_grouped_exact_match_oracle(seed, shift):
    boards = random_boards(8, seed=seed)
    rng = np.random.default_rng(seed)
    for fam in ("cell_candidate", "substructure"):
        lab = build_labels(fam, boards)
        d = 4
        P = len(target_names(Family.parse(fam)))
        bank = ProbeBank(Family.parse(fam), 1, rng.standard_normal((P, 1, d)), rng.standard_normal((P, 1)) + shift,
                         np.zeros(P, bool))
        X = rng.standard_normal((8, d))
        rep = evaluate_probes(bank, X, lab, per_probe=False)
        assert rep.summary["exact_match"] == pytest.approx(_grouped_oracle(bank, X, lab))
        acc = rep.summary["accuracy"]
        assert 0.0 <= rep.summary["exact_match"] <= 1.0 and 0.0 <= acc <= 1.0


def test_exact_match_bounded_by_member_accuracy():
    boards = random_boards(30, seed=16)
    lab = build_labels("substructure", boards)
    X = presence_features(boards, noise=1.0)
    bank = fit_bank("substructure", X[:15], Labels(lab.family, lab.y[:15], lab.mask[:15]))
    rep = evaluate_probes(bank, X, lab)
    assert rep.summary["exact_match_all27"] <= rep.summary["exact_match"]
    # per group: exact match of a group never exceeds the worst member accuracy
    probs = bank.predict_proba(X)
    correct = (probs > 0.5) == lab.y
    for g in range(27):
        em = correct[:, g * 9:(g + 1) * 9].all(1).mean()
        assert em <= correct[:, g * 9:(g + 1) * 9].mean(0).min() + 1e-12


def test_bias_shift_calibration_split():
    boards = random_boards(40, seed=17)
    lab = build_labels("substructure", boards)
    X = presence_features(boards)
    bank = fit_bank("substructure", X, lab)
    base = evaluate_probes(bank, X, lab, per_probe=True)
    moved = evaluate_probes(bank.shifted(25.0), X, lab, per_probe=True)
    np.testing.assert_array_equal(base.per_probe["auc"], moved.per_probe["auc"])
    assert base.summary["exact_match"] == 1.0 and moved.summary["exact_match"] < 0.5


# --- geometry -----------------------------------------------------------------------

@pytest.mark.parametrize(
    "a,b,cat",
    [((1, 1), (1, 2), "r∩box"), ((1, 1), (1, 5), "r¬box"), ((1, 1), (2, 1), "c∩box"), ((1, 1), (7, 1), "c¬box"),
     ((1, 1), (2, 2), "box"), ((1, 1), (5, 2), "stack"), ((1, 1), (2, 5), "band"), ((1, 1), (5, 5), "none")],
)
def test_pair_category(a, b, cat):
    assert pair_category(Cell(*a), Cell(*b)) == cat
    assert pair_category(Cell(*b), Cell(*a)) == cat


def test_category_counts():
    counts = {k: 0 for k in COSINE_CATEGORIES}
    for i in range(81):
        for j in range(i + 1, 81):
            counts[pair_category(Cell.from_index(i), Cell.from_index(j))] += 1
    # per cell: 2 row-in-box, 6 row-out, 2 col-in-box, 6 col-out, 4 box-only, 12 stack, 12 band, 36 none
    assert counts == {"r∩box": 81, "c∩box": 81, "r¬box": 243, "c¬box": 243, "box": 162, "stack": 486, "band": 486,
                      "none": 1458}


def test_cosine_identical_and_orthogonal():
    v = np.array([1.0, 2.0, 3.0])
    same = probe_cosine_structure({Cell(1, 1): v, Cell(1, 2): 2 * v})
    assert same["r∩box"]["mean"] == pytest.approx(1.0)
    orth = probe_cosine_structure({Cell(1, 1): np.eye(3)[0], Cell(5, 5): np.eye(3)[1]})
    assert orth["none"]["mean"] == 0.0 and orth["none"]["n"] == 1
    with pytest.raises(UsageError):
        probe_cosine_structure({Cell(1, 1): v})


def test_candidate_directions_and_map():
    W = np.random.default_rng(0).standard_normal((729, 1, 5))
    bank = ProbeBank(Family.CELL_CANDIDATE, 2, W, np.zeros((729, 1)), np.zeros(729, bool))
    dirs = candidate_directions(bank, 3)
    assert len(dirs) == 81
    cm = cosine_map(bank, Cell(2, 3), 3)
    assert cm.shape == (9, 9) and cm[1, 2] == pytest.approx(1.0)
    with pytest.raises(UsageError):
        candidate_directions(ProbeBank(Family.SUBSTRUCTURE, 2, W[:243], np.zeros((243, 1)), np.zeros(243, bool)), 1)


# --- transfer -----------------------------------------------------------------------

def test_cross_layer_transfer():
    boards = random_boards(30, seed=18)
    lab = build_labels("substructure", boards)
    X = presence_features(boards)
    noisy = presence_features(boards, noise=2.0, seed=1)
    banks = {1: fit_bank("substructure", X, lab, 1), 2: fit_bank("substructure", noisy, lab, 2)}
    src, dst, M = cross_layer_transfer(banks, {1: X, 2: noisy}, lab)
    assert src == [1, 2] and dst == [1, 2]
    for i, l in enumerate(src):
        assert M[i, i] == evaluate_probes(banks[l], {1: X, 2: noisy}[l], lab).summary["exact_match"]
    _, _, const = cross_layer_transfer({1: banks[1]}, {1: X, 2: X, 3: X}, lab)
    assert np.all(const == const[0, 0])


def test_cross_position_transfer(small_model, sequences):
    seqs = sequences[:1]
    acts = capture_at_clues_end(small_model, seqs, ["resid_post.1", "resid_post.2"])
    res = replay_trace(seqs[0])
    board0 = res.states[res.clues_end]
    lab = build_labels("substructure", [board0])
    lab2 = build_labels("substructure", [board0, parse_grid(solutions()[0])])
    banks = {l: fit_bank("substructure", np.repeat(acts.get("resid_post", l), 2, axis=0) + np.arange(2)[:, None], lab2, l)
             for l in (1, 2)}
    curves = cross_position_transfer(banks, small_model, seqs)
    assert curves.layers == [1, 2]
    first = int(np.flatnonzero(curves.n_empty == board0.n_empty())[0])
    for a, l in enumerate((1, 2)):
        static = evaluate_probes(banks[l], acts.get("resid_post", l), lab).summary
        for k in ("exact_match", "mse", "accuracy"):
            assert curves.metrics[k][a, first] == pytest.approx(static[k], abs=1e-6)
    assert curves.n_empty[0] == 0 and curves.counts.sum() == len(seqs[0]) - res.clues_end
    # at the solved end every presence label is 1
    final = build_labels("substructure", [res.states[-1]])
    assert final.y.all()


def test_probe_bank_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    a = ProbeBank(Family.SUBSTRUCTURE, 2, rng.standard_normal((243, 1, 4)), rng.standard_normal((243, 1)),
                  rng.random(243) < 0.1)
    b = ProbeBank(Family.CELL_STATE, 3, rng.standard_normal((81, 9, 4)), rng.standard_normal((81, 9)), np.zeros(81, bool))
    save_probe_banks(tmp_path / "p.probes", [a, b])
    got = load_probe_banks(tmp_path / "p.probes")
    for x, y in zip([a, b], got):
        assert x.family == y.family and x.layer == y.layer
        np.testing.assert_array_equal(x.W, y.W)
        np.testing.assert_array_equal(x.b, y.b)
        np.testing.assert_array_equal(x.degenerate, y.degenerate)
    norms = np.linalg.norm(got[1].unit_directions(), axis=2)
    assert np.allclose(norms, 1.0, atol=1e-9)
