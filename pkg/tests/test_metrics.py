import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from numgame import metrics
from numgame.errors import EmptySelection, EmptyTable, MissingClass, MissingTranscript, TooFewSketches, WrongChannel
from numgame.metrics import CodeTable
from numgame.transcript import Transcript


def brute_force_cond_entropy(counts):
    """H(N, M) - H(M), summed cell by cell with natural logs."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    h_joint = 0.0
    for v in counts.ravel():
        if v > 0:
            h_joint -= v / total * math.log(v / total)
    h_m = 0.0
    for v in counts.sum(axis=0):
        if v > 0:
            h_m -= v / total * math.log(v / total)
    return (h_joint - h_m) / math.log(2)


def rec(n, key, correct=True, eff_len=1, pred=None):
    return {"epoch": 0, "phase": "eval", "sender_n": n, "sender_i": 0, "key": key,
            "correct": correct, "predicted_n": n if pred is None else pred, "eff_len": eff_len}


def test_accuracy_cases():
    t = Transcript("discrete", [rec(1, "a")] * 4)
    assert metrics.accuracy(t) == 1.0
    t = Transcript("discrete", [rec(1, "a"), rec(2, "b"), rec(3, "c"), rec(4, "d", correct=False)])
    assert metrics.accuracy(t) == 0.75
    assert metrics.accuracy(t, classes=[4]) == 0.0
    with pytest.raises(EmptySelection):
        metrics.accuracy(t, classes=[9])


def test_accuracy_of_concatenation_is_weighted_mean():
    a = Transcript("discrete", [rec(1, "a"), rec(1, "a", correct=False)])
    b = Transcript("discrete", [rec(2, "b")] * 3)
    both = Transcript("discrete", a.records + b.records)
    assert metrics.accuracy(both) == pytest.approx((2 * 0.5 + 3 * 1.0) / 5)


def test_conditional_entropy_cases():
    bijection = CodeTable.from_pairs([(c, f"m{c}") for c in range(1, 6)] * 3)
    assert metrics.conditional_entropy(bijection) == 0.0
    single = CodeTable.from_pairs([(c, "x") for c in range(1, 6)])
    assert metrics.conditional_entropy(single) == pytest.approx(math.log2(5), abs=1e-12)
    assert math.log2(5) == pytest.approx(2.3219, abs=1e-4)
    mixed = CodeTable.from_pairs([(1, "a"), (1, "a"), (2, "a"), (2, "b")])
    h = 0.75 * -(2 / 3 * math.log2(2 / 3) + 1 / 3 * math.log2(1 / 3))
    assert metrics.conditional_entropy(mixed) == pytest.approx(h, abs=1e-12)
    assert h == pytest.approx(0.6887, abs=1e-4)
    with pytest.raises(EmptyTable):
        metrics.conditional_entropy(CodeTable([1], ["a"], np.zeros((1, 1), dtype=int)))


tables = st.integers(1, 4).flatmap(
    lambda r: st.integers(1, max(1, 20 // r)).flatmap(
        lambda c: st.lists(st.integers(0, 9), min_size=r * c, max_size=r * c).map(
            lambda v: np.array(v).reshape(r, c)
        )
    )
).filter(lambda a: a.sum() > 0)


def _table(counts):
    return CodeTable(list(range(counts.shape[0])), [f"k{j}" for j in range(counts.shape[1])], counts)


@settings(max_examples=200, deadline=None)
@given(tables)
def test_entropy_matches_brute_force_and_bounds(counts):
    t = _table(counts)
    h = metrics.conditional_entropy(t)
    assert h == pytest.approx(brute_force_cond_entropy(counts), abs=1e-12)
    assert -1e-12 <= h <= metrics.class_entropy(t) + 1e-12


@settings(max_examples=100, deadline=None)
@given(tables)
def test_merging_columns_never_decreases_entropy(counts):
    if counts.shape[1] < 2:
        return
    t = _table(counts)
    merged = t.merge_columns("k0", "k1")
    assert metrics.conditional_entropy(merged) >= metrics.conditional_entropy(t) - 1e-12


def test_single_message_gives_class_entropy():
    t = CodeTable.from_pairs([(1, "a"), (2, "a"), (2, "a"), (3, "a")])
    assert metrics.conditional_entropy(t) == pytest.approx(metrics.class_entropy(t))


def test_message_key():
    assert metrics.message_key([2, 1, 0, 1, 2]) == "2,1"
    assert metrics.message_key([2, 1, 0, 1, 2]) == metrics.message_key([2, 1, 0, 2, 2])
    assert metrics.message_key([2, 1, 0, 1, 2], use_terminator=False) == "2,1,0,1,2"
    assert metrics.message_key([0, 1, 1]) == metrics.EMPTY_KEY
    assert metrics.message_key([1, 2]) != metrics.message_key([1, 2, 2])


def test_mapping_matrix():
    pairs = [(2, "b"), (1, "a"), (1, "a"), (2, "b"), (3, "a")]
    m, rows, cols = metrics.mapping_matrix(CodeTable.from_pairs(pairs))
    assert rows == [1, 2, 3]
    assert cols == ["b", "a"]  # first occurrence order
    np.testing.assert_array_equal(m, [[0, 2], [2, 0], [0, 1]])
    assert m.sum() == len(pairs)


def _stroke_canvas(x0, y0, x1, y1, side=32):
    import torch
    from numgame.agents import rasterize
    with torch.no_grad():
        return rasterize(torch.tensor([[x0, y0, x1, y1]], dtype=torch.float64), side).numpy()


def test_cluster_sketches_separates_distinct_shapes(rng):
    shapes = [(0.1, 0.5, 0.9, 0.5), (0.5, 0.1, 0.5, 0.9), (0.1, 0.1, 0.9, 0.9)]
    sk, labels = [], []
    for c, s in enumerate(shapes):
        for _ in range(8):
            jitter = rng.normal(scale=0.01, size=4)
            sk.append(_stroke_canvas(*(np.array(s) + jitter)))
            labels.append(c)
    model = metrics.cluster_sketches(np.array(sk), 3, np.random.default_rng(0))
    assert metrics.cluster_purity(model.labels, labels) == 1.0
    one = metrics.cluster_sketches(np.array(sk), 1, np.random.default_rng(0))
    assert set(one.labels.tolist()) == {0}


def test_cluster_sketches_deterministic_and_duplicates(rng):
    base = [_stroke_canvas(*rng.uniform(0, 1, 4)) for _ in range(6)]
    sk = np.array(base + base)
    a = metrics.cluster_sketches(sk, 3, np.random.default_rng(5))
    b = metrics.cluster_sketches(sk, 3, np.random.default_rng(5))
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.labels[:6], a.labels[6:])
    with pytest.raises(TooFewSketches):
        metrics.cluster_sketches(sk[:2], 3, rng)


def test_select_k_prefers_true_cluster_count(rng):
    pts = np.concatenate([rng.normal(loc=c * 10, scale=0.1, size=(10, 2)) for c in range(3)])
    m = metrics.kmeans(pts, 3, rng)
    assert metrics.cluster_purity(m.labels, np.repeat([0, 1, 2], 10)) == 1.0
    assert metrics.silhouette(pts, m.labels) > 0.9


def test_pairwise_dissimilarity():
    same = _stroke_canvas(0.2, 0.2, 0.8, 0.8)
    m, cls = metrics.pairwise_dissimilarity({1: np.array([same, same]), 2: np.array([same])})
    np.testing.assert_allclose(m, 0.0, atol=1e-12)
    other = _stroke_canvas(0.2, 0.8, 0.8, 0.2)
    m, cls = metrics.pairwise_dissimilarity({1: np.array([same, same]), 2: np.array([other, other]), 3: np.array([same, other])})
    assert cls == [1, 2, 3]
    np.testing.assert_allclose(m, m.T)
    assert (m >= 0).all()
    assert m[0, 1] > m[0, 0]
    with pytest.raises(MissingClass):
        metrics.pairwise_dissimilarity({1: np.zeros((0, 32, 32))})


class _FakeDataset:
    def __init__(self, images):
        self.images = images


def _span_fixture(stroke_fn):
    from numgame.stimuli import DotImage
    imgs, recs = [], []
    for i, half in enumerate([4.0, 8.0, 12.0, 16.0, 20.0]):
        dots = np.array([[32 - half, 32.0, 2.0], [32 + half, 32.0, 2.0]])
        imgs.append(DotImage(np.ones((64, 64)), dots, 2, 0.06, instance=i))
        recs.append({"sender_n": 2, "sender_i": i, "strokes": stroke_fn(half), "correct": True,
                     "eff_len": 0.0, "predicted_n": 2})
    return Transcript("sketch", recs, side=64), _FakeDataset({2: imgs})


def test_span_correlation_cases():
    t, ds = _span_fixture(lambda h: [[0.4, 0.5, 0.6, 0.5]])
    r, flag = metrics.span_correlation(t, ds)
    assert (r, flag) == (0.0, True)
    t, ds = _span_fixture(lambda h: [[0.5 - h / 100, 0.5, 0.5 + h / 100, 0.5]])
    r, flag = metrics.span_correlation(t, ds)
    assert r == pytest.approx(1.0, abs=1e-3) and not flag
    with pytest.raises(WrongChannel):
        metrics.span_correlation(Transcript("discrete", t.records), ds)


def test_generalisation_report_flags_ceiling_reuse():
    recs = [rec(c, f"m{c}") for c in range(1, 6) for _ in range(4)]
    recs += [rec(7, "m5", correct=False, pred=5)] * 6 + [rec(7, "m1", correct=True)] * 2
    rep = metrics.generalisation_report([1, 2, 3, 4, 5], {7: Transcript("discrete", recs)})
    cell = rep[7]
    assert cell.ceiling_key == "m5"
    assert cell.reuse_fraction == pytest.approx(0.75)
    assert cell.ceiling_reuse
    assert cell.in_dist_accuracy == 1.0
    assert cell.novel_accuracy == pytest.approx(0.25)
    assert cell.novel_mapping["m5"] == pytest.approx(0.75)
    with pytest.raises(MissingTranscript):
        metrics.generalisation_report([1, 2, 3, 4, 5], {8: Transcript("discrete", recs)})
