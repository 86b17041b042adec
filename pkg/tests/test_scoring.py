import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from serialgan.model import GeneratorOutput
from serialgan.scoring import (Calibration, ScoreVariant, ScoringError, all_raw_errors, build_records, classify,
                               image_error, latent_error, normalize_scores, raw_errors, read_scores, select_threshold,
                               write_scores, youden_j, youden_sweep)


class IdentityStub:
    """G1 = G2 = identity, latents a fixed projection of the image."""

    def generator_forward(self, x):
        z = x.reshape(len(x), -1)[:, :4]
        return GeneratorOutput(x, x, z, z, z)


class ShiftStub:
    """G1 identity, G2 adds a per-sample offset; errors known in closed form."""

    def __init__(self, offsets):
        self.offsets = np.asarray(offsets, dtype=np.float64)

    def generator_forward(self, x):
        i = np.arange(len(x)) + self.start
        x2 = x + self.offsets[i][:, None, None, None]
        z = np.zeros((len(x), 2))
        return GeneratorOutput(x, x2, z, z, z + self.offsets[i][:, None])

    start = 0


def test_image_error_examples(rng):
    a = rng.normal(size=(4, 4, 3))
    assert image_error(a, a) == 0.0
    assert image_error(np.ones((1, 1, 1)), np.zeros((1, 1, 1))) == 1.0
    b = rng.normal(size=(4, 4, 3))
    total = 0.0
    for v in (a - b).ravel():
        total += v * v
    assert image_error(a, b) == pytest.approx(total / a.size, abs=1e-7)


def test_latent_error_examples(rng):
    assert latent_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert latent_error([1.0, 0.0], [0.0, 0.0]) == 0.5
    a, b = rng.normal(size=(2, 100))
    assert latent_error(a, b) == pytest.approx(sum((a - b) ** 2) / 100, abs=1e-7)
    with pytest.raises(ScoringError):
        latent_error([1.0], [1.0, 2.0])


def test_identity_stub_scores_zero(rng):
    x = rng.normal(size=(5, 4, 4, 3))
    errs = all_raw_errors(IdentityStub(), x)
    assert set(errs) == set(ScoreVariant)
    for v in ScoreVariant:
        assert errs[v].shape == (5,)
        assert np.all(errs[v] == 0)


def test_raw_errors_order_and_batching(rng):
    offsets = rng.uniform(0, 1, 7)
    x = rng.normal(size=(7, 4, 4, 3))
    stub = ShiftStub(offsets)
    # batch of 7 in one go versus batches of 3 must agree and keep order
    e_all = raw_errors(stub, x, "g1g2", batch_size=7)
    assert np.allclose(e_all, offsets ** 2)
    assert np.allclose(raw_errors(stub, x, ScoreVariant.XG2, batch_size=7), offsets ** 2)
    assert np.all(raw_errors(stub, x, ScoreVariant.XG1, batch_size=7) == 0)
    assert np.allclose(raw_errors(stub, x, ScoreVariant.ZZ2, batch_size=7), offsets ** 2)


def test_untrained_model_rejected(tiny_state):
    x = np.zeros((1, 8, 8, 3), dtype=np.float32)
    with pytest.raises(ScoringError, match="untrained"):
        raw_errors(tiny_state, x)
    assert raw_errors(tiny_state, x, allow_untrained=True).shape == (1,)
    tiny_state.params["E1.conv0.w"][0, 0, 0, 0] = np.nan
    with pytest.raises(ScoringError, match="non-finite"):
        raw_errors(tiny_state, x, allow_untrained=True)


def test_variant_parse():
    assert ScoreVariant.parse("G1G2") is ScoreVariant.G1G2
    assert ScoreVariant.parse("S(x,G1(x))") is ScoreVariant.XG1
    assert ScoreVariant.G1G2.proposed and not ScoreVariant.XG1.proposed
    with pytest.raises(ScoringError):
        ScoreVariant.parse("nope")


def test_normalize_examples():
    n = normalize_scores([2, 4, 6])
    assert np.allclose(n.scores, [0, 0.5, 1]) and not n.degenerate
    n = normalize_scores([5, 5, 5])
    assert np.all(n.scores == 0) and n.degenerate
    with pytest.raises(ScoringError):
        normalize_scores([])


errors_lists = st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=30)


@settings(max_examples=100, deadline=None)
@given(errors_lists, st.floats(0.01, 100), st.floats(-50, 50))
def test_normalize_properties(e, alpha, beta):
    e = np.array(e)
    s = normalize_scores(e).scores
    assert np.all((s >= 0) & (s <= 1))
    if e.max() > e.min():
        assert s[np.argmin(e)] == 0 and s[np.argmax(e)] == 1
        t = normalize_scores(alpha * e + beta).scores
        # affine invariance, up to rounding in the transformed errors
        assert np.allclose(s, t, atol=1e-6 * (1 + abs(beta) / max(alpha * np.ptp(e), 1e-300)))
        # ranking preserved
        order = np.argsort(e, kind="stable")
        assert np.all(np.diff(s[order]) >= 0)


def test_calibration_reuse():
    n = normalize_scores([1.0, 3.0])
    c = Calibration(n.lo, n.hi)
    assert c.apply([2.0]) == pytest.approx([0.5])
    assert c.apply([10.0, -1.0]) == pytest.approx([1.0, 0.0])
    assert np.all(Calibration(1.0, 1.0).apply([3.0]) == 0)


def test_threshold_examples():
    assert select_threshold([0.1, 0.2, 0.7, 0.9], [0, 0, 1, 1]) == 0.7
    tau = select_threshold([0.3, 0.3, 0.3, 0.3], [0, 1, 0, 1])
    assert tau == 0.3
    assert youden_j([0.3] * 4, [0, 1, 0, 1], tau) == 0.0
    with pytest.raises(ScoringError):
        select_threshold([0.1, 0.2], [1, 1])


def test_threshold_ties_pick_smallest():
    # thresholds 0.5 and 0.6 both give J = 0.5
    s, y = [0.1, 0.5, 0.6, 0.9], [0, 1, 0, 1]
    thr, j = youden_sweep(s, y)
    assert select_threshold(s, y) == thr[np.argmax(j)]
    assert select_threshold(s, y) == min(t for t, v in zip(thr, j) if v == j.max())


def test_classify_boundary():
    assert classify(0.1, 0.14) == 0
    assert classify(0.14, 0.14) == 1
    assert classify(0.9, 0.14) == 1
    assert classify(np.array([0.1, 0.14]), 0.14).tolist() == [0, 1]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1, allow_nan=False), st.integers(0, 1)), min_size=2, max_size=40))
def test_threshold_properties(pairs):
    s = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    if y.min() == y.max():
        return
    tau = select_threshold(s, y)
    j = youden_j(s, y, tau)
    assert j >= 0
    # brute force over observed scores and a 1001-point grid
    brute = max(youden_j(s, y, t) for t in np.unique(s))
    assert j == pytest.approx(brute, abs=1e-12)
    grid = max(youden_j(s, y, t) for t in np.linspace(0, 1, 1001))
    assert j >= grid - 1e-12


def test_records_roundtrip(tmp_path):
    recs, tau, norm = build_records(["a", "b", "c", "d"], [0.1, 0.2, 0.7, 0.9], [0, 0, 1, 1])
    assert [r.predicted for r in recs] == [0, 0, 1, 1]
    path = tmp_path / "scores.csv"
    write_scores(path, recs, "g1g2")
    with open(path) as fh:
        assert next(csv.reader(fh)) == ["id", "variant", "raw_e", "score", "label", "predicted"]
    back = read_scores(path)
    assert back == recs
