import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vadecomp.eventgen import DecompositionHypothesis
from vadecomp.imaging import CROP_GRID
from vadecomp.metrics import (
    BaselineInputs,
    UnphysicalRegime,
    csv_tables,
    image_track_length,
    match_and_score,
    score_event,
    standard_vise,
    summarize,
)
from vadecomp.physics import ParticleKinematics


def hyp(kes, vertex=(0.0, 0.0, 0.0), ptype="proton"):
    ps = [ParticleKinematics(ptype, k, 40.0 + 10 * i, 30.0 * i, vertex) for i, k in enumerate(kes)]
    return DecompositionHypothesis(np.asarray(vertex, dtype=float), ps)


def test_standard_vise_examples():
    assert standard_vise(BaselineInputs(3000.0, 9.0)) == pytest.approx(51.724, abs=5e-4)
    assert standard_vise(BaselineInputs(1000.0, 10.0)) == pytest.approx(11.442, abs=5e-4)
    assert standard_vise(BaselineInputs(1000.0, 1e12)) == pytest.approx(10.0, rel=1e-9)


def test_standard_vise_unphysical():
    with pytest.raises(UnphysicalRegime):
        standard_vise(BaselineInputs(5000.0, 5.0))
    with pytest.raises(ValueError):
        BaselineInputs(-1.0, 5.0)
    with pytest.raises(ValueError):
        BaselineInputs(1.0, 0.0)


@given(st.floats(0.0, 1e4), st.floats(0.1, 1e3))
def test_standard_vise_inflates(e_loss, dx):
    b = BaselineInputs(e_loss, dx)
    try:
        v = standard_vise(b)
    except UnphysicalRegime:
        return
    assert v >= e_loss / 100.0


def test_match_identical():
    h = hyp([40.0, 20.0, 8.0])
    pairs = match_and_score(h, h)
    assert all(p.kind == "match" for p in pairs)
    assert all(p.d_ke == 0 and p.d_theta == 0 and p.d_phi == 0 for p in pairs)


def test_false_negative_defaults():
    pairs = match_and_score(hyp([40.0, 20.0]), hyp([39.0]))
    assert [p.kind for p in pairs] == ["match", "fn"]
    fn = pairs[1]
    assert fn.reco.ke == 0.0 and fn.reco.theta == 90.0 and fn.reco.phi == 180.0


@given(st.lists(st.floats(1.0, 60.0), max_size=6), st.lists(st.floats(1.0, 60.0), max_size=6))
def test_counting_identity_and_swap_symmetry(a, b):
    t, r = hyp(a), hyp(b)
    ev = score_event(0, t, r, 1000.0, 10.0)
    assert ev.n_reco - ev.n_true == ev.n_fp - ev.n_fn
    back = match_and_score(r, t)
    fwd = match_and_score(t, r)
    swap = {"fp": "fn", "fn": "fp", "match": "match"}
    assert [swap[p.kind] for p in fwd] == [p.kind for p in back]
    for p, q in zip(fwd, back):
        assert p.d_ke == pytest.approx(-q.d_ke)


def test_phi_residual_wraps():
    t = DecompositionHypothesis(np.zeros(3), [ParticleKinematics("proton", 10.0, 90.0, 359.0)])
    r = DecompositionHypothesis(np.zeros(3), [ParticleKinematics("proton", 10.0, 90.0, 1.0)])
    assert match_and_score(t, r)[0].d_phi == pytest.approx(2.0)


def test_perfect_reconstruction_report():
    events = [score_event(i, hyp([30.0] * k), hyp([30.0] * k), 1000.0 * k, 20.0) for i, k in
              enumerate([1, 2, 3, 3, 2, 1, 4])]
    rep = summarize(events)
    c = rep.confusion[1:, 1:]
    assert np.array_equal(c, np.diag(np.diag(c)))
    assert rep.accuracy == 1.0 and rep.accuracy_pm1 == 1.0
    assert rep.confusion.sum() == len(events)


def test_confusion_normalizations():
    pairs = [(1, 1), (1, 2), (2, 2), (3, 2), (3, 3), (4, 3)]
    events = [score_event(i, hyp([30.0] * a), hyp([25.0] * b), 1000.0, 20.0) for i, (a, b) in enumerate(pairs)]
    rep = summarize(events)
    assert np.array_equal(rep.confusion.sum(axis=0)[1:], [2, 1, 2, 1])
    rec = rep.recall
    prec = rep.precision
    for j in range(rep.confusion.shape[1]):
        if rep.confusion[:, j].sum():
            assert rec[:, j].sum() == pytest.approx(1.0)
    for i in range(rep.confusion.shape[0]):
        if rep.confusion[i].sum():
            assert prec[i].sum() == pytest.approx(1.0)
    assert rep.accuracy_pm1 == 1.0
    assert rep.accuracy == pytest.approx(3 / 6)


def test_vertex_distance():
    ev = score_event(0, hyp([30.0]), hyp([30.0], vertex=(2.0, 0.0, 0.0)), 1000.0, 20.0)
    assert ev.vertex_distance == pytest.approx(2.0)


def test_resolution_example():
    ev = score_event(0, hyp([30.0]), hyp([27.0]), 3000.0, 8.0, muon_ke=500.0)
    row = summarize([ev]).vise_table[0]
    assert row["res_va_fit"] == pytest.approx(0.10)
    assert row["rmse_fit"] == pytest.approx(3.0)
    assert row["res_event_fit"] == pytest.approx(3.0 / 530.0)


def test_unphysical_baseline_excluded():
    good = score_event(0, hyp([30.0]), hyp([29.0]), 3000.0, 20.0)
    bad = score_event(1, hyp([30.0]), hyp([29.0]), 9000.0, 5.0)
    assert bad.vise_std is None
    rep = summarize([good, bad])
    assert rep.n_baseline_excluded == 1
    assert rep.vise_table[0]["events"] == 2


def test_image_track_length():
    pe = np.zeros((7, 7, 7))
    pe[3, 3, 3] = pe[5, 3, 3] = 200.0
    assert image_track_length(pe, CROP_GRID, np.zeros(3)) == pytest.approx(20.0)
    assert image_track_length(np.zeros((7, 7, 7)), CROP_GRID, np.zeros(3)) == 5.0


def test_csv_tables_render():
    events = [score_event(i, hyp([30.0, 10.0]), hyp([28.0]), 3000.0, 9.0) for i in range(3)]
    tables = csv_tables(summarize(events))
    assert tables
    for text in tables.values():
        lines = text.strip().splitlines()
        assert len(lines) >= 2
        assert len({line.count(",") for line in lines}) == 1


def test_summarize_empty():
    with pytest.raises(ValueError):
        summarize([])
