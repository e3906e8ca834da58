import math

import numpy as np
import pytest

from deepcasa.metrics import EvalReport, fae, frame_energy_profile, pair_eval, si_snr, snr


def test_si_snr_clamps_and_scale_invariance(rng):
    ref = rng.standard_normal(500)
    assert si_snr(ref, ref) == 100.0
    assert si_snr(2 * ref, ref) == 100.0
    other = rng.standard_normal(500)
    other -= other.mean()
    r = ref - ref.mean()
    orth = other - (other @ r) / (r @ r) * r
    assert si_snr(orth, ref) == -100.0


def test_si_snr_formula(rng):
    ref = rng.standard_normal(300)
    est = ref + 0.4 * rng.standard_normal(300)
    e, r = est - est.mean(), ref - ref.mean()
    t = (e @ r) / (r @ r) * r
    expected = 10 * math.log10((t @ t) / ((e - t) @ (e - t)))
    assert abs(si_snr(est, ref) - expected) < 1e-10
    assert abs(si_snr(3.0 * est, ref) - expected) < 1e-10


def test_si_snr_zero_reference_warns():
    with pytest.warns(UserWarning):
        assert math.isnan(si_snr(np.ones(10), np.zeros(10)))


def test_pair_eval_best_pairing(rng):
    r1, r2 = rng.standard_normal(400), rng.standard_normal(400)
    y = r1 + r2
    a = pair_eval(r1, r2, r1, r2, y)
    b = pair_eval(r2, r1, r1, r2, y)
    assert a.si_snr == b.si_snr and b.swapped and not a.swapped
    base = pair_eval(y, y, r1, r2, y)
    assert abs(base.delta_si_snr) < 1e-12 and abs(base.delta_snr) < 1e-12


def test_pair_eval_matches_brute_force(rng):
    r1, r2 = rng.standard_normal(400), rng.standard_normal(400)
    y = r1 + r2
    for _ in range(20):
        e1, e2 = r1 + rng.standard_normal(400), r2 * 0.3 + rng.standard_normal(400)
        scores = [(si_snr(e1, r1) + si_snr(e2, r2)) / 2, (si_snr(e2, r1) + si_snr(e1, r2)) / 2]
        base = (si_snr(y, r1) + si_snr(y, r2)) / 2
        assert abs(pair_eval(e1, e2, r1, r2, y).delta_si_snr - (max(scores) - base)) < 1e-10


def test_snr_simple():
    assert snr(np.zeros(5), np.ones(5)) == 0.0
    assert snr(np.ones(5), np.ones(5)) == 100.0


def test_fae_cases():
    e = np.zeros(8)
    opt = np.array([0, 0, 1, 1, 0, 1, 0, 1])
    assert fae(opt, opt, e) == 0.0
    assert fae(1 - opt, opt, e) == 0.0
    pred = opt.copy()
    pred[:4] = 1 - pred[:4]
    assert fae(pred, opt, e) == 50.0
    gated = np.array([0, 0, 0, 0, -30, -30, -30, -30.0])
    assert fae(np.array([0, 0, 0, 1, 1, 1, 1, 1]), np.zeros(8), gated) == 25.0
    assert fae(opt, opt, np.full(8, -40.0)) is None


def test_frame_energy_profile(rng):
    Y = rng.standard_normal((6, 9)) + 1j * rng.standard_normal((6, 9))
    Y[2] *= 0.0
    Y[3] = Y[0] * 0.1  # 1% energy
    p = frame_energy_profile(Y)
    assert p.max() == 0.0
    assert p[2] == -np.inf
    assert abs(p[3] - (p[0] - 20)) < 1e-9
    assert np.allclose(frame_energy_profile(5 * Y)[p > -np.inf], p[p > -np.inf])
    assert np.all(frame_energy_profile(np.zeros((3, 4))) == -np.inf)


def test_report_summary_and_jsonl(rng):
    r = EvalReport("kmeans")
    r1, r2 = rng.standard_normal(100), rng.standard_normal(100)
    r.add("a", pair_eval(r1, r2, r1, r2, r1 + r2), 10.0)
    r.add("b", pair_eval(r1 + r2, r1 + r2, r1, r2, r1 + r2), None)
    s = r.summary()
    assert s["n"] == 2 and s["fae"] == 10.0
    lines = r.to_jsonl().splitlines()
    assert len(lines) == 3 and '"summary": true' in lines[-1]
    assert "kmeans" in r.table()
