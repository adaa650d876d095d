import math

import pytest
from hypothesis import given, settings, strategies as st

from ldpfl.core import PreconditionError
from ldpfl.privacy import (
    PrivacyLedger,
    advanced_composition,
    advanced_composition_split,
    compositionality_constant,
    delta_rule,
    experiment_noise_plan,
    gaussian_sigma_sq,
    group_privacy_userlevel,
    mbsgd_ledger,
    mbsgd_noise_plan,
    onepass_noise_plan,
    sdp_noise_plan,
    shuffle_amplify_ledger,
    shuffle_amplify_round,
    subsample_amplify,
)

# Reference values below were evaluated once with mpmath at 40 digits and frozen.
GAUSS_K1 = 375.5542085211020
GAUSS_K2 = 93.88855213027551
SPLIT_EPS = 0.009281996250077209
MBSGD_R100 = 7.182169621564737
MBSGD_R1 = 0.05471709767327114
ONEPASS_K10 = 3.755542085211020
EXPERIMENT = 1.806927084201905e-5
SHUFFLE_EPS = 0.01629248499940468
GROUP_DELTA = 3.664208274480510e-6


def test_gaussian_sigma_sq_reference():
    assert gaussian_sigma_sq(1, 1, 1, 1e-5) == pytest.approx(GAUSS_K1, rel=1e-13)
    assert gaussian_sigma_sq(1, 2, 1, 1e-5) == pytest.approx(GAUSS_K2, rel=1e-13)
    assert gaussian_sigma_sq(0, 3, 0.5, 1e-5) == 0.0


def test_gaussian_sigma_sq_rejects_large_eps():
    with pytest.raises(PreconditionError, match="inner ε exceeds Gaussian-mechanism range"):
        gaussian_sigma_sq(1, 1, 1.5, 1e-5)
    with pytest.warns(RuntimeWarning):
        assert gaussian_sigma_sq(1, 1, 1.5, 1e-5, unsafe=True) > 0


def test_advanced_composition_split_reference():
    e, d = advanced_composition_split(1.0, 1e-6, 100)
    assert e == pytest.approx(SPLIT_EPS, rel=1e-13)
    assert d == pytest.approx(5e-9, rel=1e-15)
    e1, _ = advanced_composition_split(1.0, 1e-6, 1)
    assert e1 == pytest.approx(1.0 / (2 * math.sqrt(2 * math.log(2e6))), rel=1e-15)


def test_advanced_composition_split_rejects_large_eps0():
    with pytest.raises(PreconditionError, match="2 ln"):
        advanced_composition_split(3 * math.log(2 / 1e-6), 1e-6, 10)


def test_split_composes_within_target():
    e, d = advanced_composition_split(1.0, 1e-6, 100)
    total_e, total_d = advanced_composition(e, d, 100, 1e-6 / 2)
    assert total_e <= 1.0 and total_d <= 1e-6 * (1 + 1e-12)


def test_subsample_amplify_examples():
    assert subsample_amplify(0.5, 10, 100) == pytest.approx(0.1, rel=1e-15)
    assert subsample_amplify(0.3, 7, 7) == pytest.approx(0.6)
    assert subsample_amplify(0.0, 1, 5) == 0.0
    with pytest.raises(PreconditionError):
        subsample_amplify(0.5, 11, 10)


def test_mbsgd_noise_plan_reference():
    plan = mbsgd_noise_plan(1, 1000, 1.0, 1e-6, 100)
    assert plan.sigma_sq == pytest.approx(MBSGD_R100, rel=1e-13)
    assert plan.K_min == 5
    assert plan.mode == "mbsgd-advanced-composition"
    assert mbsgd_noise_plan(1, 1000, 1.0, 1e-6, 1).sigma_sq == pytest.approx(MBSGD_R1, rel=1e-13)
    with pytest.raises(PreconditionError):
        mbsgd_noise_plan(1, 1000, 3 * math.log(2e6), 1e-6, 10)


def test_onepass_noise_plan_reference():
    plan = onepass_noise_plan(1, 10, 1.0, 1e-5)
    assert plan.sigma_sq == pytest.approx(ONEPASS_K10, rel=1e-13)
    assert onepass_noise_plan(1, 20, 1.0, 1e-5).sigma_sq == pytest.approx(plan.sigma_sq / 4, rel=1e-14)
    assert onepass_noise_plan(1, 10, 1.0, 1e-5, n=95).R == 9
    with pytest.raises(PreconditionError):
        onepass_noise_plan(1, 10, 9 * math.log(1e5), 1e-5)


def test_experiment_noise_plan_reference():
    n = 1238
    plan = experiment_noise_plan(1, n, 12, 1 / n**2, 35)
    assert plan.sigma_sq == pytest.approx(EXPERIMENT, rel=1e-13)
    assert plan.K_min == 363
    assert experiment_noise_plan(1, n, 1e12, 1 / n**2, 35).sigma_sq < 1e-25


def test_sdp_m_condition_error():
    # 16 ln(18 R M^2 / (N delta)) = 16 ln(1.8e8) ~ 304 > 100
    with pytest.raises(PreconditionError, match="304"):
        sdp_noise_plan(1, 100, 100, 100, 1.0, 1e-4, 10)


def test_sdp_scaling():
    assert sdp_noise_plan(0, 50, 2000, 2000, 1.0, 1e-4, 10).sigma_sq == 0.0
    a = sdp_noise_plan(1, 50, 2000, 2000, 1.0, 1e-4, 10, C_const=1.0).sigma_sq
    b = sdp_noise_plan(1, 100, 2000, 2000, 1.0, 1e-4, 10, C_const=1.0).sigma_sq
    assert a / b == pytest.approx(4.0, rel=1e-13)


def test_shuffle_amplify_round_reference():
    e, d = shuffle_amplify_round(0.1, 0.0, 1, 10_000, 1e-6)
    assert e == pytest.approx(SHUFFLE_EPS, rel=1e-12)
    assert d == 1e-6
    assert shuffle_amplify_round(0.0, 0.0, 1, 10_000, 1e-6)[0] == 0.0


def test_shuffle_amplify_round_rejects_out_of_range():
    with pytest.raises(PreconditionError, match="exceeds"):
        shuffle_amplify_round(5.0, 0.0, 1, 1000, 1e-6)


def test_shuffle_halves_when_n_quadruples():
    for N in (1e3, 4e3, 1.6e4):
        ratio = shuffle_amplify_round(0.1, 0, 1, int(N), 1e-6)[0] / shuffle_amplify_round(0.1, 0, 1, int(4 * N), 1e-6)[0]
        assert 1.8 <= ratio <= 2.2


def test_shuffle_amplification_in_valid_regime():
    for N in (10**3, 10**4, 10**5):
        e0 = 0.05
        if N < 256 * math.exp(e0) * math.log(4e6):
            continue
        e, _ = shuffle_amplify_round(e0, 0, 1, N, 1e-6)
        assert e <= e0
    scaled = [shuffle_amplify_round(0.05, 0, 1, N, 1e-6)[0] * math.sqrt(N) / 0.05 for N in (10**3, 10**4, 10**5)]
    assert max(scaled) / min(scaled) < 2.0


def test_shuffle_ledger_single_round_and_repeated():
    delta0_r = 1e-10
    N, n = 10_000, 1
    e1, d1 = shuffle_amplify_round(0.1, delta0_r, n, N, N * n * delta0_r)
    e, d = shuffle_amplify_ledger(PrivacyLedger.uniform(1, 0.1, delta0_r, 0.1), n, N, delta_prime=1e-6)
    assert e == pytest.approx(2 * e1**2 + math.sqrt(2 * e1**2 * math.log(1e6)), rel=1e-14)
    assert d == pytest.approx(1e-6 + d1, rel=1e-14)
    R = 7
    eR, _ = shuffle_amplify_ledger(PrivacyLedger.uniform(R, 0.1, delta0_r, 0.1), n, N, delta_prime=1e-6)
    assert eR == pytest.approx(2 * R * e1**2 + math.sqrt(2 * R * e1**2 * math.log(1e6)), rel=1e-12)
    assert shuffle_amplify_ledger(PrivacyLedger((), 1.0), n, N, delta_prime=1e-6) == (0.0, 1e-6)


def test_shuffle_ledger_reports_round_index():
    ledger = PrivacyLedger(((0.1, 1e-10), (5.0, 1e-10)), 1.0)
    with pytest.raises(PreconditionError, match="round 1"):
        shuffle_amplify_ledger(ledger, 1, 10_000, delta_prime=1e-6)


def test_compositionality_constant():
    assert compositionality_constant(PrivacyLedger.uniform(9, 0.5, 0, 0.5)) == pytest.approx(3.0)
    assert compositionality_constant(PrivacyLedger.uniform(1, 0.5, 0, 0.5)) == 1.0
    for R in (1, 10, 100, 1000):
        assert compositionality_constant(mbsgd_ledger(1.0, 1e-6, R)) <= 1 + 1e-12


def test_group_privacy():
    assert group_privacy_userlevel(0.3, 1e-6, 1) == (0.3, 1e-6)
    e, d = group_privacy_userlevel(0.1, 1e-6, 3)
    assert e == pytest.approx(0.3) and d == pytest.approx(GROUP_DELTA, rel=1e-13)
    assert group_privacy_userlevel(0.0, 1e-6, 4) == (0.0, 4e-6)


def test_ledger_round_trip(tmp_path):
    ledger = mbsgd_ledger(1.0, 1e-6, 5)
    path = tmp_path / "ledger.txt"
    ledger.write(path)
    assert PrivacyLedger.read(path) == ledger


def test_ledger_rejects_negative_budget():
    with pytest.raises(PreconditionError, match="round 0"):
        PrivacyLedger(((-1.0, 0.0),), 1.0)


def test_delta_rule():
    assert delta_rule("1/n^2", 10) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        delta_rule("__import__('os')", 10)


@settings(max_examples=150, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.integers(1, 500), st.floats(1e-9, 1e-2),
       st.floats(0.1, 10), st.integers(50, 5000))
def test_sigma_monotone(e_lo, e_hi, R, delta, L, n):
    e_lo, e_hi = sorted((e_lo, e_hi))
    assert gaussian_sigma_sq(L, 3, e_hi, delta) <= gaussian_sigma_sq(L, 3, e_lo, delta)
    assert mbsgd_noise_plan(L, n, e_hi, delta, R).sigma_sq <= mbsgd_noise_plan(L, n, e_lo, delta, R).sigma_sq
    assert mbsgd_noise_plan(L, n, e_lo, delta, R).sigma_sq <= mbsgd_noise_plan(L, n, e_lo, delta, R + 1).sigma_sq
    assert mbsgd_noise_plan(L, n, e_lo, delta, R).sigma_sq <= mbsgd_noise_plan(2 * L, n, e_lo, delta, R).sigma_sq
    assert mbsgd_noise_plan(L, n, e_lo, delta / 2, R).sigma_sq >= mbsgd_noise_plan(L, n, e_lo, delta, R).sigma_sq
    assert experiment_noise_plan(L, n, e_hi, delta, R).sigma_sq <= experiment_noise_plan(L, n, e_lo, delta, R).sigma_sq
    assert onepass_noise_plan(L, 5, e_hi, delta).sigma_sq <= onepass_noise_plan(L, 5, e_lo, delta).sigma_sq


def test_plans_are_pure():
    a = mbsgd_noise_plan(1.3, 777, 0.7, 1e-7, 33)
    b = mbsgd_noise_plan(1.3, 777, 0.7, 1e-7, 33)
    assert a == b and a.sigma_sq == b.sigma_sq
