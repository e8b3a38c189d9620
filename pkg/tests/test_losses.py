import numpy as np
import pytest

from nplda.losses import (
    SoftCostConfig,
    bce_loss,
    bce_regularized,
    evaluate_loss,
    soft_cnorm,
    soft_cprimary,
    soft_pfa,
    soft_pmiss,
    soft_plus_bce,
)
from nplda.metrics import c_norm, hard_pmiss_pfa

H = 1e-5


def _check_fd(f, x, analytic, rtol=1e-4, atol=1e-7):
    x = np.array(x, dtype=float)
    fd = np.zeros_like(x)
    for k in range(x.size):
        d = np.zeros_like(x)
        d.flat[k] = H
        fd.flat[k] = (f(x + d) - f(x - d)) / (2 * H)
    err = np.abs(fd - analytic)
    ok = (err <= atol) | (err <= rtol * np.abs(fd))
    assert ok.all(), f"max error {err.max():.3g}"


def _instance(seed=0, n=16):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=n)
    t = np.zeros(n)
    t[: n // 2] = 1
    return s, t


class TestBce:
    def test_zero_score(self):
        loss, g = bce_loss([0.0], [1])
        assert loss == pytest.approx(np.log(2), abs=1e-12)
        np.testing.assert_allclose(g, [-0.5])

    def test_no_overflow(self):
        loss, g = bce_loss([100.0, -1000.0], [1, 0])
        assert np.isfinite(loss) and loss < 1e-40
        assert np.all(np.isfinite(g))

    def test_empty(self):
        with pytest.raises(ValueError):
            bce_loss([], [])

    def test_finite_differences(self):
        s, t = _instance()
        _, g = bce_loss(s, t)
        _check_fd(lambda x: bce_loss(x, t)[0], s, g)


class TestBceRegularized:
    def test_lambda_zero(self):
        s, t = _instance()
        ref = np.zeros_like(s)
        a = bce_regularized(s, t, ref, 0.0)
        b = bce_loss(s, t)
        assert a[0] == b[0]
        np.testing.assert_array_equal(a[1], b[1])

    def test_matching_reference(self):
        s, t = _instance()
        assert bce_regularized(s, t, s, 5.0)[0] == bce_loss(s, t)[0]

    def test_hand_case(self):
        loss, _ = bce_regularized([1.0], [1], [0.0], 1.0)
        assert loss == pytest.approx(1.31326, abs=1e-5)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bce_regularized([1.0, 2.0], [1, 0], [0.0], 1.0)

    def test_finite_differences(self):
        s, t = _instance(1)
        ref = np.random.default_rng(2).normal(size=s.size)
        _, g = bce_regularized(s, t, ref, 0.7)
        _check_fd(lambda x: bce_regularized(x, t, ref, 0.7)[0], s, g)


class TestSoftRates:
    def test_pmiss_at_threshold(self):
        assert soft_pmiss([0.3], [1], 0.3, 20.0) == 0.5

    def test_all_target_pfa_errors(self):
        with pytest.raises(ValueError):
            soft_pfa([0.1, 0.2], [1, 1], 0.0, 10.0)

    def test_matches_hard_counts(self):
        rng = np.random.default_rng(3)
        s = rng.normal(size=200)
        t = (rng.random(200) < 0.4).astype(float)
        theta = 0.123
        s = s[np.abs(s - theta) > 0.01]
        t = t[: s.size]
        pm, pf = hard_pmiss_pfa(s, t, theta)
        assert abs(soft_pmiss(s, t, theta, 1e4) - pm) < 1e-6
        assert abs(soft_pfa(s, t, theta, 1e4) - pf) < 1e-6

    def test_separated_cost_vanishes(self):
        s, t = np.array([0.5, 1.0, -0.5, -1.0]), np.array([1, 1, 0, 0])
        assert soft_cnorm(s, t, 99, 0.0, 1e4) < 1e-4
        assert soft_cnorm([0.5, -0.5], [1, 0], 99, 0.0, 1e4) < 1e-4

    def test_beta_zero(self):
        s, t = _instance()
        assert soft_cnorm(s, t, 0, 0.2, 5.0) == soft_pmiss(s, t, 0.2, 5.0)

    def test_monotone_hard_limit(self):
        s, t = _instance(4, 500)
        gaps = [abs(soft_cnorm(s, t, 99, 0.05, a) - c_norm(s, t, 99, 0.05))
                for a in (1, 10, 100, 1e4)]
        assert all(x > y for x, y in zip(gaps, gaps[1:]))


class TestSoftCPrimary:
    def test_collapse_to_cnorm(self):
        s, t = _instance()
        cfg = SoftCostConfig(alpha=3.0, beta1=50.0, beta2=50.0)
        loss, _, _ = soft_cprimary(s, t, [0.2, 0.2], cfg)
        assert loss == pytest.approx(soft_cnorm(s, t, 50.0, 0.2, 3.0), rel=1e-14)

    def test_single_class(self):
        with pytest.raises(ValueError):
            soft_cprimary([1.0, 2.0], [0, 0], [0, 0], SoftCostConfig())

    def test_score_gradient(self):
        s, t = _instance(5)
        cfg = SoftCostConfig(alpha=2.0)
        theta = np.array([0.1, 0.3])
        _, ds, _ = soft_cprimary(s, t, theta, cfg)
        _check_fd(lambda x: soft_cprimary(x, t, theta, cfg)[0], s, ds)

    def test_theta_gradient_antisymmetric(self):
        s = np.array([1.0, 0.4, -1.0, -0.4])
        t = np.array([1, 1, 0, 0])
        cfg = SoftCostConfig(alpha=3.0)
        _, _, dth = soft_cprimary(s, t, [0.0, 0.0], cfg)
        # hand expression: -sum of the score derivatives per cost
        sig = 1 / (1 + np.exp(-3.0 * s))
        dsig = 3.0 * sig * (1 - sig)
        for k, beta in enumerate((99.0, 199.0)):
            hand = -0.5 * np.sum((-t / 2 + beta * (1 - t) / 2) * dsig)
            assert abs(dth[k] - hand) < 1e-12

        def f(th):
            return soft_cprimary(s, t, th, cfg)[0]
        _check_fd(f, [0.0, 0.0], dth, atol=1e-6)

    def test_theta_gradient_random(self):
        s, t = _instance(6)
        cfg = SoftCostConfig(alpha=4.0)
        theta = np.array([-0.2, 0.5])
        _, _, dth = soft_cprimary(s, t, theta, cfg)
        _check_fd(lambda th: soft_cprimary(s, t, th, cfg)[0], theta, dth)

    def test_invalid_alpha(self):
        with pytest.raises(ValueError):
            SoftCostConfig(alpha=0.0)


class TestDispatch:
    def test_soft_plus_bce(self):
        s, t = _instance(7)
        cfg = SoftCostConfig(alpha=2.0)
        loss, ds, _ = soft_plus_bce(s, t, [0.0, 0.1], cfg, bce_weight=0.3)
        _check_fd(lambda x: soft_plus_bce(x, t, [0.0, 0.1], cfg, 0.3)[0], s, ds)
        assert loss == pytest.approx(soft_cprimary(s, t, [0.0, 0.1], cfg)[0]
                                     + 0.3 * bce_loss(s, t)[0])

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown loss"):
            evaluate_loss("hinge", [0.0, 1.0], [0, 1], [0, 0], SoftCostConfig())

    def test_bce_reg_needs_reference(self):
        with pytest.raises(ValueError, match="reference"):
            evaluate_loss("bce_reg", [0.0, 1.0], [0, 1], [0, 0], SoftCostConfig())

    def test_bce_has_zero_theta_gradient(self):
        _, _, dth = evaluate_loss("bce", [0.0, 1.0], [0, 1], [0, 0], SoftCostConfig())
        np.testing.assert_array_equal(dth, [0, 0])
