import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modeforge.errors import ConfigurationError
from modeforge.objectives import (SQRT_HALF, from_matrix, general, mbs, mdm, objective_general,
                                  objective_mbs, objective_mdm, objective_tritter, tritter)
from modeforge.optimize import OptimizationConfig

WL = 1550e-9


def sm2(s31, s41, s32, s42, wl=WL):
    return from_matrix(wl, [3, 4], [1, 2], [[s31, s32], [s41, s42]])


def sm3(value, wl=WL):
    return from_matrix(wl, [4, 5, 6], [1, 2, 3], np.full((3, 3), value))


def test_general_zero_at_targets():
    targets = {(3, 1): 0.6, (4, 1): 0.8, (3, 2): 0.8, (4, 2): 0.6}
    cfg = OptimizationConfig(objective="general", targets=targets)
    assert objective_general([sm2(0.6, 0.8j, -0.8, 0.6j)], cfg) == 0.0


def test_dead_beamsplitter():
    assert objective_mbs([sm2(0, 0, 0, 0)]) == pytest.approx(2.0, abs=1e-15)


def test_mbs_examples():
    assert objective_mbs([sm2(SQRT_HALF, 1j * SQRT_HALF, 1j * SQRT_HALF, SQRT_HALF)]) == pytest.approx(0, abs=1e-30)
    assert objective_mbs([sm2(1, 0, 0, 0)]) == pytest.approx((1 - SQRT_HALF) ** 2 + 1.5, abs=1e-12)
    assert objective_mbs([sm2(1, 0, 0, 0)]) == pytest.approx(1.5858, abs=1e-4)
    a = np.sqrt(0.4)
    assert objective_mbs([sm2(a, a, a, a)]) == pytest.approx(4 * (SQRT_HALF - a) ** 2, rel=1e-12)
    assert objective_mbs([sm2(a, a, a, a)]) == pytest.approx(0.02229, abs=1e-5)


def test_mdm_examples():
    assert objective_mdm([sm2(1, 1, 0, 0)]) == 0.0
    assert objective_mdm([sm2(0, 0, 0, 0)]) == 2.0
    assert objective_mdm([sm2(0.9, 0.9, 0.1, 0.1)]) == pytest.approx(0.04, abs=1e-12)


def test_tritter_examples():
    t = 1 / np.sqrt(3)
    assert objective_tritter([sm3(t)]) == pytest.approx(0, abs=1e-30)
    assert objective_tritter([sm3(0)]) == pytest.approx(3.0, abs=1e-12)
    assert objective_tritter([sm3(0.5)]) == pytest.approx(9 * (t - 0.5) ** 2, rel=1e-12)
    assert objective_tritter([sm3(0.5)]) == pytest.approx(0.0539, abs=1e-4)


def test_wavelength_sum_structure():
    wls = (1500e-9, 1550e-9, 1600e-9)
    one = mbs((WL,))([sm2(0.3, 0.5j, 0.2, 0.9)])
    three = mbs(wls)([sm2(0.3, 0.5j, 0.2, 0.9, wl) for wl in wls])
    assert three == pytest.approx(3 * one, rel=1e-14)


def test_missing_entries():
    with pytest.raises(ConfigurationError):
        mbs((1500e-9,))([sm2(1, 0, 0, 0)])
    with pytest.raises(ConfigurationError):
        mbs()([from_matrix(WL, [3], [1, 2], [[1, 0]])])


def test_target_validation():
    with pytest.raises(ConfigurationError):
        general({(3, 1): 1.2}, [WL])
    with pytest.raises(ConfigurationError):
        general({(3, 1): 0.9, (4, 1): 0.9}, [WL])
    with pytest.raises(ConfigurationError):
        OptimizationConfig(objective="general")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.complex_numbers(max_magnitude=0.7, allow_nan=False, allow_infinity=False),
                min_size=4, max_size=4),
       st.floats(0.1, 10))
def test_derivative_matches_differences(vals, weight):
    obj = mdm() if abs(vals[0]) < 0.35 else mbs()
    sm = sm2(*vals)
    f, (d,) = obj.evaluate([sm])
    assert f >= 0
    fw, (dw,) = obj.scaled(weight).evaluate([sm])
    assert fw == pytest.approx(weight * f, rel=1e-14)
    assert np.allclose(dw, weight * d, rtol=1e-14, atol=0)
    # df = Re(D dS) for a small complex perturbation of every entry
    h = 1e-7
    rng = np.random.default_rng(0)
    ds = h * (rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)))
    if np.any(np.abs(sm.entries) < 1e-3):
        return  # |S| has a kink at zero
    fp = obj([from_matrix(WL, [3, 4], [1, 2], sm.entries + ds)])
    fm = obj([from_matrix(WL, [3, 4], [1, 2], sm.entries - ds)])
    assert (fp - fm) / 2 == pytest.approx(np.real(np.sum(d * ds)), rel=1e-5, abs=1e-13)
