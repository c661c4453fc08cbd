import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from modeforge.errors import ConfigurationError, NoGuidedModeError, PreconditionError
from modeforge.modes import (DEFAULT_MATERIALS, N_PMMA, N_SI, N_SIO2, IndexProfile1D, Materials,
                             effective_core_index, eigen_residual, sign_changes, solve_slab_modes)

WL = 1550e-9


def analytic_te0(n_core, n_below, n_above, d, wl):
    """Fundamental TE root of the asymmetric three-layer slab dispersion relation."""
    k0 = 2 * np.pi / wl

    def phase(neff):
        h = k0 * np.sqrt(n_core**2 - neff**2)
        p = k0 * np.sqrt(neff**2 - n_below**2)
        q = k0 * np.sqrt(neff**2 - n_above**2)
        return h * d - np.arctan(p / h) - np.arctan(q / h)

    lo = max(n_below, n_above) + 1e-12
    return brentq(phase, lo, n_core - 1e-12, xtol=1e-15, rtol=1e-15)


def guide_profile(width=1e-6, dx=5e-9, pad=3e-6, n_core=None):
    n_core = DEFAULT_MATERIALS.n_core_eff(WL) if n_core is None else n_core
    return IndexProfile1D.layers([width], [n_core], dx, pad, N_PMMA, N_PMMA)


def test_slab_matches_analytic_root():
    oracle = analytic_te0(N_SI, N_SIO2, N_PMMA, 220e-9, WL)
    assert abs(effective_core_index(WL) - oracle) <= 1e-6


def test_effective_index_range_and_dispersion():
    n = effective_core_index(WL)
    assert 2.7 < n < 3.0
    assert N_PMMA < n < N_SI
    assert effective_core_index(1500e-9) > effective_core_index(1600e-9)


def test_effective_index_out_of_range():
    with pytest.raises(ConfigurationError):
        effective_core_index(1300e-9)


def test_homogeneous_limit():
    m = Materials(n_core=N_SI, n_box=N_SI, n_top=N_SI)
    assert effective_core_index(WL, m) == N_SI


def test_multimode_guide_supports_two_modes():
    modes = solve_slab_modes(guide_profile(), WL, count=4)
    assert len(modes) >= 2
    assert [m.mode_order for m in modes[:2]] == [0, 1]


def test_single_mode_below_cutoff():
    modes = solve_slab_modes(guide_profile(width=0.15e-6), WL, count=3)
    assert len(modes) == 1


def test_orthonormality_and_ordering():
    prof = guide_profile()
    modes = solve_slab_modes(prof, WL, count=3)
    f = np.array([m.field for m in modes])
    gram = f @ f.T * prof.dx
    assert np.allclose(gram, np.eye(len(modes)), atol=1e-8)
    neff = [m.n_eff for m in modes]
    assert all(a > b for a, b in zip(neff, neff[1:]))
    for m in modes:
        assert N_PMMA < m.n_eff < prof.n.max()
        assert eigen_residual(prof, m) <= 1e-8


def test_parity_of_symmetric_guide():
    modes = solve_slab_modes(guide_profile(), WL, count=2)
    te0, te1 = modes[0].field, modes[1].field
    assert sign_changes(te0) == 0 and sign_changes(te1) == 1
    assert np.allclose(te0, te0[::-1], atol=1e-8)
    assert np.allclose(te1, -te1[::-1], atol=1e-8)


def test_mesh_convergence():
    a = solve_slab_modes(guide_profile(dx=2e-9), WL, count=2)
    b = solve_slab_modes(guide_profile(dx=1e-9), WL, count=2)
    for ma, mb in zip(a, b):
        assert abs(ma.n_eff - mb.n_eff) <= 1e-5


def test_no_guided_mode():
    with pytest.raises(NoGuidedModeError):
        solve_slab_modes(IndexProfile1D(np.full(50, 1.5), 10e-9), WL)


def test_resolution_guard():
    with pytest.raises(ConfigurationError):
        solve_slab_modes(guide_profile(dx=40e-9), WL, resolution=20)


def test_bad_inputs():
    with pytest.raises(PreconditionError):
        solve_slab_modes(guide_profile(), WL, count=0)
    with pytest.raises(ConfigurationError):
        IndexProfile1D(np.array([1.0, 0.5, 1.0]), 1e-9)


@settings(max_examples=25, deadline=None)
@given(width=st.floats(0.3e-6, 1.5e-6), n_core=st.floats(1.8, 3.4))
def test_mode_invariants_property(width, n_core):
    prof = guide_profile(width=width, dx=10e-9, pad=2e-6, n_core=n_core)
    modes = solve_slab_modes(prof, WL, count=4)
    f = np.array([m.field for m in modes])
    assert np.allclose(f @ f.T * prof.dx, np.eye(len(modes)), atol=1e-8)
    for m in modes:
        assert sign_changes(m.field) == m.mode_order
        assert N_PMMA < m.n_eff < n_core
