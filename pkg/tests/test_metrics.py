import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from wealthfpk.grid import DensityOnGrid, build_grid, project_equilibrium
from wealthfpk.metrics import (
    CharacteristicFunction,
    NotIntegrable,
    bhattacharyya,
    characteristic_function,
    chernoff_check,
    difference_transform,
    ds_metric,
    dsp_metric,
    entropy_production_hellinger,
    entropy_production_js,
    frequency_grid,
    hellinger,
    jensen_shannon,
    relative_entropy,
    sobolev_norm,
)
from wealthfpk.model import ModelParams

# uniform grid on [-2, 4] with edges at every multiple of 0.05
GRID = build_grid(-2, 4, 120)
UNIT = ModelParams(1.0, 1.0)


def box(a, b):
    lo, hi = GRID.edges[:-1], GRID.edges[1:]
    overlap = np.clip(np.minimum(hi, b) - np.maximum(lo, a), 0, None)
    return DensityOnGrid(GRID, overlap / GRID.widths / (b - a))


def box_hat(xi, a, b):
    return (np.exp(-1j * xi * a) - np.exp(-1j * xi * b)) / (1j * xi * (b - a))


def test_transform_of_box_is_exact():
    cf = characteristic_function(box(0.0, 1.0))
    np.testing.assert_allclose(cf.pos_values, box_hat(cf.xi_pos, 0.0, 1.0), rtol=1e-11, atol=1e-14)
    assert cf.vanishing_order == 0
    assert cf.mass == pytest.approx(1.0)
    # symmetric grid by conjugation
    assert cf.xi_grid.size == 2 * cf.xi_pos.size
    np.testing.assert_array_equal(cf.values[: cf.xi_pos.size], np.conj(cf.pos_values[::-1]))


def test_frequency_grid_validation():
    with pytest.raises(ValueError):
        frequency_grid(0.0, 1.0)
    with pytest.raises(ValueError):
        frequency_grid(1.0, 1.0, 10)
    assert frequency_grid(1e-2, 1e2, 5)[2] == pytest.approx(1.0)


def test_vanishing_order_inference():
    f, g, h = box(0.0, 2.0), box(0.5, 1.5), box(0.0, 1.0)
    assert difference_transform(f, g).vanishing_order == 2  # same mass and mean
    assert difference_transform(f, h).vanishing_order == 1  # same mass only
    assert difference_transform(f, h.scaled(2.0)).vanishing_order == 0
    assert (characteristic_function(f) - characteristic_function(g)).vanishing_order == 2


def test_ds_metric_matches_closed_form():
    f, g = box(0.0, 2.0), box(0.5, 1.5)
    xi = frequency_grid()
    exact = np.max(np.abs(box_hat(xi, 0.0, 2.0) - box_hat(xi, 0.5, 1.5)) / xi**1.5)
    res = ds_metric(difference_transform(f, g), None, 1.5)
    assert res.value == pytest.approx(exact, rel=1e-9)
    assert not res.boundary_sup


def test_ds_metric_flags_sup_at_grid_edge():
    f, h = box(0.0, 2.0), box(0.0, 1.0)
    res = ds_metric(difference_transform(f, h), None, 1.5)
    assert res.boundary_sup


def test_dsp_metric_against_quadrature():
    f, g = box(0.0, 2.0), box(0.5, 1.5)
    s = 1.25

    def integrand(x):
        return abs(box_hat(x, 0.0, 2.0) - box_hat(x, 0.5, 1.5)) ** 2 * x ** (-(2 * s + 1))

    pieces = [integrate.quad(integrand, lo, hi, limit=400, epsabs=0, epsrel=1e-11)[0]
              for lo, hi in [(0, 1), (1, 10), (10, 100), (100, 1000)]]
    ref = math.sqrt(2 * sum(pieces[1:]) + 2 * pieces[0])
    res = dsp_metric(difference_transform(f, g), None, s, 2.0)
    assert res.value == pytest.approx(ref, rel=1e-4)
    assert res.quadrature_error_estimate >= 0
    assert res.quadrature_error_estimate < 1e-3 * res.value


def test_dsp_requires_enough_matched_moments():
    f, h = box(0.0, 2.0), box(0.0, 1.0)
    d = difference_transform(f, h)
    with pytest.raises(NotIntegrable):
        dsp_metric(d, None, 1.0, 2.0)
    dsp_metric(d, None, 0.9, 2.0)
    with pytest.raises(NotIntegrable):
        dsp_metric(d, None, 1.2, 2.0, matched_moments=0)
    dsp_metric(d, None, 1.2, 2.0, matched_moments=1)
    with pytest.raises(ValueError):
        dsp_metric(d, None, 0.5, 0.5)


def test_metric_inputs_on_different_grids_rejected():
    a = CharacteristicFunction(frequency_grid(n_xi=10), np.ones(10))
    b = CharacteristicFunction(frequency_grid(n_xi=11), np.ones(11))
    with pytest.raises(ValueError):
        ds_metric(a, b, 1.0)


def test_sobolev_plancherel():
    # int |f_hat|^2 = 2 pi int f^2 = 2 pi, minus the two truncated pieces:
    # |xi| > 1e3 where |f_hat|^2 averages 2/xi^2, and |xi| < 1e-4 where it is 1
    val = sobolev_norm(box(0.0, 1.0), 0.0)
    assert val == pytest.approx(2 * math.pi - 4e-3 - 2e-4, rel=2e-6)
    with pytest.raises(NotIntegrable):
        sobolev_norm(box(0.0, 1.0), -0.75)


def test_hellinger_and_bhattacharyya():
    f, g = box(0.0, 1.0), box(0.5, 1.5)
    assert bhattacharyya(f, g) == pytest.approx(0.5, abs=1e-14)
    assert hellinger(f, g) == pytest.approx(1.0, abs=1e-14)
    assert hellinger(f, f) == 0.0
    assert hellinger(f, g, alpha=1.0) == 0.0
    with pytest.raises(ValueError):
        hellinger(f, g, alpha=1.5)


def test_jensen_shannon_and_relative_entropy():
    f, g = box(0.0, 1.0), box(0.5, 1.5)
    assert jensen_shannon(f, g, 0.5) == pytest.approx(0.5 * math.log(2), abs=1e-14)
    assert jensen_shannon(f, f, 0.3) == pytest.approx(0.0, abs=1e-15)
    assert relative_entropy(f, g) == math.inf
    assert relative_entropy(f, f) == 0.0
    with pytest.raises(ValueError):
        jensen_shannon(f, g, 1.0)


def test_productions_vanish_at_equilibrium():
    g = build_grid(-10, 5000, 2000, 1000)
    e = project_equilibrium(UNIT, g)
    p = entropy_production_js(e, UNIT, 0.5)
    assert p.production == pytest.approx(0.0, abs=1e-20)
    assert p.boundary_density == pytest.approx(0.0, abs=1e-20)
    assert entropy_production_hellinger(e, UNIT, 0.25) == pytest.approx(0.0, abs=1e-20)


def test_js_production_of_a_tilt():
    # f = C v^k f_inf has d log(f/f_inf) = k / v exactly; at alpha -> 0 the sum is
    # (sigma/2) k^2 int f = (sigma/2) k^2 times the mass of f
    g = build_grid(-1, 200, 4000, 400)
    p = ModelParams(1.0, 0.5)
    e = project_equilibrium(p, g)
    k = 0.5
    c = np.where(g.centers > 0, np.abs(g.centers) ** k, 0.0)
    f = DensityOnGrid(g, c * np.asarray(e.values))
    f = f.scaled(1 / f.mass)
    val = entropy_production_js(f, p, 1e-9, e).production
    assert val == pytest.approx(0.5 * p.sigma * k * k, rel=2e-3)


def test_chernoff_equality_for_affine():
    p = ModelParams(1.0, 0.5)  # mu = 5
    r = chernoff_check(p, lambda v: 2.0 * v - 3.0, dphi=lambda v: 2.0)
    assert r.affine
    assert r.variance == pytest.approx(4.0 / (p.mu - 2.0), rel=1e-9)
    assert r.variance == pytest.approx(r.bound, rel=1e-9)


@pytest.mark.parametrize("phi", [np.log1p, np.sqrt, np.tanh, lambda v: v**1.5, lambda v: v / (1.0 + v)])
def test_chernoff_inequality(phi):
    p = ModelParams(1.0, 0.5)
    r = chernoff_check(p, phi)
    assert r.holds()
    assert not r.affine
    assert r.variance < r.bound


def test_chernoff_divergent_variance_rejected():
    with pytest.raises(NotIntegrable):
        chernoff_check(UNIT, lambda v: v * v)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 5.0), min_size=120, max_size=120).filter(lambda w: sum(w) > 1e-2))
def test_divergences_nonnegative(w):
    f = DensityOnGrid(GRID, np.array(w))
    f = f.scaled(1 / f.mass)
    g = box(-0.5, 1.5)
    assert jensen_shannon(f, g, 0.5) >= -1e-14
    assert 0 <= hellinger(f, g) <= math.sqrt(2) + 1e-12
    assert ds_metric(difference_transform(f, g), None, 0.5).value >= 0


def test_ds_anchor_two_boxes():
    # |delta(xi)| / xi^2 decreases from its limit (M2(f) - M2(g)) / 2 = (4/3 - 13/12) / 2
    res = ds_metric(difference_transform(box(0.0, 2.0), box(0.5, 1.5)), None, 2.0)
    assert res.value == pytest.approx(0.125, rel=1e-6)


def test_ds_and_dsp_scale_under_dilation():
    f, g = box(0.0, 2.0), box(0.5, 1.5)
    c = 2.0
    wide = build_grid(-2, 4, 120)
    from wealthfpk.grid import Grid

    dil = Grid(c * wide.edges)
    fd = DensityOnGrid(dil, np.asarray(f.values) / c)
    gd = DensityOnGrid(dil, np.asarray(g.values) / c)
    base = difference_transform(f, g)
    # the law of cX at xi is the law of X at c xi: shift the window by 1/c
    scaled = difference_transform(fd, gd, xi_min=1e-4 / c, xi_max=1e3 / c)
    for s in (0.5, 1.0, 1.5):
        assert ds_metric(scaled, None, s).value == pytest.approx(c**s * ds_metric(base, None, s).value, rel=1e-6)
        assert dsp_metric(scaled, None, s, 2.0).value == pytest.approx(
            c**s * dsp_metric(base, None, s, 2.0).value, rel=1e-6
        )


def test_dsp_is_negative_order_sobolev_distance():
    d = difference_transform(box(0.0, 2.0), box(0.5, 1.5))
    for s in (0.5, 1.25, 1.9):
        lhs = dsp_metric(d, None, s, 2.0).value ** 2
        assert lhs == pytest.approx(sobolev_norm(d, -(s + 0.5)), rel=1e-10)


def test_negative_support_identities():
    g = build_grid(-10, 5000, 1000, 1000)
    einf = project_equilibrium(UNIT, g)
    debt = DensityOnGrid(g, np.where((g.centers > -2) & (g.centers < -1), 1.0, 0.0))
    debt = debt.scaled(0.4 / debt.mass)
    for a in (0.25, 0.5, 0.75):
        assert jensen_shannon(debt, einf, a) == pytest.approx(math.log(1 / a) * 0.4, rel=1e-12)
        assert hellinger(debt, einf, a) ** 2 == pytest.approx(
            (1 - math.sqrt(a)) ** 2 * 0.4 + (1 - a) * einf.mass, rel=1e-12
        )
        assert entropy_production_js(debt, UNIT, a, einf).production == 0.0
        assert entropy_production_hellinger(debt, UNIT, a, einf) == 0.0


def test_chernoff_constant_is_degenerate():
    r = chernoff_check(ModelParams(1.0, 0.5), lambda v: 4.0, dphi=lambda v: 0.0)
    assert r.variance < 1e-25 and r.bound == 0.0
    assert r.holds()
