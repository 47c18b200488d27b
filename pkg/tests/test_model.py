import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.affine_volterra.errors import JumpDomainError, UnsupportedKernelError
from src.affine_volterra.kernels import ConstantKernel, ExpSumKernel, FractionalKernel, Grid
from src.affine_volterra.model import (
    AffineInKCurve,
    AtomicJumps,
    CharTriplet,
    ExponentialJumps,
    NoJumps,
    NonDecreasingTableCurve,
    TabulatedCurve,
    admissibility_residual,
    check_admissibility,
    g0_eval,
    jump_exp_integral,
    parse_curve,
)


def test_atomic_jump_exponential_integral():
    nu = AtomicJumps(atoms=[(1.0, 2.0), (0.5, 1.0)])
    z = 0.3 + 0.2j
    expected = 2.0 * (np.exp(z) - 1 - z) + 1.0 * (np.exp(0.5 * z) - 1 - 0.5 * z)
    assert complex(nu.exp_integral(z)) == pytest.approx(expected)
    assert nu.second_moment() == pytest.approx(2.25)
    assert nu.first_moment() == pytest.approx(2.5)


def test_exponential_jumps_domain():
    nu = ExponentialJumps(mass=2.0, rate=3.0)
    assert complex(nu.exp_integral(1.0)) == pytest.approx(2.0 * (3.0 / 2.0 - 1.0 - 1.0 / 3.0))
    assert nu.second_moment() == pytest.approx(4.0 / 9.0)
    with pytest.raises(JumpDomainError):
        nu.exp_integral(3.5)
    assert math.isinf(nu.moment_bound(3.0))


def test_jump_sum_sampling():
    rng = np.random.default_rng(0)
    counts = np.array([0, 1, 3])
    assert np.array_equal(AtomicJumps(atoms=[(2.0, 1.0)]).sample_jump_sums(rng, counts), [0.0, 2.0, 6.0])
    sums = ExponentialJumps(mass=1.0, rate=2.0).sample_jump_sums(rng, counts)
    assert sums[0] == 0.0 and np.all(sums[1:] > 0)
    assert np.all(NoJumps().sample_jump_sums(rng, counts) == 0)


def test_triplet_moment_constant():
    triplet = CharTriplet(b=-0.5, c=0.2, nu=AtomicJumps(atoms=[(2.0, 0.1)]))
    assert triplet.moment_constant == pytest.approx(0.5 + 0.2 + 0.4)
    with pytest.raises(ValidationError):
        CharTriplet(b=0.0, c=-1.0)


def test_affine_in_k_curve_constant_kernel():
    curve = AffineInKCurve(x0=0.04, theta=0.5)
    kernel = ConstantKernel(value=1.0)
    t = np.array([0.0, 0.5, 2.0])
    assert np.allclose(curve.g0(t, kernel), 0.04 + 0.5 * t)
    assert np.allclose(curve.G0(t, kernel), 0.04 * t + 0.25 * t**2)
    assert curve.sup_g0(0.0, 2.0, kernel) == pytest.approx(1.04)


def test_table_curves():
    curve = NonDecreasingTableCurve(times=(0.0, 1.0, 2.0), values=(1.0, 2.0, 2.0))
    assert float(curve.G0(1.0)) == pytest.approx(1.5)
    assert float(curve.G0(3.0)) == pytest.approx(1.5 + 2.0 + 2.0)
    assert curve.sup_g0(0.0, 0.5) == pytest.approx(1.5)
    with pytest.raises(ValidationError):
        NonDecreasingTableCurve(times=(0.0, 1.0), values=(2.0, 1.0))
    with pytest.raises(ValidationError):
        TabulatedCurve(times=(0.5, 1.0), values=(1.0, 1.0))


def test_parse_curve():
    curve = parse_curve({"type": "affine_in_k", "x0": 0.1, "theta": 0.0})
    assert isinstance(curve, AffineInKCurve)
    assert np.allclose(curve.G0(np.array([2.0]), FractionalKernel(H=0.1)), 0.2)


def test_constant_curve_is_admissible_for_fractional_kernel():
    grid = Grid(horizon=1.0, n_steps=20)
    results = check_admissibility(AffineInKCurve(x0=0.5, theta=0.0), FractionalKernel(H=0.1), [0.1, 0.05], grid)
    assert [r.h for r in results] == [0.1, 0.05]
    assert all(r.admissible for r in results)


def test_decreasing_curve_is_not_admissible():
    grid = Grid(horizon=1.0, n_steps=20)
    curve = TabulatedCurve(times=(0.0, 2.0), values=(1.0, 0.0))
    result = admissibility_residual(curve, ConstantKernel(value=1.0), 0.1, grid)
    # with K = 1 the residual reduces to g0(t + h) - g0(t)
    assert np.allclose(result.residual, -0.05)
    assert not result.admissible
    assert len(result.to_frame()) == grid.n_steps + 1


def test_non_decreasing_table_is_admissible_for_constant_kernel():
    grid = Grid(horizon=1.0, n_steps=10)
    curve = NonDecreasingTableCurve(times=(0.0, 0.5, 2.0), values=(0.1, 0.3, 0.4))
    assert admissibility_residual(curve, ConstantKernel(value=1.0), 0.1, grid).admissible


def test_admissibility_needs_closed_form_resolvent():
    with pytest.raises(UnsupportedKernelError):
        admissibility_residual(AffineInKCurve(x0=1.0, theta=0.0), ExpSumKernel(terms=[(1.0, 1.0)]), 0.1,
                               Grid(horizon=1.0, n_steps=4))


JUMP_MEASURES = [
    AtomicJumps(atoms=[(1.0, 2.0), (0.5, 1.0)]),
    ExponentialJumps(mass=1.0, rate=2.0),
]
ARGUMENTS = [-1.0, -0.3 + 2.0j, 0.5 - 1.0j, 1.2 + 0.4j, 3.0j]


@pytest.mark.parametrize("nu", JUMP_MEASURES, ids=lambda nu: nu.type)
def test_jump_integral_is_bounded_by_second_moment(nu):
    for z in ARGUMENTS:
        bound = 0.5 * abs(z) ** 2 * nu.moment_bound(max(complex(z).real, 0.0))
        assert abs(jump_exp_integral(nu, z)) <= bound * (1 + 1e-12)


@pytest.mark.parametrize("nu", JUMP_MEASURES, ids=lambda nu: nu.type)
def test_jump_integral_derivative_matches_finite_differences(nu):
    step = 1e-5
    for z in (-1.0 + 0.0j, -0.3 + 2.0j, -2.0 - 1.5j, 3.0j):
        derivative = complex(nu.exp_integral_derivative(z))
        real_direction = (jump_exp_integral(nu, z + step) - jump_exp_integral(nu, z - step)) / (2 * step)
        imag_direction = (jump_exp_integral(nu, z + 1j * step) - jump_exp_integral(nu, z - 1j * step)) / (2j * step)
        # Cauchy-Riemann: both directions give the same complex derivative
        assert real_direction == pytest.approx(derivative, rel=1e-6, abs=1e-9)
        assert imag_direction == pytest.approx(derivative, rel=1e-6, abs=1e-9)


def test_exponential_jump_integral_value():
    assert jump_exp_integral(ExponentialJumps(mass=1.0, rate=2.0), -1.0) == pytest.approx(1.0 / 6.0, rel=1e-14)


def test_g0_eval_affine_in_fractional_kernel():
    curve = AffineInKCurve(x0=0.04, theta=0.5)
    assert g0_eval(curve, FractionalKernel(H=0.1), 1.0) == pytest.approx(0.04 + 0.5 / math.gamma(1.6), rel=1e-13)


@pytest.mark.parametrize(
    "curve",
    [
        AffineInKCurve(x0=0.04, theta=0.5),
        NonDecreasingTableCurve(times=(0.0, 1.0, 2.0), values=(0.1, 0.4, 0.4)),
        TabulatedCurve(times=(0.0, 0.5, 2.0), values=(1.0, 0.0, 0.3)),
    ],
    ids=lambda curve: curve.type,
)
def test_G0_is_non_decreasing(curve):
    t = np.linspace(0.0, 3.0, 301)
    values = curve.G0(t, FractionalKernel(H=0.1))
    assert values[0] == 0.0
    assert np.all(np.diff(values) >= 0.0)


def test_table_curve_G0_integral():
    # g0 = 1 + t on [0, 1], then 2
    curve = NonDecreasingTableCurve(times=(0.0, 1.0, 2.0), values=(1.0, 2.0, 2.0))
    t = np.array([0.0, 0.5, 1.0, 2.5])
    expected = [0.0, 0.125 + 0.125 / 6.0, 2.0 / 3.0, 2.0 / 3.0 + 4.5]
    assert np.allclose(curve.G0_integral(t), expected, rtol=1e-13, atol=1e-15)


def test_affine_curve_G0_integral_is_antiderivative():
    curve, kernel = AffineInKCurve(x0=0.04, theta=0.5), FractionalKernel(H=-0.2)
    t, step = 0.8, 1e-5
    slope = (curve.G0_integral(t + step, kernel) - curve.G0_integral(t - step, kernel)) / (2 * step)
    assert float(slope) == pytest.approx(float(curve.G0(t, kernel)), rel=1e-7)


def test_affine_curve_with_kernel_part_is_admissible_for_fractional_kernel():
    grid = Grid(horizon=1.0, n_steps=20)
    curve = AffineInKCurve(x0=0.04, theta=0.5)
    results = check_admissibility(curve, FractionalKernel(H=0.1), [0.1, 0.05], grid)
    assert all(r.admissible for r in results)
    assert all(np.isfinite(r.residual).all() for r in results)


def test_decreasing_table_is_not_admissible_for_fractional_kernel():
    grid = Grid(horizon=1.0, n_steps=20)
    curve = TabulatedCurve(times=(0.0, 1.0), values=(1.0, 0.0))
    result = admissibility_residual(curve, FractionalKernel(H=0.25), 0.1, grid)
    assert not result.admissible
    assert result.min_residual < -1e-3
