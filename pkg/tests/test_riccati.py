import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.affine_volterra.errors import BlowUpError, UnsupportedKernelError
from src.affine_volterra.kernels import ConstantKernel, ExpSumKernel, FractionalKernel, Grid
from src.affine_volterra.model import (
    AffineInKCurve,
    AtomicJumps,
    CharTriplet,
    ExponentialJumps,
    NoJumps,
    NonDecreasingTableCurve,
)
from src.affine_volterra.riccati import (
    RiccatiOptions,
    RiccatiSpec,
    TabulatedCoefficient,
    check_sign_condition,
    closed_form_exponent,
    constant,
    riccati_F,
    solve_riccati,
    solve_riccati_batch,
    transform_exponent,
)

DIFFUSION = CharTriplet(b=0.0, c=1.0)


@pytest.fixture
def grid():
    return Grid(horizon=1.0, n_steps=512)


def test_F_with_atomic_jumps():
    triplet = CharTriplet(b=0.5, c=0.2, nu=AtomicJumps(atoms=[(1.0, 2.0)]))
    spec = RiccatiSpec(f0=constant(-0.1), f1=constant(0.3j), f2=constant(0.2), triplet=triplet)
    u = -0.4 + 0.1j
    f1 = 0.3j
    expected = (-0.1 + 0.5 * 0.2 * f1**2 + (0.5 + 0.2 * f1) * u + 0.5 * 0.2 * u**2
                + 2.0 * (np.exp(0.2 + u) - 1.0 - (0.2 + u)))
    assert riccati_F(spec, 0.3, u) == pytest.approx(expected)


def test_tabulated_coefficient_validation():
    with pytest.raises(ValidationError):
        TabulatedCoefficient(times=(0.0, 1.0), re=(0.0,), im=(0.0, 0.0))
    with pytest.raises(ValidationError):
        TabulatedCoefficient(times=(1.0, 0.0), re=(0.0, 0.0), im=(0.0, 0.0))
    curve = TabulatedCoefficient(times=(0.0, 1.0), re=(0.0, 2.0), im=(1.0, 1.0))
    assert curve.values(0.5) == pytest.approx(1.0 + 1.0j)
    assert curve.values(3.0) == pytest.approx(2.0 + 1.0j)


def test_constant_forcing_is_exact_for_fractional_kernel(grid):
    # F = f0 gives psi = f0 * int_0^t K
    kernel = FractionalKernel(H=-0.2)
    spec = RiccatiSpec(f0=constant(-0.5 + 1j), triplet=CharTriplet(b=0.0, c=0.0))
    psi = solve_riccati(spec, kernel, grid)
    assert psi.values[0] == 0
    assert np.allclose(psi.values, (-0.5 + 1j) * kernel.integral(grid.nodes), atol=1e-12)


def test_linear_equation_with_exponential_kernel(grid):
    # psi = int e^{-2(t-s)} (-1) ds
    spec = RiccatiSpec(f0=constant(-1.0), triplet=CharTriplet(b=0.0, c=0.0))
    psi = solve_riccati(spec, ExpSumKernel(terms=[(1.0, 2.0)]), grid)
    assert np.allclose(psi.values.real, -(1.0 - np.exp(-2.0 * grid.nodes)) / 2.0, atol=1e-12)


def test_quadratic_equation_with_constant_kernel(grid):
    # psi' = -1 + psi^2/2 has psi = -sqrt(2) tanh(t / sqrt(2))
    spec = RiccatiSpec(f0=constant(-1.0), triplet=DIFFUSION)
    psi = solve_riccati(spec, ConstantKernel(value=1.0), grid)
    expected = -math.sqrt(2.0) * np.tanh(grid.nodes / math.sqrt(2.0))
    assert np.allclose(psi.values.real, expected, atol=1e-5)
    assert np.allclose(psi.values.imag, 0.0)


def test_linear_drift_with_constant_kernel(grid):
    spec = RiccatiSpec(f0=constant(-1.0), triplet=CharTriplet(b=-1.0, c=0.0))
    psi = solve_riccati(spec, ConstantKernel(value=1.0), grid)
    assert np.allclose(psi.values.real, np.exp(-grid.nodes) - 1.0, atol=1e-5)


def test_sign_condition_keeps_real_part_nonpositive():
    grid = Grid(horizon=2.0, n_steps=400)
    triplet = CharTriplet(b=-0.5, c=0.5)
    rng = np.random.default_rng(3)
    for _ in range(5):
        f0 = complex(-rng.uniform(0.1, 1.0), rng.uniform(-5.0, 5.0))
        spec = RiccatiSpec(f0=constant(f0), triplet=triplet)
        assert check_sign_condition(spec, grid)
        psi = solve_riccati(spec, FractionalKernel(H=0.1), grid)
        assert not psi.blowup
        assert np.max(psi.values.real) <= 1e-8


def random_triplet(rng) -> CharTriplet:
    kind = rng.integers(3)
    if kind == 0:
        nu = NoJumps()
    elif kind == 1:
        nu = AtomicJumps(atoms=[(rng.uniform(0.1, 1.0), rng.uniform(0.1, 2.0))])
    else:
        nu = ExponentialJumps(mass=rng.uniform(0.1, 2.0), rate=rng.uniform(1.0, 5.0))
    return CharTriplet(b=rng.uniform(-2.0, 0.5), c=rng.uniform(0.0, 1.0), nu=nu)


def test_sign_condition_holds_for_random_specs():
    grid = Grid(horizon=1.0, n_steps=200)
    kernel = FractionalKernel(H=0.1)
    rng = np.random.default_rng(2024)
    for _ in range(100):
        spec = RiccatiSpec(
            f0=constant(complex(-rng.uniform(0.05, 1.0), rng.uniform(-5.0, 5.0))),
            f1=constant(1j * rng.uniform(-2.0, 2.0)),
            f2=constant(1j * rng.uniform(-2.0, 2.0)),
            triplet=random_triplet(rng),
        )
        assert check_sign_condition(spec, grid)
        psi = solve_riccati(spec, kernel, grid)
        assert not psi.blowup
        assert np.max(psi.values.real) <= 1e-8, spec


def test_clip_leaves_admissible_solutions_alone(grid):
    spec = RiccatiSpec(f0=constant(-0.3 + 2j), triplet=CharTriplet(b=-0.5, c=0.4))
    kernel = FractionalKernel(H=0.1)
    plain = solve_riccati(spec, kernel, grid)
    clipped = solve_riccati(spec, kernel, grid, RiccatiOptions(clip=True))
    assert np.allclose(clipped.values, plain.values, rtol=0.0, atol=1e-12)


def test_clip_freezes_real_part_at_zero():
    # F(u) = 1/2 + u^2/2 gives psi = tan(t/2); clipped, F stays 1/2 for real u >= 0
    grid = Grid(horizon=1.0, n_steps=256)
    spec = RiccatiSpec(f0=constant(0.5), triplet=DIFFUSION)
    kernel = ConstantKernel(value=1.0)
    clipped = solve_riccati(spec, kernel, grid, RiccatiOptions(clip=True))
    assert np.allclose(clipped.values, 0.5 * grid.nodes, atol=1e-12)
    plain = solve_riccati(spec, kernel, grid)
    assert plain.values[-1].real == pytest.approx(math.tan(0.5), rel=1e-4)


def test_drift_shift_adds_to_b():
    u = -0.1 + 0.4j
    shifted = RiccatiSpec(f0=constant(-0.2), rho_sqrt_c_shift=0.3, triplet=CharTriplet(b=-0.5, c=0.2))
    plain = RiccatiSpec(f0=constant(-0.2), triplet=CharTriplet(b=-0.2, c=0.2))
    assert riccati_F(shifted, 0.0, u) == pytest.approx(riccati_F(plain, 0.0, u), rel=1e-14)


def test_sign_condition_detection(grid):
    assert not check_sign_condition(RiccatiSpec(f0=constant(0.1), triplet=DIFFUSION), grid)
    assert not check_sign_condition(RiccatiSpec(f2=constant(0.1), triplet=DIFFUSION), grid)


def test_blowup_is_reported_not_raised():
    # psi' = 1 + psi^2/2 explodes at t = pi / sqrt(2)
    grid = Grid(horizon=3.0, n_steps=600)
    spec = RiccatiSpec(f0=constant(1.0), triplet=DIFFUSION)
    psi = solve_riccati(spec, ConstantKernel(value=1.0), grid)
    assert psi.blowup
    assert 2.0 < grid.nodes[psi.blowup_node] < 2.4
    assert np.all(np.isnan(psi.values[psi.blowup_node:]))
    with pytest.raises(BlowUpError):
        transform_exponent(psi, spec, AffineInKCurve(x0=1.0, theta=0.0), ConstantKernel(value=1.0))


def test_batch_matches_single_solves(grid):
    kernel = FractionalKernel(H=0.1)
    specs = [RiccatiSpec(f0=constant(complex(-0.2, w)), rho_sqrt_c_shift=shift, triplet=DIFFUSION)
             for w, shift in ((0.5, 0.0), (1.0, -0.3), (3.0, 0.2))]
    batch = solve_riccati_batch(specs, kernel, grid)
    for spec, psi in zip(specs, batch):
        assert np.allclose(psi.values, solve_riccati(spec, kernel, grid).values, rtol=1e-13, atol=1e-15)


def test_batch_needs_common_triplet(grid):
    specs = [RiccatiSpec(triplet=DIFFUSION), RiccatiSpec(triplet=CharTriplet(b=1.0, c=0.0))]
    with pytest.raises(ValueError):
        solve_riccati_batch(specs, ConstantKernel(value=1.0), grid)


@pytest.mark.parametrize("kernel", [ConstantKernel(value=1.0), FractionalKernel(H=0.1), FractionalKernel(H=-0.2)])
def test_exponents_agree_for_affine_curves(grid, kernel):
    spec = RiccatiSpec(f0=constant(-0.3 + 0.7j), triplet=CharTriplet(b=-0.5, c=0.3))
    curve = AffineInKCurve(x0=0.04, theta=0.5)
    psi = solve_riccati(spec, kernel, grid)
    closed = closed_form_exponent(psi, spec, curve, kernel)
    assert transform_exponent(psi, spec, curve, kernel) == pytest.approx(closed, rel=1e-8)
    # the node trapezoid for int psi loses accuracy next to a singular kernel
    assert closed_form_exponent(psi, spec, curve) == pytest.approx(closed, rel=1e-3)


def test_table_curve_exponent_matches_affine_curve(grid):
    # g0(t) = 1 + t on [0, 1] both ways
    spec = RiccatiSpec(f0=constant(-0.3 + 0.7j), triplet=CharTriplet(b=-0.5, c=0.3))
    kernel = ConstantKernel(value=1.0)
    psi = solve_riccati(spec, kernel, grid)
    table = NonDecreasingTableCurve(times=(0.0, 1.0), values=(1.0, 2.0))
    affine = AffineInKCurve(x0=1.0, theta=1.0)
    expected = transform_exponent(psi, spec, affine, kernel)
    assert transform_exponent(psi, spec, table, kernel) == pytest.approx(expected, rel=1e-10)


def test_closed_form_exponent_needs_affine_curve(grid):
    spec = RiccatiSpec(f0=constant(-1.0), triplet=DIFFUSION)
    psi = solve_riccati(spec, ConstantKernel(value=1.0), grid, RiccatiOptions(n_steps=grid.n_steps))
    curve = NonDecreasingTableCurve(times=(0.0, 1.0), values=(1.0, 2.0))
    with pytest.raises(UnsupportedKernelError):
        closed_form_exponent(psi, spec, curve)
    assert np.isfinite(transform_exponent(psi, spec, curve, ConstantKernel(value=1.0)))


def test_psi_frame(grid):
    psi = solve_riccati(RiccatiSpec(triplet=DIFFUSION), ConstantKernel(value=1.0), grid)
    frame = psi.to_frame()
    assert list(frame.columns) == ["t", "re_psi", "im_psi"]
    assert (frame["re_psi"] == 0).all()
