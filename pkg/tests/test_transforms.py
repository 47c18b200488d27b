import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import norm

from src.affine_volterra.errors import UnsupportedKernelError
from src.affine_volterra.kernels import ConstantKernel, ExpSumKernel, FractionalKernel, Grid
from src.affine_volterra.model import AffineInKCurve, CharTriplet
from src.affine_volterra.riccati import (
    RiccatiOptions,
    RiccatiSpec,
    constant,
    riccati_F,
    solve_riccati,
    transform_exponent,
)
from src.affine_volterra.simulate import PathBundle, SimulationOptions, hawkes_population, path_functional
from src.affine_volterra.transforms import (
    HestonModel,
    classical_heston_cf,
    conditional_exponent,
    forward_curve_from_path,
    fourier_laplace,
    hawkes_limit_laplace,
    hawkes_mean_count,
    hawkes_prelimit_laplace,
    hawkes_riccati_spec,
    hawkes_transform,
    heston_cf_sweep,
    heston_joint_transform,
    heston_riccati_spec,
    price_european_call,
    price_european_calls,
    price_european_put,
)


@pytest.fixture
def heston():
    return HestonModel(
        S0=1.0,
        rho=-0.7,
        kernel=ConstantKernel(value=1.0),
        curve=AffineInKCurve(x0=0.04, theta=0.04),
        triplet=CharTriplet(b=-1.0, c=0.09),
    )


def black_scholes_call(S0, K, sigma, T):
    d1 = (math.log(S0 / K) + 0.5 * sigma**2 * T) / (sigma * math.sqrt(T))
    return S0 * norm.cdf(d1) - K * norm.cdf(d1 - sigma * math.sqrt(T))


def test_classical_heston_reference(heston):
    v = np.array([0.5, 1.0, 2.0, 4.0])
    values = heston_cf_sweep(heston, v, 1.0, RiccatiOptions(n_steps=1024))
    assert np.max(np.abs(values - classical_heston_cf(heston, v, 1.0))) < 1e-5


def test_cf_is_hermitian_and_bounded(heston):
    values = heston_cf_sweep(heston, [-2.0, 0.0, 2.0], 1.0, RiccatiOptions(n_steps=128))
    assert values[0] == np.conj(values[2])
    assert values[1] == pytest.approx(1.0)
    assert np.all(np.abs(values) <= 1.0 + 1e-12)


def test_cf_sweep_does_not_depend_on_threads(heston):
    v = np.linspace(0.1, 20.0, 130)
    options = RiccatiOptions(n_steps=32)
    assert np.array_equal(heston_cf_sweep(heston, v, 1.0, options, threads=1),
                          heston_cf_sweep(heston, v, 1.0, options, threads=2))


def test_martingale_property():
    model = HestonModel(S0=100.0, rho=-0.5, kernel=FractionalKernel(H=0.1, scale=0.5),
                        curve=AffineInKCurve(x0=0.04, theta=0.02), triplet=CharTriplet(b=-0.3, c=0.1))
    assert abs(heston_joint_transform(model, 0.0, 1.0, 1.0, RiccatiOptions(n_steps=128)) - 100.0) <= 1e-10


def test_heston_argument_checks(heston):
    with pytest.raises(ValueError):
        heston_joint_transform(heston, 0.5, 0.5, 1.0)
    with pytest.raises(ValueError):
        heston_joint_transform(heston, 0.0, 1.5, 1.0)


def test_correlation_needs_diffusion():
    kwargs = dict(rho=-0.5, kernel=ConstantKernel(value=1.0), curve=AffineInKCurve(x0=0.04, theta=0.0),
                  triplet=CharTriplet(b=0.0, c=0.0))
    with pytest.raises(ValidationError):
        HestonModel(**kwargs)
    model = HestonModel(ignore_rho_without_diffusion=True, **kwargs)
    assert heston_joint_transform(model, 0.0, 1.0, 1.0) == pytest.approx(1.0)


def test_classical_reference_needs_constant_kernel():
    model = HestonModel(kernel=FractionalKernel(H=0.1), curve=AffineInKCurve(x0=0.04, theta=0.0),
                        triplet=CharTriplet(b=-1.0, c=0.09))
    with pytest.raises(UnsupportedKernelError):
        classical_heston_cf(model, [1.0], 1.0)


def test_prices_match_black_scholes_for_constant_variance():
    # c = 0 and b = 0 freeze the variance at x0
    model = HestonModel(S0=1.0, kernel=ConstantKernel(value=1.0), curve=AffineInKCurve(x0=0.04, theta=0.0),
                        triplet=CharTriplet(b=0.0, c=0.0))
    strikes = [0.9, 1.0, 1.1]
    prices = price_european_calls(model, strikes, 1.0, options=RiccatiOptions(n_steps=16))
    expected = [black_scholes_call(1.0, k, 0.2, 1.0) for k in strikes]
    assert np.allclose(prices, expected, atol=1e-6)


def test_put_call_parity(heston):
    options = RiccatiOptions(n_steps=128)
    call = price_european_call(heston, 1.05, 0.5, options=options)
    put = price_european_put(heston, 1.05, 0.5, options=options)
    assert put == pytest.approx(call - 1.0 + 1.05, abs=1e-14)
    assert max(0.0, 1.0 - 1.05) <= call <= 1.0


def test_poisson_transform():
    # zero kernel: N_T is Poisson with mean mu T
    curve = AffineInKCurve(x0=2.0, theta=0.0)
    a = 0.7
    value = hawkes_transform(0.0, 1j * a, curve, ExpSumKernel(), 1.5, RiccatiOptions(n_steps=64))
    assert value == pytest.approx(np.exp(2.0 * 1.5 * (np.exp(1j * a) - 1.0)), abs=1e-12)


def test_hawkes_mean_count_exponential_kernel():
    alpha, beta, mu, T = 0.5, 1.5, 1.0, 2.0
    gap = beta - alpha
    expected = mu * T + mu * alpha / gap * (T - (1.0 - math.exp(-gap * T)) / gap)
    count = hawkes_mean_count(AffineInKCurve(x0=mu, theta=0.0), ExpSumKernel(terms=[(alpha, beta)]), T)
    assert count == pytest.approx(expected, rel=1e-4)


def test_hawkes_scaling_converges():
    options = RiccatiOptions(n_steps=256)
    limit = hawkes_limit_laplace(1.0, 1.0, 1.0, 1.0, options=options)
    assert 0.0 < limit.real < 1.0
    errors = [abs(hawkes_prelimit_laplace(1.0, 1.0, 1.0, n, 1.0, options=options) - limit) for n in (4, 16, 64)]
    assert errors[0] > errors[1] > errors[2]


def test_fourier_laplace_of_zero_functional():
    value = fourier_laplace(0.0, 0.0, 0.0, CharTriplet(b=-1.0, c=0.5), FractionalKernel(H=0.1),
                            AffineInKCurve(x0=0.1, theta=0.1), 1.0, RiccatiOptions(n_steps=32))
    assert value == 1.0


def quiet_path(grid, dz_first_cell=0.0):
    n = grid.n_steps
    mc = np.zeros(n + 1)
    mc[1:] = dz_first_cell
    return PathBundle(grid=grid, X=np.zeros(n + 1), Mc=mc, jump_sum=np.zeros(n), m1=0.0, b=0.0)


def test_forward_curve_without_noise_is_initial_curve():
    grid = Grid(horizon=1.0, n_steps=10)
    kernel, curve = FractionalKernel(H=0.1), AffineInKCurve(x0=0.3, theta=0.2)
    forward = forward_curve_from_path(quiet_path(grid), kernel, curve, 0.4, 1.0)
    assert forward.t == pytest.approx(0.4)
    assert np.allclose(forward.values, curve.G0(grid.nodes[4:], kernel))
    assert np.allclose(forward.density, curve.g0(grid.nodes[4:], kernel))


def test_forward_curve_adds_kernel_response():
    # one unit increment of Z in the first cell with K = 1 adds s - t to G_t(s)
    grid = Grid(horizon=1.0, n_steps=10)
    kernel, curve = ConstantKernel(value=1.0), AffineInKCurve(x0=1.0, theta=0.0)
    forward = forward_curve_from_path(quiet_path(grid, 1.0), kernel, curve, 0.5, 1.0)
    s = grid.nodes[5:]
    assert np.allclose(forward.values, 2.0 * s - 0.5)
    assert np.allclose(forward.density, 2.0)
    assert np.allclose(forward.cumulative, (s - 0.5) ** 2)
    assert list(forward.to_frame().columns) == ["s", "G_t", "dG_t"]


def test_forward_curve_validation():
    grid = Grid(horizon=1.0, n_steps=10)
    kernel, curve = ConstantKernel(value=1.0), AffineInKCurve(x0=1.0, theta=0.0)
    with pytest.raises(ValueError):
        forward_curve_from_path(quiet_path(grid), kernel, curve, 1.0, 1.0)
    with pytest.raises(ValueError):
        forward_curve_from_path(quiet_path(grid), kernel, curve, 0.35, 1.0)


def test_conditional_exponent_at_time_zero_is_unconditional():
    grid = Grid(horizon=1.0, n_steps=64)
    kernel, curve = FractionalKernel(H=0.2), AffineInKCurve(x0=0.05, theta=0.1)
    spec = RiccatiSpec(f0=constant(-0.2 + 0.5j), triplet=CharTriplet(b=-0.4, c=0.2))
    psi = solve_riccati(spec, kernel, grid)
    forward = forward_curve_from_path(quiet_path(grid), kernel, curve, 0.0, 1.0)
    expected = transform_exponent(psi, spec, curve, kernel)
    assert conditional_exponent(forward, psi, spec) == pytest.approx(expected, abs=1e-12)


def test_conditional_transform_satisfies_tower_property():
    # E[exp(R_{0,T})] = E[exp(R_{0,t}) E[exp(R_{t,T}) | F_t]] along simulated Hawkes paths
    T, t, a = 2.0, 1.0, 1.0
    grid = Grid(horizon=T, n_steps=200)
    kernel, curve = ExpSumKernel(terms=[(0.5, 1.5)]), AffineInKCurve(x0=1.0, theta=0.0)
    options = RiccatiOptions(n_steps=grid.n_steps)
    spec = hawkes_riccati_spec(0.0, 1j * a, T, grid.n_steps)
    psi = solve_riccati(spec, kernel, grid, options)
    population = hawkes_population(curve, kernel, grid, SimulationOptions(seed=5, n_paths=4000, batch_size=1000))

    samples = []
    for batch in population.batches():
        head = path_functional(batch, spec.f0, spec.f1, spec.f2, until=t)
        tail = np.array([
            conditional_exponent(forward_curve_from_path(batch.path(i), kernel, curve, t, T), psi, spec)
            for i in range(batch.n_paths)
        ])
        samples.append(np.exp(head + tail))
    samples = np.concatenate(samples)

    mean = samples.mean()
    std_error = math.sqrt(np.mean(np.abs(samples - mean) ** 2) / len(samples))
    expected = hawkes_transform(0.0, 1j * a, curve, kernel, T, options)
    assert abs(mean - expected) <= 4.0 * std_error


def test_heston_spec_carries_correlation_in_the_drift(heston):
    h0, h1, u = -0.1 + 0.2j, 0.3 + 2.0j, -0.2 + 0.5j
    spec = heston_riccati_spec(heston, h0, h1)
    b, c, rho = heston.triplet.b, heston.triplet.c, heston.rho
    expected = h0 + 0.5 * (h1**2 - h1) + (b + rho * math.sqrt(c) * h1) * u + 0.5 * c * u**2
    assert riccati_F(spec, 0.0, u) == pytest.approx(expected, rel=1e-13)
    assert spec.rho_sqrt_c_shift == pytest.approx(rho * math.sqrt(c) * 0.3)


def test_heston_spec_without_diffusion():
    model = HestonModel(S0=1.0, rho=0.0, kernel=ConstantKernel(value=1.0),
                        curve=AffineInKCurve(x0=0.04, theta=0.0), triplet=CharTriplet(b=-1.0, c=0.0))
    h1, u = 0.5 + 1.0j, -0.3 + 0.1j
    spec = heston_riccati_spec(model, 0.0, h1)
    assert spec.rho_sqrt_c_shift == 0.0
    assert riccati_F(spec, 0.0, u) == pytest.approx(0.5 * (h1**2 - h1) - u)
