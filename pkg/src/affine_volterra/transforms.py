"""Exponential-affine transforms: general, Hawkes, hyper-rough Heston, pricing and Hawkes scaling"""

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import trapezoid

from src.affine_volterra.errors import NumericError, UnsupportedKernelError
from src.affine_volterra.kernels import (
    ConstantKernel,
    ExpSumKernel,
    Grid,
    KernelSpec,
    resolvent_second_kind,
)
from src.affine_volterra.model import (
    AffineInKCurve,
    AtomicJumps,
    CharTriplet,
    InputCurve,
    NoJumps,
)
from src.affine_volterra.riccati import (
    CoefficientCurve,
    ConstantCoefficient,
    PsiPath,
    RiccatiOptions,
    RiccatiSpec,
    TabulatedCoefficient,
    closed_form_exponent,
    constant,
    integrate_against,
    riccati_F_nodes,
    solve_riccati,
    solve_riccati_batch,
    transform_exponent,
)

if TYPE_CHECKING:
    from src.affine_volterra.simulate import PathBundle

logger = logging.getLogger(__name__)

# batched Riccati solves always use this chunk size so results do not depend on --threads
SOLVE_CHUNK = 64

Coefficient = Union[complex, float, CoefficientCurve]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class HestonModel(_Frozen):
    """log S_t = log S_0 - X_t/2 + M^S_t with d<M^S, M^c> = rho sqrt(c) dX"""
    S0: float = Field(1.0, gt=0)
    rho: float = Field(0.0, ge=-1, le=1)
    kernel: KernelSpec
    curve: InputCurve
    triplet: CharTriplet
    ignore_rho_without_diffusion: bool = False

    @model_validator(mode="after")
    def check_correlation(self):
        if self.triplet.c == 0 and self.rho != 0 and not self.ignore_rho_without_diffusion:
            raise ValueError("rho != 0 needs c > 0; set ignore_rho_without_diffusion to drop the correlation")
        return self


class PricingOptions(_Frozen):
    damping: float = Field(0.5, gt=0, lt=1)
    u_start: float = Field(16.0, gt=0)
    u_max: float = Field(512.0, gt=0)
    panel_width: float = Field(4.0, gt=0)
    nodes_per_panel: int = Field(16, ge=2)
    tolerance: float = Field(1e-9, gt=0)


@dataclass(frozen=True)
class ForwardCurve:
    """G_t(s) and dG_t/ds = g0(s) + g_t(s) sampled on the path grid for s in [t, T].

    cumulative[k] = int_t^{s_k} (G_t(r) - G_t(t)) dr, exact given the realised increments.
    """
    t: float
    times: np.ndarray
    values: np.ndarray
    density: np.ndarray
    cumulative: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"s": self.times, "G_t": self.values, "dG_t": self.density})


def _as_curve(value: Coefficient) -> CoefficientCurve:
    if isinstance(value, (ConstantCoefficient, TabulatedCoefficient)):
        return value
    return constant(value)


def _add_curves(a: CoefficientCurve, b: CoefficientCurve, nodes: np.ndarray) -> CoefficientCurve:
    if isinstance(a, ConstantCoefficient) and isinstance(b, ConstantCoefficient):
        return ConstantCoefficient(re=a.re + b.re, im=a.im + b.im)
    values = a.values(nodes) + b.values(nodes)
    return TabulatedCoefficient(times=tuple(nodes), re=tuple(values.real), im=tuple(values.imag))


# General transform

def fourier_laplace(
    f0: Coefficient,
    f1: Coefficient,
    f2: Coefficient,
    triplet: CharTriplet,
    kernel: KernelSpec,
    curve: InputCurve,
    T: float,
    options: RiccatiOptions = RiccatiOptions(),
) -> complex:
    """E[exp(int f0(T-s)dX + int f1(T-s)dM^c + int f2(T-s)dM^d)] at t = 0"""
    spec = RiccatiSpec(f0=_as_curve(f0), f1=_as_curve(f1), f2=_as_curve(f2), triplet=triplet)
    grid = Grid(horizon=T, n_steps=options.n_steps)
    psi = solve_riccati(spec, kernel, grid, options)
    return complex(np.exp(transform_exponent(psi, spec, curve, kernel)))


def conditional_exponent(forward: ForwardCurve, psi: PsiPath, spec: RiccatiSpec) -> complex:
    """int_t^T F(T-s, psi(T-s)) dG_t(s) with dG_t(s) = (g0 + g_t)(s) ds"""
    grid = psi.grid
    n_left = len(forward.times)
    if abs(forward.times[-1] - grid.horizon) > 1e-12 * grid.horizon or n_left > grid.n_steps + 1:
        raise ValueError("Forward curve and Riccati solution must share the horizon and grid")
    lags = grid.nodes[:n_left]
    f_values = riccati_F_nodes(spec, lags, psi.values[:n_left])
    total = forward.values[-1] - forward.values[0]
    return integrate_against(f_values, grid.dt, total, forward.cumulative[::-1])


def forward_curve_from_path(path: "PathBundle", kernel: KernelSpec, curve: InputCurve, t: float, T: float) -> ForwardCurve:
    """Adjusted curve G_t from the realised increments of Z up to t (left-point rule in r)"""
    if T <= t:
        raise ValueError(f"Forward curve needs s > t, got t={t}, T={T}")
    grid = path.grid
    if abs(T - grid.horizon) > 1e-12 * grid.horizon:
        raise ValueError("Forward curve horizon must match the path grid")
    k_t = int(round(t / grid.dt))
    if abs(k_t * grid.dt - t) > 1e-9 * max(grid.dt, 1.0):
        raise ValueError(f"t={t} is not a node of the path grid")

    nodes = grid.nodes
    times = nodes[k_t:]
    span = times - times[0]
    values = curve.G0(times, kernel).astype(float)
    density = curve.g0(times, kernel).astype(float)
    cumulative = (curve.G0_integral(times, kernel) - curve.G0_integral(times[0], kernel)
                  - span * values[0]).astype(float)
    if k_t > 0:
        left = nodes[:k_t]
        dz = path.dZ[:k_t]
        lag = np.subtract.outer(times, left)
        start = times[0] - left
        values = values + (kernel.integral(lag) - kernel.integral(start)) @ dz
        density = density + kernel.evaluate(lag) @ dz
        response = (kernel.double_integral(lag) - kernel.double_integral(start)
                    - np.multiply.outer(span, kernel.integral(start)))
        cumulative = cumulative + response @ dz
    return ForwardCurve(t=float(nodes[k_t]), times=times, values=values, density=density, cumulative=cumulative)


# Hawkes

def hawkes_riccati_spec(h0: Coefficient, h2: Coefficient, T: float, n_steps: int) -> RiccatiSpec:
    """(b, c, nu) = (1, 0, delta_1) with f0 = h0 + h2, f2 = h2, giving F = h0 + e^{h2+u} - 1"""
    h0, h2 = _as_curve(h0), _as_curve(h2)
    nodes = Grid(horizon=T, n_steps=n_steps).nodes
    triplet = CharTriplet(b=1.0, c=0.0, nu=AtomicJumps(atoms=[(1.0, 1.0)]))
    return RiccatiSpec(f0=_add_curves(h0, h2, nodes), f2=h2, triplet=triplet)


def hawkes_transform(
    h0: Coefficient,
    h2: Coefficient,
    g0: InputCurve,
    kernel: KernelSpec,
    T: float,
    options: RiccatiOptions = RiccatiOptions(),
) -> complex:
    """E[exp(int h0(T-s) lambda_s ds + int h2(T-s) dN_s)]"""
    spec = hawkes_riccati_spec(h0, h2, T, options.n_steps)
    psi = solve_riccati(spec, kernel, Grid(horizon=T, n_steps=options.n_steps), options)
    return complex(np.exp(transform_exponent(psi, spec, g0, kernel)))


def hawkes_mean_count(curve: InputCurve, kernel: KernelSpec, T: float, n_steps: int = 1024) -> float:
    """E[N_T] = G0(T) + int_0^T g0(T-u) Q(u) du with Q the integrated second-kind resolvent"""
    grid = Grid(horizon=T, n_steps=n_steps)
    q = resolvent_second_kind(kernel, grid).integral
    nodes = grid.nodes
    return float(curve.G0(T, kernel) + trapezoid(curve.g0(np.maximum(T - nodes, 0.0), kernel) * q, nodes))


def hawkes_scaling_kernels(lam: float, kappa: float, n: int) -> tuple[ExpSumKernel, ExpSumKernel]:
    """Prelimit Hawkes kernel a_n b_n e^{-b_n t} and the rescaled resolvent lam e^{-kappa t}.

    With a_n = n lam / (n lam + kappa) and b_n = lam + kappa / n the resolvent of the
    prelimit kernel is lam e^{-kappa t / n}, so n^{-2} int_0^{n.} lambda is driven by
    lam e^{-kappa t} for every n.
    """
    if lam <= 0 or kappa <= 0 or n < 1:
        raise ValueError("lam, kappa and n must be positive")
    weight = n * lam / (n * lam + kappa)
    rate = lam + kappa / n
    return ExpSumKernel(terms=[(weight * rate, rate)]), ExpSumKernel(terms=[(lam, kappa)])


def hawkes_prelimit_laplace(
    lam: float,
    kappa: float,
    mu: float,
    n: int,
    T: float,
    u: complex = -1.0,
    options: RiccatiOptions = RiccatiOptions(),
) -> complex:
    """E[exp(u X^n_T)] for X^n = n^{-2} int_0^{n.} lambda of the prelimit Hawkes process"""
    _, limit_kernel = hawkes_scaling_kernels(lam, kappa, n)
    triplet = CharTriplet(b=0.0, c=0.0, nu=AtomicJumps(atoms=[(1.0 / n, float(n) ** 2)]))
    curve = AffineInKCurve(x0=mu / n, theta=mu)
    return fourier_laplace(u, 0.0, 0.0, triplet, limit_kernel, curve, T, options)


def hawkes_limit_laplace(
    lam: float,
    kappa: float,
    mu: float,
    T: float,
    u: complex = -1.0,
    options: RiccatiOptions = RiccatiOptions(),
) -> complex:
    """Laplace transform of the square-root limit of the rescaled integrated intensity"""
    limit_kernel = ExpSumKernel(terms=[(lam, kappa)])
    triplet = CharTriplet(b=0.0, c=1.0, nu=NoJumps())
    return fourier_laplace(u, 0.0, 0.0, triplet, limit_kernel, AffineInKCurve(x0=0.0, theta=mu), T, options)


# Hyper-rough Heston

def heston_riccati_spec(model: HestonModel, h0: complex, h1: complex) -> RiccatiSpec:
    """F(u) = h0 + (h1^2 - h1)/2 + (b + rho sqrt(c) h1) u + c u^2/2 + J(u).

    The real part of rho sqrt(c) h1 goes into the drift shift and the imaginary part into
    f1 = i rho Im(h1) / sqrt(c), with f0 compensating c f1^2 / 2.
    """
    h0, h1 = complex(h0), complex(h1)
    c = model.triplet.c
    if c == 0:
        return RiccatiSpec(f0=constant(h0 + 0.5 * (h1 * h1 - h1)), triplet=model.triplet)
    rho, root = model.rho, math.sqrt(c)
    f0 = h0 + 0.5 * (h1 * h1 - h1) + 0.5 * rho**2 * h1.imag**2
    f1 = 1j * rho * h1.imag / root
    return RiccatiSpec(f0=constant(f0), f1=constant(f1), triplet=model.triplet,
                       rho_sqrt_c_shift=rho * root * h1.real)


def _check_heston_arguments(h0: complex, h1: complex):
    h0, h1 = complex(h0), complex(h1)
    if h0.real > 0:
        raise ValueError(f"Re(h0) must be <= 0, got {h0}")
    if not 0.0 <= h1.real <= 1.0:
        raise ValueError(f"Re(h1) must lie in [0, 1], got {h1}")


def _heston_exponent(model: HestonModel, psi: PsiPath, spec: RiccatiSpec) -> complex:
    if isinstance(model.curve, AffineInKCurve):
        return closed_form_exponent(psi, spec, model.curve, model.kernel)
    return transform_exponent(psi, spec, model.curve, model.kernel)


def _heston_chunk(model: HestonModel, h0: complex, h1_values: np.ndarray, grid: Grid, options: RiccatiOptions) -> np.ndarray:
    specs = [heston_riccati_spec(model, h0, h1) for h1 in h1_values]
    paths = solve_riccati_batch(specs, model.kernel, grid, options)
    exponents = np.array([_heston_exponent(model, psi, spec) for psi, spec in zip(paths, specs)])
    return np.exp(h1_values * math.log(model.S0) + exponents)


def heston_joint_transforms(
    model: HestonModel,
    h0: complex,
    h1_values: Sequence[complex],
    T: float,
    options: RiccatiOptions = RiccatiOptions(),
    threads: int = 1,
) -> np.ndarray:
    """E[exp(h0 X_T + h1 log S_T)] for many h1 at once"""
    h1_values = np.asarray(h1_values, dtype=complex).ravel()
    for h1 in h1_values:
        _check_heston_arguments(h0, h1)
    grid = Grid(horizon=T, n_steps=options.n_steps)
    chunks = [h1_values[i:i + SOLVE_CHUNK] for i in range(0, len(h1_values), SOLVE_CHUNK)]
    results = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_heston_chunk)(model, h0, chunk, grid, options) for chunk in chunks
    )
    return np.concatenate(results) if results else np.zeros(0, dtype=complex)


def heston_joint_transform(
    model: HestonModel,
    h0: complex,
    h1: complex,
    T: float,
    options: RiccatiOptions = RiccatiOptions(),
) -> complex:
    return complex(heston_joint_transforms(model, h0, [h1], T, options)[0])


def heston_cf_logprice(model: HestonModel, v: float, T: float, options: RiccatiOptions = RiccatiOptions()) -> complex:
    """E[exp(i v log S_T)]"""
    return heston_joint_transform(model, 0.0, 1j * v, T, options)


def heston_cf_sweep(
    model: HestonModel,
    v_values: Sequence[float],
    T: float,
    options: RiccatiOptions = RiccatiOptions(),
    threads: int = 1,
) -> np.ndarray:
    """Characteristic function of log S_T on many arguments; negative v reuse the conjugate of |v|"""
    v_values = np.asarray(v_values, dtype=float)
    magnitudes, inverse = np.unique(np.abs(v_values), return_inverse=True)
    values = heston_joint_transforms(model, 0.0, 1j * magnitudes, T, options, threads)[inverse]
    logger.info(f"Heston cf sweep over {len(v_values)} arguments ({len(magnitudes)} solves), T={T}")
    return np.where(v_values < 0, np.conj(values), values)


def classical_heston_cf(model: HestonModel, v, T: float) -> np.ndarray:
    """Closed-form classical Heston cf of log S_T ("little trap" branch) for a constant kernel"""
    if not isinstance(model.kernel, ConstantKernel) or model.kernel.value != 1.0:
        raise UnsupportedKernelError("Classical Heston needs the constant kernel K = 1")
    if not isinstance(model.curve, AffineInKCurve) or not isinstance(model.triplet.nu, NoJumps):
        raise UnsupportedKernelError("Classical Heston needs an affine-in-K curve and no jumps")
    if model.triplet.c <= 0:
        raise UnsupportedKernelError("Classical Heston needs c > 0")

    u = np.asarray(v, dtype=float)
    kappa, sigma = -model.triplet.b, math.sqrt(model.triplet.c)
    kappa_theta, v0, rho = model.curve.theta, model.curve.x0, model.rho
    drift = kappa - rho * sigma * 1j * u
    d = np.sqrt(drift**2 + sigma**2 * (1j * u + u**2))
    g = (drift - d) / (drift + d)
    decay = np.exp(-d * T)
    exponent = (kappa_theta / sigma**2 * ((drift - d) * T - 2.0 * np.log((1.0 - g * decay) / (1.0 - g)))
                + v0 / sigma**2 * (drift - d) * (1.0 - decay) / (1.0 - g * decay))
    return np.exp(1j * u * math.log(model.S0) + exponent)


# Pricing

def _lewis_integrand(moments: np.ndarray, u: np.ndarray, log_strikes: np.ndarray, damping: float) -> np.ndarray:
    z = damping + 1j * u
    payoff = np.exp(np.multiply.outer(log_strikes, 1.0 - z)) / (z * (1.0 - z))
    return (moments * payoff).real


def price_european_calls(
    model: HestonModel,
    strikes: Sequence[float],
    T: float,
    pricing: PricingOptions = PricingOptions(),
    options: RiccatiOptions = RiccatiOptions(),
    threads: int = 1,
) -> np.ndarray:
    """C(K) = S0 - (1/pi) int_0^inf Re[E[S_T^z] K^{1-z} / (z(1-z))] du with z = damping + iu"""
    strikes = np.asarray(strikes, dtype=float)
    if np.any(strikes <= 0):
        raise ValueError("strikes must be positive")
    log_strikes = np.log(strikes)
    a = pricing.damping

    upper = pricing.u_start
    while True:
        tail_moment = heston_joint_transforms(model, 0.0, [a + 1j * upper], T, options)
        tail = float(np.max(np.abs(_lewis_integrand(tail_moment, np.array([upper]), log_strikes, a))))
        tail = max(tail, float(np.abs(tail_moment[0]) * np.max(strikes) ** (1 - a) / upper**2))
        if tail * upper < pricing.tolerance * model.S0:
            break
        if upper >= pricing.u_max:
            raise NumericError(f"Pricing integrand tail {tail * upper:.3e} above tolerance at u_max={pricing.u_max}")
        upper = min(2.0 * upper, pricing.u_max)

    n_panels = max(1, int(math.ceil(upper / pricing.panel_width)))
    x, w = np.polynomial.legendre.leggauss(pricing.nodes_per_panel)
    edges = np.linspace(0.0, upper, n_panels + 1)
    half = 0.5 * np.diff(edges)
    u_nodes = (0.5 * (edges[:-1] + edges[1:])[:, None] + half[:, None] * x).ravel()
    u_weights = (half[:, None] * w).ravel()

    moments = heston_joint_transforms(model, 0.0, a + 1j * u_nodes, T, options, threads)
    integral = _lewis_integrand(moments, u_nodes, log_strikes, a) @ u_weights
    prices = model.S0 - integral / math.pi
    logger.info(f"Priced {len(strikes)} call(s), T={T}, contour Re z={a}, u in [0, {upper:g}], {u_nodes.size} nodes")
    return np.clip(prices, np.maximum(model.S0 - strikes, 0.0), model.S0)


def price_european_call(
    model: HestonModel,
    strike: float,
    T: float,
    pricing: PricingOptions = PricingOptions(),
    options: RiccatiOptions = RiccatiOptions(),
) -> float:
    return float(price_european_calls(model, [strike], T, pricing, options)[0])


def price_european_put(
    model: HestonModel,
    strike: float,
    T: float,
    pricing: PricingOptions = PricingOptions(),
    options: RiccatiOptions = RiccatiOptions(),
) -> float:
    """Put-call parity with zero rates: P = C - S0 + K"""
    return price_european_call(model, strike, T, pricing, options) - model.S0 + strike
