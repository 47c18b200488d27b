"""Convolution kernels, product-integration weights, resolvents and the Mittag-Leffler function"""

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Callable, Literal, Optional, Union

import joblib
import mpmath
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, field_validator
from scipy import integrate, optimize, special

from src.affine_volterra.errors import KernelDomainError, NumericError, UnsupportedKernelError

logger = logging.getLogger(__name__)

ML_TOLERANCE = 1e-12
ML_TERM_BUDGET = 10_000
ML_MAX_ABS_Z = 50.0
FIRST_KIND_RESIDUAL_LIMIT = 1e-2
_EPS = np.finfo(float).eps


class Grid(BaseModel):
    """Uniform time grid t_k = k*T/n_steps"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    horizon: float = Field(..., gt=0)
    n_steps: int = Field(..., gt=0)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def refine(self, factor: int = 2) -> "Grid":
        return Grid(horizon=self.horizon, n_steps=self.n_steps * factor)


def _as_times(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise KernelDomainError(f"Kernel evaluated at negative time {float(np.min(t))}")
    return t


def _phi1(x: np.ndarray) -> np.ndarray:
    """(1 - e^{-x}) / x, continuous at 0"""
    x = np.asarray(x, dtype=float)
    safe = np.where(x == 0.0, 1.0, x)
    return np.where(x == 0.0, 1.0, -np.expm1(-safe) / safe)


def _phi2(x: np.ndarray) -> np.ndarray:
    """(1 - e^{-x}(1 + x)) / x^2, continuous at 0"""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 0.1
    safe = np.where(small, 1.0, x)
    direct = (-np.expm1(-safe) - safe * np.exp(-safe)) / safe**2
    series = np.zeros_like(x)
    for n in range(12, 1, -1):
        series = series * x + (-1) ** n * (n - 1) / math.factorial(n)
    return np.where(small, series, direct)


def _phi3(x: np.ndarray) -> np.ndarray:
    """(1 - e^{-x}(1 + x + x^2/2)) / x^3, continuous at 0"""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 0.5
    safe = np.where(small, 1.0, x)
    direct = (-np.expm1(-safe) - np.exp(-safe) * (safe + 0.5 * safe**2)) / safe**3
    series = np.zeros_like(x)
    for k in range(16, -1, -1):
        series = series * (-x) + 1.0 / (2.0 * math.factorial(k) * (k + 3))
    return np.where(small, series, direct)


class _KernelBase(BaseModel):
    """Common interface: pointwise values and exact antiderivatives"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    def __call__(self, t):
        return self.evaluate(t)

    def evaluate(self, t) -> np.ndarray:
        raise NotImplementedError

    def integral(self, t) -> np.ndarray:
        """int_0^t K(u) du"""
        raise NotImplementedError

    def first_moment(self, t) -> np.ndarray:
        """int_0^t u K(u) du"""
        raise NotImplementedError

    def second_moment(self, t) -> np.ndarray:
        """int_0^t u^2 K(u) du"""
        raise NotImplementedError

    def double_integral(self, t) -> np.ndarray:
        """int_0^t int_0^s K(u) du ds"""
        t = _as_times(t)
        return t * self.integral(t) - self.first_moment(t)

    def triple_integral(self, t) -> np.ndarray:
        """int_0^t (t - u)^2 / 2 K(u) du, i.e. the antiderivative of double_integral"""
        t = _as_times(t)
        return 0.5 * t**2 * self.integral(t) - t * self.first_moment(t) + 0.5 * self.second_moment(t)

    def cell_weights(self, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cell integrals of K and of (u - left edge) K over consecutive edges"""
        edges = _as_times(edges)
        cell = np.diff(self.integral(edges))
        moment = np.diff(self.first_moment(edges)) - edges[:-1] * cell
        return cell, moment

    @property
    def is_bounded_at_zero(self) -> bool:
        return True

    def value_at_zero(self) -> float:
        if not self.is_bounded_at_zero:
            raise KernelDomainError(f"{self.type} kernel is singular at 0")
        return float(self.evaluate(0.0))

    def l1_norm(self, horizon: float) -> float:
        return float(self.integral(horizon))

    @property
    def label(self) -> str:
        return self.type


class FractionalKernel(_KernelBase):
    """scale * t^{H-1/2} / Gamma(H+1/2)"""
    type: Literal["fractional"] = "fractional"
    H: float = Field(..., gt=-0.5, le=0.5)
    scale: float = Field(1.0, gt=0)

    @property
    def alpha(self) -> float:
        return self.H + 0.5

    @property
    def is_bounded_at_zero(self) -> bool:
        return self.alpha == 1.0

    def evaluate(self, t) -> np.ndarray:
        t = _as_times(t)
        if self.alpha == 1.0:
            return np.full_like(t, self.scale)
        if np.any(t == 0):
            raise KernelDomainError(f"Fractional kernel with H={self.H} is singular at t=0")
        return self.scale * t ** (self.alpha - 1.0) * special.rgamma(self.alpha)

    def integral(self, t) -> np.ndarray:
        t = _as_times(t)
        return self.scale * t**self.alpha * special.rgamma(self.alpha + 1.0)

    def first_moment(self, t) -> np.ndarray:
        t = _as_times(t)
        return self.scale * t ** (self.alpha + 1.0) * special.rgamma(self.alpha) / (self.alpha + 1.0)

    def second_moment(self, t) -> np.ndarray:
        t = _as_times(t)
        return self.scale * t ** (self.alpha + 2.0) * special.rgamma(self.alpha) / (self.alpha + 2.0)

    def triple_integral(self, t) -> np.ndarray:
        t = _as_times(t)
        return self.scale * t ** (self.alpha + 2.0) * special.rgamma(self.alpha + 3.0)


class GammaKernel(_KernelBase):
    """scale * t^{H-1/2} e^{-eta t} / Gamma(H+1/2)"""
    type: Literal["gamma"] = "gamma"
    H: float = Field(..., gt=-0.5, le=0.5)
    eta: float = Field(..., ge=0)
    scale: float = Field(1.0, gt=0)

    @property
    def alpha(self) -> float:
        return self.H + 0.5

    @property
    def is_bounded_at_zero(self) -> bool:
        return self.alpha == 1.0

    def _fractional(self) -> FractionalKernel:
        return FractionalKernel(H=self.H, scale=self.scale)

    def evaluate(self, t) -> np.ndarray:
        t = _as_times(t)
        return self._fractional().evaluate(t) * np.exp(-self.eta * t)

    def integral(self, t) -> np.ndarray:
        t = _as_times(t)
        if self.eta == 0:
            return self._fractional().integral(t)
        return self.scale * special.gammainc(self.alpha, self.eta * t) / self.eta**self.alpha

    def first_moment(self, t) -> np.ndarray:
        t = _as_times(t)
        if self.eta == 0:
            return self._fractional().first_moment(t)
        return (self.scale * self.alpha * special.gammainc(self.alpha + 1.0, self.eta * t)
                / self.eta ** (self.alpha + 1.0))

    def second_moment(self, t) -> np.ndarray:
        t = _as_times(t)
        if self.eta == 0:
            return self._fractional().second_moment(t)
        return (self.scale * self.alpha * (self.alpha + 1.0) * special.gammainc(self.alpha + 2.0, self.eta * t)
                / self.eta ** (self.alpha + 2.0))


class ConstantKernel(_KernelBase):
    type: Literal["constant"] = "constant"
    value: float = Field(..., ge=0)

    def evaluate(self, t) -> np.ndarray:
        t = _as_times(t)
        return np.full_like(t, self.value)

    def integral(self, t) -> np.ndarray:
        return self.value * _as_times(t)

    def first_moment(self, t) -> np.ndarray:
        return 0.5 * self.value * _as_times(t) ** 2

    def second_moment(self, t) -> np.ndarray:
        return self.value * _as_times(t) ** 3 / 3.0


class ExpTerm(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    weight: float = Field(..., gt=0)
    rate: float = Field(..., ge=0)


class ExpSumKernel(_KernelBase):
    """sum_i w_i e^{-rate_i t}; an empty sum is the zero kernel"""
    type: Literal["exp_sum"] = "exp_sum"
    terms: tuple[ExpTerm, ...] = ()

    @field_validator("terms", mode="before")
    @classmethod
    def accept_pairs(cls, v):
        # [[w, r], ...] is accepted as shorthand for [{"weight": w, "rate": r}, ...]
        return [{"weight": p[0], "rate": p[1]} if isinstance(p, (list, tuple)) else p for p in v]

    @property
    def weights(self) -> np.ndarray:
        return np.array([term.weight for term in self.terms], dtype=float)

    @property
    def rates(self) -> np.ndarray:
        return np.array([term.rate for term in self.terms], dtype=float)

    def evaluate(self, t) -> np.ndarray:
        t = _as_times(t)
        if not self.terms:
            return np.zeros_like(t)
        return np.sum(self.weights * np.exp(-np.multiply.outer(t, self.rates)), axis=-1)

    def integral(self, t) -> np.ndarray:
        t = _as_times(t)
        if not self.terms:
            return np.zeros_like(t)
        x = np.multiply.outer(t, self.rates)
        return np.sum(self.weights * t[..., None] * _phi1(x), axis=-1)

    def first_moment(self, t) -> np.ndarray:
        t = _as_times(t)
        if not self.terms:
            return np.zeros_like(t)
        x = np.multiply.outer(t, self.rates)
        return np.sum(self.weights * t[..., None] ** 2 * _phi2(x), axis=-1)

    def second_moment(self, t) -> np.ndarray:
        t = _as_times(t)
        if not self.terms:
            return np.zeros_like(t)
        x = np.multiply.outer(t, self.rates)
        return np.sum(2.0 * self.weights * t[..., None] ** 3 * _phi3(x), axis=-1)

    def cell_weights(self, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        edges = _as_times(edges)
        if not self.terms:
            return np.zeros(len(edges) - 1), np.zeros(len(edges) - 1)
        left = edges[:-1, None]
        width = np.diff(edges)[:, None]
        decay = self.weights * np.exp(-left * self.rates)
        x = width * self.rates
        cell = np.sum(decay * width * _phi1(x), axis=1)
        moment = np.sum(decay * width**2 * _phi2(x), axis=1)
        return cell, moment


class ShiftedKernel(_KernelBase):
    """Delta_h K: t -> base(t + h)"""
    type: Literal["shifted"] = "shifted"
    base: "KernelSpec"
    h: float = Field(..., gt=0)

    def evaluate(self, t) -> np.ndarray:
        return self.base.evaluate(_as_times(t) + self.h)

    def integral(self, t) -> np.ndarray:
        t = _as_times(t)
        return self.base.integral(t + self.h) - self.base.integral(self.h)

    def first_moment(self, t) -> np.ndarray:
        t = _as_times(t)
        shifted_integral = self.base.integral(t + self.h) - self.base.integral(self.h)
        shifted_moment = self.base.first_moment(t + self.h) - self.base.first_moment(self.h)
        return shifted_moment - self.h * shifted_integral

    def second_moment(self, t) -> np.ndarray:
        t = _as_times(t)
        h = self.h
        shifted_integral = self.base.integral(t + h) - self.base.integral(h)
        shifted_moment = self.base.first_moment(t + h) - self.base.first_moment(h)
        shifted_square = self.base.second_moment(t + h) - self.base.second_moment(h)
        return shifted_square - 2.0 * h * shifted_moment + h**2 * shifted_integral

    def cell_weights(self, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.base.cell_weights(_as_times(edges) + self.h)

    @property
    def label(self) -> str:
        return f"shifted_{self.base.label}"


KernelSpec = Annotated[
    Union[FractionalKernel, GammaKernel, ConstantKernel, ExpSumKernel, ShiftedKernel],
    Field(discriminator="type"),
]
ShiftedKernel.model_rebuild()

_kernel_adapter = TypeAdapter(KernelSpec)


def parse_kernel(data: dict) -> KernelSpec:
    """Build a kernel from its JSON object {"type": ..., parameters...}"""
    return _kernel_adapter.validate_python(data)


def eval_kernel(spec: KernelSpec, t: float) -> float:
    return float(spec.evaluate(t))


@dataclass(frozen=True)
class QuadWeights:
    """Exact cell integrals of K on a uniform grid.

    cell[m] = int_{t_m}^{t_{m+1}} K and moment[m] = int_{t_m}^{t_{m+1}} (u - t_m) K(u) du.
    Integrating a piecewise-linear f against K(t_{k+1} - .) gives
    sum_m upper_lag[m] f(t_{k-m}) + lower_lag[m] f(t_{k+1-m}).
    """
    grid: Grid
    cell: np.ndarray
    moment: np.ndarray

    @property
    def upper_lag(self) -> np.ndarray:
        return self.moment / self.grid.dt

    @property
    def lower_lag(self) -> np.ndarray:
        return self.cell - self.upper_lag

    @property
    def total(self) -> float:
        return math.fsum(self.cell)


def quad_weights(spec: KernelSpec, grid: Grid) -> QuadWeights:
    cell, moment = spec.cell_weights(grid.nodes)
    cell = np.maximum(cell, 0.0)
    moment = np.clip(moment, 0.0, cell * grid.dt)
    return QuadWeights(grid=grid, cell=cell, moment=moment)


# Mittag-Leffler

def _ml_terms(alpha: float, beta: float, z: complex, n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = alpha * n + beta
    pole = (x <= 0) & (x == np.round(x))
    log_mag = np.where(pole, -np.inf, n * np.log(abs(z)) - special.gammaln(np.where(pole, 1.0, x)))
    sign = np.where(pole, 0.0, special.gammasgn(np.where(pole, 1.0, x)))
    return sign * np.exp(log_mag + 1j * n * np.angle(z)), log_mag


def _ml_mpmath(alpha: float, beta: float, z: complex, tolerance: float, term_budget: int, peak: float) -> complex:
    dps = int(math.ceil(math.log10(max(peak, 1.0)) - math.log10(tolerance))) + 10
    logger.debug(f"Mittag-Leffler fallback to mpmath with {dps} digits for z={z}")
    with mpmath.workdps(dps):
        a, b, w = mpmath.mpf(alpha), mpmath.mpf(beta), mpmath.mpc(z)
        total = mpmath.mpc(0)
        previous = mpmath.inf
        for n in range(term_budget):
            term = w**n * mpmath.rgamma(a * n + b)
            total += term
            size = abs(term)
            if n > 2 and size < previous and size < tolerance * 1e-3:
                return complex(total)
            previous = size
    raise NumericError(f"Mittag-Leffler series did not converge within {term_budget} terms for z={z}")


def mittag_leffler(
    alpha: float,
    beta: float,
    z: complex,
    tolerance: float = ML_TOLERANCE,
    term_budget: int = ML_TERM_BUDGET,
    max_abs_z: float = ML_MAX_ABS_Z,
) -> complex:
    """E_{alpha,beta}(z) = sum_n z^n / Gamma(alpha n + beta) to an absolute tolerance"""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    z = complex(z)
    if abs(z) > max_abs_z:
        raise NumericError(f"|z|={abs(z):.3g} exceeds the Mittag-Leffler budget {max_abs_z}")
    if z == 0:
        return complex(special.rgamma(beta))

    chunk = 256
    collected = []
    peak = 0.0
    for start in range(0, term_budget, chunk):
        n = np.arange(start, min(start + chunk, term_budget), dtype=float)
        terms, log_mag = _ml_terms(alpha, beta, z, n)
        collected.append(terms)
        peak = max(peak, float(np.max(np.abs(terms))))
        if len(n) < 2:
            continue
        if log_mag[-1] < math.log(tolerance) - 30:
            break
        ratio = math.exp(log_mag[-1] - log_mag[-2])
        last = abs(terms[-1])
        if ratio < 1 and last * ratio / (1 - ratio) < tolerance * 1e-2:
            break
    else:
        raise NumericError(f"Mittag-Leffler series did not converge within {term_budget} terms for z={z}")

    terms = np.concatenate(collected)
    value = complex(math.fsum(terms.real), math.fsum(terms.imag))
    if peak * _EPS * 10 > tolerance:
        return _ml_mpmath(alpha, beta, z, tolerance, term_budget, peak)
    return value


def fractional_resolvent(
    lam: float,
    H: float,
    t,
    sign: int = 1,
    tolerance: float = ML_TOLERANCE,
    term_budget: int = ML_TERM_BUDGET,
    max_abs_z: float = ML_MAX_ABS_Z,
) -> np.ndarray:
    """lam t^{alpha-1} E_{alpha,alpha}(sign lam t^alpha) for the kernel lam*K_H"""
    alpha = H + 0.5
    t = np.atleast_1d(np.asarray(t, dtype=float))
    values = [lam * s ** (alpha - 1)
              * mittag_leffler(alpha, alpha, sign * lam * s**alpha, tolerance, term_budget, max_abs_z).real
              for s in t]
    return np.array(values)


def match_fractional_resolvent(
    lam: float,
    H: float,
    t,
    numeric: np.ndarray,
    tolerance: float = ML_TOLERANCE,
    term_budget: int = ML_TERM_BUDGET,
    max_abs_z: float = ML_MAX_ABS_Z,
) -> tuple[int, np.ndarray, float]:
    """Sign of the Mittag-Leffler argument whose closed form lies closest to a numeric resolvent.

    Returns (sign, closed-form values, max relative deviation).
    """
    numeric = np.asarray(numeric, dtype=float)
    best = None
    for sign in (1, -1):
        closed = fractional_resolvent(lam, H, t, sign, tolerance, term_budget, max_abs_z)
        deviation = float(np.max(np.abs(numeric - closed) / np.maximum(np.abs(closed), _EPS)))
        logger.debug(f"Mittag-Leffler sign {sign:+d}: max relative deviation {deviation:.3e}")
        if best is None or deviation < best[2]:
            best = (sign, closed, deviation)
    return best


# Resolvents

@dataclass(frozen=True)
class ResolventSecondKind:
    """R = K + K*R sampled on the grid, with Q = int_0^t R"""
    grid: Grid
    values: np.ndarray
    integral: np.ndarray
    residual: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.grid.nodes, "value": self.values})


def resolvent_second_kind(spec: KernelSpec, grid: Grid) -> ResolventSecondKind:
    """Product-trapezoid solve of Q = int K + K*Q, then R from the cell averages of Q"""
    w = quad_weights(spec, grid)
    upper, lower = w.upper_lag, w.lower_lag
    n, dt = grid.n_steps, grid.dt
    if lower[0] >= 1.0:
        raise NumericError(f"Resolvent recursion diverges: first cell weight {lower[0]:.4g} >= 1", node=1)
    ik = spec.integral(grid.nodes)

    q = np.zeros(n + 1)
    for k in range(1, n + 1):
        history = upper[:k] @ q[k - 1::-1] + lower[1:k] @ q[k - 1:0:-1]
        q[k] = (ik[k] + history) / (1.0 - lower[0])
        if not np.isfinite(q[k]) or abs(q[k]) > 1e150:
            raise NumericError("Resolvent recursion diverged", node=k)

    averages = np.diff(q) / dt
    values = np.empty(n + 1)
    values[0] = spec.value_at_zero() if spec.is_bounded_at_zero else np.inf
    k_nodes = spec.evaluate(grid.nodes[1:])
    for k in range(1, n + 1):
        values[k] = k_nodes[k - 1] + averages[:k] @ w.cell[k - 1::-1]

    # identity Q = int K + K*Q checked with the cell-average rule
    cell_avg_q = 0.5 * (q[:-1] + q[1:])
    residuals = np.array([abs(q[k] - ik[k] - w.cell[:k] @ cell_avg_q[k - 1::-1]) for k in range(1, n + 1)])
    residual = float(residuals.max()) if residuals.size else 0.0
    logger.info(f"Second-kind resolvent of {spec.label} on {n} steps, residual {residual:.3e}")
    return ResolventSecondKind(grid=grid, values=values, integral=q, residual=residual)


@dataclass(frozen=True)
class ResolventFirstKind:
    """Measure L with (K*L) = 1: an atom at 0 plus a density sampled on the grid.

    For closed forms the density is s^{-singular_exponent} * regular_part(s).
    """
    grid: Grid
    atom_at_zero: float
    density: np.ndarray
    closed_form: bool
    residual: float
    singular_exponent: float = 0.0
    regular_part: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def convolve(self, kernel: KernelSpec, t: float) -> float:
        """(kernel * L)(t) using the closed-form density"""
        if not self.closed_form:
            raise UnsupportedKernelError("Pointwise convolution requires a closed-form resolvent")
        value = self.atom_at_zero * float(kernel.evaluate(t)) if self.atom_at_zero else 0.0
        if self.regular_part is None or t == 0:
            return value
        power, smooth = _singular_split(kernel)
        integrand = lambda s: float(smooth(t - s)) * float(self.regular_part(s))
        part, _ = integrate.quad(integrand, 0.0, t, weight="alg", wvar=(-self.singular_exponent, power), limit=200)
        return value + part

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.grid.nodes, "value": self.density})


def _singular_split(kernel: KernelSpec) -> tuple[float, Callable]:
    """K(u) = u^power * smooth(u) with smooth bounded on [0, T]"""
    if kernel.is_bounded_at_zero:
        return 0.0, kernel.evaluate
    if isinstance(kernel, (FractionalKernel, GammaKernel)):
        eta = kernel.eta if isinstance(kernel, GammaKernel) else 0.0
        c = kernel.scale * special.rgamma(kernel.alpha)
        return kernel.alpha - 1.0, lambda u: c * np.exp(-eta * np.asarray(u, dtype=float))
    raise UnsupportedKernelError(f"No singular split for {kernel.label}")


def _closed_form_first_kind(spec: KernelSpec) -> Optional[tuple[float, float, Optional[Callable]]]:
    if isinstance(spec, ConstantKernel):
        if spec.value == 0:
            raise KernelDomainError("Resolvent of the first kind does not exist for the zero kernel")
        return 1.0 / spec.value, 0.0, None
    if isinstance(spec, (FractionalKernel, GammaKernel)):
        alpha, scale = spec.alpha, spec.scale
        eta = spec.eta if isinstance(spec, GammaKernel) else 0.0
        if alpha == 1.0:
            if eta == 0:
                return 1.0 / scale, 0.0, None
            return 1.0 / scale, 0.0, lambda s: np.full_like(np.asarray(s, dtype=float), eta / scale)
        g = special.rgamma(1.0 - alpha)

        def regular(s):
            s = np.asarray(s, dtype=float)
            part = np.exp(-eta * s) * g
            if eta > 0:
                part = part + eta**alpha * special.gammainc(1.0 - alpha, eta * s) * s**alpha
            return part / scale

        return 0.0, alpha, regular
    return None


def resolvent_first_kind(spec: KernelSpec, grid: Grid) -> ResolventFirstKind:
    closed = _closed_form_first_kind(spec)
    nodes = grid.nodes
    if closed is not None:
        atom, exponent, regular = closed
        density = np.zeros_like(nodes)
        if regular is not None:
            with np.errstate(divide="ignore"):
                density = np.where(nodes > 0, nodes ** (-exponent) * regular(nodes), np.inf if exponent > 0 else regular(0.0))
        result = ResolventFirstKind(grid, atom, density, True, 0.0, exponent, regular)
        checks = np.unique(np.linspace(1, grid.n_steps, min(grid.n_steps, 32)).astype(int))
        residual = max(abs(result.convolve(spec, nodes[k]) - 1.0) for k in checks)
        logger.info(f"Closed-form first-kind resolvent of {spec.label}, residual {residual:.3e}")
        return ResolventFirstKind(grid, atom, density, True, residual, exponent, regular)

    if not spec.is_bounded_at_zero:
        raise UnsupportedKernelError(f"No first-kind resolvent for singular {spec.label} kernel")
    k0 = spec.value_at_zero()
    if k0 <= 0:
        raise KernelDomainError(f"{spec.label} kernel vanishes at 0; no first-kind resolvent")
    atom = 1.0 / k0
    w = quad_weights(spec, grid)
    k_nodes = spec.evaluate(nodes)
    n = grid.n_steps
    cell_density = np.zeros(n)
    for k in range(1, n + 1):
        history = cell_density[:k - 1] @ w.cell[k - 1:0:-1]
        cell_density[k - 1] = (1.0 - atom * k_nodes[k] - history) / w.cell[0]
        if not np.isfinite(cell_density[k - 1]):
            raise NumericError("First-kind deconvolution produced a non-finite density", node=k)

    # verify at cell midpoints with exact antiderivatives
    checked = np.unique(np.linspace(0, n - 1, min(n, 256)).astype(int))
    mids = nodes[checked] + 0.5 * grid.dt
    residual = 0.0
    for k, tau in zip(checked, mids):
        upper = spec.integral(tau - nodes[:k + 1])
        lower = spec.integral(np.maximum(tau - nodes[1:k + 2], 0.0))
        value = atom * float(spec.evaluate(tau)) + cell_density[:k + 1] @ (upper - lower)
        residual = max(residual, abs(value - 1.0))
    if residual > FIRST_KIND_RESIDUAL_LIMIT:
        raise NumericError(f"First-kind deconvolution unstable, residual {residual:.3e}")

    density = np.append(cell_density, cell_density[-1])
    logger.info(f"Numeric first-kind resolvent of {spec.label}, atom {atom:.6g}, residual {residual:.3e}")
    return ResolventFirstKind(grid, atom, density, False, residual)


def l1_distance(a: KernelSpec, b: KernelSpec, grid: Grid) -> float:
    """int_0^T |a - b| using exact cell integrals wherever the sign of a - b is constant on a cell"""
    if a == b:
        return 0.0
    nodes = grid.nodes
    cell_a, _ = a.cell_weights(nodes)
    cell_b, _ = b.cell_weights(nodes)
    fractions = np.array([1, 2, 3, 4, 5]) / 6.0
    samples = nodes[:-1, None] + grid.dt * fractions
    diff = a.evaluate(samples) - b.evaluate(samples)
    constant_sign = np.all(diff >= 0, axis=1) | np.all(diff <= 0, axis=1)

    pieces = np.abs(cell_a - cell_b)
    for m in np.flatnonzero(~constant_sign):
        pieces[m], _ = integrate.quad(lambda u: abs(float(a.evaluate(u)) - float(b.evaluate(u))),
                                      nodes[m], nodes[m + 1], limit=200)
    return math.fsum(pieces)


# Multifactor approximation

def _partition_step(H: float, n_factors: int, horizon: float) -> float:
    return n_factors ** (-0.2) / horizon * (math.sqrt(10) * (1 - 2 * H) / (5 - 2 * H)) ** 0.4


def _exp_sum_from_measure(kernel: Union[FractionalKernel, GammaKernel], n_factors: int, horizon: float) -> ExpSumKernel:
    alpha = kernel.alpha
    eta = kernel.eta if isinstance(kernel, GammaKernel) else 0.0
    if alpha == 1.0:
        return ExpSumKernel(terms=[(kernel.scale, eta)])
    edges = _partition_step(kernel.H, n_factors, horizon) * np.arange(n_factors + 1)
    lower, upper = edges[:-1], edges[1:]
    mass = upper ** (1 - alpha) - lower ** (1 - alpha)
    weights = mass / ((1 - alpha) * special.gamma(alpha) * special.gamma(1 - alpha))
    rates = (1 - alpha) / (2 - alpha) * (upper ** (2 - alpha) - lower ** (2 - alpha)) / mass
    return ExpSumKernel(terms=[(kernel.scale * w, r + eta) for w, r in zip(weights, rates)])


def fit_exp_sum(
    kernel: KernelSpec,
    n_factors: int,
    horizon: float,
    refine: bool = False,
    n_steps: int = 256,
    cache_dir: Optional[Path] = None,
) -> ExpSumKernel:
    """Weighted sum of exponentials approximating a completely monotone fractional/gamma kernel"""
    if not isinstance(kernel, (FractionalKernel, GammaKernel)):
        raise UnsupportedKernelError(f"ExpSum fit is available for fractional and gamma kernels, got {kernel.label}")
    if n_factors < 1:
        raise ValueError("n_factors must be positive")

    cache_path = None
    if cache_dir is not None:
        key = hashlib.sha1(kernel.model_dump_json().encode()).hexdigest()[:16]
        cache_path = Path(cache_dir) / f"expsum_{key}_{n_factors}_{horizon:g}_{int(refine)}_{n_steps}.joblib"
        if cache_path.exists():
            try:
                return ExpSumKernel(terms=joblib.load(cache_path))
            except Exception as e:
                logger.warning(f"Ignoring unreadable fit cache {cache_path}: {e}")

    fitted = _exp_sum_from_measure(kernel, n_factors, horizon)
    if refine and kernel.alpha < 1.0:
        grid = Grid(horizon=horizon, n_steps=n_steps)
        start = np.log(np.concatenate([fitted.weights, fitted.rates]))
        baseline = l1_distance(fitted, kernel, grid)

        def objective(params):
            w, r = np.exp(params[:n_factors]), np.exp(params[n_factors:])
            return l1_distance(ExpSumKernel(terms=list(zip(w, r))), kernel, grid)

        result = optimize.minimize(objective, start, method="Nelder-Mead",
                                   options={"maxiter": 400 * n_factors, "xatol": 1e-6, "fatol": 1e-10})
        if not result.success:
            logger.warning(f"ExpSum refinement stopped early: {result.message}")
        if result.fun < baseline:
            w, r = np.exp(result.x[:n_factors]), np.exp(result.x[n_factors:])
            fitted = ExpSumKernel(terms=list(zip(w, r)))
        logger.info(f"ExpSum refinement: L1 {baseline:.4e} -> {min(result.fun, baseline):.4e}")

    if cache_path is not None:
        try:
            cache_path.parent.mkdir(parents=True, exist_ok=True)
            joblib.dump([(t.weight, t.rate) for t in fitted.terms], cache_path)
        except Exception as e:
            logger.error(f"Error caching ExpSum fit: {e}")
    return fitted
