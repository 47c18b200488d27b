"""Affine characteristics (b, c, nu), jump measures and admissible input curves"""

import logging
from dataclasses import dataclass
from typing import Annotated, Literal, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, field_validator, model_validator

from src.affine_volterra.errors import JumpDomainError, UnsupportedKernelError
from src.affine_volterra.kernels import Grid, KernelSpec, ShiftedKernel, resolvent_first_kind

logger = logging.getLogger(__name__)

ADMISSIBILITY_TOLERANCE = 1e-8


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# Jump measures

class NoJumps(_Frozen):
    type: Literal["none"] = "none"

    def exp_integral(self, z) -> np.ndarray:
        return np.zeros_like(np.asarray(z, dtype=complex))

    def exp_integral_derivative(self, z) -> np.ndarray:
        return np.zeros_like(np.asarray(z, dtype=complex))

    def second_moment(self) -> float:
        return 0.0

    def first_moment(self) -> float:
        return 0.0

    def total_mass(self) -> float:
        return 0.0

    def moment_bound(self, a: float) -> float:
        return 0.0

    def sample_jump_sums(self, rng: np.random.Generator, counts: np.ndarray) -> np.ndarray:
        return np.zeros(np.shape(counts))


class JumpAtom(_Frozen):
    site: float = Field(..., gt=0)
    mass: float = Field(..., gt=0)


class AtomicJumps(_Frozen):
    """nu = sum_i m_i delta_{zeta_i}"""
    type: Literal["atoms"] = "atoms"
    atoms: tuple[JumpAtom, ...] = Field(..., min_length=1)

    @field_validator("atoms", mode="before")
    @classmethod
    def accept_pairs(cls, v):
        return [{"site": p[0], "mass": p[1]} if isinstance(p, (list, tuple)) else p for p in v]

    @property
    def sites(self) -> np.ndarray:
        return np.array([a.site for a in self.atoms])

    @property
    def masses(self) -> np.ndarray:
        return np.array([a.mass for a in self.atoms])

    def exp_integral(self, z) -> np.ndarray:
        zz = np.multiply.outer(np.asarray(z, dtype=complex), self.sites)
        return np.sum(self.masses * (np.exp(zz) - 1.0 - zz), axis=-1)

    def exp_integral_derivative(self, z) -> np.ndarray:
        zz = np.multiply.outer(np.asarray(z, dtype=complex), self.sites)
        return np.sum(self.masses * self.sites * (np.exp(zz) - 1.0), axis=-1)

    def second_moment(self) -> float:
        return float(np.sum(self.masses * self.sites**2))

    def first_moment(self) -> float:
        return float(np.sum(self.masses * self.sites))

    def total_mass(self) -> float:
        return float(np.sum(self.masses))

    def moment_bound(self, a: float) -> float:
        return float(np.sum(self.masses * self.sites**2 * np.exp(a * self.sites)))

    def sample_jump_sums(self, rng: np.random.Generator, counts: np.ndarray) -> np.ndarray:
        counts = np.asarray(counts, dtype=np.int64)
        if len(self.atoms) == 1:
            return counts * self.sites[0]
        split = rng.multinomial(counts.ravel(), self.masses / self.total_mass())
        return (split @ self.sites).reshape(counts.shape)


class ExponentialJumps(_Frozen):
    """nu(dz) = mass * rate * e^{-rate z} dz"""
    type: Literal["exponential"] = "exponential"
    mass: float = Field(..., gt=0)
    rate: float = Field(..., gt=0)

    def _check_domain(self, z: np.ndarray):
        if np.any(z.real >= self.rate):
            raise JumpDomainError(
                f"Re(z)={float(np.max(z.real)):.6g} >= rate {self.rate}: exponential moment undefined")

    def exp_integral(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        self._check_domain(z)
        return self.mass * (self.rate / (self.rate - z) - 1.0 - z / self.rate)

    def exp_integral_derivative(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        self._check_domain(z)
        return self.mass * (self.rate / (self.rate - z) ** 2 - 1.0 / self.rate)

    def second_moment(self) -> float:
        return 2.0 * self.mass / self.rate**2

    def first_moment(self) -> float:
        return self.mass / self.rate

    def total_mass(self) -> float:
        return self.mass

    def moment_bound(self, a: float) -> float:
        if a >= self.rate:
            return float("inf")
        return 2.0 * self.mass * self.rate / (self.rate - a) ** 3

    def sample_jump_sums(self, rng: np.random.Generator, counts: np.ndarray) -> np.ndarray:
        # a sum of k iid Exp(rate) sizes is Gamma(k, 1/rate); k = 0 gives 0
        return rng.gamma(shape=np.asarray(counts, dtype=float), scale=1.0 / self.rate)


JumpMeasure = Annotated[Union[NoJumps, AtomicJumps, ExponentialJumps], Field(discriminator="type")]


def jump_exp_integral(nu: JumpMeasure, z: complex) -> complex:
    """J(z) = int (e^{z zeta} - 1 - z zeta) nu(d zeta)"""
    return complex(nu.exp_integral(z))


def second_moment(nu: JumpMeasure) -> float:
    return nu.second_moment()


class CharTriplet(_Frozen):
    """Characteristics (bX, cX, nu X) of the driving semimartingale Z"""
    b: float
    c: float = Field(..., ge=0)
    nu: JumpMeasure = NoJumps()

    @property
    def moment_constant(self) -> float:
        """|b| + c + int zeta^2 nu"""
        return abs(self.b) + self.c + self.nu.second_moment()


# Input curves

class AffineInKCurve(_Frozen):
    """g0(t) = x0 + theta * int_0^t K"""
    type: Literal["affine_in_k"] = "affine_in_k"
    x0: float = Field(..., ge=0)
    theta: float = Field(..., ge=0)

    def g0(self, t, kernel: KernelSpec) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.theta == 0:
            return np.full_like(t, self.x0)
        return self.x0 + self.theta * kernel.integral(t)

    def G0(self, t, kernel: KernelSpec) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.theta == 0:
            return self.x0 * t
        return self.x0 * t + self.theta * kernel.double_integral(t)

    def G0_integral(self, t, kernel: KernelSpec) -> np.ndarray:
        """int_0^t G0"""
        t = np.asarray(t, dtype=float)
        if self.theta == 0:
            return 0.5 * self.x0 * t**2
        return 0.5 * self.x0 * t**2 + self.theta * kernel.triple_integral(t)

    def sup_g0(self, a: float, b: float, kernel: KernelSpec) -> float:
        return float(self.g0(b, kernel))


class _TableCurve(_Frozen):
    times: tuple[float, ...] = Field(..., min_length=2)
    values: tuple[float, ...] = Field(..., min_length=2)

    @model_validator(mode="after")
    def check_knots(self):
        times = np.asarray(self.times)
        if len(self.times) != len(self.values):
            raise ValueError("times and values must have the same length")
        if times[0] != 0.0:
            raise ValueError("table must start at t=0")
        if np.any(np.diff(times) <= 0):
            raise ValueError("table times must be strictly increasing")
        return self

    def g0(self, t, kernel: KernelSpec = None) -> np.ndarray:
        return np.interp(np.asarray(t, dtype=float), self.times, self.values)

    def G0(self, t, kernel: KernelSpec = None) -> np.ndarray:
        """Exact integral of the piecewise-linear interpolant; g0 is held flat beyond the last knot"""
        t = np.asarray(t, dtype=float)
        times, values = np.asarray(self.times), np.asarray(self.values)
        knots = np.concatenate([[0.0], np.cumsum(np.diff(times) * 0.5 * (values[1:] + values[:-1]))])
        idx = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 1)
        left = times[idx]
        return knots[idx] + (t - left) * 0.5 * (values[idx] + self.g0(t))

    def G0_integral(self, t, kernel: KernelSpec = None) -> np.ndarray:
        """int_0^t G0; G0 is quadratic between knots, so Simpson's rule per piece is exact"""
        t = np.asarray(t, dtype=float)
        times = np.asarray(self.times)

        def simpson(a, b):
            return (b - a) / 6.0 * (self.G0(a) + 4.0 * self.G0(0.5 * (a + b)) + self.G0(b))

        knots = np.concatenate([[0.0], np.cumsum(simpson(times[:-1], times[1:]))])
        idx = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 1)
        return knots[idx] + simpson(times[idx], t)

    def sup_g0(self, a: float, b: float, kernel: KernelSpec = None) -> float:
        times = np.asarray(self.times)
        inside = np.asarray(self.values)[(times > a) & (times < b)]
        return float(max(self.g0(a), self.g0(b), *inside))


class NonDecreasingTableCurve(_TableCurve):
    type: Literal["non_decreasing_table"] = "non_decreasing_table"

    @field_validator("values")
    @classmethod
    def check_monotone(cls, v):
        if v[0] < 0:
            raise ValueError("g0(0) must be nonnegative")
        if np.any(np.diff(v) < 0):
            raise ValueError("g0 samples must be non-decreasing")
        return v


class TabulatedCurve(_TableCurve):
    """Arbitrary continuous g0; used to test curves outside the admissible set"""
    type: Literal["tabulated"] = "tabulated"


InputCurve = Annotated[
    Union[AffineInKCurve, NonDecreasingTableCurve, TabulatedCurve],
    Field(discriminator="type"),
]

_curve_adapter = TypeAdapter(InputCurve)


def parse_curve(data: dict) -> InputCurve:
    return _curve_adapter.validate_python(data)


def g0_eval(curve: InputCurve, spec: KernelSpec, t: float) -> float:
    return float(curve.g0(t, spec))


def G0_eval(curve: InputCurve, spec: KernelSpec, t: float) -> float:
    return float(curve.G0(t, spec))


@dataclass(frozen=True)
class AdmissibilityResult:
    grid: Grid
    h: float
    residual: np.ndarray
    tolerance: float = ADMISSIBILITY_TOLERANCE

    @property
    def min_residual(self) -> float:
        return float(np.min(self.residual))

    @property
    def admissible(self) -> bool:
        return self.min_residual >= -self.tolerance

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.grid.nodes, "h": self.h, "residual": self.residual})


def admissibility_residual(
    curve: InputCurve,
    spec: KernelSpec,
    h: float,
    grid: Grid,
    tolerance: float = ADMISSIBILITY_TOLERANCE,
) -> AdmissibilityResult:
    """Delta_h g0 - (Delta_h K * L)(0) g0 - d(Delta_h K * L) * g0 sampled on the grid"""
    resolvent = resolvent_first_kind(spec, grid)
    if not resolvent.closed_form:
        raise UnsupportedKernelError(f"Admissibility check needs a closed-form first-kind resolvent, got {spec.label}")
    shifted = ShiftedKernel(base=spec, h=h)
    nodes = grid.nodes
    phi = np.array([resolvent.convolve(shifted, t) for t in nodes])
    g_nodes = curve.g0(nodes, spec)
    g_shifted = curve.g0(nodes + h, spec)

    # sum_{j<k} g0(t_k - t_{j+1}) (phi_{j+1} - phi_j)
    increments = np.diff(phi)
    stieltjes = np.concatenate([[0.0], np.convolve(g_nodes, increments)[: grid.n_steps]])
    residual = g_shifted - phi[0] * g_nodes - stieltjes
    result = AdmissibilityResult(grid=grid, h=h, residual=residual, tolerance=tolerance)
    logger.info(f"Admissibility of {curve.type} for {spec.label}, h={h}: min residual {result.min_residual:.3e}")
    return result


def check_admissibility(curve: InputCurve, spec: KernelSpec, h_values: list[float], grid: Grid) -> list[AdmissibilityResult]:
    return [admissibility_residual(curve, spec, h, grid) for h in h_values]
