"""Riccati-Volterra solver: psi = K * F(., psi) with product integration"""

import logging
import time
from dataclasses import dataclass
from typing import Annotated, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import trapezoid

from src.affine_volterra.errors import BlowUpError, UnsupportedKernelError
from src.affine_volterra.kernels import Grid, KernelSpec, quad_weights
from src.affine_volterra.metrics import MetricsRecorder
from src.affine_volterra.model import AffineInKCurve, CharTriplet, InputCurve

logger = logging.getLogger(__name__)

BLOWUP_CAP = 1e8
SIGN_TOLERANCE = 1e-14
EXPONENT_MISMATCH_WARNING = 1e-8


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ConstantCoefficient(_Frozen):
    type: Literal["constant"] = "constant"
    re: float = 0.0
    im: float = 0.0

    def values(self, s) -> np.ndarray:
        return np.full(np.shape(s), complex(self.re, self.im))


class TabulatedCoefficient(_Frozen):
    """Continuous complex curve, linear between knots and flat outside them"""
    type: Literal["tabulated"] = "tabulated"
    times: tuple[float, ...] = Field(..., min_length=2)
    re: tuple[float, ...]
    im: tuple[float, ...]

    @model_validator(mode="after")
    def check_lengths(self):
        if not len(self.times) == len(self.re) == len(self.im):
            raise ValueError("times, re and im must have the same length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        return self

    def values(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return np.interp(s, self.times, self.re) + 1j * np.interp(s, self.times, self.im)


CoefficientCurve = Annotated[Union[ConstantCoefficient, TabulatedCoefficient], Field(discriminator="type")]


def constant(value: complex) -> ConstantCoefficient:
    value = complex(value)
    return ConstantCoefficient(re=value.real, im=value.imag)


class RiccatiSpec(_Frozen):
    """Coefficient curves (f0, f1, f2) and the triplet defining F(s, u).

    rho_sqrt_c_shift is a real addition to the drift b of u; Heston specs carry rho sqrt(c) Re(h1) there.
    """
    f0: CoefficientCurve = ConstantCoefficient()
    f1: CoefficientCurve = ConstantCoefficient()
    f2: CoefficientCurve = ConstantCoefficient()
    triplet: CharTriplet
    rho_sqrt_c_shift: float = 0.0


class RiccatiOptions(_Frozen):
    n_steps: int = Field(512, gt=0)
    sweeps: int = Field(2, ge=0)
    blowup_cap: float = Field(BLOWUP_CAP, gt=0)
    clip: bool = False


@dataclass(frozen=True)
class PsiPath:
    grid: Grid
    values: np.ndarray
    blowup: bool = False
    blowup_node: Optional[int] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.grid.nodes, "re_psi": self.values.real, "im_psi": self.values.imag})


def _F(f0, f1, f2, triplet: CharTriplet, shift: float, u, clip: bool = False):
    u = np.asarray(u, dtype=complex)
    if clip:
        u = np.minimum(u.real, 0.0) + 1j * u.imag
    c = triplet.c
    return (f0 + 0.5 * c * f1**2 + (triplet.b + shift + c * f1) * u + 0.5 * c * u**2
            + triplet.nu.exp_integral(f2 + u))


def riccati_F(spec: RiccatiSpec, s: float, u: complex, clip: bool = False) -> complex:
    """F(s,u) = f0 + c f1^2/2 + (b + c f1) u + c u^2/2 + int (e^{(f2+u)z} - 1 - (f2+u)z) nu(dz)"""
    f0, f1, f2 = (curve.values(s) for curve in (spec.f0, spec.f1, spec.f2))
    return complex(_F(f0, f1, f2, spec.triplet, spec.rho_sqrt_c_shift, u, clip))


def riccati_F_nodes(spec: RiccatiSpec, nodes: np.ndarray, values: np.ndarray, clip: bool = False) -> np.ndarray:
    f0, f1, f2 = (curve.values(nodes) for curve in (spec.f0, spec.f1, spec.f2))
    return _F(f0, f1, f2, spec.triplet, spec.rho_sqrt_c_shift, values, clip)


def check_sign_condition(spec: RiccatiSpec, grid: Grid) -> bool:
    """Re f0 + c/2 (Re f1)^2 + 1/2 int z^2 nu (Re f2)^2 <= 0 and Re f2 <= 0 on every node"""
    nodes = grid.nodes
    f0, f1, f2 = (curve.values(nodes) for curve in (spec.f0, spec.f1, spec.f2))
    m2 = spec.triplet.nu.second_moment()
    lhs = f0.real + 0.5 * spec.triplet.c * f1.real**2 + 0.5 * m2 * f2.real**2
    return bool(np.all(lhs <= SIGN_TOLERANCE) and np.all(f2.real <= SIGN_TOLERANCE))


def solve_riccati_batch(
    specs: Sequence[RiccatiSpec],
    kernel: KernelSpec,
    grid: Grid,
    options: RiccatiOptions = RiccatiOptions(),
) -> list[PsiPath]:
    """Solve several Riccati-Volterra equations sharing the triplet, vectorised over the specs.

    Each step predicts with piecewise-constant F against the exact cell integrals of K,
    then corrects `options.sweeps` times with the product trapezoid rule.
    """
    if not specs:
        return []
    triplet = specs[0].triplet
    if any(s.triplet != triplet for s in specs):
        raise ValueError("A batched Riccati solve needs one common triplet")
    shift = np.array([s.rho_sqrt_c_shift for s in specs])

    started = time.perf_counter()
    nodes = grid.nodes
    n, m = grid.n_steps, len(specs)
    f0, f1, f2 = (np.stack([getattr(s, name).values(nodes) for s in specs]) for name in ("f0", "f1", "f2"))
    w = quad_weights(kernel, grid)
    cell, upper, lower = w.cell, w.upper_lag, w.lower_lag

    def F(k: int, u: np.ndarray) -> np.ndarray:
        return _F(f0[:, k], f1[:, k], f2[:, k], triplet, shift, u, options.clip)

    psi = np.zeros((m, n + 1), dtype=complex)
    history_F = np.zeros((m, n + 1), dtype=complex)
    history_F[:, 0] = F(0, psi[:, 0])
    active = np.ones(m, dtype=bool)
    blowup_node = np.full(m, -1)

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            past = history_F[:, k::-1]
            guess = past @ cell[:k + 1]
            known = past @ upper[:k + 1] + history_F[:, k:0:-1] @ lower[1:k + 1]
            for _ in range(options.sweeps):
                guess = known + lower[0] * F(k + 1, guess)

            bad = active & (~np.isfinite(guess) | (np.abs(guess) > options.blowup_cap))
            if np.any(bad):
                blowup_node[bad] = k + 1
                active &= ~bad
                logger.warning(f"Riccati blow-up at node {k + 1} (t={nodes[k + 1]:.6g}) for {int(bad.sum())} spec(s)")
            guess = np.where(active, guess, np.nan)
            psi[:, k + 1] = guess
            history_F[:, k + 1] = np.where(active, F(k + 1, np.where(active, guess, 0.0)), 0.0)

    n_blowups = int(np.sum(blowup_node >= 0))
    duration = time.perf_counter() - started
    MetricsRecorder.record_riccati_solve(kernel.label, duration, n_blowups)
    logger.info(f"Solved {m} Riccati-Volterra equation(s) with {kernel.label} kernel on {n} steps in {duration:.3f}s")
    return [
        PsiPath(grid=grid, values=psi[i], blowup=bool(blowup_node[i] >= 0),
                blowup_node=int(blowup_node[i]) if blowup_node[i] >= 0 else None)
        for i in range(m)
    ]


def solve_riccati(
    spec: RiccatiSpec,
    kernel: KernelSpec,
    grid: Grid,
    options: RiccatiOptions = RiccatiOptions(),
) -> PsiPath:
    return solve_riccati_batch([spec], kernel, grid, options)[0]


def _require_finite(psi: PsiPath):
    if psi.blowup:
        node = psi.blowup_node
        raise BlowUpError("Riccati solution blew up", node=node, time=float(psi.grid.nodes[node]))


def integrate_against(f_values: np.ndarray, dt: float, total: float, cumulative: np.ndarray) -> complex:
    """int_0^L f(s) g(L - s) ds for the piecewise-linear interpolant of f_values on a uniform grid.

    total = int_0^L g and cumulative[j] = int_0^{L - s_j} int_0^v g(r) dr dv; after integrating
    by parts against dG only exact integrals of g remain.
    """
    slopes = np.diff(f_values) / dt
    return complex(f_values[0] * total - slopes @ np.diff(cumulative))


def closed_form_exponent(
    psi: PsiPath,
    spec: RiccatiSpec,
    curve: InputCurve,
    kernel: Optional[KernelSpec] = None,
) -> complex:
    """x0 int_0^T F(s, psi(s)) ds + theta int_0^T psi(s) ds for affine-in-K curves.

    With the kernel, int psi is taken exactly over the product-integration interpolant K * F;
    without it, by the trapezoid rule on the psi nodes.
    """
    if not isinstance(curve, AffineInKCurve):
        raise UnsupportedKernelError("The closed-form exponent needs an affine-in-K input curve")
    _require_finite(psi)
    grid = psi.grid
    nodes = grid.nodes
    f_values = riccati_F_nodes(spec, nodes, psi.values)
    if curve.theta == 0:
        return complex(curve.x0 * trapezoid(f_values, nodes))
    if kernel is None:
        psi_integral = trapezoid(psi.values, nodes)
    else:
        lags = np.maximum(grid.horizon - nodes, 0.0)
        psi_integral = integrate_against(f_values, grid.dt, float(kernel.double_integral(grid.horizon)),
                                         kernel.triple_integral(lags))
    return complex(curve.x0 * trapezoid(f_values, nodes) + curve.theta * psi_integral)


def transform_exponent(psi: PsiPath, spec: RiccatiSpec, curve: InputCurve, kernel: KernelSpec) -> complex:
    """int_0^T F(T-s, psi(T-s)) g0(s) ds, exact in g0 for piecewise-linear F"""
    _require_finite(psi)
    grid = psi.grid
    nodes = grid.nodes
    f_values = riccati_F_nodes(spec, nodes, psi.values)
    lags = np.maximum(grid.horizon - nodes, 0.0)
    value = integrate_against(f_values, grid.dt, float(curve.G0(grid.horizon, kernel)),
                              curve.G0_integral(lags, kernel))

    if isinstance(curve, AffineInKCurve):
        closed = closed_form_exponent(psi, spec, curve, kernel)
        gap = abs(closed - value) / max(abs(closed), 1e-300)
        if gap > EXPONENT_MISMATCH_WARNING and abs(closed - value) > 1e-12:
            logger.warning(f"Quadrature and closed-form exponents differ by {gap:.2e} (relative)")
    return value
