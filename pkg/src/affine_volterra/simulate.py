"""Monte Carlo oracles: Hawkes thinning and the multifactor Markovian lift"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats

from src.affine_volterra.errors import KernelDomainError, UnsupportedKernelError
from src.affine_volterra.kernels import ExpSumKernel, Grid, KernelSpec, _phi1
from src.affine_volterra.metrics import MetricsRecorder
from src.affine_volterra.model import AtomicJumps, CharTriplet, InputCurve
from src.affine_volterra.riccati import CoefficientCurve, ConstantCoefficient, constant
from src.affine_volterra.transforms import HestonModel

logger = logging.getLogger(__name__)

BATCH_SIZE = 4096
JUMP_RATE_WARNING = 0.1

HAWKES_TRIPLET = CharTriplet(b=1.0, c=0.0, nu=AtomicJumps(atoms=[(1.0, 1.0)]))


class SimulationOptions(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(0, ge=0)
    n_paths: int = Field(10_000, gt=0)
    batch_size: int = Field(BATCH_SIZE, gt=0)
    lookahead: float = Field(1.0, gt=0)
    factor_update: Literal["euler", "exponential"] = "exponential"
    jump_rate_warning: float = Field(JUMP_RATE_WARNING, gt=0)
    dump_paths: bool = False


def _path_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def _generate_batches(make_batch, n_batches: int, threads: int) -> Iterator["PathBatch"]:
    """Batches in index order; up to `threads` of them are built concurrently"""
    if threads <= 1:
        for index in range(n_batches):
            yield make_batch(index)
        return
    for start in range(0, n_batches, threads):
        stop = min(start + threads, n_batches)
        yield from Parallel(n_jobs=threads, prefer="threads")(delayed(make_batch)(i) for i in range(start, stop))


@dataclass(frozen=True)
class PathBundle:
    """One trajectory on the grid; Z = bX + M^c + M^d"""
    grid: Grid
    X: np.ndarray
    Mc: np.ndarray
    jump_sum: np.ndarray
    m1: float
    b: float
    Y: Optional[np.ndarray] = None
    log_S: Optional[np.ndarray] = None
    events: Optional[np.ndarray] = None

    @property
    def dX(self) -> np.ndarray:
        return np.diff(self.X)

    @property
    def dMd(self) -> np.ndarray:
        return self.jump_sum - self.m1 * self.dX

    @property
    def Md(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.jump_sum)]) - self.m1 * (self.X - self.X[0])

    @property
    def dZ(self) -> np.ndarray:
        return self.b * self.dX + np.diff(self.Mc) + self.dMd

    @property
    def Z(self) -> np.ndarray:
        return self.b * (self.X - self.X[0]) + self.Mc + self.Md


@dataclass(frozen=True)
class PathBatch:
    """A block of paths stored row-wise"""
    grid: Grid
    X: np.ndarray
    Mc: np.ndarray
    jump_sum: np.ndarray
    m1: float
    b: float
    Y: Optional[np.ndarray] = None
    log_S: Optional[np.ndarray] = None
    events: Optional[list[np.ndarray]] = None
    truncations: int = 0

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def dX(self) -> np.ndarray:
        return np.diff(self.X, axis=1)

    @property
    def dMc(self) -> np.ndarray:
        return np.diff(self.Mc, axis=1)

    @property
    def dMd(self) -> np.ndarray:
        return self.jump_sum - self.m1 * self.dX

    def path(self, i: int) -> PathBundle:
        return PathBundle(
            grid=self.grid, X=self.X[i], Mc=self.Mc[i], jump_sum=self.jump_sum[i], m1=self.m1, b=self.b,
            Y=None if self.Y is None else self.Y[i],
            log_S=None if self.log_S is None else self.log_S[i],
            events=None if self.events is None else self.events[i],
        )

    def to_frame(self, max_paths: int = 100) -> pd.DataFrame:
        """Long-format per-path dump: path, t, X, Y, logS"""
        n = min(max_paths, self.n_paths)
        nodes = self.grid.nodes
        frame = pd.DataFrame({
            "path": np.repeat(np.arange(n), len(nodes)),
            "t": np.tile(nodes, n),
            "X": self.X[:n].ravel(),
        })
        frame["Y"] = self.Y[:n].ravel() if self.Y is not None else np.nan
        frame["logS"] = self.log_S[:n].ravel() if self.log_S is not None else np.nan
        return frame


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: complex
    std_error: float
    n_paths: int

    def within(self, value: complex, n_se: float = 3.0) -> bool:
        return abs(complex(value) - self.mean) <= n_se * self.std_error

    def to_dict(self) -> dict:
        return {"re": self.mean.real, "im": self.mean.imag, "std_error": self.std_error, "n_paths": self.n_paths}


class _Accumulator:
    """Batch-wise sums combined with fsum so the mean does not depend on batch order"""

    def __init__(self):
        self.sums: list[complex] = []
        self.squares: list[float] = []
        self.count = 0

    def add(self, values: np.ndarray):
        values = np.asarray(values, dtype=complex)
        self.sums.append(complex(values.sum()))
        self.squares.append(float(np.sum(np.abs(values) ** 2)))
        self.count += values.size

    def estimate(self) -> MonteCarloEstimate:
        n = self.count
        mean = complex(math.fsum(s.real for s in self.sums), math.fsum(s.imag for s in self.sums)) / n
        second = math.fsum(self.squares) / n
        variance = max(second - abs(mean) ** 2, 0.0) * n / max(n - 1, 1)
        return MonteCarloEstimate(mean=mean, std_error=math.sqrt(variance / n), n_paths=n)


# Hawkes

def _excitation(kernel: KernelSpec, t: float, events: list[float]) -> float:
    if not events:
        return 0.0
    return float(np.sum(kernel.evaluate(t - np.asarray(events))))


def simulate_hawkes(
    g0: InputCurve,
    kernel: KernelSpec,
    T: float,
    seed: int,
    path_id: int = 0,
    lookahead: float = 1.0,
) -> np.ndarray:
    """Event times on [0, T] by thinning with intensity g0(t) + sum_i K(t - t_i)"""
    if not kernel.is_bounded_at_zero:
        raise KernelDomainError(
            f"{kernel.label} kernel is unbounded at 0; simulate with ShiftedKernel(base=..., h=1/n) or an ExpSum fit")
    rng = _path_rng(seed, path_id)
    events: list[float] = []
    exp_sum = isinstance(kernel, ExpSumKernel)
    if exp_sum:
        weights, rates = kernel.weights, kernel.rates
        state = np.zeros(len(weights))

    t = 0.0
    while t < T:
        window_end = min(t + lookahead, T)
        excitation = float(weights @ state) if exp_sum else _excitation(kernel, t, events)
        bound = g0.sup_g0(t, window_end, kernel) + excitation
        step = rng.exponential(1.0 / bound) if bound > 0 else math.inf
        candidate = min(t + step, window_end)
        if exp_sum:
            state = state * np.exp(-rates * (candidate - t))
        t = candidate
        if t >= window_end:
            continue

        excitation = float(weights @ state) if exp_sum else _excitation(kernel, t, events)
        intensity = float(g0.g0(t, kernel)) + excitation
        if rng.uniform() * bound <= intensity:
            events.append(t)
            if exp_sum:
                state = state + 1.0
    return np.asarray(events)


def integrated_intensity(events: np.ndarray, g0: InputCurve, kernel: KernelSpec, times: np.ndarray) -> np.ndarray:
    """int_0^t lambda = G0(t) + sum_i int_0^{t - t_i} K"""
    times = np.asarray(times, dtype=float)
    base = np.asarray(g0.G0(times, kernel), dtype=float)
    if len(events) == 0:
        return base
    lags = np.maximum(np.subtract.outer(times, np.asarray(events)), 0.0)
    return base + kernel.integral(lags).sum(axis=1)


def rescaled_integrated_intensity(events: np.ndarray, n: int, grid: Grid, g0: InputCurve, kernel: KernelSpec) -> np.ndarray:
    """X^n(t) = n^{-2} int_0^{nt} lambda for events simulated on [0, n T]"""
    if n < 1:
        raise ValueError("n must be a positive integer")
    return integrated_intensity(events, g0, kernel, n * grid.nodes) / float(n) ** 2


@dataclass(frozen=True)
class HawkesPopulation:
    """Hawkes paths (b, c, nu) = (1, 0, delta_1) regenerated batch by batch from per-path streams"""
    g0: InputCurve
    kernel: KernelSpec
    grid: Grid
    seed: int
    n_paths: int
    batch_size: int = BATCH_SIZE
    lookahead: float = 1.0
    threads: int = 1
    triplet: CharTriplet = field(default_factory=lambda: HAWKES_TRIPLET)

    @property
    def curve(self) -> InputCurve:
        return self.g0

    @property
    def n_batches(self) -> int:
        return -(-self.n_paths // self.batch_size)

    def event_lists(self, index: int) -> list[np.ndarray]:
        start = index * self.batch_size
        stop = min(start + self.batch_size, self.n_paths)
        return [simulate_hawkes(self.g0, self.kernel, self.grid.horizon, self.seed, path_id, self.lookahead)
                for path_id in range(start, stop)]

    def batch(self, index: int) -> PathBatch:
        events = self.event_lists(index)
        nodes = self.grid.nodes
        X = np.stack([integrated_intensity(ev, self.g0, self.kernel, nodes) for ev in events])
        counts = np.stack([np.histogram(ev, bins=nodes)[0] for ev in events]).astype(float)
        MetricsRecorder.record_paths("hawkes", len(events))
        return PathBatch(grid=self.grid, X=X, Mc=np.zeros_like(X), jump_sum=counts, m1=1.0, b=1.0, events=events)

    def batches(self) -> Iterator[PathBatch]:
        return _generate_batches(self.batch, self.n_batches, self.threads)


def hawkes_population(
    g0: InputCurve,
    kernel: KernelSpec,
    grid: Grid,
    options: SimulationOptions = SimulationOptions(),
    threads: int = 1,
) -> HawkesPopulation:
    if not kernel.is_bounded_at_zero:
        raise KernelDomainError(f"{kernel.label} kernel is unbounded at 0; use a shifted or ExpSum kernel")
    return HawkesPopulation(g0=g0, kernel=kernel, grid=grid, seed=options.seed, n_paths=options.n_paths,
                            batch_size=options.batch_size, lookahead=options.lookahead, threads=threads)


def ks_exponential_test(inter_event_times: np.ndarray, rate: float) -> tuple[float, float]:
    """Kolmogorov-Smirnov statistic and p-value against Exp(rate)"""
    result = stats.kstest(np.asarray(inter_event_times, dtype=float), "expon", args=(0.0, 1.0 / rate))
    return float(result.statistic), float(result.pvalue)


# Markovian lift

@dataclass(frozen=True)
class LiftState:
    """Factors U_i of Y = g0 + sum_i w_i U_i, one row per path"""
    factors: np.ndarray
    weights: np.ndarray
    rates: np.ndarray

    def variance(self, g0_value: float) -> np.ndarray:
        return g0_value + self.factors @ self.weights

    def advance(self, dz: np.ndarray, dt: float, update: str) -> "LiftState":
        if update == "euler":
            factors = self.factors - self.rates * self.factors * dt + dz[:, None]
        else:
            decay = self.rates * dt
            factors = self.factors * np.exp(-decay) + _phi1(decay) * dz[:, None]
        return LiftState(factors=factors, weights=self.weights, rates=self.rates)


def _simulate_lift_batch(model: HestonModel, grid: Grid, rng: np.random.Generator, size: int,
                         options: SimulationOptions) -> PathBatch:
    kernel, triplet = model.kernel, model.triplet
    nu = triplet.nu
    b, c, rho = triplet.b, triplet.c, model.rho if triplet.c > 0 else 0.0
    m1, mass = nu.first_moment(), nu.total_mass()
    n, dt = grid.n_steps, grid.dt
    sqrt_dt = math.sqrt(dt)
    g0 = np.asarray(model.curve.g0(grid.nodes, kernel), dtype=float)

    state = LiftState(factors=np.zeros((size, len(kernel.terms))), weights=kernel.weights, rates=kernel.rates)
    X, Mc, Y, log_S = (np.zeros((size, n + 1)) for _ in range(4))
    log_S[:, 0] = math.log(model.S0)
    jump_sum = np.zeros((size, n))
    truncations = 0
    warned = False

    for k in range(n):
        y = state.variance(g0[k])
        Y[:, k] = y
        y_pos = np.maximum(y, 0.0)
        truncations += int(np.count_nonzero(y < 0))
        dW = rng.standard_normal(size) * sqrt_dt
        dB = rng.standard_normal(size) * sqrt_dt
        dX = y_pos * dt
        dMc = np.sqrt(c * y_pos) * dW

        if mass > 0:
            rate = mass * dX
            if not warned and rate.max() > options.jump_rate_warning:
                logger.warning(f"Jump probability per step up to {rate.max():.3f} at t={grid.nodes[k]:.4g}; refine the grid")
                warned = True
            jump_sum[:, k] = nu.sample_jump_sums(rng, rng.poisson(rate))

        dZ = b * dX + dMc + jump_sum[:, k] - m1 * dX
        state = state.advance(dZ, dt, options.factor_update)
        X[:, k + 1] = X[:, k] + dX
        Mc[:, k + 1] = Mc[:, k] + dMc
        log_S[:, k + 1] = (log_S[:, k] - 0.5 * dX + rho * np.sqrt(y_pos) * dW
                           + math.sqrt(1.0 - rho**2) * np.sqrt(y_pos) * dB)
    Y[:, n] = state.variance(g0[n])
    return PathBatch(grid=grid, X=X, Mc=Mc, jump_sum=jump_sum, m1=m1, b=b, Y=Y, log_S=log_S, truncations=truncations)


@dataclass(frozen=True)
class LiftPopulation:
    """Lift paths regenerated from (seed, batch index); memory stays bounded by one batch"""
    model: HestonModel
    grid: Grid
    seed: int
    n_paths: int
    options: SimulationOptions = field(default_factory=SimulationOptions)
    threads: int = 1

    @property
    def kernel(self) -> KernelSpec:
        return self.model.kernel

    @property
    def curve(self) -> InputCurve:
        return self.model.curve

    @property
    def triplet(self) -> CharTriplet:
        return self.model.triplet

    @property
    def n_batches(self) -> int:
        return -(-self.n_paths // self.options.batch_size)

    def batch(self, index: int) -> PathBatch:
        size = min(self.options.batch_size, self.n_paths - index * self.options.batch_size)
        result = _simulate_lift_batch(self.model, self.grid, _path_rng(self.seed, index), size, self.options)
        MetricsRecorder.record_paths("lift", size, result.truncations)
        if result.truncations:
            logger.debug(f"Lift batch {index}: {result.truncations} truncated variance values")
        return result

    def batches(self) -> Iterator[PathBatch]:
        return _generate_batches(self.batch, self.n_batches, self.threads)


def simulate_lift(
    model: HestonModel,
    grid: Grid,
    seed: int,
    n_paths: int,
    options: SimulationOptions = SimulationOptions(),
    threads: int = 1,
) -> LiftPopulation:
    """Euler full-truncation simulation of the Markovian lift of an ExpSum kernel"""
    if not isinstance(model.kernel, ExpSumKernel):
        raise UnsupportedKernelError(f"The lift needs an ExpSum kernel, got {model.kernel.label}; see fit_exp_sum")
    if not model.kernel.terms:
        raise UnsupportedKernelError("The lift needs at least one exponential factor")
    population = LiftPopulation(model=model, grid=grid, seed=seed, n_paths=n_paths, options=options,
                                threads=threads)
    logger.info(f"Lift population: {n_paths} paths, {len(model.kernel.terms)} factors, {grid.n_steps} steps")
    return population


Population = Union[HawkesPopulation, LiftPopulation]
Curve = Union[complex, float, CoefficientCurve]


def _curve(value: Curve) -> CoefficientCurve:
    return value if isinstance(value, BaseModel) else constant(value)


def path_functional(
    batch: PathBatch,
    f0: Curve,
    f1: Curve = 0.0,
    f2: Curve = 0.0,
    until: Optional[float] = None,
) -> np.ndarray:
    """R = int f0(T-s) dX_s + int f1(T-s) dM^c_s + int f2(T-s) dM^d_s on [0, until], left-point rule"""
    grid = batch.grid
    n_cells = grid.n_steps if until is None else int(round(until / grid.dt))
    left = grid.nodes[:n_cells]
    lag = grid.horizon - left
    total = np.zeros(batch.n_paths, dtype=complex)
    for curve, increments in ((f0, batch.dX), (f1, batch.dMc), (f2, batch.dMd)):
        curve = _curve(curve)
        if isinstance(curve, ConstantCoefficient) and curve.re == 0 and curve.im == 0:
            continue
        total += increments[:, :n_cells] @ curve.values(lag)
    return total


def mc_functionals(population: Population, specs: Sequence[tuple[Curve, Curve, Curve]]) -> list[MonteCarloEstimate]:
    """Empirical means of exp(R) for several (f0, f1, f2) in one pass over the population"""
    accumulators = [_Accumulator() for _ in specs]
    for batch in population.batches():
        for acc, (f0, f1, f2) in zip(accumulators, specs):
            acc.add(np.exp(path_functional(batch, f0, f1, f2)))
    return [acc.estimate() for acc in accumulators]


def mc_functional(population: Population, f0: Curve, f1: Curve = 0.0, f2: Curve = 0.0) -> MonteCarloEstimate:
    return mc_functionals(population, [(f0, f1, f2)])[0]


def mc_log_price_cf(population: LiftPopulation, v: Union[float, Sequence[float]]) -> Union[MonteCarloEstimate, list[MonteCarloEstimate]]:
    """E[exp(i v log S_T)] for one or several v"""
    scalar = np.ndim(v) == 0
    arguments = np.atleast_1d(np.asarray(v, dtype=float))
    accumulators = [_Accumulator() for _ in arguments]
    for batch in population.batches():
        terminal = batch.log_S[:, -1]
        for acc, arg in zip(accumulators, arguments):
            acc.add(np.exp(1j * arg * terminal))
    estimates = [acc.estimate() for acc in accumulators]
    return estimates[0] if scalar else estimates


def mc_call_price(population: LiftPopulation, strike: float) -> MonteCarloEstimate:
    acc = _Accumulator()
    for batch in population.batches():
        acc.add(np.maximum(np.exp(batch.log_S[:, -1]) - strike, 0.0))
    return acc.estimate()


def terminal_second_moment(population: Population, T: Optional[float] = None) -> float:
    """E[X_T^2]; X is non-decreasing so this is also E[sup_t X_t^2]"""
    acc = _Accumulator()
    for batch in population.batches():
        k = batch.grid.n_steps if T is None else int(round(T / batch.grid.dt))
        acc.add(batch.X[:, k] ** 2)
    return acc.estimate().mean.real


def modulus_bound_check(population: Population, kernel: KernelSpec, delta: float, T: float) -> tuple[float, float]:
    """Empirical E[w(delta)] of X - G0 on [0, T] and the a-priori right-hand side"""
    grid = population.grid
    lags = max(1, int(round(delta / grid.dt)))
    k_T = int(round(T / grid.dt))
    g_nodes = np.asarray(population.curve.G0(grid.nodes[:k_T + 1], kernel), dtype=float)

    modulus, squares = _Accumulator(), _Accumulator()
    for batch in population.batches():
        centred = batch.X[:, :k_T + 1] - g_nodes
        worst = np.zeros(batch.n_paths)
        for lag in range(1, min(lags, k_T) + 1):
            worst = np.maximum(worst, np.abs(centred[:, lag:] - centred[:, :-lag]).max(axis=1))
        modulus.add(worst)
        squares.add(batch.X[:, k_T] ** 2)

    lhs = modulus.estimate().mean.real
    second = squares.estimate().mean.real
    kappa = population.triplet.moment_constant
    ik = lambda t: float(kernel.integral(t))
    rhs = 3.0 * (kappa**2 + kappa) * (1.0 + second) * (2.0 * ik(delta) + ik(T) - ik(T + delta))
    logger.info(f"Modulus check delta={delta}: lhs={lhs:.4e}, rhs={rhs:.4e}")
    return lhs, rhs
