"""Run configuration and the experiment suite behind the command-line subcommands"""

import json
import logging
import math
from pathlib import Path
from typing import Callable, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.affine_volterra.config import settings
from src.affine_volterra.errors import ConfigError, UnsupportedKernelError, VolterraError
from src.affine_volterra.kernels import (
    ML_MAX_ABS_Z,
    ML_TERM_BUDGET,
    ML_TOLERANCE,
    ConstantKernel,
    ExpSumKernel,
    FractionalKernel,
    GammaKernel,
    Grid,
    KernelSpec,
    ShiftedKernel,
    fit_exp_sum,
    l1_distance,
    match_fractional_resolvent,
    resolvent_second_kind,
)
from src.affine_volterra.metrics import MetricsRecorder
from src.affine_volterra.model import AffineInKCurve, CharTriplet, InputCurve, check_admissibility
from src.affine_volterra.reports import ExperimentReport
from src.affine_volterra.riccati import (
    CoefficientCurve,
    ConstantCoefficient,
    RiccatiOptions,
    RiccatiSpec,
    check_sign_condition,
    solve_riccati,
    transform_exponent,
)
from src.affine_volterra.simulate import (
    SimulationOptions,
    hawkes_population,
    mc_call_price,
    mc_functionals,
    mc_log_price_cf,
    modulus_bound_check,
    ks_exponential_test,
    rescaled_integrated_intensity,
    simulate_hawkes,
    simulate_lift,
    terminal_second_moment,
)
from src.affine_volterra.transforms import (
    HestonModel,
    PricingOptions,
    classical_heston_cf,
    fourier_laplace,
    hawkes_limit_laplace,
    hawkes_mean_count,
    hawkes_prelimit_laplace,
    hawkes_scaling_kernels,
    hawkes_transform,
    heston_cf_logprice,
    heston_cf_sweep,
    heston_joint_transform,
    price_european_calls,
)

logger = logging.getLogger(__name__)

Command = Literal[
    "riccati", "cf", "price", "hawkes-simulate", "hawkes-validate", "lift-validate",
    "stability", "convergence", "modulus-check", "hawkes-scaling", "admissibility", "schema",
]

SIGN_SLACK = 1e-8
HERMITIAN_TOLERANCE = 1e-12
HERMITIAN_SAMPLES = 3
ROUNDOFF_FLOOR = 1e-14


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class MittagLefflerOptions(_Frozen):
    tolerance: float = Field(ML_TOLERANCE, gt=0)
    term_budget: int = Field(ML_TERM_BUDGET, gt=0)
    max_abs_z: float = Field(ML_MAX_ABS_Z, gt=0)


class Coefficients(_Frozen):
    f0: CoefficientCurve = ConstantCoefficient()
    f1: CoefficientCurve = ConstantCoefficient()
    f2: CoefficientCurve = ConstantCoefficient()


class ScalingParameters(_Frozen):
    lam: float = Field(1.0, gt=0)
    kappa: float = Field(1.0, gt=0)
    mu: float = Field(1.0, gt=0)
    mc_paths: int = Field(0, ge=0)


class ExperimentParameters(_Frozen):
    n_se: float = Field(3.0, gt=0)
    n_sequence: list[int] = [4, 16, 64]
    delta_sequence: list[float] = [0.1, 0.05, 0.025]
    h_sequence: list[float] = [0.1, 0.05, 0.025]
    grid_sequence: list[int] = [64, 128, 256, 512]
    reference_factor: int = Field(4, ge=2)
    v_min: float = -10.0
    v_max: float = 10.0
    n_points: int = Field(41, ge=1)
    v_values: list[float] = [1.0, 2.0]
    hawkes_arguments: list[float] = [0.5, 1.0]
    strikes: list[float] = [0.8, 0.9, 1.0, 1.1, 1.2]
    transform_argument: float = 1.0
    approximation: Literal["shifted", "expsum", "identity"] = "shifted"
    criterion: Literal["auto", "limit", "cauchy"] = "auto"
    n_factors: int = Field(3, ge=1)
    refine_fit: bool = False
    reference_tolerance: float = Field(1e-4, gt=0)
    mc_check: bool = False
    expect_admissible: Optional[bool] = None
    scaling: ScalingParameters = ScalingParameters()


class RunConfig(_Frozen):
    """Everything one subcommand needs; unknown keys are rejected"""
    command: Command = "riccati"
    kernel: KernelSpec = ConstantKernel(value=1.0)
    triplet: CharTriplet = CharTriplet(b=0.0, c=0.0)
    input_curve: InputCurve = AffineInKCurve(x0=1.0, theta=0.0)
    grid: Grid = Grid(horizon=1.0, n_steps=256)
    S0: float = Field(1.0, gt=0)
    rho: float = Field(0.0, ge=-1, le=1)
    ignore_rho_without_diffusion: bool = False
    coefficients: Coefficients = Coefficients()
    riccati: RiccatiOptions = RiccatiOptions()
    simulation: SimulationOptions = SimulationOptions()
    pricing: PricingOptions = PricingOptions()
    mittag_leffler: MittagLefflerOptions = MittagLefflerOptions()
    experiment: ExperimentParameters = ExperimentParameters()
    output_dir: Optional[Path] = None

    @property
    def horizon(self) -> float:
        return self.grid.horizon

    @property
    def riccati_grid(self) -> Grid:
        return Grid(horizon=self.grid.horizon, n_steps=self.riccati.n_steps)

    def heston_model(self, kernel: Optional[KernelSpec] = None) -> HestonModel:
        return HestonModel(S0=self.S0, rho=self.rho, kernel=kernel or self.kernel, curve=self.input_curve,
                           triplet=self.triplet, ignore_rho_without_diffusion=self.ignore_rho_without_diffusion)

    def riccati_spec(self) -> RiccatiSpec:
        c = self.coefficients
        return RiccatiSpec(f0=c.f0, f1=c.f1, f2=c.f2, triplet=self.triplet)


def _locate(text: str, loc: tuple) -> int:
    """Best-effort JSON line of a pydantic error location"""
    position = 0
    for key in loc:
        if isinstance(key, str):
            found = text.find(f'"{key}"', position)
            if found >= 0:
                position = found
    return text.count("\n", 0, position) + 1


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from e
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        lines = [f"{path}:{_locate(text, err['loc'])}: {'.'.join(map(str, err['loc']))}: {err['msg']}"
                 for err in e.errors()]
        raise ConfigError("Invalid run config:\n" + "\n".join(lines)) from e


def lift_kernel(kernel: KernelSpec, config: RunConfig) -> ExpSumKernel:
    """ExpSum kernel used by the lift: exact for Constant/ExpSum, fitted for Fractional/Gamma"""
    if isinstance(kernel, ExpSumKernel):
        return kernel
    if isinstance(kernel, ConstantKernel):
        return ExpSumKernel(terms=[(kernel.value, 0.0)] if kernel.value > 0 else [])
    if isinstance(kernel, (FractionalKernel, GammaKernel)):
        return fit_exp_sum(kernel, config.experiment.n_factors, config.horizon,
                           refine=config.experiment.refine_fit, cache_dir=settings.fit_cache_dir)
    raise UnsupportedKernelError(f"No Markovian lift for {kernel.label}")


def _is_zero_kernel(kernel: KernelSpec) -> bool:
    if isinstance(kernel, ConstantKernel):
        return kernel.value == 0
    return isinstance(kernel, ExpSumKernel) and not kernel.terms


def _non_increasing(values: list[float]) -> bool:
    return all(b <= a for a, b in zip(values[:-1], values[1:]))


def _decreasing(values: list[float], floor: float) -> bool:
    """Strict decrease; neighbours both at or below floor count as converged"""
    return all(b < a or (a <= floor and b <= floor) for a, b in zip(values[:-1], values[1:]))


# Subcommands

def run_riccati(config: RunConfig, threads: int) -> ExperimentReport:
    report = ExperimentReport(command="riccati", threads=threads)
    spec = config.riccati_spec()
    grid = config.riccati_grid
    psi = solve_riccati(spec, config.kernel, grid, config.riccati)
    for t, value in zip(grid.nodes, psi.values):
        report.add_row(t=t, re_psi=value.real, im_psi=value.imag)

    report.check("psi_zero_at_origin", psi.values[0] == 0)
    report.check("no_blowup", not psi.blowup)
    if check_sign_condition(spec, grid) and not psi.blowup:
        report.check("sign_preserved", float(np.max(psi.values.real)) <= SIGN_SLACK)
    if not psi.blowup:
        exponent = transform_exponent(psi, spec, config.input_curve, config.kernel)
        transform = np.exp(exponent)
        report.artifacts["exponent"] = pd.DataFrame([{
            "re_exponent": exponent.real, "im_exponent": exponent.imag,
            "re_transform": transform.real, "im_transform": transform.imag,
        }])
    return report


def run_cf(config: RunConfig, threads: int) -> ExperimentReport:
    report = ExperimentReport(command="cf", threads=threads)
    model = config.heston_model()
    e = config.experiment
    v = np.linspace(e.v_min, e.v_max, e.n_points)
    values = heston_cf_sweep(model, v, config.horizon, config.riccati, threads)

    reference = None
    try:
        reference = classical_heston_cf(model, v, config.horizon)
    except UnsupportedKernelError:
        logger.debug("No classical reference for this model")

    for i, (arg, value) in enumerate(zip(v, values)):
        row = {"arg": arg, "re": value.real, "im": value.imag}
        if reference is not None:
            row.update(ref_re=reference[i].real, ref_im=reference[i].imag)
        report.add_row(**row)

    # solve -v directly; the sweep derives negative arguments by conjugation
    positive = v[v > 0]
    picks = positive[np.unique(np.linspace(0, len(positive) - 1, HERMITIAN_SAMPLES).astype(int))] if len(positive) else []
    symmetric = True
    for arg in picks:
        value = heston_cf_logprice(model, arg, config.horizon, config.riccati)
        mirrored = heston_cf_logprice(model, -arg, config.horizon, config.riccati)
        symmetric &= abs(mirrored - np.conj(value)) <= HERMITIAN_TOLERANCE * max(1.0, abs(value))
    report.check("hermitian", bool(symmetric))
    report.check("modulus_at_most_one", bool(np.all(np.abs(values) <= 1.0 + 1e-10)))
    martingale = heston_joint_transform(model, 0.0, 1.0, config.horizon, config.riccati)
    report.check("martingale", abs(martingale - model.S0) <= 1e-12 * model.S0)
    if reference is not None:
        relative = np.abs(values - reference) / np.abs(reference)
        report.check("classical_reference", bool(np.max(relative) <= e.reference_tolerance))
    return report


def run_price(config: RunConfig, threads: int) -> ExperimentReport:
    report = ExperimentReport(command="price", seed=config.simulation.seed, threads=threads)
    model = config.heston_model()
    strikes = np.asarray(config.experiment.strikes, dtype=float)
    calls = price_european_calls(model, strikes, config.horizon, config.pricing, config.riccati, threads)
    puts = calls - model.S0 + strikes

    population = None
    if config.experiment.mc_check:
        lift_model = config.heston_model(lift_kernel(config.kernel, config))
        population = simulate_lift(lift_model, config.grid, config.simulation.seed,
                                   config.simulation.n_paths, config.simulation, threads)
    for strike, call, put in zip(strikes, calls, puts):
        row = {"strike": strike, "price": call, "put": put}
        if population is not None:
            estimate = mc_call_price(population, strike)
            row.update(mc_price=estimate.mean.real, mc_std_error=estimate.std_error)
            report.check(f"mc_price_{strike:g}", estimate.within(call, config.experiment.n_se))
        report.add_row(**row)
    report.check("prices_nonnegative", bool(np.all(calls >= 0) and np.all(puts >= -1e-12)))
    report.check("prices_below_spot", bool(np.all(calls <= model.S0)))
    return report


def run_hawkes_simulate(config: RunConfig, threads: int) -> ExperimentReport:
    sim = config.simulation
    report = ExperimentReport(command="hawkes-simulate", seed=sim.seed, threads=threads)
    population = hawkes_population(config.input_curve, config.kernel, config.grid, sim, threads)

    event_rows, counts, gaps = [], [], []
    for index in range(population.n_batches):
        start = index * population.batch_size
        for offset, events in enumerate(population.event_lists(index)):
            counts.append(len(events))
            gaps.append(np.diff(np.concatenate([[0.0], events])))
            event_rows.extend({"path": start + offset, "t": t} for t in events)
    counts = np.asarray(counts, dtype=float)
    for path, count in enumerate(counts):
        report.add_row(path=path, n_events=int(count))
    report.artifacts["events"] = pd.DataFrame(event_rows, columns=["path", "t"])

    mean = float(counts.mean())
    std_error = float(counts.std(ddof=1) / math.sqrt(len(counts))) if len(counts) > 1 else 0.0
    MetricsRecorder.record_std_error("hawkes-simulate", std_error)
    expected = hawkes_mean_count(config.input_curve, config.kernel, config.horizon)
    report.notes.append(f"mean count {mean:.6g} +- {std_error:.3g}, renewal mean {expected:.6g}")
    report.check("mean_count", abs(mean - expected) <= config.experiment.n_se * max(std_error, 1e-12))

    poisson = _is_zero_kernel(config.kernel) and isinstance(config.input_curve, AffineInKCurve) \
        and config.input_curve.theta == 0 and config.input_curve.x0 > 0
    if poisson:
        pooled = np.concatenate(gaps)[:10_000] if gaps else np.zeros(0)
        if pooled.size > 1:
            statistic, p_value = ks_exponential_test(pooled, config.input_curve.x0)
            report.notes.append(f"KS statistic {statistic:.4g}, p-value {p_value:.4g} on {pooled.size} gaps")
            report.check("ks_exponential", p_value >= 0.01)
    return report


def run_hawkes_validate(config: RunConfig, threads: int) -> ExperimentReport:
    sim = config.simulation
    report = ExperimentReport(command="hawkes-validate", seed=sim.seed, threads=threads)
    population = hawkes_population(config.input_curve, config.kernel, config.grid, sim, threads)
    arguments = config.experiment.hawkes_arguments
    estimates = mc_functionals(population, [(1j * a, 0.0, 1j * a) for a in arguments])
    for a, estimate in zip(arguments, estimates):
        value = hawkes_transform(0.0, 1j * a, config.input_curve, config.kernel, config.horizon, config.riccati)
        within = estimate.within(value, config.experiment.n_se)
        MetricsRecorder.record_std_error("hawkes-validate", estimate.std_error)
        report.add_row(a=a, re=value.real, im=value.imag, mc_re=estimate.mean.real, mc_im=estimate.mean.imag,
                       mc_std_error=estimate.std_error, within=within)
        report.check(f"hawkes_cf_{a:g}", within)
    return report


def run_lift_validate(config: RunConfig, threads: int) -> ExperimentReport:
    sim = config.simulation
    report = ExperimentReport(command="lift-validate", seed=sim.seed, threads=threads)
    model = config.heston_model(lift_kernel(config.kernel, config))
    population = simulate_lift(model, config.grid, sim.seed, sim.n_paths, sim, threads)
    arguments = config.experiment.v_values
    estimates = mc_log_price_cf(population, arguments)
    for v, estimate in zip(arguments, estimates):
        value = heston_joint_transform(model, 0.0, 1j * v, config.horizon, config.riccati)
        within = estimate.within(value, config.experiment.n_se)
        MetricsRecorder.record_std_error("lift-validate", estimate.std_error)
        report.add_row(v=v, re=value.real, im=value.imag, mc_re=estimate.mean.real, mc_im=estimate.mean.imag,
                       mc_std_error=estimate.std_error, within=within)
        report.check(f"lift_cf_{v:g}", within)

    full = terminal_second_moment(population)
    half_paths = max(1, sim.n_paths // 2)
    half = terminal_second_moment(simulate_lift(model, config.grid, sim.seed, half_paths, sim, threads))
    report.artifacts["moments"] = pd.DataFrame([
        {"n_paths": half_paths, "second_moment": half},
        {"n_paths": sim.n_paths, "second_moment": full},
    ])
    report.check("second_moment_finite", math.isfinite(full) and math.isfinite(half))
    report.notes.append(f"kernel {model.kernel.model_dump_json()}")
    if sim.dump_paths:
        report.artifacts["paths"] = population.batch(0).to_frame()
    return report


def stability_harness(
    kernel: KernelSpec,
    family: str,
    n_sequence: list[int],
    argument: float,
    config: RunConfig,
) -> ExperimentReport:
    """Transforms E[e^{i a X_T}] along an approximating kernel sequence K^n -> K"""
    report = ExperimentReport(command="stability")
    T = config.horizon
    grid = config.riccati_grid
    curve, triplet = config.input_curve, config.triplet

    def member(n: int) -> KernelSpec:
        if family == "shifted":
            return ShiftedKernel(base=kernel, h=1.0 / n)
        if family == "expsum":
            return fit_exp_sum(kernel, n, T, refine=config.experiment.refine_fit, cache_dir=settings.fit_cache_dir)
        return kernel

    def transform(k: KernelSpec) -> complex:
        return fourier_laplace(1j * argument, 0.0, 0.0, triplet, k, curve, T, config.riccati)

    limit = transform(kernel)
    limit_resolvent = resolvent_second_kind(kernel, grid).integral
    g_limit = np.asarray(curve.G0(grid.nodes, kernel), dtype=float)

    values, errors = [], []
    for n in n_sequence:
        approx = member(n)
        value = transform(approx)
        q = resolvent_second_kind(approx, grid).integral
        row = {
            "n": n,
            "l1_distance": l1_distance(approx, kernel, grid),
            "resolvent_distance": float(np.sum(np.abs(np.diff(q) - np.diff(limit_resolvent)))),
            "g0_distance": float(np.max(np.abs(np.asarray(curve.G0(grid.nodes, approx), dtype=float) - g_limit))),
            "re": value.real,
            "im": value.imag,
            "error": abs(value - limit),
            "cauchy_difference": abs(value - values[-1]) if values else math.nan,
        }
        values.append(value)
        errors.append(row["error"])
        report.add_row(**row)

    criterion = config.experiment.criterion
    if criterion == "auto":
        singular_l2 = isinstance(kernel, (FractionalKernel, GammaKernel)) and kernel.H <= 0
        criterion = "cauchy" if singular_l2 else "limit"
    floor = ROUNDOFF_FLOOR * max(1.0, abs(limit))
    if criterion == "limit":
        report.check("transform_errors_decreasing", _decreasing(errors, floor))
    else:
        differences = [abs(b - a) for a, b in zip(values[:-1], values[1:])]
        report.check("cauchy_differences_decreasing", _decreasing(differences, floor))
    report.notes.append(f"limit transform {limit.real:.12g}{limit.imag:+.12g}i, criterion {criterion}")

    if isinstance(kernel, FractionalKernel) and kernel.H < 0.5:
        ml = config.mittag_leffler
        numeric = resolvent_second_kind(kernel, grid)
        mask = grid.nodes >= 0.1 * T
        sign, closed, deviation = match_fractional_resolvent(kernel.scale, kernel.H, grid.nodes[mask],
                                                             numeric.values[mask], ml.tolerance,
                                                             ml.term_budget, ml.max_abs_z)
        report.artifacts["resolvent"] = pd.DataFrame({"t": grid.nodes[mask], "numeric": numeric.values[mask],
                                                      "mittag_leffler": closed, "sign": sign})
        report.notes.append(f"Mittag-Leffler argument sign {sign:+d}, max relative deviation {deviation:.3e}")
    return report


def run_stability(config: RunConfig, threads: int) -> ExperimentReport:
    e = config.experiment
    report = stability_harness(config.kernel, e.approximation, e.n_sequence, e.transform_argument, config)
    report.threads = threads
    return report


def convergence_study(spec: RiccatiSpec, kernel: KernelSpec, grids: list[Grid], options: RiccatiOptions,
                      reference_factor: int = 4) -> ExperimentReport:
    """Max-node errors of solve_riccati on a dyadic grid sequence against a finer reference"""
    report = ExperimentReport(command="convergence")
    finest = grids[-1].refine(reference_factor)
    reference = solve_riccati(spec, kernel, finest, options)
    if reference.blowup:
        report.check("reference_solved", False)
        return report

    errors = []
    for grid in grids:
        psi = solve_riccati(spec, kernel, grid, options)
        stride = finest.n_steps // grid.n_steps
        error = float(np.max(np.abs(psi.values - reference.values[::stride]))) if not psi.blowup else math.inf
        order = math.log2(errors[-1] / error) if errors and error > 0 and math.isfinite(error) else math.nan
        errors.append(error)
        report.add_row(n_steps=grid.n_steps, dt=grid.dt, max_error=error, order=order)

    floor = 1e-12 * max(1.0, float(np.max(np.abs(reference.values))))
    if all(err <= floor for err in errors):
        report.check("quadrature_exact", True)
    elif kernel.is_bounded_at_zero:
        ratios = [a / b for a, b in zip(errors[:-1], errors[1:]) if b > floor]
        report.check("halving_ratio", bool(ratios) and min(ratios) >= 1.6)
    else:
        orders = [row["order"] for row in report.rows[1:] if row["max_error"] > floor]
        report.check("positive_order", bool(orders) and min(orders) > 0)
    return report


def run_convergence(config: RunConfig, threads: int) -> ExperimentReport:
    grids = [Grid(horizon=config.horizon, n_steps=n) for n in config.experiment.grid_sequence]
    report = convergence_study(config.riccati_spec(), config.kernel, grids, config.riccati,
                               config.experiment.reference_factor)
    report.threads = threads
    return report


def run_modulus_check(config: RunConfig, threads: int) -> ExperimentReport:
    sim = config.simulation
    report = ExperimentReport(command="modulus-check", seed=sim.seed, threads=threads)
    model = config.heston_model(lift_kernel(config.kernel, config))
    population = simulate_lift(model, config.grid, sim.seed, sim.n_paths, sim, threads)
    rhs_values = []
    for delta in config.experiment.delta_sequence:
        lhs, rhs = modulus_bound_check(population, model.kernel, delta, config.horizon)
        rhs_values.append(rhs)
        report.add_row(delta=delta, lhs=lhs, rhs=rhs, holds=lhs <= rhs)
        report.check(f"modulus_bound_{delta:g}", lhs <= rhs)
    ordered = sorted(zip(config.experiment.delta_sequence, rhs_values), reverse=True)
    report.check("rhs_decreasing_in_delta", _non_increasing([r for _, r in ordered]))
    return report


def run_hawkes_scaling(config: RunConfig, threads: int) -> ExperimentReport:
    report = ExperimentReport(command="hawkes-scaling", seed=config.simulation.seed, threads=threads)
    p = config.experiment.scaling
    T = config.horizon
    limit = hawkes_limit_laplace(p.lam, p.kappa, p.mu, T, options=config.riccati)
    errors = []
    for n in config.experiment.n_sequence:
        prelimit = hawkes_prelimit_laplace(p.lam, p.kappa, p.mu, n, T, options=config.riccati)
        row = {"n": n, "prelimit": prelimit.real, "limit": limit.real, "error": abs(prelimit - limit)}
        errors.append(row["error"])
        if p.mc_paths:
            kernel, _ = hawkes_scaling_kernels(p.lam, p.kappa, n)
            g0 = AffineInKCurve(x0=p.mu, theta=0.0)
            end = Grid(horizon=T, n_steps=1)
            samples = np.array([
                rescaled_integrated_intensity(
                    simulate_hawkes(g0, kernel, n * T, config.simulation.seed, path_id, config.simulation.lookahead),
                    n, end, g0, kernel)[-1]
                for path_id in range(p.mc_paths)
            ])
            weights = np.exp(-samples)
            mean, std_error = float(weights.mean()), float(weights.std(ddof=1) / math.sqrt(len(weights)))
            row.update(mc=mean, mc_std_error=std_error)
            report.check(f"mc_prelimit_{n}", abs(mean - prelimit.real) <= config.experiment.n_se * std_error)
        report.add_row(**row)
    report.check("errors_decreasing", _decreasing(errors, 0.0))
    return report


def run_admissibility(config: RunConfig, threads: int) -> ExperimentReport:
    report = ExperimentReport(command="admissibility", threads=threads)
    results = check_admissibility(config.input_curve, config.kernel, config.experiment.h_sequence, config.grid)
    for result in results:
        report.add_row(h=result.h, min_residual=result.min_residual, admissible=result.admissible)
    report.artifacts["residual"] = pd.concat([r.to_frame() for r in results], ignore_index=True)
    expected = config.experiment.expect_admissible
    if expected is not None:
        report.check("admissibility_as_expected", all(r.admissible for r in results) == expected)
    return report


def run_schema(config: RunConfig, threads: int) -> ExperimentReport:
    report = ExperimentReport(command="schema", threads=threads)
    schema = RunConfig.model_json_schema()
    for name, prop in schema.get("properties", {}).items():
        report.add_row(field=name, type=prop.get("type") or prop.get("$ref") or "union",
                       default=json.dumps(prop.get("default")))
    return report


COMMANDS: dict[str, Callable[[RunConfig, int], ExperimentReport]] = {
    "riccati": run_riccati,
    "cf": run_cf,
    "price": run_price,
    "hawkes-simulate": run_hawkes_simulate,
    "hawkes-validate": run_hawkes_validate,
    "lift-validate": run_lift_validate,
    "stability": run_stability,
    "convergence": run_convergence,
    "modulus-check": run_modulus_check,
    "hawkes-scaling": run_hawkes_scaling,
    "admissibility": run_admissibility,
    "schema": run_schema,
}


def run(config: RunConfig, threads: int = 1) -> ExperimentReport:
    """Dispatch one subcommand; failures inside it become a failed check"""
    logger.info(f"Running {config.command} (seed={config.simulation.seed}, threads={threads})")
    try:
        report = COMMANDS[config.command](config, threads)
    except (VolterraError, ValueError) as e:
        logger.error(f"{config.command} failed: {e}")
        report = ExperimentReport(command=config.command, threads=threads)
        report.notes.append(str(e))
        report.check("completed", False)
    return report
