"""Prometheus Metrics Definition"""

from pathlib import Path

from prometheus_client import REGISTRY, Counter, Gauge, Histogram, write_to_textfile

# Riccati solver metrics
riccati_solves = Counter(
    'volterra_riccati_solves_total',
    'Total Riccati-Volterra solves',
    ['kernel']
)

riccati_blowups = Counter(
    'volterra_riccati_blowups_total',
    'Riccati-Volterra solves that exceeded the modulus cap',
    ['kernel']
)

riccati_solve_time = Histogram(
    'volterra_riccati_solve_seconds',
    'Wall time of a (batched) Riccati-Volterra solve',
    ['kernel'],
    buckets=(0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0, 30.0)
)

# Simulation metrics
paths_simulated = Counter(
    'volterra_paths_simulated_total',
    'Total simulated paths',
    ['simulator']
)

truncations = Counter(
    'volterra_truncations_total',
    'Euler steps where the spot variance was truncated at zero'
)

mc_std_error = Gauge(
    'volterra_mc_std_error',
    'Standard error of the latest Monte Carlo estimate',
    ['experiment']
)

# Experiment checks
checks = Counter(
    'volterra_checks_total',
    'Declared pass/fail checks',
    ['check', 'status']
)


class MetricsRecorder:
    """Helper class to record metrics"""

    @staticmethod
    def record_riccati_solve(kernel: str, duration: float, n_blowups: int = 0):
        riccati_solves.labels(kernel=kernel).inc()
        riccati_solve_time.labels(kernel=kernel).observe(duration)
        if n_blowups:
            riccati_blowups.labels(kernel=kernel).inc(n_blowups)

    @staticmethod
    def record_paths(simulator: str, n_paths: int, n_truncations: int = 0):
        paths_simulated.labels(simulator=simulator).inc(n_paths)
        if n_truncations:
            truncations.inc(n_truncations)

    @staticmethod
    def record_std_error(experiment: str, value: float):
        mc_std_error.labels(experiment=experiment).set(value)

    @staticmethod
    def record_check(check: str, passed: bool):
        checks.labels(check=check, status="pass" if passed else "fail").inc()

    @staticmethod
    def write_textfile(path: Path):
        """Dump the default registry in textfile-collector format"""
        write_to_textfile(str(path), REGISTRY)
