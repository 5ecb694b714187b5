"""Least-squares fit of cost parameters to observed throughputs."""
from dataclasses import dataclass
import logging
import math
from typing import Sequence

from scipy.optimize import minimize_scalar

from collectives import Topology
from config import Config
from errors import CalibrationError, ParsimError
from simulator import CostParams, _simulate
from strategies import StrategyConfig

logger = logging.getLogger(__name__)

# name -> (lower, upper, search in log space)
FREE_PARAM_BOUNDS: dict[str, tuple[float, float, bool]] = {
    "compute_time_per_sample_per_device": (1e-9, 10.0, True),
    "activation_bytes_per_microbatch": (1.0, 1e12, True),
    "gradient_bytes": (1.0, 1e13, True),
    "backward_to_forward_ratio": (0.1, 10.0, True),
    "sync_skew": (0.0, 2.0, False),
}

CONVERGED = 1e-12
# smallest objective drop that moves a parameter, relative to max(1, objective)
MIN_IMPROVEMENT = 1e-12
_PENALTY = 1e6


@dataclass(frozen=True)
class CalibrationTarget:
    name: str
    strategy: StrategyConfig
    topology: Topology
    global_batch: int
    observed_throughput: float

    @property
    def is_baseline(self) -> bool:
        s = self.strategy
        return s.data_degree == 1 and s.tensor_degree == 1 and s.pipeline_stages == 1


@dataclass(frozen=True)
class CalibrationResult:
    costs: CostParams
    residuals: dict[str, float]  # simulated / observed - 1
    objective: float
    evaluations: int


def simulated_throughput(target: CalibrationTarget, costs: CostParams) -> float:
    profile = _simulate(target.strategy, target.topology, costs, target.global_batch)
    return target.global_batch / profile.effective_time


def residuals(targets: Sequence[CalibrationTarget], costs: CostParams) -> dict[str, float]:
    return {t.name: simulated_throughput(t, costs) / t.observed_throughput - 1 for t in targets}


def _validate(targets: Sequence[CalibrationTarget], free_params: Sequence[str]) -> None:
    if not targets:
        raise CalibrationError("calibration needs at least one anchor")
    if not any(t.is_baseline for t in targets):
        raise CalibrationError("at least one anchor must be the single-device baseline")
    for t in targets:
        if not t.observed_throughput > 0:
            raise CalibrationError(f"anchor {t.name!r} has non-positive throughput {t.observed_throughput}")
    if len(targets) > 1:
        first = targets[0]
        same = all(
            (t.strategy, t.topology, t.global_batch, t.observed_throughput)
            == (first.strategy, first.topology, first.global_batch, first.observed_throughput)
            for t in targets
        )
        if same:
            raise CalibrationError("all calibration anchors are identical")
    if not free_params:
        raise CalibrationError("no free parameters to fit")
    unknown = [p for p in free_params if p not in FREE_PARAM_BOUNDS]
    if unknown:
        raise CalibrationError(f"cannot fit {unknown}; choose from {sorted(FREE_PARAM_BOUNDS)}")


def calibrate(
    targets: Sequence[CalibrationTarget],
    free_params: Sequence[str],
    costs: CostParams,
    sweeps: int = Config.CALIBRATION_SWEEPS,
) -> CalibrationResult:
    """
    Fit free cost parameters to anchor throughputs

    Minimises the sum of squared relative throughput errors by coordinate
    descent, each coordinate solved with bounded Brent search (log space for
    scale parameters). A coordinate only moves when the objective drops by
    more than MIN_IMPROVEMENT, so refitting fitted parameters returns them
    unchanged.

    Args:
        targets: Anchors, at least one of them the single-device baseline
        free_params: CostParams fields to fit
        costs: Starting parameters; the other fields stay fixed
        sweeps: Maximum coordinate-descent passes

    Returns:
        CalibrationResult with the fitted parameters and per-anchor residuals

    Raises:
        CalibrationError: degenerate anchors or unknown parameters
    """
    _validate(targets, free_params)
    evaluations = 0

    def objective(candidate: CostParams) -> float:
        nonlocal evaluations
        evaluations += 1
        try:
            return sum(r * r for r in residuals(targets, candidate).values())
        except ParsimError:
            return _PENALTY

    best = objective(costs)
    if best <= CONVERGED:
        logger.info("calibration already converged (objective %.3e)", best)
        return CalibrationResult(costs, residuals(targets, costs), best, evaluations)

    for sweep in range(sweeps):
        moved = False
        for name in free_params:
            lo, hi, log_space = FREE_PARAM_BOUNDS[name]

            def decode(u: float, log_space: bool = log_space) -> float:
                return math.exp(u) if log_space else u

            def along(u: float, name: str = name, base: CostParams = costs) -> float:
                return objective(base.with_values(**{name: decode(u)}))

            bounds = (math.log(lo), math.log(hi)) if log_space else (lo, hi)
            res = minimize_scalar(along, bounds=bounds, method="bounded", options={"xatol": 1e-12, "maxiter": 500})
            if best - res.fun > MIN_IMPROVEMENT * max(1.0, best):
                costs = costs.with_values(**{name: decode(float(res.x))})
                best = float(res.fun)
                moved = True
            logger.debug("sweep %d %s=%g objective=%.3e", sweep, name, getattr(costs, name), best)
        if best <= CONVERGED or not moved:
            break
    else:
        logger.warning("calibration stopped after %d sweeps without settling", sweeps)

    fitted = residuals(targets, costs)
    logger.info("calibration objective %.3e after %d evaluations", best, evaluations)
    return CalibrationResult(costs, fitted, best, evaluations)
