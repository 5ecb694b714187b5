from dataclasses import asdict, dataclass
import logging
import time
from typing import Dict, List, Optional
from concurrent.futures import ThreadPoolExecutor, as_completed

from collectives import Topology
from errors import ParsimError
from result_cache import SimulationCache
from simulator import CostParams, simulate_run
from strategies import StrategyConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimulationRow:
    name: str
    scheme: str
    global_batch: int
    strategy: StrategyConfig
    topology: Topology
    nodes: int | None = None


def row_inputs(row: SimulationRow, costs: CostParams, iterations: int, trace_iterations: int) -> Dict:
    return {
        "strategy": asdict(row.strategy),
        "topology": asdict(row.topology),
        "costs": asdict(costs),
        "global_batch": row.global_batch,
        "iterations": iterations,
        "trace_iterations": trace_iterations,
    }


def simulate_single_row(
    row: SimulationRow,
    index: int,
    costs: CostParams,
    iterations: int = 1,
    trace_iterations: int = 0,
    cache: Optional[SimulationCache] = None,
) -> Dict:
    """
    Simulate one strategy row

    Args:
        row: Strategy row to simulate
        index: Position of the row in the config
        costs: Cost-model parameters
        iterations: Iterations to average over
        trace_iterations: Leading iterations to trace
        cache: SimulationCache instance (optional)

    Returns:
        Dict with index, row, report, status, error, time and from_cache
    """
    start = time.time()
    key = SimulationCache.row_key(row_inputs(row, costs, iterations, trace_iterations)) if cache else None

    if cache and cache.is_cached(key):
        return {
            "index": index,
            "row": row,
            "report": cache.get(key),
            "status": "cached",
            "error": None,
            "time": 0,
            "from_cache": True,
        }

    result = {
        "index": index,
        "row": row,
        "report": None,
        "status": "pending",
        "error": None,
        "time": 0,
        "from_cache": False,
    }

    try:
        result["report"] = simulate_run(row.strategy, row.topology, costs, row.global_batch, iterations, trace_iterations)
        result["status"] = "success"
    except ParsimError as e:
        result["status"] = "error"
        result["error"] = str(e)
    finally:
        result["time"] = time.time() - start
        if cache and result["status"] == "success":
            cache.put(key, row.name, row.scheme, result["report"])

    return result


def simulate_rows(
    rows: List[SimulationRow],
    costs: CostParams,
    iterations: int = 1,
    trace_iterations: int = 0,
    max_workers: int = 1,
    cache: Optional[SimulationCache] = None,
) -> List[Dict]:
    """
    Simulate strategy rows on a thread pool

    Each engine is independent, so rows run concurrently; results come back
    in config order.

    Args:
        rows: Strategy rows
        costs: Cost-model parameters shared by every row
        iterations: Iterations per row
        trace_iterations: Leading iterations to trace per row
        max_workers: Number of parallel workers
        cache: SimulationCache instance (optional)

    Returns:
        List of per-row results sorted by index
    """
    results = []

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        futures = {
            executor.submit(simulate_single_row, row, idx, costs, iterations, trace_iterations, cache): (row, idx)
            for idx, row in enumerate(rows)
        }

        for future in as_completed(futures):
            row, idx = futures[future]
            result = future.result()
            results.append(result)

            if result["status"] == "error":
                logger.error("#%d %s: %s", idx, row.name, result["error"])
            else:
                report = result["report"]
                logger.info(
                    "[%.2fs] #%d %s: %.1f samples/s (%.2fx)%s",
                    result["time"], idx, row.name, report.throughput, report.speedup,
                    " cached" if result["from_cache"] else "",
                )

    results.sort(key=lambda x: x["index"])
    return results
