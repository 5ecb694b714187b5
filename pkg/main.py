import argparse
from dataclasses import replace
import logging
from pathlib import Path
import sys
import time
from typing import List, Optional

from calibration import CalibrationTarget, calibrate
from config import Config, configure_logging
from dataset import chrono_split, generate_synthetic, load_dataset
from errors import ConfigError, ParsimError
from evaluation import evaluate_topk
from experiment_config import ExperimentConfig, dump_costs, load_config
from numerics import SeededRng
from report_exporter import (
    combined_report,
    eval_frame,
    export_to_excel,
    loss_curve_frame,
    report_frame,
    residual_frame,
    timeline_frame,
    write_csv,
    write_report_markdown,
)
from result_cache import SimulationCache
from simulator import tune_micro_batches
from sweep import simulate_rows
from trainer import RecModel, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _out_dir(args: argparse.Namespace, cfg: Optional[ExperimentConfig] = None) -> Path:
    if args.out is not None:
        out = Path(args.out)
    elif cfg is not None:
        out = Path(cfg.output.directory)
    else:
        out = Config.OUTPUT_DIR
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    if not 0 <= seed < 2**64:
        raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def cmd_simulate(args: argparse.Namespace) -> int:
    start_total = time.time()
    config_path = Path(args.config)
    cfg = load_config(config_path)
    costs = cfg.resolve_costs(base_dir=config_path.parent, override=args.costs)
    rows = cfg.simulation_rows()
    if not rows:
        raise ConfigError("strategies: no rows to simulate")
    _seed(args, cfg)

    if args.tune_micro_batches:
        print(f"\n[0/3] Tuning micro-batch counts over {cfg.simulation.micro_batch_candidates}...")
        tuned = []
        for row in rows:
            best, _ = tune_micro_batches(
                row.strategy, row.topology, costs, row.global_batch, cfg.simulation.micro_batch_candidates
            )
            print(f"  {row.name}: M={best}")
            tuned.append(replace(row, strategy=replace(row.strategy, micro_batches=best)))
        rows = tuned

    cache = SimulationCache() if cfg.simulation.cache else None
    if cache is not None:
        stats = cache.get_cache_stats()
        print(f"\nCache info: {stats['total']} rows simulated before")
    print(f"\n[1/3] Simulating {len(rows)} strategies with {cfg.simulation.max_workers} workers...")
    results = simulate_rows(
        rows,
        costs,
        iterations=cfg.simulation.iterations,
        trace_iterations=cfg.simulation.trace_iterations,
        max_workers=cfg.simulation.max_workers,
        cache=cache,
    )
    failed = [r for r in results if r["status"] == "error"]
    if failed:
        raise ParsimError("; ".join(f"{r['row'].name}: {r['error']}" for r in failed))

    print("\n[2/3] Results:")
    for r in results:
        report = r["report"]
        print(
            f"  {r['row'].name:<20} {report.throughput:>12,.1f} samples/s  {report.speedup:>6.2f}x  "
            f"comm {100 * report.comm_share:5.1f}%{'  (cached)' if r['from_cache'] else ''}"
        )

    out = _out_dir(args, cfg)
    formats = args.format or cfg.output.formats
    frame = report_frame(results)
    written = []
    print(f"\n[3/3] Writing {', '.join(formats)} reports to {out}...")
    if "csv" in formats:
        written.append(write_csv(frame, out / "report.csv"))
    if "md" in formats:
        written.append(write_report_markdown(frame, out / "report.md"))
    if "xlsx" in formats:
        written.append(export_to_excel(frame, out / "report.xlsx"))
    written.append(write_csv(timeline_frame(results), out / "timeline.csv", float_format="%.9f"))

    print(f"\nCOMPLETE - {time.time() - start_total:.2f} seconds")
    for path in written:
        print(f"  {path}")
    return EXIT_OK


def _load_interactions(cfg: ExperimentConfig, config_path: Path, seed: int):
    section = cfg.trainer.dataset
    if section.synthetic is not None:
        s = section.synthetic
        return generate_synthetic(s.num_users, s.num_items, s.num_interactions, seed)
    path = Path(section.path)
    if not path.is_absolute():
        path = config_path.parent / path
    return load_dataset(path)


def cmd_train(args: argparse.Namespace) -> int:
    start_total = time.time()
    config_path = Path(args.config)
    cfg = load_config(config_path)
    if cfg.trainer is None:
        raise ConfigError("trainer: section missing")
    seed = _seed(args, cfg)
    section = cfg.trainer
    out = _out_dir(args, cfg)

    print("\n[1/3] Loading interactions...")
    ds = _load_interactions(cfg, config_path, seed)
    split = chrono_split(ds, section.ratios)
    print(
        f"  {len(ds)} interactions, {ds.num_users} users, {ds.num_items} items "
        f"({len(split.train)}/{len(split.validation)}/{len(split.test)})"
    )

    curves, evals = {}, {}
    if args.eval_only:
        print(f"\n[2/3] Evaluating {len(section.variants)} saved models...")
        for variant in section.variants:
            model = RecModel.load(out / f"model_{variant.name}.npz")
            evals[variant.name] = evaluate_topk(model, split, section.eval.k, section.eval.negatives, seed)
    else:
        h = section.hyper.to_hyper()
        initial = RecModel.init(ds.num_users, ds.num_items, section.model.dim, SeededRng(seed))
        print(f"\n[2/3] Training {len(section.variants)} variants for {h.steps} steps...")
        for variant in section.variants:
            started = time.time()
            result = train(
                initial,
                split,
                variant.to_strategy(),
                h,
                seed,
                loss_every=section.loss_every,
                max_workers=section.max_workers,
                max_staleness=variant.max_staleness,
            )
            result.model.save(out / f"model_{variant.name}.npz")
            curves[variant.name] = result.loss_curve
            evals[variant.name] = evaluate_topk(result.model, split, section.eval.k, section.eval.negatives, seed)
            logger.info(
                "%s: EF identity error %.3e, max staleness %d, dropped %d",
                variant.name, result.ef_identity_error, result.max_staleness_seen, result.dropped_updates,
            )
            print(f"  [{time.time() - started:.2f}s] {variant.name}: final loss {result.loss_curve[-1].loss:.4f}"
                  if result.loss_curve else f"  {variant.name}: no steps")

    print(f"\n[3/3] Writing outputs to {out}...")
    if curves:
        write_csv(loss_curve_frame(curves), out / "loss_curve.csv", float_format="%.8f")
    write_csv(eval_frame(evals), out / "eval.csv")
    for name, r in evals.items():
        print(f"  {name:<20} HR@{r.k}={r.hr_at_10:.4f}  NDCG@{r.k}={r.ndcg_at_10:.4f}  ({r.num_eval_users} users)")

    print(f"\nCOMPLETE - {time.time() - start_total:.2f} seconds")
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    config_path = Path(args.config)
    cfg = load_config(config_path)
    if cfg.calibration is None:
        raise ConfigError("calibration: section missing")
    costs = cfg.resolve_costs(base_dir=config_path.parent)
    rows = {row.name: row for row in cfg.simulation_rows()}
    targets = [
        CalibrationTarget(
            name=anchor.strategy,
            strategy=rows[anchor.strategy].strategy,
            topology=rows[anchor.strategy].topology,
            global_batch=rows[anchor.strategy].global_batch,
            observed_throughput=anchor.throughput,
        )
        for anchor in cfg.calibration.anchors
    ]

    print(f"\n[1/2] Fitting {', '.join(cfg.calibration.free_params)} to {len(targets)} anchors...")
    result = calibrate(targets, cfg.calibration.free_params, costs)

    out = _out_dir(args, cfg)
    (out / "calibrated_costs.yaml").write_text(dump_costs(result.costs), encoding="utf-8")
    observed = {t.name: t.observed_throughput for t in targets}
    write_csv(residual_frame(observed, result.residuals), out / "calibration_residuals.csv")

    print(f"\n[2/2] Residuals (objective {result.objective:.3e}, {result.evaluations} evaluations):")
    for name, r in result.residuals.items():
        print(f"  {name:<20} {100 * r:+7.2f}%")
    worst = max(abs(r) for r in result.residuals.values())
    if worst > cfg.calibration.tolerance:
        print(
            f"error: worst residual {100 * worst:.1f}% exceeds tolerance {100 * cfg.calibration.tolerance:.0f}%",
            file=sys.stderr,
        )
        return EXIT_RUNTIME
    print(f"\nFitted costs: {out / 'calibrated_costs.yaml'}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    text = combined_report([Path(d) for d in args.run_dirs])
    out = _out_dir(args)
    path = out / "combined_report.md"
    path.write_text(text, encoding="utf-8")
    print(f"Combined report: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parsim", description="Distributed-training parallelism simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate the strategy rows of a config")
    sim.add_argument("--config", required=True)
    sim.add_argument("--costs", help="fitted costs file, overrides the config's costs")
    sim.add_argument("--out")
    sim.add_argument("--format", action="append", choices=["csv", "md", "xlsx"])
    sim.add_argument("--seed", type=int)
    sim.add_argument("--tune-micro-batches", action="store_true")
    sim.set_defaults(handler=cmd_simulate)

    tr = sub.add_parser("train", help="train the recommender variants of a config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--eval-only", action="store_true")
    tr.set_defaults(handler=cmd_train)

    cal = sub.add_parser("calibrate", help="fit cost parameters to anchor throughputs")
    cal.add_argument("--config", required=True)
    cal.add_argument("--out")
    cal.set_defaults(handler=cmd_calibrate)

    rep = sub.add_parser("report", help="combine simulate runs into one markdown report")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--out")
    rep.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ParsimError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
