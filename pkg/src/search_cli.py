#!/usr/bin/env python3
"""
Command-line entry point for the bi-mask prunability search.
Every command reads a key=value run configuration, writes its artifacts
into the output directory and returns a process exit status.
"""
import argparse
import logging
import os
import sys

# Add src to path if needed
if os.path.dirname(os.path.abspath(__file__)) not in sys.path:
    sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

# Thread caps must be in the environment before numpy loads
from bimask_search.utils.common import configure_threads  # noqa: E402

configure_threads()

import pandas as pd  # noqa: E402

from bimask_search.data_handlers.csv_handler import load_frame, save_frame, write_plot_data  # noqa: E402
from bimask_search.data_handlers.export_handler import ARCHITECTURE_FILE, export_run, load_json, save_json  # noqa: E402
from bimask_search.data_handlers.synthetic import dataset_from_spec, generate_dataset, save_dataset  # noqa: E402
from bimask_search.models.checkpoint import checkpoint_exists, load_checkpoint, load_model, save_checkpoint  # noqa: E402
from bimask_search.models.vit import SiteAlignmentError, ToyViT, materialize_architecture  # noqa: E402
from bimask_search.search.cost_model import CalibrationError, cost_report  # noqa: E402
from bimask_search.search.regularizers import theorem_suite  # noqa: E402
from bimask_search.search.pruner import replay_events  # noqa: E402
from bimask_search.search.space import SearchSpaceError, build_space, build_specs, export_architecture  # noqa: E402
from bimask_search.training.baseline import run_baseline  # noqa: E402
from bimask_search.training.gradcheck_suite import run_gradcheck  # noqa: E402
from bimask_search.training.search_log import load_events, save_events  # noqa: E402
from bimask_search.training.trainer import (  # noqa: E402
    BUDGET_MISS,
    DivergenceError,
    evaluate,
    pretrain,
    retrain,
    run_search,
)
from bimask_search.utils.common import ensure_directories  # noqa: E402
from bimask_search.utils.config import (  # noqa: E402
    ConfigError,
    attach_run_log,
    detach_run_log,
    load_config,
    save_resolved_config,
    setup_logging,
    with_overrides,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_BUDGET_MISS = 2
EXIT_DIVERGED = 3

ABLATION_VARIANTS = {
    "bimask": {},
    "no-pmim": {"pmim.mode": "none"},
    "constant-mask": {"pmim.mode": "constant"},
    "ordinal": {"trainer.sharing": "ordinal"},
    "uniform-alpha": {"trainer.alpha_init": "uniform"},
    "no-entropy": {"regularizers.use_entropy": False},
    "no-variance": {"regularizers.use_variance": False},
    "no-importance": {"regularizers.use_importance": False},
    "baseline": {},
}
ABLATION_COLUMNS = ["seed", "variant", "status", "accuracy_pre", "accuracy_post", "flops_fraction", "params_fraction"]


def _prepare(args):
    """Load the config, create the output directory and snapshot the resolved config"""
    overrides = {"trainer.seed": args.seed, "trainer.tau": args.tau, "output_dir": args.out}
    config = load_config(args.config, overrides)
    build_specs(config.model, config.space)
    ensure_directories(config.output_dir)
    save_resolved_config(config, config.output_dir)
    return config


def _path(config, name):
    return os.path.join(config.output_dir, name)


def _initial_weights(args, config, data):
    """Weights to start from: --init checkpoint, else a freshly pretrained supernet"""
    if args.init:
        params, _ = load_checkpoint(args.init)
        return params
    model = ToyViT(config.model, seed=config.trainer.seed)
    pretrain(config, model, data)
    return model.state_dict()


def cmd_gendata(args, config):
    out_dir = config.data.path or _path(config, "data")
    dataset = generate_dataset(config.data)
    return EXIT_OK if save_dataset(dataset, config.data, out_dir) else EXIT_FAILED


def cmd_pretrain(args, config):
    data = dataset_from_spec(config.data)
    model = ToyViT(config.model, seed=config.trainer.seed)
    history = pretrain(config, model, data)
    metrics = evaluate(model, data)
    metrics["history"] = history
    ok = save_checkpoint(model, _path(config, "pretrained")) and save_json(metrics, _path(config, "pretrain_metrics.json"))
    return EXIT_OK if ok else EXIT_FAILED


def cmd_search(args, config):
    data = dataset_from_spec(config.data)
    init_state = load_checkpoint(args.init)[0] if args.init else None
    try:
        result, _ = run_search(config, data, init_state)
    except DivergenceError as e:
        logger.error(f"Search diverged: {e}")
        model = ToyViT(config.model)
        model.load_state_dict(e.snapshot)
        save_checkpoint(model, _path(config, "last_good"), {"diverged_at": e.step})
        return EXIT_DIVERGED

    pruned = materialize_architecture(result.architecture, result.model)
    metrics = evaluate(pruned, data)
    metrics.update({"status": result.status, "g_fraction": result.g_fraction, "iterations": result.iterations,
                    "tau": config.trainer.tau, "prune_events": len(result.events)})
    ok = result.log.save(_path(config, "search_log.jsonl"))
    ok = save_events(result.events, _path(config, "prune_events.jsonl")) and ok
    ok = save_checkpoint(result.model, _path(config, "supernet")) and ok
    ok = save_checkpoint(pruned, _path(config, "pruned"), {"status": result.status}) and ok
    ok = export_run(config.output_dir, result.architecture, metrics, cost_report(result.architecture, config.model)) and ok
    if not ok:
        return EXIT_FAILED
    return EXIT_BUDGET_MISS if result.status == BUDGET_MISS else EXIT_OK


def cmd_retrain(args, config):
    source = args.checkpoint or _path(config, "pruned")
    if not checkpoint_exists(source):
        logger.error(f"Checkpoint not found: {source}")
        return EXIT_FAILED
    data = dataset_from_spec(config.data)
    model = load_model(source, config.model)
    metrics = retrain(config, model, data)
    ok = save_checkpoint(model, _path(config, "retrained")) and save_json(metrics, _path(config, "retrain_metrics.json"))
    return EXIT_OK if ok else EXIT_FAILED


def cmd_eval(args, config):
    source = args.checkpoint
    if source is None:
        source = _path(config, "retrained") if checkpoint_exists(_path(config, "retrained")) else _path(config, "pruned")
    if not checkpoint_exists(source):
        logger.error(f"Checkpoint not found: {source}")
        return EXIT_FAILED
    data = dataset_from_spec(config.data)
    metrics = evaluate(load_model(source, config.model), data)
    metrics["checkpoint"] = source
    return EXIT_OK if save_json(metrics, _path(config, "eval_metrics.json")) else EXIT_FAILED


def cmd_baseline(args, config):
    data = dataset_from_spec(config.data)
    model = ToyViT(config.model, seed=config.trainer.seed)
    model.load_state_dict(_initial_weights(args, config, data))
    pruned, export, info = run_baseline(config, model, data)
    metrics = retrain(config, pruned, data)
    metrics.update(info)
    ok = save_json(export, _path(config, "baseline_architecture.json"))
    ok = save_json(metrics, _path(config, "baseline_metrics.json")) and ok
    ok = save_checkpoint(pruned, _path(config, "baseline_retrained")) and ok
    return EXIT_OK if ok else EXIT_FAILED


def cmd_theorems(args, config):
    dims = tuple(int(d) for d in args.dims.split(","))
    report = theorem_suite(args.samples, dims, seed=config.trainer.seed)
    save_json(report, _path(config, "theorems.json"))
    return EXIT_OK if report["passed"] else EXIT_FAILED


def cmd_gradcheck(args, config):
    report = run_gradcheck(seed=config.trainer.seed)
    save_json(report, _path(config, "gradcheck.json"))
    return EXIT_OK if report["passed"] else EXIT_FAILED


def cmd_plotdata(args, config):
    log_path = args.log or _path(config, "search_log.jsonl")
    if not os.path.exists(log_path):
        logger.error(f"Search log not found: {log_path}")
        return EXIT_FAILED
    ok, _ = write_plot_data(log_path, _path(config, "plots"))
    return EXIT_OK if ok else EXIT_FAILED


def cmd_replay(args, config):
    """Rebuild the architecture from prune_events.jsonl and compare it with architecture.json"""
    events_path = args.log or _path(config, "prune_events.jsonl")
    exported = load_json(_path(config, ARCHITECTURE_FILE))
    if not os.path.exists(events_path) or exported is None:
        logger.error(f"Replay needs {events_path} and {_path(config, ARCHITECTURE_FILE)}")
        return EXIT_FAILED
    tc = config.trainer
    space = build_space(config.model, config.space, seed=tc.seed, alpha_init=tc.alpha_init,
                        init_std=tc.init_std, sharing=tc.sharing)
    replayed = export_architecture(replay_events(space, load_events(events_path)))
    expected = {entry["site"]: entry["kept_units"] for entry in exported["submodules"]}
    mismatched = sorted(entry["site"] for entry in replayed["submodules"]
                        if expected.get(entry["site"]) != entry["kept_units"])
    report = {"events": events_path, "matches": not mismatched, "mismatched_sites": mismatched,
              "cost": cost_report(replayed, config.model)}
    if mismatched:
        logger.error(f"Replayed architecture differs at: {', '.join(mismatched)}")
    ok = save_json(report, _path(config, "replay.json"))
    return EXIT_OK if ok and not mismatched else EXIT_FAILED


def _ablation_row(seed, variant, status, pre, post, cost):
    return {"seed": seed, "variant": variant, "status": status, "accuracy_pre": pre, "accuracy_post": post,
            "flops_fraction": cost["flops_fraction"], "params_fraction": cost["params_fraction"]}


def cmd_ablate(args, config):
    """
    Search (or threshold-prune), retrain and tabulate every seed x variant

    Rows already present in ablation.csv are kept and their runs skipped,
    so an interrupted table resumes where it stopped.
    """
    variants = args.variants.split(",")
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        logger.error(f"Unknown ablation variants: {', '.join(unknown)}")
        return EXIT_FAILED
    table_path = _path(config, "ablation.csv")
    previous = load_frame(table_path, ABLATION_COLUMNS)
    done = set(zip(previous["seed"].astype(int), previous["variant"]))
    data = dataset_from_spec(config.data)
    rows = previous.to_dict("records")
    for seed in (int(s) for s in args.seeds.split(",")):
        pending = [v for v in variants if (seed, v) not in done]
        if not pending:
            logger.info(f"Ablation seed {seed}: every variant already tabulated")
            continue
        seeded = with_overrides(config, {"trainer.seed": seed})
        init_state = _initial_weights(args, seeded, data)
        for variant in pending:
            logger.info(f"Ablation run: seed {seed}, variant {variant}")
            run_config = with_overrides(seeded, ABLATION_VARIANTS[variant])
            try:
                if variant == "baseline":
                    model = ToyViT(run_config.model, seed=seed)
                    model.load_state_dict(init_state)
                    pruned, _, _ = run_baseline(run_config, model, data)
                    status = "baseline"
                else:
                    result, _ = run_search(run_config, data, init_state)
                    pruned = materialize_architecture(result.architecture, result.model)
                    status = result.status
            except DivergenceError as e:
                logger.error(f"seed {seed} variant {variant} diverged: {e}")
                continue
            metrics = retrain(run_config, pruned, data)
            rows.append(_ablation_row(seed, variant, status, metrics["accuracy_before"],
                                      metrics["accuracy_after"], metrics["cost"]))
    df = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
    if not df.empty:
        summary = df.groupby("variant")[["accuracy_pre", "accuracy_post", "flops_fraction"]].mean()
        logger.info(f"Ablation means:\n{summary.to_string()}")
    return EXIT_OK if save_frame(df, table_path, ABLATION_COLUMNS) else EXIT_FAILED


COMMANDS = {
    "search": cmd_search,
    "retrain": cmd_retrain,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "theorems": cmd_theorems,
    "gradcheck": cmd_gradcheck,
    "plotdata": cmd_plotdata,
    "gendata": cmd_gendata,
    "pretrain": cmd_pretrain,
    "ablate": cmd_ablate,
    "replay": cmd_replay,
}


def build_parser():
    parser = argparse.ArgumentParser(description="Bi-mask prunability search for toy vision transformers")
    parser.add_argument("command", choices=sorted(COMMANDS), help="Command to run")
    parser.add_argument("--config", help="Path to a key=value run configuration (defaults if omitted)")
    parser.add_argument("--out", help="Output directory (overrides output_dir)")
    parser.add_argument("--seed", type=int, help="Override trainer.seed")
    parser.add_argument("--tau", type=float, help="Override trainer.tau (FLOPs fraction)")
    parser.add_argument("--init", help="Checkpoint prefix to start from instead of pretraining")
    parser.add_argument("--checkpoint", help="Checkpoint prefix for retrain/eval")
    parser.add_argument("--log", help="Search log for plotdata, prune-event log for replay")
    parser.add_argument("--samples", type=int, default=1000, help="Samples per dimension for theorems")
    parser.add_argument("--dims", default="2,4,8,16", help="Comma-separated dimensions for theorems")
    parser.add_argument("--seeds", default="0,1,2", help="Comma-separated seeds for ablate")
    parser.add_argument("--variants", default="bimask,no-pmim,constant-mask,baseline", help="Comma-separated ablation variants")
    parser.add_argument("--log-level", default="INFO", help="Logging level")
    return parser


def main(argv=None):
    """Run one command and return its exit status"""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        config = _prepare(args)
    except (ConfigError, SearchSpaceError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_FAILED
    run_log = attach_run_log(config.output_dir)
    try:
        status = COMMANDS[args.command](args, config)
        logger.info(f"{args.command} finished with status {status}")
    except (SearchSpaceError, CalibrationError, SiteAlignmentError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_FAILED
    except (OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_FAILED
    finally:
        detach_run_log(run_log)
    return status


if __name__ == "__main__":
    sys.exit(main())
