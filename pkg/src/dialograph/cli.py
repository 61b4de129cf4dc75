"""Command-line entry point: ``dialograph <command> [options]``.

Exit codes: 0 success, 1 usage/config/input error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .backbone import MrdanOracle, RemoteOracle
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_value
from .corpus import (
    CorpusError,
    CorpusPools,
    generate_structural,
    generate_synthetic,
    load_corpus,
    load_sidecar,
    save_corpus,
    save_sidecar,
    split_pools,
)
from .experiments import DEFAULT_SWEEPS, EvalSet, SweepSpec, run_ssl, run_sweep
from .graph import GraphError
from .model import ModelError, build_graphs, init_params
from .ssl import SslError
from .trainer import TrainingError, evaluate

log = logging.getLogger("dialograph")

USAGE_ERRORS = (ConfigError, CorpusError, CheckpointError, GraphError, ModelError, SslError, FileNotFoundError)
SWEEP_FIELDS = ["parameter", "value", "seed", "accuracy", "macro_f1", "weighted_f1"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, metavar="PATH", help="config file")
    p.add_argument("--seed", type=int, default=d, metavar="N")
    p.add_argument("--threads", type=int, default=d, metavar="N", help="cap on worker/BLAS threads")
    p.add_argument("--out", default=d, metavar="DIR", help="output directory")
    p.add_argument(
        "--set", action="append", default=argparse.SUPPRESS if suppress else [], metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="dialograph",
        description="Train, pseudo-label and inspect typed-graph dialogue classifiers.",
        epilog="exit codes: 0 success, 1 usage/config/input error, 2 runtime failure",
    )
    parser.add_argument("--version", action="version", version=__version__)
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="supervised training")
    p.add_argument("--no-mrdan", action="store_true", help="mean-pool projected features instead of MR-DAN layers")

    p = sub.add_parser("ssl", parents=[common], help="training with adaptive pseudo-labeling")
    p.add_argument("--no-mrdan", action="store_true")
    p.add_argument("--threshold-mode", choices=["class_specific", "global_only"])

    p = sub.add_parser("sweep", parents=[common], help="sensitivity sweep")
    p.add_argument("--param", required=True, choices=sorted(DEFAULT_SWEEPS))
    p.add_argument("--values", help="comma-separated values (default: the standard grid)")
    p.add_argument("--repeats", type=int, default=1, help="seeds per value, starting at --seed")
    p.add_argument("--mode", choices=["train", "ssl"], default="train")

    p = sub.add_parser("graph-dump", parents=[common], help="print one dialogue graph as JSON")
    p.add_argument("--id", required=True, dest="dialogue_id")
    p.add_argument("--checkpoint", help="checkpoint directory (default: initial parameters)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint directory (default: OUT/checkpoint)")

    p = sub.add_parser("gen-synth", parents=[common], help="write a synthetic corpus and ground-truth sidecar")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = parse_value(value)
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.threads is not None:
        overrides["run.threads"] = args.threads
    if args.out is not None:
        overrides["run.out"] = args.out
    if getattr(args, "no_mrdan", False):
        overrides["model.use_mrdan"] = False
    if getattr(args, "threshold_mode", None):
        overrides["ssl.threshold_mode"] = args.threshold_mode
    return load_config(args.config, overrides=overrides)


def load_data(cfg: RunConfig) -> tuple[CorpusPools, dict[str, int], EvalSet]:
    c = cfg["corpus"]
    truth: dict[str, int] = {}
    if c["train_path"]:
        path = Path(c["train_path"])
        if not path.exists():
            raise CorpusError(f"corpus file not found: {path}")
        pools = load_corpus(path)
    else:
        s = cfg["synth"]
        if s["kind"] == "gaussian":
            pools, truth = generate_synthetic(cfg.synth_spec())
        elif s["kind"] == "structural":
            n = s["utterance_count_range"][1]
            if n < 4 or n % 4:
                raise ConfigError(
                    f"structural corpora use synth.utterance_count_range[1] as the dialogue length; {n} is not a multiple of 4"
                )
            per = s["dialogues_per_class"]
            if not isinstance(per, int):
                raise ConfigError("structural corpora need an integer synth.dialogues_per_class")
            pools = generate_structural(per, s["feature_dim"], n, s["noise_std"], cfg.seed)
            if s["unlabeled_fraction"] > 0:
                pools, truth = split_pools(pools, 1.0 - s["unlabeled_fraction"], cfg.seed)
        else:
            raise ConfigError(f"unknown synth.kind {s['kind']!r} (gaussian or structural)")
    if c["sidecar_path"]:
        truth.update(load_sidecar(c["sidecar_path"]))
    if c["labeled_fraction"] < 1.0:
        pools, moved = split_pools(pools, c["labeled_fraction"], cfg.seed)
        truth.update(moved)
    if c["eval_path"]:
        ev = load_corpus(c["eval_path"], (pools.feature_dim, pools.num_classes))
        eval_set = EvalSet(ev.labeled, truth, "eval")
    elif pools.unlabeled and all(d.id in truth for d in pools.unlabeled):
        eval_set = EvalSet(pools.unlabeled, truth, "unlabeled")
    else:
        eval_set = EvalSet(pools.labeled, {}, "train")
    return pools, truth, eval_set


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run_training(args, cfg: RunConfig, use_ssl: bool) -> int:
    pools, truth, eval_set = load_data(cfg)
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model_config(pools.feature_dim, pools.num_classes)
    gcfg = cfg.graph_config()
    tcfg = cfg.train_config()
    scfg = cfg.ssl_config() if use_ssl else None
    if use_ssl and not pools.unlabeled:
        raise CorpusError("ssl needs an unlabeled pool (set corpus.labeled_fraction or provide unlabeled records)")
    (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    logs = {"epoch": (out / "train_log.jsonl").open("w", encoding="utf-8")}
    if use_ssl:
        logs["round"] = (out / "rounds.jsonl").open("w", encoding="utf-8")

    def on_record(kind, rec):
        logs[kind].write(json.dumps(rec, sort_keys=True) + "\n")
        if kind == "epoch":
            log.info("epoch %d loss %.4f lr %.3g", rec["epoch"], rec["loss"], rec["lr_last"])
        else:
            log.info("round %d promoted %s", rec["round"], rec["promoted_per_class"])

    oracle_factory = None
    b = cfg["backbone"]
    if use_ssl and b["oracle"] == "remote":
        if not b["endpoint"]:
            raise ConfigError("backbone.oracle = remote needs backbone.endpoint")

        def oracle_factory(trainer):
            src = MrdanOracle(trainer.params, mcfg, gcfg, trainer.theta)
            return RemoteOracle(b["endpoint"], b["template"], src, b["timeout_ms"], b["token"] or None, b["max_in_flight"])

    elif b["oracle"] != "mrdan" and use_ssl:
        raise ConfigError(f"unknown backbone.oracle {b['oracle']!r} (mrdan or remote)")
    try:
        res = run_ssl(
            pools, mcfg, gcfg, tcfg, scfg,
            init_seed=cfg.seed, truth=truth, eval_set=eval_set,
            log_metrics_each_epoch=True, oracle_factory=oracle_factory, on_record=on_record,
        )
    finally:
        for f in logs.values():
            f.close()
    save_checkpoint(res.params, mcfg, out / "checkpoint")
    _write_json(out / "checkpoint" / "graph_state.json", {"theta": res.theta})
    _write_json(out / "metrics.json", {"split": eval_set.name, "metrics": res.metrics.to_json()})
    print(json.dumps({"split": eval_set.name, "accuracy": res.metrics.accuracy, "macro_f1": res.metrics.macro_f1,
                      "weighted_f1": res.metrics.weighted_f1}))
    return 0


def cmd_train(args, cfg):
    return _run_training(args, cfg, use_ssl=False)


def cmd_ssl(args, cfg):
    return _run_training(args, cfg, use_ssl=True)


def cmd_sweep(args, cfg):
    pools, truth, eval_set = load_data(cfg)
    default = DEFAULT_SWEEPS[args.param]
    if args.values:
        cast = int if args.param in ("speaker_window", "num_heads") else float
        try:
            values = tuple(cast(v) for v in args.values.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad --values for {args.param}: {args.values}") from exc
    else:
        values = tuple(default)
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    try:
        spec = SweepSpec(args.param, values, tuple(range(cfg.seed, cfg.seed + args.repeats)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    mcfg = cfg.model_config(pools.feature_dim, pools.num_classes)
    scfg = cfg.ssl_config() if args.mode == "ssl" else None
    rows = run_sweep(spec, pools, mcfg, cfg.graph_config(), cfg.train_config(), eval_set, scfg, truth)
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    with (out / "sweep.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print((out / "sweep.csv").read_text(encoding="utf-8"), end="")
    return 0


def _checkpoint_or_init(args, cfg, pools):
    mcfg = cfg.model_config(pools.feature_dim, pools.num_classes)
    theta = cfg["graph"]["similarity_threshold"]
    ckpt = getattr(args, "checkpoint", None)
    if ckpt:
        params, _ = load_checkpoint(ckpt, expected=mcfg)
        state = Path(ckpt) / "graph_state.json"
        if state.exists() and cfg["graph"]["theta_mode"] != "fixed":
            theta = json.loads(state.read_text(encoding="utf-8"))["theta"]
        return params, mcfg, theta
    return init_params(mcfg, cfg.seed), mcfg, theta


def cmd_graph_dump(args, cfg):
    pools, _, eval_set = load_data(cfg)
    found = {d.id: d for d in list(pools.all_dialogues()) + list(eval_set.dialogues)}
    if args.dialogue_id not in found:
        raise CorpusError(f"unknown dialogue id {args.dialogue_id!r}")
    params, mcfg, theta = _checkpoint_or_init(args, cfg, pools)
    graph = build_graphs([found[args.dialogue_id]], params, mcfg, cfg.graph_config(), theta)[0]
    print(json.dumps(graph.to_json()))
    return 0


def cmd_eval(args, cfg):
    pools, truth, eval_set = load_data(cfg)
    if not args.checkpoint:
        args.checkpoint = str(Path(cfg["run"]["out"]) / "checkpoint")
    params, mcfg, theta = _checkpoint_or_init(args, cfg, pools)
    metrics = evaluate(eval_set.dialogues, params, mcfg, cfg.graph_config(), eval_set.truth, theta)
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    payload = {"split": eval_set.name, "metrics": metrics.to_json()}
    _write_json(out / "eval_metrics.json", payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_gen_synth(args, cfg):
    pools, truth, _ = load_data(cfg)
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(pools, out / "corpus.jsonl")
    save_sidecar(truth, out / "truth.jsonl")
    print(json.dumps({"corpus": str(out / "corpus.jsonl"), "sidecar": str(out / "truth.jsonl"),
                      "labeled": len(pools.labeled), "unlabeled": len(pools.unlabeled)}))
    return 0


COMMANDS = {
    "train": cmd_train,
    "ssl": cmd_ssl,
    "sweep": cmd_sweep,
    "graph-dump": cmd_graph_dump,
    "eval": cmd_eval,
    "gen-synth": cmd_gen_synth,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"dialograph: error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"dialograph: config error: {exc}", file=sys.stderr)
        return 1
    try:
        with threadpool_limits(limits=cfg["run"]["threads"]):
            return COMMANDS[args.command](args, cfg)
    except USAGE_ERRORS as exc:
        print(f"dialograph: error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, RuntimeError, ValueError, OSError) as exc:
        print(f"dialograph: runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
