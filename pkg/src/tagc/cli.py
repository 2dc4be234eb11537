"""Command-line entry point: ``tagc roundtrip | commreport | classify | train``.

Exit codes: 0 on success, 1 when an invariant check fails, 2 for usage or
config errors. Reports go to ``--out`` under fixed file names, with a short
table on stdout. The world's execution mode never appears in a report, so
sequential and parallel runs write the same bytes.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from tagc import configfile
from tagc.collectives import MODES, World
from tagc.hook import (
    POLICIES,
    PEELING_MIN_THETA,
    CompressionConfig,
    Segment,
    ShardSpec,
    classify_layers,
    comm_volume_model,
    flagged_share,
    measured_volume,
    tagc_reduce_shard,
)
from tagc.roundtrip import VALUE_KINDS, run_roundtrip
from tagc.trainer.experiment import TrainRun, corpus_sha256, loss_csv, run_experiment
from tagc.trainer.model import GPT2_SMALL, TinyModelConfig, layer_specs

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE = 0, 1, 2
PRESETS = {"gpt2-small": GPT2_SMALL, "tiny": TinyModelConfig()}
PROBE_N = 96_000  # divisible by 32 and by 3 * ratio for every supported ratio

log = logging.getLogger("tagc")


class UsageError(Exception):
    pass


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _compression(args, theta: float | None = None) -> CompressionConfig:
    try:
        return CompressionConfig(
            theta=args.theta if theta is None else theta,
            ratio=args.ratio,
            index_width=args.width,
            seed=args.seed,
            allow_estimation=args.allow_estimation,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- roundtrip --------------------------------------------------------------


def cmd_roundtrip(args) -> int:
    config = _compression(args)
    if args.world_size < 1 or (args.width == 4 and args.world_size > 15):
        raise UsageError("world size must be in 1..15 with the 4-bit index")
    kinds = VALUE_KINDS if args.values == "both" else (args.values,)
    reports = []
    for kind in kinds:
        try:
            rep = run_roundtrip(config, args.n, args.world_size, args.trials, args.seed, kind, args.mode)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        del rep["mode"]
        reports.append(rep)
        print(
            f"{kind:5s} peeled={rep['mean_peeled_fraction']:.6f} success={rep['peel_success_rate']:.4f} "
            f"unresolved={rep['unresolved_total']} max_abs={rep['max_abs_error']:.3g} "
            f"max_rel={rep['max_rel_error']:.3g} {'PASS' if rep['passed'] else 'FAIL'}"
        )
    report = {"reports": reports, "passed": all(r["passed"] for r in reports)}
    if args.out:
        _write(Path(args.out), "roundtrip.json", _dump_json(report))
    return EXIT_OK if report["passed"] else EXIT_INVARIANT


# -- commreport -------------------------------------------------------------


def _parse_point(text: str) -> tuple[int, int, float | None]:
    """``RATIO:WIDTH[:THETA]``, e.g. ``10:1`` or ``2:4:85``."""
    parts = text.split(":")
    try:
        if len(parts) not in (2, 3):
            raise ValueError
        ratio, width = int(parts[0]), int(parts[1])
        theta = float(parts[2]) if len(parts) == 3 else None
    except ValueError:
        raise UsageError(f"bad config {text!r}, expected RATIO:WIDTH[:THETA]") from None
    return ratio, width, theta


def probe_volume(config: CompressionConfig, world_size: int, n: int, seed: int, mode: str) -> dict:
    rng = np.random.default_rng(seed)
    grads = [rng.standard_normal(n).astype(np.float32) for _ in range(world_size)]
    accs = [np.zeros(n, np.float32) for _ in range(world_size)]
    shard = ShardSpec(0, 0, 0, n, (Segment("probe", 0, n, True),))
    with World(world_size, mode) as world:
        tagc_reduce_shard(shard, grads, accs, config, world)
        return measured_volume(world)


def cmd_commreport(args) -> int:
    if not args.configs:
        raise UsageError("commreport needs at least one RATIO:WIDTH config")
    rows = []
    for text in args.configs:
        ratio, width, theta = _parse_point(text)
        if theta is None:
            theta = PEELING_MIN_THETA.get(ratio, 0.0)
        try:
            config = CompressionConfig(theta=theta, ratio=ratio, index_width=width, seed=args.seed)
        except ValueError as exc:
            raise UsageError(f"{text}: {exc}") from None
        model = comm_volume_model(config, args.world_size)
        allreduce = comm_volume_model(config, args.world_size, mode="allreduce")
        measured = probe_volume(config, args.world_size, args.probe_n, args.seed, args.mode)
        rows.append(
            {
                "ratio": ratio,
                "width": width,
                "theta": theta,
                "index_bits": model["index_bits"],
                "sketch_bits": model["sketch_bits"],
                "total": model["total"],
                "factor": model["factor"],
                "allreduce_total": allreduce["total"],
                "allreduce_factor": allreduce["factor"],
                "measured_index_bits": measured["index_bits"],
                "measured_sketch_bits": measured["sketch_bits"],
                "measured_total": measured["total"],
                "match": measured == model,
            }
        )
    cols = list(rows[0])
    csv_lines = [",".join(cols)] + [",".join(str(r[c]) for c in cols) for r in rows]
    header = f"{'ratio':>5} {'width':>5} {'theta':>6} {'index':>6} {'sketch':>7} {'total':>7} {'factor':>7} {'allreduce':>9} {'ledger':>7} match"
    table = [header] + [
        f"{r['ratio']:>5} {r['width']:>5} {r['theta']:>6g} {r['index_bits']:>6g} {r['sketch_bits']:>7.4g} "
        f"{r['total']:>7.4g} {r['factor']:>7.3f} {r['allreduce_total']:>9.4g} {r['measured_total']:>7.4g} "
        f"{'yes' if r['match'] else 'MISMATCH'}"
        for r in rows
    ]
    text = "\n".join(table) + "\n"
    print(text, end="")
    report = {
        "world_size": args.world_size,
        "probe_n": args.probe_n,
        "seed": args.seed,
        "rows": rows,
        "passed": all(r["match"] for r in rows),
    }
    if args.out:
        out = Path(args.out)
        _write(out, "comm_report.csv", "\n".join(csv_lines) + "\n")
        _write(out, "comm_report.json", _dump_json(report))
        _write(out, "comm_report.txt", text)
    return EXIT_OK if report["passed"] else EXIT_INVARIANT


# -- classify ---------------------------------------------------------------


def cmd_classify(args) -> int:
    if (args.config is None) == (args.preset is None):
        raise UsageError("give exactly one of CONFIG or --preset")
    if args.preset:
        cfg = PRESETS[args.preset]
    else:
        cfg = configfile.model_config(configfile.load(args.config), args.config)
    layers = layer_specs(cfg)
    include = not args.exclude_out_proj
    flags = classify_layers(layers, args.policy, include)
    kinds: dict = {}
    for layer, flag in zip(layers, flags):
        entry = kinds.setdefault(layer.kind, {"parameters": 0, "flagged": 0})
        entry["parameters"] += layer.parameter_count
        entry["flagged"] += layer.parameter_count if flag else 0
    total = sum(k["parameters"] for k in kinds.values())
    flagged = sum(k["flagged"] for k in kinds.values())
    report = {
        "model": cfg.to_dict(),
        "policy": args.policy,
        "include_out_proj": include,
        "kinds": kinds,
        "total_parameters": total,
        "flagged_parameters": flagged,
        "flagged_share": flagged_share(layers, flags),
    }
    for kind, entry in kinds.items():
        print(f"{kind:22s} {entry['parameters']:>12,d} {entry['flagged']:>12,d}")
    print(f"{'total':22s} {total:>12,d} {flagged:>12,d}  share={report['flagged_share']:.4f}")
    if args.out:
        _write(Path(args.out), "classify.json", _dump_json(report))
    return EXIT_OK


# -- train ------------------------------------------------------------------


def _run_record(run: TrainRun) -> dict:
    d = run.to_dict()
    del d["mode"]
    return d


def _load_run(path: str, mode: str | None) -> TrainRun:
    if path.endswith(".json"):
        try:
            manifest = json.loads(Path(path).read_text())
            record = dict(manifest["run"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise configfile.ConfigFileError(path, None, f"not a train manifest: {exc}") from None
        try:
            run = TrainRun.from_dict(record)
        except (TypeError, ValueError) as exc:
            raise configfile.ConfigFileError(path, None, f"invalid run: {exc}") from None
        if manifest.get("corpus_sha256") not in (None, corpus_sha256()):
            raise configfile.ConfigFileError(path, None, "manifest was made with a different corpus")
    else:
        run = configfile.train_run(configfile.load(path), path)
    if mode is not None:
        record = run.to_dict()
        record["mode"] = mode
        run = TrainRun.from_dict(record)
    return run


def cmd_train(args) -> int:
    run = _load_run(args.config, args.mode)
    if args.steps is not None:
        record = run.to_dict()
        record["steps"] = args.steps
        run = TrainRun.from_dict(record)
    metrics = run_experiment(run)
    losses = loss_csv(metrics)
    ledger = {}
    for row in metrics["ledger"]:
        ledger[f"{row['op']}:{row['tag']}"] = row
    manifest = {
        "run": _run_record(run),
        "corpus_sha256": corpus_sha256(),
        "parameters": metrics["parameters"],
        "final_val_loss": metrics["final_val_loss"],
        "diverged": metrics["diverged"],
        "peel": metrics["peel"],
        "ledger": ledger,
        "final_parameters_sha256": metrics["final_parameters_sha256"],
        "loss_csv_sha256": hashlib.sha256(losses.encode()).hexdigest(),
    }
    out = Path(args.out)
    _write(out, "loss.csv", losses)
    _write(out, "manifest.json", _dump_json(manifest))
    final = metrics["final_val_loss"]
    print(f"steps={len(metrics['train_loss'])} final_val_loss={final if final is None else round(final, 6)}")
    if metrics["diverged"]:
        print(f"diverged at step {metrics['diverged']['step']}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tagc", description="Sketch-based gradient compression benchmarks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def world_flags(p, size=True):
        if size:
            p.add_argument("--world-size", type=int, default=2)
        p.add_argument("--mode", choices=MODES, default="sequential")

    def point_flags(p):
        p.add_argument("--theta", type=float, required=True)
        p.add_argument("--ratio", type=int, required=True)
        p.add_argument("--width", type=int, default=4)
        p.add_argument("--allow-estimation", action="store_true", help="permit theta below the peeling minimum")

    p = sub.add_parser("roundtrip", help="Monte-Carlo compress/reduce/peel round-trips")
    point_flags(p)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--values", choices=(*VALUE_KINDS, "both"), default="int")
    p.add_argument("--out")
    world_flags(p)
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("commreport", help="bits per parameter per rank, model vs ledger")
    p.add_argument("configs", nargs="*", metavar="RATIO:WIDTH[:THETA]")
    p.add_argument("--probe-n", type=int, default=PROBE_N)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    world_flags(p)
    p.set_defaults(func=cmd_commreport)

    p = sub.add_parser("classify", help="parameter share selected by a layer policy")
    p.add_argument("config", nargs="?", help="config file with a [model] section")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--policy", choices=POLICIES, default="non_attention_linear")
    p.add_argument("--exclude-out-proj", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("train", help="train the tiny model on the bundled corpus")
    p.add_argument("config", help="INI run config, or a manifest.json from an earlier run")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.add_argument("--mode", choices=MODES)
    p.set_defaults(func=cmd_train)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, configfile.ConfigFileError) as exc:
        print(f"tagc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
