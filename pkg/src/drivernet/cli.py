"""Command-line entry point: ``drivernet <subcommand> [flags]``.

Exit status is 0 on success, 1 when the arguments or inputs fail validation
(including unknown flags and invalid flag combinations, which are rejected
before any work starts) and 2 when a run fails at runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import formats
from .config import AGGREGATIONS, FUSIONS, MODALITIES, REGIMES, ConfigError, ModelConfig, TrainConfig
from .feature import NormStats, StreamError
from .formats import FormatError
from .fusion import DriverNet, count_parameters, parameter_table, strategy_deltas, PUBLISHED_COUNTS, PUBLISHED_DELTAS
from .synth import synthesize
from .train import (
    build_model,
    cross_validate,
    evaluate,
    fit,
    holdout_split,
    load_model,
    measure_latency,
    metrics_table,
    needs_frames,
    save_model,
)

DATA_ENV = "DRIVERNET_DATA"
MODEL_CHOICES = ("context", "feature", "fusion", "drivernet")
CHECKPOINT_NAME = "model.ckpt"
LOG_NAME = "run.log"

log = logging.getLogger("drivernet.cli")


class CliError(Exception):
    """Validation failure: reported with exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# flag groups


def _csv(kind):
    def parse(text):
        try:
            return tuple(kind(x) for x in text.split(",") if x)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None
    return parse


def _add_data(p):
    env = os.environ.get(DATA_ENV)
    p.add_argument("--data", default=env, metavar="DIR",
                   help=f"dataset directory written by 'gen' (default: ${DATA_ENV}"
                        + (f", currently {env})" if env else ", unset)"))


def _add_model(p):
    g = p.add_argument_group("model")
    g.add_argument("--model", choices=MODEL_CHOICES,
                   help="what to build: the standalone context or feature block with its own head, "
                        "'drivernet' (fused model, regime from --regime) or 'fusion' (fused model on "
                        "frozen pre-trained blocks, the same as drivernet with --regime fusion)")
    g.add_argument("--agg", choices=AGGREGATIONS, help="view aggregation (default gap)")
    g.add_argument("--fusion", choices=FUSIONS, help="fusion strategy for fused models (default cf)")
    g.add_argument("--modalities", type=_csv(str), metavar="LIST",
                   help=f"comma-separated feature streams out of {','.join(MODALITIES)} (default all)")
    g.add_argument("--frames", type=int, metavar="N", help="frames per clip N (default 16, or the dataset's)")
    g.add_argument("--frame-size", type=int, metavar="PX",
                   help="square frame resolution in pixels (default 32, or the dataset's)")
    g.add_argument("--d-model", type=int, metavar="D", help="embedding width d_model (default 256)")
    g.add_argument("--encoder-channels", type=_csv(int), metavar="LIST",
                   help="visual encoder channels per stride-2 stage; the last must equal d_model "
                        "(default 16,32,64,D)")
    g.add_argument("--seed", type=int, default=0, help="master seed for all randomness (default 0)")


def _add_training(p):
    g = p.add_argument_group("training")
    g.add_argument("--regime", choices=REGIMES,
                   help="'all' trains end to end, 'fusion' trains only the fusion block on frozen "
                        "pre-trained blocks (fused models only; default all)")
    g.add_argument("--epochs", type=int, default=30, help="training epochs (default 30)")
    g.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 1e-3)")
    g.add_argument("--batch", type=int, default=8, help="mini-batch size (default 8)")
    g.add_argument("--freeze-encoder", action="store_true",
                   help="keep the visual encoder at its initialisation while training")


def _add_out(p, what, required=True):
    p.add_argument("--out", required=required, metavar="DIR", help=what)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drivernet", description="Driver take-over readiness classifier.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", help="generate a synthetic dataset directory",
                       description="Write a balanced synthetic dataset (frames as CTB1, features "
                                   "as JSON lines, a manifest) plus resolved-config.json and a log.")
    p.add_argument("--clips", type=int, default=600, help="number of clips (default 600)")
    p.add_argument("--seed", type=int, default=42, help="generator seed (default 42)")
    p.add_argument("--frames", type=int, default=16, metavar="N", help="frames per clip (default 16)")
    p.add_argument("--frame-size", type=int, default=32, metavar="PX",
                   help="square frame resolution in pixels (default 32)")
    _add_out(p, f"dataset directory to create (default: ${DATA_ENV})", required=False)

    p = sub.add_parser("train", help="train one model and save a checkpoint",
                       description="Train on a dataset directory. The run directory receives "
                                   f"{CHECKPOINT_NAME}, metrics.json, metrics.txt, "
                                   f"resolved-config.json and {LOG_NAME}.")
    _add_data(p)
    _add_model(p)
    _add_training(p)
    p.add_argument("--holdout", type=float, default=0.0, metavar="FRACTION",
                   help="hold this fraction of clips out of training and report metrics on it "
                        "(default 0: report training-set metrics only)")
    _add_out(p, "run directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset",
                       description="Evaluate a saved checkpoint; writes metrics.json, metrics.txt, "
                                   f"resolved-config.json and {LOG_NAME} to the run directory.")
    _add_data(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="checkpoint written by 'train'")
    p.add_argument("--latency-clips", type=int, default=8, metavar="K",
                   help="clips timed for the per-clip cost column (default 8, 0 disables)")
    _add_out(p, "run directory")

    p = sub.add_parser("crossval", help="k-fold cross-validation",
                       description="k-fold cross-validation with a fresh initialisation per fold. "
                                   "Prints one row per fold and a mean +- std line.")
    _add_data(p)
    _add_model(p)
    _add_training(p)
    p.add_argument("--k", type=int, default=5, help="number of folds (default 5)")
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel processes (default 1)")
    _add_out(p, "run directory")

    p = sub.add_parser("params", help="parameter-count audit against the published tables",
                       description="Print exact parameter counts (visual encoder excluded) beside "
                                   "the published reference figures with a MATCH/mismatch flag. "
                                   "Without --model the whole table and the fusion deltas are printed.")
    _add_model(p)
    _add_out(p, "optional directory for params.json and resolved-config.json", required=False)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite",
                       description="Central finite differences on miniature configurations: every "
                                   "layer, both standalone blocks and every aggregation x fusion x "
                                   "regime combination. Exits 1 if any check exceeds its tolerance.")
    p.add_argument("--seed", type=int, default=0, help="seed for miniature weights and inputs (default 0)")
    p.add_argument("--agg", choices=AGGREGATIONS, action="append",
                   help="restrict assembled configurations to this aggregation (repeatable)")
    p.add_argument("--fusion", choices=FUSIONS, action="append",
                   help="restrict assembled configurations to this fusion strategy (repeatable)")
    p.add_argument("--regime", choices=REGIMES, action="append",
                   help="restrict assembled configurations to this regime (repeatable)")
    _add_out(p, "optional directory for gradcheck.json and resolved-config.json", required=False)

    p = sub.add_parser("bench", help="per-clip latency of each fusion strategy",
                       description="Median and p95 single-clip latency of CF, AF and CAF sharing one "
                                   "set of context and feature blocks. The fusion-only figures exclude "
                                   "data loading and the visual encoder; full-model figures are shown "
                                   "beside them.")
    _add_data(p)
    _add_model(p)
    p.add_argument("--checkpoint", metavar="PATH",
                   help="fused-model checkpoint whose context and feature blocks are shared by all "
                        "three strategies (default: fresh blocks from --seed)")
    p.add_argument("--clips", type=int, default=32,
                   help="clips timed per strategy; synthesised from --seed when no dataset is "
                        "given (default 32)")
    _add_out(p, "optional directory for latency.json and resolved-config.json", required=False)
    return parser


# ---------------------------------------------------------------------------
# resolution and validation (no heavy work happens here)


@dataclass
class Resolved:
    command: str
    kind: str | None = None
    regime: str = "all"
    model: ModelConfig | None = None
    train: TrainConfig | None = None
    data: str | None = None
    out: Path | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "kind": self.kind,
            "regime": self.regime,
            "data": self.data,
            "out": None if self.out is None else str(self.out),
            "model_config": None if self.model is None else self.model.to_dict(),
            "train_config": None if self.train is None else self.train.to_dict(),
            **self.extra,
        }


def _dataset_shape(data_dir: str) -> dict:
    """Frames per clip and frame size from a dataset manifest, without loading clips."""
    manifest = Path(data_dir) / "manifest.json"
    if not manifest.is_file():
        raise CliError(f"{data_dir} is not a dataset directory (no manifest.json)")
    try:
        gen = json.loads(manifest.read_text()).get("generator", {})
    except json.JSONDecodeError as e:
        raise CliError(f"{manifest}: {e}") from None
    return {k: gen[k] for k in ("n_frames", "frame_size") if k in gen}


def _model_kind(args) -> tuple[str, str]:
    """Map the --model selector and --regime onto a build kind and a training regime."""
    model = args.model or "drivernet"
    regime = getattr(args, "regime", None)
    if model in ("context", "feature"):
        if args.fusion is not None:
            raise CliError(f"--fusion applies to fused models, not --model {model}")
        if regime is not None:
            raise CliError(f"--regime applies to fused models, not --model {model}")
        if model == "context" and args.modalities is not None:
            raise CliError("--modalities applies to the feature stream, not --model context")
        if model == "feature" and args.agg is not None:
            raise CliError("--agg applies to video views, not --model feature")
        return model, "all"
    if model == "fusion":
        if regime == "all":
            raise CliError("--model fusion trains on frozen blocks; use --model drivernet for --regime all")
        return "drivernet", "fusion"
    return "drivernet", regime or "all"


def _model_config(args, shape: dict | None = None) -> ModelConfig:
    shape = shape or {}
    changes = {"seed": args.seed}
    for flag, key in (("frames", "n_frames"), ("frame_size", "frame_size")):
        value = getattr(args, flag)
        if value is not None and key in shape and value != shape[key]:
            raise CliError(f"--{flag.replace('_', '-')} {value} does not match the dataset ({shape[key]})")
        if value is not None:
            changes[key] = value
        elif key in shape:
            changes[key] = shape[key]
    if args.agg is not None:
        changes["aggregation"] = args.agg
    if args.fusion is not None:
        changes["fusion"] = args.fusion
    if args.modalities is not None:
        changes["modalities"] = args.modalities
    if args.d_model is not None:
        changes["d_model"] = args.d_model
        if args.encoder_channels is None:
            changes["encoder_channels"] = (*ModelConfig().encoder_channels[:-1], args.d_model)
    if args.encoder_channels is not None:
        changes["encoder_channels"] = args.encoder_channels
    return ModelConfig(**changes)


def _train_config(args) -> TrainConfig:
    for name in ("epochs", "batch"):
        if getattr(args, name) < 1:
            raise CliError(f"--{name} must be at least 1")
    if not args.lr > 0:
        raise CliError("--lr must be positive")
    return TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, seed=args.seed,
                       train_encoder=not args.freeze_encoder)


def _require_data(args) -> str:
    if not args.data:
        raise CliError(f"no dataset given: pass --data or set ${DATA_ENV}")
    return args.data


def resolve(args) -> Resolved:
    """Check every flag and combination and build the configs; raises CliError or ConfigError."""
    cmd = args.command
    if cmd == "gen":
        out = args.out or os.environ.get(DATA_ENV)
        if not out:
            raise CliError(f"no output directory: pass --out or set ${DATA_ENV}")
        if args.clips < 2:
            raise CliError("--clips must be at least 2")
        if args.frames < 16:
            raise CliError("--frames must be at least 16 (the readiness window)")
        if args.frame_size < 4:
            raise CliError("--frame-size must be at least 4")
        return Resolved(cmd, out=Path(out), extra={
            "clips": args.clips, "seed": args.seed, "n_frames": args.frames, "frame_size": args.frame_size})

    if cmd == "eval":
        data = _require_data(args)
        if not Path(args.checkpoint).is_file():
            raise CliError(f"checkpoint {args.checkpoint} not found")
        if args.latency_clips < 0:
            raise CliError("--latency-clips must be non-negative")
        _dataset_shape(data)
        return Resolved(cmd, data=data, out=Path(args.out),
                        extra={"checkpoint": args.checkpoint, "latency_clips": args.latency_clips})

    if cmd == "gradcheck":
        return Resolved(cmd, out=None if args.out is None else Path(args.out), extra={
            "seed": args.seed,
            "aggregations": args.agg or list(AGGREGATIONS),
            "fusions": args.fusion or list(FUSIONS),
            "regimes": args.regime or list(REGIMES),
        })

    if cmd == "params":
        kind, regime = _model_kind(args) if args.model else (None, "all")
        if args.frame_size is not None or args.encoder_channels is not None:
            raise CliError("counts exclude the visual encoder, so --frame-size and "
                           "--encoder-channels have no effect on 'params'")
        model = _model_config(args, {"frame_size": 32})
        return Resolved(cmd, kind, regime, model, out=None if args.out is None else Path(args.out),
                        extra={"selector": args.model})

    if cmd == "bench":
        if args.model not in (None, "drivernet", "fusion"):
            raise CliError("bench compares fusion strategies of the fused model; --model must be "
                           "drivernet or fusion")
        if args.fusion is not None:
            raise CliError("bench always times all three fusion strategies; drop --fusion")
        if args.clips < 1:
            raise CliError("--clips must be at least 1")
        shape = _dataset_shape(args.data) if args.data else {}
        if args.checkpoint:
            if not Path(args.checkpoint).is_file():
                raise CliError(f"checkpoint {args.checkpoint} not found")
            shaping = [f for f in ("agg", "modalities", "frames", "frame_size", "d_model",
                                   "encoder_channels") if getattr(args, f) is not None]
            if shaping:
                raise CliError(f"the checkpoint fixes the architecture; drop --{shaping[0].replace('_', '-')}")
            header, _ = formats.load_checkpoint(args.checkpoint)
            model = ModelConfig.from_dict(header["model_config"])
            for key, value in shape.items():
                if getattr(model, key) != value:
                    raise CliError(f"dataset {key} {value} does not match the checkpoint ({getattr(model, key)})")
        else:
            model = _model_config(args, shape)
        return Resolved(cmd, "drivernet", "all", model, data=args.data,
                        out=None if args.out is None else Path(args.out),
                        extra={"checkpoint": args.checkpoint, "clips": args.clips})

    # train and crossval
    kind, regime = _model_kind(args)
    data = _require_data(args)
    shape = _dataset_shape(data)
    model = _model_config(args, shape)
    train_cfg = _train_config(args)
    extra = {"selector": args.model or "drivernet"}
    if cmd == "train":
        if not 0.0 <= args.holdout < 1.0:
            raise CliError("--holdout must lie in [0, 1)")
        extra["holdout"] = args.holdout
    else:
        if args.k < 2:
            raise CliError("--k must be at least 2")
        if args.jobs < 1:
            raise CliError("--jobs must be at least 1")
        extra.update(k=args.k, jobs=args.jobs)
    return Resolved(cmd, kind, regime, model, train_cfg, data, Path(args.out), extra)


# ---------------------------------------------------------------------------
# run directory plumbing


def _prepare_out(res: Resolved) -> None:
    if res.out is None:
        return
    try:
        res.out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create {res.out}: {e}") from None
    (res.out / "resolved-config.json").write_text(json.dumps(res.to_dict(), indent=1, sort_keys=True) + "\n")
    handler = logging.FileHandler(res.out / LOG_NAME, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("drivernet")
    root.addHandler(handler)
    root.setLevel(logging.INFO)


def _close_logs() -> None:
    root = logging.getLogger("drivernet")
    for h in list(root.handlers):
        if isinstance(h, logging.FileHandler):
            h.close()
            root.removeHandler(h)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _label(res: Resolved) -> str:
    cfg = res.model
    if res.kind == "context":
        return f"context[{cfg.aggregation}]"
    if res.kind == "feature":
        return f"feature[{'+'.join(cfg.ordered_modalities)}]"
    return f"{cfg.aggregation}/{cfg.fusion}/T_{res.regime}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(res: Resolved) -> None:
    e = res.extra
    data = synthesize(e["clips"], e["seed"], e["n_frames"], e["frame_size"])
    formats.write_dataset(data, res.out)
    ready = int(data.labels.sum())
    log.info("wrote %d clips (%d ready) to %s", len(data), ready, res.out)
    print(f"wrote {len(data)} clips ({ready} ready, {len(data) - ready} not ready) to {res.out}")


def _load(res: Resolved):
    return formats.read_dataset(res.data, load_frames=needs_frames(res.kind))


def _without_timing(report):
    """Copy of a MetricsReport with wall-clock fields removed, folds included."""
    return replace(report, latency_ms={}, folds=[_without_timing(f) for f in report.folds])


def _write_metrics(res: Resolved, rows, payload: dict, timing: dict, footer: str = "") -> None:
    """metrics.json and metrics.txt hold only seed-determined values; wall-clock
    figures go to timing.json so repeated runs give byte-identical metrics."""
    _write_json(res.out / "metrics.json", payload)
    text = metrics_table([(n, p, _without_timing(r)) for n, p, r in rows])
    (res.out / "metrics.txt").write_text(text + "\n" + footer)
    _write_json(res.out / "timing.json", timing)
    print(metrics_table(rows))
    if footer:
        print(footer, end="")


def cmd_train(res: Resolved) -> None:
    data = _load(res)
    train_idx, test_idx = holdout_split(len(data), res.extra["holdout"], res.train.seed)
    train_set = data.subset(train_idx)
    log.info("training %s on %d clips", _label(res), len(train_set))
    model, norm, histories = fit(res.kind, res.model, train_set, res.train, res.regime)
    save_model(res.out / CHECKPOINT_NAME, model, norm, {"regime": res.regime})
    n_params = count_parameters(model)
    train_report = evaluate(model, train_set, norm, latency_clips=0)
    rows = [(f"{_label(res)} train", n_params, train_report)]
    payload = {"train": train_report.to_dict(),
               "losses": {k: h.losses for k, h in histories.items()}}
    timing = {"train_seconds": {k: h.seconds for k, h in histories.items()}}
    if len(test_idx):
        test_report = evaluate(model, data.subset(test_idx), norm)
        rows.append((f"{_label(res)} holdout", n_params, test_report))
        payload["holdout"] = _without_timing(test_report).to_dict()
        timing["latency_ms"] = test_report.latency_ms
    _write_metrics(res, rows, payload, timing)


def cmd_eval(res: Resolved) -> None:
    model, norm, header = load_model(res.extra["checkpoint"])
    res.kind = header.get("extra", {}).get("kind", "drivernet")
    res.model = model.config
    res.regime = header.get("extra", {}).get("regime", "all")
    data = _load(res)
    report = evaluate(model, data, norm, latency_clips=res.extra["latency_clips"])
    _write_metrics(res, [(_label(res), count_parameters(model), report)],
                   {"eval": _without_timing(report).to_dict()}, {"latency_ms": report.latency_ms})


def cmd_crossval(res: Resolved) -> None:
    data = _load(res)
    k, jobs = res.extra["k"], res.extra["jobs"]
    log.info("%d-fold cross-validation of %s on %d clips, %d jobs", k, _label(res), len(data), jobs)
    report = cross_validate(res.kind, res.model, data, k=k, regime=res.regime, cfg=res.train, jobs=jobs)
    n_params = count_parameters(build_model(res.kind, res.model))
    rows = [(f"fold {i}", n_params, f) for i, f in enumerate(report.folds)]
    rows.append((f"{_label(res)} mean", n_params, report))
    m, s = report.mean, report.std
    summary = (f"accuracy mean ± std: {100 * m['accuracy']:.2f} ± {100 * s['accuracy']:.2f} "
               f"over {k} folds\n")
    _write_metrics(res, rows, {"crossval": _without_timing(report).to_dict()},
                   {"folds": [f.latency_ms for f in report.folds], "pooled": report.latency_ms}, summary)


def _flag(match) -> str:
    return "n/a" if match is None else ("MATCH" if match else "mismatch")


def _params_rows(res: Resolved) -> list[dict]:
    cfg = res.model
    reference_shape = cfg.d_model == 256 and cfg.n_frames == 16
    if res.kind is None:
        rows = parameter_table(cfg.d_model, cfg.n_frames, cfg.seed)
        if not reference_shape:
            for r in rows:
                r["published"], r["match"] = None, None
        return rows
    model = build_model(res.kind, cfg)
    ours = count_parameters(model)
    if res.kind == "context":
        variant = cfg.aggregation
    elif res.kind == "feature":
        mods = cfg.ordered_modalities
        variant = "all" if mods == MODALITIES else "+".join(mods)
    else:
        variant = f"{cfg.aggregation}/{cfg.fusion}"
    ref = PUBLISHED_COUNTS.get((res.kind, variant)) if reference_shape else None
    row = {"model": res.kind, "variant": variant, "ours": ours, "published": ref,
           "match": None if ref is None else ours == ref}
    if res.regime == "fusion":
        model.set_regime("fusion")
        row["trainable"] = count_parameters(model, "trainable")
    return [row]


def cmd_params(res: Resolved) -> None:
    rows = _params_rows(res)
    header = ("model", "variant", "ours", "published", "flag")
    lines = [header] + [
        (r["model"], r["variant"], f"{r['ours']:,}", "-" if r["published"] is None else f"{r['published']:,}",
         _flag(r["match"]))
        for r in rows
    ]
    widths = [max(len(l[i]) for l in lines) for i in range(len(header))]
    print("\n".join("  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(l, widths)))
                    for l in lines))
    for r in rows:
        if "trainable" in r:
            print(f"trainable under T_fusion: {r['trainable']:,}")
    out = {"rows": rows}
    if res.kind is None:
        deltas = strategy_deltas(rows)
        out["deltas"] = deltas
        print()
        for key in ("cf-af", "caf-af"):
            values = sorted({d[key] for d in deltas.values()})
            shown = ", ".join(f"{v:,}" for v in values)
            constant = "constant" if len(values) == 1 else "NOT constant"
            print(f"{key}: ours {shown} ({constant} across aggregations), published {PUBLISHED_DELTAS[key]:,}")
    if res.out is not None:
        _write_json(res.out / "params.json", out)


def cmd_gradcheck(res: Resolved) -> bool:
    from . import gradsuite

    e = res.extra
    results = gradsuite.check_layers(e["seed"]) + gradsuite.check_blocks(e["seed"])
    for agg in e["aggregations"]:
        for fusion in e["fusions"]:
            for regime in e["regimes"]:
                results.append(gradsuite.check_model(agg, fusion, regime, e["seed"]))
    print(f"{'check':<24} {'max rel err':>12} {'tol':>8}  result")
    for r in results:
        print(f"{r.name:<24} {r.error:>12.3e} {r.tolerance:>8.0e}  {'ok' if r.passed else 'FAIL'}")
        log.info("%s error %.3e (%.1fs)", r.name, r.error, r.seconds)
    print("\nper layer, each tensor on its own (criterion: every tensor below the layer tolerance):")
    for r in results:
        if r.tolerance == gradsuite.LAYER_TOL:
            detail = ", ".join(f"{n} {e:.1e}" for n, e in gradsuite.per_tensor_errors(r).items())
            print(f"  {r.name:<18} {r.error:.3e}  [{detail}]")
    passed = all(r.passed for r in results)
    if res.out is not None:
        _write_json(res.out / "gradcheck.json", {
            "passed": passed,
            "checks": [{"name": r.name, "error": r.error, "tolerance": r.tolerance,
                        "seconds": r.seconds} for r in results],
            "per_tensor": {r.name: gradsuite.per_tensor_errors(r) for r in results},
        })
    print(f"\n{len(results)} checks, {'all passed' if passed else 'FAILURES present'}")
    return passed


def cmd_bench(res: Resolved) -> None:
    base = res.model
    norm = None
    shared = None
    if res.extra["checkpoint"]:
        shared, norm, _ = load_model(res.extra["checkpoint"])
        if not isinstance(shared, DriverNet):
            raise CliError("bench needs a fused-model checkpoint")
        base = shared.config
    if res.data:
        data = formats.read_dataset(res.data)
        data = data.subset(range(min(res.extra["clips"], len(data))))
    else:
        data = synthesize(max(res.extra["clips"], 2), res.model.seed, base.n_frames, base.frame_size)
    if norm is None:
        norm = NormStats.fit(data.streams)
    report = {}
    print(f"{'fusion':<8} {'fusion-only median':>18} {'p95':>8} {'full median':>12} {'p95':>8}  (ms)")
    for fusion in FUSIONS:
        model = DriverNet(base.with_(fusion=fusion))
        if shared is not None:
            model.load_blocks(shared.context, shared.feature)
        only = measure_latency(model, data, norm, res.extra["clips"], fusion_only=True)
        full = measure_latency(model, data, norm, res.extra["clips"])
        report[fusion] = {"fusion_only": only, "full": full, "parameters": count_parameters(model)}
        print(f"{fusion:<8} {only['median']:>18.3f} {only['p95']:>8.3f} {full['median']:>12.3f} "
              f"{full['p95']:>8.3f}")
    if res.out is not None:
        _write_json(res.out / "latency.json", report)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "crossval": cmd_crossval,
            "params": cmd_params, "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        res = resolve(args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (CliError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        _prepare_out(res)
        ok = COMMANDS[res.command](res)
    except (CliError, ConfigError, FormatError, StreamError) as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        log.exception("run failed")
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    finally:
        _close_logs()
    return 1 if ok is False else 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
