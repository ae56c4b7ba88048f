"""Command-line entry point for reproducible experiment runs.

Subcommands: `gen` (sample a dataset), `train` (fit a learned model),
`eval` (metrics for one checkpoint), `compare` (all methods side by
side), `curves` (accuracy versus steps-since-last-sighting). Every run
writes a manifest recording the command, seeds, config digest, and
checksums of inputs and outputs.

Exit codes: 0 success, 1 usage or missing file, 2 validation failure,
3 runtime or numeric failure. The default output directory comes from
OBMLAB_OUT (falling back to ./runs).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import baselines as bl
from . import diffcore as dc
from . import evalkit as ek
from . import obmnet as ob
from . import simworld as sw
from . import trainer as tr

__all__ = ["RunManifest", "main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

ENV_OUT_DIR = "OBMLAB_OUT"


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int | None
    config_digest: str | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "argv": self.argv,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started": self.started,
            "finished": self.finished,
        }


def _checksum(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def write_manifest(out_dir: str, manifest: RunManifest) -> str:
    manifest.finished = _now()
    for group in (manifest.inputs, manifest.outputs):
        for path in list(group):
            group[path] = _checksum(path) if os.path.exists(path) else None
    path = os.path.join(out_dir, f"manifest_{manifest.command}.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="obmlab", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=None, help="output directory "
                       f"(default ${ENV_OUT_DIR} or ./runs)")
        p.add_argument("--seed", type=int, default=0)

    p_gen = sub.add_parser("gen", help="sample a trajectory dataset")
    common(p_gen)
    p_gen.add_argument("--config", default=None,
                       help="domain config JSON; omit for the 4-table default")
    p_gen.add_argument("--n-trajectories", type=int, required=True)

    p_train = sub.add_parser("train", help="fit a learned model")
    common(p_train)
    p_train.add_argument("--data", required=True, help="dataset file or its directory")
    p_train.add_argument("--model", required=True, choices=tr.MODEL_KINDS)
    p_train.add_argument("--heldout", default=None,
                         help="dataset evaluated at checkpoints")
    p_train.add_argument("--epochs", type=int, default=50)
    p_train.add_argument("--batch-size", type=int, default=16)
    p_train.add_argument("--lr", type=float, default=1e-3)
    p_train.add_argument("--clip-norm", type=float, default=5.0)
    p_train.add_argument("--eval-every", type=int, default=10)
    p_train.add_argument("--ramp-start", type=int, default=None)
    p_train.add_argument("--ramp-end", type=int, default=None)
    p_train.add_argument("--slots", type=int, default=10,
                         help="hypothesis slot count K")
    p_train.add_argument("--keep", type=int, default=2,
                         help="slots kept by suppression (obmnet only)")

    p_eval = sub.add_parser("eval", help="metrics for one checkpoint")
    common(p_eval)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--obs-counts", default="10,25,50")

    p_cmp = sub.add_parser("compare", help="all methods side by side")
    common(p_cmp)
    p_cmp.add_argument("--data", required=True)
    p_cmp.add_argument("--methods", default="obmnet,daf,clustering,recurrent")
    p_cmp.add_argument("--checkpoint", action="append", default=[],
                       metavar="KIND=PATH",
                       help="checkpoint per learned method, repeatable")
    p_cmp.add_argument("--obs-counts", default="10,25,50")

    p_cur = sub.add_parser("curves", help="accuracy vs steps since last sighting")
    common(p_cur)
    p_cur.add_argument("--data", required=True)
    p_cur.add_argument("--methods", default="obmnet,clustering")
    p_cur.add_argument("--checkpoint", action="append", default=[],
                       metavar="KIND=PATH")
    p_cur.add_argument("--bins", type=int, default=5, help="gap bin width")
    return parser


def _out_dir(args) -> str:
    out = args.out or os.environ.get(ENV_OUT_DIR) or "./runs"
    os.makedirs(out, exist_ok=True)
    return out


def _resolve_dataset(path: str) -> tuple[str, str]:
    """Accept a dataset file or a directory holding dataset.jsonl and
    config.json; return (dataset_path, config_path)."""
    if os.path.isdir(path):
        data = os.path.join(path, "dataset.jsonl")
        config = os.path.join(path, "config.json")
    else:
        data = path
        config = os.path.join(os.path.dirname(path) or ".", "config.json")
    for p in (data, config):
        if not os.path.exists(p):
            raise UsageError(f"missing file: {p}")
    return data, config


def _load_dataset(path: str):
    data_path, config_path = _resolve_dataset(path)
    domain = sw.read_config(config_path)
    trajectories = sw.read_dataset(data_path)
    return domain, trajectories, data_path, config_path


def _parse_obs_counts(text: str) -> tuple[int, ...]:
    try:
        counts = tuple(int(v) for v in text.split(",") if v)
    except ValueError as exc:
        raise UsageError(f"--obs-counts must be comma-separated integers: {text}") from exc
    if not counts or any(v < 1 for v in counts):
        raise ValidationError(f"--obs-counts must be positive: {text}")
    return counts


def _parse_checkpoint_flags(pairs) -> dict:
    table = {}
    for item in pairs:
        kind, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--checkpoint expects KIND=PATH, got {item!r}")
        table[kind] = path
    return table


def _load_model_checkpoint(path: str, domain: sw.DomainConfig):
    if not os.path.exists(path):
        raise UsageError(f"missing file: {path}")
    params, header = tr.load_checkpoint(path)
    model = tr.model_from_checkpoint(header)
    if (model.hyper.num_tables != domain.num_tables
            or model.hyper.num_classes != domain.num_classes):
        raise ValidationError(
            f"checkpoint expects {model.hyper.num_tables} tables / "
            f"{model.hyper.num_classes} classes, dataset has "
            f"{domain.num_tables} / {domain.num_classes}")
    return params, model


def _predictor_for(method: str, domain: sw.DomainConfig, checkpoints: dict,
                   seed: int):
    if method == "daf":
        return bl.DafPredictor(domain)
    if method == "clustering":
        return bl.ClusteringPredictor(domain.num_tables, domain.num_classes,
                                      seed=seed)
    if method in tr.MODEL_KINDS:
        if method not in checkpoints:
            raise UsageError(f"method {method!r} needs --checkpoint {method}=PATH")
        params, model = _load_model_checkpoint(checkpoints[method], domain)
        return model.predictor(params)
    raise UsageError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args) -> int:
    out = _out_dir(args)
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"missing file: {args.config}")
        domain = sw.read_config(args.config)
        domain = sw.DomainConfig.from_dict({**domain.to_dict(), "seed": args.seed})
    else:
        domain = sw.config_a_style(seed=args.seed)
    if args.n_trajectories < 1:
        raise ValidationError("--n-trajectories must be >= 1")
    manifest = RunManifest("gen", sys.argv[1:], args.seed, domain.digest(),
                           started=_now())
    trajectories = sw.generate_trajectories(domain, args.n_trajectories)
    data_path = os.path.join(out, "dataset.jsonl")
    config_path = os.path.join(out, "config.json")
    sw.write_dataset(trajectories, data_path)
    sw.write_config(domain, config_path)
    manifest.outputs = {data_path: None, config_path: None}
    write_manifest(out, manifest)
    print(f"wrote {args.n_trajectories} trajectories to {data_path}")
    return EXIT_OK


def _cmd_train(args) -> int:
    out = _out_dir(args)
    domain, trajectories, data_path, config_path = _load_dataset(args.data)
    heldout = None
    inputs = {data_path: None, config_path: None}
    if args.heldout:
        _, heldout, heldout_path, _ = _load_dataset(args.heldout)
        inputs[heldout_path] = None
    config = tr.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        clip_norm=args.clip_norm, eval_every=args.eval_every,
        ramp_start=args.ramp_start, ramp_end=args.ramp_end, seed=args.seed)
    hyper_overrides = {"K": args.slots}
    if args.model == "obmnet":
        hyper_overrides["M"] = args.keep
    manifest = RunManifest("train", sys.argv[1:], args.seed, domain.digest(),
                           inputs=inputs, started=_now())
    params, _ = tr.train(trajectories, args.model, config, domain,
                         heldout=heldout, out_dir=out,
                         hyper_overrides=hyper_overrides)
    model = tr.build_model(args.model, domain, **hyper_overrides)
    final = os.path.join(out, f"checkpoint_{args.model}.json")
    tr.save_checkpoint(final, params, args.model, model.hyper, domain.digest(),
                       extra={"train_config": config.to_dict()})
    log_path = os.path.join(out, f"train_log_{args.model}.csv")
    manifest.outputs = {final: None, log_path: None}
    write_manifest(out, manifest)
    print(f"wrote {final}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    out = _out_dir(args)
    domain, trajectories, data_path, config_path = _load_dataset(args.data)
    counts = _parse_obs_counts(args.obs_counts)
    params, model = _load_model_checkpoint(args.checkpoint, domain)
    manifest = RunManifest("eval", sys.argv[1:], args.seed, domain.digest(),
                           inputs={data_path: None, args.checkpoint: None},
                           started=_now())
    records = tr.evaluate(params, trajectories, model.kind, domain,
                          obs_counts=counts, hyper=model.hyper)
    metrics_path = os.path.join(out, f"metrics_{model.kind}.csv")
    ek.write_metrics_csv(metrics_path,
                         [(model.kind, domain.digest(), rec) for rec in records])
    manifest.outputs = {metrics_path: None}
    write_manifest(out, manifest)
    for rec in records:
        print(f"{model.kind} @{rec.observations_seen}: "
              f"accuracy {rec.table_accuracy:.4f} error {rec.position_error:.4f} "
              f"({rec.n_trajectories} trajectories)")
    return EXIT_OK


def _cmd_compare(args) -> int:
    out = _out_dir(args)
    domain, trajectories, data_path, config_path = _load_dataset(args.data)
    counts = _parse_obs_counts(args.obs_counts)
    checkpoints = _parse_checkpoint_flags(args.checkpoint)
    methods = [m for m in args.methods.split(",") if m]
    if not methods:
        raise UsageError("--methods must name at least one method")
    manifest = RunManifest("compare", sys.argv[1:], args.seed, domain.digest(),
                           inputs={data_path: None, config_path: None,
                                   **{p: None for p in checkpoints.values()}},
                           started=_now())
    table = []
    for method in methods:
        predictor = _predictor_for(method, domain, checkpoints, args.seed)
        outputs = [predictor.run(t) for t in trajectories]
        records = ek.aggregate_at_counts(outputs, trajectories,
                                         domain.num_tables, counts,
                                         penalty=domain.table_half_size)
        table.append((method, {r.observations_seen: r for r in records}))
    compare_path = os.path.join(out, "compare.csv")
    ek.write_compare_csv(compare_path, table, counts)
    manifest.outputs = {compare_path: None}
    write_manifest(out, manifest)
    with open(compare_path) as fh:
        print(fh.read(), end="")
    return EXIT_OK


def _cmd_curves(args) -> int:
    out = _out_dir(args)
    domain, trajectories, data_path, config_path = _load_dataset(args.data)
    if args.bins < 1:
        raise ValidationError("--bins must be >= 1")
    checkpoints = _parse_checkpoint_flags(args.checkpoint)
    methods = [m for m in args.methods.split(",") if m]
    if not methods:
        raise UsageError("--methods must name at least one method")
    manifest = RunManifest("curves", sys.argv[1:], args.seed, domain.digest(),
                           inputs={data_path: None, config_path: None,
                                   **{p: None for p in checkpoints.values()}},
                           started=_now())
    curves = []
    for method in methods:
        predictor = _predictor_for(method, domain, checkpoints, args.seed)
        hits = []
        for traj in trajectories:
            hits.extend(ek.gap_hits(predictor.run(traj), traj, domain.num_tables))
        curves.append((method, ek.recovery_curve(hits, args.bins)))
    curves_path = os.path.join(out, "curves.csv")
    ek.write_curve_csv(curves_path, curves)
    manifest.outputs = {curves_path: None}
    write_manifest(out, manifest)
    print(f"wrote {curves_path}")
    return EXIT_OK


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
    "curves": _cmd_curves,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (ValidationError, sw.ConfigError, sw.DatasetError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (dc.DiffError, ob.NumericError, bl.TrackingError, tr.TrainingError,
            np.linalg.LinAlgError, FloatingPointError, OverflowError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
