"""Command-line entry point: ``lrcp run|gen|eval|inspect|export-latents``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import buffer as buffer_io
from .errors import ConfigError, LRCPError
from .metrics import nearest_prototype
from .runner import RunConfig, RunState, build_stream, embed, export_latents, load_model, run, save_model
from .stream import (
    SyntheticStreamConfig,
    generate_synthetic,
    load_feature_file,
    stream_arrays,
    write_flbl,
    write_fvec,
)


def load_config(path, overrides=()):
    """Read a YAML/JSON config and apply ``key=value`` overrides (values parsed as YAML)."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        value = yaml.safe_load(raw)
        if key.startswith("stream."):
            data.setdefault("stream", {})[key[len("stream."):]] = value
        else:
            data[key] = value
    return RunConfig.from_dict(data)


def cmd_run(args):
    cfg = load_config(args.config, args.set)
    report = run(cfg, out=args.out, save_buffer=args.save_buffer,
                 latents_dir=args.export_latents, checkpoint_dir=args.checkpoint_dir,
                 resume_from=args.resume, stop_after=args.stop_after)
    if args.save_model:
        save_model(report.state, args.save_model)
    print(json.dumps({"status": report.status, "average_accuracy": report.average_accuracy,
                      "bwt": report.bwt, "buffer_records": report.buffer_records}))


def cmd_gen(args):
    fields = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        fields[key.removeprefix("stream.")] = yaml.safe_load(raw)
    try:
        cfg = SyntheticStreamConfig(**fields)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    tasks = generate_synthetic(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    x, y, task_ids = stream_arrays(tasks)
    write_fvec(out / "features.fvec", x)
    write_flbl(out / "labels.flbl", y)
    write_flbl(out / "tasks.flbl", task_ids)
    (out / "stream.json").write_text(json.dumps(asdict(cfg), indent=2))
    print(f"wrote {len(tasks)} tasks to {out}")


def cmd_eval(args):
    buf = buffer_io.load(args.buffer)
    params, _ = load_model(args.model)
    x, y = load_feature_file(args.features, args.labels)
    uids, proto_x, proto_z, classes = buf.prototype_table()
    protos = embed(params, proto_x) if args.prototype_space == "current" else proto_z
    idx = nearest_prototype(embed(params, x), protos, args.distance)
    pred = classes[idx]
    result = {"n": int(len(pred)), "predictions": pred.tolist()}
    if y is not None:
        result["accuracy"] = float(np.mean(pred == y))
    print(json.dumps(result))


def cmd_inspect(args):
    print(json.dumps(buffer_io.load(args.buffer).summary(), indent=2))


def cmd_export(args):
    cfg = load_config(args.config, args.set).resolved()
    params, _ = load_model(args.model)
    tasks = build_stream(cfg)
    state = RunState(params, None, None)
    export_latents(state, tasks, args.out)
    print(f"wrote latents for {len(tasks)} tasks to {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="lrcp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate over a task stream")
    r.add_argument("config", nargs="?", help="YAML or JSON file with RunConfig fields")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field; stream.* reaches into the stream settings")
    r.add_argument("--out", help="write the RunReport here")
    r.add_argument("--save-buffer")
    r.add_argument("--save-model")
    r.add_argument("--export-latents", metavar="DIR")
    r.add_argument("--checkpoint-dir")
    r.add_argument("--resume", metavar="DIR")
    r.add_argument("--stop-after", type=int)
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gen", help="write a synthetic stream as FVEC/FLBL files")
    g.add_argument("out")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="synthetic stream field, e.g. protocol=di")
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("eval", help="classify a feature file with a stored buffer and projector")
    e.add_argument("buffer")
    e.add_argument("model")
    e.add_argument("features")
    e.add_argument("--labels")
    e.add_argument("--distance", default="cosine", choices=["cosine", "euclidean"])
    e.add_argument("--prototype-space", default="current", choices=["current", "snapshot"])
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="print a buffer summary")
    i.add_argument("buffer")
    i.set_defaults(func=cmd_inspect)

    x = sub.add_parser("export-latents", help="dump per-task test latents from a saved projector")
    x.add_argument("model")
    x.add_argument("out")
    x.add_argument("--config")
    x.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except LRCPError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
