"""Command-line entry point: ``ggd <command> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datakit, evalkit
from .config import load_config
from .modelzoo import load_model, model_to_bytes

log = logging.getLogger("ggd")

COMMANDS = ("gen-biased-mnist", "gen-synthetic", "gen-long-tail", "train", "eval", "report")


class UsageError(Exception):
    pass


@dataclass
class CliCommand:
    name: str
    args: dict = field(default_factory=dict)


def _unit_interval(name):
    def parse(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number") from None
        if not 0 <= v <= 1:
            raise argparse.ArgumentTypeError(f"{name} must be in [0,1]")
        return v
    return parse


def _positive_int(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _named_path(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected NAME=PATH")
    name, path = text.split("=", 1)
    return name, path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ggd", description="Greedy de-bias training toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=False):
        sp.add_argument("--seed", type=int, default=None, help="top-level seed")
        sp.add_argument("--out", required=True, help="output directory")
        if config:
            sp.add_argument("--config", required=True, help="JSON run configuration")

    g = sub.add_parser("gen-biased-mnist", help="colourise IDX digits into a biased dataset")
    g.add_argument("--idx-images", required=True)
    g.add_argument("--idx-labels", required=True)
    g.add_argument("--rho", type=_unit_interval("rho"), required=True)
    g.add_argument("--downsample", type=_positive_int, default=1)
    g.add_argument("--saturation", type=_unit_interval("saturation"), default=1.0,
                   help="blend the default palette toward dark grey (1 = full colour)")
    g.add_argument("--palette", help="JSON file with 10 RGB triples in [0,1]")
    g.add_argument("--range", dest="index_range", help="START:STOP slice of the source digits")
    g.add_argument("--size", type=_positive_int, help="tile or truncate to this many samples")
    common(g)

    s = sub.add_parser("gen-synthetic", help="Gaussian core features plus a spurious block")
    s.add_argument("--n", type=_positive_int, required=True)
    s.add_argument("--d-core", type=_positive_int, default=8)
    s.add_argument("--d-bias", type=_positive_int, default=4)
    s.add_argument("--classes", type=_positive_int, default=4)
    s.add_argument("--rho", type=_unit_interval("rho"), required=True)
    s.add_argument("--separation", type=float, default=1.0)
    common(s)

    lt = sub.add_parser("gen-long-tail", help="exponentially subsample IDX digits per class")
    lt.add_argument("--idx-images", required=True)
    lt.add_argument("--idx-labels", required=True)
    lt.add_argument("--mu", type=float, required=True)
    lt.add_argument("--head-count", type=_positive_int, required=True)
    lt.add_argument("--downsample", type=_positive_int, default=1)
    lt.add_argument("--range", dest="index_range")
    common(lt)

    t = sub.add_parser("train", help="train a base model from a run configuration")
    common(t, config=True)

    e = sub.add_parser("eval", help="accuracy grid and confusion matrices for a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", type=_named_path, action="append", required=True, help="NAME=PATH, repeatable")
    e.add_argument("--name", default=None, help="row label in the grid CSV")
    common(e)

    r = sub.add_parser("report", help="collate metric logs into a method x test-cell table")
    r.add_argument("--logs", nargs="+", required=True)
    r.add_argument("--metric", default="accuracy")
    common(r)
    return p


def parse_args(argv) -> CliCommand:
    ns = build_parser().parse_args(list(argv))
    args = vars(ns)
    name = args.pop("command")
    if name == "gen-long-tail" and not 0 < args["mu"] <= 1:
        raise UsageError("mu must be in (0,1]")
    return CliCommand(name, args)


# ------------------------------------------------------------------ output helpers


class Outputs:
    """Writes files as ``name.partial`` and renames them once complete."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.pending: list[Path] = []

    def write(self, name: str, data) -> Path:
        final = self.dir / name
        tmp = final.with_name(final.name + ".partial")
        if isinstance(data, str):
            data = data.encode()
        tmp.write_bytes(data)
        self.pending.append(tmp)
        return final

    def commit(self):
        for tmp in self.pending:
            tmp.replace(tmp.with_name(tmp.name[: -len(".partial")]))
        self.pending.clear()


def _slice(text, n):
    if not text:
        return slice(0, n)
    start, _, stop = text.partition(":")
    return slice(int(start) if start else 0, int(stop) if stop else n)


def _load_raw(args) -> datakit.RawDataset:
    raw = datakit.load_idx_pair(args["idx_images"], args["idx_labels"])
    sl = _slice(args.get("index_range"), len(raw))
    raw = raw.subset(np.arange(len(raw))[sl])
    return raw.downsample(args.get("downsample", 1))


# ------------------------------------------------------------------ commands


def _gen_biased_mnist(args, out: Outputs, seed: int):
    raw = _load_raw(args)
    if args.get("size"):
        raw = raw.subset(np.arange(args["size"]) % len(raw))
    if args.get("palette"):
        palette = json.loads(Path(args["palette"]).read_text())
    else:
        palette = datakit.blend_palette(datakit.DEFAULT_PALETTE, args["saturation"])
    ds = datakit.colorize(raw, args["rho"], palette, seed)
    out.write("dataset.ggds", datakit.dataset_to_bytes(ds))
    log.info("wrote %d samples at rho=%s", len(ds), args["rho"])


def _gen_synthetic(args, out: Outputs, seed: int):
    ds = datakit.synthetic_spurious(args["n"], args["d_core"], args["d_bias"], args["rho"], args["classes"], seed,
                                    core_separation=args["separation"])
    out.write("dataset.ggds", datakit.dataset_to_bytes(ds))


def _gen_long_tail(args, out: Outputs, seed: int):
    raw = _load_raw(args)
    ds = datakit.make_long_tailed(raw, datakit.LongTailSpec(args["mu"], args["head_count"]), seed)
    out.write("dataset.ggds", datakit.dataset_to_bytes(ds))


def _train(args, out: Outputs, seed: int | None):
    from .engine import train

    spec = load_config(args["config"])
    if seed is not None:
        spec.run.seed = seed
    train_set = datakit.load_dataset(spec.train_path)
    evals = {name: datakit.load_dataset(p) for name, p in spec.eval_paths.items()}
    result = train(spec.run, train_set, evals)
    out.write("model.ggdm", model_to_bytes(result.base))
    out.write("metrics.jsonl", result.log.to_jsonl())
    out.write("summary.json", json.dumps(result.log.summary(), sort_keys=True, indent=2) + "\n")


def _eval(args, out: Outputs, seed):
    model = load_model(args["model"])
    datasets = {name: datakit.load_dataset(path) for name, path in args["data"]}
    grid = evalkit.evaluate_grid(model, datasets)
    row = args.get("name") or Path(args["model"]).stem
    out.write("grid.csv", evalkit.grid_to_csv({row: grid}))
    summary = {"model": row, "accuracy": grid}
    for name, ds in sorted(datasets.items()):
        pred = evalkit.predict_in_chunks(model, ds)
        for axis, ref in (("vs_label", ds.labels), ("vs_bias", ds.bias_attr)):
            cm = evalkit.confusion(pred, ref, ds.num_classes, axis)
            out.write(f"confusion_{axis}_{name}.csv", cm.to_csv())
        summary.setdefault("bias_agreement", {})[name] = evalkit.accuracy(pred, ds.bias_attr)
    out.write("summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")


def _report(args, out: Outputs, seed):
    rows: dict[str, dict[str, float]] = {}
    for path in args["logs"]:
        if str(path).endswith(".partial"):
            log.warning("skipping unfinished log %s", path)
            continue
        mlog = evalkit.MetricLog.read(path)
        last = mlog.final_epoch()
        name = mlog.run
        if name in rows:
            name = f"{name}:{Path(path).parent.name or Path(path).stem}"
        cells = {}
        for rec in mlog.records:
            if rec["epoch"] == last and rec["split"] != "train" and rec["metric"] == args["metric"]:
                cells[rec["split"]] = float(rec["value"])
        rows[name] = cells
    out.write("report.csv", evalkit.grid_to_csv(rows))


_HANDLERS = {
    "gen-biased-mnist": _gen_biased_mnist,
    "gen-synthetic": _gen_synthetic,
    "gen-long-tail": _gen_long_tail,
    "train": _train,
    "eval": _eval,
    "report": _report,
}


def run(command: CliCommand) -> int:
    args = dict(command.args)
    seed = args.pop("seed", None)
    out = Outputs(args.pop("out"))
    gen_seed = 0 if seed is None else seed
    try:
        if command.name == "train":
            _HANDLERS["train"](args, out, seed)
        else:
            _HANDLERS[command.name](args, out, gen_seed)
    except Exception as exc:  # every module error maps to a non-zero exit
        log.debug("command failed", exc_info=True)
        print(f"ggd {command.name}: {type(exc).__name__}: {exc}", file=sys.stderr)
        for p in out.pending:
            print(f"ggd: incomplete output left at {p}", file=sys.stderr)
        return 1
    out.commit()
    return 0


def _configure_logging():
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("GGD_LOG", "quiet").lower(), logging.WARNING
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _configure_logging()
    argv = sys.argv[1:] if argv is None else argv
    try:
        command = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    return run(command)


if __name__ == "__main__":
    sys.exit(main())
