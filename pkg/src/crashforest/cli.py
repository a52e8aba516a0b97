"""Command-line entry point.

Exit codes: 0 success, 2 usage/config, 3 I/O, 4 data precondition.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

from . import cart, config as config_mod, evaluation, mlp, synthgen
from .evaluation import DataPreconditionError
from .prep import PrepError, encode
from .schema import (
    SEVERITY_TOKENS,
    InjurySeverity,
    SchemaError,
    filter_head_on_front,
    parse_csv,
    select_model_variables,
)

log = logging.getLogger("crashforest")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _color_enabled(stream) -> bool:
    if os.environ.get("CRASHFOREST_NO_COLOR"):
        return False
    return hasattr(stream, "isatty") and stream.isatty()


def _load_config(args) -> config_mod.RunConfig:
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config: {exc}") from None
    try:
        cfg = config_mod.load(text)
    except config_mod.ConfigError as exc:
        raise CliError(EXIT_USAGE, f"config error: {exc}") from None
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    log.info("resolved config:\n%s", cfg.resolved().rstrip())
    return cfg


def _class_arg(token: str) -> InjurySeverity:
    try:
        return InjurySeverity.from_token(token)
    except ValueError:
        raise CliError(EXIT_USAGE, f"unknown class {token!r}; valid tokens: "
                       f"{', '.join(SEVERITY_TOKENS.values())}") from None


def load_dataset(path):
    """Ingest, filter and encode a canonical CSV. Returns (dataset, provenance)."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read data: {exc}") from None
    try:
        records, report = parse_csv(data)
    except (SchemaError, UnicodeDecodeError) as exc:
        raise CliError(EXIT_USAGE, f"parse error: {exc}") from None
    log.info("ingest: read=%d parsed=%d rejected=%d %s", report.rows_read, report.rows_parsed,
             report.rows_rejected, dict(sorted(report.rejections.items())))
    rows = select_model_variables(filter_head_on_front(records))
    log.info("head-on/front rows: %d", len(rows))
    try:
        ds = encode(rows)
    except PrepError as exc:
        raise CliError(EXIT_DATA, f"data precondition: {exc}") from None
    info = {
        "input_sha256": hashlib.sha256(data).hexdigest(),
        "rows_read": report.rows_read,
        "rows_rejected": report.rows_rejected,
        "rows_modelled": len(rows),
        "travel_speed_missing": report.missingness["travel_speed"],
    }
    return ds, info


def _write(path, text: str):
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from None


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    try:
        records, truth = synthgen.generate(cfg.generator)
    except synthgen.SpecError as exc:
        raise CliError(EXIT_USAGE, f"invalid generator spec: {exc}") from None
    try:
        n = synthgen.write_csv(records, args.out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from None
    truth_path = args.truth or f"{args.out}.truth.json"
    _write(truth_path, truth.to_json())
    log.info("wrote %d rows (%d bytes) to %s; ground truth in %s", len(records), n, args.out, truth_path)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    ds, info = load_dataset(args.data)
    try:
        table = evaluation.run_all(ds, cfg.experiment())
    except DataPreconditionError as exc:
        raise CliError(EXIT_DATA, f"data precondition: {exc}") from None
    table.provenance.update(info)
    text = evaluation.render_text(table)
    records = evaluation.render_records(table)
    if args.out:
        try:
            Path(args.out).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot create {args.out}: {exc}") from None
        if args.emit in (None, "text"):
            _write(Path(args.out) / "results.txt", text)
        if args.emit in (None, "records"):
            _write(Path(args.out) / "results.jsonl", records)
    if args.emit == "records":
        sys.stdout.write(records)
    else:
        sys.stdout.write(evaluation.render_text(table, color=_color_enabled(sys.stdout)))
    return EXIT_OK


def cmd_importance(args) -> int:
    positive = _class_arg(args.cls)
    cfg = _load_config(args)
    ds, info = load_dataset(args.data)
    try:
        rep = evaluation.sensitivity(ds, positive, cfg.experiment())
    except DataPreconditionError as exc:
        raise CliError(EXIT_DATA, f"data precondition: {exc}") from None
    rep.provenance.update(info)
    if args.emit == "records":
        out = evaluation.render_sensitivity_records(rep)
    else:
        out = evaluation.render_sensitivity_text(rep, color=not args.out and _color_enabled(sys.stdout))
    if args.out:
        _write(args.out, out)
    else:
        sys.stdout.write(out)
    return EXIT_OK


def _fit_for_dump(args):
    positive = _class_arg(args.cls)
    cfg = _load_config(args)
    ds, _ = load_dataset(args.data)
    exp = cfg.experiment()
    try:
        evaluation.check_classes(ds)
        train, test = evaluation.repeat_split(ds, exp, args.repeat)
        return evaluation.fit_repeat(train, test, positive, exp, args.repeat)
    except DataPreconditionError as exc:
        raise CliError(EXIT_DATA, f"data precondition: {exc}") from None


def cmd_tree_dump(args) -> int:
    text = cart.dumps(_fit_for_dump(args).tree)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_model_dump(args) -> int:
    text = mlp.dumps(_fit_for_dump(args).model)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="section.key = value config file")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--emit", choices=("text", "records"), help="output format")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")

    parser = argparse.ArgumentParser(prog="crashforest", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic canonical CSV")
    p.add_argument("out", help="CSV path")
    p.add_argument("--truth", help="ground-truth JSON path (default: OUT.truth.json)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", parents=[common], help="five one-against-all experiments")
    p.add_argument("data", help="canonical CSV")
    p.add_argument("--out", help="directory for results.txt / results.jsonl")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("importance", parents=[common], help="rank variables for one class")
    p.add_argument("data", help="canonical CSV")
    p.add_argument("cls", metavar="CLASS", help="|".join(SEVERITY_TOKENS.values()))
    p.add_argument("--out", help="output file")
    p.set_defaults(func=cmd_importance)

    for name, func, what in (("tree-dump", cmd_tree_dump, "tree"), ("model-dump", cmd_model_dump, "perceptron")):
        p = sub.add_parser(name, parents=[common], help=f"serialize a trained {what}")
        p.add_argument("data", help="canonical CSV")
        p.add_argument("cls", metavar="CLASS", help="|".join(SEVERITY_TOKENS.values()))
        p.add_argument("--repeat", type=int, default=0, help="repeat index whose split is used")
        p.add_argument("--out", help="output file")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"crashforest: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
