"""Command line entry point.

Every subcommand reads one JSON config (``--config``) and writes into an
output directory (``--out``). Exit status: 0 on success, 1 on a config
error, 2 on a numeric breakdown.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .data import gen_curves, gen_digits, save_idx_images, save_idx_labels
from .errors import ConfigError, ContractError, NumericBreakdownError, ParseError, SizeError
from .probes import ALIGNMENT_COLUMNS, SURFACE_COLUMNS, probe_alignment, probe_rank, surface_slice, write_rows
from .training import LOG_COLUMNS, TrainConfig, run_training

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2

CSV_SCHEMA = f"""\
output files (CSV is comma separated with a header row; floats carry 17
significant digits):

  train            <log_path> (default train_log.csv) with columns
                     {",".join(LOG_COLUMNS)}
                   one row per update; tau, gamma, alpha_star and rho are
                   nan for first-order optimizers and rho is nan on updates
                   where it is not evaluated. Also params.knw, params_avg.knw
                   (averaged iterate) and summary.json.
  probe-alignment  alignment.csv with columns
                     {",".join(ALIGNMENT_COLUMNS)}
                   layer is 1..L or "all"; status is "ok" or the failure text.
  probe-rank       rank.json with n_samples, n_params, rank_output_hessian,
                   rank, rank_matvec and bound.
  surface-slice    surface.csv with columns
                     {",".join(SURFACE_COLUMNS)}
  gen-data         images.idx, plus labels.idx (digit classes) for digits.

exit status: 0 success, 1 config error, 2 numeric breakdown.
"""


def _train(cfg: TrainConfig, out: str) -> int:
    result = run_training(cfg, out_dir=out)
    if result.status != "ok":
        print(result.status, file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _alignment(cfg, out):
    write_rows(os.path.join(out, "alignment.csv"), probe_alignment(cfg), ALIGNMENT_COLUMNS)
    return EXIT_OK


def _rank(cfg, out):
    with open(os.path.join(out, "rank.json"), "w") as fh:
        json.dump(probe_rank(cfg), fh, indent=2, sort_keys=True)
    return EXIT_OK


def _surface(cfg, out):
    write_rows(os.path.join(out, "surface.csv"), surface_slice(cfg), SURFACE_COLUMNS)
    return EXIT_OK


def _gen_data(cfg, out):
    d = cfg.dataset
    kind = d.get("kind", "curves")
    count, side, seed = int(d.get("count", 4000)), int(d.get("side", 12)), int(d.get("seed", cfg.seed))
    if kind == "curves":
        ds = gen_curves(count, side, seed)
    elif kind == "digits":
        ds = gen_digits(count, side, seed, float(d.get("jitter", 0.05)))
    else:
        raise ConfigError(f"gen-data cannot generate dataset kind {kind!r}")
    save_idx_images(os.path.join(out, "images.idx"), ds.inputs, side, side)
    if ds.digits is not None:
        save_idx_labels(os.path.join(out, "labels.idx"), ds.digits)
    return EXIT_OK


COMMANDS = {
    "train": (_train, "run an optimizer and log every update"),
    "probe-alignment": (_alignment, "cosines between approximate and exact GN updates on one batch"),
    "probe-rank": (_rank, "numerical rank of the dense minibatch GN matrix"),
    "surface-slice": (_surface, "loss on a 2-D slice through parameter space"),
    "gen-data": (_gen_data, "write a synthetic dataset as IDX files"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kfgn",
        description="Kronecker-factored Gauss-Newton training and diagnostics.",
        epilog=CSV_SCHEMA,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, epilog=CSV_SCHEMA, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory (created if missing)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        cfg = TrainConfig.load(args.config)
        os.makedirs(args.out, exist_ok=True)
        return handler(cfg, args.out)
    except (ConfigError, ContractError, ParseError, SizeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as exc:
        print(f"numeric breakdown: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
