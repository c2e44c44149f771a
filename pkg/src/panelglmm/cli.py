"""Command-line front end.

Exit codes: 0 success, 1 numerical or runtime failure, 2 dataset contract
violation, 3 invalid configuration.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import io as pio
from .errors import ConfigError, DataContractError, PanelGLMMError
from .ridge_em import fit
from .sc_em import cv_tune, fit_hd
from .simulate import gen_panel, run_study

EXIT_OK, EXIT_NUMERICAL, EXIT_DATA, EXIT_CONFIG = 0, 1, 2, 3

logger = logging.getLogger("panelglmm")


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _out_dir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _load_fit_inputs(args):
    cfg = pio.run_config(pio.load_json(args.config) if args.config else {"format_version": 1}, args.seed)
    if not args.data:
        raise DataContractError("--data is required")
    data = pio.read_panel_csv(args.data)
    designs = data.designs(cfg.intercept)
    try:
        cfg.family.check_response(data.y)
    except ValueError as exc:
        raise DataContractError(str(exc)) from exc
    return cfg, data, designs


def cmd_fit(args) -> int:
    cfg, data, designs = _load_fit_inputs(args)
    try:
        cfg.fit.mask_for(designs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    result = fit(data.y, designs, cfg.family, cfg.fit)
    _write(os.path.join(_out_dir(args), "fit.json"), pio.dumps(pio.fit_document(result, data, cfg)))
    return EXIT_OK


def cmd_fit_hd(args) -> int:
    cfg, data, designs = _load_fit_inputs(args)
    selection = cv_tune(data.y, designs, cfg.family, cfg.sc, cfg.fit, n_jobs=args.threads)
    sc = cfg.sc.with_choice(*selection)
    result = fit_hd(data.y, designs, cfg.family, sc, cfg.fit)
    doc = pio.fit_hd_document(result, data, cfg, selection)
    _write(os.path.join(_out_dir(args), "fit.json"), pio.dumps(doc))
    return EXIT_OK


def cmd_simulate(args) -> int:
    if not args.config:
        raise ConfigError("--config is required")
    spec = pio.sim_spec(pio.load_json(args.config), args.seed)
    y, X, truth = gen_panel(spec)
    feats = X[:, 1:] if spec.intercept else X
    out = _out_dir(args)
    _write(os.path.join(out, "data.csv"), pio.panel_csv_text(y, feats, spec.layout))
    _write(os.path.join(out, "truth.json"), pio.dumps(pio.truth_document(spec, truth)))
    return EXIT_OK


def cmd_study(args) -> int:
    if not args.config:
        raise ConfigError("--config is required")
    study, fit_cfg, sc_cfg = pio.study_spec(pio.load_json(args.config), args.seed)
    result = run_study(study, fit_cfg, sc_cfg, n_jobs=args.threads)
    out = _out_dir(args)
    _write(os.path.join(out, "study_result.json"), result.to_json())
    _write(os.path.join(out, "study_result.csv"), result.to_csv())
    if all(r["estimates"] is None for r in result.records):
        logger.error("every replicate failed")
        return EXIT_NUMERICAL
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "fit-hd": cmd_fit_hd, "simulate": cmd_simulate, "study": cmd_study}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panelglmm", description="Panel GLMMs with an AR(1) time effect.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "fit": "ridge-penalized fit with GCV-selected lambda",
        "fit-hd": "supervised-component fit for many covariates",
        "simulate": "draw a synthetic panel dataset",
        "study": "run a replicate simulation study",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        if name.startswith("fit"):
            p.add_argument("--data", required=True, help="dataset CSV (id, time, y, features)")
            p.add_argument("--config", help="run configuration JSON")
        else:
            p.add_argument("--config", required=True, help="specification JSON")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, help="overrides the configuration seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except DataContractError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PanelGLMMError, ArithmeticError, ValueError) as exc:
        print(f"fit failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
