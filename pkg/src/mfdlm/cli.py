"""Command-line front end: simulate, preprocess-tfa, fit, diagnose.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical error.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from ._compat import HAS_NUMBA, set_threads
from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger("mfdlm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'a,b', got {text!r}") from None
    return a, b


def _read_yaml(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: expected a mapping at the top level")
    return raw


def version_text() -> str:
    accel = "numba" if HAS_NUMBA else "numpy"
    return f"mfdlm {__version__} (kernels: {accel}; numpy {np.__version__}; python {platform.python_version()})"


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    from .dataset import SynthSpec, generate_synthetic, write_long_csv

    raw = _read_yaml(args.spec)
    try:
        spec = SynthSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{args.spec}: {exc}") from exc
    try:
        data, truth = generate_synthetic(spec)
    except ValueError as exc:
        raise ConfigError(f"{args.spec}: {exc}") from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_long_csv(data, out)
    if args.truth:
        record = {
            "kind": truth["kind"],
            "beta": truth["beta"].tolist(),
            "loadings": truth["loadings"].tolist(),
            "gamma": truth["gamma"].tolist(),
            "psi": truth["psi"].tolist(),
            "noise_var": truth["noise_var"].tolist(),
            "innovation_var": truth["innovation_var"].tolist(),
            "basis": truth["basis"].summary(),
        }
        Path(args.truth).write_text(json.dumps(record))
    log.info("wrote %s (C=%d, T=%d, %d rows)", out, data.C, data.T, data.n_obs)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .dataset import write_long_csv
    from .tfa import build_mfts, read_signal_csv

    signals = read_signal_csv(args.signals, args.rate)
    data, manifest = build_mfts(signals, band=args.band, n_sub=args.subsegments, nfft=args.nfft)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_long_csv(data, out)
    man_path = Path(args.manifest) if args.manifest else out.with_suffix(".manifest.json")
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    log.info("wrote %s (C=%d, T=%d, m=%d)", out, data.C, data.T, manifest["m"])
    return EXIT_OK


def load_fit_config(path, seed: int | None = None):
    from .gibbs import FitConfig

    raw = _read_yaml(path)
    out_dir = raw.pop("output_dir", None)
    if seed is not None:
        raw["seed"] = seed
    return FitConfig.from_dict(raw), out_dir


def cmd_fit(args) -> int:
    from . import gibbs
    from .dataset import load_long_csv

    cfg, cfg_out = load_fit_config(args.config, args.seed)
    out_dir = args.out or cfg_out
    if out_dir is None:
        raise UsageError("no output directory: pass --out or set output_dir in the config")
    if args.domain is not None:
        cfg.domain = args.domain
    set_threads(args.threads)
    data = load_long_csv(args.data)
    chain = gibbs.run(data, cfg, out_dir=out_dir, resume=args.resume, timings_file=args.timings)
    log.info("fit finished: %d retained draws in %s", chain.n_kept, out_dir)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from . import diag
    from .gibbs import Chain

    chain_dir = Path(args.chain)
    if not (chain_dir / "manifest.json").exists():
        raise DataError(f"no chain manifest in {chain_dir}")
    chain = Chain.read(chain_dir)
    groups = args.groups.split(",") if args.groups else None
    contrast_spec = None
    if args.contrasts:
        from .dataset import load_long_csv

        if not args.data:
            raise UsageError("--contrasts needs --data for the time labels")
        spec = _read_yaml(args.contrasts)
        data = load_long_csv(args.data)
        for need in ("beta", "loadings"):
            if need not in chain.draws:
                raise DataError(f"contrasts need the chain to monitor '{need}'")
        groups_spec = {k: [tuple(v) for v in vals] for k, vals in spec["groups"].items()}
        tau = np.asarray(spec.get("tau") or np.unique(data.tau), dtype=float)
        contrast_spec = {
            "beta_draws": chain.array("beta"),
            "loading_draws": chain.array("loadings"),
            "basis": chain.basis,
            "labels": data.labels,
            "groups": groups_spec,
            "tau": tau,
            "coherence": [int(c) - 1 for c in spec.get("coherence", [])],
            "contrast": spec.get("contrast"),
        }
    result = diag.diagnose(chain, args.out, groups, contrast_spec)
    log.info("diagnostics written to %s (%d parameters)", args.out, result["n_params"])
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mfdlm", description="Bayesian multivariate functional dynamic linear models")
    p.add_argument("--version", action="version", version=version_text())
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate synthetic data from a YAML spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--truth", help="write the ground truth as JSON")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess-tfa", help="turn multichannel signals into log spectra and coherences")
    s.add_argument("--signals", required=True)
    s.add_argument("--rate", type=float, required=True, help="sampling rate in Hz")
    s.add_argument("--out", required=True)
    s.add_argument("--band", type=_pair, default=(0.1, 80.0))
    s.add_argument("--subsegments", type=int, default=5)
    s.add_argument("--nfft", type=int, default=None, help="zero-padded DFT length per subsegment")
    s.add_argument("--manifest", help="band/bin manifest path (default: next to --out)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("fit", help="run the Gibbs sampler")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", help="output directory (overrides output_dir in the config)")
    s.add_argument("--domain", type=_pair, default=None)
    s.add_argument("--resume", help="checkpoint file to resume from")
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--timings", action="store_true", help="also write wall-clock timings.json")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("diagnose", help="ESS, HPD intervals, outliers, DIC and contrasts")
    s.add_argument("--chain", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--groups", help="comma-separated parameter groups")
    s.add_argument("--contrasts", help="YAML grouping spec for posterior contrasts")
    s.add_argument("--data", help="dataset (for time labels)")
    s.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"mfdlm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"mfdlm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"mfdlm: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
