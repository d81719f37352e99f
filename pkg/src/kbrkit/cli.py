"""Command-line front end: config parsing, experiment dispatch, report emission.

Four subcommands are exposed::

    kbrkit posterior-mean   replicated posterior-mean comparison over dimensions
    kbrkit kbf              replicated filtering comparison on one dynamics
    kbrkit rate-study       ratio-estimator sup-norm error across sample sizes
    kbrkit gradcheck        finite-difference audit of the feature-loss gradient

Options may come from flags or from a plain key=value config file
(``--config``); flags win, unknown keys are rejected, and the fully
resolved configuration is echoed to a sidecar file next to the outputs.
The seed falls back to the ``KBRKIT_SEED`` environment variable when not
given.  Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .benchmarks import (
    DEFAULT_RATE_SIZES,
    DYNAMICS_PRESETS,
    GaussianTaskSpec,
    KBF_METHODS,
    POSTERIOR_MEAN_VARIANTS,
    RATE_ETA_SCALE,
    run_gradcheck,
    run_kbf_experiment,
    run_posterior_mean_experiment,
    run_rate_study,
)
from .kernels import NumericalFailure
from .reports import render_figures, summarize_rows, write_plot_csv, write_results_csv

SEED_ENV_VAR = "KBRKIT_SEED"


class ConfigError(ValueError):
    """Invalid command line or config file."""


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved invocation: command, common knobs, per-command options."""

    command: str
    seed: int
    out: str
    runs: int
    jobs: int
    figures: bool
    options: dict


# converters double as validators; parse_config wraps their ValueError
# with the offending key name


def _uint64(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return value


def _pos_int(text):
    value = int(text)
    if value < 1:
        raise ValueError("must be >= 1")
    return value


def _pos_float(text):
    value = float(text)
    if value <= 0:
        raise ValueError("must be > 0")
    return value


def _bool(text):
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError("must be a boolean")


def _int_list(text):
    values = [int(part) for part in str(text).split(",") if part.strip()]
    if not values or any(v < 1 for v in values):
        raise ValueError("must be a comma-separated list of positive integers")
    return values


def _name_list(allowed):
    def convert(text):
        names = [part.strip() for part in str(text).split(",") if part.strip()]
        for name in names:
            if name not in allowed:
                raise ValueError(f"unknown name {name!r}; allowed: {', '.join(allowed)}")
        if not names:
            raise ValueError("must name at least one entry")
        return names

    return convert


_COMMON_SCHEMA = {
    "seed": (_uint64, None, "experiment seed (fallback: KBRKIT_SEED, then 0)"),
    "out": (str, "results", "output directory"),
    "runs": (_pos_int, 30, "number of replicates"),
    "jobs": (_pos_int, 1, "worker processes for replicates"),
    "figures": (_bool, True, "render PNG figures next to the CSVs"),
}

_COMMAND_SCHEMAS = {
    "posterior-mean": {
        "d": (_int_list, [2, 8, 32], "dimensions, comma separated"),
        "variants": (
            _name_list(POSTERIOR_MEAN_VARIANTS),
            ["iw", "original"],
            "estimators to compare",
        ),
        "n-train": (_pos_int, 200, "training pairs per run"),
        "n-prior": (_pos_int, 200, "prior draws per run"),
        "n-test": (_pos_int, 100, "conditioning points per run"),
        "eta": (_pos_float, 0.2, "ratio-solve ridge"),
        "lam": (_pos_float, 0.2, "posterior-solve ridge"),
    },
    "kbf": {
        "dynamics": (str, "oscillatory", "dynamics preset: rotation or oscillatory"),
        "methods": (
            _name_list(KBF_METHODS),
            ["iw", "original", "ekf", "pf"],
            "filters to compare",
        ),
        "t-train": (_pos_int, 400, "training trace length"),
        "t-test": (_pos_int, 200, "test trace length"),
        "sigma-x": (_pos_float, 0.2, "observation noise scale"),
        "sigma-z": (_pos_float, 0.2, "process noise scale"),
        "pf-particles": (_pos_int, 1000, "particle count for the particle filter"),
        "val-len": (_pos_int, 200, "validation suffix length for tuning"),
        "beta": (_pos_float, None, "pin the bandwidth scale (skips tuning with lam+eta)"),
        "lam": (_pos_float, None, "pin the posterior ridge"),
        "eta": (_pos_float, None, "pin the ratio ridge"),
    },
    "rate-study": {
        "sizes": (_int_list, list(DEFAULT_RATE_SIZES), "sample sizes, comma separated"),
        "n-seeds": (_pos_int, 10, "seeds per sample size"),
        "eta-scale": (_pos_float, RATE_ETA_SCALE, "scale of the n^(-1/3) ridge schedule"),
    },
    "gradcheck": {
        "nets": (_pos_int, 20, "number of random networks"),
        "n": (_pos_int, 10, "points per instance"),
        "d": (_pos_int, 3, "feature dimension"),
    },
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kbrkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")
    for command, schema in _COMMAND_SCHEMAS.items():
        cmd = sub.add_parser(command)
        cmd.add_argument("--config", type=str, default=None, help="key=value config file")
        for key, (_conv, _default, help_text) in {**_COMMON_SCHEMA, **schema}.items():
            if key == "figures":
                cmd.add_argument(
                    "--figures", action=argparse.BooleanOptionalAction, default=None, help=help_text
                )
            else:
                cmd.add_argument(f"--{key}", type=str, default=None, help=help_text)
    return parser


def _read_config_file(path: str) -> dict:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def parse_config(argv=None) -> RunConfig:
    """Resolve the invocation from argv plus an optional key=value config file."""
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            raise ConfigError("invalid command line") from None
        raise
    if ns.command is None:
        raise ConfigError("no command given; expected one of: " + ", ".join(_COMMAND_SCHEMAS))

    schema = {**_COMMON_SCHEMA, **_COMMAND_SCHEMAS[ns.command]}
    file_values = _read_config_file(ns.config) if ns.config else {}
    if "command" in file_values:
        if file_values.pop("command") != ns.command:
            raise ConfigError("config file names a conflicting command")
    unknown = set(file_values) - set(schema)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")

    resolved = {}
    for key, (convert, default, _help) in schema.items():
        flag_value = getattr(ns, key.replace("-", "_"))
        raw = flag_value if flag_value is not None else file_values.get(key)
        if raw is None:
            resolved[key] = default
            continue
        try:
            resolved[key] = convert(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid value for {key}: {exc}") from exc

    if resolved["seed"] is None:
        env_seed = os.environ.get(SEED_ENV_VAR)
        try:
            resolved["seed"] = _uint64(env_seed) if env_seed is not None else 0
        except ValueError as exc:
            raise ConfigError(f"invalid {SEED_ENV_VAR}: {exc}") from exc

    if ns.command == "kbf":
        if resolved["dynamics"] not in DYNAMICS_PRESETS:
            raise ConfigError(
                f"unknown dynamics {resolved['dynamics']!r}; expected rotation or oscillatory"
            )
        pins = [resolved["beta"], resolved["lam"], resolved["eta"]]
        if any(p is not None for p in pins) and not all(p is not None for p in pins):
            raise ConfigError("pin all of beta, lam, eta or none of them")

    options = {k: v for k, v in resolved.items() if k not in _COMMON_SCHEMA}
    return RunConfig(
        command=ns.command,
        seed=resolved["seed"],
        out=resolved["out"],
        runs=resolved["runs"],
        jobs=resolved["jobs"],
        figures=resolved["figures"],
        options=options,
    )


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    lines = [f"command={cfg.command}"]
    common = {"seed": cfg.seed, "out": cfg.out, "runs": cfg.runs, "jobs": cfg.jobs, "figures": cfg.figures}
    for key in sorted(common):
        lines.append(f"{key}={common[key]}")
    for key in sorted(cfg.options):
        value = cfg.options[key]
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def dispatch(cfg: RunConfig) -> int:
    """Run the configured experiment and write its artifacts; returns the exit code."""
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)
    opts = cfg.options

    if cfg.command == "posterior-mean":
        rows = []
        for d in opts["d"]:
            spec = GaussianTaskSpec(
                d=d,
                n_train=opts["n-train"],
                n_prior=opts["n-prior"],
                n_test=opts["n-test"],
                seed=cfg.seed,
            )
            rows.extend(
                run_posterior_mean_experiment(
                    spec,
                    variants=opts["variants"],
                    runs=cfg.runs,
                    eta=opts["eta"],
                    lam=opts["lam"],
                    jobs=cfg.jobs,
                )
            )
    elif cfg.command == "kbf":
        spec = DYNAMICS_PRESETS[opts["dynamics"]](
            sigma_x=opts["sigma-x"],
            sigma_z=opts["sigma-z"],
            t_train=opts["t-train"],
            t_test=opts["t-test"],
            seed=cfg.seed,
        )
        fixed = None
        if opts["beta"] is not None:
            fixed = (opts["beta"], opts["lam"], opts["eta"])
        rows = run_kbf_experiment(
            spec,
            methods=opts["methods"],
            runs=cfg.runs,
            fixed_params=fixed,
            pf_particles=opts["pf-particles"],
            val_len=opts["val-len"],
            jobs=cfg.jobs,
        )
    elif cfg.command == "rate-study":
        rows = run_rate_study(
            sizes=opts["sizes"],
            n_seeds=opts["n-seeds"],
            seed=cfg.seed,
            eta_scale=opts["eta-scale"],
        )
    elif cfg.command == "gradcheck":
        rows, max_err = run_gradcheck(
            n_nets=opts["nets"], n=opts["n"], d=opts["d"], seed=cfg.seed
        )
        write_results_csv(out_dir / "results.csv", rows)
        print(f"max relative gradient error over {opts['nets']} nets: {max_err:.3e}")
        return 0
    else:  # pragma: no cover - parse_config guards this
        raise ConfigError(f"unknown command {cfg.command!r}")

    plot_rows = summarize_rows(rows)
    write_results_csv(out_dir / "results.csv", rows)
    write_plot_csv(out_dir / "plot_data.csv", plot_rows)
    if cfg.figures:
        render_figures(cfg.command, rows, plot_rows, out_dir)
    print(f"wrote {len(rows)} result rows to {out_dir / 'results.csv'}")
    return 0


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return dispatch(cfg)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
