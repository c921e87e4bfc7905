"""Command-line runner: ``quasisure run CONFIG.json`` and ``quasisure list``.

Exit codes: 0 when every declared tolerance passes, 1 on a tolerance
failure, 2 on a bad configuration or unknown experiment.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, InvalidSpec, UnsupportedDimension
from .experiments import REGISTRY, list_experiments

SCHEMA_VERSION = 1
TOP_KEYS = {"schema_version", "experiment", "seed", "threads", "params"}

log = logging.getLogger("quasisure")


class ConfigError(Exception):
    pass


def _plain(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    return x


def canonical_json(obj):
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def resolve_config(raw, seed=None, threads=None):
    """Validate a raw config dict and merge defaults; raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    extra = set(raw) - TOP_KEYS
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    name = raw.get("experiment")
    if name not in REGISTRY:
        raise ConfigError(f"unknown experiment {name!r}; run 'list' for the registered names")
    exp = REGISTRY[name]
    params = raw.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("params must be an object")
    bad = set(params) - set(exp.defaults)
    if bad:
        raise ConfigError(f"unknown parameters for {name}: {sorted(bad)}")
    merged = dict(exp.defaults)
    merged.update(params)
    s = raw.get("seed", 0) if seed is None else seed
    t = raw.get("threads", 1) if threads is None else threads
    if not isinstance(s, int) or s < 0:
        raise ConfigError("seed must be a nonnegative integer")
    if not isinstance(t, int) or t < 1:
        raise ConfigError("threads must be a positive integer")
    return {"schema_version": SCHEMA_VERSION, "experiment": name, "seed": s, "threads": t, "params": merged}


def config_hash(resolved):
    return "sha256:" + hashlib.sha256(canonical_json(resolved).encode()).hexdigest()


def _csv_bytes(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([json.dumps(_plain(v)) if isinstance(v, (list, tuple, dict, np.ndarray)) else _plain(v) for v in r])
    return buf.getvalue().encode()


def execute(resolved, out_dir):
    """Run a resolved config and write ``report.json``, CSV tables and ``manifest.json``."""
    exp = REGISTRY[resolved["experiment"]]
    outcome = exp.fn(dict(resolved["params"]), resolved["seed"], resolved["threads"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    report = {"experiment": exp.name, "passed": bool(outcome.passed), "result": outcome.report}
    files["report.json"] = (json.dumps(_plain(report), sort_keys=True, indent=2, allow_nan=False) + "\n").encode()
    for name, (header, rows) in sorted(outcome.tables.items()):
        if header[0] == "statistic":
            header = ("operation",) + tuple(header)
            rows = [[exp.name] + list(r) for r in rows]
        files[f"{name}.csv"] = _csv_bytes(header, rows)
    manifest = {
        "config": resolved,
        "config_hash": config_hash(resolved),
        "outputs": {k: "sha256:" + hashlib.sha256(v).hexdigest() for k, v in sorted(files.items())},
        "passed": bool(outcome.passed),
    }
    files["manifest.json"] = (json.dumps(_plain(manifest), sort_keys=True, indent=2, allow_nan=False) + "\n").encode()
    for k, v in files.items():
        (out / k).write_bytes(v)
    return outcome


def build_parser():
    p = argparse.ArgumentParser(prog="quasisure", description="Quasi-sure stochastic analysis experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment from a JSON config")
    r.add_argument("config", help="path to the JSON config")
    r.add_argument("--out", default="out", help="output directory (default: ./out)")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--threads", type=int, default=None, help="worker threads (results do not depend on it)")
    r.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("list", help="list registered experiments")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2
    if args.command == "list":
        for name, doc in list_experiments():
            print(f"{name:22s} {doc}")
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        resolved = resolve_config(raw, args.seed, args.threads)
    except (OSError, json.JSONDecodeError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    log.info("running %s (%s)", resolved["experiment"], config_hash(resolved))
    try:
        outcome = execute(resolved, args.out)
    except (InvalidSpec, InvalidArgument, UnsupportedDimension, KeyError, TypeError) as e:
        print(f"error: invalid parameters: {e}", file=sys.stderr)
        return 2
    status = "PASS" if outcome.passed else "FAIL"
    print(f"{resolved['experiment']}: {status} (outputs in {args.out})")
    return 0 if outcome.passed else 1


if __name__ == "__main__":
    sys.exit(main())
