"""Artifact emission: schema-checked CSV, JSON and a checksum manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from pathlib import Path

import numpy as np
import scipy

from . import __version__

SCHEMAS = {
    "ou_variance.csv": ("g", "step", "v_var", "u_var"),
    "linearization_slopes.csv": ("layer", "state", "g", "slope"),
    "linearization_prefactors.csv": ("layer", "state", "g", "rho", "xi", "routing_coef", "pattern_coef"),
    "kappa_snr.csv": ("mode", "step", "layer", "g", "kappa", "snr", "censored"),
    "protocol1.csv": ("g", "t_int", "seed", "a_feat", "d_low", "d_high"),
    "protocol1_fits.csv": ("g", "tau_spec", "ci_lo", "ci_hi", "tau_g", "tau_l", "delta_tau"),
    "protocol2.csv": ("g", "layer", "step", "mode", "energy"),
    "protocol2_summary.csv": ("g", "layer", "lead_mean", "trail_mean", "gint", "spread"),
}


class SchemaError(ValueError):
    """Raised when rows do not match the declared column set of an artifact."""


def format_value(x) -> str:
    """Render a cell; floats use 17 significant digits so they round-trip."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        return "%.17g" % x
    if x is None:
        return ""
    return str(x)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Emitter:
    """Single writer for one output directory.

    Every CSV is validated against :data:`SCHEMAS` before it is written;
    :meth:`finalize` records a manifest with the config echo, seed,
    library versions and the checksum of each artifact (no timestamps, so
    reruns are byte-identical).
    """

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []

    def write_csv(self, name: str, rows) -> Path:
        if name not in SCHEMAS:
            raise SchemaError(f"no schema declared for {name}")
        cols = SCHEMAS[name]
        lines = []
        for i, row in enumerate(rows):
            if set(row) != set(cols):
                raise SchemaError(f"{name} row {i}: columns {sorted(row)} != {list(cols)}")
            lines.append([format_value(row[c]) for c in cols])
        path = self.out / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            w.writerows(lines)
        self.artifacts.append(name)
        return path

    def write_json(self, name: str, obj) -> Path:
        path = self.out / name
        with open(path, "w") as fh:
            json.dump(_plain(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.artifacts.append(name)
        return path

    def register(self, name: str) -> None:
        """Record a file written by another routine in the manifest."""
        self.artifacts.append(name)

    def finalize(self, command: str, config: dict, seed: int) -> Path:
        manifest = {
            "command": command,
            "config": _plain(config),
            "config_sha256": hashlib.sha256(
                json.dumps(_plain(config), sort_keys=True).encode()).hexdigest(),
            "seed": int(seed),
            "versions": {"replica_sync": __version__, "numpy": np.__version__,
                         "scipy": scipy.__version__, "python": platform.python_version()},
            "artifacts": {n: sha256_file(self.out / n) for n in sorted(set(self.artifacts))},
        }
        path = self.out / "manifest.json"
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def read_csv(path):
    """Read an emitted CSV back as a list of string dicts."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
