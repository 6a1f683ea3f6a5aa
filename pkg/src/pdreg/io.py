"""File formats: landmark CSV, key = value configs, result JSON, grids, SVG and manifests."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .core import GaussianState
from .errors import FormatError, OutputExists
from .landmarks import LandmarkSet
from .registration import RegistrationConfig, RegistrationResult

COORD_NAMES = ("x", "y", "z")


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


# landmarks

def write_landmarks(path, landmarks: LandmarkSet) -> None:
    cols = ["label", *COORD_NAMES[:landmarks.dim]]
    if landmarks.noise_var is not None:
        cols.append("noise_var")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for i, label in enumerate(landmarks.labels):
            row = [label, *(_fmt(c) for c in landmarks.points[i])]
            if landmarks.noise_var is not None:
                row.append(_fmt(landmarks.noise_var[i]))
            writer.writerow(row)


def read_landmarks(path) -> LandmarkSet:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty landmark file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if header[:3] != ["label", "x", "y"]:
        raise FormatError(f"{path}: header must start with label,x,y")
    dim = 3 if len(header) > 3 and header[3] == "z" else 2
    extra = header[1 + dim:]
    if extra not in ([], ["noise_var"]):
        raise FormatError(f"{path}: unexpected columns {extra}")
    if not rows:
        raise FormatError(f"{path}: no landmark rows")
    labels, pts, nv = [], [], []
    for k, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}:{k}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{k}: {exc}") from None
        labels.append(row[0].strip())
        pts.append(vals[:dim])
        if extra:
            nv.append(vals[dim])
    try:
        return LandmarkSet(labels, np.array(pts), np.array(nv) if extra else None)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# config

def _coerce(name, text, kind):
    try:
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        return text
    except ValueError:
        raise FormatError(f"config key {name!r}: cannot parse {text!r}") from None


def config_types() -> dict:
    return {f.name: f.type for f in dataclasses.fields(RegistrationConfig)}


def read_config(path) -> dict:
    """Parse ``key = value`` lines (``#`` starts a comment) into typed values."""
    types = config_types()
    out = {}
    with open(path, encoding="utf-8") as fh:
        for k, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{k}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise FormatError(f"{path}:{k}: unknown config key {key!r}")
            out[key] = _coerce(key, value, types[key])
    return out


def write_config(path, config: RegistrationConfig) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in config.as_dict().items():
            fh.write(f"{key} = {_fmt(value) if isinstance(value, float) else value}\n")


# manifest

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    seed: int | None = None
    version: str = __version__
    duration_s: float = 0.0
    argv: list = field(default_factory=list)

    @classmethod
    def start(cls, command, config, input_paths=(), seed=None, argv=()):
        inputs = {str(p): file_digest(p) for p in input_paths}
        man = cls(command, dict(config), inputs, seed, __version__, 0.0, list(argv))
        man._t0 = time.perf_counter()
        return man

    def finish(self) -> "RunManifest":
        self.duration_s = time.perf_counter() - getattr(self, "_t0", time.perf_counter())
        return self

    def as_dict(self) -> dict:
        return {"command": self.command, "config": self.config, "inputs": self.inputs, "seed": self.seed,
                "version": self.version, "duration_s": self.duration_s, "argv": self.argv}


def manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def write_manifest(path, manifest: RunManifest) -> None:
    _write_json(path, manifest.as_dict())


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=1, allow_nan=True)
        fh.write("\n")


def check_output(out, inputs=(), force=False) -> None:
    """Refuse to clobber inputs ever, and existing files without ``force``."""
    target = Path(out).resolve()
    for p in inputs:
        if p is not None and Path(p).resolve() == target:
            raise OutputExists(f"output {out} would overwrite an input file")
    if target.exists() and not force:
        raise OutputExists(f"output {out} exists; pass --force to overwrite")


# results

def result_payload(result: RegistrationResult, manifest: RunManifest | None = None) -> dict:
    state = result.final_state
    payload = {
        "mu0": [float(v) for v in np.asarray(result.mu0).reshape(-1)],
        "residuals_mm": [float(v) for v in result.residuals],
        "objective_trace": [float(v) for v in result.objective_trace],
        "final_mean": [float(v) for v in state.mean.reshape(-1)],
        "final_cov": [float(v) for v in state.cov.reshape(-1)],
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "kind": result.kind,
        "dim": int(result.dim),
        "labels": list(result.labels),
        "control_points": [float(v) for v in result.control_points.reshape(-1)],
    }
    if manifest is not None:
        payload["manifest"] = manifest.as_dict()
    return payload


def write_result(path, result: RegistrationResult, manifest: RunManifest | None = None) -> None:
    _write_json(path, result_payload(result, manifest))


def read_result(path) -> RegistrationResult:
    """Load a diffeomorphic result JSON (enough to rebuild the velocity field)."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        d = int(data["dim"])
        ctrl = np.array(data["control_points"], dtype=float).reshape(-1, d)
        n = ctrl.shape[0] * d
        state = GaussianState(np.array(data["final_mean"], dtype=float),
                              np.array(data["final_cov"], dtype=float).reshape(n, n), 1.0)
        return RegistrationResult(np.array(data["mu0"], dtype=float).reshape(-1, d), state,
                                  list(data["objective_trace"]), np.array(data["residuals_mm"], dtype=float),
                                  bool(data["converged"]), int(data["iterations"]), ctrl, list(data["labels"]),
                                  data.get("kind", "diffeomorphic"))
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: malformed result file ({exc})") from None


# grids, LOO

def write_grid_csv(path, ufield) -> None:
    d = ufield.grid_points.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*COORD_NAMES[:d], "fc"])
        for p, fc in zip(ufield.grid_points, ufield.fc_values):
            writer.writerow([*(_fmt(c) for c in p), _fmt(fc)])


def read_grid_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :-1], data[:, -1]


def write_loo_csv(path, report) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "pre_mm", "post_mm", "predicted_fc"])
        for r in report.rows:
            writer.writerow([r.label, _fmt(r.pre_mm), _fmt(r.post_mm), _fmt(r.predicted_fc)])


def read_loo_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        return [{"label": r["label"], **{k: float(r[k]) for k in ("pre_mm", "post_mm", "predicted_fc")}}
                for r in csv.DictReader(fh)]


def write_json(path, payload) -> None:
    _write_json(path, payload)


# SVG

_LOW = np.array([200.0, 200.0, 200.0])
_HIGH = np.array([20.0, 60.0, 200.0])


def _colour(t: float) -> str:
    r, g, b = np.rint(_LOW + (_HIGH - _LOW) * t).astype(int)
    return f"#{r:02x}{g:02x}{b:02x}"


def write_svg(path, ufield, landmarks=None, size: int = 500) -> dict:
    """Single-file heatmap of a 2-D FC grid, normalized by the grid maximum.

    Returns the normalization metadata (min and max FC in mm^2).
    """
    if ufield.shape is None or len(ufield.shape) != 2:
        raise FormatError("SVG heatmaps need a regular 2-D grid")
    nx, ny = ufield.shape
    (x0, x1), (y0, y1) = ufield.bounds
    fc = ufield.fc_values.reshape(nx, ny)
    lo, hi = float(fc.min()), float(fc.max())
    norm = fc / hi if hi > 0 else np.zeros_like(fc)
    cw, ch = size / nx, size / ny
    legend_w = 120
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + legend_w}" height="{size}" '
             f'viewBox="0 0 {size + legend_w} {size}">']
    for i in range(nx):
        for j in range(ny):
            # row j counts from the top, so flip y
            parts.append(f'<rect x="{i * cw:.3f}" y="{(ny - 1 - j) * ch:.3f}" width="{cw:.3f}" '
                         f'height="{ch:.3f}" fill="{_colour(norm[i, j])}"/>')
    if landmarks is not None:
        pts = np.atleast_2d(landmarks)
        px = (pts[:, 0] - x0) / (x1 - x0) * (size - cw) + cw / 2
        py = size - ((pts[:, 1] - y0) / (y1 - y0) * (size - ch) + ch / 2)
        parts += [f'<circle cx="{a:.3f}" cy="{b:.3f}" r="4" fill="none" stroke="#d62728" stroke-width="1.5"/>'
                  for a, b in zip(px, py)]
    steps = 20
    for k in range(steps):
        t = 1.0 - k / (steps - 1)
        parts.append(f'<rect x="{size + 20}" y="{40 + k * 20}" width="20" height="20" fill="{_colour(t)}"/>')
    parts.append(f'<text x="{size + 45}" y="55" font-size="11" font-family="sans-serif">max {hi:.4g} mm²</text>')
    parts.append(f'<text x="{size + 45}" y="{40 + steps * 20}" font-size="11" '
                 f'font-family="sans-serif">min {lo:.4g} mm²</text>')
    parts.append(f'<text x="{size + 10}" y="25" font-size="12" font-family="sans-serif">FC</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
    return {"fc_min": lo, "fc_max": hi}

