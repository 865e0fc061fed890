"""Versioned CSV/JSON artifacts and the run manifest.

Every CSV starts with one comment line ``# schema=<kind>/<version> {json}``
carrying the schema tag and run metadata. Sites, including site-valued
metadata keys, are written 1-based.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .protocol import OtocSeries

SERIES_SCHEMA = "otoc_series/1"
HEATMAP_SCHEMA = "heatmap/1"
SCAN_SCHEMA = "m2_scan/1"
SCATTER_SCHEMA = "scatter/1"
_SITE_KEYS = ("butterfly_site", "mask_sites")


class SchemaError(ValueError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


def _csv_text(schema: str, meta: dict, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema={schema} {json.dumps(meta, sort_keys=True, default=str)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def read_csv(path, schema: str) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# schema="):
        raise SchemaError(f"{path}: missing schema header line")
    tag, _, meta_json = lines[0][len("# schema="):].partition(" ")
    if tag != schema:
        raise SchemaError(f"{path}: schema {tag!r}, expected {schema!r}")
    meta = json.loads(meta_json) if meta_json else {}
    return meta, list(csv.DictReader(lines[1:]))


def _shift_sites(meta: dict, offset: int) -> dict:
    out = dict(meta)
    for key in _SITE_KEYS:
        if key in out and out[key] is not None:
            v = out[key]
            out[key] = [int(s) + offset for s in v] if isinstance(v, (list, tuple)) else int(v) + offset
    return out


def series_csv_text(series: OtocSeries) -> str:
    rows = []
    for i, site in enumerate(series.sites):
        for k, t in enumerate(series.times):
            rows.append([int(site) + 1, _fmt(t), _fmt(series.raw[i, k]), _fmt(series.norm[i, k]),
                         _fmt(series.otoc[i, k]), _fmt(series.stderr[i, k])])
    header = ("site", "t", "raw", "norm", "otoc", "stderr")
    return _csv_text(SERIES_SCHEMA, _shift_sites(series.metadata, 1), header, rows)


def write_series_csv(path, series: OtocSeries) -> Path:
    return _write(path, series_csv_text(series))


def read_series_csv(path) -> OtocSeries:
    meta, rows = read_csv(path, SERIES_SCHEMA)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    try:
        sites = sorted({int(r["site"]) for r in rows})
        times = sorted({float(r["t"]) for r in rows})
        s_idx = {s: i for i, s in enumerate(sites)}
        t_idx = {t: k for k, t in enumerate(times)}
        arrays = {c: np.full((len(sites), len(times)), np.nan) for c in ("raw", "norm", "otoc", "stderr")}
        for r in rows:
            i, k = s_idx[int(r["site"])], t_idx[float(r["t"])]
            for c, arr in arrays.items():
                arr[i, k] = float(r[c])
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"{path}: bad row ({exc})") from exc
    if any(np.isnan(a).any() for a in arrays.values()):
        raise SchemaError(f"{path}: incomplete site x time grid")
    return OtocSeries(np.array(sites) - 1, np.array(times), arrays["raw"], arrays["norm"],
                      arrays["otoc"], arrays["stderr"], _shift_sites(meta, -1))


def write_heatmap_csv(path, sites, times, values, meta: dict | None = None) -> Path:
    rows = [[int(s) + 1, _fmt(t), _fmt(values[i, k])] for i, s in enumerate(sites) for k, t in enumerate(times)]
    return _write(path, _csv_text(HEATMAP_SCHEMA, meta or {}, ("site", "t", "value"), rows))


def write_scan_csv(path, rows, meta: dict | None = None) -> Path:
    body = [[r.n_quench, _fmt(r.m2_mean), _fmt(r.m2_haar), _fmt(r.abs_diff), _fmt(r.stderr), r.n_instances, r.seed]
            for r in rows]
    header = ("n_quench", "m2_mean", "m2_haar", "abs_diff", "stderr", "N_U", "seed")
    return _write(path, _csv_text(SCAN_SCHEMA, meta or {}, header, body))


def write_scatter_csv(path, tables: dict[int, np.ndarray], meta: dict) -> Path:
    """Per-instance branch pairs; ``tables`` maps 0-based site -> (U, 2) array."""
    rows = [[int(site) + 1, u, _fmt(a), _fmt(b)]
            for site, table in sorted(tables.items()) for u, (a, b) in enumerate(table)]
    return _write(path, _csv_text(SCATTER_SCHEMA, meta, ("site", "instance", "w", "v_w_v"), rows))


def write_json(path, data) -> Path:
    return _write(path, json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def tool_version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:
        return "unknown"


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: dict
    out_dir: Path
    status: str = "running"
    outputs: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    progress: dict = field(default_factory=dict)
    error: str | None = None
    _t0: float = field(default_factory=time.perf_counter, repr=False)
    started: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S%z"))

    @contextmanager
    def stage(self, name: str):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - t, 6)

    def record(self, path: Path) -> None:
        rel = str(Path(path).relative_to(self.out_dir))
        self.outputs[rel] = sha256_file(path)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "tool_version": tool_version(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "started": self.started,
            "wall_clock_s": round(time.perf_counter() - self._t0, 6),
            "timings_s": self.timings,
            "status": self.status,
            "progress": self.progress,
            "error": self.error,
            "outputs": {k: {"sha256": v} for k, v in sorted(self.outputs.items())},
        }

    def write(self) -> Path:
        return write_json(self.out_dir / manifest_name(self.command), self.to_dict())


def manifest_name(command: str) -> str:
    return f"{command}.manifest.json"
