"""CSV and JSON output of experiment reports."""
from __future__ import annotations

import csv
import json
import platform
from pathlib import Path

import numpy as np

from .. import __version__
from ..errors import ConfigurationError
from ..kernels import DEFAULT_BACKEND
from .experiment import TABLE_COLUMNS, RunReport

REPORT_CSV = "report.csv"
METADATA_JSON = "metadata.json"


def _slug(alpha):
    return repr(float(alpha)).replace(".", "p")


def _write_columns(path, columns: dict):
    names = list(columns)
    cols = [np.asarray(columns[n]) for n in names]
    header, data = [], []
    for name, col in zip(names, cols):
        if col.ndim == 1:
            header.append(name)
            data.append(col)
        else:
            for k in range(col.shape[1]):
                header.append(f"{name}_{k}")
                data.append(col[:, k])
    n = min((len(c) for c in data), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(n):
            w.writerow([repr(c[i].item()) for c in data])


def parse_cell(cell):
    """``"m +/- s"`` to ``(m, s)``."""
    m, s = cell.split("+/-")
    return float(m), float(s)


def read_report_csv(path):
    """Rows ``(alpha, det_noattack, det_fdi, dev_noattack, dev_fdi)``; the last four are ``(mean, std)``."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != TABLE_COLUMNS:
            raise ConfigurationError(f"unexpected report header {header}")
        return [(float(row[0]), *(parse_cell(c) for c in row[1:])) for row in r]


def report_rows(report: RunReport):
    """In-memory counterpart of :func:`read_report_csv`."""
    return [(r.alpha, r.det_noattack, r.det_fdi, r.dev_noattack, r.dev_fdi) for r in report.rows]


def emit_report(report: RunReport, directory) -> dict:
    """Write the table CSV, per-update and per-step trace CSVs and a metadata JSON.

    Returns the mapping of written file roles to paths.  Contents depend only
    on the report, so identical runs produce identical files.
    """
    if not report.rows or report.paths == 0:
        raise ConfigurationError("refusing to write a report without evaluation paths")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    files = {"report": REPORT_CSV}
    with open(out / REPORT_CSV, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for row in report.rows:
            w.writerow(row.table_cells())
    traces = {}
    for alpha, tr in report.traces.items():
        entry = {}
        name = f"train_{_slug(alpha)}.csv"
        train = tr["train"]
        _write_columns(out / name, {"update": np.arange(1, len(train["statistic"]) + 1), **train})
        entry["train"] = name
        if "steps" in tr:
            name = f"steps_{_slug(alpha)}.csv"
            _write_columns(out / name, tr["steps"])
            entry["steps"] = name
        traces[repr(float(alpha))] = entry
    files["traces"] = traces
    meta = {
        "variant": report.variant,
        "paths": report.paths,
        "rows": [
            {
                "alpha": r.alpha,
                "lambda_star": r.lambda_star,
                "converged": r.converged,
                "paths": r.paths,
                "markov_bound": list(r.markov_bound),
                "markov_bound_dominates": r.bound_dominates,
            }
            for r in report.rows
        ],
        "lambda_summary": {repr(float(a)): tr["summary"] for a, tr in report.traces.items()},
        "flags": list(report.flags),
        "files": files,
        "config": report.config,
        "versions": {
            "kcfattack": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "backend": report.config.get("backend") or DEFAULT_BACKEND,
        },
    }
    (out / METADATA_JSON).write_text(json.dumps(meta, indent=2, default=float))
    files["metadata"] = METADATA_JSON
    return {k: (out / v if isinstance(v, str) else v) for k, v in files.items()}
