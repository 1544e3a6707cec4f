"""Report writers: CSV tables, SVG score curves and a JSON summary.

All writers format floats with ``repr`` or fixed precision so that the same
report always yields byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional
from xml.sax.saxutils import escape

from .attacker import write_trace_csv, write_trace_summary
from .experiment import Assets, RankingTable, RunReport
from .image import save_image

REPORT_COLUMNS = (
    "identity", "defense", "seed", "iteration", "genome",
    "returned_score", "best_score", "accepted", "queried",
)
CELL_COLUMNS = (
    "identity", "defense", "seed", "m", "n_beta", "queries", "initial_genome", "final_genome",
    "initial_similarity", "final_similarity", "final_confidence", "identification_rank", "fdsf_flag_rate",
)
RANK_COLUMNS = ("kind", "label", "fds", "rank", "flagged")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def emit_csv(report: RunReport, path) -> None:
    """One row per trace record of every cell."""
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(REPORT_COLUMNS)
        for c in report.cells:
            for r in c.trace.records:
                w.writerow([c.identity, c.defense, c.seed, r.iteration, str(r.genome),
                            _fmt(r.score), _fmt(r.best_score), int(r.accepted), int(r.queried)])


def emit_cells_csv(report: RunReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(CELL_COLUMNS)
        for c in report.cells:
            w.writerow([_fmt(getattr(c, col)) if col not in ("initial_genome", "final_genome")
                        else str(getattr(c, col)) for col in CELL_COLUMNS])


def emit_ranks_csv(table: RankingTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(RANK_COLUMNS)
        for r in table.rows:
            w.writerow([r.kind, r.label, _fmt(r.fds), r.rank, int(r.flagged)])


def _json_float(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return None
    return x


def summary_dict(report: RunReport, ranks: Optional[RankingTable] = None) -> dict:
    out = {
        "targets": [
            {"identity": t.identity, "m": t.m, "n_beta": t.stop.n_beta, "optimum": _json_float(t.optimum)}
            for t in report.targets
        ],
        "defenses": [{k: _json_float(v) for k, v in a.__dict__.items()} for a in report.aggregates],
        "cells": len(report.cells),
        "all_monotone": all(c.trace.is_monotone() for c in report.cells),
    }
    if ranks is not None:
        out["rank_study"] = {
            kind: {
                "n": len(ranks.of_kind(kind)),
                "histogram": ranks.histogram(kind),
                "flagged_fraction": _json_float(ranks.flagged_fraction(kind)),
            }
            for kind in ("composite", "real")
        }
        out["rank_study"]["panel_size"] = ranks.panel_size
        out["rank_study"]["mu"] = ranks.mu
    return out


def emit_summary(report: RunReport, path, ranks: Optional[RankingTable] = None) -> None:
    Path(path).write_text(json.dumps(summary_dict(report, ranks), indent=2, sort_keys=True) + "\n")


# -- SVG ----------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
_PANEL_W, _PANEL_H = 320, 220
_MARGIN = dict(left=48, right=12, top=28, bottom=40)


def _num(x: float) -> str:
    return f"{x:.2f}"


def emit_svg_curves(report: RunReport, path) -> None:
    """Best returned score versus iteration: one panel per defense, one polyline per (target, seed)."""
    defenses = [a.defense for a in report.aggregates]
    x_max = max((c.trace.records[-1].iteration for c in report.cells), default=1) or 1
    seeds = sorted({c.seed for c in report.cells})
    colour = {s: _PALETTE[i % len(_PALETTE)] for i, s in enumerate(seeds)}
    width = len(defenses) * (_PANEL_W + _MARGIN["left"] + _MARGIN["right"])
    height = _PANEL_H + _MARGIN["top"] + _MARGIN["bottom"]

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for p, defense in enumerate(defenses):
        x0 = p * (_PANEL_W + _MARGIN["left"] + _MARGIN["right"]) + _MARGIN["left"]
        y0 = _MARGIN["top"]

        def sx(k):
            return x0 + _PANEL_W * k / x_max

        def sy(v):
            return y0 + _PANEL_H * (1.0 - v)

        out.append(f'<g class="panel" id="panel-{escape(defense)}">')
        out.append(f'<text x="{_num(x0 + _PANEL_W / 2)}" y="{_num(y0 - 10)}" text-anchor="middle" '
                   f'font-weight="bold">{escape(defense)}</text>')
        out.append(f'<rect x="{_num(x0)}" y="{_num(y0)}" width="{_PANEL_W}" height="{_PANEL_H}" '
                   f'fill="none" stroke="#444"/>')
        for v in (0.0, 0.25, 0.5, 0.75, 1.0):
            out.append(f'<line x1="{_num(x0 - 4)}" y1="{_num(sy(v))}" x2="{_num(x0)}" y2="{_num(sy(v))}" stroke="#444"/>')
            out.append(f'<text x="{_num(x0 - 6)}" y="{_num(sy(v) + 4)}" text-anchor="end">{v:.2f}</text>')
        for k in (0, x_max // 2, x_max):
            out.append(f'<text x="{_num(sx(k))}" y="{_num(y0 + _PANEL_H + 14)}" text-anchor="middle">{k}</text>')
        out.append(f'<text x="{_num(x0 + _PANEL_W / 2)}" y="{_num(y0 + _PANEL_H + 32)}" '
                   f'text-anchor="middle">iteration</text>')
        out.append(f'<text x="{_num(x0 - 36)}" y="{_num(y0 + _PANEL_H / 2)}" text-anchor="middle" '
                   f'transform="rotate(-90 {_num(x0 - 36)} {_num(y0 + _PANEL_H / 2)})">best returned score</text>')
        for c in report.cells_for(defense):
            pts = " ".join(f"{_num(sx(r.iteration))},{_num(sy(r.best_score))}" for r in c.trace.records)
            out.append(f'<polyline data-identity="{escape(c.identity)}" data-seed="{c.seed}" fill="none" '
                       f'stroke="{colour[c.seed]}" stroke-opacity="0.6" stroke-width="1" points="{pts}"/>')
        out.append("</g>")
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


# -- everything -----------------------------------------------------------------


def cell_stem(identity: str, defense: str, seed: int) -> str:
    safe = "".join(ch if ch.isalnum() or ch in "-_" else "-" for ch in defense)
    return f"{identity}__{safe}__s{seed}"


def write_outputs(report: RunReport, assets: Assets, out_dir, ranks: Optional[RankingTable] = None) -> Path:
    out = Path(out_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    (out / "recon").mkdir(parents=True, exist_ok=True)
    emit_csv(report, out / "report.csv")
    emit_cells_csv(report, out / "cells.csv")
    emit_svg_curves(report, out / "curves.svg")
    emit_summary(report, out / "summary.json", ranks)
    if ranks is not None:
        emit_ranks_csv(ranks, out / "ranks.csv")
    for c in report.cells:
        stem = cell_stem(c.identity, c.defense, c.seed)
        write_trace_csv(c.trace, out / "traces" / f"{stem}.csv")
        write_trace_summary(c.trace, out / "traces" / f"{stem}.json")
        save_image(out / "recon" / f"{stem}.pgm", assets.composer(c.final_genome))
    return out
