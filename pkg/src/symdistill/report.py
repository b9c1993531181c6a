"""Markdown + SVG report built from the artifacts of a run directory (read-only)."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path

DB_STATS = "db_stats.json"
DISTILL = "distill.json"
METRICS = "metrics.json"
EVAL = "eval.json"
TRAJ = "eval_trajectories.csv"
SECTION_FILES = (DB_STATS, DISTILL, METRICS, EVAL, TRAJ)

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


class ReportError(RuntimeError):
    pass


def _fmt(v, digits=4):
    if v is None:
        return "n/a"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.{digits}g}"
    return str(v)


def _table(header, rows) -> list:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(_fmt(c) for c in r) + " |" for r in rows]
    return out


def _db_section(stats) -> list:
    lines = ["## Trajectory database", ""]
    rows = [("records", stats["records"]), ("tasks", stats["tasks"]), ("horizon", stats["horizon"]),
            ("streams", ", ".join(stats["streams"])), ("output scale", stats["out_scale"]),
            ("fingerprint", stats["fingerprint"][:16])]
    rows += [(f"scale[{s}]", v) for s, v in stats["scales"].items()]
    return lines + _table(("field", "value"), rows) + [""]


def _front_section(dist) -> list:
    sel = dist["selected"]
    lines = ["## Pareto front", "",
             f"Selected (complexity {sel['complexity']}, R2 {_fmt(sel['r2'])}, threshold {dist['delta_r2']}):", "",
             f"    {sel['expr_infix']}", ""]
    rows = [(r["complexity"], r["r2"], r["mse"], r.get("original_infix") or r["expr_infix"]) for r in dist["front"]]
    return lines + _table(("complexity", "val R2", "val MSE", "equation (original units)"), rows) + [""]


def _metrics_section(m) -> list:
    lines = ["## Interpretability", ""]
    rows = [(s, v) for s, v in sorted(m["tpf"].items())]
    lines += _table(("stream", "TPF"), rows)
    lines += ["", f"MC = {m['mc']}", ""]
    if m.get("reference"):
        ref = m["reference"]
        lines += [f"Closed-form reference ({ref['kind']}): TPF {_fmt(ref['tpf'])}, MC {_fmt(ref['mc'])}", ""]
    lines += [f"- {n}" for n in m.get("notes", [])] + [""]
    return lines


def _tuning_section(ev) -> list:
    tune = ev.get("tune_task")
    if not tune:
        return []
    rows = [(k, tune[k]["mean"], tune[k]["std"], tune[k]["n_diverged"]) for k in ("before", "after") if k in tune]
    return ["## Before and after tuning", ""] + _table(("skeleton", "mean final loss", "std", "diverged"), rows) + [""]


def _eval_table(ev) -> list:
    rows = [(r["optimizer"], r["mean"], r["std"], r["n_diverged"]) for r in ev.get("eval_task", {}).values()]
    return _table(("optimizer", "mean final loss", "std", "diverged"), rows)


def read_trajectories(path) -> dict:
    """{(group, optimizer): mean loss per step over seeds}, NaN-skipping."""
    acc = defaultdict(lambda: defaultdict(list))
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            v = float(row["loss"])
            if math.isfinite(v):
                acc[(row["group"], row["optimizer"])][int(row["step"])].append(v)
    return {k: [sum(d[s]) / len(d[s]) for s in sorted(d)] for k, d in acc.items()}


def svg_lines(series: dict, title: str, width: int = 640, height: int = 400, log_y: bool = True) -> str:
    """Line plot of ``{label: values}``; log-scaled y when every value is positive."""
    vals = [v for ys in series.values() for v in ys]
    log_y = log_y and vals and min(vals) > 0
    tf = (lambda v: math.log10(v)) if log_y else (lambda v: v)
    lo = min((tf(v) for v in vals), default=0.0)
    hi = max((tf(v) for v in vals), default=1.0)
    if hi - lo < 1e-12:
        hi = lo + 1.0
    n = max((len(ys) for ys in series.values()), default=2)
    ml, mr, mt, mb = 60, 170, 30, 40
    pw, ph = width - ml - mr, height - mt - mb

    def px(i):
        return ml + pw * i / max(n - 1, 1)

    def py(v):
        return mt + ph * (1 - (tf(v) - lo) / (hi - lo))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{ml}" y="18" font-size="13">{title}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for k in range(5):
        y = lo + (hi - lo) * k / 4
        label = f"{10 ** y:.3g}" if log_y else f"{y:.3g}"
        yy = mt + ph * (1 - k / 4)
        out.append(f'<line x1="{ml}" y1="{yy:.1f}" x2="{ml + pw}" y2="{yy:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{ml - 5}" y="{yy + 4:.1f}" text-anchor="end">{label}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle">step</text>')
    for j, (label, ys) in enumerate(series.items()):
        color = PALETTE[j % len(PALETTE)]
        pts = " ".join(f"{px(i):.1f},{py(v):.1f}" for i, v in enumerate(ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = mt + 14 * j + 8
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 35}" y="{ly + 4}">{_escape(label[:22])}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def build_report(run_dir) -> tuple:
    """Return (markdown, {svg filename: content}); raises ReportError if nothing is present."""
    run = Path(run_dir)
    present = {name: (run / name).exists() for name in SECTION_FILES}
    raw_db = run / "db.jsonl"
    if not any(present.values()) and not raw_db.exists():
        raise ReportError("no artifacts found in " + str(run) + "; missing: " + ", ".join(SECTION_FILES))

    def load(name):
        with open(run / name) as fh:
            return json.load(fh)

    md = ["# Run report", ""]
    svgs = {}
    if present[DB_STATS]:
        md += _db_section(load(DB_STATS))
    elif raw_db.exists():
        from .distill import TrajectoryDB
        md += _db_section(TrajectoryDB.from_jsonl(raw_db).stats())
        present[DB_STATS] = True
    if present[DISTILL]:
        md += _front_section(load(DISTILL))
    if present[METRICS]:
        md += _metrics_section(load(METRICS))
    if present[EVAL]:
        ev = load(EVAL)
        md += _tuning_section(ev)
        md += ["## Evaluation", ""] + _eval_table(ev) + [""]
    if present[TRAJ]:
        curves = read_trajectories(run / TRAJ)
        for group in sorted({g for g, _ in curves}):
            name = f"loss_{group}.svg"
            svgs[name] = svg_lines({o: ys for (g, o), ys in sorted(curves.items()) if g == group},
                                   f"mean loss per step ({group})")
        md += ["## Loss trajectories", ""] + [f"![{n}]({n})" for n in sorted(svgs)] + [""]
    missing = [n for n, ok in present.items() if not ok]
    if missing:
        md += ["Missing artifacts: " + ", ".join(missing), ""]
    return "\n".join(md), svgs


def write_report(run_dir) -> Path:
    md, svgs = build_report(run_dir)
    run = Path(run_dir)
    for name, content in svgs.items():
        (run / name).write_text(content)
    path = run / "report.md"
    path.write_text(md)
    return path
