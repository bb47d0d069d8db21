"""Report artifacts: key-checked JSON, score and ROC CSVs, SVG histogram, summary table."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

DETECTION_KEYS = frozenset({"tpr", "fpr", "auc", "tau", "alpha_train", "alpha_test", "n_pos", "n_neg", "scores_path"})
DOWNSTREAM_KEYS = frozenset({"ca", "asr", "filtered_train", "filtered_test", "attack_kind", "defense"})
META_KEYS = frozenset({"seed", "config"})


class ReportSchemaError(ValueError):
    pass


def validate_keys(payload: dict, required: frozenset) -> None:
    keys = set(payload)
    missing = required - keys
    extra = keys - required - META_KEYS
    if missing or extra:
        raise ReportSchemaError(f"report keys: missing {sorted(missing)}, unexpected {sorted(extra)}")
    if not META_KEYS <= keys:
        raise ReportSchemaError("report must embed the master seed and resolved config")


def report_kind(payload: dict) -> str:
    if DETECTION_KEYS <= set(payload):
        return "detection"
    if DOWNSTREAM_KEYS <= set(payload):
        return "downstream"
    raise ReportSchemaError("neither a detection nor a downstream report")


def dumps(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_json(path, payload: dict, required: frozenset) -> None:
    validate_keys(payload, required)
    Path(path).write_text(dumps(payload), encoding="utf-8")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_scores_csv(path, scores: np.ndarray, labels: np.ndarray, tau: float) -> None:
    rows = ["index,triggered,score,flagged"]
    for i, (s, y) in enumerate(zip(scores, labels)):
        rows.append(f"{i},{int(y)},{float(s)!r},{int(s > tau)}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def write_roc_csv(path, fpr: np.ndarray, tpr: np.ndarray, thresholds: np.ndarray) -> None:
    rows = ["threshold,fpr,tpr"]
    for t, f, p in zip(thresholds, fpr, tpr):
        rows.append(f"{float(t)!r},{float(f)!r},{float(p)!r}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def histogram_svg(clean: np.ndarray, triggered: np.ndarray, tau: float, bins: int = 40,
                  width: int = 640, height: int = 320) -> str:
    """Overlaid clean vs triggered score histograms with the threshold marked."""
    allv = np.concatenate([clean, triggered]).astype(np.float64)
    lo, hi = (float(allv.min()), float(allv.max())) if allv.size else (0.0, 1.0)
    if math.isfinite(tau):
        lo, hi = min(lo, tau), max(hi, tau)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    hc, _ = np.histogram(clean, edges)
    ht, _ = np.histogram(triggered, edges)
    top = max(int(hc.max(initial=0)), int(ht.max(initial=0)), 1)
    m = 40
    pw, ph = width - 2 * m, height - 2 * m
    bw = pw / bins

    def x_of(v: float) -> float:
        return m + (v - lo) / (hi - lo) * pw

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{m}" y1="{m + ph}" x2="{m + pw}" y2="{m + ph}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{m + ph}" stroke="black"/>',
    ]
    for counts, color in ((hc, "#1f77b4"), (ht, "#d62728")):
        for i, c in enumerate(counts):
            if c:
                h = c / top * ph
                parts.append(f'<rect x="{m + i * bw:.2f}" y="{m + ph - h:.2f}" width="{bw:.2f}" height="{h:.2f}" '
                             f'fill="{color}" fill-opacity="0.5"/>')
    if math.isfinite(tau):
        xt = x_of(tau)
        parts.append(f'<line x1="{xt:.2f}" y1="{m}" x2="{xt:.2f}" y2="{m + ph}" stroke="black" stroke-dasharray="4 3"/>')
        parts.append(f'<text x="{xt + 4:.2f}" y="{m + 12}" font-size="11">tau={tau:.4g}</text>')
    parts += [
        f'<text x="{m}" y="{height - 10}" font-size="11">{lo:.4g}</text>',
        f'<text x="{m + pw}" y="{height - 10}" font-size="11" text-anchor="end">{hi:.4g}</text>',
        f'<text x="{width / 2:.0f}" y="{height - 10}" font-size="12" text-anchor="middle">reconstruction error</text>',
        f'<rect x="{m + pw - 130}" y="{m}" width="10" height="10" fill="#1f77b4" fill-opacity="0.5"/>',
        f'<text x="{m + pw - 115}" y="{m + 9}" font-size="11">clean (n={len(clean)})</text>',
        f'<rect x="{m + pw - 130}" y="{m + 16}" width="10" height="10" fill="#d62728" fill-opacity="0.5"/>',
        f'<text x="{m + pw - 115}" y="{m + 25}" font-size="11">triggered (n={len(triggered)})</text>',
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


def scenario_name(config: dict) -> str:
    kind = config["attack"]["kind"]
    name = "no attack" if kind == "none" else kind
    if config["dede"]["train_data"] == "ood":
        name += " (DeDe OOD)"
    return name


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.1f}"


def summary_table(runs: list[dict]) -> str:
    """Plain-text table: one row per run with TPR/FPR/AUC and CA/ASR with and without DeDe.

    Each run is ``{"detection": {...} | None, "downstream": {defense: {...}}}``.
    """
    header = ("scenario", "seed", "TPR", "FPR", "AUC", "CA no-def", "ASR no-def", "CA DeDe", "ASR DeDe")
    rows = []
    for run in runs:
        det = run.get("detection")
        down = run.get("downstream", {})
        meta = det or next(iter(down.values()), None)
        if meta is None:
            continue
        nd, dd = down.get("none"), down.get("dede")
        rows.append((
            scenario_name(meta["config"]), str(meta["seed"]),
            _fmt(det["tpr"]) if det else "-", _fmt(det["fpr"]) if det else "-",
            f"{det['auc']:.3f}" if det else "-",
            _fmt(nd["ca"]) if nd else "-", _fmt(nd["asr"]) if nd else "-",
            _fmt(dd["ca"]) if dd else "-", _fmt(dd["asr"]) if dd else "-",
        ))
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    line = lambda cells: "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"
    out = [line(header), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"
