"""Figure-data exports: hourly status ratios, group AUCs, patient timelines, attention summaries."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .params import N_CLASSES
from .tokenizer import hour_of
from .training import one_vs_rest_auc

STATUS_COLUMNS = ("another_time", "before_med", "after_med")


def hourly_status(rows) -> tuple[list[dict], dict]:
    """Per-hour ground-truth and predicted status ratios (24 rows) plus drift statistics.

    Drift is the absolute ratio difference, pooled over statuses and over the
    hours that have at least one record.
    """
    gt = np.zeros((24, N_CLASSES))
    pred = np.zeros((24, N_CLASSES))
    for r in rows:
        h = hour_of(r["query_time"])
        gt[h, int(r["label"])] += 1
        pred[h, int(r["pred"])] += 1
    n = gt.sum(axis=1)
    out, diffs = [], []
    for h in range(24):
        row = {"hour": h, "n": int(n[h])}
        for c, name in enumerate(STATUS_COLUMNS):
            g = gt[h, c] / n[h] if n[h] else 0.0
            p = pred[h, c] / n[h] if n[h] else 0.0
            row[f"gt_{name}"] = g
            row[f"pred_{name}"] = p
            row[f"absdiff_{name}"] = abs(g - p)
            if n[h]:
                diffs.append(abs(g - p))
        out.append(row)
    drift = {"mean": float(np.mean(diffs)) if diffs else 0.0,
             "std": float(np.std(diffs)) if diffs else 0.0}
    return out, drift


def group_auc(rows, key: str) -> list[dict]:
    groups = defaultdict(list)
    for r in rows:
        if r.get(key) is not None:
            groups[r[key]].append(r)
    out = []
    for g in sorted(groups, key=str):
        members = groups[g]
        labels = np.array([int(r["label"]) for r in members])
        probs = np.array([[r["p0"], r["p1"], r["p2"]] for r in members], dtype=float)
        auc, _ = one_vs_rest_auc(labels, probs)
        out.append({"group": g, "n": len(members),
                    "patients": len({r["patient_id"] for r in members}), "auc": auc})
    return out


def patient_timeline(rows) -> list[dict]:
    """Dominant ground-truth and predicted status per patient and hour of day."""
    counts = defaultdict(lambda: np.zeros((2, N_CLASSES)))
    for r in rows:
        c = counts[(r["patient_id"], hour_of(r["query_time"]))]
        c[0, int(r["label"])] += 1
        c[1, int(r["pred"])] += 1
    out = []
    for (pid, h) in sorted(counts):
        c = counts[(pid, h)]
        out.append({"patient_id": pid, "hour": h, "n": int(c[0].sum()),
                    "gt_dominant": STATUS_COLUMNS[int(c[0].argmax())],
                    "pred_dominant": STATUS_COLUMNS[int(c[1].argmax())]})
    return out


# -- attention traces ---------------------------------------------------------

def trace_to_json(trace) -> list[dict]:
    out = []
    for layer in trace:
        heads = []
        for h in range(layer["probs"].shape[0]):
            heads.append({
                "head": h,
                "rows": [
                    {"query_segment": tag["segments"][0], "modality": tag["modality"],
                     "probs": layer["probs"][h, i].tolist()}
                    for i, tag in enumerate(layer["row_tags"])
                ],
            })
        out.append({"layer": layer["layer"], "columns": layer["col_tags"], "heads": heads})
    return out


def history_attention(trace, n_history: int) -> dict:
    """Attention mass that query tokens send to each history record.

    Mass is averaged over query rows, heads and layers, then normalized over
    the history records. Also returns, per history record, the per-column
    attention values (mean over rows/heads/layers) for box plots.
    """
    mass = np.zeros(n_history)
    per_column = defaultdict(list)
    for layer in trace:
        probs = layer["probs"].mean(axis=(0, 1))  # mean over heads and query rows
        for j, tag in enumerate(layer["col_tags"]):
            r = tag["record"]
            if r < n_history:
                mass[r] += probs[j]
                per_column[r].append(float(probs[j]))
    total = mass.sum()
    share = mass / total if total > 0 else mass
    return {"share": share.tolist(),
            "column_values": {r: per_column[r] for r in range(n_history)}}
