"""``medstat`` command line: ingest, synth, split, train, eval, explain, ablate, report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from collections import Counter, defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .encoder import forward
from .params import ModelParams
from .records import (
    MedicationStatus, Modality, RecordError, filter_cohort, parse_records, preprocess,
    serialize_records,
)
from .reports import group_auc, history_attention, hourly_status, patient_timeline, trace_to_json
from .sequencer import FoldAssignment, build_sequences, kfold_split
from .synthcorpus import generate
from .tokenizer import sample_sources
from .training import (
    PatientData, _epoch_sampler, evaluate, prediction_rows, run_ablations, run_kfold, train,
)

logger = logging.getLogger("medstat")

STORE_RECORDS = "records.jsonl"


class CLIError(Exception):
    pass


# -- file helpers -----------------------------------------------------------

def write_atomic(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    write_atomic(path, json.dumps(obj, indent=1, sort_keys=False) + "\n")


def write_csv(path, rows, columns=None) -> None:
    buf = io.StringIO()
    columns = columns or (list(rows[0]) if rows else [])
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})
    write_atomic(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for key in ("label", "pred"):
            r[key] = int(r[key])
        for key in ("query_time", "p0", "p1", "p2"):
            r[key] = float(r[key])
        r["same_label_history"] = int(r["same_label_history"]) if r.get("same_label_history") else None
        r["age_bucket"] = r.get("age_bucket") or None
    return rows


def load_records(path):
    try:
        with open(path) as fh:
            return parse_records(fh)
    except OSError as exc:
        raise CLIError(f"cannot read {path}: {exc.strerror}") from None
    except RecordError as exc:
        raise CLIError(f"{path}: {exc}") from None


def load_cohort(store):
    path = Path(store)
    if path.is_dir():
        path = path / STORE_RECORDS
    return filter_cohort(load_records(path))


def load_folds(path) -> FoldAssignment:
    with open(path) as fh:
        return FoldAssignment.from_json(json.load(fh))


# -- commands ---------------------------------------------------------------

def table_summary(cohort) -> dict:
    """Table-I-style counts for a cohort."""
    records = cohort.all_records()
    statuses = [s.wire_name for s in MedicationStatus]
    by_class = Counter(r.status.wire_name for r in records)
    n = len(records)
    summary = {
        "patients": len(cohort),
        "records": n,
        "records_per_class": {s: by_class.get(s, 0) for s in statuses},
        "class_fraction": {s: (by_class.get(s, 0) / n if n else 0.0) for s in statuses},
        "records_per_modality": {},
        "modality_fraction_per_class": {},
        "records_per_patient": {},
    }
    for m in Modality:
        cnt = Counter(r.status.wire_name for r in records if r.modality is m)
        summary["records_per_modality"][m.value] = {s: cnt.get(s, 0) for s in statuses}
    for s in statuses:
        cnt = Counter(r.modality.value for r in records if r.status.wire_name == s)
        tot = sum(cnt.values())
        summary["modality_fraction_per_class"][s] = {
            m.value: (cnt.get(m.value, 0) / tot if tot else 0.0) for m in Modality}
    per_patient = defaultdict(Counter)
    for r in records:
        per_patient[r.status.wire_name][r.patient_id] += 1
    for s in ["all"] + statuses:
        if s == "all":
            counts = [len(v) for v in cohort.records.values()]
        else:
            counts = list(per_patient[s].values())
        summary["records_per_patient"][s] = {
            "mean": float(np.mean(counts)) if counts else 0.0,
            "std": float(np.std(counts)) if counts else 0.0,
        }
    return summary


def cmd_ingest(args, run):
    records = load_records(args.input)
    cohort = filter_cohort(records)
    for rec in cohort.all_records():
        x = preprocess(rec, run.preprocess, run.tokenizer.lengths)
        if not np.all(np.isfinite(x)):
            raise CLIError(f"non-finite preprocessed series for patient {rec.patient_id}")
    summary = table_summary(cohort)
    summary["input_records"] = len(records)
    write_atomic(args.out / STORE_RECORDS, serialize_records(cohort.all_records()))
    write_json(args.out / "summary.json", summary)
    print(json.dumps(summary, indent=1))


def cmd_synth(args, run):
    records, manifest = generate(run.synth)
    write_atomic(args.out / "corpus.jsonl", serialize_records(records))
    write_json(args.out / "manifest.json", manifest)
    print(f"wrote {len(records)} records for {run.synth.patients} patients to {args.out}")


def cmd_split(args, run):
    cohort = load_cohort(args.store)
    fa = kfold_split(cohort, run.folds, run.seed)
    write_json(args.out / "folds.json", fa.to_json())
    print(json.dumps({"folds": fa.folds, "patients_per_fold":
                      [len(fa.patients_in(f)) for f in range(fa.folds)]}))


def _split_patients(cohort, args):
    if args.folds is None:
        return cohort.patients, []
    fa = load_folds(args.folds)
    if args.fold is None:
        raise CLIError("--fold is required with --folds")
    test = [p for p in cohort.patients if fa.assignment.get(p) == args.fold]
    train_p = [p for p in cohort.patients if p in fa.assignment and fa.assignment[p] != args.fold]
    return train_p, test


def cmd_train(args, run):
    cohort = load_cohort(args.store)
    model = run.model
    train_p, _ = _split_patients(cohort, args)
    data = PatientData(cohort, model, run.preprocess)
    result = train(_epoch_sampler(data, train_p, model, run.train), model, run.train)
    buf = io.BytesIO()
    np.savez(buf, **result.params.tensors)
    write_atomic(args.out / "params.npz", buf.getvalue())
    write_atomic(args.out / "history.jsonl",
                 "".join(json.dumps(h) + "\n" for h in result.history))
    print(json.dumps(result.history[-1] if result.history else {}))


def _metrics_rows(metrics, label):
    rows = [{"split": label, "group": "", "n": metrics.n, "accuracy": metrics.accuracy,
             "macro_f1": metrics.macro_f1, "auc": metrics.auc}]
    for g, m in metrics.groups.items():
        rows.append({"split": label, "group": g, "n": m.n, "accuracy": m.accuracy,
                     "macro_f1": m.macro_f1, "auc": m.auc})
    return rows


def cmd_eval(args, run):
    cohort = load_cohort(args.store)
    model = run.model
    if args.params is None:
        fa = load_folds(args.folds) if args.folds else None
        res = run_kfold(cohort, model, run.train, run.folds, assignment=fa, group_by=args.group_by)
        rows = []
        for f in res.folds:
            rows.extend(_metrics_rows(f.metrics, f"fold{f.fold}"))
        write_csv(args.out / "metrics.csv", rows)
        write_json(args.out / "metrics.json", {
            "folds": [f.metrics.to_json() for f in res.folds], "summary": res.summary})
        write_csv(args.out / "predictions.csv", res.predictions())
        print(json.dumps(res.summary))
        return
    _, test = _split_patients(cohort, args)
    patients = test or cohort.patients
    params = ModelParams.load(args.params)
    data = PatientData(cohort, model, run.preprocess)
    inputs = data.inputs(patients, model, run.train.K, run.train.eval_policy, "recent")
    if not inputs:
        raise CLIError("no evaluable sequence samples")
    metrics, probs = evaluate(params, inputs, model, run.train.eval_seed, args.group_by)
    write_csv(args.out / "metrics.csv", _metrics_rows(metrics, "eval"))
    write_json(args.out / "metrics.json", metrics.to_json())
    write_csv(args.out / "predictions.csv", prediction_rows(inputs, probs, args.fold))
    print(json.dumps({"n": metrics.n, "accuracy": metrics.accuracy,
                      "macro_f1": metrics.macro_f1, "auc": metrics.auc}))


def cmd_explain(args, run):
    cohort = load_cohort(args.store)
    if args.patient not in cohort.records:
        raise CLIError(f"unknown patient {args.patient!r}")
    model = run.model
    params = ModelParams.load(args.params)
    data = PatientData(cohort, model, run.preprocess)
    seqs = build_sequences({args.patient: data.observations[args.patient]}, K=run.train.K,
                           policy="all-eligible-queries", history="recent")
    if not seqs.samples:
        raise CLIError(f"patient {args.patient!r} has no eligible query")
    sample = seqs.samples[args.query if args.query is not None else -1]
    inp = sample_sources(sample, model.tokenizer, data.series, model.sequence_modeling)
    result = forward(inp, params, model, rng=np.random.default_rng(run.train.eval_seed),
                     capture_trace=True)
    n_hist = len(sample.history) if model.sequence_modeling else 0
    agg = history_attention(result.trace, n_hist)
    probs = np.exp(result.logits - result.logits.max())
    probs /= probs.sum()
    write_json(args.out / "trace.json", {
        "patient_id": sample.patient_id,
        "query_time": sample.query.observation_time,
        "label": int(sample.label),
        "probs": probs.tolist(),
        "history": [{"index": i, "time": o.observation_time, "status": int(o.status)}
                    for i, o in enumerate(sample.history)],
        "layers": trace_to_json(result.trace),
    })
    rows = []
    for i, o in enumerate(sample.history[:n_hist]):
        vals = agg["column_values"][i]
        rows.append({"history_index": i, "status": o.status.wire_name,
                     "same_status_as_query": int(o.status == sample.label),
                     "share": agg["share"][i],
                     "median": float(np.median(vals)) if vals else 0.0,
                     "q1": float(np.percentile(vals, 25)) if vals else 0.0,
                     "q3": float(np.percentile(vals, 75)) if vals else 0.0})
    write_csv(args.out / "history_attention.csv", rows,
              ["history_index", "status", "same_status_as_query", "share", "median", "q1", "q3"])
    print(json.dumps({"label": int(sample.label), "probs": probs.tolist(), "share": agg["share"]}))


def cmd_ablate(args, run):
    cohort = load_cohort(args.store)
    fa = load_folds(args.folds) if args.folds else None
    rows = run_ablations(cohort, run.model, run.train, run.folds, assignment=fa)
    write_csv(args.out / "ablations.csv", rows)
    write_json(args.out / "ablations.json", rows)
    for r in rows:
        print(f"{r['axis']:18s} {r['setting']:12s} auc={r['auc_mean']}")


def cmd_report(args, run):
    if not Path(args.predictions).exists():
        raise CLIError(f"missing predictions file {args.predictions}")
    rows = read_csv(args.predictions)
    hourly, drift = hourly_status(rows)
    write_csv(args.out / "hourly_status.csv", hourly)
    write_csv(args.out / "group_auc_age.csv", group_auc(rows, "age_bucket"),
              ["group", "n", "patients", "auc"])
    write_csv(args.out / "group_auc_same_label.csv", group_auc(rows, "same_label_history"),
              ["group", "n", "patients", "auc"])
    write_csv(args.out / "patient_timeline.csv", patient_timeline(rows),
              ["patient_id", "hour", "n", "gt_dominant", "pred_dominant"])
    write_json(args.out / "report.json", {"drift": drift, "samples": len(rows)})
    print(json.dumps({"drift": drift}))


COMMANDS = {
    "ingest": cmd_ingest, "synth": cmd_synth, "split": cmd_split, "train": cmd_train,
    "eval": cmd_eval, "explain": cmd_explain, "ablate": cmd_ablate, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="medstat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("ingest", parents=[common], help="parse, filter and summarize records")
    p.add_argument("--in", dest="input", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    helps = {
        "split": "patient-level k-fold manifest",
        "train": "fit one model (optionally holding out --fold)",
        "eval": "k-fold evaluation, or score saved params",
        "explain": "attention trace for one patient's query",
        "ablate": "12-row ablation table",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--store", required=True, help="ingest output directory or JSONL file")
        if name in ("train", "eval", "ablate"):
            p.add_argument("--folds", help="fold manifest from `split`")
        if name in ("train", "eval"):
            p.add_argument("--fold", type=int, help="held-out fold index")
        if name in ("eval", "explain"):
            p.add_argument("--params", required=(name == "explain"),
                           help="trained params.npz (eval without it runs k-fold)")
        if name == "eval":
            p.add_argument("--group-by", choices=["age_bucket", "same_label_history"])
        if name == "explain":
            p.add_argument("--patient", required=True)
            p.add_argument("--query", type=int, help="index among the patient's eligible queries")
    p = sub.add_parser("report", parents=[common], help="figure-data CSV exports")
    p.add_argument("--predictions", required=True)
    return parser


def resolve_run(args) -> cfgmod.RunConfig:
    items = cfgmod.load_file(args.config) if args.config else {}
    for kv in args.set:
        if "=" not in kv:
            raise cfgmod.ConfigError(f"--set expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        items[k.strip()] = v.strip()
    if args.seed is not None:
        items["seed"] = str(args.seed)
    if "seed" in items:
        items.setdefault("train.seed", items["seed"])
        items.setdefault("synth.seed", items["seed"])
    return cfgmod.resolve(items)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = resolve_run(args)
        args.out.mkdir(parents=True, exist_ok=True)
        write_atomic(args.out / "config.resolved", run.dumps())
        COMMANDS[args.command](args, run)
    except (CLIError, cfgmod.ConfigError, RecordError, ValueError, OSError) as exc:
        kind = type(exc).__name__
        msg = " ".join(str(exc).split())
        print(f"error: {args.command}: {kind}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
