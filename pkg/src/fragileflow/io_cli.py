"""Logit-dump ingestion, JSON configs, reports, and the ``fragileflow`` command.

Dump format: one JSON object per line,
``{"id": str, "label": int, "scores": {"clean": [...], "<condition>": [...]}}``.
"""

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import InvalidInputError
from .calibrate_eval import buffer_from_quantile, calibrate_gamma, evaluate_scores
from .core_risk import margins_rows
from .experiment import BoundConfig, PairedConfig, confusion_direction, run_paired
from .pac_bayes import ETA, BoundInputs, combined_bound, pac_bound
from .perturb import PerturbSpec
from .toy_train import SynthTaskSpec, TrainConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "fragileflow.report/1"
TASKS = ("analyze", "calibrate", "train", "bound", "report")


class DumpFormatError(InvalidInputError):
    """A logit dump line is malformed or inconsistent."""


# ---------------------------------------------------------------------------
# logit dumps


@dataclass
class LogitRecord:
    id: str
    label: int
    scores: dict

    def to_dict(self):
        return {"id": self.id, "label": self.label, "scores": self.scores}


def _parse_record(obj, lineno):
    if not isinstance(obj, dict):
        raise DumpFormatError(f"line {lineno}: expected a JSON object")
    missing = [k for k in ("id", "label", "scores") if k not in obj]
    if missing:
        raise DumpFormatError(f"line {lineno}: missing field(s) {', '.join(missing)}")
    rid = str(obj["id"])
    scores = obj["scores"]
    if not isinstance(scores, dict):
        raise DumpFormatError(f"line {lineno}: 'scores' must map condition labels to lists")
    if "clean" not in scores:
        raise DumpFormatError(f"line {lineno}: record {rid!r} has no 'clean' scores")
    label = obj["label"]
    if isinstance(label, bool) or not isinstance(label, int):
        raise DumpFormatError(f"line {lineno}: record {rid!r} label must be an integer")
    parsed = {}
    for cond, vec in scores.items():
        if not isinstance(vec, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in vec
        ):
            raise DumpFormatError(f"line {lineno}: scores[{cond!r}] must be a list of numbers")
        if not all(math.isfinite(v) for v in vec):
            raise DumpFormatError(f"line {lineno}: scores[{cond!r}] has non-finite values")
        parsed[cond] = [float(v) for v in vec]
    return LogitRecord(rid, label, parsed)


def load_dump(path):
    """Parse and validate a JSONL logit dump.

    K is taken from the first record and enforced on every later one.
    Blank lines are skipped.
    """
    records = []
    K = None
    k_line = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DumpFormatError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            rec = _parse_record(obj, lineno)
            sizes = {len(v) for v in rec.scores.values()}
            if len(sizes) != 1:
                raise DumpFormatError(
                    f"line {lineno}: record {rec.id!r} mixes score lengths {sorted(sizes)}"
                )
            k = sizes.pop()
            if K is None:
                if k < 2:
                    raise DumpFormatError(f"line {lineno}: need K >= 2, got {k}")
                K, k_line = k, lineno
            elif k != K:
                raise DumpFormatError(
                    f"line {lineno}: record {rec.id!r} has K={k}, but K={K} was set by line {k_line}"
                )
            if not 0 <= rec.label < K:
                raise DumpFormatError(f"line {lineno}: label {rec.label} outside [0, {K})")
            records.append(rec)
    return records


def write_dump(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), separators=(",", ":")) + "\n")


def split_key(record_id):
    return hashlib.sha256(str(record_id).encode("utf-8")).hexdigest()


def split_records(records):
    """Stable-hash halves: (calibration, evaluation), each in hash order."""
    keyed = sorted(records, key=lambda r: (split_key(r.id), r.id))
    calib = [r for r in keyed if int(split_key(r.id)[-1], 16) % 2 == 0]
    evals = [r for r in keyed if int(split_key(r.id)[-1], 16) % 2 == 1]
    return calib, evals


def _scores(records, condition):
    missing = [r.id for r in records if condition not in r.scores]
    if missing:
        raise InvalidInputError(
            f"condition {condition!r} missing from record(s): {', '.join(missing[:5])}"
            + (" ..." if len(missing) > 5 else "")
        )
    return np.array([r.scores[condition] for r in records]), np.array([r.label for r in records], dtype=np.int64)


def _calibrate_on(records, condition, q):
    S, y = _scores(records, condition)
    delta, _, _ = margins_rows(S, y)
    return calibrate_gamma(delta, q)


def analyze_dump(records, condition, q, kappa=None):
    """Calibrate gamma on one hash half and evaluate on the other.

    Returns ``(report, flow_matrix, info)`` where ``info`` records split sizes
    and the raw quantile.
    """
    if not records:
        raise InvalidInputError("logit dump is empty")
    _scores(records, condition)
    calib, evals = split_records(records)
    if not calib or not evals:
        raise InvalidInputError("both hash halves must be non-empty; dump is too small")
    gamma_q = _calibrate_on(calib, condition, q)
    gp = buffer_from_quantile(gamma_q, kappa)
    C, y = _scores(evals, "clean")
    P, _ = _scores(evals, condition)
    report, fm = evaluate_scores(C, P, y, gp, condition)
    info = {"gamma_quantile": gamma_q, "n_calibration": len(calib), "n_evaluation": len(evals)}
    return report, fm, info


# ---------------------------------------------------------------------------
# serialization


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def dumps_json(obj):
    """Deterministic JSON: sorted keys, shortest round-trip floats, NaN as null."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_json(obj))


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def model_checksum(model):
    return hashlib.sha256(np.ascontiguousarray(model.weights, dtype="<f8").tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# run configs


def paired_config_from_dict(d):
    """Build a PairedConfig from the JSON ``train`` config layout."""
    d = dict(d)
    task_d = d.get("task")
    if task_d is None:
        raise InvalidInputError("train config needs a 'task' block")
    if "random" in task_d:
        task = SynthTaskSpec.random(**task_d["random"])
    else:
        task = SynthTaskSpec.from_dict(task_d)

    def perturb_from(p):
        p = dict(p)
        if p.get("direction") == "confusion":
            p["direction"] = confusion_direction(task)
        return PerturbSpec.from_dict(p)

    train_d = dict(d.get("train", {}))
    if "perturb" in train_d:
        train_d["perturb"] = perturb_from(train_d["perturb"])
    train_cfg = TrainConfig.from_dict(train_d)
    eval_perturb = perturb_from(d["eval_perturb"]) if "eval_perturb" in d else train_cfg.perturb
    return PairedConfig(
        task=task,
        train=train_cfg,
        eval_perturb=eval_perturb,
        model_kind=d.get("model_kind", "linear"),
        hidden=d.get("hidden", 0),
        init_scale=d.get("init_scale", 0.01),
        q=d.get("q", 0.25),
        kappa=d.get("kappa"),
        bound=BoundConfig(**d.get("bound", {})),
    )


def paired_config_to_dict(cfg):
    return {
        "task": cfg.task.to_dict(),
        "train": cfg.train.to_dict(),
        "eval_perturb": cfg.eval_perturb.to_dict(),
        "model_kind": cfg.model_kind,
        "hidden": cfg.hidden,
        "init_scale": cfg.init_scale,
        "q": cfg.q,
        "kappa": cfg.kappa,
        "bound": dict(cfg.bound.__dict__),
    }


@dataclass
class RunConfig:
    task: str
    body: dict
    output_path: str = None
    seeds: list = None

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        task = d.pop("task_kind", d.pop("command", "train"))
        if task not in TASKS:
            raise InvalidInputError(f"unknown task {task!r}; expected one of {TASKS}")
        seeds = d.pop("seeds", [0])
        if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
            raise InvalidInputError("'seeds' must be a list of integers")
        output_path = d.pop("output_path", None)
        if task == "train" and "task" not in d:
            raise InvalidInputError("train config needs a 'task' block")
        return cls(task, d, output_path, seeds)


# ---------------------------------------------------------------------------
# commands


def _report_document(command, config, report, extra, seeds=(), delta=None):
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": config,
        "gamma": report.gamma_used,
        "kappa": report.kappa_used,
        "delta": delta,
        "seeds": list(seeds),
        "perturbation_labels": [report.perturbation_label],
        "report": report.to_dict(),
        **extra,
    }


def cmd_analyze(args):
    records = load_dump(args.input)
    report, fm, info = analyze_dump(records, args.condition, args.q, args.kappa)
    config = {
        "input": Path(args.input).name,
        "input_sha256": file_digest(args.input),
        "condition": args.condition,
        "q": args.q,
        "kappa_rule": "fixed" if args.kappa is not None else "max(gamma/4, 1e-3)",
    }
    doc = _report_document("analyze", config, report, {**info, "flow_matrix": fm.to_dict()})
    write_json(doc, args.out)
    return 0


def cmd_calibrate(args):
    records = load_dump(args.input)
    q_list = [float(q) for q in args.q_list.split(",") if q.strip()]
    if not q_list:
        raise InvalidInputError("--q-list is empty")
    rows = []
    for q in q_list:
        report, fm, info = analyze_dump(records, args.condition, q, args.kappa)
        rows.append({"q": q, **info, "report": report.to_dict(), "flow_matrix": fm.to_dict()})
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": "calibrate",
        "config": {
            "input": Path(args.input).name,
            "input_sha256": file_digest(args.input),
            "condition": args.condition,
            "q_list": q_list,
            "kappa_rule": "fixed" if args.kappa is not None else "max(gamma/4, 1e-3)",
        },
        "delta": None,
        "seeds": [],
        "perturbation_labels": [args.condition],
        "rows": rows,
    }
    write_json(doc, args.out)
    return 0


def _write_trace(trace, path):
    fields = ["step", "loss", "ce", "r_spec", "r_stab", "sigma_est", "margin_ties"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in trace:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in fields})


def cmd_train(args):
    with open(args.config, encoding="utf-8") as fh:
        raw = json.load(fh)
    run = RunConfig.from_dict(raw)
    cfg = paired_config_from_dict(run.body)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_doc = paired_config_to_dict(cfg)
    summary = {"schema_version": SCHEMA_VERSION, "command": "train", "config": config_doc,
               "seeds": run.seeds, "runs": []}
    for seed in run.seeds:
        result = run_paired(cfg, seed)
        for name, entry in result["runs"].items():
            stem = f"{name}_seed{seed}"
            _write_trace(entry["trace"], out_dir / f"trace_{stem}.csv")
            checksum = model_checksum(entry["model"])
            doc = _report_document(
                "train", config_doc, entry["report"],
                {
                    "run": name,
                    "gamma_quantile": result["gamma_q"],
                    "bound": entry["bound"],
                    "model": entry["model"].to_dict(),
                    "model_sha256": checksum,
                },
                seeds=[seed], delta=cfg.bound.delta,
            )
            write_json(doc, out_dir / f"report_{stem}.json")
            summary["runs"].append({"run": name, "seed": seed, "model_sha256": checksum,
                                    "report": f"report_{stem}.json"})
    write_json(summary, out_dir / "summary.json")
    return 0


def cmd_bound(args):
    b = BoundInputs(args.vsr, args.k, args.m_min, args.kl, args.delta)
    pb = pac_bound(b)
    out = {
        "schema_version": SCHEMA_VERSION,
        "command": "bound",
        "inputs": {"vsr": args.vsr, "K": args.k, "m_min": args.m_min, "kl": args.kl, "delta": args.delta},
        "term_spec": pb.term_spec,
        "term_complexity": pb.term_complexity,
        "total": pb.total,
    }
    if args.gamma is not None:
        eta = ETA if args.eta is None else args.eta
        rho = 0.0 if args.rho is None else args.rho
        out["combined"] = combined_bound(b, args.gamma, eta, rho)
        out["inputs"].update({"gamma": args.gamma, "eta": eta, "rho": rho})
    text = dumps_json(out)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


REPORT_FIELDS = [
    "file", "command", "run", "seed", "condition", "gamma", "kappa", "delta",
    "clean_acc", "ptb_acc", "clean_wc_acc", "ptb_wc_acc", "vwr_hat", "vsr_hat",
]


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def cmd_report(args):
    in_dir = Path(args.in_dir)
    if not in_dir.is_dir():
        raise FileNotFoundError(f"report directory {in_dir} does not exist")
    rows = []
    for path in sorted(in_dir.glob("*.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("schema_version") != SCHEMA_VERSION:
            continue
        reports = []
        if "report" in doc:
            reports.append((doc.get("gamma"), doc.get("kappa"), doc["report"]))
        for row in doc.get("rows", []):
            rep = row["report"]
            reports.append((rep["gamma_used"], rep["kappa_used"], rep))
        seeds = doc.get("seeds") or [None]
        for gamma, kappa, rep in reports:
            rows.append({
                "file": path.name,
                "command": doc.get("command"),
                "run": doc.get("run", ""),
                "seed": seeds[0],
                "condition": rep["perturbation_label"],
                "gamma": gamma,
                "kappa": kappa,
                "delta": doc.get("delta"),
                **{k: rep[k] for k in REPORT_FIELDS[8:]},
            })
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for row in rows:
            w.writerow([_csv_value(row[k]) for k in REPORT_FIELDS])
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="fragileflow", description="Margin-aware error-flow risk tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="calibrate gamma and report risks for a logit dump")
    a.add_argument("--input", required=True)
    a.add_argument("--condition", required=True)
    a.add_argument("--q", type=float, default=0.25)
    a.add_argument("--kappa", type=float)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("calibrate", help="sweep the calibration quantile on a logit dump")
    c.add_argument("--input", required=True)
    c.add_argument("--condition", required=True)
    c.add_argument("--q-list", default="0.10,0.25,0.50")
    c.add_argument("--kappa", type=float)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    t = sub.add_parser("train", help="paired base / plug-in runs on a synthetic task")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bound", help="evaluate the PAC-Bayes and combined bounds")
    b.add_argument("--vsr", type=float, required=True)
    b.add_argument("--k", type=int, required=True)
    b.add_argument("--m-min", type=int, required=True)
    b.add_argument("--kl", type=float, required=True)
    b.add_argument("--delta", type=float, required=True)
    b.add_argument("--gamma", type=float)
    b.add_argument("--eta", type=float)
    b.add_argument("--rho", type=float)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bound)

    r = sub.add_parser("report", help="flatten JSON reports into one CSV")
    r.add_argument("--in", dest="in_dir", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def cli_main(argv=None):
    """Entry point; returns 0 on success, 1 on validation errors, 2 on I/O errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidInputError, ValueError, KeyError, TypeError) as exc:
        print(f"fragileflow: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"fragileflow: I/O error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_main())
