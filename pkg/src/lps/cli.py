"""Experiment runner: ``lps run | report | verify``."""
import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .netcore import NetworkSpec
from .partition import verify_invariants
from .tasks import (LabeledData, load_csv, load_mnist, make_blob_tasks, make_permuted_tasks,
                    make_split_tasks, subsample)
from .trainer import Engine, PhasePlan, run_sequence

log = logging.getLogger("lps")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    suite: str = "blobs"
    task_count: int = 3
    seed: int = 0
    # permuted / split data
    data_dir: str = None
    data_csv_train: str = None
    data_csv_test: str = None
    train_cap: int = None
    test_cap: int = None
    classes_per_task: int = 2
    shuffle_classes: bool = False
    # synthetic blobs
    blob_input_dim: int = 32
    blob_class_count: int = 4
    blob_train_samples: int = 2000
    blob_test_samples: int = 500
    blob_similarity: float = 1.0
    blob_separation: float = 6.0
    # network
    hidden_dims: list = field(default_factory=lambda: [2000, 2000])
    # protocol
    pruning_kind: str = "irregular"
    alpha_pct: float = 10.0
    beta_pct: float = 90.0
    warmup_epochs: int = 30
    admm_epochs: int = 90
    final_epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 128
    rho_initial: float = 1e-3
    rho_factor: float = 10.0
    rho_intervals: int = 3
    prune_last_task: bool = True
    # output
    output_dir: str = "runs/default"
    sweep_beta: list = None
    sweep_capacity: list = None

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as f:
            raw = json.load(f)
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)

    def validate(self):
        if self.suite not in ("blobs", "permuted", "split"):
            raise ConfigError(f"suite must be blobs, permuted or split, got {self.suite!r}")
        if self.task_count < 1:
            raise ConfigError("task_count must be >= 1")
        pcts = [self.alpha_pct, self.beta_pct, *(self.sweep_beta or []), *(self.sweep_capacity or [])]
        if any(not 0 <= p <= 100 for p in pcts):
            raise ConfigError("percentages must lie in [0, 100]")
        if self.sweep_beta and self.sweep_capacity:
            raise ConfigError("choose one of sweep_beta and sweep_capacity")
        if self.suite != "blobs" and not (self.data_dir or self.data_csv_train):
            raise ConfigError(f"suite {self.suite!r} needs data_dir or data_csv_train")
        self.plan()

    def digest(self):
        body = {k: v for k, v in dataclasses.asdict(self).items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    def plan(self):
        try:
            return PhasePlan(
                self.warmup_epochs, self.admm_epochs, self.final_epochs, self.pruning_kind,
                self.alpha_pct / 100.0, self.beta_pct / 100.0, self.learning_rate, self.batch_size,
                self.rho_initial, self.rho_factor, self.rho_intervals, self.prune_last_task,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _labeled_source(cfg):
    if cfg.data_dir:
        data = load_mnist(cfg.data_dir)
    else:
        x_tr, y_tr = load_csv(cfg.data_csv_train)
        if not cfg.data_csv_test:
            raise ConfigError("data_csv_test is required with data_csv_train")
        x_te, y_te = load_csv(cfg.data_csv_test)
        data = LabeledData(x_tr, y_tr, x_te, y_te)
    return subsample(data, cfg.train_cap, cfg.test_cap, cfg.seed)


def build_tasks(cfg):
    """Task datasets and the matching network spec."""
    if cfg.suite == "blobs":
        tasks = make_blob_tasks(cfg.task_count, cfg.blob_input_dim, cfg.blob_class_count,
                                cfg.blob_train_samples, cfg.seed, cfg.blob_similarity,
                                cfg.blob_separation, cfg.blob_test_samples)
        classes = cfg.blob_class_count
    elif cfg.suite == "permuted":
        base = _labeled_source(cfg)
        tasks = make_permuted_tasks(base, cfg.task_count, cfg.seed)
        classes = base.class_count
    else:
        tasks = make_split_tasks(_labeled_source(cfg), cfg.classes_per_task, cfg.task_count,
                                 cfg.seed, cfg.shuffle_classes)
        classes = cfg.classes_per_task
    spec = NetworkSpec((tasks[0].input_dim, *cfg.hidden_dims, classes))
    return tasks, spec


# -- artifacts ----------------------------------------------------------------


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_accuracy_csv(path, matrix):
    n = matrix.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["after_task", *[f"task{i + 1}" for i in range(n)], "avg"])
        for k, row in enumerate(matrix):
            done = row[: k + 1]
            w.writerow([k + 1, *[_fmt(v) for v in row], _fmt(float(np.mean(done)))])


def read_accuracy_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    n = len(header) - 2
    matrix = np.full((len(body), n), np.nan)
    for k, row in enumerate(body):
        for i, cell in enumerate(row[1:1 + n]):
            if cell:
                matrix[k, i] = float(cell)
    return matrix


class _Sinks:
    def __init__(self, out_dir, append=False):
        mode = "a" if append else "w"
        self.metrics = open(os.path.join(out_dir, "metrics.jsonl"), mode)
        new_res = not (append and os.path.exists(os.path.join(out_dir, "residuals.csv")))
        self.residual_file = open(os.path.join(out_dir, "residuals.csv"), mode, newline="")
        self.residuals = csv.writer(self.residual_file, lineterminator="\n")
        if new_res:
            self.residuals.writerow(["task", "iteration", "layer", "rho", "w_residual", "m_residual",
                                     "w_norm"])

    def metric(self, record):
        self.metrics.write(json.dumps(record, sort_keys=True) + "\n")

    def residual(self, rec):
        self.residuals.writerow([rec.task_id, rec.iteration, rec.layer, repr(rec.rho),
                                 repr(rec.w_residual), repr(rec.m_residual), repr(rec.w_norm)])

    def flush(self):
        self.metrics.flush()
        self.residual_file.flush()

    def close(self):
        self.metrics.close()
        self.residual_file.close()


def run_single(cfg, out_dir, resume=None, tasks=None, spec=None):
    """One sequential run; returns the :class:`SequenceResult`."""
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    if tasks is None:
        tasks, spec = build_tasks(cfg)
    plan = cfg.plan()
    prior = None
    if resume:
        engine, header = load_checkpoint(resume)
        if header["config_hash"] != cfg.digest():
            raise CheckpointError(f"{resume} was written by a different config")
        prior = header["accuracy_rows"]
    else:
        engine = Engine.create(spec, cfg.seed)
    sinks = _Sinks(out_dir, append=bool(resume))

    def on_task_done(eng, rows):
        t = eng.ledger.task_count
        save_checkpoint(os.path.join(out_dir, "checkpoints", f"task{t}.lps"), eng, rows.tolist(),
                        cfg.digest())
        full = np.full((len(tasks), len(tasks)), np.nan)
        full[: len(rows)] = rows
        write_accuracy_csv(os.path.join(out_dir, "accuracy.csv"), full[: len(rows)])
        sinks.flush()

    try:
        result = run_sequence(engine, tasks, plan, sink=sinks.metric, residual_sink=sinks.residual,
                              on_task_done=on_task_done, prior_rows=prior)
    finally:
        sinks.close()
    save_checkpoint(os.path.join(out_dir, "checkpoint.lps"), engine, result.matrix.tolist(),
                    cfg.digest())
    write_accuracy_csv(os.path.join(out_dir, "accuracy.csv"), result.matrix)
    return result


def run_experiment(cfg, out_dir=None, resume=None):
    """Run a config (and its sweep, if any); returns ``{label: SequenceResult}``."""
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(dataclasses.asdict(cfg), f, indent=2, sort_keys=True)
    if not (cfg.sweep_beta or cfg.sweep_capacity):
        return {"run": run_single(cfg, out_dir, resume)}
    if resume:
        raise ConfigError("--resume applies to single runs, not sweeps")
    tasks, spec = build_tasks(cfg)
    results = {}
    if cfg.sweep_beta:
        entries = [(f"beta_{v:g}", dataclasses.replace(cfg, beta_pct=v, sweep_beta=None)) for v in cfg.sweep_beta]
    else:
        entries = [(f"capacity_{v:g}",
                    dataclasses.replace(cfg, alpha_pct=v / cfg.task_count, sweep_capacity=None))
                   for v in cfg.sweep_capacity]
    for label, sub in entries:
        log.info("sweep entry %s", label)
        results[label] = run_single(sub, os.path.join(out_dir, label), tasks=tasks, spec=spec)
    write_sweep_csv(os.path.join(out_dir, "sweep.csv"), results)
    return results


def write_sweep_csv(path, results):
    n = max(r.matrix.shape[1] for r in results.values())
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["run", *[f"task{i + 1}" for i in range(n)], "avg"])
        for label, r in results.items():
            w.writerow([label, *[_fmt(v) for v in r.final_accuracies], _fmt(r.average)])


def report(artifacts_dir):
    """Summary table text; also writes ``summary.csv`` next to the artifacts."""
    single = os.path.join(artifacts_dir, "accuracy.csv")
    rows = []
    if os.path.exists(single):
        matrix = read_accuracy_csv(single)
        for k, row in enumerate(matrix):
            rows.append((f"after task {k + 1}", row, float(np.nanmean(row))))
    else:
        if not os.path.isdir(artifacts_dir):
            raise FileNotFoundError(f"missing artifacts directory {artifacts_dir}")
        subdirs = sorted(d for d in os.listdir(artifacts_dir)
                         if os.path.isdir(os.path.join(artifacts_dir, d)) and d != "checkpoints")
        missing = [os.path.join(artifacts_dir, d, "accuracy.csv") for d in subdirs
                   if not os.path.exists(os.path.join(artifacts_dir, d, "accuracy.csv"))]
        if not subdirs or missing:
            raise FileNotFoundError("missing artifacts: " + (", ".join(missing) or single))
        for d in sorted(subdirs, key=_sweep_key):
            final = read_accuracy_csv(os.path.join(artifacts_dir, d, "accuracy.csv"))[-1]
            rows.append((d, final, float(np.mean(final))))
    n = max(len(r[1]) for r in rows)
    header = ["run", *[f"task{i + 1}" for i in range(n)], "Avg"]
    with open(os.path.join(artifacts_dir, "summary.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for label, row, avg in rows:
            w.writerow([label, *[_fmt(v) for v in row], _fmt(avg)])
    width = max(len(r[0]) for r in rows + [("run",)])
    lines = [" ".join([header[0].ljust(width), *[h.rjust(7) for h in header[1:]]])]
    for label, row, avg in rows:
        cells = ["" if np.isnan(v) else f"{100 * v:.2f}" for v in row]
        lines.append(" ".join([label.ljust(width), *[c.rjust(7) for c in cells], f"{100 * avg:.2f}".rjust(7)]))
    return "\n".join(lines)


def _sweep_key(name):
    prefix, _, value = name.rpartition("_")
    try:
        return (prefix, float(value))
    except ValueError:
        return (name, 0.0)


def verify(checkpoint_path):
    """Invariant report for a checkpoint; returns ``(ok, lines)``."""
    engine, _ = load_checkpoint(checkpoint_path)
    checks = verify_invariants(engine.ledger)
    lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name} {c.detail}".rstrip() for c in checks]
    lines.append(f"tasks committed: {engine.ledger.task_count}, capacity used: "
                 f"{100 * engine.ledger.used_fraction():.2f}%")
    return all(c.passed for c in checks), lines


def _pct_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def main(argv=None):
    parser = argparse.ArgumentParser(prog="lps", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="train a task sequence")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--out")
    run_p.add_argument("--sweep-beta", type=_pct_list, help="comma-separated share percentages")
    run_p.add_argument("--sweep-capacity", type=_pct_list, help="comma-separated capacity percentages")
    run_p.add_argument("--resume", help="checkpoint to continue from")
    rep_p = sub.add_parser("report", help="summarise run artifacts")
    rep_p.add_argument("artifacts")
    ver_p = sub.add_parser("verify", help="check ledger invariants in a checkpoint")
    ver_p.add_argument("checkpoint")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    try:
        if args.command == "run":
            cfg = ExperimentConfig.load(args.config)
            overrides = {}
            if args.seed is not None:
                overrides["seed"] = args.seed
            if args.out:
                overrides["output_dir"] = args.out
            if args.sweep_beta:
                overrides["sweep_beta"] = args.sweep_beta
            if args.sweep_capacity:
                overrides["sweep_capacity"] = args.sweep_capacity
            if overrides:
                cfg = ExperimentConfig.from_dict({**dataclasses.asdict(cfg), **overrides})
            results = run_experiment(cfg, resume=args.resume)
            for label, r in results.items():
                print(f"{label}: average accuracy {r.average:.4f} over {r.matrix.shape[1]} tasks")
            return 0
        if args.command == "report":
            print(report(args.artifacts))
            return 0
        ok, lines = verify(args.checkpoint)
        print("\n".join(lines))
        return 0 if ok else 1
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError, FloatingPointError) as exc:
        print(f"lps: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
