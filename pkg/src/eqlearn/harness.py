"""Experiment harness: model metrics, multi-seed campaigns, reports, and the CLI.

Campaign records are JSON lines with deterministic bytes (wall times go to a
sidecar file), so identical configurations reproduce identical record files
regardless of seed execution order or worker count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .extract import (ast_complexity, denominator_report, eval_batch, render,
                      simplify, to_expression)
from .netgraph import ArchitectureSpec, Network, activity, forward_batch
from .priors import violation_rmse
from .problems import ProblemBundle, generate, load_bundle, save_bundle
from .trainer import (ModelSnapshot, StageSchedule, TrainResult, TrainSettings,
                      VariantConfig, is_nontrivial, resolve_spec, run)


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending field."""


def as_model_eval(model, bundle: ProblemBundle | None = None, div_guard: float = 1e-4):
    """Normalize a Network / expression AST / callable into an X -> y function."""
    if isinstance(model, Network):
        return lambda X: forward_batch(model, X, div_guard)[0][:, 0]
    if callable(model):
        return model
    if bundle is None:
        raise ValueError("expression evaluation needs the bundle for input names")
    return lambda X: eval_batch(model, X, bundle.input_names, div_guard)


def pooled_rmse(*pairs) -> float:
    residuals = np.concatenate([np.asarray(p, dtype=np.float64) - np.asarray(t, dtype=np.float64)
                                for p, t in pairs])
    return float(np.sqrt(np.mean(residuals * residuals)))


def simulation_rmse(model, sequence: np.ndarray, bundle: ProblemBundle | None = None) -> float:
    """Closed-loop rollout error: only the predicted x-position is fed back."""
    fn = as_model_eval(model, bundle)
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[1] != 6:
        raise ValueError("sequence must have columns x, y, phi, v_f, v_a, x_next")
    x_hat = seq[0, 0]
    sq = 0.0
    for k in range(seq.shape[0]):
        row = seq[k].copy()
        row[0] = x_hat
        pred = float(np.asarray(fn(row[:5].reshape(1, -1)))[0])
        err = pred - seq[k, 5]
        sq += err * err
        x_hat = pred
    return float(np.sqrt(sq / seq.shape[0]))


def evaluate_model(model, bundle: ProblemBundle, div_guard: float = 1e-4) -> dict:
    """Interpolation/extrapolation RMSEs (or simulation RMSEs) plus constraint violations."""
    fn = as_model_eval(model, bundle, div_guard)
    metrics: dict = {}
    if bundle.sequences:
        metrics["rmse_valid"] = simulation_rmse(fn, bundle.sequences["valid"])
        total = 0.0
        for name in ("test1", "test2", "test3"):
            val = simulation_rmse(fn, bundle.sequences[name])
            metrics[f"rmse_{name}"] = val
            total += val
        metrics["rmse_sum"] = total
    else:
        if bundle.interp is None or bundle.ext_test is None:
            raise ValueError("bundle lacks the interpolation/extrapolation test sets")
        pi = fn(bundle.interp.X)
        pe = fn(bundle.ext_test.X)
        metrics["rmse_int"] = pooled_rmse((pi, bundle.interp.y))
        metrics["rmse_ext"] = pooled_rmse((pe, bundle.ext_test.y))
        metrics["rmse_int_ext"] = pooled_rmse((pi, bundle.interp.y), (pe, bundle.ext_test.y))
    metrics["rho_c"] = {c.name: violation_rmse(c, fn) for c in bundle.constraints}
    return metrics


@dataclass(frozen=True)
class RunConfig:
    """Everything one campaign needs; defaults match the reference setup."""

    problem: str
    seeds: tuple[int, ...] = (0,)
    data_seed: int = 1
    problem_params: dict = field(default_factory=dict)
    architecture: str | None = None
    schedule: StageSchedule = StageSchedule()
    variant: str = "ACYE"
    settings: TrainSettings = TrainSettings()
    jobs: int = 1
    out: str | None = None
    keep_logs: bool = True

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        def sub(name, cls_, current):
            raw = doc.get(name)
            if raw is None:
                return current
            if not isinstance(raw, dict):
                raise ConfigError(f"field '{name}' must be an object")
            bad = set(raw) - {f for f in cls_.__dataclass_fields__}
            if bad:
                raise ConfigError(f"field '{name}' has unknown keys {sorted(bad)}")
            try:
                return replace(current, **{k: tuple(v) if k == "ratios" else v
                                           for k, v in raw.items()})
            except (TypeError, ValueError) as err:
                raise ConfigError(f"field '{name}': {err}") from err

        if "problem" not in doc:
            raise ConfigError("field 'problem' is required")
        known = {"problem", "seeds", "data_seed", "problem_params", "architecture",
                 "schedule", "variant", "settings", "jobs", "out", "keep_logs"}
        bad = set(doc) - known
        if bad:
            raise ConfigError(f"unknown config fields {sorted(bad)}")
        try:
            VariantConfig.from_code(doc.get("variant", "ACYE"))
        except ValueError as err:
            raise ConfigError(f"field 'variant': {err}") from err
        seeds = doc.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("field 'seeds' must be a non-empty list of integers")
        return cls(
            problem=doc["problem"], seeds=tuple(seeds),
            data_seed=doc.get("data_seed", 1),
            problem_params=doc.get("problem_params", {}),
            architecture=doc.get("architecture"),
            schedule=sub("schedule", StageSchedule, StageSchedule()),
            variant=doc.get("variant", "ACYE"),
            settings=sub("settings", TrainSettings, TrainSettings()),
            jobs=doc.get("jobs", 1), out=doc.get("out"),
            keep_logs=doc.get("keep_logs", True),
        )

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["seeds"] = list(self.seeds)
        doc["schedule"] = asdict(self.schedule)
        doc["settings"] = asdict(self.settings)
        doc["settings"]["ratios"] = list(self.settings.ratios)
        return doc


def build_record(bundle: ProblemBundle, result: TrainResult, seed: int,
                 settings: TrainSettings) -> dict:
    """Deliverable-model record: extracted expression plus recomputable metrics."""
    model_net = result.model_network(settings.theta_a)
    ast = to_expression(model_net, settings.theta_a)
    links, units = ast_complexity(ast)
    expression = render(simplify(ast, settings.theta_s))
    metrics = evaluate_model(model_net, bundle, settings.theta_s)
    probe = [bundle.train.X, bundle.valid.X] + \
        [c.flat_points for c in bundle.constraints]
    denominators = denominator_report(model_net, np.concatenate(probe),
                                      settings.theta_s)
    record = {
        "seed": seed,
        "expression": expression,
        "links": links,
        "units": units,
        "nontrivial": links > 1,
        "iteration": result.model_star.iteration,
        "valid_rmse_selection": result.model_star.valid_rmse,
        "min_denominator": min(denominators.values()) if denominators else None,
    }
    record.update({k: v for k, v in metrics.items() if k != "rho_c"})
    record["rho_c"] = metrics["rho_c"]
    return record


def snapshot_doc(result: TrainResult, seed: int, variant: str,
                 settings: TrainSettings, record: dict) -> dict:
    return {
        "version": __version__,
        "seed": seed,
        "variant": variant,
        "theta_a": settings.theta_a,
        "theta_s": settings.theta_s,
        "spec": json.loads(result.spec.to_json()),
        "spec_hash": result.spec.spec_hash(),
        "weights": result.model_star.weights.tolist(),
        "record": record,
    }


def _run_one(args) -> tuple[int, dict, dict, list[dict], float]:
    bundle, config = args["bundle"], args["config"]
    variant = VariantConfig.from_code(config.variant)
    t0 = time.perf_counter()
    result = run(bundle, config.schedule, variant, args["seed"],
                 settings=config.settings, architecture=config.architecture)
    wall = time.perf_counter() - t0
    record = build_record(bundle, result, args["seed"], config.settings)
    snap = snapshot_doc(result, args["seed"], config.variant, config.settings, record)
    log = result.log if config.keep_logs else []
    return args["seed"], record, snap, log, wall


@dataclass
class CampaignResult:
    config: RunConfig
    records: list[dict]
    medians: dict
    n_nontrivial: int
    logs: dict[int, list[dict]]
    snapshots: dict[int, dict]
    timings: dict[int, float]
    out_dir: Path | None = None


def aggregate(records: list[dict]) -> tuple[dict, int]:
    """Medians over runs plus the nontrivial-model count."""
    keys = [k for k in ("links", "units", "rmse_int", "rmse_ext", "rmse_int_ext",
                        "rmse_valid", "rmse_test1", "rmse_test2", "rmse_test3",
                        "rmse_sum") if k in records[0]]
    medians = {k: float(np.median([r[k] for r in records])) for k in keys}
    return medians, sum(1 for r in records if r["nontrivial"])


def campaign(config: RunConfig, bundle: ProblemBundle | None = None) -> CampaignResult:
    """Run every seed (optionally in parallel), aggregate, and persist artifacts."""
    if len(config.seeds) < 1:
        raise ConfigError("campaign needs at least one seed")
    if bundle is None:
        bundle = generate(config.problem, config.data_seed, **config.problem_params)
    tasks = [{"bundle": bundle, "config": config, "seed": s} for s in config.seeds]
    outcomes: dict[int, tuple] = {}
    failures: dict[int, str] = {}
    if config.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            for task, fut in [(t, pool.submit(_run_one, t)) for t in tasks]:
                try:
                    seed, record, snap, log, wall = fut.result()
                    outcomes[seed] = (record, snap, log, wall)
                except Exception as err:  # individual run failures are recorded, not fatal
                    failures[task["seed"]] = str(err)
    else:
        for task in tasks:
            try:
                seed, record, snap, log, wall = _run_one(task)
                outcomes[seed] = (record, snap, log, wall)
            except Exception as err:
                failures[task["seed"]] = str(err)
    if not outcomes:
        raise RuntimeError(f"all runs failed: {failures}")
    records = [outcomes[s][0] for s in config.seeds if s in outcomes]
    medians, n_nt = aggregate(records)
    result = CampaignResult(
        config=config, records=records, medians=medians, n_nontrivial=n_nt,
        logs={s: outcomes[s][2] for s in outcomes},
        snapshots={s: outcomes[s][1] for s in outcomes},
        timings={s: outcomes[s][3] for s in outcomes},
    )
    if failures:
        result.medians["failed_seeds"] = sorted(failures)
    if config.out is not None:
        result.out_dir = write_campaign(result, Path(config.out))
    return result


def jsonl_bytes(records: list[dict]) -> bytes:
    return b"".join(json.dumps(r, separators=(",", ":")).encode() + b"\n" for r in records)


def write_campaign(result: CampaignResult, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    (out / "runs.jsonl").write_bytes(jsonl_bytes(result.records))
    summary = {
        "problem": result.config.problem,
        "variant": result.config.variant,
        "architecture": result.config.architecture,
        "seeds": list(result.config.seeds),
        "medians": {k: v for k, v in result.medians.items()},
        "n_nontrivial": result.n_nontrivial,
        "schedule": asdict(result.config.schedule),
    }
    (out / "campaign.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (out / "timings.json").write_text(json.dumps(
        {str(k): v for k, v in sorted(result.timings.items())}, indent=2))
    snaps = out / "snapshots"
    snaps.mkdir(exist_ok=True)
    for seed, doc in result.snapshots.items():
        (snaps / f"seed_{seed}.json").write_text(json.dumps(doc, separators=(",", ":")))
    if result.config.keep_logs:
        logs = out / "logs"
        logs.mkdir(exist_ok=True)
        for seed, log in result.logs.items():
            (logs / f"seed_{seed}.jsonl").write_bytes(jsonl_bytes(log))
    return out


def load_snapshot(path: str | Path) -> tuple[Network, dict]:
    doc = json.loads(Path(path).read_text())
    spec = ArchitectureSpec.from_json(json.dumps(doc["spec"]))
    if spec.spec_hash() != doc["spec_hash"]:
        raise ConfigError("snapshot spec hash mismatch")
    return Network(spec, np.asarray(doc["weights"], dtype=np.float64)), doc


TABLE_COLUMNS = ["problem", "variant", "complexity", "N_nt", "rmse_int", "rmse_ext",
                 "rmse_int_ext", "rmse_valid", "rmse_test1", "rmse_test2",
                 "rmse_test3", "rmse_sum"]


def report_rows(runs_dir: Path) -> list[dict]:
    rows = []
    for campaign_file in sorted(runs_dir.rglob("campaign.json")):
        doc = json.loads(campaign_file.read_text())
        med = doc["medians"]
        row = {"problem": doc["problem"], "variant": doc["variant"],
               "complexity": f"{med.get('links', '')} / {med.get('units', '')}",
               "N_nt": doc["n_nontrivial"]}
        for key in TABLE_COLUMNS[4:]:
            if key in med:
                row[key] = f"{med[key]:.4g}"
        rows.append(row)
    return rows


def render_report(rows: list[dict]) -> tuple[str, str]:
    cols = [c for c in TABLE_COLUMNS if any(c in r for r in rows)]
    md = ["| " + " | ".join(cols) + " |", "|" + "|".join("---" for _ in cols) + "|"]
    for r in rows:
        md.append("| " + " | ".join(str(r.get(c, "")) for c in cols) + " |")
    csv_lines = [",".join(cols)] + [",".join(str(r.get(c, "")) for c in cols) for r in rows]
    return "\n".join(md) + "\n", "\n".join(csv_lines) + "\n"


def trace_csv(log_path: Path) -> str:
    """Per-iteration CSV of loss traces for plotting."""
    cols = ["it", "stage", "epoch", "Lt", "Ls", "Lc", "Lr", "rho_r", "alpha", "beta",
            "gamma", "links", "units", "valid", "ms_links", "ms_units"]
    lines = [",".join(cols)]
    with open(log_path) as fh:
        for line in fh:
            rec = json.loads(line)
            lines.append(",".join("" if rec.get(c) is None else str(rec.get(c))
                                  for c in cols))
    return "\n".join(lines) + "\n"


def _cmd_gen_data(args) -> int:
    seed = int(os.environ.get("EQLEARN_SEED", args.seed))
    out = Path(os.environ.get("EQLEARN_OUT", args.out))
    params = json.loads(args.params) if args.params else {}
    bundle = generate(args.problem, seed, **params)
    save_bundle(bundle, out)
    print(f"wrote {args.problem} bundle (seed {seed}) to {out}")
    return 0


def _cmd_train(args) -> int:
    try:
        doc = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as err:
        print(f"config parse error at line {err.lineno}, column {err.colno}: {err.msg}",
              file=sys.stderr)
        return 2
    try:
        config = RunConfig.from_dict(doc)
    except ConfigError as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return 2
    if "EQLEARN_SEED" in os.environ:
        config = replace(config, seeds=(int(os.environ["EQLEARN_SEED"]),))
    if args.out or "EQLEARN_OUT" in os.environ:
        config = replace(config, out=os.environ.get("EQLEARN_OUT", args.out))
    if args.jobs:
        config = replace(config, jobs=args.jobs)
    result = campaign(config)
    print(json.dumps({"medians": result.medians, "n_nontrivial": result.n_nontrivial},
                     indent=2))
    if result.out_dir:
        print(f"artifacts in {result.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    net, doc = load_snapshot(args.model)
    bundle = load_bundle(args.bundle)
    metrics = evaluate_model(net, bundle, doc.get("theta_s", 1e-4))
    print(json.dumps(metrics, indent=2, sort_keys=True))
    stored = doc.get("record")
    if stored:
        mismatches = {k: (stored[k], metrics[k]) for k in metrics
                      if k in stored and stored[k] != metrics[k]}
        if mismatches:
            print(f"stored metrics differ: {mismatches}", file=sys.stderr)
            return 1
        print("stored metrics reproduced exactly")
    return 0


def _cmd_report(args) -> int:
    rows = report_rows(Path(args.runs))
    if not rows:
        print(f"no campaign.json files under {args.runs}", file=sys.stderr)
        return 1
    md, csv_text = render_report(rows)
    out = Path(os.environ.get("EQLEARN_OUT", args.out or args.runs))
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.md").write_text(md)
    (out / "summary.csv").write_text(csv_text)
    print(md)
    return 0


def _cmd_trace(args) -> int:
    text = trace_csv(Path(args.run))
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eqlearn",
                                     description="Sparse analytic model learning")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", help="generate a problem bundle to a directory")
    p.add_argument("problem", choices=["resistors", "magic", "magman", "turtlebot"])
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--params", help="JSON object of generator parameters")
    p.set_defaults(fn=_cmd_gen_data)
    p = sub.add_parser("train", help="run a training campaign from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    p.set_defaults(fn=_cmd_train)
    p = sub.add_parser("eval", help="evaluate a persisted snapshot against a bundle")
    p.add_argument("--model", required=True)
    p.add_argument("--bundle", required=True)
    p.set_defaults(fn=_cmd_eval)
    p = sub.add_parser("report", help="summarize campaign results as markdown + CSV")
    p.add_argument("--runs", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_report)
    p = sub.add_parser("trace", help="emit per-iteration CSV from a run log")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_trace)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
