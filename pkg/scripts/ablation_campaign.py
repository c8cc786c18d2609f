"""Run the variant ablation on one problem and emit a summary table.

Emits the standard comparison layout (one row per algorithm variant) at
a configurable iteration budget.  At the full budget (--iterations 90000) this
is a long job; the default 10000 finishes in tens of minutes on two cores.

Usage:
    python scripts/ablation_campaign.py resistors --seeds 10 --out runs/ablation
"""

import argparse
from pathlib import Path

from eqlearn.harness import RunConfig, campaign, render_report, report_rows
from eqlearn.trainer import StageSchedule, TrainSettings

VARIANTS = ("ACYE", "ACYS", "AEYE", "AEYS", "AENE", "SCYE", "SCYS", "SENE")


def scaled_schedule(total: int) -> StageSchedule:
    if total == 90000:
        return StageSchedule()
    epochs = max(1, (total - 2000) // 1000)
    n_init = (total - epochs * 1000) // 2
    n_final = total - epochs * 1000 - n_init
    return StageSchedule(n_init=n_init, n_explore=20, n_focus=980,
                         epochs=epochs, n_final=n_final)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("problem", choices=["resistors", "magic", "magman", "turtlebot"])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--iterations", type=int, default=10000)
    ap.add_argument("--lr", type=float, default=0.02)
    ap.add_argument("--size", type=int, default=500, help="resistors data set size")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--jobs", type=int, default=2)
    args = ap.parse_args()

    schedule = scaled_schedule(args.iterations)
    params = {"size": args.size} if args.problem == "resistors" else {}
    for variant in VARIANTS:
        if args.problem == "turtlebot" and variant[1] == "E":
            continue  # no extrapolation-validation set exists for the robot
        cfg = RunConfig(problem=args.problem, seeds=tuple(range(args.seeds)),
                        data_seed=1, problem_params=params, schedule=schedule,
                        settings=TrainSettings(lr=args.lr), variant=variant,
                        jobs=args.jobs, keep_logs=False,
                        out=f"{args.out}/{args.problem}_{variant}")
        try:
            result = campaign(cfg)
        except ValueError as err:
            print(f"{variant}: skipped ({err})")
            continue
        print(f"{variant}: N_nt={result.n_nontrivial} medians={result.medians}")
    md, _ = render_report(report_rows(Path(args.out)))
    print(md)


if __name__ == "__main__":
    main()
