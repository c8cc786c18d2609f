"""Plot loss-term and complexity traces from a run log (JSONL).

Produces the weighted-terms view (training RMSE vs the scaled secondary
terms) and the live/best complexity staircase.

Usage:
    python scripts/plot_traces.py runs/campaign/logs/seed_0.jsonl -o traces.png
"""

import argparse
import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("log")
    ap.add_argument("-o", "--out", default="traces.png")
    args = ap.parse_args()

    records = [json.loads(line) for line in open(args.log)]
    its = [r["it"] for r in records]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(9, 7), sharex=True)
    ax1.semilogy(its, [r["Lt"] for r in records], label="training RMSE", lw=0.8)
    ax1.semilogy(its, [r["Ls"] or None for r in records], label="singularity (weighted)", lw=0.8)
    ax1.semilogy(its, [r["Lc"] if r["Lc"] else None for r in records],
                 label="constraints (weighted)", lw=0.8)
    ax1.semilogy(its, [r["Lr"] if r["Lr"] else None for r in records],
                 label="regularizer (weighted)", lw=0.8)
    ax1.set_ylabel("loss terms")
    ax1.legend(loc="upper right", fontsize=8)
    ax2.plot(its, [r["links"] for r in records], label="live active links", lw=0.8)
    ax2.plot(its, [r["ms_links"] for r in records], label="best model links", lw=1.2)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("active links")
    ax2.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
