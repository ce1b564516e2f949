"""Render figures from `ackguard figures-data` output.

Usage: python plots/render.py --input <figures-data dir> --out <image dir>
"""

import argparse
import json
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "ackguard"
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

REQUIRED = {
    "fig2_age.csv": ["m", "k", "age", "post_change"],
    "fig3_moving_average.csv": ["m", "k", "mean_age"],
    "fig4_posterior_receiver.csv": ["m", "k"],
    "fig5_posterior_combined.csv": ["detector", "side", "index", "k", "z_hat"],
}


def load(input_dir):
    frames = {}
    for name, cols in REQUIRED.items():
        path = input_dir / name
        if not path.exists():
            sys.exit(f"missing input file {path}")
        df = pd.read_csv(path)
        missing = [c for c in cols if c not in df.columns]
        if missing:
            sys.exit(f"{path}: missing columns {missing}")
        frames[name] = df
    ann = json.loads((input_dir / "annotations.json").read_text())
    return frames, ann


def save(fig, out, stem):
    fig.tight_layout()
    fig.savefig(out / f"{stem}.svg", metadata={"Date": None})
    plt.close(fig)


def render(input_dir, out):
    frames, ann = load(input_dir)
    out.mkdir(parents=True, exist_ok=True)
    act = ann["activation_step"]

    df = frames["fig2_age.csv"]
    fig, ax = plt.subplots()
    ax.step(df["k"], df["age"], where="post", lw=0.6)
    ax.axvline(act, color="r", ls="--", label=f"intrusion k={act}")
    ax.set(xlabel="process time k", ylabel="age of innovation")
    ax.legend()
    save(fig, out, "age")

    df = frames["fig3_moving_average.csv"]
    fig, ax = plt.subplots()
    ax.plot(df["k"], df["mean_age"], lw=0.8)
    ax.axhline(ann["pre_change_mean_age"], color="g", ls=":", label="pre-change mean")
    ax.axhline(ann["post_change_mean_age"], color="m", ls=":", label="post-change mean")
    ax.axvline(act, color="r", ls="--")
    ax.set(xlabel="process time k", ylabel=f"mean age over last {ann['moving_average_window']} receipts")
    ax.legend()
    save(fig, out, "moving_average")

    df = frames["fig4_posterior_receiver.csv"]
    fig, ax = plt.subplots()
    for col in [c for c in df.columns if c.startswith("z_")]:
        ax.plot(df["m"], df[col], label=col[2:])
    for d in ann["detectors"]:
        if d["side"] == "receiver":
            for t in d["thresholds"]:
                ax.axhline(t["threshold"], ls=":", lw=0.8)
            if d["change_index"] is not None:
                ax.axvline(d["change_index"], color="r", ls="--")
    ax.set(xlabel="receipt index", ylabel="posterior of no change")
    ax.legend()
    save(fig, out, "posterior_receiver")

    df = frames["fig5_posterior_combined.csv"]
    fig, ax = plt.subplots()
    for (name, side), g in df.groupby(["detector", "side"], sort=False):
        ax.plot(g["k"], g["z_hat"], label=f"{name} ({side})")
    for d in ann["detectors"]:
        for t in d["thresholds"]:
            ax.axhline(t["threshold"], ls=":", lw=0.8)
    ax.axvline(act, color="r", ls="--")
    ax.set(xlabel="process time k", ylabel="posterior of no change")
    ax.legend()
    save(fig, out, "posterior_combined")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    args = p.parse_args(argv)
    render(args.input, args.out)


if __name__ == "__main__":
    main()
