"""End-to-end demo on the bundled fixtures.

Runs the oracle and greedy baselines over the 20-episode pack, scores both,
builds clouds for the RGB-D scene and exports alignment records.

    python scripts/run_fixture_pack.py [--out runs/demo]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from conav.cli import main

ROOT = Path(__file__).resolve().parents[1]
FX = ROOT / "fixtures"
SCENES = [str(FX / "scenes"), str(FX / "scenes" / "pack")]


def conav(*argv) -> None:
    code = main([str(a) for a in argv])
    if code != 0:
        raise SystemExit(f"conav {argv[0]} exited with {code}")


def run() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(ROOT / "runs" / "demo"))
    args = ap.parse_args()
    out = Path(args.out)

    for policy in ("oracle", "greedy"):
        conav("run", "--scenes", *SCENES, "--episodes", FX / "episodes" / "pack20.json",
              "--policy", policy, "--jobs", 4, "--out", out / policy)
        conav("report", "--run", out / policy)

    # a scripted-belief run over the scenes that carry RGB-D frames
    rgbd = out / "rgbd"
    conav("run", "--scenes", *SCENES, "--episodes", FX / "episodes" / "misc.json", "--policy", "greedy",
          "--belief", f"scripted:{FX / 'beliefs' / 'scripted.json'}", "--out", rgbd)
    conav("pcgen", "--scene", FX / "scenes" / "room_rgbd.json", "--all", "--out", rgbd / "clouds")
    conav("export-align", "--in", rgbd, "--out", rgbd / "alignment.jsonl", "--with-hypotheses")

    summary = {p: json.loads((out / p / "report.json").read_text())["metrics"] for p in ("oracle", "greedy")}
    print(json.dumps({p: {k: m[k] for k in ("SR", "SPL", "OSR", "NE")} for p, m in summary.items()}, indent=2))


if __name__ == "__main__":
    run()
