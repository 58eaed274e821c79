"""Run the demo pipeline and print where its artifacts went."""

import argparse
import sys

from gaptext.pipeline import run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/demo.yaml")
    args = ap.parse_args()
    res = run_pipeline(args.config, command=" ".join(sys.argv))
    print(f"{res.manifest.status} in {res.manifest.duration_s:.1f}s -> {res.run_dir}")
    for name in ("metrics.csv", "attention.csv", "baseline.csv"):
        path = res.run_dir / name
        if path.exists():
            print(f"\n== {name}\n{path.read_text().strip()}")
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
