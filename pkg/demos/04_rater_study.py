"""Rater-study analysis: per-rater confusion matrices and their average.

Builds a six-rater ratings file (25 real and 25 generated images per rater)
whose pooled tallies are TN 113, FP 37, FN 74, TP 76, then runs the same
analysis as ``maskel study``.  FN counts generated images a rater judged
real, so a high FN rate means the generated X-rays passed as real.

    python demos/04_rater_study.py --out demo_out/04
"""

import argparse
import csv
from pathlib import Path

from maskel.metrics import format_confusion, study_report

TALLIES = [(19, 6, 12, 13)] * 4 + [(19, 6, 13, 12), (18, 7, 13, 12)]  # TN, FP, FN, TP


def write_ratings(path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rater", "image", "true_label", "rated_label"])
        for r, (tn, fp, fn, tp) in enumerate(TALLIES, 1):
            for i, rated in enumerate(["real"] * tn + ["generated"] * fp):
                w.writerow([f"doctor{r}", f"real_{i:02d}", "real", rated])
            for i, rated in enumerate(["real"] * fn + ["generated"] * tp):
                w.writerow([f"doctor{r}", f"gen_{i:02d}", "generated", rated])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo_out/04")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ratings = out / "ratings.csv"
    write_ratings(ratings)
    mats, avg = study_report(ratings, out)
    print(format_confusion(mats, avg))
    print(f"average: TN {avg.tn:.2f}  FP {avg.fp:.2f}  FN {avg.fn:.2f}  TP {avg.tp:.2f}")
    print(f"generated images judged real: {avg.fn / (avg.fn + avg.tp):.1%}")
    print(f"heatmaps in {out / 'confusion.png'}")


if __name__ == "__main__":
    main()
