"""Construct rater-study CSV files with prescribed per-rater tallies."""

import csv


def write_ratings(path, tallies):
    """``tallies``: per rater ``(tn, fp, fn, tp)``; reals first, then generated images."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rater", "image", "true_label", "rated_label"])
        for r, (tn, fp, fn, tp) in enumerate(tallies):
            rater = f"doctor{r + 1}"
            labels = (["real"] * tn + ["generated"] * fp)
            for i, rated in enumerate(labels):
                w.writerow([rater, f"real_{i:02d}", "real", rated])
            labels = (["real"] * fn + ["generated"] * tp)
            for i, rated in enumerate(labels):
                w.writerow([rater, f"gen_{i:02d}", "generated", rated])


# six raters, 25 real + 25 generated each; column totals (113, 37, 74, 76)
STUDY_TALLIES = [(19, 6, 12, 13)] * 4 + [(19, 6, 13, 12), (18, 7, 13, 12)]
