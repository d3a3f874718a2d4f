"""
Command line
============

Write a unit-level CSV and an INI run configuration, then call the ``fit``,
``predict`` and ``interval`` subcommands.  The same calls work from a shell
as ``mner predict --config run.ini``.
"""

# %%
import csv
import tempfile
from pathlib import Path

import numpy as np

from mner.cli import main
from mner.io import read_csv_rows

work = Path(tempfile.mkdtemp())
rng = np.random.default_rng(5)
with open(work / "survey.csv", "w", newline="") as fh:
    w = csv.writer(fh)
    w.writerow(["county", "corn", "soy", "pix_corn", "pix_soy"])
    for a in range(15):
        v = rng.normal(size=2)
        for _ in range(rng.integers(1, 6)):
            pc, ps = rng.uniform(0, 1, size=2)
            w.writerow([f"c{a}", 1 + 3 * pc + v[0] + rng.normal(), 2 + 2 * ps + v[1] + rng.normal(), pc, ps])

(work / "run.ini").write_text(
    "[data]\ninput = survey.csv\narea = county\nresponses = corn, soy\n"
    "[covariates]\ncorn = pix_corn, pix_soy\nsoy = pix_corn, pix_soy\n"
    "[run]\nell = 1, 1\noutput_dir = out\n"
)

# %%
for cmd in ("fit", "predict", "interval"):
    print(cmd, "exit code", main([cmd, "--config", str(work / "run.ini")]))

# %%
for row in read_csv_rows(work / "out" / "intervals.csv")[:5]:
    print(row["area"], row["n"], row["lower"][:7], row["upper"][:7], "z*", row["z_star"][:7])
