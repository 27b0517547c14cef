"""
From files to curves with the command line
==========================================

The same pipeline as the library calls, driven through the ``cldrf``
command. Every file is plain CSV or JSON with 17 significant digits, so
rerunning any step reproduces it byte for byte.
"""

import json
import tempfile
from pathlib import Path

from cldrf.cli import main

work = Path(tempfile.mkdtemp(prefix="cldrf-demo-"))
print("working in", work)

main(["simulate", "--scenario", "linear-c4", "--n", "800", "--seed", "7", "--out", str(work)])
print((work / "data.csv").read_text().splitlines()[:3])

# the linear-c4 treatment model has no intercept
main(["select", "--data", str(work / "data.csv"), "--cmax", "7",
      "--treatment-intercept", "false", "--out", str(work)])
sel = json.loads((work / "selection.json").read_text())
print("chosen C:", sel["chosen_C"])
print((work / "ic.csv").read_text())

main(["adrf", "--data", str(work / "data.csv"), "--fit", str(work / "selection.json"),
      "--points", "20", "--out", str(work)])
print((work / "adrf.csv").read_text().splitlines()[:4])

print("Rand index against the truth:")
main(["rand-index", str(work / "truth.csv"), str(work / "assignment.csv")])
