"""
The whole pipeline from the command line
========================================

Each stage is its own subcommand, so an ablation grid is a short shell loop.
This script drives the same entry point in-process with reduced sizes; drop
the size flags to run the full configuration.
"""

import json
import tempfile
from pathlib import Path

from stad.cli import main

work = Path(tempfile.mkdtemp(prefix="stad-demo-"))
data, teacher, student = work / "data", work / "teacher", work / "student"
small = ["--bands", "10", "--teacher-hidden", "32", "--student-hidden", "16", "--batch-size", "4",
         "--lr", "0.001"]

main(["synth", "--out", str(data), "--count", "8", "--test-count", "3",
      "--height", "16", "--width", "16", "--bands", "10", "--contrast", "0.6"])
main(["train-teacher", "--data", str(data), "--out", str(teacher), "--epochs", "20", *small])
main(["distill", "--data", str(data), "--teacher", str(teacher / "checkpoint"), "--out", str(student),
      "--epochs", "20", *small])

for mode in ("E", "RX"):
    main(["detect", "--data", str(data), "--checkpoint", str(student / "checkpoint"),
          "--mode", mode, "--out", str(work / "scores" / mode)])
    main(["eval", "--scores-dir", str(work / "scores" / mode), "--labels-dir", str(data / "labels"),
          "--out", str(work / "eval" / mode)])

main(["dep", "--phi-dir", str(work / "eval" / "E"), "--psi-dir", str(work / "eval" / "RX"),
      "--out", str(work / "dep")])
print(json.loads((work / "dep" / "dep.json").read_text())["mdep_df"])
print("outputs under", work)
