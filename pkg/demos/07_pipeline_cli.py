"""
Driving the whole pipeline from the command line
================================================

The `scenekd` entry point exposes the pipeline phases as subcommands:
gen-data, train-teachers, train-combiners, distill, quantize, evaluate,
report-complexity, and run-all. Every subcommand takes --config (a JSON
file), --seed, --out, repeated --set KEY=VALUE dotted overrides, and
--float64 for the bitwise-reproducible test-precision mode.

Each phase records a hash of the full config when it finishes; rerunning a
phase with the same config is a no-op, and dependent phases refuse to run
before their inputs exist (exit code 3). Config mistakes exit with code 2.

This script calls the same main() the console script uses, on a pared-down
config so it finishes in about a minute.
"""

import json
import tempfile
import time
from pathlib import Path

from scenekd.cli import main

out = Path(tempfile.mkdtemp(prefix="scenekd-demo-")) / "run"
small = [
    "--set", "data.per_class=8",
    "--set", "teachers.recipe=[[1.0,[0,0,0]],[1.5,[0,0,0]]]",
    "--set", "teachers.epochs=4",
    "--set", "combiner.epochs=3",
    "--set", "optimizer.epochs=6",
    "--set", "quantization.calib_batches=2",
]

# phases must run in order: distilling before the combiners exist fails fast
code = main(["distill", "--out", str(out), *small])
print("distill before its inputs exist -> exit code", code)

# an unknown config key is a config error, exit code 2
code = main(["gen-data", "--out", str(out), "--set", "optimizer.lrr=0.1"])
print("bad --set key -> exit code", code)

# the happy path, one phase at a time
for phase in ("gen-data", "train-teachers", "train-combiners",
              "distill", "quantize", "evaluate"):
    t0 = time.time()
    code = main([phase, "--out", str(out), "--seed", "0", *small])
    assert code == 0, phase
    print(f"  ({time.time() - t0:.1f}s)")

# rerunning a finished phase with the same config is a cheap no-op
t0 = time.time()
main(["train-teachers", "--out", str(out), "--seed", "0", *small])
print(f"rerun of train-teachers took {time.time() - t0:.2f}s (skipped)")

print("\ncomplexity report:")
main(["report-complexity", "--out", str(out), *small])

metrics = json.loads((out / "metrics.json").read_text())
print("\nrecorded metrics per phase:")
for phase, rec in metrics["phases"].items():
    print(f"  {phase}: {rec}")
