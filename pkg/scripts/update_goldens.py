"""Regenerate the CLI golden outputs checked by tests/test_cli.py.

Run only after an intentional change to the simulator or its random streams.
"""
import contextlib
import io
import json
from pathlib import Path

from overflow_ppo.cli import main

GOLDEN_RUNS = {
    "twopool-midnight": ["simulate", "--preset", "twopool-midnight", "--policy", "complete_overflow", "--days", "200", "--seed", "0"],
    "twopool-8epoch": ["simulate", "--preset", "twopool-8epoch", "--policy", "empirical", "--days", "200", "--seed", "0"],
}


def run(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(argv)
    return code, buf.getvalue()


if __name__ == "__main__":
    out = {}
    for name, argv in GOLDEN_RUNS.items():
        code, text = run(argv)
        assert code == 0, (name, code)
        out[name] = {"argv": argv, "summary": json.loads(text)}
    path = Path(__file__).resolve().parents[1] / "tests" / "goldens" / "simulate.json"
    path.write_text(json.dumps(out, indent=1) + "\n")
    print(f"wrote {path}")
