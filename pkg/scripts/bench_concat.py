"""Repeat the concat micro-benchmark at several input sizes."""

import sys

from accunet.cli import main

if __name__ == "__main__":
    trials = sys.argv[1] if len(sys.argv) > 1 else "30"
    for hw in (64, 128, 224):
        print(f"--- hw={hw}")
        main(["bench-concat", "--trials", trials, "--hw", str(hw)])
