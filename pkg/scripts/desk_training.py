"""Train the width-reduced model on five seeds and report the desk-scale learning check."""

import argparse
import dataclasses

from accunet.desk import DeskConfig, run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--budget", type=float, default=30 * 60, help="total seconds for all seeds")
    ap.add_argument("--lr", type=float, default=DeskConfig.lr0)
    ap.add_argument("--difficulty", type=float, default=DeskConfig.difficulty)
    args = ap.parse_args()
    cfg = dataclasses.replace(DeskConfig(), budget_s=args.budget, lr0=args.lr,
                              difficulty=args.difficulty)
    runs = run(cfg, log=lambda m: print(m, flush=True))
    for r in runs:
        print(f"seed {r.seed}: {'PASS' if r.passed(cfg) else 'FAIL'} epochs={r.epochs} "
              f"train={r.train_dice:.4f} val={r.val_dice:.4f} {r.seconds:.0f}s ({r.stopped})")
    n = sum(r.passed(cfg) for r in runs)
    print(f"{n}/{len(runs)} seeds passed (need {cfg.min_passing})")


if __name__ == "__main__":
    main()
