"""Parameter and FLOP audit of every variant, with a per-block breakdown of the full model."""

import argparse
from collections import defaultdict

from accunet.model import VARIANTS, ModelConfig, build, summary


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--hw", type=int, default=224)
    args = ap.parse_args()
    probe = (1, 3, args.hw, args.hw)
    print(f"{'variant':<16}{'params':>12}{'GFLOPs':>10}{'GMACs':>10}")
    for variant in VARIANTS:
        rep = summary(build(ModelConfig(variant=variant)), probe)
        print(f"{variant:<16}{rep.total_params:>12}{rep.total_flops / 1e9:>10.3f}"
              f"{rep.total_macs / 1e9:>10.3f}")

    rep = summary(build(ModelConfig()), probe)
    blocks = defaultdict(lambda: [0, 0])
    for row in rep.rows:
        key = ".".join(row.name.split(".")[:2])
        blocks[key][0] += row.params
        blocks[key][1] += row.flops
    print(f"\n{'block':<20}{'params':>12}{'GFLOPs':>10}")
    for key, (p, f) in blocks.items():
        print(f"{key:<20}{p:>12}{f / 1e9:>10.3f}")


if __name__ == "__main__":
    main()
