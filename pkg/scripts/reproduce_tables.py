#!/usr/bin/env python3
"""Print the parameter/FLOPs tables: dense baselines, their ghost versions
at ratio 0.5, and the ghost-ratio ladder for the cascading network.

Usage: python3 scripts/reproduce_tables.py [--hr H W]
"""

import argparse

from ghostsr.counting import count
from ghostsr.models import preset


def fmt(report):
    return f"{report.total_params / 1e6:6.2f}M  {report.total_flops / 1e9:8.1f}G"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--hr", type=int, nargs=2, default=(720, 1280), metavar=("H", "W"))
    args = ap.parse_args()
    hr = tuple(args.hr)

    print(f"# cost at HR {hr[0]}x{hr[1]}   (params, FLOPs; 1 MAC = 1 FLOP)")
    print(f"{'model':<10} {'dense':>18} {'ghost 0.5':>18}")
    for name in ("edsr_x2", "edsr_x3", "edsr_x4", "rdn_x2", "carn_x2",
                 "carn_x3", "carn_x4", "imdn_x2", "imdn_x3", "imdn_x4"):
        dense = count(preset(name), 0.0, hr)
        ghost = count(preset(name), 0.5, hr)
        print(f"{name:<10} {fmt(dense):>18} {fmt(ghost):>18}")

    print("\n# ghost-ratio ladder, carn_x3")
    for ratio in (0.0, 0.25, 0.5, 0.75):
        report = count(preset("carn_x3"), ratio, hr)
        print(f"ratio {ratio:<5} {fmt(report)}")


if __name__ == "__main__":
    main()
