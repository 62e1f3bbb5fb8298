#!/usr/bin/env python3
"""Time the hardened inference kernels (shift vs depthwise vs dense conv).

Usage: python3 scripts/bench_kernels.py [--shape 1 64 360 640] [--reps 10]
"""

import argparse

from ghostsr.bench import CSV_HEADER, OP_KINDS, bench


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--shape", type=int, nargs=4, default=(1, 64, 360, 640),
                    metavar=("N", "C", "H", "W"))
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--csv", action="store_true")
    args = ap.parse_args()

    results = [bench(op, tuple(args.shape), reps=args.reps) for op in OP_KINDS]
    if args.csv:
        print(CSV_HEADER)
        for r in results:
            print(r.render_csv_row())
    else:
        for r in results:
            print(r.render())


if __name__ == "__main__":
    main()
