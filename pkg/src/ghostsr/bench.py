"""CPU microbenchmark for the hardened inference kernels.

Compares the zero-FLOP shift against a full depthwise 3x3 convolution and
a dense 3x3 convolution at the same tensor shape.  Latency numbers are
direction checks (shift should not be slower than depthwise), never
absolute-value targets; hardware varies.

Every run starts with a correctness pre-pass: the shift output must equal
a one-hot depthwise convolution exactly, otherwise the benchmark aborts.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .counting import conv_flops
from .shift import one_hot_offsets
from .tensor import shift_nchw

OP_KINDS = ("shift", "depthwise3x3", "conv3x3")


@dataclass
class BenchResult:
    op: str
    shape: tuple[int, int, int, int]
    reps: int
    warmup: int
    median_ms: float
    min_ms: float
    flops: int
    throughput_gflops: float

    def render(self) -> str:
        n, c, h, w = self.shape
        return (
            f"{self.op:<14} {n}x{c}x{h}x{w:<6} reps={self.reps:<4} "
            f"median={self.median_ms:9.3f} ms  min={self.min_ms:9.3f} ms  "
            f"flops={self.flops:>14}  ({self.throughput_gflops:.2f} GFLOP/s)"
        )

    def render_csv_row(self) -> str:
        n, c, h, w = self.shape
        return (
            f"{self.op},{n},{c},{h},{w},{self.reps},{self.warmup},"
            f"{self.median_ms:.6f},{self.min_ms:.6f},{self.flops}"
        )


CSV_HEADER = "op,n,c,h,w,reps,warmup,median_ms,min_ms,flops"


def _depthwise_kernel(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    k = kernels.shape[-1]
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros_like(x)
    for ky in range(k):
        for kx in range(k):
            out += kernels[:, ky, kx][None, :, None, None] * xp[:, :, ky : ky + h, kx : kx + w]
    return out


def _dense_conv_kernel(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    n, ci, h, w = x.shape
    co, _, s, _ = weight.shape
    p = (s - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, co, h * w), dtype=x.dtype)
    for ky in range(s):
        for kx in range(s):
            win = xp[:, :, ky : ky + h, kx : kx + w].reshape(n, ci, h * w)
            out += np.matmul(weight[:, :, ky, kx], win)
    return out.reshape(n, co, h, w)


def correctness_prepass(rng: np.random.Generator, shape=(1, 4, 16, 20), max_offset=1):
    """Shift must equal its one-hot depthwise form bitwise before timing."""
    x = rng.standard_normal(shape).astype(np.float32)
    c = shape[1]
    offs = rng.integers(-max_offset, max_offset + 1, size=(c, 2))
    kernels = np.stack(
        [one_hot_offsets(int(dy), int(dx), max_offset) for dy, dx in offs]
    ).astype(np.float32)
    shifted = shift_nchw(x, offs)
    dw = _depthwise_kernel(x, kernels)
    if not np.array_equal(shifted, dw):
        raise RuntimeError(
            "correctness pre-pass failed: shift != one-hot depthwise conv"
        )


def bench(op: str, shape: tuple[int, int, int, int], reps: int = 10,
          warmup: int = 3, seed: int = 0) -> BenchResult:
    if op not in OP_KINDS:
        raise ValueError(f"unknown op {op!r}; choose from {OP_KINDS}")
    if reps < 10:
        raise ValueError(f"need at least 10 repetitions, got {reps}")
    rng = np.random.default_rng(seed)
    correctness_prepass(rng)

    n, c, h, w = shape
    x = rng.standard_normal(shape).astype(np.float32)
    if op == "shift":
        offs = rng.integers(-1, 2, size=(c, 2))
        run = lambda: shift_nchw(x, offs)
        flops = 0
    elif op == "depthwise3x3":
        kernels = rng.standard_normal((c, 3, 3)).astype(np.float32)
        run = lambda: _depthwise_kernel(x, kernels)
        flops = h * w * c * 9
    else:
        weight = rng.standard_normal((c, c, 3, 3)).astype(np.float32)
        run = lambda: _dense_conv_kernel(x, weight)
        flops = conv_flops(h, w, c, c, 3)

    for _ in range(warmup):
        run()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        run()
        times.append((time.perf_counter_ns() - t0) / 1e6)
    median = float(np.median(times))
    return BenchResult(
        op=op,
        shape=tuple(shape),
        reps=reps,
        warmup=warmup,
        median_ms=median,
        min_ms=float(min(times)),
        flops=flops,
        throughput_gflops=(flops / 1e9) / (median / 1e3) if median > 0 else 0.0,
    )
