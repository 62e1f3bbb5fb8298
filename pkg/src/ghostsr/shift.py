"""Zero-FLOP shift layers and their trainable relaxation.

A ghost layer produces part of its output channels with a regular
convolution (the intrinsic block) and the rest by translating intrinsic
planes by small integer offsets (the ghost block).  At inference a shift is
a strided copy: no multiplies, no parameters.

During training each ghost channel's offset is a categorical choice over a
(2d+1) x (2d+1) grid, relaxed with the Gumbel-Softmax trick: the forward
pass applies the hard argmax shift, the backward pass differentiates the
softmax surrogate (straight-through).  Freezing keeps only the argmax
offsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class InvalidStateError(RuntimeError):
    """Raised when an operation needs hardened (or soft) shift weights."""


NOISE_SAMPLED = "sampled"
NOISE_FROZEN_ZERO = "frozen-zero"


# ---------------------------------------------------------------------------
# primitive shift machinery


def shift2d(plane: np.ndarray, dy: int, dx: int, max_offset: int | None = None) -> np.ndarray:
    """Shift a single (h, w) plane: out[y, x] = in[y+dy, x+dx], zero fill."""
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise ValueError(f"shift2d: expected a 2-D plane, got ndim={plane.ndim}")
    if max_offset is not None and max(abs(dy), abs(dx)) > max_offset:
        raise ValueError(
            f"shift2d: offset ({dy}, {dx}) exceeds max_offset={max_offset}"
        )
    h, w = plane.shape
    out = np.zeros_like(plane)
    y0, y1 = max(0, -dy), min(h, h - dy)
    x0, x1 = max(0, -dx), min(w, w - dx)
    if y0 < y1 and x0 < x1:
        out[y0:y1, x0:x1] = plane[y0 + dy : y1 + dy, x0 + dx : x1 + dx]
    return out


def one_hot_offsets(dy: int, dx: int, max_offset: int) -> np.ndarray:
    """The (2d+1) x (2d+1) kernel with a single 1 at offset (dy, dx).

    Convolving a plane with this kernel under zero same-padding reproduces
    ``shift2d(plane, dy, dx)`` exactly, which is how the training-time
    depthwise form of a shift is built.
    """
    d = max_offset
    if not (-d <= dy <= d and -d <= dx <= d):
        raise ValueError(f"one_hot_offsets: ({dy}, {dx}) outside [-{d}, {d}]")
    k = np.zeros((2 * d + 1, 2 * d + 1))
    k[dy + d, dx + d] = 1.0
    return k


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    """-log(-log(u)) for u in the open interval (0, 1)."""
    return -np.log(-np.log(u))


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """Sample standard Gumbel noise; the uniform draw excludes both endpoints."""
    tiny = np.finfo(np.float64).tiny
    u = rng.uniform(tiny, 1.0, size=shape)
    return gumbel_from_uniform(u)


def soft_shift_weight(logits: np.ndarray, noise: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of (logits + noise) / temperature over the whole offset grid.

    Stabilized by subtracting the maximum before exponentiation; the result
    is elementwise in (0, 1) and sums to 1.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = (np.asarray(logits, dtype=np.float64) + noise) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def harden_offsets(grid: np.ndarray) -> tuple[int, int]:
    """Argmax over an offset grid, as (dy, dx) in [-d, d] coordinates.

    Accepts softened weights or raw logits (the softmax is monotone, so
    both have the same argmax).  Ties break toward the smallest (dy, dx)
    pair so freezing a trained network is reproducible; numpy's argmax
    returns the first maximum in row-major order, which is exactly that
    tie rule.
    """
    grid = np.asarray(grid)
    k = grid.shape[-1]
    d = (k - 1) // 2
    flat = int(np.argmax(grid))
    return flat // k - d, flat % k - d


def _batch_harden(soft: np.ndarray) -> np.ndarray:
    """Vectorized harden_offsets for a (g, k, k) stack; returns (g, 2) ints."""
    g, k, _ = soft.shape
    flat = soft.reshape(g, k * k).argmax(axis=1)
    d = (k - 1) // 2
    return np.stack([flat // k - d, flat % k - d], axis=1)


# ---------------------------------------------------------------------------
# learnable per-channel shift state


@dataclass
class ShiftWeight:
    """Learnable offset state for one ghost channel.

    ``logits`` is the real-valued proxy for the one-hot offset kernel; a
    fresh Gumbel noise grid is added every training forward unless the
    noise mode is frozen to zero (deterministic tests).  ``hardened`` holds
    the final integer offsets once the channel is frozen for inference.
    """

    max_offset: int = 1
    temperature: float = 1.0
    noise_mode: str = NOISE_SAMPLED
    logits: Tensor = None
    noise: np.ndarray = None
    hardened: tuple[int, int] | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.noise_mode not in (NOISE_SAMPLED, NOISE_FROZEN_ZERO):
            raise ValueError(f"unknown noise mode {self.noise_mode!r}")
        k = 2 * self.max_offset + 1
        if self.logits is None:
            self.logits = T.parameter(np.zeros((k, k)))
        if self.logits.data.shape != (k, k):
            raise ValueError(
                f"logits shape {self.logits.data.shape} does not match grid {k}x{k}"
            )
        if self.noise is None:
            self.noise = np.zeros((k, k))
        if self.hardened is not None:
            dy, dx = self.hardened
            d = self.max_offset
            if not (-d <= dy <= d and -d <= dx <= d):
                raise ValueError(f"hardened offsets ({dy}, {dx}) outside [-{d}, {d}]")

    def resample_noise(self, rng: np.random.Generator) -> None:
        if self.noise_mode == NOISE_SAMPLED:
            self.noise = gumbel_noise(self.logits.data.shape, rng)
        else:
            self.noise = np.zeros(self.logits.data.shape)

    def soft(self) -> np.ndarray:
        return soft_shift_weight(self.logits.data, self.noise, self.temperature)

    def freeze(self) -> tuple[int, int]:
        """Harden from the logits alone (noise treated as zero).

        The softmax is monotone, so the argmax of the logits equals the
        argmax of their softened weights; using the raw grid keeps the
        selection identical to the training forward at any precision.
        """
        self.hardened = harden_offsets(self.logits.data)
        return self.hardened


# ---------------------------------------------------------------------------
# ghost layer


@dataclass
class ConvSpec:
    """Shape contract of one convolution: stride 1, zero same-padding."""

    c_in: int
    c_out: int
    ksize: int
    bias: bool = True

    def __post_init__(self):
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError(f"channel counts must be >= 1, got {self.c_in}, {self.c_out}")
        if self.ksize < 1 or self.ksize % 2 != 1:
            raise ValueError(f"kernel size must be odd and >= 1, got {self.ksize}")


@dataclass
class GhostLayerSpec:
    """One converted layer: intrinsic convolution plus per-channel shifts.

    ``conv`` describes the intrinsic part, so its ``c_out`` is the number of
    intrinsic channels.  ``assignment`` maps each ghost output channel (an
    index in the full [intrinsic | ghost] output ordering) to the intrinsic
    channel it is shifted from.
    """

    conv: ConvSpec
    ghost_ratio: float
    assignment: dict[int, int] = field(default_factory=dict)
    shifts: list[ShiftWeight] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.ghost_ratio < 1.0):
            raise ValueError(f"ghost ratio must be in [0, 1), got {self.ghost_ratio}")
        total = self.conv.c_out + len(self.shifts)
        n_ghost = self.ghost_ratio * total
        if abs(n_ghost - round(n_ghost)) > 1e-9:
            raise ValueError(
                f"ghost ratio {self.ghost_ratio} does not split {total} channels "
                f"into whole intrinsic/ghost counts"
            )
        if len(self.shifts) != round(n_ghost):
            raise ValueError(
                f"{len(self.shifts)} shift weights but ratio {self.ghost_ratio} "
                f"of {total} channels implies {round(n_ghost)}"
            )
        n_int = self.conv.c_out
        expected = set(range(n_int, total))
        if set(self.assignment) != expected:
            raise ValueError(
                f"assignment keys must be exactly the ghost channels "
                f"{sorted(expected)}, got {sorted(self.assignment)}"
            )
        for c1, c2 in self.assignment.items():
            if not (0 <= c2 < n_int):
                raise ValueError(
                    f"ghost channel {c1} sources invalid intrinsic channel {c2}"
                )

    @property
    def c_out_total(self) -> int:
        return self.conv.c_out + len(self.shifts)

    @property
    def n_ghost(self) -> int:
        return len(self.shifts)

    def source_indices(self) -> list[int]:
        n_int = self.conv.c_out
        return [self.assignment[c] for c in range(n_int, self.c_out_total)]

    def hardened_offsets(self) -> np.ndarray:
        offs = []
        for sw in self.shifts:
            if sw.hardened is None:
                raise InvalidStateError(
                    "ghost layer used in inference mode before its shift "
                    "weights were hardened"
                )
            offs.append(sw.hardened)
        return np.asarray(offs, dtype=int).reshape(len(offs), 2)


def _ste_shift(src: Tensor, soft: Tensor, offsets: np.ndarray) -> Tensor:
    """Hard shift forward, soft depthwise backward.

    The forward values come from the same strided-copy routine the frozen
    inference path uses, so freezing preserves outputs bitwise.  The
    backward pass treats the applied kernel as the softmax surrogate: the
    gradient into ``soft`` is the per-tap correlation of the input with the
    upstream gradient, and the gradient into ``src`` uses the hard one-hot
    kernel (a reverse shift).
    """
    n, c, h, w = src.data.shape
    k = soft.data.shape[-1]
    p = (k - 1) // 2
    out = T.shift_nchw(src.data, offsets)

    def _bw(g):
        if soft.requires_grad:
            xp = np.pad(src.data, ((0, 0), (0, 0), (p, p), (p, p)))
            gk = np.empty((c, k, k), dtype=g.dtype)
            for ky in range(k):
                for kx in range(k):
                    gk[:, ky, kx] = np.einsum(
                        "nchw,nchw->c", g, xp[:, :, ky : ky + h, kx : kx + w]
                    )
            T._accumulate(soft, gk)
        if src.requires_grad:
            T._accumulate(src, T.shift_nchw(g, -offsets))

    return T._result(out, (src, soft), _bw)


def shift_train_forward(
    x: Tensor, sw: ShiftWeight, rng: np.random.Generator | None = None
) -> Tensor:
    """Training-time shift of every channel in ``x`` by one learnable offset.

    Resamples the Gumbel noise (unless frozen to zero), applies the hard
    argmax shift in the forward pass and routes gradients through the
    softmax surrogate.  The layer-level path in ``ghost_layer_forward``
    is the batched form of this.
    """
    if sw.noise_mode == NOISE_SAMPLED and rng is None:
        raise ValueError("sampled noise mode needs an rng")
    sw.resample_noise(rng)
    c = x.data.shape[1]
    noisy = T.add(
        T.stack_grids([sw.logits] * c),
        Tensor(np.stack([sw.noise] * c)),
    )
    soft = T.grid_softmax(T.scalar_mul(noisy, 1.0 / sw.temperature))
    offsets = _batch_harden(noisy.data)
    return _ste_shift(x, soft, offsets)


def ghost_layer_forward(
    x: Tensor,
    spec: GhostLayerSpec,
    weight: Tensor,
    bias: Tensor | None,
    mode: str = "inference",
    rng: np.random.Generator | None = None,
    output_order: np.ndarray | None = None,
) -> Tensor:
    """Run one ghost layer: intrinsic conv, shifted ghosts, concat.

    The structural output order is [intrinsic block | ghost block]; when the
    layer was converted from a pre-trained model, ``output_order`` restores
    the original channel positions so skip connections stay aligned.

    In training mode every ghost channel re-samples its Gumbel noise (unless
    frozen to zero), the applied offsets are the argmax of the softened
    kernels, and gradients flow through the softmax surrogate.  In inference
    mode every shift weight must already be hardened.
    """
    intrinsic = T.conv2d(x, weight, bias)
    if spec.n_ghost == 0:
        return intrinsic

    src = T.gather_channels(intrinsic, spec.source_indices())

    if mode == "train":
        temps = {sw.temperature for sw in spec.shifts}
        if len(temps) != 1:
            raise ValueError("all shift weights in a layer must share a temperature")
        for sw in spec.shifts:
            if sw.noise_mode == NOISE_SAMPLED and rng is None:
                raise ValueError("training forward with sampled noise needs an rng")
            sw.resample_noise(rng)
        stacked = T.stack_grids([sw.logits for sw in spec.shifts])
        noise = np.stack([sw.noise for sw in spec.shifts]).astype(stacked.data.dtype)
        noisy = T.add(stacked, Tensor(noise))
        soft = T.grid_softmax(T.scalar_mul(noisy, 1.0 / temps.pop()))
        # argmax over the raw noisy grid: identical to argmax of the softmax
        # (monotone) but immune to low-precision softmax rounding ties
        offsets = _batch_harden(noisy.data)
        ghosts = _ste_shift(src, soft, offsets)
    elif mode == "inference":
        ghosts = T.shift_channels(src, spec.hardened_offsets(), spec.shifts[0].max_offset)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    out = T.concat_channels(intrinsic, ghosts)
    if output_order is not None:
        order = np.asarray(output_order, dtype=int)
        if not np.array_equal(order, np.arange(spec.c_out_total)):
            out = T.gather_channels(out, order)
    return out
