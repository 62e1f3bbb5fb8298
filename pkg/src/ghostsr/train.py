"""Optimization loop: ADAM, cosine learning-rate decay, freeze-to-inference.

The training forward runs ghost layers in their straight-through form
(hard shift forward, soft gradient); ``freeze`` hardens every shift weight
afterwards so the inference graph reproduces the training outputs bitwise.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import Network
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries a diagnostic dump."""


@dataclass
class OptimizerSpec:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr0: float = 1e-4


class Adam:
    """Standard ADAM with bias correction over a fixed parameter list."""

    def __init__(self, params: list[Tensor], spec: OptimizerSpec | None = None):
        self.spec = spec or OptimizerSpec()
        self.params = list(params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: dict[Tensor, np.ndarray], lr: float) -> None:
        s = self.spec
        self.t += 1
        b1t = 1.0 - s.beta1**self.t
        b2t = 1.0 - s.beta2**self.t
        for i, p in enumerate(self.params):
            g = grads[p]
            if g.shape != p.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter {p.data.shape}"
                )
            self.m[i] = s.beta1 * self.m[i] + (1.0 - s.beta1) * g
            self.v[i] = s.beta2 * self.v[i] + (1.0 - s.beta2) * (g * g)
            m_hat = self.m[i] / b1t
            v_hat = self.v[i] / b2t
            p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + s.eps)).astype(
                p.data.dtype
            )


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """0.5 * lr0 * (1 + cos(pi * t / total)); t past the end clamps to 0."""
    if t < 0:
        raise ValueError(f"step must be >= 0, got {t}")
    t = min(t, total)
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total))


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)

    def render_csv(self, include_wall: bool = True) -> str:
        """CSV log; lr and loss use repr so replays compare bitwise.

        Wall-clock times are inherently non-deterministic, so reproducibility
        checks drop that column (``include_wall=False``).
        """
        rows = ["step,lr,loss,wall_ms" if include_wall else "step,lr,loss"]
        for i in range(len(self.steps)):
            cells = [str(self.steps[i]), repr(self.lrs[i]), repr(self.losses[i])]
            if include_wall:
                cells.append(f"{self.wall_ms[i]:.3f}")
            rows.append(",".join(cells))
        return "\n".join(rows) + "\n"


def _batch_arrays(pairs, idx):
    lr = np.stack([pairs[i].lr for i in idx]).astype(T.default_dtype())
    hr = np.stack([pairs[i].hr for i in idx]).astype(T.default_dtype())
    return lr, hr


def train(
    net: Network,
    pairs,
    steps: int,
    opt_spec: OptimizerSpec | None = None,
    batch: int = 16,
    loss_kind: str = "l1",
    seed: int = 0,
    log_every: int = 1,
) -> TrainLog:
    """Optimize conv weights, biases and shift logits jointly.

    Each step samples ``batch`` patch pairs (with replacement when the pool
    is smaller), subtracts the dataset mean, runs the training-mode forward,
    applies the chosen loss against the mean-shifted target and takes one
    ADAM step at the cosine-decayed learning rate.
    """
    if loss_kind not in ("l1", "l2"):
        raise ValueError(f"loss must be 'l1' or 'l2', got {loss_kind!r}")
    opt_spec = opt_spec or OptimizerSpec()
    params = net.parameters()
    opt = Adam(params, opt_spec)
    rng = np.random.default_rng(seed)
    mean = np.asarray(net.config.rgb_mean).reshape(1, 3, 1, 1)
    log = TrainLog()
    loss_fn = T.l1_loss if loss_kind == "l1" else T.l2_loss

    for step in range(steps):
        t0 = time.perf_counter()
        lr = cosine_lr(step, steps, opt_spec.lr0)
        if len(pairs) <= batch:
            idx = np.arange(len(pairs))
        else:
            idx = rng.choice(len(pairs), size=batch, replace=False)
        lr_batch, hr_batch = _batch_arrays(pairs, idx)
        x = Tensor((lr_batch - mean).astype(T.default_dtype()))
        target = (hr_batch - mean).astype(T.default_dtype())
        pred = net.forward(x, mode="train", rng=rng)
        loss = loss_fn(pred, target)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            dump = {
                "step": step,
                "lr": lr,
                "loss": loss_val,
                "batch_indices": [int(i) for i in idx],
            }
            raise TrainingDiverged(f"non-finite loss at step {step}: {dump}")
        grads = T.backward(loss, params)
        opt.step(grads, lr)
        if step % log_every == 0 or step == steps - 1:
            log.steps.append(step)
            log.lrs.append(lr)
            log.losses.append(loss_val)
            log.wall_ms.append((time.perf_counter() - t0) * 1e3)
    return log


def freeze(net: Network) -> Network:
    """Harden every shift weight in place and return the network.

    Offsets come from the logits alone (noise zero); repeated freezing is
    idempotent and the frozen forward matches the training-time hard path
    bitwise at the same offsets.
    """
    net.freeze()
    return net
