"""Analytic parameter and FLOPs accounting for model configs.

Conventions, fixed by matching the published totals for the dense x2
baseline of the largest model:

* one multiply-accumulate counts as one FLOP: a convolution producing an
  (h, w) map costs h * w * c_out * c_in * s^2;
* parameters include biases (c_out * c_in * s^2 + c_out);
* layers run at the working low resolution floor(hr / scale) until a pixel
  shuffle multiplies it; post-upsample layers count at their actual
  resolution;
* element-wise ops, concats and shuffles are free, matching how the
  reference totals were evidently produced;
* a ghost-converted layer keeps the intrinsic fraction of its cost and the
  shifts contribute zero FLOPs and zero inference parameters.

Parameters are counted for every layer in the config (multi-branch
upsamplers keep all branches in the checkpoint); FLOPs only for layers on
the executed path.
"""

from __future__ import annotations

from dataclasses import dataclass

from .models import (
    GHOST,
    ModelConfig,
    ghost_split,
    reachable_from_output,
    validate_config,
)


def conv_flops(h: int, w: int, c_out: int, c_in: int, ksize: int) -> int:
    """Cost of one same-padded stride-1 convolution at output size (h, w)."""
    return h * w * c_out * c_in * ksize * ksize


@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    flops: int
    height: int
    width: int
    note: str = ""


@dataclass
class CostReport:
    config_name: str
    scale: int
    ghost_ratio: float
    hr_size: tuple[int, int]
    layers: list[LayerCost]
    total_params: int
    total_flops: int

    def render(self) -> str:
        head = (
            f"# cost report: {self.config_name}  scale=x{self.scale}  "
            f"ghost_ratio={self.ghost_ratio}  hr={self.hr_size[0]}x{self.hr_size[1]}\n"
            f"# convention: 1 multiply-accumulate = 1 FLOP; params include biases\n"
        )
        rows = [f"{'layer':<24}{'kind':<14}{'res':<12}{'params':>12}{'flops':>16}  note"]
        for lc in self.layers:
            rows.append(
                f"{lc.name:<24}{lc.kind:<14}{f'{lc.height}x{lc.width}':<12}"
                f"{lc.params:>12}{lc.flops:>16}  {lc.note}"
            )
        rows.append(
            f"{'TOTAL':<24}{'':<14}{'':<12}{self.total_params:>12}{self.total_flops:>16}"
            f"  ({self.total_params / 1e6:.2f}M params, {self.total_flops / 1e9:.1f}G FLOPs)"
        )
        return head + "\n".join(rows) + "\n"

    def render_csv(self) -> str:
        rows = ["layer,kind,height,width,params,flops,note"]
        for lc in self.layers:
            rows.append(
                f"{lc.name},{lc.kind},{lc.height},{lc.width},{lc.params},{lc.flops},{lc.note}"
            )
        rows.append(f"TOTAL,,,,{self.total_params},{self.total_flops},")
        return "\n".join(rows) + "\n"


def count(config: ModelConfig, ghost_ratio: float = 0.0,
          hr_size: tuple[int, int] = (720, 1280)) -> CostReport:
    """Per-layer and total parameters / FLOPs at a stated HR output size."""
    validate_config(config)
    lr_h, lr_w = hr_size[0] // config.scale, hr_size[1] // config.scale
    reach = reachable_from_output(config)
    res = {"input": (lr_h, lr_w)}
    layers: list[LayerCost] = []
    for l in config.layers:
        h, w = res[l.inputs[0]]
        note = ""
        params = flops = 0
        if l.kind == "conv":
            is_ghost = l.annotation == GHOST and ghost_ratio > 0
            if is_ghost:
                n_int, n_ghost = ghost_split(l.c_out, ghost_ratio, l.name)
                note = f"{n_int}_conv+{n_ghost}_ghost"
            else:
                n_int = l.c_out
            params = n_int * l.c_in * l.ksize * l.ksize + n_int
            flops = conv_flops(h, w, n_int, l.c_in, l.ksize)
        elif l.kind == "pixel_shuffle":
            h, w = h * l.r, w * l.r
        if l.name not in reach:
            flops = 0
            note = (note + " off-path").strip()
        res[l.name] = (h, w)
        layers.append(LayerCost(l.name, l.kind, params, flops, h, w, note))
    return CostReport(
        config_name=config.name,
        scale=config.scale,
        ghost_ratio=ghost_ratio,
        hr_size=hr_size,
        layers=layers,
        total_params=sum(lc.params for lc in layers),
        total_flops=sum(lc.flops for lc in layers),
    )
