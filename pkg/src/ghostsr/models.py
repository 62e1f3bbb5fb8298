"""Declarative SISR architectures and ghost conversion.

A model is an ordered list of layer definitions forming a DAG (each layer
names its inputs among earlier layers).  Presets cover EDSR, RDN, CARN and
IMDN shaped networks plus scaled-down toy variants; the same config drives
the analytic cost counter, the executable network and the conversion of a
pre-trained checkpoint into its ghost version.

Conversion notes: the first conv, the conv producing the output, and
point-wise (1x1) convs stay dense.  CARN's cascade 1x1 convs are the one
exception; its published compression figures are only reproducible when
they are converted too, so those layers carry an explicit opt-in flag.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .shift import ConvSpec, GhostLayerSpec, ShiftWeight
from .tensor import Tensor
from . import shift as S
from . import clustering as C


class ConfigError(ValueError):
    """A model config failed validation."""


DIV2K_RGB_MEAN = (0.4488, 0.4371, 0.4040)

CONV_ONLY = "conv_only"
GHOST = "ghost"


@dataclass
class LayerDef:
    name: str
    kind: str  # conv | relu | add | concat | slice | pixel_shuffle | scalar_mul
    inputs: tuple[str, ...]
    c_in: int = 0
    c_out: int = 0
    ksize: int = 0
    annotation: str = CONV_ONLY
    pointwise_ghost_ok: bool = False
    r: int = 0          # pixel_shuffle upscale
    begin: int = 0      # slice bounds
    end: int = 0
    factor: float = 1.0  # scalar_mul


@dataclass
class ModelConfig:
    name: str
    scale: int
    layers: list[LayerDef]
    output: str
    rgb_mean: tuple[float, float, float] = DIV2K_RGB_MEAN

    def conv_layers(self):
        return [l for l in self.layers if l.kind == "conv"]

    def layer(self, name: str) -> LayerDef:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def digest(self) -> str:
        return hashlib.sha256(render_config(self).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# validation


def _channel_walk(config: ModelConfig):
    """Propagate channel counts and resolution multipliers through the DAG.

    Returns (channels, res_mult) dicts keyed by layer name.  Raises
    ConfigError on any inconsistency, naming the offending layer.
    """
    channels = {"input": 3}
    mult = {"input": 1}
    seen = {"input"}
    for l in config.layers:
        if l.name in seen:
            raise ConfigError(f"duplicate layer name {l.name!r}")
        for inp in l.inputs:
            if inp not in seen:
                raise ConfigError(f"layer {l.name!r} references unknown input {inp!r}")
        in_ch = [channels[i] for i in l.inputs]
        in_mult = [mult[i] for i in l.inputs]
        if len(set(in_mult)) > 1:
            raise ConfigError(f"layer {l.name!r} mixes resolutions {in_mult}")
        m = in_mult[0]
        if l.kind == "conv":
            if len(l.inputs) != 1:
                raise ConfigError(f"conv {l.name!r} takes exactly one input")
            if in_ch[0] != l.c_in:
                raise ConfigError(
                    f"conv {l.name!r} declares c_in={l.c_in} but input has {in_ch[0]} channels"
                )
            if l.ksize % 2 != 1:
                raise ConfigError(f"conv {l.name!r} kernel size {l.ksize} must be odd")
            ch = l.c_out
        elif l.kind in ("relu",):
            ch = in_ch[0]
        elif l.kind == "scalar_mul":
            ch = in_ch[0]
        elif l.kind == "add":
            if len(l.inputs) != 2 or in_ch[0] != in_ch[1]:
                raise ConfigError(f"add {l.name!r} needs two equal-channel inputs, got {in_ch}")
            ch = in_ch[0]
        elif l.kind == "concat":
            if len(l.inputs) < 2:
                raise ConfigError(f"concat {l.name!r} needs >= 2 inputs")
            ch = sum(in_ch)
        elif l.kind == "slice":
            if not (0 <= l.begin < l.end <= in_ch[0]):
                raise ConfigError(
                    f"slice {l.name!r} range [{l.begin}, {l.end}) invalid for {in_ch[0]} channels"
                )
            ch = l.end - l.begin
        elif l.kind == "pixel_shuffle":
            if l.r < 1 or in_ch[0] % (l.r * l.r) != 0:
                raise ConfigError(
                    f"pixel_shuffle {l.name!r}: {in_ch[0]} channels not divisible by {l.r}^2"
                )
            ch = in_ch[0] // (l.r * l.r)
            m = m * l.r
        else:
            raise ConfigError(f"layer {l.name!r} has unknown kind {l.kind!r}")
        channels[l.name] = ch
        mult[l.name] = m
        seen.add(l.name)
    if config.output not in seen:
        raise ConfigError(f"output layer {config.output!r} not defined")
    return channels, mult


def reachable_from_output(config: ModelConfig) -> set[str]:
    deps = {l.name: l.inputs for l in config.layers}
    frontier = [config.output]
    seen = set()
    while frontier:
        name = frontier.pop()
        if name in seen or name == "input":
            continue
        seen.add(name)
        frontier.extend(deps[name])
    return seen


def validate_config(config: ModelConfig) -> None:
    """Structural checks plus the conversion safety rules.

    Ghost annotations are rejected on the first conv, on the conv that
    produces the network output, and on point-wise (1x1) convs unless the
    layer explicitly opts in.
    """
    if config.scale not in (1, 2, 3, 4):
        raise ConfigError(f"unsupported scale {config.scale}")
    _channel_walk(config)
    reach = reachable_from_output(config)
    convs = [l for l in config.layers if l.kind == "conv" and l.name in reach]
    if not convs:
        raise ConfigError("config has no convolution on the output path")
    first = convs[0]
    last = next(
        l for l in reversed(config.layers) if l.kind == "conv" and l.name in reach
    )
    for l in config.layers:
        if l.kind != "conv" or l.annotation != GHOST:
            continue
        if l.name == first.name:
            raise ConfigError(f"first layer {l.name!r} cannot be ghost-annotated")
        if l.name == last.name:
            raise ConfigError(f"last layer {l.name!r} cannot be ghost-annotated")
        if l.ksize == 1 and not l.pointwise_ghost_ok:
            raise ConfigError(
                f"point-wise layer {l.name!r} cannot be ghost-annotated"
            )


def ghost_split(c_out: int, ghost_ratio: float, layer_name: str = "") -> tuple[int, int]:
    """(intrinsic, ghost) channel counts; both must be whole numbers."""
    n_ghost = ghost_ratio * c_out
    if abs(n_ghost - round(n_ghost)) > 1e-9:
        raise ConfigError(
            f"ghost ratio {ghost_ratio} does not split {c_out} channels of "
            f"{layer_name!r} into whole counts"
        )
    n_ghost = int(round(n_ghost))
    return c_out - n_ghost, n_ghost


# ---------------------------------------------------------------------------
# config text format: one layer per line


CONFIG_HEADER = "# ghostsr-config v1"


def render_config(config: ModelConfig) -> str:
    lines = [
        CONFIG_HEADER,
        f"# name: {config.name}",
        f"# scale: {config.scale}",
        "# rgb_mean: " + " ".join(f"{v:.4f}" for v in config.rgb_mean),
        f"# output: {config.output}",
    ]
    for l in config.layers:
        if l.kind == "conv":
            params = f"{l.c_in} {l.c_out} {l.ksize}"
            ann = l.annotation + ("!" if l.pointwise_ghost_ok else "")
        elif l.kind == "pixel_shuffle":
            params, ann = str(l.r), "-"
        elif l.kind == "slice":
            params, ann = f"{l.begin} {l.end}", "-"
        elif l.kind == "scalar_mul":
            params, ann = repr(l.factor), "-"
        else:
            params, ann = "-", "-"
        lines.append(
            f"{l.name} | {l.kind} | {params} | {ann} | {' '.join(l.inputs)}"
        )
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> ModelConfig:
    name, scale, rgb_mean, output = "model", 2, DIV2K_RGB_MEAN, None
    layers: list[LayerDef] = []
    prev = "input"
    lines = text.splitlines()
    if not lines or lines[0].strip() != CONFIG_HEADER:
        raise ConfigError("not a ghostsr config (missing header line)")
    for raw in lines[1:]:
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            key, _, val = body.partition(":")
            key, val = key.strip(), val.strip()
            if key == "name":
                name = val
            elif key == "scale":
                scale = int(val)
            elif key == "rgb_mean":
                rgb_mean = tuple(float(v) for v in val.split())
            elif key == "output":
                output = val
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 5:
            raise ConfigError(f"bad config line (need 5 fields): {line!r}")
        lname, kind, params, ann, inputs = parts
        inp = tuple(inputs.split()) if inputs and inputs != "-" else (prev,)
        layer = LayerDef(name=lname, kind=kind, inputs=inp)
        if kind == "conv":
            ci, co, k = (int(v) for v in params.split())
            pw_ok = ann.endswith("!")
            ann_clean = ann.rstrip("!")
            if ann_clean not in (CONV_ONLY, GHOST):
                raise ConfigError(f"layer {lname!r}: unknown annotation {ann!r}")
            layer = replace(
                layer, c_in=ci, c_out=co, ksize=k,
                annotation=ann_clean, pointwise_ghost_ok=pw_ok,
            )
        elif kind == "pixel_shuffle":
            layer = replace(layer, r=int(params))
        elif kind == "slice":
            b, e = (int(v) for v in params.split())
            layer = replace(layer, begin=b, end=e)
        elif kind == "scalar_mul":
            layer = replace(layer, factor=float(params))
        layers.append(layer)
        prev = lname
    if output is None:
        output = layers[-1].name
    cfg = ModelConfig(name=name, scale=scale, layers=layers, output=output,
                      rgb_mean=rgb_mean)
    validate_config(cfg)
    return cfg


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(config: ModelConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_config(config))


# ---------------------------------------------------------------------------
# presets


def _edsr(scale, n_blocks, n_feats, res_scale, name) -> ModelConfig:
    L = []
    L.append(LayerDef("head", "conv", ("input",), 3, n_feats, 3))
    prev = "head"
    for b in range(n_blocks):
        p = f"b{b}"
        L.append(LayerDef(f"{p}.conv0", "conv", (prev,), n_feats, n_feats, 3, GHOST))
        L.append(LayerDef(f"{p}.relu", "relu", (f"{p}.conv0",)))
        L.append(LayerDef(f"{p}.conv1", "conv", (f"{p}.relu",), n_feats, n_feats, 3, GHOST))
        body_out = f"{p}.conv1"
        if res_scale != 1.0:
            L.append(LayerDef(f"{p}.scale", "scalar_mul", (body_out,), factor=res_scale))
            body_out = f"{p}.scale"
        L.append(LayerDef(f"{p}.add", "add", (body_out, prev)))
        prev = f"{p}.add"
    L.append(LayerDef("body.conv", "conv", (prev,), n_feats, n_feats, 3))
    L.append(LayerDef("body.add", "add", ("body.conv", "head")))
    prev = "body.add"
    stages = [scale] if scale in (2, 3) else [2, 2]
    for i, r in enumerate(stages):
        L.append(LayerDef(f"up{i}.conv", "conv", (prev,), n_feats, n_feats * r * r, 3))
        L.append(LayerDef(f"up{i}.ps", "pixel_shuffle", (f"up{i}.conv",), r=r))
        prev = f"up{i}.ps"
    L.append(LayerDef("tail", "conv", (prev,), n_feats, 3, 3))
    return ModelConfig(name=name, scale=scale, layers=L, output="tail")


def _rdn(scale, n_blocks=16, n_dense=8, feats=64, name="rdn") -> ModelConfig:
    L = []
    L.append(LayerDef("sfe1", "conv", ("input",), 3, feats, 3))
    L.append(LayerDef("sfe2", "conv", ("sfe1",), feats, feats, 3, GHOST))
    prev = "sfe2"
    block_outs = []
    for b in range(n_blocks):
        p = f"rdb{b}"
        cat = prev
        width = feats
        for i in range(n_dense):
            L.append(LayerDef(f"{p}.conv{i}", "conv", (cat,), width, feats, 3, GHOST))
            L.append(LayerDef(f"{p}.relu{i}", "relu", (f"{p}.conv{i}",)))
            if i < n_dense - 1:
                L.append(LayerDef(f"{p}.cat{i}", "concat", (cat, f"{p}.relu{i}")))
                cat = f"{p}.cat{i}"
                width += feats
        prev = f"{p}.relu{n_dense - 1}"
        block_outs.append(prev)
    cat = block_outs[0]
    for i, other in enumerate(block_outs[1:]):
        L.append(LayerDef(f"gff.cat{i}", "concat", (cat, other)))
        cat = f"gff.cat{i}"
    L.append(LayerDef("gff.conv0", "conv", (cat,), feats * n_blocks, feats, 1))
    L.append(LayerDef("gff.conv1", "conv", ("gff.conv0",), feats, feats, 3))
    L.append(LayerDef("gff.add", "add", ("gff.conv1", "sfe1")))
    prev = "gff.add"
    stages = [scale] if scale in (2, 3) else [2, 2]
    for i, r in enumerate(stages):
        L.append(LayerDef(f"up{i}.conv", "conv", (prev,), feats, feats * r * r, 3))
        L.append(LayerDef(f"up{i}.ps", "pixel_shuffle", (f"up{i}.conv",), r=r))
        prev = f"up{i}.ps"
    L.append(LayerDef("up.conv1", "conv", (prev,), feats, 3, 3))
    return ModelConfig(name=name, scale=scale, layers=L, output="up.conv1")


def _carn_res_block(L, prefix, x, feats):
    L.append(LayerDef(f"{prefix}.conv_a", "conv", (x,), feats, feats, 3, GHOST))
    L.append(LayerDef(f"{prefix}.relu_a", "relu", (f"{prefix}.conv_a",)))
    L.append(LayerDef(f"{prefix}.conv_b", "conv", (f"{prefix}.relu_a",), feats, feats, 3, GHOST))
    L.append(LayerDef(f"{prefix}.add", "add", (f"{prefix}.conv_b", x)))
    L.append(LayerDef(f"{prefix}.relu", "relu", (f"{prefix}.add",)))
    return f"{prefix}.relu"


def _carn_cascade(L, prefix, x, feats, block_fn, ghost_pointwise):
    """Cascading unit shared by CARN blocks and the CARN body."""
    cat = x
    cur = x
    width = feats
    for j in range(3):
        b_out = block_fn(L, f"{prefix}.b{j + 1}", cur)
        L.append(LayerDef(f"{prefix}.cat{j + 1}", "concat", (cat, b_out)))
        cat = f"{prefix}.cat{j + 1}"
        width += feats
        ann = GHOST if ghost_pointwise else CONV_ONLY
        L.append(
            LayerDef(
                f"{prefix}.c{j + 1}", "conv", (cat,), width, feats, 1,
                annotation=ann, pointwise_ghost_ok=ghost_pointwise,
            )
        )
        L.append(LayerDef(f"{prefix}.crelu{j + 1}", "relu", (f"{prefix}.c{j + 1}",)))
        cur = f"{prefix}.crelu{j + 1}"
    return cur


def _carn(scale, feats=64, name="carn", ghost_pointwise=True) -> ModelConfig:
    """Cascading residual network with all three upsample branches present.

    Parameters count every branch (the published totals assume the
    multi-scale variant); only the branch matching ``scale`` is executed.
    The cascade 1x1 convs are ghost-converted, matching the published
    compression arithmetic.
    """
    L = [LayerDef("conv_in", "conv", ("input",), 3, feats, 3)]

    def res_block(Ls, prefix, x):
        return _carn_res_block(Ls, prefix, x, feats)

    def cascading_block(Ls, prefix, x):
        return _carn_cascade(Ls, prefix, x, feats, res_block, ghost_pointwise)

    body_out = _carn_cascade(L, "body", "conv_in", feats, cascading_block, ghost_pointwise)

    branches = {}
    for s, stages in ((2, [2]), (3, [3]), (4, [2, 2])):
        prev = body_out
        for i, r in enumerate(stages):
            cname = f"up{s}.conv{i}"
            L.append(LayerDef(cname, "conv", (prev,), feats, feats * r * r, 3))
            L.append(LayerDef(f"up{s}.relu{i}", "relu", (cname,)))
            L.append(LayerDef(f"up{s}.ps{i}", "pixel_shuffle", (f"up{s}.relu{i}",), r=r))
            prev = f"up{s}.ps{i}"
        branches[s] = prev
    L.append(LayerDef("conv_out", "conv", (branches[scale],), feats, 3, 3))
    return ModelConfig(name=name, scale=scale, layers=L, output="conv_out")


def _imdn(scale, feats=64, n_modules=6, distill=16, name="imdn") -> ModelConfig:
    refine = feats - distill
    L = [LayerDef("conv1", "conv", ("input",), 3, feats, 3)]
    prev = "conv1"
    module_outs = []
    for m in range(n_modules):
        p = f"m{m}"
        x = prev
        distilled = []
        cur = x
        for i, (ci, co) in enumerate(
            [(feats, feats), (refine, feats), (refine, feats)]
        ):
            L.append(LayerDef(f"{p}.c{i + 1}", "conv", (cur,), ci, co, 3, GHOST))
            L.append(LayerDef(f"{p}.relu{i + 1}", "relu", (f"{p}.c{i + 1}",)))
            L.append(
                LayerDef(f"{p}.d{i + 1}", "slice", (f"{p}.relu{i + 1}",), begin=0, end=distill)
            )
            L.append(
                LayerDef(f"{p}.r{i + 1}", "slice", (f"{p}.relu{i + 1}",), begin=distill, end=feats)
            )
            distilled.append(f"{p}.d{i + 1}")
            cur = f"{p}.r{i + 1}"
        L.append(LayerDef(f"{p}.c4", "conv", (cur,), refine, distill, 3, GHOST))
        L.append(LayerDef(f"{p}.relu4", "relu", (f"{p}.c4",)))
        cat = distilled[0]
        for i, other in enumerate(distilled[1:] + [f"{p}.relu4"]):
            L.append(LayerDef(f"{p}.cat{i}", "concat", (cat, other)))
            cat = f"{p}.cat{i}"
        L.append(LayerDef(f"{p}.c5", "conv", (cat,), feats, feats, 1))
        L.append(LayerDef(f"{p}.add", "add", (f"{p}.c5", x)))
        prev = f"{p}.add"
        module_outs.append(prev)
    cat = module_outs[0]
    for i, other in enumerate(module_outs[1:]):
        L.append(LayerDef(f"cat{i}", "concat", (cat, other)))
        cat = f"cat{i}"
    L.append(LayerDef("c", "conv", (cat,), feats * n_modules, feats, 1))
    L.append(LayerDef("crelu", "relu", ("c",)))
    L.append(LayerDef("conv2", "conv", ("crelu",), feats, feats, 3))
    L.append(LayerDef("gadd", "add", ("conv2", "conv1")))
    L.append(
        LayerDef("upsampler", "conv", ("gadd",), feats, 3 * scale * scale, 3)
    )
    L.append(LayerDef("ps", "pixel_shuffle", ("upsampler",), r=scale))
    return ModelConfig(name=name, scale=scale, layers=L, output="ps")


def _preset(name: str) -> ModelConfig:
    if name.startswith("edsr_x"):
        return _edsr(int(name[-1]), 32, 256, 0.1, name)
    if name.startswith("toy_edsr_x"):
        return _edsr(int(name[-1]), 4, 16, 0.1, name)
    if name.startswith("rdn_x"):
        return _rdn(int(name[-1]), name=name)
    if name.startswith("carn_x"):
        return _carn(int(name[-1]), name=name)
    if name.startswith("toy_carn_x"):
        return _carn(int(name[-1]), feats=16, name=name)
    if name.startswith("imdn_x"):
        return _imdn(int(name[-1]), name=name)
    raise ConfigError(f"unknown preset {name!r}")


PRESETS = tuple(
    f"{fam}_x{s}"
    for fam in ("edsr", "rdn", "carn", "imdn", "toy_edsr", "toy_carn")
    for s in (2, 3, 4)
)


def preset(name: str) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    cfg = _preset(name)
    validate_config(cfg)
    return cfg


def resolve_config(name_or_path: str) -> ModelConfig:
    """Accept either a preset name or a path to a config file."""
    import os

    if name_or_path in PRESETS:
        return preset(name_or_path)
    if os.path.exists(name_or_path):
        return load_config(name_or_path)
    raise ConfigError(
        f"unknown preset or missing config file {name_or_path!r}; "
        f"presets: {', '.join(PRESETS)}"
    )


# ---------------------------------------------------------------------------
# executable network


class _ConvState:
    """Weights and (optionally) ghost wiring for one conv layer."""

    __slots__ = ("layer", "weight", "bias", "spec", "output_order")

    def __init__(self, layer: LayerDef):
        self.layer = layer
        self.weight: Tensor | None = None
        self.bias: Tensor | None = None
        self.spec: GhostLayerSpec | None = None
        self.output_order: np.ndarray | None = None

    @property
    def is_ghost(self) -> bool:
        return self.spec is not None and self.spec.n_ghost > 0


class Network:
    """Executable SISR network built from a ModelConfig.

    ``ghost_ratio`` > 0 turns every ghost-annotated conv into a ghost layer
    (intrinsic conv + per-channel learnable shifts).  Construction only
    shapes the network; call ``init_random`` or ``load_state_dict`` before
    running it.
    """

    def __init__(self, config: ModelConfig, ghost_ratio: float = 0.0,
                 max_offset: int = 1, temperature: float = 1.0):
        validate_config(config)
        self.config = config
        self.ghost_ratio = float(ghost_ratio)
        self.max_offset = int(max_offset)
        self.temperature = float(temperature)
        self.states: dict[str, _ConvState] = {}
        self._exec: list[LayerDef] = [
            l for l in config.layers if l.name in reachable_from_output(config)
        ]
        for l in config.layers:
            if l.kind != "conv":
                continue
            st = _ConvState(l)
            if l.annotation == GHOST and self.ghost_ratio > 0:
                n_int, n_ghost = ghost_split(l.c_out, self.ghost_ratio, l.name)
                plan = C.scratch_assignment(l.c_out, self.ghost_ratio)
                st.spec = GhostLayerSpec(
                    conv=ConvSpec(l.c_in, n_int, l.ksize),
                    ghost_ratio=self.ghost_ratio,
                    assignment=plan.assignment,
                    shifts=[
                        ShiftWeight(self.max_offset, self.temperature)
                        for _ in range(n_ghost)
                    ],
                )
                st.output_order = plan.inverse_permutation()
            self.states[l.name] = st

    # -- parameter management ------------------------------------------------

    def init_random(self, rng: np.random.Generator) -> None:
        """Kaiming-uniform (fan-in) conv weights, zero biases, zero shift logits."""
        for l in self.config.layers:
            if l.kind != "conv":
                continue
            st = self.states[l.name]
            c_out = st.spec.conv.c_out if st.spec is not None else l.c_out
            fan_in = l.c_in * l.ksize * l.ksize
            bound = np.sqrt(6.0 / fan_in)
            st.weight = T.parameter(
                rng.uniform(-bound, bound, size=(c_out, l.c_in, l.ksize, l.ksize)),
                name=f"{l.name}.weight",
            )
            st.bias = T.parameter(np.zeros(c_out), name=f"{l.name}.bias")
            if st.spec is not None:
                for sw in st.spec.shifts:
                    sw.logits = T.parameter(np.zeros_like(sw.logits.data))

    def parameters(self) -> list[Tensor]:
        params = []
        for l in self.config.layers:
            if l.kind != "conv":
                continue
            st = self.states[l.name]
            params.append(st.weight)
            params.append(st.bias)
            if st.spec is not None:
                for sw in st.spec.shifts:
                    if sw.hardened is None:
                        params.append(sw.logits)
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for l in self.config.layers:
            if l.kind != "conv":
                continue
            st = self.states[l.name]
            out[f"{l.name}.weight"] = st.weight.data
            out[f"{l.name}.bias"] = st.bias.data
            if st.spec is None:
                continue
            out[f"{l.name}.ghost_src"] = np.asarray(
                st.spec.source_indices(), dtype=np.int32
            )
            if st.output_order is not None and not np.array_equal(
                st.output_order, np.arange(l.c_out)
            ):
                out[f"{l.name}.output_order"] = st.output_order.astype(np.int32)
            hardened = all(sw.hardened is not None for sw in st.spec.shifts)
            if hardened:
                out[f"{l.name}.shift_offsets"] = st.spec.hardened_offsets().astype(np.int8)
            else:
                out[f"{l.name}.shift_logits"] = np.stack(
                    [sw.logits.data for sw in st.spec.shifts]
                )
        return out

    def meta(self) -> dict:
        return {
            "config": self.config.name,
            "config_hash": self.config.digest(),
            "scale": self.config.scale,
            "ghost_ratio": self.ghost_ratio,
            "max_offset": self.max_offset,
            "temperature": self.temperature,
        }

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        for l in self.config.layers:
            if l.kind != "conv":
                continue
            st = self.states[l.name]
            for key in (f"{l.name}.weight", f"{l.name}.bias"):
                if key not in tensors:
                    raise KeyError(f"checkpoint is missing tensor {key!r}")
            st.weight = T.parameter(tensors[f"{l.name}.weight"], name=f"{l.name}.weight")
            st.bias = T.parameter(tensors[f"{l.name}.bias"], name=f"{l.name}.bias")
            exp_out = st.spec.conv.c_out if st.spec is not None else l.c_out
            if st.weight.data.shape != (exp_out, l.c_in, l.ksize, l.ksize):
                raise ConfigError(
                    f"{l.name}.weight shape {st.weight.data.shape} does not match "
                    f"({exp_out}, {l.c_in}, {l.ksize}, {l.ksize})"
                )
            if st.spec is None:
                continue
            src_key = f"{l.name}.ghost_src"
            if src_key in tensors:
                src = tensors[src_key].astype(int)
                n_int = st.spec.conv.c_out
                st.spec.assignment = {n_int + j: int(s) for j, s in enumerate(src)}
            order_key = f"{l.name}.output_order"
            if order_key in tensors:
                st.output_order = tensors[order_key].astype(int)
            off_key = f"{l.name}.shift_offsets"
            logit_key = f"{l.name}.shift_logits"
            if off_key in tensors:
                offs = tensors[off_key].astype(int)
                for sw, (dy, dx) in zip(st.spec.shifts, offs):
                    sw.hardened = (int(dy), int(dx))
            elif logit_key in tensors:
                stack = tensors[logit_key]
                for j, sw in enumerate(st.spec.shifts):
                    sw.logits = T.parameter(stack[j])
                    sw.hardened = None
            else:
                raise KeyError(
                    f"checkpoint has neither {off_key!r} nor {logit_key!r}"
                )

    # -- execution -------------------------------------------------------------

    def forward(self, x, mode: str = "inference",
                rng: np.random.Generator | None = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        values = {"input": x}
        for l in self._exec:
            ins = [values[i] for i in l.inputs]
            if l.kind == "conv":
                st = self.states[l.name]
                if st.weight is None:
                    raise RuntimeError(
                        f"layer {l.name!r} has no weights; call init_random or "
                        f"load_state_dict first"
                    )
                if st.spec is not None:
                    out = S.ghost_layer_forward(
                        ins[0], st.spec, st.weight, st.bias,
                        mode=mode, rng=rng, output_order=st.output_order,
                    )
                else:
                    out = T.conv2d(ins[0], st.weight, st.bias)
            elif l.kind == "relu":
                out = T.relu(ins[0])
            elif l.kind == "add":
                out = T.add(ins[0], ins[1])
            elif l.kind == "concat":
                out = ins[0]
                for other in ins[1:]:
                    out = T.concat_channels(out, other)
            elif l.kind == "slice":
                out = T.slice_channels(ins[0], l.begin, l.end)
            elif l.kind == "pixel_shuffle":
                out = T.pixel_shuffle(ins[0], l.r)
            elif l.kind == "scalar_mul":
                out = T.scalar_mul(ins[0], l.factor)
            else:  # pragma: no cover - validate_config rejects unknown kinds
                raise ConfigError(f"unknown kind {l.kind!r}")
            values[l.name] = out
        return values[self.config.output]

    def freeze(self) -> None:
        """Harden every shift weight from its logits (noise treated as zero)."""
        for st in self.states.values():
            if st.spec is not None:
                for sw in st.spec.shifts:
                    sw.freeze()


# ---------------------------------------------------------------------------
# conversion of a pre-trained dense checkpoint


def convert_to_ghost(
    config: ModelConfig,
    pretrained: dict[str, np.ndarray],
    ghost_ratio: float,
    plans: dict[str, C.LayerPlan] | None = None,
    max_offset: int = 1,
    temperature: float = 1.0,
) -> Network:
    """Build a ghost network initialized from a dense pre-trained model.

    With a clustering plan, each ghost layer keeps the pre-trained filters
    at the plan's intrinsic indices and wires every ghost channel to its
    cluster keeper; the layer then restores the original channel order so
    the rest of the graph is untouched.  Without a plan, channels keep
    their positions and ghosts are wired by order.  Dense layers are copied
    verbatim.
    """
    validate_config(config)
    net = Network(config, ghost_ratio, max_offset=max_offset, temperature=temperature)
    for l in config.layers:
        if l.kind != "conv":
            continue
        st = net.states[l.name]
        wkey, bkey = f"{l.name}.weight", f"{l.name}.bias"
        if wkey not in pretrained:
            raise KeyError(f"pre-trained checkpoint is missing {wkey!r}")
        w = pretrained[wkey]
        b = pretrained.get(bkey)
        if w.shape != (l.c_out, l.c_in, l.ksize, l.ksize):
            raise ConfigError(
                f"{wkey} shape {w.shape} does not match "
                f"({l.c_out}, {l.c_in}, {l.ksize}, {l.ksize})"
            )
        if b is None:
            b = np.zeros(l.c_out, dtype=w.dtype)
        if st.spec is None:
            st.weight = T.parameter(w, name=wkey)
            st.bias = T.parameter(b, name=bkey)
            continue
        if plans is not None:
            if l.name not in plans:
                raise KeyError(f"conversion plan is missing layer {l.name!r}")
            plan = plans[l.name]
            if plan.c_out != l.c_out or len(plan.intrinsic) != st.spec.conv.c_out:
                raise ConfigError(
                    f"plan for {l.name!r} does not match the config layer shape"
                )
        else:
            plan = C.scratch_assignment(l.c_out, ghost_ratio)
        idx = np.asarray(plan.intrinsic, dtype=int)
        st.weight = T.parameter(w[idx], name=wkey)
        st.bias = T.parameter(b[idx], name=bkey)
        st.spec.assignment = dict(plan.assignment)
        st.output_order = plan.inverse_permutation()
        for sw in st.spec.shifts:
            sw.logits = T.parameter(np.zeros_like(sw.logits.data))
            sw.hardened = None
    return net


# ---------------------------------------------------------------------------
# whole-image inference


def forward_sr(net: Network, lr_image: np.ndarray) -> np.ndarray:
    """Map an RGB image in [0, 1] (3, h, w) to its upscaled reconstruction.

    The dataset mean is subtracted at entry and added back at exit; the
    result is clamped to [0, 1] at the very end only.
    """
    img = np.asarray(lr_image)
    squeeze = img.ndim == 3
    if squeeze:
        img = img[None]
    if img.ndim != 4 or img.shape[1] != 3:
        raise ValueError(f"expected a 3-channel image, got shape {img.shape}")
    mean = np.asarray(net.config.rgb_mean).reshape(1, 3, 1, 1)
    x = (img - mean).astype(T.default_dtype())
    y = net.forward(Tensor(x), mode="inference").data
    y = y + mean
    y = np.clip(y, 0.0, 1.0)
    return y[0] if squeeze else y
