"""The encoder/decoder 3D network and its parameter registry.

Layout, reading a ``(1, B, H, W)`` cube down to per-pixel class scores:

* stem: conv(5,1,1)/stride(5,1,1) -> norm -> relu, compressing the spectral
  axis by five while widening to ``base_channels``;
* three down blocks, each conv(3,3,3)/(2,1,1) -> norm -> relu ->
  conv(1,3,3)/(1,2,2) -> norm -> relu -> dual separable residual unit(s) ->
  channel attention; channels double per block, extents halve (ceil);
* three up blocks, each resampling to the extents of the matching down
  block's input, concatenating with it, then conv(5,1,1) -> norm -> relu ->
  conv(3,3,3) -> norm -> relu; channels retrace 8x -> 4x -> 2x -> 1x;
* head: mean over the residual spectral axis, then a 1x1 conv to class
  logits of shape ``(num_classes, H, W)``.

Convolutions that feed a normalization layer carry no bias (the shift would
be absorbed); the attention context conv and the head conv do.  All weights
come from one caller-supplied generator so builds are reproducible.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import cspn, ops
from . import tensor as T
from .tensor import FormatError, ShapeError, Tensor

CHECKPOINT_MAGIC = b"FCSP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Static architecture knobs; every parameter count follows from these."""

    in_bands: int
    num_classes: int
    base_channels: int = 16
    dsr_per_stage: int = 1
    attention_enabled: bool = True
    cspn_steps: int = 24

    def __post_init__(self):
        if self.in_bands < 5:
            raise ShapeError(f"in_bands must be >= 5 (stem kernel), got {self.in_bands}")
        if self.num_classes < 1:
            raise ShapeError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.base_channels < 1:
            raise ShapeError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.dsr_per_stage < 0:
            raise ShapeError(f"dsr_per_stage must be >= 0, got {self.dsr_per_stage}")
        if self.cspn_steps < 0:
            raise ShapeError(f"cspn_steps must be >= 0, got {self.cspn_steps}")


@dataclass
class ParamEntry:
    tensor: Tensor
    kind: str  # conv_weight | bias | bn_scale | bn_shift


class ModelParams:
    """Ordered map from dotted layer path to learnable tensor."""

    def __init__(self):
        self._entries: Dict[str, ParamEntry] = {}

    def register(self, path: str, tensor: Tensor, kind: str) -> Tensor:
        if path in self._entries:
            raise ShapeError(f"duplicate parameter path {path!r}")
        for entry in self._entries.values():
            if entry.tensor is tensor:
                raise ShapeError(f"tensor for {path!r} already registered")
        self._entries[path] = ParamEntry(tensor, kind)
        return tensor

    def paths(self) -> List[str]:
        return list(self._entries)

    def get(self, path: str) -> Tensor:
        return self._entries[path].tensor

    def kind(self, path: str) -> str:
        return self._entries[path].kind

    def items(self):
        return [(p, e.tensor, e.kind) for p, e in self._entries.items()]

    def tensors(self) -> List[Tensor]:
        return [e.tensor for e in self._entries.values()]

    def conv_weights(self) -> List[Tensor]:
        return [e.tensor for e in self._entries.values() if e.kind == "conv_weight"]

    def total_count(self) -> int:
        return sum(e.tensor.size for e in self._entries.values())

    def load_array(self, path: str, arr: np.ndarray) -> None:
        if path not in self._entries:
            raise FormatError(f"checkpoint names unknown parameter {path!r}")
        t = self._entries[path].tensor
        if arr.shape != t.shape:
            raise FormatError(
                f"checkpoint tensor {path!r} has shape {arr.shape}, expected {t.shape}")
        t.data = np.asarray(arr, dtype=T.default_dtype(), order="C")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class _Conv:
    def __init__(self, params: ModelParams, path: str, cin: int, cout: int,
                 kernel, stride, rng, bias: bool):
        self.spec = ops.Conv3dSpec(kernel=kernel, stride=stride)
        fan_in = cin * int(np.prod(kernel))
        self.w = params.register(
            path + ".weights",
            T.kaiming_normal((cout, cin) + tuple(kernel), fan_in, rng,
                             requires_grad=True),
            "conv_weight")
        self.b = params.register(
            path + ".bias", T.zeros((cout,), requires_grad=True),
            "bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.w, self.b, self.spec)


class _Norm:
    def __init__(self, params: ModelParams, path: str, channels: int,
                 states: List[Tuple[str, ops.BatchNormState]]):
        self.scale = params.register(
            path + ".scale", T.full((channels,), 1.0, requires_grad=True), "bn_scale")
        self.shift = params.register(
            path + ".shift", T.zeros((channels,), requires_grad=True), "bn_shift")
        self.state = ops.BatchNormState(channels)
        states.append((path, self.state))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batchnorm(x, self.scale, self.shift, self.state, training)


class _DsrBranch:
    """conv -> norm -> relu -> conv -> norm -> relu with separable kernels."""

    def __init__(self, params, path, channels, kernels, rng, states):
        self.conv_a = _Conv(params, path + ".conv_a", channels, channels,
                            kernels[0], (1, 1, 1), rng, bias=False)
        self.norm_a = _Norm(params, path + ".norm_a", channels, states)
        self.conv_b = _Conv(params, path + ".conv_b", channels, channels,
                            kernels[1], (1, 1, 1), rng, bias=False)
        self.norm_b = _Norm(params, path + ".norm_b", channels, states)

    def __call__(self, x, training):
        t = T.relu(self.norm_a(self.conv_a(x), training))
        return T.relu(self.norm_b(self.conv_b(t), training))


class _DsrUnit:
    """Residual pair of separable branches: out = x + left(x) + right(x).

    The left branch convolves in-plane first then along the spectral axis;
    the right branch does the reverse.
    """

    SPATIAL = (1, 3, 3)
    SPECTRAL = (3, 1, 1)

    def __init__(self, params, path, channels, rng, states):
        self.left = _DsrBranch(params, path + ".left", channels,
                               (self.SPATIAL, self.SPECTRAL), rng, states)
        self.right = _DsrBranch(params, path + ".right", channels,
                                (self.SPECTRAL, self.SPATIAL), rng, states)

    def __call__(self, x, training):
        return T.add(x, T.add(self.left(x, training), self.right(x, training)))


class _Attention:
    """Per-channel gate: context conv, global pool, 1x1 conv, norm, gate."""

    def __init__(self, params, path, channels, rng, states):
        self.context = _Conv(params, path + ".context", channels, channels,
                             (3, 3, 3), (1, 1, 1), rng, bias=True)
        self.gate = _Conv(params, path + ".gate", channels, channels,
                          (1, 1, 1), (1, 1, 1), rng, bias=False)
        self.norm = _Norm(params, path + ".norm", channels, states)

    def __call__(self, x, training):
        # The pooled context is a single element per channel, so the norm's
        # statistics path always reduces to its shift parameter.  Inference
        # reads the shift directly: the running variance of a one-element
        # batch decays to zero and the running-stat form would divide by
        # nearly nothing, blowing the gate wide open.
        if training:
            w = ops.adaptive_avg_pool(self.context(x), (1, 1, 1))
            with warnings.catch_warnings():
                warnings.filterwarnings(
                    "ignore", message="batchnorm over a single element")
                w = self.norm(self.gate(w), True)
        else:
            w = T.reshape(self.norm.shift, (self.norm.shift.shape[0], 1, 1, 1))
        return T.mul(x, T.sigmoid(T.relu(w)))


class _DownBlock:
    def __init__(self, params, path, cin, cout, config, rng, states):
        self.conv_a = _Conv(params, path + ".conv_a", cin, cout,
                            (3, 3, 3), (2, 1, 1), rng, bias=False)
        self.norm_a = _Norm(params, path + ".norm_a", cout, states)
        self.conv_b = _Conv(params, path + ".conv_b", cout, cout,
                            (1, 3, 3), (1, 2, 2), rng, bias=False)
        self.norm_b = _Norm(params, path + ".norm_b", cout, states)
        self.dsr = [_DsrUnit(params, f"{path}.dsr{j + 1}", cout, rng, states)
                    for j in range(config.dsr_per_stage)]
        self.attention = (_Attention(params, path + ".attn", cout, rng, states)
                          if config.attention_enabled else None)

    def __call__(self, x, training):
        t = T.relu(self.norm_a(self.conv_a(x), training))
        t = T.relu(self.norm_b(self.conv_b(t), training))
        for unit in self.dsr:
            t = unit(t, training)
        if self.attention is not None:
            t = self.attention(t, training)
        return t

    def out_extents(self, extents):
        return self.conv_b.spec.out_extents(self.conv_a.spec.out_extents(extents))


class _UpBlock:
    def __init__(self, params, path, cin, cout, rng, states):
        self.conv_a = _Conv(params, path + ".conv_a", cin, cout,
                            (5, 1, 1), (1, 1, 1), rng, bias=False)
        self.norm_a = _Norm(params, path + ".norm_a", cout, states)
        self.conv_b = _Conv(params, path + ".conv_b", cout, cout,
                            (3, 3, 3), (1, 1, 1), rng, bias=False)
        self.norm_b = _Norm(params, path + ".norm_b", cout, states)

    def __call__(self, x, mirror, training):
        t = ops.trilinear_upsample(x, mirror.shape[1:])
        t = ops.concat_channels(t, mirror)
        t = T.relu(self.norm_a(self.conv_a(t), training))
        return T.relu(self.norm_b(self.conv_b(t), training))


# ---------------------------------------------------------------------------
# the assembled network
# ---------------------------------------------------------------------------

class FcspnModel:
    """Full network plus affinity branch, parameters registered by path."""

    MIN_SPATIAL = 8

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.params = ModelParams()
        self.states: List[Tuple[str, ops.BatchNormState]] = []
        b = config.base_channels

        self.stem_conv = _Conv(self.params, "stem.conv", 1, b,
                               (5, 1, 1), (5, 1, 1), rng, bias=False)
        self.stem_norm = _Norm(self.params, "stem.norm", b, self.states)

        self.downs = []
        c = b
        for i in range(3):
            self.downs.append(_DownBlock(self.params, f"down{i + 1}",
                                         c, 2 * c, config, rng, self.states))
            c *= 2
        # decoder channel plan: x carries 8b, 4b, 2b into the three up blocks,
        # each joined with the mirror of 4b, 2b, b channels
        self.ups = []
        for i in range(3):
            cmir = c // 2
            self.ups.append(_UpBlock(self.params, f"up{i + 1}",
                                     c + cmir, cmir, rng, self.states))
            c = cmir

        self.head_conv = _Conv(self.params, "head.conv", b, config.num_classes,
                               (1, 1, 1), (1, 1, 1), rng, bias=True)

        self.affinity = cspn.AffinityBranch(b, rng)
        for rel, t, kind in self.affinity.named_parameters():
            self.params.register(f"affinity.{rel}", t, kind)
        for rel, state in self.affinity.named_states():
            self.states.append((f"affinity.{rel}", state))

    # -- shape bookkeeping ---------------------------------------------------

    def shape_plan(self, height: int, width: int) -> List[Tuple[str, Tuple[int, ...]]]:
        """Extents of every stage for an input of the configured band count."""
        if height < self.MIN_SPATIAL or width < self.MIN_SPATIAL:
            raise ShapeError(
                f"spatial extents must be >= {self.MIN_SPATIAL}, got {height}x{width}")
        b = self.config.base_channels
        plan = [("input", (1, self.config.in_bands, height, width))]
        ext = self.stem_conv.spec.out_extents((self.config.in_bands, height, width))
        plan.append(("stem", (b,) + ext))
        mirrors = []
        ch = b
        for i, down in enumerate(self.downs):
            mirrors.append((ch,) + ext)
            ch *= 2
            ext = down.out_extents(ext)
            plan.append((f"down{i + 1}", (ch,) + ext))
        for i, mirror in enumerate(reversed(mirrors)):
            plan.append((f"up{i + 1}", mirror))
        plan.append(("head", (self.config.num_classes, height, width)))
        return plan

    def _as_input(self, x: Tensor) -> Tensor:
        if x.data.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.data.ndim != 4 or x.shape[0] != 1:
            raise ShapeError(f"input must be (1, B, H, W) or (B, H, W), got {x.shape}")
        if x.shape[1] != self.config.in_bands:
            raise ShapeError(
                f"model expects {self.config.in_bands} bands, got {x.shape[1]}")
        self.shape_plan(x.shape[2], x.shape[3])  # validates spatial extents
        return x

    # -- inference -----------------------------------------------------------

    def _run(self, x: Tensor, training: bool) -> Tuple[Tensor, Tensor]:
        x = self._as_input(x)
        t = T.relu(self.stem_norm(self.stem_conv(x), training))
        mirrors = []
        for down in self.downs:
            mirrors.append(t)
            t = down(t, training)
        for up, mirror in zip(self.ups, reversed(mirrors)):
            t = up(t, mirror, training)
        c, _, nh, nw = t.shape
        plane = T.reshape(T.reduce_mean(t, axes=(1,)), (c, 1, nh, nw))
        logits = T.reshape(self.head_conv(plane), (self.config.num_classes, nh, nw))
        return logits, t

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        """Class logits (num_classes, H, W) for one cube, no refinement."""
        return self._run(x, training)[0]

    def forward_refined(self, x: Tensor, steps: Optional[int] = None,
                        training: bool = False) -> Tuple[Tensor, Tensor]:
        """(refined, unrefined) logits; ``steps`` overrides the configured count."""
        logits, feats = self._run(x, training)
        raw = self.affinity.forward(feats, training)
        aff = cspn.normalize_affinity(raw)
        steps = self.config.cspn_steps if steps is None else steps
        return cspn.refine(logits, aff, cspn.PropagationConfig(steps=steps)), logits


def build(config: ModelConfig, rng: Optional[np.random.Generator] = None) -> FcspnModel:
    """Construct a model with freshly initialized parameters."""
    return FcspnModel(config, rng if rng is not None else np.random.default_rng(0))


# ---------------------------------------------------------------------------
# checkpoint file: "FCSP" header + TSR1 records
# ---------------------------------------------------------------------------
# layout, little-endian:
#   magic "FCSP" | u32 version | u32 in_bands | u32 num_classes
#   | u32 base_channels | u32 dsr_per_stage | u8 attention | u32 cspn_steps
#   | learnable tensors as TSR1 records, sorted by path
#   | per-norm running mean and variance as TSR1 records, sorted by path

_HEADER = "<4sIIIIIBI"


def save_checkpoint(model: FcspnModel, path) -> None:
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(struct.pack(_HEADER, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                             cfg.in_bands, cfg.num_classes, cfg.base_channels,
                             cfg.dsr_per_stage, int(cfg.attention_enabled),
                             cfg.cspn_steps))
        for p in sorted(model.params.paths()):
            T.write_tensor_record(fh, model.params.get(p).data)
        for _, state in sorted(model.states):
            T.write_tensor_record(fh, state.running_mean)
            T.write_tensor_record(fh, state.running_var)


def load_checkpoint(path) -> FcspnModel:
    with open(path, "rb") as fh:
        raw = fh.read(struct.calcsize(_HEADER))
        if len(raw) != struct.calcsize(_HEADER):
            raise FormatError("truncated checkpoint header")
        magic, version, bands, classes, base, dsr, attn, steps = struct.unpack(_HEADER, raw)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        config = ModelConfig(in_bands=bands, num_classes=classes,
                             base_channels=base, dsr_per_stage=dsr,
                             attention_enabled=bool(attn), cspn_steps=steps)
        model = build(config)
        for p in sorted(model.params.paths()):
            model.params.load_array(p, T.read_tensor_record(fh))
        for _, state in sorted(model.states):
            mean = T.read_tensor_record(fh)
            var = T.read_tensor_record(fh)
            if mean.shape != state.running_mean.shape:
                raise FormatError("checkpoint running statistics have wrong shape")
            state.running_mean = mean.astype(T.default_dtype())
            state.running_var = var.astype(T.default_dtype())
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after checkpoint payload")
    return model
