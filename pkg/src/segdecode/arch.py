"""Encoder-decoder networks: the shared encoder and the eight decoder variants.

All variants share the encoder ``[conv -> BN -> ReLU] x convs -> maxpool`` per
stage. They differ only in how resolution is restored:

* SegNet family: unpool with the stored argmax codes, then conv -> BN
  (no bias, no ReLU). ``SINGLE_CHANNEL_DECODER`` uses per-channel filters,
  ``ENCODER_ADDITION`` adds the pooled encoder map after each decoder.
* FCN family: 1x1 reduction of encoder maps to K channels, 8x8 stride-2
  transposed convolution initialised bilinearly, then addition of the
  (reduced) pooled encoder map of matching resolution.
* ``BILINEAR_INTERPOLATION``: reduction of the deepest map to K channels and
  fixed bilinear upsampling.

Every variant ends with a 1x1 classifier (with bias) to K channels.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ops import BatchNormState, ConvParams
from .tensor import Tensor, add, as_tensor, no_grad

DECONV_KERNEL = 8
DECONV_STRIDE = 2
DECONV_PAD = 3


class VariantKind(enum.Enum):
    SEGNET_BASIC = "segnet-basic"
    SEGNET_BASIC_SINGLE_CHANNEL_DECODER = "segnet-basic-single-channel-decoder"
    SEGNET_BASIC_ENCODER_ADDITION = "segnet-basic-encoder-addition"
    FCN_BASIC = "fcn-basic"
    FCN_BASIC_NO_ADDITION = "fcn-basic-no-addition"
    FCN_BASIC_NO_DIM_REDUCTION = "fcn-basic-no-dim-reduction"
    FCN_BASIC_NO_ADDITION_NO_DIM_REDUCTION = "fcn-basic-no-addition-no-dim-reduction"
    BILINEAR_INTERPOLATION = "bilinear-interpolation"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == key or kind.name.lower().replace("_", "-") == key:
                return kind
        raise ValueError(f"unknown variant {name!r}; choose from {', '.join(k.value for k in cls)}")

    @property
    def code(self):
        return list(VariantKind).index(self)

    @classmethod
    def from_code(cls, code):
        kinds = list(cls)
        if not 0 <= code < len(kinds):
            raise ValueError(f"unknown variant id {code}")
        return kinds[code]

    @property
    def is_segnet(self):
        return self.name.startswith("SEGNET")

    @property
    def is_fcn(self):
        return self.name.startswith("FCN")

    @property
    def adds_encoder_maps(self):
        return self in (
            VariantKind.SEGNET_BASIC_ENCODER_ADDITION,
            VariantKind.FCN_BASIC,
            VariantKind.FCN_BASIC_NO_DIM_REDUCTION,
        )

    @property
    def reduces_dims(self):
        return self in (
            VariantKind.FCN_BASIC,
            VariantKind.FCN_BASIC_NO_ADDITION,
            VariantKind.BILINEAR_INTERPOLATION,
        )


@dataclass
class Layer:
    """One entry of a built network's layer inventory."""

    name: str
    op: str
    stage: int
    params: tuple = ()
    indices_from: int | None = None
    adds_encoder_map: int | None = None
    fixed: bool = False


@dataclass
class ModelSpec:
    kind: VariantKind
    num_classes: int
    depth: int
    channels: list
    kernel: int
    convs_per_stage: list
    in_channels: int = 3
    dropout: float = 0.0
    params: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)
    layers: list = field(default_factory=list)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def decoder_channels(self):
        """Channel count flowing through the decoder of each stage."""
        if self.kind.is_segnet or self.kind == VariantKind.FCN_BASIC_NO_DIM_REDUCTION or (
            self.kind == VariantKind.FCN_BASIC_NO_ADDITION_NO_DIM_REDUCTION
        ):
            return list(self.channels)
        return [self.num_classes] * self.depth

    def trainable(self):
        return list(self.params.items())

    def set_mode(self, mode):
        for s in self.bn.values():
            s.mode = mode

    def encoders(self):
        return [layer for layer in self.layers if layer.op == "maxpool2x2"]

    def decoders(self):
        return [layer for layer in self.layers if layer.op in ("max_unpool2x2", "transposed_conv2d")]


@dataclass
class ForwardArtifacts:
    logits: Tensor
    stored_indices: list
    stored_encoder_maps: list
    intermediates: dict = field(default_factory=dict)

    @property
    def probabilities(self):
        with no_grad():
            return ops.softmax_channels(self.logits.detach())


def he_init(shape, fan_in, rng, dtype=np.float64):
    """Zero-mean Gaussian with standard deviation sqrt(2 / fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _as_schedule(value, depth, what):
    if isinstance(value, int):
        return [value] * depth
    value = [int(v) for v in value]
    if len(value) != depth:
        raise ValueError(f"{what} schedule has {len(value)} entries for depth {depth}")
    return value


def build_variant(kind, num_classes, depth=4, channels=64, kernel=7, seed=0,
                  convs_per_stage=1, in_channels=3, dropout=0.0, dtype=np.float64):
    """Build a network of the given variant with He-initialised weights.

    ``channels`` and ``convs_per_stage`` accept either one value for every
    stage or a per-stage list (e.g. ``[64, 128, 256, 512, 512]`` with
    ``[2, 2, 3, 3, 3]`` gives the 13-layer encoder).
    """
    kind = VariantKind.parse(kind)
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and positive, got {kernel}")
    if not 0 <= dropout < 1:
        raise ValueError("dropout must be in [0, 1)")
    chans = _as_schedule(channels, depth, "channel")
    convs = _as_schedule(convs_per_stage, depth, "convs_per_stage")
    if min(chans) < 1 or min(convs) < 1 or in_channels < 1:
        raise ValueError("channels, convs_per_stage and in_channels must be >= 1")
    if kind == VariantKind.SEGNET_BASIC_SINGLE_CHANNEL_DECODER and len(set(chans)) != 1:
        raise ValueError("single-channel decoders cannot change the channel count")

    spec = ModelSpec(kind, num_classes, depth, chans, kernel, convs, in_channels, dropout)
    rng = np.random.default_rng(seed)
    k, K = kernel, num_classes

    def weight(name, shape, fan_in):
        spec.params[name] = Tensor(he_init(shape, fan_in, rng, dtype), requires_grad=True, name=name)
        return name

    def batchnorm(name, c):
        s = BatchNormState.create(c, dtype=dtype, name=name)
        spec.bn[name] = s
        spec.params[s.scale.name] = s.scale
        spec.params[s.shift.name] = s.shift
        return s.scale.name, s.shift.name

    c_prev = in_channels
    for s in range(depth):
        for i in range(convs[s]):
            name = f"enc{s}.conv{i}"
            w = weight(f"{name}.weight", (chans[s], c_prev, k, k), c_prev * k * k)
            spec.layers.append(Layer(name, "conv2d", s, (w,)))
            spec.layers.append(Layer(f"{name}.bn", "batch_norm", s, batchnorm(f"{name}.bn", chans[s])))
            spec.layers.append(Layer(f"{name}.relu", "relu", s))
            c_prev = chans[s]
        spec.layers.append(Layer(f"enc{s}.pool", "maxpool2x2", s))

    dec_ch = spec.decoder_channels
    if kind.is_segnet:
        for s in reversed(range(depth)):
            spec.layers.append(Layer(f"dec{s}.unpool", "max_unpool2x2", s, indices_from=s))
            c_in = chans[s]
            for i in range(convs[s]):
                last = i == convs[s] - 1
                c_out = chans[s - 1] if last and s > 0 else chans[s]
                name = f"dec{s}.conv{i}"
                if kind == VariantKind.SEGNET_BASIC_SINGLE_CHANNEL_DECODER:
                    w = weight(f"{name}.weight", (c_in, 1, k, k), k * k)
                    spec.layers.append(Layer(name, "depthwise_conv2d", s, (w,)))
                else:
                    w = weight(f"{name}.weight", (c_out, c_in, k, k), c_in * k * k)
                    spec.layers.append(Layer(name, "conv2d", s, (w,)))
                spec.layers.append(Layer(f"{name}.bn", "batch_norm", s, batchnorm(f"{name}.bn", c_out)))
                c_in = c_out
            if kind.adds_encoder_maps and s > 0:
                spec.layers.append(Layer(f"dec{s}.add", "add", s, adds_encoder_map=s - 1))
        final_ch = chans[0]
    else:
        fixed = kind == VariantKind.BILINEAR_INTERPOLATION
        reduce_stages = [depth - 1]
        if kind.reduces_dims and kind.adds_encoder_maps:
            reduce_stages = list(range(depth))
        if kind.reduces_dims:
            for s in sorted(reduce_stages):
                w = weight(f"reduce{s}.weight", (K, chans[s], 1, 1), chans[s])
                spec.layers.append(Layer(f"reduce{s}", "conv2d", s, (w,)))
        for s in reversed(range(depth)):
            c_in = dec_ch[s]
            c_out = dec_ch[s - 1] if s > 0 else dec_ch[0]
            name = f"dec{s}.upsample"
            kern = ops.upsampling_kernel(DECONV_KERNEL, max(c_in, c_out), DECONV_STRIDE, dtype).data[:c_in, :c_out]
            if fixed:
                spec.fixed[f"{name}.weight"] = Tensor(np.ascontiguousarray(kern), name=f"{name}.weight")
            else:
                spec.params[f"{name}.weight"] = Tensor(np.ascontiguousarray(kern), requires_grad=True,
                                                       name=f"{name}.weight")
            spec.layers.append(Layer(name, "transposed_conv2d", s, (f"{name}.weight",), fixed=fixed))
            if kind.adds_encoder_maps and s > 0:
                spec.layers.append(Layer(f"dec{s}.add", "add", s, adds_encoder_map=s - 1))
        final_ch = dec_ch[0]

    w = weight("classifier.weight", (K, final_ch, 1, 1), final_ch)
    spec.params["classifier.bias"] = Tensor(np.zeros(K, dtype=dtype), requires_grad=True, name="classifier.bias")
    spec.layers.append(Layer("classifier", "conv2d", -1, (w, "classifier.bias")))
    return spec


def _dropout_stage(spec, s):
    # deeper half of the encoder and its mirrored decoders
    return spec.dropout > 0 and s >= spec.depth // 2


def forward(spec: ModelSpec, batch, mode="train", seed=0, keep_intermediates=False):
    """Run the network on an NCHW batch and return logits plus stored encoder state."""
    x = as_tensor(batch)
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if x.data.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"expected (n, {spec.in_channels}, h, w) input, got {x.shape}")
    h, w = x.shape[2:]
    step = 2 ** spec.depth
    if h % step or w % step:
        raise ValueError(f"input size {(h, w)} must be divisible by 2^depth = {step}")
    x = Tensor(x.data.astype(spec.dtype, copy=False))
    P = spec.params
    k = spec.kernel
    pad = k // 2
    trace = {} if keep_intermediates else None
    drop_seed = np.random.SeedSequence([seed, 7919])

    def maybe_drop(t, s):
        if not _dropout_stage(spec, s):
            return t
        return ops.dropout(t, spec.dropout, mode, seed=drop_seed.spawn(1)[0])

    indices, pooled, sizes = [], [], []
    for s in range(spec.depth):
        for i in range(spec.convs_per_stage[s]):
            name = f"enc{s}.conv{i}"
            x = ops.conv2d(x, ConvParams(P[f"{name}.weight"], padding=pad))
            x = ops.batch_norm(x, spec.bn[f"{name}.bn"], mode)
            x = ops.relu(x)
        sizes.append(x.shape[2:])
        x, idx = ops.maxpool2x2(x)
        x = maybe_drop(x, s)
        indices.append(idx)
        pooled.append(x)
        if trace is not None:
            trace[f"enc{s}.pool"] = x

    kind = spec.kind
    stored_maps = []
    if kind.is_segnet:
        for s in reversed(range(spec.depth)):
            x = ops.max_unpool2x2(x, indices[s], *sizes[s])
            if trace is not None:
                trace[f"dec{s}.unpool"] = x
            for i in range(spec.convs_per_stage[s]):
                name = f"dec{s}.conv{i}"
                if kind == VariantKind.SEGNET_BASIC_SINGLE_CHANNEL_DECODER:
                    x = ops.depthwise_conv2d(x, P[f"{name}.weight"], pad)
                else:
                    x = ops.conv2d(x, ConvParams(P[f"{name}.weight"], padding=pad))
                x = ops.batch_norm(x, spec.bn[f"{name}.bn"], mode)
            if kind.adds_encoder_maps and s > 0:
                stored_maps.append(pooled[s - 1])
                x = add(x, pooled[s - 1])
            x = maybe_drop(x, s)
        stored_indices = indices
    else:
        skips = pooled
        if kind.reduces_dims:
            skips = [
                ops.conv2d(pooled[s], ConvParams(P[f"reduce{s}.weight"])) if f"reduce{s}.weight" in P else None
                for s in range(spec.depth)
            ]
        x = skips[-1]
        for s in reversed(range(spec.depth)):
            wname = f"dec{s}.upsample.weight"
            weight = spec.fixed[wname] if wname in spec.fixed else P[wname]
            x = ops.transposed_conv2d(x, ConvParams(weight, stride=DECONV_STRIDE, padding=DECONV_PAD))
            if kind.adds_encoder_maps and s > 0:
                stored_maps.append(skips[s - 1])
                x = add(x, skips[s - 1])
            if trace is not None:
                trace[f"dec{s}.out"] = x
        stored_indices = []

    logits = ops.conv2d(x, ConvParams(P["classifier.weight"], P["classifier.bias"]))
    return ForwardArtifacts(logits, stored_indices, stored_maps, trace or {})


def predict(spec, batch):
    """Eval-mode class map, shape (n, h, w)."""
    with no_grad():
        logits = forward(spec, batch, mode="eval").logits.data
    return logits.argmax(axis=1)


def count_params(spec: ModelSpec):
    """Number of trainable scalars; fixed bilinear kernels are excluded."""
    return int(sum(t.size for t in spec.params.values()))


# Table 1 storage multiplier convention: stored channels of the first encoder map
@dataclass
class StorageReport:
    bytes_indices: int
    bytes_encoder_maps: int
    multiplier: int
    multiplier_applicable: bool = True
    map_height: int = 0
    map_width: int = 0

    @property
    def multiplier_label(self):
        return str(self.multiplier) if self.multiplier_applicable else "n/a"


def feature_map_bytes(channels, h, w, precision_bytes=4):
    return channels * h * w * precision_bytes


def storage_multiplier(spec: ModelSpec):
    kind = spec.kind
    if kind in (VariantKind.SEGNET_BASIC, VariantKind.SEGNET_BASIC_SINGLE_CHANNEL_DECODER):
        return 1
    if kind == VariantKind.SEGNET_BASIC_ENCODER_ADDITION or kind == VariantKind.FCN_BASIC_NO_DIM_REDUCTION:
        return spec.channels[0]
    if kind == VariantKind.FCN_BASIC:
        return spec.num_classes
    return 0


def storage_cost(spec: ModelSpec, h, w, precision_bytes=4):
    """Inference-time storage of first-encoder information for an h x w input.

    The first encoder's pooled map is (h/2) x (w/2). Index-reusing variants
    store 2 bits per pooling window per channel; map-adding variants store
    the (possibly reduced) maps at ``precision_bytes`` per value.
    """
    if h < 2 or w < 2 or h % 2 or w % 2:
        raise ValueError(f"storage_cost needs an even input size, got {(h, w)}")
    mh, mw = h // 2, w // 2
    kind = spec.kind
    idx_bytes = ops.index_storage_bytes(spec.channels[0] * mh * mw) if kind.is_segnet else 0
    mult = storage_multiplier(spec)
    map_channels = mult if kind.adds_encoder_maps else 0
    return StorageReport(
        bytes_indices=idx_bytes,
        bytes_encoder_maps=feature_map_bytes(map_channels, mh, mw, precision_bytes),
        multiplier=mult,
        multiplier_applicable=kind != VariantKind.FCN_BASIC_NO_ADDITION,
        map_height=mh,
        map_width=mw,
    )


def receptive_field(depth, kernel, convs_per_stage=1):
    """Input extent seen by one unit after ``depth`` [conv -> 2x2 pool] stages."""
    if depth < 1 or kernel < 1:
        raise ValueError("depth and kernel must be >= 1")
    r, jump = 1, 1
    for _ in range(depth):
        r += convs_per_stage * (kernel - 1) * jump
        r += jump
        jump *= 2
    return r
