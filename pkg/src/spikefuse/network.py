"""Architecture mini-language, the layered spiking network, and counters.

Architecture strings are dash-separated tokens:

    Input-128C5S2-BN-AP2-128C3-BN-AP2-512FC-VotingC11P5-AP

``<n>C<k>[S<s>]`` is a convolution with n output channels, k*k kernel and
stride s (default 1, padding fixed at floor(k/2) so pooling chains stay
divisible); ``BN`` attaches batch normalization to the preceding
convolution; ``AP<k>`` is a k*k average pool; ``DP`` is dropout at rate
0.5; ``<n>FC`` a fully connected spiking layer; ``VotingC<M>P<P>`` the
final spiking layer with P neurons per class; a trailing bare ``AP``
denotes the temporal average of the per-step vote vector, not a spatial
pool.

Every convolutional layer carries conv -> (BN) -> LIF dynamics unrolled
over T timesteps; from the second step on, a non-baseline variant gates the
decayed membrane history with the attention tensor computed from the
layer's own previous-step spikes. Fully connected and voting layers always
use the plain update. Pooling acts on spikes, so deeper layers receive
fractional input current in [0, 1]; the first layer receives raw frame
counts.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .attention import AttentionVariant, compute_attention, init_attention_params
from .errors import ArchError, CheckpointError, ShapeError, StateError
from .neuron import LifConfig, initial_state, lif_step, lif_step_attended
from .rng import Rng
from .tensor import (
    BatchNormState,
    Tensor,
    avgpool2d,
    batchnorm,
    conv2d,
    dropout,
    kaiming_uniform,
    linear,
    ones_param,
    reshape,
    stack,
    tmean,
    zeros_param,
)

_CONV_RE = re.compile(r"^(\d+)C(\d+)(?:S(\d+))?$")
_POOL_RE = re.compile(r"^AP(\d+)$")
_FC_RE = re.compile(r"^(\d+)FC$")
_VOTE_RE = re.compile(r"^VotingC(\d+)P(\d+)$")

DROPOUT_RATE = 0.5


@dataclass
class ConvStage:
    out_channels: int
    kernel: int
    stride: int
    batch_norm: bool
    in_channels: int
    in_hw: Tuple[int, int]
    out_hw: Tuple[int, int]

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def token(self) -> str:
        t = f"{self.out_channels}C{self.kernel}"
        if self.stride != 1:
            t += f"S{self.stride}"
        return t + ("-BN" if self.batch_norm else "")


@dataclass
class PoolStage:
    k: int
    channels: int
    in_hw: Tuple[int, int]

    def token(self) -> str:
        return f"AP{self.k}"


@dataclass
class DropoutStage:
    rate: float = DROPOUT_RATE

    def token(self) -> str:
        return "DP"


@dataclass
class DenseStage:
    in_features: int
    out_features: int

    def token(self) -> str:
        return f"{self.out_features}FC"


@dataclass
class VotingStage:
    in_features: int
    classes: int
    per_class: int

    def token(self) -> str:
        return f"VotingC{self.classes}P{self.per_class}"


Stage = Union[ConvStage, PoolStage, DropoutStage, DenseStage, VotingStage]


@dataclass
class NetworkSpec:
    """Validated architecture plus everything needed to instantiate it."""

    stages: List[Stage]
    variant: AttentionVariant
    lif: LifConfig
    reduction: int
    input_shape: Tuple[int, int, int]  # (2, H, W)
    timesteps: int
    classes: Optional[int]
    per_class: Optional[int]
    final_temporal_avg: bool = True

    @property
    def arch_string(self) -> str:
        tokens = ["Input"] + [s.token() for s in self.stages]
        if self.final_temporal_avg and self.classes is not None:
            tokens.append("AP")
        return "-".join(tokens)


def parse_architecture(
    s: str,
    input_shape: Tuple[int, int, int] = (2, 128, 128),
    variant: Union[AttentionVariant, str] = AttentionVariant.BL,
    lif: Optional[LifConfig] = None,
    reduction: int = 4,
    timesteps: int = 10,
) -> NetworkSpec:
    """Parse and shape-check an architecture string against an input shape.

    Raises ArchError naming the token index on unknown tokens, inconsistent
    shapes, or a voting layer that is not last. A spec without a voting
    layer is valid for the complexity counters but cannot be instantiated.
    """
    variant = AttentionVariant(variant)
    lif = lif or LifConfig(v_th=1.15, kappa=0.7)
    tokens = s.split("-")
    if not tokens or tokens[0] != "Input":
        raise ArchError("architecture must start with 'Input'", token_index=0)
    if len(input_shape) != 3 or input_shape[0] != 2:
        raise ArchError(f"input shape must be (2, H, W), got {input_shape}")

    stages: List[Stage] = []
    channels, (h, w) = input_shape[0], (input_shape[1], input_shape[2])
    features: Optional[int] = None  # set once the net flattens
    voting_seen = False
    final_ap = False

    for i, tok in enumerate(tokens[1:], start=1):
        if voting_seen:
            if tok == "AP" and i == len(tokens) - 1:
                final_ap = True
                continue
            raise ArchError(f"voting layer must be last, found {tok!r} after it", token_index=i)

        m = _CONV_RE.match(tok)
        if m:
            if features is not None:
                raise ArchError("convolution after a fully connected stage", token_index=i)
            n, k, stride = int(m.group(1)), int(m.group(2)), int(m.group(3) or 1)
            if k < 1 or n < 1 or stride < 1:
                raise ArchError(f"bad convolution token {tok!r}", token_index=i)
            pad = k // 2
            oh = (h + 2 * pad - k) // stride + 1
            ow = (w + 2 * pad - k) // stride + 1
            if oh < 1 or ow < 1:
                raise ArchError(f"{tok!r} collapses spatial extent ({h}, {w})", token_index=i)
            stages.append(ConvStage(n, k, stride, False, channels, (h, w), (oh, ow)))
            channels, (h, w) = n, (oh, ow)
            continue
        if tok == "BN":
            if not stages or not isinstance(stages[-1], ConvStage):
                raise ArchError("BN must directly follow a convolution", token_index=i)
            if stages[-1].batch_norm:
                raise ArchError("duplicate BN on one convolution", token_index=i)
            stages[-1].batch_norm = True
            continue
        m = _POOL_RE.match(tok)
        if m:
            if features is not None:
                raise ArchError("spatial pool after a fully connected stage", token_index=i)
            k = int(m.group(1))
            if h % k or w % k:
                raise ArchError(
                    f"AP{k} needs extents divisible by {k}, got ({h}, {w})", token_index=i
                )
            stages.append(PoolStage(k, channels, (h, w)))
            h, w = h // k, w // k
            continue
        if tok == "DP":
            stages.append(DropoutStage())
            continue
        m = _FC_RE.match(tok)
        if m:
            out_features = int(m.group(1))
            in_features = features if features is not None else channels * h * w
            stages.append(DenseStage(in_features, out_features))
            features = out_features
            continue
        m = _VOTE_RE.match(tok)
        if m:
            classes, per_class = int(m.group(1)), int(m.group(2))
            if classes < 1 or per_class < 1:
                raise ArchError(f"bad voting token {tok!r}", token_index=i)
            in_features = features if features is not None else channels * h * w
            stages.append(VotingStage(in_features, classes, per_class))
            voting_seen = True
            continue
        if tok == "AP":
            raise ArchError("bare AP (temporal average) only allowed after voting", token_index=i)
        raise ArchError(f"unknown token {tok!r}", token_index=i)

    vote = next((st for st in stages if isinstance(st, VotingStage)), None)
    return NetworkSpec(
        stages=stages,
        variant=variant,
        lif=lif,
        reduction=reduction,
        input_shape=tuple(input_shape),
        timesteps=timesteps,
        classes=vote.classes if vote else None,
        per_class=vote.per_class if vote else None,
        final_temporal_avg=final_ap or vote is not None,
    )


# ---------------------------------------------------------------------------
# complexity counters


def _attention_param_count(channels: int, variant: AttentionVariant, r: int) -> int:
    n = 0
    if variant.has_spatial:
        n += channels + 1
    if variant.has_channel:
        n += 2 * channels * channels // r
    return n


def count_parameters(spec: NetworkSpec) -> int:
    """Trainable parameter count: conv Cin*Cout*k^2+Cout, BN 2C, dense
    F*O+O, voting F*M*P+M*P, plus per-conv attention (spatial C+1, channel
    2C^2/r) for non-baseline variants."""
    total = 0
    for st in spec.stages:
        if isinstance(st, ConvStage):
            total += st.in_channels * st.out_channels * st.kernel**2 + st.out_channels
            if st.batch_norm:
                total += 2 * st.out_channels
            total += _attention_param_count(st.out_channels, spec.variant, spec.reduction)
        elif isinstance(st, DenseStage):
            total += st.in_features * st.out_features + st.out_features
        elif isinstance(st, VotingStage):
            out = st.classes * st.per_class
            total += st.in_features * out + out
    return total


def count_mult_adds(spec: NetworkSpec, timesteps: Optional[int] = None) -> int:
    """Dense multiply-accumulate count per timestep, scaled by T.

    Counts convolution and fully connected MACs plus the attention branches
    (spatial 1x1 conv C*H*W, channel MLP 2C^2/r per layer); normalization,
    pooling and elementwise gating products are excluded.
    """
    t = spec.timesteps if timesteps is None else timesteps
    per_step = 0
    for st in spec.stages:
        if isinstance(st, ConvStage):
            oh, ow = st.out_hw
            per_step += oh * ow * st.out_channels * (st.in_channels * st.kernel**2)
            if spec.variant.has_spatial:
                per_step += st.out_channels * oh * ow
            if spec.variant.has_channel:
                per_step += 2 * st.out_channels**2 // spec.reduction
        elif isinstance(st, DenseStage):
            per_step += st.in_features * st.out_features
        elif isinstance(st, VotingStage):
            per_step += st.in_features * st.classes * st.per_class
    return per_step * t


# ---------------------------------------------------------------------------
# runtime layers


@dataclass
class _ForwardCtx:
    training: bool
    rng: Optional[Rng]
    smooth: bool
    record_hidden: bool
    unit_spatial: bool
    unit_channel: bool
    hidden_trace: Optional[np.ndarray] = None


class _ConvBlock:
    def __init__(self, st: ConvStage, spec: NetworkSpec, name: str, rng: Rng, dtype):
        self.st = st
        self.variant = spec.variant
        self.lif = spec.lif
        self.name = name
        self.dtype = dtype
        self.is_last_conv = False
        fan_in = st.in_channels * st.kernel**2
        self.weight = kaiming_uniform(
            (st.out_channels, st.in_channels, st.kernel, st.kernel),
            fan_in, rng.split(f"{name}.conv.weight"), dtype,
        )
        self.bias = zeros_param((st.out_channels,), dtype)
        if st.batch_norm:
            self.bn_gamma = ones_param((st.out_channels,), dtype)
            self.bn_beta = zeros_param((st.out_channels,), dtype)
            self.bn_state = BatchNormState(st.out_channels, dtype)
        else:
            self.bn_gamma = self.bn_beta = self.bn_state = None
        self.attention = init_attention_params(
            st.out_channels, spec.reduction, spec.variant, rng.split(f"{name}.att"), dtype
        )
        self.state = None

    def named_parameters(self):
        out = [(f"{self.name}.conv.weight", self.weight), (f"{self.name}.conv.bias", self.bias)]
        if self.bn_gamma is not None:
            out += [(f"{self.name}.bn.gamma", self.bn_gamma), (f"{self.name}.bn.beta", self.bn_beta)]
        a = self.attention
        if a is not None:
            if a.spatial_weight is not None:
                out += [
                    (f"{self.name}.att.spatial_weight", a.spatial_weight),
                    (f"{self.name}.att.spatial_bias", a.spatial_bias),
                ]
            if a.reduce_weight is not None:
                out += [
                    (f"{self.name}.att.reduce_weight", a.reduce_weight),
                    (f"{self.name}.att.expand_weight", a.expand_weight),
                ]
        return out

    def named_buffers(self):
        if self.bn_state is None:
            return []
        return [
            (f"{self.name}.bn.running_mean", self.bn_state.mean),
            (f"{self.name}.bn.running_var", self.bn_state.var),
        ]

    def reset(self):
        self.state = None

    def forward_sequence(self, x: Tensor, t_steps: int, batch: int, ctx: _ForwardCtx) -> Tensor:
        cur = conv2d(x, self.weight, self.bias, self.st.stride, self.st.padding)
        if self.bn_gamma is not None:
            cur = batchnorm(cur, self.bn_gamma, self.bn_beta, self.bn_state, ctx.training)
        c, (h, w) = self.st.out_channels, self.st.out_hw
        seq = reshape(cur, (t_steps, batch, c, h, w))
        state = initial_state((batch, c, h, w), self.dtype)
        spikes = []
        record = ctx.record_hidden and self.is_last_conv
        trace = [] if record else None
        for t in range(t_steps):
            i_t = seq[t]
            if t > 0 and self.attention is not None:
                u = compute_attention(
                    state.s, self.attention, self.variant,
                    unit_spatial=ctx.unit_spatial, unit_channel=ctx.unit_channel,
                )
                state, s = lif_step_attended(state, i_t, u, self.lif, smooth=ctx.smooth)
            else:
                state, s = lif_step(state, i_t, self.lif, smooth=ctx.smooth)
            self.state = state
            if record:
                trace.append(state.v.data.copy())
            spikes.append(s)
        if record:
            ctx.hidden_trace = np.stack(trace, axis=1)  # [B, T, C, H, W]
        return reshape(stack(spikes, axis=0), (t_steps * batch, c, h, w))


class _PoolLayer:
    def __init__(self, st: PoolStage):
        self.st = st

    def named_parameters(self):
        return []

    def named_buffers(self):
        return []

    def reset(self):
        pass

    def forward_sequence(self, x, t_steps, batch, ctx):
        return avgpool2d(x, self.st.k)


class _DropoutLayer:
    def __init__(self, st: DropoutStage, name: str):
        self.rate = st.rate
        self.name = name

    def named_parameters(self):
        return []

    def named_buffers(self):
        return []

    def reset(self):
        pass

    def forward_sequence(self, x, t_steps, batch, ctx):
        if not ctx.training:
            return x
        if ctx.rng is None:
            raise StateError("dropout in training mode needs a forward rng")
        rest = x.shape[1:]
        # One mask per sample, reused across all timesteps.
        mask = (ctx.rng.random((batch,) + rest) >= self.rate).astype(x.data.dtype)
        tiled = np.tile(mask, (t_steps,) + (1,) * len(rest))
        return dropout(x, self.rate, tiled, training=True)


class _SpikingDense:
    def __init__(self, st: DenseStage, lif: LifConfig, name: str, rng: Rng, dtype):
        self.st = st
        self.lif = lif
        self.name = name
        self.dtype = dtype
        self.weight = kaiming_uniform(
            (st.out_features, st.in_features), st.in_features,
            rng.split(f"{name}.weight"), dtype,
        )
        self.bias = zeros_param((st.out_features,), dtype)
        self.state = None

    def named_parameters(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def named_buffers(self):
        return []

    def reset(self):
        self.state = None

    def forward_sequence(self, x, t_steps, batch, ctx):
        if x.ndim != 2:
            x = reshape(x, (t_steps * batch, int(np.prod(x.shape[1:]))))
        cur = linear(x, self.weight, self.bias)
        seq = reshape(cur, (t_steps, batch, self.st.out_features))
        state = initial_state((batch, self.st.out_features), self.dtype)
        spikes = []
        for t in range(t_steps):
            state, s = lif_step(state, seq[t], self.lif, smooth=ctx.smooth)
            self.state = state
            spikes.append(s)
        return reshape(stack(spikes, axis=0), (t_steps * batch, self.st.out_features))


class _VotingLayer:
    def __init__(self, st: VotingStage, lif: LifConfig, name: str, rng: Rng, dtype):
        self.st = st
        self.lif = lif
        self.name = name
        self.dtype = dtype
        out = st.classes * st.per_class
        self.weight = kaiming_uniform(
            (out, st.in_features), st.in_features, rng.split(f"{name}.weight"), dtype
        )
        self.bias = zeros_param((out,), dtype)
        self.state = None

    def named_parameters(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def named_buffers(self):
        return []

    def reset(self):
        self.state = None

    def forward_sequence(self, x, t_steps, batch, ctx):
        if x.ndim != 2:
            x = reshape(x, (t_steps * batch, int(np.prod(x.shape[1:]))))
        m, p = self.st.classes, self.st.per_class
        cur = linear(x, self.weight, self.bias)
        seq = reshape(cur, (t_steps, batch, m * p))
        state = initial_state((batch, m * p), self.dtype)
        votes = []
        for t in range(t_steps):
            state, s = lif_step(state, seq[t], self.lif, smooth=ctx.smooth)
            self.state = state
            votes.append(tmean(reshape(s, (batch, m, p)), axis=2))
        return stack(votes, axis=2)  # [B, M, T]


@dataclass
class VoteOutput:
    """Per-step class scores o[b, m, t] = mean spike of class m's group."""

    o: Tensor

    def scores(self) -> Tensor:
        """Time-mean vote vector [B, M]; the loss target."""
        return tmean(self.o, axis=2)

    def predictions(self) -> np.ndarray:
        """Argmax class per sample; ties break to the lowest index."""
        return np.argmax(self.scores().data, axis=1)


class SpikingNetwork:
    """A spec instantiated into parameterized layers with LIF dynamics.

    ``smooth`` replaces every Heaviside spike with the smooth surrogate so
    an end-to-end loss becomes finite-difference checkable. ``unit_spatial``
    and ``unit_channel`` force the corresponding attention branch to exact
    ones (structural-equivalence test hooks).
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float32, smooth: bool = False):
        if spec.classes is None:
            raise ArchError("network requires a voting layer")
        self.spec = spec
        self.seed = int(seed)
        self.dtype = np.dtype(dtype).type
        self.smooth = smooth
        self.unit_spatial = False
        self.unit_channel = False
        self._hidden: Optional[np.ndarray] = None

        rng = Rng(self.seed).split("init")
        self.layers = []
        conv_blocks = []
        for i, st in enumerate(spec.stages):
            name = f"layer{i}"
            if isinstance(st, ConvStage):
                block = _ConvBlock(st, spec, name, rng, self.dtype)
                conv_blocks.append(block)
                self.layers.append(block)
            elif isinstance(st, PoolStage):
                self.layers.append(_PoolLayer(st))
            elif isinstance(st, DropoutStage):
                self.layers.append(_DropoutLayer(st, name))
            elif isinstance(st, DenseStage):
                self.layers.append(_SpikingDense(st, spec.lif, name, rng, self.dtype))
            elif isinstance(st, VotingStage):
                self.layers.append(_VotingLayer(st, spec.lif, name, rng, self.dtype))
        if conv_blocks:
            conv_blocks[-1].is_last_conv = True

    def named_parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.named_parameters())
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        """(name, array) pairs for non-trainable state (BN running stats)."""
        out = []
        for layer in self.layers:
            out.extend(layer.named_buffers())
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def reset_states(self):
        for layer in self.layers:
            layer.reset()
        self._hidden = None

    def forward(
        self,
        frames,
        training: bool = False,
        rng: Optional[Rng] = None,
        record_hidden: bool = False,
    ) -> VoteOutput:
        """Run the unrolled network on frames [B, T, 2, H, W].

        The first timestep updates every layer with the plain LIF rule; from
        the second step each convolutional layer is gated by the attention
        tensor of its own previous-step spikes (non-baseline variants).
        """
        data = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
        if data.ndim != 5:
            raise ShapeError(f"forward: frames must be [B, T, 2, H, W], got {data.shape}")
        b, t_steps = data.shape[0], data.shape[1]
        if t_steps != self.spec.timesteps:
            raise ShapeError(f"forward: expected T={self.spec.timesteps}, got {t_steps}")
        if tuple(data.shape[2:]) != tuple(self.spec.input_shape):
            raise ShapeError(
                f"forward: expected input {self.spec.input_shape}, got {tuple(data.shape[2:])}"
            )
        self.reset_states()
        flat = np.ascontiguousarray(data.transpose(1, 0, 2, 3, 4)).reshape(
            t_steps * b, *self.spec.input_shape
        )
        x = Tensor(flat.astype(self.dtype, copy=False))
        ctx = _ForwardCtx(
            training=training,
            rng=rng,
            smooth=self.smooth,
            record_hidden=record_hidden,
            unit_spatial=self.unit_spatial,
            unit_channel=self.unit_channel,
        )
        for layer in self.layers[:-1]:
            x = layer.forward_sequence(x, t_steps, b, ctx)
        out = self.layers[-1].forward_sequence(x, t_steps, b, ctx)
        self._hidden = ctx.hidden_trace
        return VoteOutput(o=out)

    def hidden_activation(self) -> np.ndarray:
        """Last conv layer's membrane trajectory [B, T, C, H, W] recorded by
        the most recent forward(record_hidden=True)."""
        if self._hidden is None:
            raise StateError("no hidden trajectory: run forward(record_hidden=True) first")
        return self._hidden

    def config_dict(self) -> dict:
        return {
            "arch": self.spec.arch_string,
            "variant": self.spec.variant.value,
            "v_th": self.spec.lif.v_th,
            "kappa": self.spec.lif.kappa,
            "reduction": self.spec.reduction,
            "timesteps": self.spec.timesteps,
            "input_height": self.spec.input_shape[1],
            "input_width": self.spec.input_shape[2],
            "precision": "f64" if self.dtype == np.float64 else "f32",
        }


def build_network(config: dict, seed: int = 0, smooth: bool = False) -> SpikingNetwork:
    """Instantiate a network from the flat config dict ``config_dict`` emits."""
    spec = parse_architecture(
        config["arch"],
        input_shape=(2, int(config["input_height"]), int(config["input_width"])),
        variant=config["variant"],
        lif=LifConfig(v_th=float(config["v_th"]), kappa=float(config["kappa"])),
        reduction=int(config["reduction"]),
        timesteps=int(config["timesteps"]),
    )
    dtype = np.float64 if config.get("precision", "f32") == "f64" else np.float32
    return SpikingNetwork(spec, seed=seed, dtype=dtype, smooth=smooth)


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"SNN1"


def _checkpoint_entries(net: SpikingNetwork):
    entries = [(name, p.data) for name, p in net.named_parameters()]
    entries += net.named_buffers()
    return entries


def save_checkpoint(path, net: SpikingNetwork, extra_config: Optional[dict] = None) -> None:
    """Flat binary checkpoint plus a human-readable manifest.

    Layout: magic "SNN1", u32 config length, config JSON (the network config
    merged with ``extra_config``), u8 precision flag (0=f32, 1=f64), u32
    tensor count, then per tensor u8 ndim + u32 extents + raw little-endian
    data, in registration order (trainables first, then buffers). The
    manifest at ``<stem>.manifest.tsv`` lists name, shape and byte offset.
    """
    path = Path(path)
    config = dict(net.config_dict())
    if extra_config:
        config.update(extra_config)
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    precision = 1 if net.dtype == np.float64 else 0
    store_dtype = np.dtype("<f8") if precision else np.dtype("<f4")
    entries = _checkpoint_entries(net)

    manifest_rows = []
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<BI", precision, len(entries)))
        for name, arr in entries:
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            offset = fh.tell()
            fh.write(np.ascontiguousarray(arr, dtype=store_dtype).tobytes())
            manifest_rows.append((name, arr.shape, offset))
    with open(path.with_suffix(".manifest.tsv"), "w") as fh:
        fh.write("name\tshape\tbyte_offset\n")
        for name, shape, offset in manifest_rows:
            fh.write(f"{name}\t{'x'.join(map(str, shape))}\t{offset}\n")


def load_checkpoint(path, smooth: bool = False):
    """Rebuild the network a checkpoint describes and load its tensors.

    Returns (network, config). Batch-norm statistics restored from a
    checkpoint are treated as initialized.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (blob_len,) = struct.unpack_from("<I", raw, 4)
    try:
        config = json.loads(raw[8 : 8 + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad config blob: {exc}")
    pos = 8 + blob_len
    precision, count = struct.unpack_from("<BI", raw, pos)
    pos += 5
    store_dtype = np.dtype("<f8") if precision else np.dtype("<f4")
    config = dict(config)
    config["precision"] = "f64" if precision else "f32"

    net = build_network(config, seed=0, smooth=smooth)
    entries = _checkpoint_entries(net)
    if len(entries) != count:
        raise CheckpointError(
            f"{path}: checkpoint has {count} tensors, network expects {len(entries)}"
        )
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype=store_dtype, count=n, offset=pos).reshape(shape)
        pos += n * store_dtype.itemsize
        arrays.append(arr)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")

    for (name, target), arr in zip(entries, arrays):
        if tuple(target.shape) != tuple(arr.shape):
            raise CheckpointError(f"{path}: tensor {name} shape {arr.shape} != {target.shape}")
        target[...] = arr.astype(target.dtype)
    for layer in net.layers:
        if getattr(layer, "bn_state", None) is not None:
            layer.bn_state.initialized = True
    return net, config
