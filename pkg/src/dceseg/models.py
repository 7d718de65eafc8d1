"""Segmentation network builders, input wiring, training and prediction.

Two architectures are provided: a dilated fully convolutional network (seven
3x3 stages at fixed width with dilations 1,1,2,4,8,16,1 and a 1x1 head) and a
small four-stage U-net (encoder widths 16..128, three pools, three 2x2
transposed-convolution upsamplings with skip concatenation).

Each network accepts a stack of contrast phases and wires it according to its
input configuration:

* ``single_phase``  - one phase image is the network input;
* ``separate_phases`` - every phase runs through the shared trunk, the six
  feature blocks are concatenated and fused by an extra 1x1 convolution
  before the final 1x1 layer;
* ``multi_channel`` - the phases form the channels of one input image.

All hidden convolutions carry batch normalization and ReLU; the final 1x1
layer carries a channel softmax instead. Hidden widths can be divided by a
scale factor for desk-scale experiments without changing the wiring.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import (
    BatchNormState,
    Tensor,
    backward,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv_transpose2d,
    maxpool2x2,
    relu,
    slice_channels,
    softmax_channels,
)
from .nn import AdamState, adam_step, dice_loss, glorot_uniform

NUM_PHASES = 6
FCN_WIDTH = 32
FCN_DILATIONS = (1, 1, 2, 4, 8, 16, 1)
UNET_ENCODER_WIDTHS = (16, 32, 64, 128)
DEFAULT_SINGLE_PHASE = 2  # late arterial


# ---------------------------------------------------------------------------
# input configurations


@dataclass(frozen=True)
class InputConfig:
    """How the contrast phases enter the network (labelled I, II, III)."""

    kind: str
    phase: int = DEFAULT_SINGLE_PHASE
    num_phases: int = NUM_PHASES

    SINGLE_PHASE = "single_phase"
    SEPARATE_PHASES = "separate_phases"
    MULTI_CHANNEL = "multi_channel"
    _LABELS = {"I": SINGLE_PHASE, "II": SEPARATE_PHASES, "III": MULTI_CHANNEL}

    def __post_init__(self):
        if self.kind not in self._LABELS.values():
            raise ValueError(f"unknown input configuration kind: {self.kind!r}")
        if self.num_phases < 1:
            raise ValueError("num_phases must be positive")
        if not (0 <= self.phase < self.num_phases):
            raise ValueError(
                f"phase index {self.phase} out of range for {self.num_phases} phases")

    @classmethod
    def single_phase(cls, phase: int = DEFAULT_SINGLE_PHASE) -> "InputConfig":
        return cls(cls.SINGLE_PHASE, phase=phase)

    @classmethod
    def separate_phases(cls) -> "InputConfig":
        return cls(cls.SEPARATE_PHASES)

    @classmethod
    def multi_channel(cls) -> "InputConfig":
        return cls(cls.MULTI_CHANNEL)

    @classmethod
    def from_label(cls, label: str, phase: int = DEFAULT_SINGLE_PHASE) -> "InputConfig":
        if label not in cls._LABELS:
            raise ValueError(
                f"unknown input configuration {label!r}; valid options: I, II, III")
        kind = cls._LABELS[label]
        return cls(kind, phase=phase if kind == cls.SINGLE_PHASE else DEFAULT_SINGLE_PHASE)

    @property
    def label(self) -> str:
        return {v: k for k, v in self._LABELS.items()}[self.kind]

    @property
    def trunk_in_channels(self) -> int:
        return self.num_phases if self.kind == self.MULTI_CHANNEL else 1


# ---------------------------------------------------------------------------
# architecture descriptions


@dataclass(frozen=True)
class DilatedFCNSpec:
    """Sequential dilated FCN: hidden 3x3 stages plus a 1x1 head."""

    width: int = FCN_WIDTH
    dilations: tuple[int, ...] = FCN_DILATIONS

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("width must be positive")
        if any(d < 1 for d in self.dilations):
            raise ValueError("dilations must be positive")

    def layers(self) -> list[tuple[int, int]]:
        """(kernel, dilation) per layer, final 1x1 head included."""
        return [(3, d) for d in self.dilations] + [(1, 1)]


@dataclass(frozen=True)
class UNetSpec:
    """Four-stage U-net with three skip connections."""

    encoder_widths: tuple[int, ...] = UNET_ENCODER_WIDTHS

    def __post_init__(self):
        if len(self.encoder_widths) != 4:
            raise ValueError("the U-net has exactly four resolution stages")
        if any(w < 1 for w in self.encoder_widths):
            raise ValueError("encoder widths must be positive")

    @property
    def num_pools(self) -> int:
        return len(self.encoder_widths) - 1

    @property
    def spatial_divisor(self) -> int:
        return 2 ** self.num_pools


def receptive_field(spec: DilatedFCNSpec) -> tuple[int, int]:
    """Receptive field of the sequential FCN: 1 + sum(d_i * (k_i - 1))."""
    extent = 1 + sum(d * (k - 1) for k, d in spec.layers())
    return (extent, extent)


# ---------------------------------------------------------------------------
# layers


class ConvLayer:
    def __init__(self, name: str, in_ch: int, out_ch: int, ksize: int,
                 dilation: int, rng: np.random.Generator, dtype):
        fan_in = in_ch * ksize * ksize
        fan_out = out_ch * ksize * ksize
        self.name = name
        self.dilation = dilation
        self.weight = glorot_uniform((out_ch, in_ch, ksize, ksize), fan_in, fan_out,
                                     rng, dtype)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.dilation)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


class ConvTransposeLayer:
    def __init__(self, name: str, in_ch: int, out_ch: int, rng: np.random.Generator, dtype):
        self.name = name
        self.weight = glorot_uniform((in_ch, out_ch, 2, 2), in_ch * 4, out_ch * 4,
                                     rng, dtype)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


class BatchNormLayer:
    def __init__(self, name: str, channels: int, dtype):
        self.name = name
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.state = BatchNormState(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.state, training)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}


class ConvBNRelu:
    """3x3 (or 1x1) convolution followed by batch norm and ReLU."""

    def __init__(self, name: str, in_ch: int, out_ch: int, rng: np.random.Generator,
                 dtype, ksize: int = 3, dilation: int = 1):
        self.conv = ConvLayer(name, in_ch, out_ch, ksize, dilation, rng, dtype)
        self.bn = BatchNormLayer(f"{name}_bn", out_ch, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return relu(self.bn(self.conv(x), training))

    def params(self) -> dict[str, Tensor]:
        return {**self.conv.params(), **self.bn.params()}


# ---------------------------------------------------------------------------
# networks


class Network:
    """A built, parameterized segmentation network.

    ``params`` maps unique names to the learned tensors (conv weights and
    biases, batch-norm gamma/beta); batch-norm running statistics live in
    ``bn_states`` and are not learned.
    """

    def __init__(self, architecture: str, input_config: InputConfig,
                 width_divisor: int, dtype):
        self.architecture = architecture
        self.input_config = input_config
        self.width_divisor = width_divisor
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, BatchNormState] = {}

    def _register(self, *blocks) -> None:
        for block in blocks:
            for name, p in block.params().items():
                if name in self.params:
                    raise ValueError(f"duplicate parameter name: {name}")
                self.params[name] = p
            bn = block.bn if isinstance(block, ConvBNRelu) else (
                block if isinstance(block, BatchNormLayer) else None)
            if bn is not None:
                self.bn_states[bn.name] = bn.state

    # -- input wiring -------------------------------------------------------

    def _check_phases(self, phases: int) -> None:
        cfg = self.input_config
        if cfg.kind == InputConfig.SINGLE_PHASE:
            if phases != 1 and phases != cfg.num_phases:
                raise ValueError(
                    f"single-phase input needs 1 or {cfg.num_phases} phase channels, got {phases}")
        elif phases != cfg.num_phases:
            raise ValueError(
                f"input configuration {cfg.label} needs {cfg.num_phases} phase "
                f"channels, got {phases}")

    def forward(self, batch, training: bool = False) -> Tensor:
        """Map a phase stack [N,P,H,W] to per-pixel class probabilities [N,2,H,W]."""
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if x.ndim != 4:
            raise ValueError(f"forward expects [N,P,H,W], got shape {x.shape}")
        self._check_phases(x.shape[1])
        self._check_spatial(x.shape[2], x.shape[3])
        cfg = self.input_config
        if cfg.kind == InputConfig.SINGLE_PHASE:
            if x.shape[1] != 1:
                x = slice_channels(x, cfg.phase, cfg.phase + 1)
            h = self._trunk(x, training)
        elif cfg.kind == InputConfig.MULTI_CHANNEL:
            h = self._trunk(x, training)
        else:
            feats = [self._trunk(slice_channels(x, p, p + 1), training)
                     for p in range(cfg.num_phases)]
            h = self.merge(concat_channels(feats), training)
        return softmax_channels(self.final(h))

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {n: p.data for n, p in self.params.items()}
        for name, bn in self.bn_states.items():
            state[f"{name}.running_mean"] = bn.running_mean
            state[f"{name}.running_var"] = bn.running_var
            state[f"{name}.updates"] = np.asarray(float(bn.updates), dtype=np.float32)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter '{name}'")
            value = np.asarray(state[name], dtype=p.data.dtype)
            if value.shape != p.data.shape:
                raise ValueError(
                    f"checkpoint parameter '{name}' has shape {value.shape}, "
                    f"expected {p.data.shape}")
            p.data = value.copy()
        for name, bn in self.bn_states.items():
            for field_name in ("running_mean", "running_var"):
                key = f"{name}.{field_name}"
                if key not in state:
                    raise KeyError(f"checkpoint is missing '{key}'")
                value = np.asarray(state[key], dtype=bn.running_mean.dtype)
                setattr(bn, field_name, value.copy())
            updates_key = f"{name}.updates"
            if updates_key in state:
                bn.updates = int(np.asarray(state[updates_key]).reshape(()))
            else:
                bn.updates = 1

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    # subclass hooks
    def _trunk(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def _check_spatial(self, h: int, w: int) -> None:
        pass


class DilatedFCN(Network):
    def __init__(self, input_config: InputConfig, width: int,
                 rng: np.random.Generator, dtype, width_divisor: int):
        super().__init__("dilated_fcn", input_config, width_divisor, dtype)
        self.spec = DilatedFCNSpec(width=width)
        in_ch = input_config.trunk_in_channels
        self.stages: list[ConvBNRelu] = []
        for i, d in enumerate(self.spec.dilations, start=1):
            stage = ConvBNRelu(f"conv{i}", in_ch, width, rng, dtype, ksize=3, dilation=d)
            self.stages.append(stage)
            in_ch = width
        self._register(*self.stages)
        if input_config.kind == InputConfig.SEPARATE_PHASES:
            self.merge_block = ConvBNRelu("merge", width * input_config.num_phases,
                                          width, rng, dtype, ksize=1)
            self._register(self.merge_block)
        self.final_conv = ConvLayer("final", width, 2, 1, 1, rng, dtype)
        self._register(self.final_conv)

    def _trunk(self, x: Tensor, training: bool) -> Tensor:
        h = x
        for stage in self.stages:
            h = stage(h, training)
        return h

    def merge(self, h: Tensor, training: bool) -> Tensor:
        return self.merge_block(h, training)

    def final(self, h: Tensor) -> Tensor:
        return self.final_conv(h)


class UNet(Network):
    def __init__(self, input_config: InputConfig, encoder_widths: Sequence[int],
                 rng: np.random.Generator, dtype, width_divisor: int):
        super().__init__("unet", input_config, width_divisor, dtype)
        self.spec = UNetSpec(encoder_widths=tuple(encoder_widths))
        w1, w2, w3, w4 = self.spec.encoder_widths
        in_ch = input_config.trunk_in_channels

        def double_block(name, cin, cout):
            return (ConvBNRelu(f"{name}_conv1", cin, cout, rng, dtype),
                    ConvBNRelu(f"{name}_conv2", cout, cout, rng, dtype))

        self.enc1 = double_block("enc1", in_ch, w1)
        self.enc2 = double_block("enc2", w1, w2)
        self.enc3 = double_block("enc3", w2, w3)
        self.bottom = double_block("bottom", w3, w4)
        self.up3 = ConvTransposeLayer("up3", w4, w3, rng, dtype)
        self.up3_bn = BatchNormLayer("up3_bn", w3, dtype)
        self.dec3 = double_block("dec3", 2 * w3, w3)
        self.up2 = ConvTransposeLayer("up2", w3, w2, rng, dtype)
        self.up2_bn = BatchNormLayer("up2_bn", w2, dtype)
        self.dec2 = double_block("dec2", 2 * w2, w2)
        self.up1 = ConvTransposeLayer("up1", w2, w1, rng, dtype)
        self.up1_bn = BatchNormLayer("up1_bn", w1, dtype)
        self.dec1 = double_block("dec1", 2 * w1, w1)
        for pair in (self.enc1, self.enc2, self.enc3, self.bottom):
            self._register(*pair)
        self._register(self.up3, self.up3_bn, *self.dec3)
        self._register(self.up2, self.up2_bn, *self.dec2)
        self._register(self.up1, self.up1_bn, *self.dec1)
        if input_config.kind == InputConfig.SEPARATE_PHASES:
            self.merge_block = ConvBNRelu("merge", w1 * input_config.num_phases, w1,
                                          rng, dtype, ksize=1)
            self._register(self.merge_block)
        self.final_conv = ConvLayer("final", w1, 2, 1, 1, rng, dtype)
        self._register(self.final_conv)

    def _check_spatial(self, h: int, w: int) -> None:
        div = self.spec.spatial_divisor
        if h % div or w % div:
            raise ValueError(
                f"U-net input spatial dims must be divisible by {div}, got {h}x{w}")

    @staticmethod
    def _run(pair, x, training):
        return pair[1](pair[0](x, training), training)

    def _trunk(self, x: Tensor, training: bool) -> Tensor:
        e1 = self._run(self.enc1, x, training)
        e2 = self._run(self.enc2, maxpool2x2(e1), training)
        e3 = self._run(self.enc3, maxpool2x2(e2), training)
        b = self._run(self.bottom, maxpool2x2(e3), training)
        u3 = relu(self.up3_bn(self.up3(b), training))
        d3 = self._run(self.dec3, concat_channels([u3, e3]), training)
        u2 = relu(self.up2_bn(self.up2(d3), training))
        d2 = self._run(self.dec2, concat_channels([u2, e2]), training)
        u1 = relu(self.up1_bn(self.up1(d2), training))
        return self._run(self.dec1, concat_channels([u1, e1]), training)

    def merge(self, h: Tensor, training: bool) -> Tensor:
        return self.merge_block(h, training)

    def final(self, h: Tensor) -> Tensor:
        return self.final_conv(h)


# ---------------------------------------------------------------------------
# builders


def _scaled_width(width: int, divisor: int) -> int:
    if divisor < 1 or width % divisor:
        raise ValueError(
            f"width divisor {divisor} must be a positive divisor of {width}")
    return width // divisor


def build_dilated_fcn(input_config: InputConfig, seed: int = 0,
                      width_divisor: int = 1, dtype=np.float32) -> DilatedFCN:
    """Dilated FCN with Glorot-initialized weights, deterministic per seed."""
    width = _scaled_width(FCN_WIDTH, width_divisor)
    rng = np.random.default_rng(seed)
    return DilatedFCN(input_config, width, rng, dtype, width_divisor)


def build_unet(input_config: InputConfig, seed: int = 0,
               width_divisor: int = 1, dtype=np.float32) -> UNet:
    """Four-stage U-net with Glorot-initialized weights, deterministic per seed."""
    widths = tuple(_scaled_width(w, width_divisor) for w in UNET_ENCODER_WIDTHS)
    rng = np.random.default_rng(seed)
    return UNet(input_config, widths, rng, dtype, width_divisor)


ARCHITECTURES = {"dilated_fcn": build_dilated_fcn, "unet": build_unet}


def build_network(architecture: str, input_config: InputConfig, seed: int = 0,
                  width_divisor: int = 1, dtype=np.float32) -> Network:
    if architecture not in ARCHITECTURES:
        raise ValueError(
            f"unknown architecture {architecture!r}; valid options: "
            + ", ".join(sorted(ARCHITECTURES)))
    return ARCHITECTURES[architecture](input_config, seed=seed,
                                       width_divisor=width_divisor, dtype=dtype)


def count_params(network: Network) -> int:
    """Number of learned scalars (conv weights and biases, batch-norm gamma/beta)."""
    return sum(p.size for p in network.params.values())


# ---------------------------------------------------------------------------
# prediction and training


def predict_volume(network: Network, series) -> np.ndarray:
    """Foreground probability volume [Z,Y,X], predicted slice by slice.

    Runs in eval mode, so the batch-norm running statistics must have been
    initialized by training (or a loaded checkpoint).
    """
    data = series if isinstance(series, np.ndarray) else np.asarray(series.data)
    if data.ndim != 4:
        raise ValueError(f"predict_volume expects a [T,Z,Y,X] series, got {data.shape}")
    t, z, y, x = data.shape
    out = np.empty((z, y, x), dtype=np.float32)
    for iz in range(z):
        stack = np.ascontiguousarray(data[:, iz], dtype=network.dtype)[None]
        probs = network.forward(Tensor(stack), training=False)
        out[iz] = probs.data[0, 1]
    return out


def train(network: Network, samples: Sequence, iterations: int, seed: int,
          adam: AdamState | None = None, start_iteration: int = 0,
          checkpoint_every: int = 0,
          checkpoint_fn: Callable[[int, Network, AdamState], None] | None = None,
          ) -> list[float]:
    """Train on uniformly sampled single-slice mini batches with Dice loss.

    Returns the per-iteration loss trace. Sampling is driven by a dedicated
    generator seeded with ``seed``; resuming at ``start_iteration`` replays
    the generator to that point, so an interrupted run continues exactly.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    if not samples:
        raise ValueError("training dataset is empty")
    network._check_phases(samples[0].image.shape[0])
    if adam is None:
        adam = AdamState()
    rng = np.random.default_rng(seed)
    for _ in range(start_iteration):
        rng.integers(len(samples))

    trace: list[float] = []
    for it in range(start_iteration + 1, iterations + 1):
        sample = samples[int(rng.integers(len(samples)))]
        x = Tensor(np.ascontiguousarray(sample.image, dtype=network.dtype)[None])
        target = Tensor(sample.mask[None, None].astype(network.dtype))
        probs = network.forward(x, training=True)
        fg = slice_channels(probs, 1, 2)
        loss = dice_loss(fg, target)
        backward(loss)
        adam_step(network.params, adam)
        network.zero_grads()
        trace.append(loss.item())
        if checkpoint_every and checkpoint_fn is not None and it % checkpoint_every == 0:
            checkpoint_fn(it, network, adam)
    return trace
