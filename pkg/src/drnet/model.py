"""DRNet: dense-residual encoder-decoder producing per-pixel vessel probabilities.

Encoder stages run conv3x3 -> DropBlock -> 2x2 max pool -> double residual
block, doubling the channel width at every step.  The final encoder output
passes through one more conv + DropBlock (arriving at the first aggregation
already compressed).  The decoder interleaves adaptive aggregation blocks
with conv/DropBlock/residual blocks, and the head upsamples back to full
resolution before a 1x1 convolution and sigmoid.

Every aggregation receives the outputs of all residual blocks computed so
far; the output of the immediately preceding stage enters directly (no
compression), all others are compressed first.
"""

from __future__ import annotations

import io
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import (
    AdaptiveAggregation,
    AggregationSpec,
    Compression,
    DoubleResidualBlock,
    DropBlock2d,
    DropBlockConfig,
    Resample,
    count_scalar_parameters,
    init_module_weights,
)
from .errors import CheckpointError, ConfigError, NumericError, ShapeError

CHECKPOINT_FORMAT_VERSION = 1

# Sigmoid saturates to exact 0/1 in float32 for large logits; clamp keeps the
# advertised open-interval output range.
_PROB_EPS = 1e-7


@dataclass
class ModelConfig:
    """Hyperparameters defining one DRNet instance."""

    in_channels: int = 1
    initial_channels: int = 16
    encoder_steps: int = 4
    input_size: int = 1024
    dropblock: DropBlockConfig = field(default_factory=DropBlockConfig)

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.initial_channels < 1:
            raise ConfigError(f"initial_channels must be >= 1, got {self.initial_channels}")
        if self.encoder_steps < 2:
            raise ConfigError(
                f"encoder_steps must be >= 2 (one aggregation minimum), got {self.encoder_steps}"
            )
        if self.input_size < 1 or self.input_size % 2**self.encoder_steps != 0:
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by "
                f"2^{self.encoder_steps} = {2**self.encoder_steps}"
            )
        self.dropblock.validate()
        bottleneck = self.input_size // 2**self.encoder_steps
        if self.dropblock.block_size > bottleneck:
            raise ConfigError(
                f"dropblock block_size {self.dropblock.block_size} does not fit the "
                f"{bottleneck}x{bottleneck} bottleneck feature map"
            )

    def encoder_widths(self) -> list[int]:
        return [self.initial_channels * 2**k for k in range(self.encoder_steps)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        db = d.pop("dropblock")
        return cls(dropblock=DropBlockConfig(**db), **d)


class _EncoderStage(nn.Module):
    """conv3x3 -> ReLU -> DropBlock -> 2x2 max pool -> double residual block."""

    def __init__(self, in_channels: int, out_channels: int, dropblock: DropBlockConfig):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.drop = DropBlock2d(dropblock.block_size, dropblock.keep_prob)
        self.drb = DoubleResidualBlock(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.drop(F.relu(self.conv(x)))
        return self.drb(F.max_pool2d(x, 2))


class _DecoderBlock(nn.Module):
    """conv3x3 -> ReLU -> DropBlock -> double residual block."""

    def __init__(self, in_channels: int, out_channels: int, dropblock: DropBlockConfig):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.drop = DropBlock2d(dropblock.block_size, dropblock.keep_prob)
        self.drb = DoubleResidualBlock(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.drb(self.drop(F.relu(self.conv(x))))


class DRNet(nn.Module):
    """The full encoder-decoder network.

    Mode semantics: the torch ``train()/eval()`` switch behaves as usual and
    is what the optimization loop uses (batch-norm batch statistics plus
    active DropBlock).  The :meth:`predict_map` evaluation surface instead
    always applies batch norm with its running statistics; its ``training``
    flag only toggles DropBlock, so ``training=True`` with keep_prob 1 is
    bit-identical to inference.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        s = config.encoder_steps
        size = config.input_size
        db = config.dropblock
        widths = config.encoder_widths()

        stages = []
        prev = config.in_channels
        for w in widths:
            stages.append(_EncoderStage(prev, w, db))
            prev = w
        self.encoder = nn.ModuleList(stages)
        # Residual-block output k sits at size / 2^(k+1) with widths[k] channels.
        drb_shapes = [(widths[k], size // 2 ** (k + 1)) for k in range(s)]

        # Decoder geometry: aggregation j (0-based) targets size / 2^(s-1-j)
        # at working width initial * 2^(s-2-j).
        agg_targets = [size // 2 ** (s - 1 - j) for j in range(s - 1)]
        agg_widths = [config.initial_channels * 2 ** (s - 2 - j) for j in range(s - 1)]
        n_inputs = [s + j for j in range(s - 1)]
        compressed = [max(1, agg_widths[j] // n_inputs[j]) for j in range(s - 1)]

        # The trailing conv + DropBlock compress the last encoder output so it
        # reaches the first aggregation as its direct (pre-compressed) input.
        self.bottleneck_conv = nn.Conv2d(widths[-1], compressed[0], 3, padding=1)
        self.bottleneck_drop = DropBlock2d(db.block_size, db.keep_prob)
        bottleneck_shape = (compressed[0], size // 2**s)

        aggs = []
        blocks = []
        dec_shapes: list[tuple[int, int]] = []
        for j in range(s - 1):
            if j == 0:
                sources = drb_shapes[:-1]
                direct = bottleneck_shape
            else:
                sources = drb_shapes + dec_shapes[: j - 1]
                direct = dec_shapes[j - 1]
            shapes = [(ch, hw, hw) for ch, hw in sources] + [
                (direct[0], direct[1], direct[1])
            ]
            spec = AggregationSpec(
                target_h=agg_targets[j],
                target_w=agg_targets[j],
                compressed_channels=compressed[j],
                direct_index=len(shapes) - 1,
            )
            agg = AdaptiveAggregation(shapes, spec, db)
            aggs.append(agg)
            if j < s - 2:
                blocks.append(_DecoderBlock(agg.out_channels, agg_widths[j], db))
                dec_shapes.append((agg_widths[j], agg_targets[j]))
        self.aggregations = nn.ModuleList(aggs)
        self.decoder_blocks = nn.ModuleList(blocks)

        head_ch = config.initial_channels
        self.head_up = nn.ConvTranspose2d(self.aggregations[-1].out_channels, head_ch, 2, stride=2)
        self.head_conv1 = nn.Conv2d(head_ch, head_ch, 3, padding=1)
        self.head_drop1 = DropBlock2d(db.block_size, db.keep_prob)
        self.head_conv2 = nn.Conv2d(head_ch, head_ch, 3, padding=1)
        self.head_drop2 = DropBlock2d(db.block_size, db.keep_prob)
        self.head_out = nn.Conv2d(head_ch, 1, 1)

    def _check_finite(self, name: str, t: torch.Tensor) -> None:
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite activations after {name}")

    def _set_generator(self, rng_seed: Optional[int]) -> None:
        gen = None
        if rng_seed is not None:
            gen = torch.Generator(device="cpu").manual_seed(int(rng_seed))
        for m in self.modules():
            if isinstance(m, DropBlock2d):
                m.generator = gen

    def forward(self, x: torch.Tensor, rng_seed: Optional[int] = None) -> torch.Tensor:
        if x.dim() != 4:
            raise ShapeError(f"expected (B, C, H, W) input, got shape {tuple(x.shape)}")
        size = self.config.input_size
        if x.shape[1] != self.config.in_channels or x.shape[-2:] != (size, size):
            raise ShapeError(
                f"expected input of shape (B, {self.config.in_channels}, {size}, {size}), "
                f"got {tuple(x.shape)}"
            )
        self._check_finite("input", x)
        self._set_generator(rng_seed)

        drb_outs = []
        t = x
        for i, stage in enumerate(self.encoder):
            t = stage(t)
            self._check_finite(f"encoder_stage_{i}", t)
            drb_outs.append(t)

        t = self.bottleneck_drop(F.relu(self.bottleneck_conv(drb_outs[-1])))
        self._check_finite("bottleneck", t)

        direct = t
        dec_outs: list[torch.Tensor] = []
        for j, agg in enumerate(self.aggregations):
            if j == 0:
                inputs = drb_outs[:-1] + [direct]
            else:
                inputs = drb_outs + dec_outs[: j - 1] + [direct]
            t = agg(inputs)
            self._check_finite(f"aggregation_{j}", t)
            if j < len(self.decoder_blocks):
                t = self.decoder_blocks[j](t)
                self._check_finite(f"decoder_block_{j}", t)
                dec_outs.append(t)
                direct = t

        t = F.relu(self.head_up(t))
        t = self.head_drop1(F.relu(self.head_conv1(t)))
        t = self.head_drop2(F.relu(self.head_conv2(t)))
        logits = self.head_out(t)
        self._check_finite("head", logits)
        prob = torch.sigmoid(logits)
        return torch.clamp(prob, _PROB_EPS, 1.0 - _PROB_EPS)

    def predict_map(
        self,
        image: np.ndarray,
        training: bool = False,
        rng_seed: Optional[int] = None,
    ) -> np.ndarray:
        """Probability map for one (H, W) image, returned as float32 (H, W).

        Batch norm always runs with its stored running statistics here;
        ``training`` enables DropBlock only.
        """
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeError(f"expected a 2-D image, got shape {arr.shape}")
        was_training = self.training
        self.eval()
        if training:
            for m in self.modules():
                if isinstance(m, DropBlock2d):
                    m.train()
        try:
            x = torch.from_numpy(arr).unsqueeze(0).unsqueeze(0)
            dtype = next(self.parameters()).dtype
            with torch.no_grad():
                out = self.forward(x.to(dtype), rng_seed=rng_seed)
            return out[0, 0].to(torch.float32).numpy()
        finally:
            self.train(was_training)

    def parameter_store(self) -> "ParameterStore":
        arrays = OrderedDict(
            (name, tensor.detach().cpu().numpy().copy())
            for name, tensor in self.state_dict().items()
        )
        learnable = tuple(name for name, _ in self.named_parameters())
        return ParameterStore(config=replace_config(self.config), arrays=arrays, learnable=learnable)

    def load_parameter_store(self, store: "ParameterStore") -> None:
        if store.config != self.config:
            raise CheckpointError(
                f"checkpoint config {store.config} does not match model config {self.config}"
            )
        state = self.state_dict()
        if set(state.keys()) != set(store.arrays.keys()):
            raise CheckpointError("checkpoint parameter names do not match the model")
        new_state = {}
        for name, arr in store.arrays.items():
            if tuple(state[name].shape) != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {arr.shape}, "
                    f"model {tuple(state[name].shape)}"
                )
            new_state[name] = torch.from_numpy(arr.copy()).to(state[name].dtype)
        self.load_state_dict(new_state)


def replace_config(config: ModelConfig) -> ModelConfig:
    """Deep copy of a model config (dropblock included)."""
    return replace(config, dropblock=replace(config.dropblock))


@dataclass
class ParameterStore:
    """Named weight arrays plus the config they belong to.

    ``arrays`` holds every state entry (parameters and buffers) keyed by the
    model's state-dict names; ``learnable`` lists which names are trainable
    parameters.  Round-trips through :func:`save_weights` bit-exactly.
    """

    config: ModelConfig
    arrays: "OrderedDict[str, np.ndarray]"
    learnable: tuple[str, ...]
    version: int = CHECKPOINT_FORMAT_VERSION

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterStore):
            return NotImplemented
        if self.config != other.config or self.version != other.version:
            return False
        if self.learnable != other.learnable:
            return False
        if list(self.arrays.keys()) != list(other.arrays.keys()):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)
            for a, b in ((self.arrays[k], other.arrays[k]) for k in self.arrays)
        )

    def scalar_count(self) -> int:
        """Total scalars across learnable arrays (oracle for parameter_count)."""
        return sum(int(np.prod(self.arrays[name].shape)) for name in self.learnable)


def build(config: ModelConfig, rng_seed: int) -> tuple[DRNet, ParameterStore]:
    """Construct a DRNet with seeded variance-scaled initialization."""
    model = DRNet(config)
    gen = torch.Generator(device="cpu").manual_seed(int(rng_seed))
    init_module_weights(model, gen)
    return model, model.parameter_store()


def parameter_count(model: DRNet) -> int:
    """Number of learnable scalar parameters."""
    return count_scalar_parameters(model)


def save_weights(store: ParameterStore, path: Union[str, Path]) -> None:
    """Write a parameter store to a single self-describing checkpoint file.

    The file is an npz archive: a JSON ``__meta__`` entry records the format
    version, the model config, and the array order; every state array is
    stored under its own name.
    """
    meta = {
        "format_version": store.version,
        "config": store.config.to_dict(),
        "order": list(store.arrays.keys()),
        "learnable": list(store.learnable),
    }
    payload = {"__meta__": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for name, arr in store.arrays.items():
        payload[name] = arr
    buf = io.BytesIO()
    np.savez(buf, **payload)
    Path(path).write_bytes(buf.getvalue())


def load_weights(path: Union[str, Path]) -> ParameterStore:
    """Read a checkpoint written by :func:`save_weights`."""
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            if "__meta__" not in data:
                raise CheckpointError(f"{path}: missing checkpoint metadata")
            meta = json.loads(bytes(data["__meta__"].tobytes()).decode("utf-8"))
            version = meta.get("format_version")
            if version != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(
                    f"{path}: unsupported checkpoint format version {version}"
                )
            config = ModelConfig.from_dict(meta["config"])
            arrays = OrderedDict()
            for name in meta["order"]:
                if name not in data:
                    raise CheckpointError(f"{path}: missing array {name!r}")
                arrays[name] = data[name]
            return ParameterStore(
                config=config,
                arrays=arrays,
                learnable=tuple(meta["learnable"]),
                version=version,
            )
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc


def load_model(path: Union[str, Path]) -> DRNet:
    """Convenience: build a model straight from a checkpoint file."""
    store = load_weights(path)
    model = DRNet(store.config)
    model.load_parameter_store(store)
    model.eval()
    return model
