"""Audio branch (ResDAVEnet, DAVEnet-style) and image branch encoders."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .seeding import stream


class Module:
    """Parameter container; walks attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray) and name.startswith("running_"):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: stored shape {state[name].shape} vs model {p.shape}")
            p.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[name]


def _uniform(rng, shape, fan_in, gain, dtype):
    bound = gain * math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, bias=False, dtype=np.float32):
        pad = (kernel - 1) // 2
        self.stride, self.pad = stride, pad
        self.weight = _uniform(rng, (c_out, c_in, kernel), c_in * kernel, math.sqrt(2.0), dtype)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class BatchNorm1d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ad.batchnorm1d(x, self.gamma, self.beta, mode, self.running_mean, self.running_var,
                              self.momentum, self.eps)


class BasicBlock(Module):
    """conv -> BN -> ReLU -> conv -> BN, plus skip, then ReLU.

    The skip gets a strided 1x1 projection (with BN) whenever the stride or
    channel count changes.
    """

    def __init__(self, c_in, c_out, kernel, stride, rng, dtype=np.float32):
        self.conv1 = Conv1d(c_in, c_out, kernel, rng, stride=stride, dtype=dtype)
        self.bn1 = BatchNorm1d(c_out, dtype=dtype)
        self.conv2 = Conv1d(c_out, c_out, kernel, rng, dtype=dtype)
        self.bn2 = BatchNorm1d(c_out, dtype=dtype)
        if stride != 1 or c_in != c_out:
            self.proj = Conv1d(c_in, c_out, 1, rng, stride=stride, dtype=dtype)
            self.proj_bn = BatchNorm1d(c_out, dtype=dtype)
        else:
            self.proj = self.proj_bn = None

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        h = ad.relu(self.bn1(self.conv1(x), mode))
        h = self.bn2(self.conv2(h), mode)
        skip = x if self.proj is None else self.proj_bn(self.proj(x), mode)
        return ad.relu(ad.add(h, skip))


@dataclass
class ResDAVEnetAudioConfig:
    input_mels: int = 40
    stem_channels: int = 128
    stack_channels: tuple[int, ...] = (128, 256, 512, 1024)
    kernel_length: int = 9
    blocks_per_stack: int = 2
    stack_stride: int = 2

    def validate(self) -> None:
        for name in ("input_mels", "stem_channels", "kernel_length", "blocks_per_stack", "stack_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if not self.stack_channels or any(c < 1 for c in self.stack_channels):
            raise ConfigError("stack_channels", "need at least one stack of positive width")
        if self.kernel_length % 2 == 0:
            raise ConfigError("kernel_length", "must be odd for symmetric padding")

    @property
    def embedding_dim(self) -> int:
        return self.stack_channels[-1]

    @property
    def tap_ratios(self) -> list[int]:
        return [self.stack_stride ** (k + 1) for k in range(len(self.stack_channels))]


PAPER_RESDAVENET = ResDAVEnetAudioConfig()
MINI_RESDAVENET = ResDAVEnetAudioConfig(stem_channels=32, stack_channels=(32, 64, 128, 256))


class ResDAVEnetAudio(Module):
    def __init__(self, config: ResDAVEnetAudioConfig, rng, dtype=np.float32):
        config.validate()
        self.config = config
        # one temporal frame spanning every mel channel
        self.stem = Conv1d(config.input_mels, config.stem_channels, 1, rng, bias=True, dtype=dtype)
        self.stem_bn = BatchNorm1d(config.stem_channels, dtype=dtype)
        self.stacks: list[Module] = []
        c_in = config.stem_channels
        for c in config.stack_channels:
            stack = Module()
            stack.blocks = [
                BasicBlock(c_in if b == 0 else c, c, config.kernel_length, config.stack_stride if b == 0 else 1, rng, dtype)
                for b in range(config.blocks_per_stack)
            ]
            self.stacks.append(stack)
            c_in = c

    @property
    def tap_names(self) -> list[str]:
        return [f"L{k + 1}" for k in range(len(self.stacks))]

    @property
    def tap_ratios(self) -> list[int]:
        return self.config.tap_ratios

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def forward_with_taps(self, x: Tensor, mode: str) -> tuple[Tensor, list[tuple[str, Tensor]]]:
        h = self.stem_bn(ad.relu(self.stem(x)), mode)
        taps = []
        for name, stack in zip(self.tap_names, self.stacks):
            for block in stack.blocks:
                h = block(h, mode)
            taps.append((name, h))
        return ad.temporal_mean_pool(h), taps


@dataclass
class DAVEnetAudioConfig:
    """Five conv layers as (channels, kernel, pool-after) triples.

    Layer 1 spans all mel channels over one frame; pooling is max over 3
    frames with stride 2 (halving the frame rate).
    """

    input_mels: int = 40
    layers: tuple[tuple[int, int, bool], ...] = (
        (128, 1, False), (256, 11, True), (512, 17, True), (512, 17, True), (1024, 17, False),
    )

    def validate(self) -> None:
        if self.input_mels < 1:
            raise ConfigError("input_mels", "must be >= 1")
        if len(self.layers) < 1:
            raise ConfigError("layers", "need at least one layer")
        for c, k, _ in self.layers:
            if c < 1 or k < 1 or k % 2 == 0:
                raise ConfigError("layers", f"bad layer (channels={c}, kernel={k}); kernels must be odd")
        if not any(p for _, _, p in self.layers):
            raise ConfigError("layers", "at least one pooled layer is needed for taps")

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1][0]

    @property
    def tap_ratios(self) -> list[int]:
        n_pooled = sum(1 for *_, p in self.layers if p)
        return [2 ** (k + 1) for k in range(n_pooled)]


MINI_DAVENET = DAVEnetAudioConfig(layers=((32, 1, False), (64, 11, True), (128, 17, True), (128, 17, True), (256, 17, False)))


class DAVEnetAudio(Module):
    """Plain CNN audio branch: conv -> BN -> ReLU (-> max-pool) per layer.

    Taps L1..Lk are the outputs of the pooled layers, so tap k runs at
    1/2^k of the input frame rate.
    """

    def __init__(self, config: DAVEnetAudioConfig, rng, dtype=np.float32):
        config.validate()
        self.config = config
        self.convs, self.bns = [], []
        c_in = config.input_mels
        for c, k, _ in config.layers:
            self.convs.append(Conv1d(c_in, c, k, rng, dtype=dtype))
            self.bns.append(BatchNorm1d(c, dtype=dtype))
            c_in = c

    @property
    def tap_names(self) -> list[str]:
        return [f"L{k + 1}" for k in range(len(self.tap_ratios))]

    @property
    def tap_ratios(self) -> list[int]:
        return self.config.tap_ratios

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def forward_with_taps(self, x: Tensor, mode: str) -> tuple[Tensor, list[tuple[str, Tensor]]]:
        h = x
        taps = []
        for conv, bn, (_, _, pool) in zip(self.convs, self.bns, self.config.layers):
            h = ad.relu(bn(conv(h), mode))
            if pool:
                h = ad.maxpool1d(h, 3, 2, 1)
                taps.append((f"L{len(taps) + 1}", h))
        return ad.temporal_mean_pool(h), taps


@dataclass
class ImageEncoderConfig:
    """``mode='presence'`` maps the object-presence vector linearly to D;
    ``mode='pixels'`` runs a three-block strided CNN over the RGB canvas."""

    mode: str = "presence"
    output_dim: int = 256
    vocab_size: int = 40
    image_size: int = 32
    conv_widths: tuple[int, ...] = (16, 32, 64)

    def validate(self) -> None:
        if self.mode not in ("presence", "pixels"):
            raise ConfigError("mode", f"unknown image encoder mode {self.mode!r}")
        if self.output_dim < 1:
            raise ConfigError("output_dim", "must be >= 1")
        if self.mode == "pixels" and len(self.conv_widths) < 1:
            raise ConfigError("conv_widths", "need at least one conv block")


class ImageEncoder(Module):
    def __init__(self, config: ImageEncoderConfig, rng, dtype=np.float32):
        config.validate()
        self.config = config
        self.convs, self.biases = [], []
        if config.mode == "pixels":
            c_in = 3
            for c in config.conv_widths:
                self.convs.append(_uniform(rng, (c, c_in, 3, 3), c_in * 9, math.sqrt(2.0), dtype))
                self.biases.append(Tensor(np.zeros(c), requires_grad=True, dtype=dtype))
                c_in = c
            fan_in = c_in
        else:
            fan_in = config.vocab_size
        self.proj_w = _uniform(rng, (config.output_dim, fan_in), fan_in, 1.0, dtype)
        self.proj_b = Tensor(np.zeros(config.output_dim), requires_grad=True, dtype=dtype)

    def named_parameters(self, prefix=""):
        for i, (w, b) in enumerate(zip(self.convs, self.biases)):
            yield f"{prefix}conv{i}.weight", w
            yield f"{prefix}conv{i}.bias", b
        yield f"{prefix}proj.weight", self.proj_w
        yield f"{prefix}proj.bias", self.proj_b

    def __call__(self, x: Tensor) -> Tensor:
        if self.config.mode == "presence":
            if x.data.ndim != 2 or x.shape[1] != self.config.vocab_size:
                raise ShapeError(f"presence input must be (B, {self.config.vocab_size}), got {x.shape}")
            return ad.linear(x, self.proj_w, self.proj_b)
        s = self.config.image_size
        if x.data.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ShapeError(f"pixel input must be (B, 3, {s}, {s}), got {x.shape}")
        h = x
        for w, b in zip(self.convs, self.biases):
            h = ad.relu(ad.conv2d(h, w, b, stride=2, pad=1))
        return ad.linear(ad.spatial_mean_pool(h), self.proj_w, self.proj_b)


# -- two-branch model ----------------------------------------------------------------

MODEL_KINDS = ("resdavenet", "davenet")


@dataclass
class GroundingModel:
    kind: str
    audio: Module
    image: ImageEncoder
    seed: int = 0
    step: int = 0
    dtype: type = field(default=np.float32)

    def parameters(self) -> list[Tensor]:
        return self.audio.parameters() + self.image.parameters()

    def state(self) -> dict[str, np.ndarray]:
        out = {f"audio.{k}": v for k, v in self.audio.state().items()}
        out.update({f"image.{k}": v for k, v in self.image.state().items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.audio.load_state({k[6:]: v for k, v in state.items() if k.startswith("audio.")})
        self.image.load_state({k[6:]: v for k, v in state.items() if k.startswith("image.")})

    def config_dict(self) -> dict:
        return {"audio": asdict(self.audio.config), "image": asdict(self.image.config)}

    @property
    def tap_names(self) -> list[str]:
        return self.audio.tap_names


def construct_model(kind: str, audio_config=None, image_config: ImageEncoderConfig | None = None,
                    seed: int = 0, dtype=np.float32) -> GroundingModel:
    """Build both branches with fan-in scaled uniform init drawn from ``seed``."""
    if kind == "resdavenet":
        audio_config = audio_config or MINI_RESDAVENET
        audio = ResDAVEnetAudio(audio_config, stream(seed, "init", "audio"), dtype)
    elif kind == "davenet":
        audio_config = audio_config or MINI_DAVENET
        audio = DAVEnetAudio(audio_config, stream(seed, "init", "audio"), dtype)
    else:
        raise ConfigError("kind", f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    image_config = image_config or ImageEncoderConfig(output_dim=audio.embedding_dim)
    if image_config.output_dim != audio.embedding_dim:
        raise ConfigError("output_dim", f"image output {image_config.output_dim} != audio embedding {audio.embedding_dim}")
    image = ImageEncoder(image_config, stream(seed, "init", "image"), dtype)
    return GroundingModel(kind, audio, image, seed=seed, dtype=dtype)


def config_from_dict(kind: str, d: dict):
    if kind == "resdavenet":
        return ResDAVEnetAudioConfig(**{**d, "stack_channels": tuple(d["stack_channels"])})
    return DAVEnetAudioConfig(input_mels=d["input_mels"], layers=tuple(tuple(layer) for layer in d["layers"]))


def image_config_from_dict(d: dict) -> ImageEncoderConfig:
    return ImageEncoderConfig(**{**d, "conv_widths": tuple(d["conv_widths"])})


# -- forward helpers -------------------------------------------------------------------


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def audio_forward_with_taps(model: GroundingModel, features, mode: str = "infer"):
    """Run the audio branch on (F, T) or (B, F, T) features.

    Returns ``(embedding, [(tap name, tap tensor), ...])``; unbatched input
    gives an unbatched embedding (D,) and taps (C_k, T_k).
    """
    x = _as_input(features, model.dtype)
    if x.data.ndim not in (2, 3):
        raise ShapeError(f"audio features must be (F, T) or (B, F, T), got {x.shape}")
    if x.shape[-1] == 0:
        raise ShapeError("audio features have no frames")
    unbatched = x.data.ndim == 2
    if unbatched:
        x = ad.reshape(x, (1,) + x.shape)
    emb, taps = model.audio.forward_with_taps(x, mode)
    if unbatched:
        emb = ad.reshape(emb, emb.shape[1:])
        taps = [(name, ad.reshape(t, t.shape[1:])) for name, t in taps]
    return emb, taps


def image_forward(model: GroundingModel, image) -> Tensor:
    """Embed one image (pixels (3, H, W) or presence (V,)) or a batch of them."""
    x = _as_input(image, model.dtype)
    single = x.data.ndim in (1, 3)
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    out = model.image(x)
    return ad.reshape(out, out.shape[1:]) if single else out


def image_input(model: GroundingModel, images) -> np.ndarray:
    """Stack the encoder's input view of a sequence of ImageRecords."""
    if model.image.config.mode == "presence":
        return np.stack([im.presence for im in images]).astype(model.dtype)
    return np.stack([im.pixels for im in images]).astype(model.dtype)
