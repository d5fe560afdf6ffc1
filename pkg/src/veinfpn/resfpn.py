"""Residual feature pyramid enhancement network.

A bottom-up stack of structure-detection blocks (stride-2 conv + ReLU with a
1x1 projected shortcut and batch norm) feeds a feature aggregation module that
upsamples every level's structure features to input resolution, projects them
to a shared channel count, and fuses them into one vein-probability map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import GeometryError, ParameterError
from .presentation import Presentation
from .tensor import (
    BatchNormParams,
    Conv2dParams,
    Tensor,
    add,
    batchnorm,
    concat_channels,
    conv2d,
    relu,
    sigmoid,
    upsample_nearest,
)


@dataclass
class ModelConfig:
    in_channels: int = 1
    channels: tuple[int, ...] = (24, 48, 96, 192)
    kernel: int = 5
    n_ch: int = 8
    fuse_hidden: int = 32
    fuse_kernel: int = 3
    alpha: float = 0.10
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    # initial vein probability: biases of every map-producing conv start at its logit
    prior: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels:
            raise ParameterError("need at least one SDBlock")
        if self.kernel % 2 == 0 or self.fuse_kernel % 2 == 0:
            raise ParameterError("kernel sizes must be odd so stride-2 halves the resolution exactly")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError("alpha must lie in [0, 1]")
        if not 0.0 < self.prior < 1.0:
            raise ParameterError("prior must lie in (0, 1)")

    @property
    def levels(self) -> int:
        return len(self.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class SDBlock:
    c_f: Conv2dParams
    c_i: Conv2dParams
    bn: BatchNormParams

    def __post_init__(self) -> None:
        if self.c_f.stride != 2 or self.c_i.stride != 2:
            raise ParameterError("SDBlock convolutions must use stride 2")
        if self.c_f.c_out != self.c_i.c_out or self.c_f.c_in != self.c_i.c_in:
            raise ParameterError("C_F and C_I must map the same channel counts")

    def parameters(self) -> list[Tensor]:
        return self.c_f.parameters() + self.c_i.parameters() + self.bn.parameters()


@dataclass
class FAM:
    per_level: list[Conv2dParams]
    fuse1: Conv2dParams
    fuse2: Conv2dParams

    @property
    def factors(self) -> list[int]:
        return [2 ** (level + 1) for level in range(len(self.per_level))]

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for c in self.per_level:
            out += c.parameters()
        return out + self.fuse1.parameters() + self.fuse2.parameters()


@dataclass
class ResFPNModel:
    blocks: list[SDBlock]
    fam: FAM
    alpha: float = 0.10
    config: ModelConfig = field(default_factory=ModelConfig)

    @classmethod
    def build(cls, config: ModelConfig | None = None) -> "ResFPNModel":
        cfg = config or ModelConfig()
        rng = np.random.default_rng(cfg.seed)
        blocks = []
        c_prev = cfg.in_channels
        pad = cfg.kernel // 2
        for c in cfg.channels:
            blocks.append(
                SDBlock(
                    Conv2dParams.create(c_prev, c, cfg.kernel, stride=2, padding=pad, rng=rng),
                    Conv2dParams.create(c_prev, c, 1, stride=2, padding=0, rng=rng),
                    BatchNormParams.create(c, eps=cfg.bn_eps, momentum=cfg.bn_momentum),
                )
            )
            c_prev = c
        per_level = [Conv2dParams.create(c, cfg.n_ch, 1, rng=rng) for c in cfg.channels]
        fuse1 = Conv2dParams.create(
            cfg.levels * cfg.n_ch, cfg.fuse_hidden, cfg.fuse_kernel, padding=cfg.fuse_kernel // 2, rng=rng
        )
        fuse2 = Conv2dParams.create(cfg.fuse_hidden, 1, 1, rng=rng)
        logit = float(np.log(cfg.prior / (1.0 - cfg.prior)))
        for c in [*per_level, fuse2]:
            c.bias.data[...] = logit
        model = cls(blocks, FAM(per_level, fuse1, fuse2), cfg.alpha, cfg)
        model._name_parameters()
        return model

    @property
    def levels(self) -> int:
        return len(self.blocks)

    @property
    def multiple(self) -> int:
        """Input height and width must be divisible by this."""
        return 2**self.levels

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        for i, b in enumerate(self.blocks):
            named += [
                (f"block{i}.c_f.weight", b.c_f.weight),
                (f"block{i}.c_f.bias", b.c_f.bias),
                (f"block{i}.c_i.weight", b.c_i.weight),
                (f"block{i}.c_i.bias", b.c_i.bias),
                (f"block{i}.bn.gamma", b.bn.gamma),
                (f"block{i}.bn.beta", b.bn.beta),
            ]
        for i, c in enumerate(self.fam.per_level):
            named += [(f"fam.level{i}.weight", c.weight), (f"fam.level{i}.bias", c.bias)]
        named += [
            ("fam.fuse1.weight", self.fam.fuse1.weight),
            ("fam.fuse1.bias", self.fam.fuse1.bias),
            ("fam.fuse2.weight", self.fam.fuse2.weight),
            ("fam.fuse2.bias", self.fam.fuse2.bias),
        ]
        return named

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, b in enumerate(self.blocks):
            out += [(f"block{i}.bn.running_mean", b.bn.running_mean), (f"block{i}.bn.running_var", b.bn.running_var)]
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        block, _, stat = name.split(".")
        bn = self.blocks[int(block[len("block"):])].bn
        setattr(bn, stat, np.asarray(value, dtype=np.float32).reshape(-1).copy())

    def _name_parameters(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def train(self, mode: bool = True) -> "ResFPNModel":
        for b in self.blocks:
            b.bn.training = mode
        return self

    def eval(self) -> "ResFPNModel":
        return self.train(False)


def sdblock_forward(block: SDBlock, x: Tensor, update_stats: bool = True) -> tuple[Tensor, Tensor]:
    """Structure features ``s = ReLU(C_F(x))`` and next input ``BN(C_I(x) + s)``."""
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise GeometryError(f"SDBlock input {h}x{w} is not divisible by 2")
    s = relu(conv2d(x, block.c_f))
    shortcut = conv2d(x, block.c_i)
    if shortcut.shape != s.shape:
        raise GeometryError(f"shortcut shape {shortcut.shape} != structure shape {s.shape}")
    x_next = batchnorm(add(shortcut, s), block.bn, update_stats)
    return s, x_next


def fam_forward(fam: FAM, s_list: list[Tensor], size: tuple[int, int]) -> tuple[Tensor, Tensor, list[Tensor]]:
    """Aggregate structure features into ``(y_hat, y, s_hat_list)``.

    The per-level 1x1 projection is applied before the nearest-neighbour
    upsampling; both are pointwise in space so the order does not change the
    result, only the cost.
    """
    if len(s_list) != len(fam.per_level):
        raise GeometryError(f"FAM expects {len(fam.per_level)} levels, got {len(s_list)}")
    s_hat = []
    for s, proj, factor in zip(s_list, fam.per_level, fam.factors):
        if (s.shape[2] * factor, s.shape[3] * factor) != tuple(size):
            raise GeometryError(
                f"level with {s.shape[2]}x{s.shape[3]} features does not upsample by {factor} to {size}"
            )
        s_hat.append(upsample_nearest(conv2d(s, proj), factor))
    f_comp = concat_channels(s_hat)
    y_hat = conv2d(relu(conv2d(f_comp, fam.fuse1)), fam.fuse2)
    return y_hat, sigmoid(y_hat), s_hat


def resfpn_forward(model: ResFPNModel, image: Tensor, update_stats: bool = True) -> tuple[Tensor, list[Tensor]]:
    """Vein probability map ``y`` (N x 1 x H x W) and the per-level ``s_hat`` maps."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.data.ndim != 4 or image.shape[1] != model.config.in_channels:
        raise GeometryError(f"expected N x {model.config.in_channels} x H x W input, got {image.shape}")
    h, w = image.shape[2:]
    m = model.multiple
    if h % m or w % m:
        raise GeometryError(f"input {h}x{w} must be divisible by {m} for {model.levels} SDBlocks")
    x = image
    s_list = []
    for block in model.blocks:
        s, x = sdblock_forward(block, x, update_stats)
        s_list.append(s)
    _, y, s_hat = fam_forward(model.fam, s_list, (h, w))
    return y, s_hat


def vein_map(model: ResFPNModel, pixels: np.ndarray) -> np.ndarray:
    """Eval-mode forward on one H x W image, returning the H x W map ``y``."""
    was_training = [b.bn.training for b in model.blocks]
    model.eval()
    try:
        y, _ = resfpn_forward(model, Tensor(pixels[None, None]), update_stats=False)
    finally:
        for b, t in zip(model.blocks, was_training):
            b.bn.training = t
    return y.data[0, 0]


def blend(y: np.ndarray, image: np.ndarray, alpha: float) -> np.ndarray:
    """``alpha * y + (1 - alpha) * image``, clipped into [0, 1]."""
    out = alpha * y.astype(np.float32) + (1.0 - alpha) * image.astype(np.float32)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def enhance(model: ResFPNModel, image: Presentation, alpha: float | None = None) -> Presentation:
    """Blend the network's vein map into the presentation.

    Images whose size is not a multiple of ``2**L`` are run at the working
    size and the map is resampled back.
    """
    a = model.alpha if alpha is None else float(alpha)
    if a == 0.0:
        return Presentation(image.pixels.copy(), image.source_id, image.roi)
    px = image.pixels
    m = model.multiple
    if px.shape[0] % m == 0 and px.shape[1] % m == 0:
        y = vein_map(model, px)
    else:
        from .imaging import resize_bilinear
        from .presentation import WORKING_SIZE

        y = resize_bilinear(vein_map(model, resize_bilinear(px, WORKING_SIZE)), px.shape)
    return Presentation(blend(y, px, a), image.source_id, image.roi)


def param_count(model: ResFPNModel) -> int:
    """Trainable scalars: conv weights/biases and batch-norm gamma/beta."""
    return int(sum(p.data.size for p in model.parameters()))
