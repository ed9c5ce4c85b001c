"""Generator (3D U-Net with a latent convolutional transformer) and snake-convolution critic."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .tensor import Module, Tensor, kaiming_uniform, ops
from .tensor import functional as F
from .tensor._core import get_default_dtype


# ---------------------------------------------------------------- basic layers


class Conv3d(Module):
    def __init__(self, rng, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int | None = None,
                 gain: float = np.sqrt(2.0), bias: bool = True):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = self.parameter(kaiming_uniform(rng, (cout, cin, kernel, kernel, kernel), cin * kernel ** 3, gain))
        self.bias = self.parameter(np.zeros(cout, dtype=get_default_dtype())) if bias else None

    def forward(self, x):
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng, cin: int, cout: int, gain: float = 1.0):
        self.weight = self.parameter(kaiming_uniform(rng, (cin, cout), cin, gain))
        self.bias = self.parameter(np.zeros(cout, dtype=get_default_dtype()))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        dt = get_default_dtype()
        self.gamma = self.parameter(np.ones(dim, dtype=dt))
        self.beta = self.parameter(np.zeros(dim, dtype=dt))

    def forward(self, x):
        return F.layer_norm(x, self.gamma, self.beta)


class InstanceNorm(Module):
    def __init__(self, channels: int):
        dt = get_default_dtype()
        self.gamma = self.parameter(np.ones(channels, dtype=dt))
        self.beta = self.parameter(np.zeros(channels, dtype=dt))

    def forward(self, x):
        return F.instance_norm(x, self.gamma, self.beta)


class ConvBlock(Module):
    """Two (3x3x3 conv, norm, ReLU) stages."""

    def __init__(self, rng, cin: int, cout: int, norm: bool = True):
        self.convs = [Conv3d(rng, cin, cout), Conv3d(rng, cout, cout)]
        self.norms = [InstanceNorm(cout), InstanceNorm(cout)] if norm else []

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if self.norms:
                x = self.norms[i](x)
            x = ops.relu(x)
        return x


# ---------------------------------------------------------------- latent transformer


class TransformerLayer(Module):
    """``z' = LN(MHSA(LN(f)) + f)``, ``z = MLP(z') + z'`` on N x T x C tokens."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int = 2):
        if dim % heads:
            raise ValueError(f"transformer: {dim} channels not divisible by {heads} heads")
        self.heads = heads
        self.norm_qkv = LayerNorm(dim)
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.norm_out = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, mlp_ratio * dim, gain=np.sqrt(2.0))
        self.fc2 = Linear(rng, mlp_ratio * dim, dim)

    def attention(self, f):
        n, t, c = f.shape
        h = self.heads
        d = c // h
        qkv = self.qkv(self.norm_qkv(f))
        qkv = ops.transpose(ops.reshape(qkv, (n, t, 3, h, d)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ops.softmax(ops.matmul(q, ops.swap_last(k)) * (1.0 / np.sqrt(d)))
        out = ops.transpose(ops.matmul(att, v), (0, 2, 1, 3))
        return self.proj(ops.reshape(out, (n, t, c)))

    def forward(self, f):
        z1 = self.norm_out(self.attention(f) + f)
        return self.fc2(ops.gelu(self.fc1(z1))) + z1


class ConvTransformer(Module):
    """1x1x1 conv embedding, transformer layers over voxel tokens, per-token linear map back.

    No positional embedding: every stage is per-token or permutation
    equivariant attention, so the block commutes with token permutations.
    """

    def __init__(self, rng, channels: int, layers: int = 8, heads: int = 8):
        if channels % heads:
            raise ValueError(f"transformer: {channels} channels not divisible by {heads} heads")
        self.embed = Conv3d(rng, channels, channels, kernel=1, gain=1.0)
        self.layers = [TransformerLayer(rng, channels, heads) for _ in range(layers)]
        self.norm = LayerNorm(channels)
        self.out = Linear(rng, channels, channels)

    def forward(self, x):
        n, c = x.shape[:2]
        spatial = x.shape[2:]
        e = self.embed(x)
        tokens = ops.transpose(ops.reshape(e, (n, c, -1)), (0, 2, 1))
        for layer in self.layers:
            tokens = layer(tokens)
        tokens = self.out(self.norm(tokens))
        return ops.reshape(ops.transpose(tokens, (0, 2, 1)), (n, c) + spatial)


# ---------------------------------------------------------------- generator


def _config_io(cls):
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(klass, d: dict):
        names = {f.name for f in fields(klass)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"{klass.__name__}: unknown fields {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return klass(**kw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(klass, path):
        return klass.from_dict(json.loads(Path(path).read_text()))

    cls.to_dict, cls.from_dict, cls.save, cls.load = to_dict, from_dict, save, load
    return cls


@_config_io
@dataclass(frozen=True)
class GeneratorConfig:
    depth: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    ctl_layers: int = 8
    ctl_heads: int = 8
    use_ctl: bool = True
    norm_kind: str = "instance"
    output_activation: str = "sigmoid"
    in_channels: int = 1

    def validate(self) -> None:
        if self.depth < 2 or len(self.channels) != self.depth:
            raise ValueError(f"generator: need depth >= 2 and one channel count per level, got {self.depth}, {self.channels}")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"generator: channels must increase down the encoder, got {self.channels}")
        if self.use_ctl and self.channels[-1] % self.ctl_heads:
            raise ValueError(f"generator: {self.ctl_heads} heads do not divide latent channels {self.channels[-1]}")
        if self.norm_kind not in ("instance", "none"):
            raise ValueError(f"generator: unknown norm_kind {self.norm_kind!r}")
        if self.output_activation != "sigmoid":
            raise ValueError(f"generator: unsupported output activation {self.output_activation!r}")


class Generator(Module):
    """U-Net: conv blocks with max-pool down, nearest upsample + conv up, skip concatenation."""

    def __init__(self, config: GeneratorConfig = GeneratorConfig(), rng: np.random.Generator | None = None):
        config.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        ch = config.channels
        norm = config.norm_kind == "instance"
        self.down = [ConvBlock(rng, config.in_channels if i == 0 else ch[i - 1], ch[i], norm) for i in range(config.depth)]
        self.ctl = ConvTransformer(rng, ch[-1], config.ctl_layers, config.ctl_heads) if config.use_ctl else None
        self.up_convs = [Conv3d(rng, ch[i + 1], ch[i]) for i in range(config.depth - 1)]
        self.up_blocks = [ConvBlock(rng, 2 * ch[i], ch[i], norm) for i in range(config.depth - 1)]
        self.head = Conv3d(rng, ch[0], 1, kernel=1, gain=1.0)

    @property
    def divisor(self) -> int:
        return 2 ** (self.config.depth - 1)

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"generator: expected N x {self.config.in_channels} x D x H x W, got {x.shape}")
        if any(s % self.divisor for s in x.shape[2:]):
            raise ValueError(f"generator: spatial dims {x.shape[2:]} must be divisible by {self.divisor}")
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool3d(x, 2)
            x = block(x)
            skips.append(x)
        if self.ctl is not None:
            x = self.ctl(x)
        for i in reversed(range(self.config.depth - 1)):
            x = ops.relu(self.up_convs[i](F.upsample_nearest3d(x, 2)))
            x = self.up_blocks[i](ops.concat([x, skips[i]], axis=1))
        return ops.sigmoid(self.head(x))

    def set_output_prior(self, p: float) -> None:
        """Start every voxel at foreground probability ``p`` (head bias = log-odds).

        Vessels fill a few percent of the volume, so from the default 0.5 the
        first few hundred Adam steps go into pushing the background down.
        """
        p = float(np.clip(p, 1e-4, 0.5))
        self.head.bias.data[...] = np.log(p / (1.0 - p))


# ---------------------------------------------------------------- snake convolution


def cumulative_matrix(k: int) -> np.ndarray:
    """(k, k-1) map from per-step increments to offsets accumulated outward from the centre tap."""
    c = k // 2
    m = np.zeros((k, k - 1))
    # increments 0..c-1 walk towards tap 0, increments c..k-2 towards tap k-1
    for tap in range(k):
        if tap < c:
            m[tap, tap:c] = 1.0
        elif tap > c:
            m[tap, c:tap] = 1.0
    return m


OFFSET_MODES = ("learned", "random", "zero")


class DSConv(Module):
    """Snake-shaped 1D kernel along one axis, bent perpendicular to it by cumulative offsets.

    Each output voxel samples ``kernel_len`` points straddling it along
    ``axis``; the k-th point is displaced in the two perpendicular directions
    by the sum of bounded per-step increments between it and the centre.
    """

    def __init__(self, rng, cin: int, cout: int, axis: int, kernel_len: int = 9, offset_mode: str = "learned",
                 offset_rng: np.random.Generator | None = None):
        if kernel_len < 3 or kernel_len % 2 == 0:
            raise ValueError(f"dsconv: kernel length must be odd and >= 3, got {kernel_len}")
        if axis not in (0, 1, 2):
            raise ValueError(f"dsconv: axis must be 0, 1 or 2, got {axis}")
        if offset_mode not in OFFSET_MODES:
            raise ValueError(f"dsconv: offset_mode must be one of {OFFSET_MODES}, got {offset_mode!r}")
        self.axis, self.k, self.cin, self.cout = axis, kernel_len, cin, cout
        self.offset_mode = offset_mode
        self.offset_rng = offset_rng if offset_rng is not None else np.random.default_rng(0)
        dt = get_default_dtype()
        self.offset = Conv3d(rng, cin, 2 * (kernel_len - 1), kernel=3)
        self.offset.weight.data = np.zeros_like(self.offset.weight.data)  # start straight
        self.weight = self.parameter(kaiming_uniform(rng, (cin * kernel_len, cout), cin * kernel_len).astype(dt))
        self.bias = self.parameter(np.zeros(cout, dtype=dt))
        self._cum = cumulative_matrix(kernel_len).T.astype(dt)  # (k-1, k)

    def increments(self, x):
        n = x.shape[0]
        shape = (n, 2 * (self.k - 1)) + x.shape[2:]
        if self.offset_mode == "learned":
            return ops.tanh(self.offset(x))
        if self.offset_mode == "random":
            return Tensor(self.offset_rng.uniform(-1.0, 1.0, size=shape).astype(x.dtype))
        return Tensor(np.zeros(shape, dtype=x.dtype))

    def forward(self, x):
        n, c = x.shape[:2]
        dims = x.shape[2:]
        v = int(np.prod(dims))
        k = self.k
        inc = ops.reshape(self.increments(x), (n, 2, k - 1, v))
        offs = ops.matmul(ops.swap_last(inc), Tensor(self._cum.astype(x.dtype)))  # n, 2, v, k
        grid = np.stack(np.meshgrid(*[np.arange(s) for s in dims], indexing="ij"), axis=-1).reshape(v, 1, 3)
        base = np.repeat(grid, k, axis=1).astype(x.dtype)
        base[..., self.axis] += np.arange(k) - k // 2
        perp = [a for a in range(3) if a != self.axis]
        parts = []
        for a in range(3):
            comp = Tensor(np.broadcast_to(base[..., a], (n, v, k)).copy())
            if a in perp:
                comp = comp + offs[:, perp.index(a)]
            parts.append(ops.reshape(comp, (n, v, k, 1)))
        coords = ops.reshape(ops.concat(parts, axis=3), (n, v * k, 3))
        samples = F.grid_sample3d(x, coords, integer_axes=(self.axis,))  # n, c, v*k
        samples = ops.transpose(ops.reshape(samples, (n, c, v, k)), (0, 2, 1, 3))
        y = ops.matmul(ops.reshape(samples, (n, v, c * k)), self.weight) + self.bias
        return ops.reshape(ops.transpose(y, (0, 2, 1)), (n, self.cout) + dims)


# ---------------------------------------------------------------- critic


@_config_io
@dataclass(frozen=True)
class CriticConfig:
    in_channels: int = 2
    dsconv_kernel_len: int = 9
    dsconv_channels: int = 4
    conv_channels: int = 4
    downsample_levels: int = 2
    use_dsconv: bool = True
    offset_mode: str = "learned"
    leaky_slope: float = 0.2

    def validate(self) -> None:
        if self.dsconv_kernel_len < 3 or self.dsconv_kernel_len % 2 == 0:
            raise ValueError(f"critic: dsconv kernel length must be odd and >= 3, got {self.dsconv_kernel_len}")
        if min(self.dsconv_channels, self.conv_channels, self.in_channels) < 1 or self.downsample_levels < 0:
            raise ValueError("critic: channel counts must be positive and downsample_levels non-negative")
        if self.offset_mode not in OFFSET_MODES:
            raise ValueError(f"critic: offset_mode must be one of {OFFSET_MODES}, got {self.offset_mode!r}")


class Critic(Module):
    """First layer concat(snake convs on X/Y/Z, 3x3x3 conv), then strided convs, mean, linear.

    No normalisation layers and no sigmoid: the output is an unbounded
    Wasserstein score, and every op supports second-order gradients.
    """

    def __init__(self, config: CriticConfig = CriticConfig(), rng: np.random.Generator | None = None):
        config.validate()
        rng = rng if rng is not None else np.random.default_rng(1)
        self.config = config
        cin = config.in_channels
        width = 3 * config.dsconv_channels + config.conv_channels
        if config.use_dsconv:
            offset_rng = np.random.default_rng(rng.integers(2 ** 63))
            self.snakes = [DSConv(rng, cin, config.dsconv_channels, a, config.dsconv_kernel_len,
                                  config.offset_mode, offset_rng) for a in range(3)]
            self.conv = Conv3d(rng, cin, config.conv_channels)
        else:
            self.snakes = []
            self.conv = Conv3d(rng, cin, width)
        self.levels = [Conv3d(rng, width * 2 ** i, width * 2 ** (i + 1), kernel=3, stride=2, padding=1)
                       for i in range(config.downsample_levels)]
        self.fc = Linear(rng, width * 2 ** config.downsample_levels, 1)

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"critic: expected N x {self.config.in_channels} x D x H x W input, got {x.shape}")
        slope = self.config.leaky_slope
        h = ops.concat([s(x) for s in self.snakes] + [self.conv(x)], axis=1)
        h = ops.leaky_relu(h, slope)
        for conv in self.levels:
            h = ops.leaky_relu(conv(h), slope)
        h = ops.mean(h, axis=(2, 3, 4))
        return self.fc(h)


def critic_input(volume, condition):
    """Stack a prediction (or ground truth) with the {0,1,2} model input scaled into [0, 1]."""
    return ops.concat([volume, condition * 0.5], axis=1)
