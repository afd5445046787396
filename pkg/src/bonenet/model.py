"""The age-regression network: a 5-block VGG-style backbone with extra
connections that tap the block-3/4 max-pool outputs through bottleneck FC
layers, concatenated with the block-5 global features ahead of a three-FC
regression head with a single linear output unit.

Connections from blocks 1-2 are rejected by default: early features are
too cheap to be worth their parameter cost, and the connection FC there
would dwarf the rest of the network (see ``connection_param_count``).
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import InvalidConfig, ShapeMismatch, UnknownLayer
from .layers import BatchNormLayer, Conv2dLayer, DropoutLayer, LinearLayer, maxpool2d
from .tensor import Tensor, concat, relu, reshape, spatial_mean

N_BLOCKS = 5


def connection_param_count(c, h, w, n_units):
    """Learnable parameters of one connection FC: C*H*W*n_U weights + n_U biases."""
    if min(c, h, w, n_units) < 1:
        raise InvalidConfig("connection dims must be >= 1")
    return c * h * w * n_units + n_units


@dataclass
class ModelConfig:
    input_size: int = 64
    block_channels: list = field(default_factory=lambda: [16, 32, 64, 128, 128])
    convs_per_block: int = 2
    connection_blocks: list = field(default_factory=lambda: [3, 4])
    n_units: int = 64
    head_dims: list = field(default_factory=lambda: [128, 64])
    dropout_rate: float = 0.5
    global_pool_connections: bool = False
    frozen_blocks: int = 0
    allow_early_connections: bool = False

    def validate(self):
        if self.input_size % 2 ** N_BLOCKS != 0:
            raise InvalidConfig(f"input_size {self.input_size} not divisible by 32")
        if len(self.block_channels) != N_BLOCKS:
            raise InvalidConfig("block_channels must list 5 blocks")
        if self.convs_per_block < 1:
            raise InvalidConfig("convs_per_block must be >= 1")
        if len(self.head_dims) != 2:
            raise InvalidConfig("head_dims must list the two hidden FC widths")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfig(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        if not 0 <= self.frozen_blocks <= N_BLOCKS:
            raise InvalidConfig(f"frozen_blocks {self.frozen_blocks} outside 0..5")
        seen = set()
        for b in self.connection_blocks:
            if b in seen or not 1 <= b <= 4:
                raise InvalidConfig(f"bad connection block {b}")
            if b not in (3, 4) and not self.allow_early_connections:
                raise InvalidConfig(
                    f"connection from block {b} rejected (early features); "
                    "set allow_early_connections to override"
                )
            seen.add(b)
        return self

    def to_dict(self):
        return asdict(self)

    def pool_shape(self, block):
        """(C, H, W) of the max-pool output of ``block`` (1-based)."""
        side = self.input_size // 2 ** block
        return self.block_channels[block - 1], side, side

    def connection_in_width(self, block):
        c, h, w = self.pool_shape(block)
        return c if self.global_pool_connections else c * h * w

    def feature_width(self):
        """Width of the concatenated (global + connections) feature vector."""
        c5, h5, w5 = self.pool_shape(N_BLOCKS)
        return c5 * h5 * w5 + self.n_units * len(self.connection_blocks)


class Model:
    """Instantiated network with a stable named-parameter registry."""

    def __init__(self, config, seed=0):
        config.validate()
        self.config = config
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        self._next_seed = iter(ss.spawn(4 * N_BLOCKS * config.convs_per_block + 64))

        self.blocks = []
        in_ch = 1
        for b, out_ch in enumerate(config.block_channels, start=1):
            stages = []
            for j in range(config.convs_per_block):
                conv = Conv2dLayer(in_ch, out_ch, kernel=3, seed=next(self._next_seed))
                bn = BatchNormLayer(out_ch)
                stages.append((conv, bn))
                in_ch = out_ch
            self.blocks.append(stages)

        self.connections = {}
        for b in sorted(config.connection_blocks):
            fc = LinearLayer(config.connection_in_width(b), config.n_units,
                             seed=next(self._next_seed))
            drop = DropoutLayer(config.dropout_rate, seed=0)
            self.connections[b] = (fc, drop)

        width = config.feature_width()
        self.head = []
        for dim in config.head_dims:
            self.head.append((LinearLayer(width, dim, seed=next(self._next_seed)),
                              DropoutLayer(config.dropout_rate, seed=0)))
            width = dim
        self.head_out = LinearLayer(width, 1, seed=next(self._next_seed))

        self._registry = self._build_registry()
        self.freeze_blocks(config.frozen_blocks)
        self.reseed_dropout(seed)

    # -- registry --------------------------------------------------------

    def _build_registry(self):
        reg = {}
        for b, stages in enumerate(self.blocks, start=1):
            for j, (conv, bn) in enumerate(stages, start=1):
                for suffix, t in conv.parameters():
                    reg[f"block{b}.conv{j}.{suffix}"] = t
                for suffix, t in bn.parameters():
                    reg[f"block{b}.bn{j}.{suffix}"] = t
        for b, (fc, _) in self.connections.items():
            for suffix, t in fc.parameters():
                reg[f"conn.block{b}.fc.{suffix}"] = t
        for i, (fc, _) in enumerate(self.head, start=1):
            for suffix, t in fc.parameters():
                reg[f"head.fc{i}.{suffix}"] = t
        for suffix, t in self.head_out.parameters():
            reg[f"head.fc{len(self.head) + 1}.{suffix}"] = t
        return reg

    def named_parameters(self):
        return dict(self._registry)

    def trainable_parameters(self):
        k = self.config.frozen_blocks
        return {
            name: t
            for name, t in self._registry.items()
            if not (name.startswith("block") and int(name[5]) <= k)
        }

    def running_stats(self):
        """Batch-norm running statistics, named like the parameter registry."""
        stats = {}
        for b, stages in enumerate(self.blocks, start=1):
            for j, (_, bn) in enumerate(stages, start=1):
                stats[f"block{b}.bn{j}.running_mean"] = bn.running_mean
                stats[f"block{b}.bn{j}.running_var"] = bn.running_var
        return stats

    def count_params(self, trainable_only=False):
        params = self.trainable_parameters() if trainable_only else self._registry
        return sum(t.data.size for t in params.values())

    # -- state switches ---------------------------------------------------

    def freeze_blocks(self, k):
        """Exclude blocks 1..k from optimizer updates and freeze their BN stats."""
        if not 0 <= k <= N_BLOCKS:
            raise InvalidConfig(f"frozen_blocks {k} outside 0..5")
        self.config.frozen_blocks = k
        for b, stages in enumerate(self.blocks, start=1):
            for _, bn in stages:
                bn.update_running = b > k
        return self

    def reseed_dropout(self, seed):
        """Give every dropout layer a fresh deterministic stream."""
        ss = np.random.SeedSequence(seed, spawn_key=(0xD0,))
        children = iter(ss.spawn(len(self.connections) + len(self.head)))
        for b in sorted(self.connections):
            self.connections[b][1].reseed(next(children))
        for _, drop in self.head:
            drop.reseed(next(children))

    def set_mode(self, mode):
        if mode not in ("train", "eval"):
            raise InvalidConfig(f"mode {mode!r}")
        for stages in self.blocks:
            for _, bn in stages:
                bn.mode = mode
        for _, drop in self.connections.values():
            drop.mode = mode
        for _, drop in self.head:
            drop.mode = mode

    # -- forward ----------------------------------------------------------

    @property
    def input_size(self):
        return self.config.input_size

    def activation_names(self):
        names = []
        for b in range(1, N_BLOCKS + 1):
            for j in range(1, self.config.convs_per_block + 1):
                names.append(f"block{b}.conv{j}")
            names.append(f"block{b}.pool")
        return names

    def forward(self, x, mode="eval", capture=None, channel_offset=None):
        """Run the network on ``x`` [B,1,S,S]; returns ages [B,1].

        ``capture`` names a conv/pool activation to return alongside the
        output. ``channel_offset`` = (name, vector[C]) adds a constant
        per-channel offset to that activation (sensitivity probes).
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != 4 or x.data.shape[1] != 1:
            raise ShapeMismatch(f"expected [B,1,S,S], got {x.data.shape}")
        s = self.config.input_size
        if x.data.shape[2] != s or x.data.shape[3] != s:
            raise ShapeMismatch(f"expected spatial size {s}, got {x.data.shape[2:]}")
        if capture is not None and capture not in self.activation_names():
            raise UnknownLayer(capture)
        if channel_offset is not None and channel_offset[0] not in self.activation_names():
            raise UnknownLayer(channel_offset[0])
        self.set_mode(mode)

        captured = None

        def tap(name, t):
            nonlocal captured
            if channel_offset is not None and channel_offset[0] == name:
                vec = np.asarray(channel_offset[1], dtype=np.float64)
                t = t + Tensor(np.broadcast_to(vec[None, :, None, None], t.data.shape).copy())
            if capture == name:
                captured = t
            return t

        h = self._features(x, tap)
        for fc, drop in self.head:
            h = drop(relu(fc(h)))
        out = self.head_out(h)
        return (out, captured) if capture is not None else out

    def forward_features(self, x, mode="eval"):
        """The concatenated global+connection feature vector (pre-head)."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self.set_mode(mode)
        return self._features(x, lambda name, t: t)

    def _features(self, h, tap):
        pool_outs = {}
        for b, stages in enumerate(self.blocks, start=1):
            for j, (conv, bn) in enumerate(stages, start=1):
                h = tap(f"block{b}.conv{j}", relu(bn(conv(h))))
            h = tap(f"block{b}.pool", maxpool2d(h, 2, 2))
            pool_outs[b] = h
        feats = [self._flatten(pool_outs[N_BLOCKS])]
        for b in sorted(self.connections):
            fc, drop = self.connections[b]
            tapped = (
                spatial_mean(pool_outs[b])
                if self.config.global_pool_connections
                else self._flatten(pool_outs[b])
            )
            feats.append(drop(relu(fc(tapped))))
        return concat(feats, axis=1)

    @staticmethod
    def _flatten(t):
        b, c, h, w = t.data.shape
        return reshape(t, (b, c * h * w))


def build(config, seed=0):
    return Model(config, seed)
