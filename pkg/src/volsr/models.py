"""Network architectures for volumetric super-resolution.

The generator is a 3D residual-in-residual dense network: a head conv, a
stack of RRDB blocks under a global residual, nearest-neighbor x2 upsampling
stages, and a two-conv tail. The discriminator is a 3D U-Net emitting a
real/fake logit for every voxel. A small fixed 2D conv stack stands in for a
pretrained feature network in the perceptual loss; its weights load from
checkpoint files, so a converted pretrained network can be swapped in
without code changes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import (
    ParamStore,
    Tensor,
    avgpool3d,
    concat_channels,
    conv2d,
    conv3d,
    fan_in_normal,
    leaky_relu,
    maxpool2d,
    upsample_nearest3d,
)

_SLOPE = 0.2


class ModelError(ValueError):
    """Configuration or input incompatible with a network contract."""


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GeneratorConfig:
    """RRDB generator hyperparameters.

    Defaults are the desk-scale setting; the full-scale lineage uses
    base_channels=64, growth_channels=32, num_rrdb_blocks=23.
    """

    in_channels: int = 1
    base_channels: int = 16
    growth_channels: int = 8
    num_rrdb_blocks: int = 4
    rdb_per_rrdb: int = 3
    convs_per_rdb: int = 5
    residual_scale: float = 0.2
    upscale: int = 4

    def __post_init__(self) -> None:
        counts = (
            self.in_channels,
            self.base_channels,
            self.growth_channels,
            self.num_rrdb_blocks,
            self.rdb_per_rrdb,
        )
        if min(counts) < 1:
            raise ModelError(f"generator channel/block counts must be >= 1, got {self}")
        if self.convs_per_rdb < 2:
            raise ModelError("convs_per_rdb must be >= 2 (dense convs plus a fusion conv)")
        # 0 is admitted so residual-scale annihilation is testable.
        if not 0.0 <= self.residual_scale <= 1.0:
            raise ModelError(f"residual_scale must be in [0, 1], got {self.residual_scale}")
        if not _is_power_of_two(self.upscale):
            raise ModelError(f"upscale must be a power of 2, got {self.upscale}")

    @property
    def num_upsample_stages(self) -> int:
        return self.upscale.bit_length() - 1


@dataclass(frozen=True)
class DiscriminatorConfig:
    """U-Net discriminator hyperparameters; inputs must divide by 2^depth."""

    in_channels: int = 1
    base_channels: int = 16
    depth: int = 3

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.base_channels < 1:
            raise ModelError(f"discriminator channel counts must be >= 1, got {self}")
        if self.depth < 1:
            raise ModelError(f"discriminator depth must be >= 1, got {self.depth}")


@dataclass(frozen=True)
class FeatureExtractorConfig:
    """Fixed 2D conv stack: 3x3 convs with LeakyReLU, max-pools after the
    blocks named in ``pool_after``, feature maps emitted after the blocks
    named in ``feature_blocks`` (1-indexed).
    """

    in_channels: int = 1
    channels: tuple[int, ...] = (8, 16, 32, 32)
    pool_after: tuple[int, ...] = (2, 3)
    feature_blocks: tuple[int, ...] = (2, 4)

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "pool_after", tuple(int(k) for k in self.pool_after))
        object.__setattr__(self, "feature_blocks", tuple(int(k) for k in self.feature_blocks))
        if self.in_channels < 1:
            raise ModelError(f"in_channels must be >= 1, got {self.in_channels}")
        if not self.channels or min(self.channels) < 1:
            raise ModelError(f"channels must be a non-empty positive tuple, got {self.channels}")
        if not self.feature_blocks:
            raise ModelError("feature_blocks must name at least one block")
        n = len(self.channels)
        for name, blocks in (("pool_after", self.pool_after), ("feature_blocks", self.feature_blocks)):
            if any(not 1 <= k <= n for k in blocks):
                raise ModelError(f"{name} entries must be in 1..{n}, got {blocks}")
            if list(blocks) != sorted(set(blocks)):
                raise ModelError(f"{name} must be strictly increasing, got {blocks}")

    @property
    def num_blocks(self) -> int:
        return len(self.channels)

    @property
    def min_input_size(self) -> int:
        return 2 ** len(self.pool_after)


class FeatureExtractor2D:
    """A feature-extractor config bound to frozen weights.

    Parameters never require gradients: a loss evaluated through the
    extractor differentiates only its image inputs.
    """

    def __init__(self, config: FeatureExtractorConfig, params: ParamStore) -> None:
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: FeatureExtractorConfig | None = None, seed: int = 0) -> "FeatureExtractor2D":
        config = config if config is not None else FeatureExtractorConfig()
        return cls(config, init_params(config, seed))

    @classmethod
    def from_arrays(cls, config: FeatureExtractorConfig, arrays: dict[str, np.ndarray]) -> "FeatureExtractor2D":
        fx = cls.create(config, seed=0)
        fx.params.load_arrays(arrays)
        return fx

    @property
    def min_input_size(self) -> int:
        return self.config.min_input_size


def _add_conv(store, rng, name, cin, cout, kernel, ndim, gain, requires_grad=True):
    shape = (cout, cin) + (kernel,) * ndim
    store.add(f"{name}.w", fan_in_normal(rng, shape, gain), requires_grad=requires_grad)
    store.add(f"{name}.b", np.zeros(cout), requires_grad=requires_grad)


def _init_generator(cfg: GeneratorConfig, rng) -> ParamStore:
    store = ParamStore()
    nf, gc = cfg.base_channels, cfg.growth_channels
    _add_conv(store, rng, "head", cfg.in_channels, nf, 3, 3, gain=1.0)
    for i in range(cfg.num_rrdb_blocks):
        for j in range(cfg.rdb_per_rrdb):
            for k in range(1, cfg.convs_per_rdb + 1):
                cin = nf + (k - 1) * gc
                cout = gc if k < cfg.convs_per_rdb else nf
                # Small-residual init keeps fresh blocks near identity.
                _add_conv(store, rng, f"rrdb{i}.rdb{j}.conv{k}", cin, cout, 3, 3, gain=0.1)
    _add_conv(store, rng, "trunk", nf, nf, 3, 3, gain=1.0)
    for s in range(1, cfg.num_upsample_stages + 1):
        _add_conv(store, rng, f"up{s}", nf, nf, 3, 3, gain=1.0)
    _add_conv(store, rng, "hr", nf, nf, 3, 3, gain=1.0)
    _add_conv(store, rng, "tail", nf, cfg.in_channels, 3, 3, gain=1.0)
    return store


def _init_discriminator(cfg: DiscriminatorConfig, rng) -> ParamStore:
    store = ParamStore()
    _add_conv(store, rng, "inc", cfg.in_channels, cfg.base_channels, 3, 3, gain=1.0)
    ch = cfg.base_channels
    for level in range(1, cfg.depth + 1):
        _add_conv(store, rng, f"down{level}", ch, 2 * ch, 3, 3, gain=1.0)
        ch *= 2
    for level in range(cfg.depth, 0, -1):
        _add_conv(store, rng, f"up{level}.pre", ch, ch // 2, 3, 3, gain=1.0)
        _add_conv(store, rng, f"up{level}.post", ch, ch // 2, 3, 3, gain=1.0)
        ch //= 2
    _add_conv(store, rng, "out", cfg.base_channels, 1, 1, 3, gain=1.0)
    return store


def _init_extractor(cfg: FeatureExtractorConfig, rng) -> ParamStore:
    store = ParamStore()
    cin = cfg.in_channels
    for k, cout in enumerate(cfg.channels, start=1):
        _add_conv(store, rng, f"block{k}", cin, cout, 3, 2, gain=1.0, requires_grad=False)
        cin = cout
    return store


def init_params(cfg, seed: int) -> ParamStore:
    """Deterministic fan-in normal weights (zero biases) for any config.

    RDB-internal convs use gain 0.1 so a fresh generator starts near the
    identity on its trunk; everything else uses gain 1.0. Same seed, same
    config, same store.
    """
    rng = np.random.default_rng(seed)
    if isinstance(cfg, GeneratorConfig):
        return _init_generator(cfg, rng)
    if isinstance(cfg, DiscriminatorConfig):
        return _init_discriminator(cfg, rng)
    if isinstance(cfg, FeatureExtractorConfig):
        return _init_extractor(cfg, rng)
    raise ModelError(f"no initializer for config type {type(cfg).__name__}")


def rdb_forward(x: Tensor, params: ParamStore, cfg: GeneratorConfig, prefix: str = "rdb") -> Tensor:
    """Residual dense block: each conv consumes x concatenated with every
    previous intra-block output; the last conv fuses back to base channels;
    output = x + residual_scale * fusion.
    """
    nf = cfg.base_channels
    if x.ndim != 5 or x.shape[1] != nf:
        raise ModelError(f"rdb input must be (N,{nf},D,H,W), got shape {x.shape}")
    feats = [x]
    h = x
    for k in range(1, cfg.convs_per_rdb + 1):
        inp = feats[0] if len(feats) == 1 else concat_channels(feats)
        h = conv3d(inp, params[f"{prefix}.conv{k}.w"], params[f"{prefix}.conv{k}.b"], padding=1)
        if k < cfg.convs_per_rdb:
            h = leaky_relu(h, _SLOPE)
            feats.append(h)
    return x + h * cfg.residual_scale


def rrdb_forward(x: Tensor, params: ParamStore, cfg: GeneratorConfig, prefix: str = "rrdb0") -> Tensor:
    """Chained RDBs under an outer residual.

    The outer residual scales the chain's delta, x + s*(chain(x) - x), so a
    zero-parameter block is exactly the identity.
    """
    h = x
    for j in range(cfg.rdb_per_rrdb):
        h = rdb_forward(h, params, cfg, prefix=f"{prefix}.rdb{j}")
    return x + (h - x) * cfg.residual_scale


def generator_forward(lr: Tensor, params: ParamStore, cfg: GeneratorConfig) -> Tensor:
    """Super-resolve (N, C, d, h, w) to (N, C, upscale*d, upscale*h, upscale*w)."""
    if lr.ndim != 5 or lr.shape[1] != cfg.in_channels:
        raise ModelError(
            f"generator input must be (N,{cfg.in_channels},D,H,W), got shape {lr.shape}"
        )
    if min(lr.shape[2:]) < 4:
        raise ModelError(f"generator input spatial dims must be >= 4, got {lr.shape[2:]}")
    fea = conv3d(lr, params["head.w"], params["head.b"], padding=1)
    h = fea
    for i in range(cfg.num_rrdb_blocks):
        h = rrdb_forward(h, params, cfg, prefix=f"rrdb{i}")
    trunk = conv3d(h, params["trunk.w"], params["trunk.b"], padding=1)
    fea = fea + trunk
    for s in range(1, cfg.num_upsample_stages + 1):
        fea = upsample_nearest3d(fea, 2)
        fea = leaky_relu(conv3d(fea, params[f"up{s}.w"], params[f"up{s}.b"], padding=1), _SLOPE)
    fea = leaky_relu(conv3d(fea, params["hr.w"], params["hr.b"], padding=1), _SLOPE)
    return conv3d(fea, params["tail.w"], params["tail.b"], padding=1)


def discriminator_forward(x: Tensor, params: ParamStore, cfg: DiscriminatorConfig) -> Tensor:
    """Per-voxel logits with the same spatial shape as the input."""
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ModelError(
            f"discriminator input must be (N,{cfg.in_channels},D,H,W), got shape {x.shape}"
        )
    div = 2**cfg.depth
    if any(d % div for d in x.shape[2:]):
        raise ModelError(
            f"discriminator input dims {x.shape[2:]} must be divisible by {div}"
        )
    h = leaky_relu(conv3d(x, params["inc.w"], params["inc.b"], padding=1), _SLOPE)
    skips = []
    for level in range(1, cfg.depth + 1):
        skips.append(h)
        h = avgpool3d(h, 2)
        h = leaky_relu(
            conv3d(h, params[f"down{level}.w"], params[f"down{level}.b"], padding=1), _SLOPE
        )
    for level in range(cfg.depth, 0, -1):
        h = upsample_nearest3d(h, 2)
        h = leaky_relu(
            conv3d(h, params[f"up{level}.pre.w"], params[f"up{level}.pre.b"], padding=1),
            _SLOPE,
        )
        h = concat_channels([h, skips[level - 1]])
        h = leaky_relu(
            conv3d(h, params[f"up{level}.post.w"], params[f"up{level}.post.b"], padding=1),
            _SLOPE,
        )
    return conv3d(h, params["out.w"], params["out.b"], padding=0)


def extract_features_2d(x: Tensor, fx: FeatureExtractor2D) -> list[Tensor]:
    """Feature maps of (N, C, H, W) at the extractor's declared blocks."""
    cfg = fx.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ModelError(
            f"extractor input must be (N,{cfg.in_channels},H,W), got shape {x.shape}"
        )
    if min(x.shape[2:]) < cfg.min_input_size:
        raise ModelError(
            f"extractor needs slices of at least {cfg.min_input_size} per side, "
            f"got {x.shape[2:]}"
        )
    params = fx.params
    h = x
    feats = []
    for k in range(1, cfg.num_blocks + 1):
        h = leaky_relu(conv2d(h, params[f"block{k}.w"], params[f"block{k}.b"], padding=1), _SLOPE)
        if k in cfg.feature_blocks:
            feats.append(h)
        if k in cfg.pool_after:
            h = maxpool2d(h, 2)
    return feats


_CONFIG_KINDS = {
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "feature_extractor": FeatureExtractorConfig,
}


def config_to_dict(cfg) -> dict:
    """JSON-ready dict with a "kind" discriminator, for checkpoint manifests."""
    for kind, cls in _CONFIG_KINDS.items():
        if isinstance(cfg, cls):
            out = {"kind": kind}
            out.update(asdict(cfg))
            return out
    raise ModelError(f"unknown config type: {type(cfg).__name__}")


def config_from_dict(d: dict):
    kind = d.get("kind")
    if kind not in _CONFIG_KINDS:
        raise ModelError(f"unknown config kind: {kind!r}")
    fields = {k: v for k, v in d.items() if k != "kind"}
    try:
        return _CONFIG_KINDS[kind](**fields)
    except TypeError as exc:
        raise ModelError(f"bad {kind} config fields: {exc}") from exc
