"""
Toy video transformer with space-time cross attention blocks.

Defines the encoder configuration, the named weight set, patch embedding, the
block forward for every variant (stca, spatial_only, full_spacetime,
factorized), padding of the attended window-shifted tokens back into the
frame, video encoding and attention pair counting.
"""
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from . import tensor as tn
from . import weights_io
from .errors import ConfigurationError, DimensionError
from .mcm import MixSpec, multiscale_attend
from .wsm import TokenGrid, WindowSpec, apply_schedule, build_mask_schedule, visible_count

logger = logging.getLogger(__name__)

VARIANTS = ("stca", "spatial_only", "full_spacetime", "factorized")


@dataclass(frozen=True)
class EncoderConfig:
    """
    Shape and behaviour of the encoder.

    Attributes:
        frames (int): T
        height (int): H in pixels
        width (int): W in pixels
        patch (int): P
        dim (int): D, channel width
        layers (int): L, block count
        heads (int): Attention heads
        window (WindowSpec): Masking window
        mix (MixSpec): Channel mixing settings
        variant (str): One of VARIANTS
        mask_strategy (str): Mask schedule generator
        mask_seed (int): Seed for randomized mask strategies
        mlp_ratio (int): Hidden width multiplier of the MLP
        ln_eps (float): Layer-norm epsilon
        init_seed (int): Seed for weight initialization
    """
    frames: int = 8
    height: int = 32
    width: int = 32
    patch: int = 8
    dim: int = 64
    layers: int = 4
    heads: int = 4
    window: WindowSpec = field(default_factory=WindowSpec)
    mix: MixSpec = field(default_factory=MixSpec)
    variant: str = "stca"
    mask_strategy: str = "repeat_window_shift"
    mask_seed: int = 0
    mlp_ratio: int = 4
    ln_eps: float = 1e-5
    init_seed: int = 0

    @property
    def grid(self):
        return TokenGrid.from_frame(self.height, self.width, self.patch)

    @property
    def n_patches(self):
        return self.grid.n

    def with_variant(self, variant):
        return replace(self, variant=variant)

    def validate(self):
        """
        Raises:
            ConfigurationError: On the first violated constraint, naming its key
        """
        grid = self.grid
        if self.frames < 1:
            raise ConfigurationError(f"frame count must be positive, got {self.frames}", key="frames")
        if self.layers < 0:
            raise ConfigurationError(f"layer count must be nonnegative, got {self.layers}", key="layers")
        if self.heads < 1 or self.dim % self.heads != 0:
            raise ConfigurationError(f"width {self.dim} is not divisible by {self.heads} heads", key="heads")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant '{self.variant}'", key="variant")
        if self.variant == "stca":
            self.window.validate(grid)
            self.mix.validate(self.dim)
        return True


@dataclass(frozen=True)
class BlockWeights:
    ln1_gain: tn.Tensor
    ln1_bias: tn.Tensor
    attn: nn.AttentionWeights
    ln2_gain: tn.Tensor
    ln2_bias: tn.Tensor
    fc1_weight: tn.Tensor
    fc1_bias: tn.Tensor
    fc2_weight: tn.Tensor
    fc2_bias: tn.Tensor


class EncoderWeights:
    """
    Named parameter set of the encoder.

    The set depends only on D, P, N, L and the MLP ratio, so every variant of
    the same shape has the same names and parameter count.

    Attributes:
        params (dict[str, Tensor]): name -> parameter, in a fixed order
        heads (int): Head count used when assembling attention weights
    """

    def __init__(self, params, heads):
        self.params = dict(params)
        self.heads = heads

    @classmethod
    def initialize(cls, config):
        """
        Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit gains.

        Args:
            config (EncoderConfig): Shapes and init seed
        """
        rng = np.random.default_rng(config.init_seed)
        d, p = config.dim, config.patch
        hidden = config.mlp_ratio * d
        params = {}

        def uniform(name, shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = tn.Tensor(rng.uniform(-bound, bound, size=shape), name=name)

        def const(name, shape, value):
            params[name] = tn.Tensor(np.full(shape, value), name=name)

        uniform("patch_embed.weight", (3 * p * p, d), 3 * p * p)
        const("patch_embed.bias", (d,), 0.0)
        uniform("cls_token", (d,), d)
        uniform("pos_embed", (config.n_patches, d), d)
        for layer in range(config.layers):
            prefix = f"blocks.{layer}"
            const(f"{prefix}.ln1.gain", (d,), 1.0)
            const(f"{prefix}.ln1.bias", (d,), 0.0)
            for proj in ("q", "k", "v", "o"):
                uniform(f"{prefix}.attn.{proj}.weight", (d, d), d)
                const(f"{prefix}.attn.{proj}.bias", (d,), 0.0)
            const(f"{prefix}.ln2.gain", (d,), 1.0)
            const(f"{prefix}.ln2.bias", (d,), 0.0)
            uniform(f"{prefix}.mlp.fc1.weight", (d, hidden), d)
            const(f"{prefix}.mlp.fc1.bias", (hidden,), 0.0)
            uniform(f"{prefix}.mlp.fc2.weight", (hidden, d), hidden)
            const(f"{prefix}.mlp.fc2.bias", (d,), 0.0)
        logger.debug("initialized %d parameter arrays (seed %d)", len(params), config.init_seed)
        return cls(params, config.heads)

    def __getitem__(self, name):
        return self.params[name]

    @property
    def names(self):
        return list(self.params)

    @property
    def layers(self):
        return len({name.split(".")[1] for name in self.params if name.startswith("blocks.")})

    def parameter_count(self):
        return int(sum(t.size for t in self.params.values()))

    def trainable(self):
        """Copy whose parameters are gradient leaves."""
        return EncoderWeights({k: tn.Tensor(v.data, requires_grad=True, name=k) for k, v in self.params.items()},
                              self.heads)

    def frozen(self):
        """Copy excluded from gradient maps."""
        return EncoderWeights({k: tn.Tensor(v.data, name=k) for k, v in self.params.items()}, self.heads)

    def updated(self, grads, learning_rate):
        """One plain gradient-descent step; parameters without a gradient are kept."""
        params = {}
        for name, value in self.params.items():
            g = grads.get(value)
            data = value.data if g is None else value.data - learning_rate * g.data
            params[name] = tn.Tensor(data, requires_grad=value.requires_grad, name=name)
        return EncoderWeights(params, self.heads)

    def block(self, layer):
        prefix = f"blocks.{layer}"
        p = self.params
        attn = nn.AttentionWeights(
            q_weight=p[f"{prefix}.attn.q.weight"], q_bias=p[f"{prefix}.attn.q.bias"],
            k_weight=p[f"{prefix}.attn.k.weight"], k_bias=p[f"{prefix}.attn.k.bias"],
            v_weight=p[f"{prefix}.attn.v.weight"], v_bias=p[f"{prefix}.attn.v.bias"],
            o_weight=p[f"{prefix}.attn.o.weight"], o_bias=p[f"{prefix}.attn.o.bias"],
            heads=self.heads)
        return BlockWeights(
            ln1_gain=p[f"{prefix}.ln1.gain"], ln1_bias=p[f"{prefix}.ln1.bias"], attn=attn,
            ln2_gain=p[f"{prefix}.ln2.gain"], ln2_bias=p[f"{prefix}.ln2.bias"],
            fc1_weight=p[f"{prefix}.mlp.fc1.weight"], fc1_bias=p[f"{prefix}.mlp.fc1.bias"],
            fc2_weight=p[f"{prefix}.mlp.fc2.weight"], fc2_bias=p[f"{prefix}.mlp.fc2.bias"])

    def save(self, path):
        weights_io.save_arrays(path, self.params)

    @classmethod
    def load(cls, path, config):
        """
        Load weights saved with `save` and check them against the config's shapes.

        Raises:
            ConfigurationError: If names or shapes differ from the config
        """
        arrays = weights_io.load_arrays(path)
        expected = cls.initialize(config)
        for name, value in expected.params.items():
            if name not in arrays:
                raise ConfigurationError(f"weights file {path} lacks '{name}'", key="weights_path")
            if tuple(arrays[name].shape) != value.shape:
                raise ConfigurationError(
                    f"'{name}' has shape {arrays[name].shape}, config needs {value.shape}", key="weights_path")
        return cls({name: tn.Tensor(arrays[name], name=name) for name in expected.params}, config.heads)


def patch_embed(video, weights, config):
    """
    Cut frames into P x P patches, project them, add positions and prepend CLS.

    Args:
        video (Tensor | np.ndarray): [..., T, H, W, 3]
        weights (EncoderWeights): Parameters
        config (EncoderConfig): Shapes

    Returns:
        Tensor: [..., T, N+1, D], row 0 of every frame is CLS
    """
    video = tn.as_tensor(video)
    t, h, w, p = config.frames, config.height, config.width, config.patch
    if video.ndim < 4 or video.shape[-4:] != (t, h, w, 3):
        raise DimensionError(f"video shape {video.shape} does not match [..., {t}, {h}, {w}, 3]")
    lead = video.shape[:-4]
    grid = config.grid
    x = tn.reshape(video, lead + (t, grid.rows, p, grid.cols, p, 3))
    k = len(lead)
    x = tn.transpose(x, tuple(range(k)) + (k, k + 1, k + 3, k + 2, k + 4, k + 5))
    x = tn.reshape(x, lead + (t, grid.n, 3 * p * p))
    patches = tn.add(nn.linear(x, weights["patch_embed.weight"], weights["patch_embed.bias"]),
                     weights["pos_embed"])
    cls = tn.broadcast_to(tn.reshape(weights["cls_token"], (1, config.dim)), lead + (t, 1, config.dim))
    return tn.concat([cls, patches], axis=-2)


def pad_and_fuse(z_spatial, z_bar, maps):
    """
    Place attended window-shifted rows back at their cells; every other row comes from z_spatial.

    Args:
        z_spatial (Tensor): [..., N+1, D] spatial-path output of one frame, or [..., T, N+1, D] of a clip
        z_bar (Tensor): [..., N', D] or [..., T, N', D] attended window-shifted tokens
        maps (array-like): [N] visibility map of the frame, or [T, N] maps of the clip

    Returns:
        Tensor: Same shape as z_spatial
    """
    maps = np.asarray(maps, dtype=bool)
    if maps.ndim not in (1, 2):
        raise DimensionError(f"pad_and_fuse: expected [N] or [T, N] maps, got {maps.shape}")
    if z_spatial.shape[-2] != maps.shape[-1] + 1:
        raise DimensionError(f"pad_and_fuse: {z_spatial.shape[-2]} rows for a map of {maps.shape[-1]} cells")
    if maps.ndim == 2 and (z_spatial.ndim < 3 or z_spatial.shape[-3] != maps.shape[0]):
        raise DimensionError(f"pad_and_fuse: {maps.shape[0]} maps for tokens of shape {z_spatial.shape}")
    counts = maps.sum(axis=-1)
    if np.any(counts != counts.flat[0]):
        raise DimensionError("pad_and_fuse: frames retain different numbers of cells")
    flat = maps.reshape(-1, maps.shape[-1])
    kept = np.stack([np.flatnonzero(m) for m in flat]).reshape(maps.shape[:-1] + (int(counts.flat[0]),))
    if z_bar.shape[-2] != kept.shape[-1]:
        raise DimensionError(
            f"pad_and_fuse: {z_bar.shape[-2]} attended rows for {kept.shape[-1]} retained cells")
    if kept.shape[-1] == 0:
        return z_spatial
    return tn.scatter_rows(z_spatial, kept + 1, z_bar)


def _spatial_path(z, w, eps):
    return tn.add(nn.mhsa(nn.layer_norm(z, w.ln1_gain, w.ln1_bias, eps), w.attn), z)


def _mlp_path(z, w, eps):
    return nn.mlp(nn.layer_norm(z, w.ln2_gain, w.ln2_bias, eps), w.fc1_weight, w.fc1_bias, w.fc2_weight, w.fc2_bias)


def block_forward(z, w, config, schedule=None, plans=None, mixing=True, dynamic=True):
    """
    One transformer block of the configured variant.

    stca: z' = MHSA(LN1 z) + z; the window-shifted tokens of z are mixed
    across frames and attended with the same MHSA and LN1 at every scale; the
    scale mean replaces z' at the retained cells; out = MLP(LN2 z') + that.

    Args:
        z (Tensor): [..., T, N+1, D]
        w (BlockWeights): Block parameters
        config (EncoderConfig): Variant and mixing settings
        schedule (MaskSchedule | None): Required for stca
        plans (dict[int, ChannelPlan] | None): Channel plan overrides
        mixing (bool): False evaluates stca without cross-frame mixing
        dynamic (bool): False drops the window-shifted path of stca, so the block output is
            MLP(LN2 z') + z', the spatial-only block

    Returns:
        Tensor: [..., T, N+1, D]
    """
    eps = config.ln_eps
    frames, rows = z.shape[-3], z.shape[-2]
    variant = config.variant
    if variant == "full_spacetime":
        lead = z.shape[:-3]
        joint = tn.reshape(z, lead + (frames * rows, z.shape[-1]))
        z1 = _spatial_path(joint, w, eps)
        out = tn.add(_mlp_path(z1, w, eps), z1)
        return tn.reshape(out, z.shape)

    z1 = _spatial_path(z, w, eps)
    if variant == "spatial_only" or (variant == "stca" and not dynamic):
        return tn.add(_mlp_path(z1, w, eps), z1)
    if variant == "factorized":
        k = z1.ndim - 3
        swap = tuple(range(k)) + (k + 1, k, k + 2)
        temporal = tn.transpose(z1, swap)
        z2 = tn.transpose(_spatial_path(temporal, w, eps), swap)
        return tn.add(_mlp_path(z2, w, eps), z2)

    if schedule is None:
        raise ConfigurationError("stca blocks need a mask schedule", key="mask_strategy")
    if schedule.frames != frames or schedule.maps.shape[1] != rows - 1:
        raise ConfigurationError(
            f"schedule built for T={schedule.frames}, N={schedule.maps.shape[1]} "
            f"does not fit tokens with T={frames}, N={rows - 1}", key="frames")
    shifted, _ = apply_schedule(z, schedule)
    z_bar = multiscale_attend(shifted, config.mix, w.attn, w.ln1_gain, w.ln1_bias, eps,
                              plans=plans, mixing=mixing)
    z_fused = pad_and_fuse(z1, z_bar, schedule.maps)
    return tn.add(_mlp_path(z1, w, eps), z_fused)


def stca_block_forward(z, w, schedule, config, plans=None):
    """Block forward with the stca variant regardless of config.variant."""
    return block_forward(z, w, config.with_variant("stca"), schedule, plans=plans)


class VideoEncoder:
    """
    Encoder bound to one configuration, weight set and mask schedule.

    Attributes:
        config (EncoderConfig): Shapes and variant
        weights (EncoderWeights): Parameters
        schedule (MaskSchedule | None): Shared by every layer; None unless variant is stca
        plans (dict[int, ChannelPlan] | None): Channel plan overrides
        mixing (bool): Cross-frame mixing switch
        dynamic (bool): Window-shifted path switch; False turns stca into the spatial-only block
    """

    def __init__(self, config, weights=None, plans=None, mixing=True, dynamic=True):
        config.validate()
        self.config = config
        self.weights = weights if weights is not None else EncoderWeights.initialize(config)
        self.plans = plans
        self.mixing = mixing
        self.dynamic = dynamic
        self.schedule = None
        if config.variant == "stca":
            self.schedule = build_mask_schedule(config.grid, config.window, config.frames, config.layers,
                                                strategy=config.mask_strategy, seed=config.mask_seed)

    def with_weights(self, weights):
        clone = VideoEncoder.__new__(VideoEncoder)
        clone.__dict__.update(self.__dict__)
        clone.weights = weights
        return clone

    def tokens(self, video):
        """
        Run all blocks and keep every layer's tokens.

        Returns:
            list[Tensor]: z^0 .. z^L, each [..., T, N+1, D]
        """
        z = patch_embed(video, self.weights, self.config)
        layers = [z]
        for layer in range(self.config.layers):
            z = block_forward(z, self.weights.block(layer), self.config, self.schedule,
                              plans=self.plans, mixing=self.mixing, dynamic=self.dynamic)
            layers.append(z)
        return layers

    def encode(self, video):
        """
        Final-layer CLS row of every frame, L2-normalized.

        Returns:
            Tensor: [..., T, D]
        """
        z = self.tokens(video)[-1]
        cls = tn.take(z, (Ellipsis, 0, slice(None)))
        return tn.l2_normalize(cls, axis=-1)


def encode_video(video, weights, config, plans=None, mixing=True):
    """Encode one video (or a batch) into unit-norm per-frame features [..., T, D]."""
    return VideoEncoder(config, weights, plans=plans, mixing=mixing).encode(video)


def closed_form_pairs(config, variant=None):
    """
    Attention pair interactions of a full forward pass, from the closed forms.

    spatial_only: L*T*(N+1)^2
    stca: L*(T*(N+1)^2 + S*T*N'^2)
    full_spacetime: L*(T*(N+1))^2
    factorized: L*(T*(N+1)^2 + (N+1)*T^2)
    """
    variant = variant or config.variant
    t, n, layers = config.frames, config.n_patches, config.layers
    spatial = t * (n + 1) ** 2
    if variant == "spatial_only":
        per_layer = spatial
    elif variant == "stca":
        n_prime = visible_count(config.grid, config.window)
        per_layer = spatial + len(config.mix.scales) * t * n_prime ** 2
    elif variant == "full_spacetime":
        per_layer = (t * (n + 1)) ** 2
    elif variant == "factorized":
        per_layer = spatial + (n + 1) * t ** 2
    else:
        raise ConfigurationError(f"unknown variant '{variant}'", key="variant")
    return layers * per_layer


def measured_pairs(config, variant=None, weights=None):
    """Run one forward pass on a zero video and return the counted pair interactions."""
    cfg = config.with_variant(variant or config.variant)
    encoder = VideoEncoder(cfg, weights)
    video = np.zeros((cfg.frames, cfg.height, cfg.width, 3))
    with nn.PairCounter() as counter:
        encoder.tokens(video)
    return counter.count


def pair_interaction_count(config, measure=True):
    """
    Closed-form and measured pair counts for every variant.

    Returns:
        dict[str, dict[str, int]]: variant -> {"closed_form", "measured"}
    """
    report = {}
    for variant in VARIANTS:
        entry = {"closed_form": closed_form_pairs(config, variant)}
        if measure:
            entry["measured"] = measured_pairs(config, variant)
        report[variant] = entry
    return report
