"""
Multi-scale channel mixing.

A channel plan says, for every channel range, which neighbouring frame the
range is read from. Mixing applies a plan to window-shifted tokens; the
multi-scale step attends over the mixed tokens at each temporal scale and
averages the results.
"""
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction

from . import nn
from . import tensor as tn
from .errors import ConfigurationError, DimensionError

logger = logging.getLogger(__name__)

MIX_MODES = ("separate", "continual")
BOUNDARY_POLICIES = ("zero-fill", "self-fill")


@dataclass(frozen=True)
class MixSpec:
    """
    Attributes:
        scales (tuple[int, ...]): Temporal scales, each used as +/- delta
        gamma (float): d_delta = gamma * D channels are read from past frames (and as many from future frames)
        mode (str): "separate" or "continual"
        boundary (str): "zero-fill" or "self-fill" for source frames outside the clip
    """
    scales: tuple = (1, 2)
    gamma: float = 0.125
    mode: str = "continual"
    boundary: str = "zero-fill"

    def donated_width(self, width):
        """
        d_delta = gamma * D.

        Raises:
            ConfigurationError: If gamma is outside (0, 0.5) or gamma * D is fractional
        """
        gamma = Fraction(self.gamma).limit_denominator(10**6)
        if not 0 < gamma < Fraction(1, 2):
            raise ConfigurationError(f"gamma {self.gamma} must lie in (0, 0.5)", key="gamma")
        d = gamma * width
        if d.denominator != 1:
            raise ConfigurationError(f"gamma {self.gamma} x D={width} is not an integer channel count", key="gamma")
        return int(d)

    def validate(self, width):
        if not self.scales:
            raise ConfigurationError("at least one temporal scale is required", key="scales")
        if any(int(s) != s or s < 1 for s in self.scales):
            raise ConfigurationError(f"scales must be positive integers, got {self.scales}", key="scales")
        if self.mode not in MIX_MODES:
            raise ConfigurationError(f"unknown mix mode '{self.mode}'", key="mix_mode")
        if self.boundary not in BOUNDARY_POLICIES:
            raise ConfigurationError(f"unknown boundary policy '{self.boundary}'", key="boundary")
        d = self.donated_width(width)
        if self.mode == "continual":
            for delta in self.scales:
                if d % delta != 0:
                    raise ConfigurationError(
                        f"continual mixing needs d_delta={d} divisible by scale {delta}", key="scales")
        return d


@dataclass(frozen=True)
class Segment:
    """Channels [start, end) of the output are read from frame t + offset."""
    offset: int
    start: int
    end: int
    source_start: int = field(default=None, compare=False)

    @property
    def width(self):
        return self.end - self.start

    @property
    def source(self):
        return self.start if self.source_start is None else self.source_start

    def to_dict(self):
        out = {"offset": self.offset, "start": self.start, "end": self.end}
        if self.source != self.start:
            out["source"] = self.source
        return out


@dataclass(frozen=True)
class ChannelPlan:
    """Ordered segments covering [0, D) exactly once, self segment last."""
    segments: tuple
    width: int
    delta: int

    def __post_init__(self):
        is_valid, message = self.is_valid()
        if not is_valid:
            raise ConfigurationError(message, key="channel_plan")

    def is_valid(self):
        """
        Check coverage and ordering.

        Returns:
            tuple: (is_valid, message)
        """
        if not self.segments:
            return False, "plan has no segments"
        cursor = 0
        for seg in self.segments:
            if seg.start != cursor or seg.end <= seg.start:
                return False, f"segment {seg.to_dict()} breaks contiguous coverage at channel {cursor}"
            cursor = seg.end
        if cursor != self.width:
            return False, f"plan covers [0, {cursor}) instead of [0, {self.width})"
        self_segments = [seg for seg in self.segments if seg.offset == 0]
        if len(self_segments) != 1 or self.segments[-1].offset != 0:
            return False, "plan needs exactly one self segment, placed last"
        return True, "Valid plan"

    def to_json(self):
        return json.dumps([seg.to_dict() for seg in self.segments])


def plan_channels(width, delta, spec):
    """
    Build the channel plan for one temporal scale.

    separate:  [(-d, 0, dd), (+d, dd, 2dd), (0, 2dd, D)]
    continual: offsets -d..-1 then +1..+d, each dd/d wide, then (0, 2dd, D)

    Args:
        width (int): D
        delta (int): Scale
        spec (MixSpec): Mixing settings

    Returns:
        ChannelPlan
    """
    d = spec.validate(width)
    if delta < 1:
        raise ConfigurationError(f"scale must be positive, got {delta}", key="scales")
    if spec.mode == "separate":
        segments = [Segment(-delta, 0, d), Segment(delta, d, 2 * d)]
    else:
        if d % delta != 0:
            raise ConfigurationError(f"continual mixing needs d_delta={d} divisible by scale {delta}", key="scales")
        step = d // delta
        segments = [Segment(-delta + i, i * step, (i + 1) * step) for i in range(delta)]
        segments += [Segment(i + 1, d + i * step, d + (i + 1) * step) for i in range(delta)]
    segments.append(Segment(0, 2 * d, width))
    return ChannelPlan(tuple(segments), width, delta)


def _shifted(tokens, offset, src, dst, boundary):
    """Channels src of frame t + offset for every t, filled at the clip edges."""
    frames = tokens.shape[-3]
    lead = (Ellipsis,)
    if offset == 0:
        return tn.take(tokens, lead + (slice(None), slice(None), src))
    span = min(abs(offset), frames)
    if boundary == "self-fill":
        fill_slice = slice(0, span) if offset < 0 else slice(frames - span, frames)
        fill = tn.take(tokens, lead + (fill_slice, slice(None), dst))
    else:
        shape = tokens.shape[:-3] + (span, tokens.shape[-2], dst.stop - dst.start)
        fill = tn.zeros(shape)
    if span == frames:
        return fill
    if offset < 0:
        body = tn.take(tokens, lead + (slice(0, frames - span), slice(None), src))
        return tn.concat([fill, body], axis=-3)
    body = tn.take(tokens, lead + (slice(span, frames), slice(None), src))
    return tn.concat([body, fill], axis=-3)


def mix(tokens, delta, plan, boundary="zero-fill"):
    """
    Replace channel ranges of every token with the same-position token of a neighbouring frame.

    out[..., t, p, c] = tokens[..., t + offset(c), p, c] where offset(c) is the
    covering segment's offset; source frames outside the clip are zero under
    "zero-fill" and the token's own channels under "self-fill".

    Args:
        tokens (Tensor): [..., T, N', D] window-shifted tokens
        delta (int): Scale the plan was built for
        plan (ChannelPlan): Channel plan for width D
        boundary (str): Edge policy

    Returns:
        Tensor: [..., T, N', D]
    """
    if tokens.ndim < 3:
        raise DimensionError(f"mix expects [..., T, N', D] tokens, got {tokens.shape}")
    if plan.width != tokens.shape[-1]:
        raise DimensionError(f"plan covers {plan.width} channels, tokens have {tokens.shape[-1]}")
    if plan.delta != delta:
        raise ConfigurationError(f"plan was built for scale {plan.delta}, not {delta}", key="scales")
    if boundary not in BOUNDARY_POLICIES:
        raise ConfigurationError(f"unknown boundary policy '{boundary}'", key="boundary")
    parts = []
    for seg in plan.segments:
        dst = slice(seg.start, seg.end)
        src = slice(seg.source, seg.source + seg.width)
        parts.append(_shifted(tokens, seg.offset, src, dst, boundary))
    return tn.concat(parts, axis=-1)


def multiscale_attend(tokens, spec, attn, ln_gain, ln_bias, eps=1e-5, plans=None, mixing=True):
    """
    Attend over mixed tokens at every scale and average the scale outputs.

    For each scale: y = mix(tokens); out = mhsa(layer_norm(y)) + y, attending
    over the N' tokens of each frame independently. The result is the
    unweighted mean of the per-scale outputs, summed in scale order.

    Args:
        tokens (Tensor): [..., T, N', D] window-shifted tokens
        spec (MixSpec): Scales, gamma, mode and boundary policy
        attn (AttentionWeights): Shared with the block's spatial attention
        ln_gain (Tensor): Shared first layer-norm gain
        ln_bias (Tensor): Shared first layer-norm bias
        eps (float): Layer-norm epsilon
        plans (dict[int, ChannelPlan] | None): Overrides the plans built from spec
        mixing (bool): False skips the channel mixing (frame-local reference)

    Returns:
        Tensor: [..., T, N', D]
    """
    width = tokens.shape[-1]
    spec.validate(width)
    outputs = []
    for delta in spec.scales:
        if mixing:
            plan = plans[delta] if plans and delta in plans else plan_channels(width, delta, spec)
            mixed = mix(tokens, delta, plan, spec.boundary)
        else:
            mixed = tokens
        attended = nn.mhsa(nn.layer_norm(mixed, ln_gain, ln_bias, eps), attn)
        outputs.append(tn.add(attended, mixed))
    return tn.mean_of(outputs)
