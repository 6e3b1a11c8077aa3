"""
Transformer building blocks composed from tensor primitives.

Layer normalization, linear projections, multi-head self-attention with a
pair-interaction counter, and the two-layer GELU MLP.
"""
import math
import threading
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError, DimensionError

_counters = threading.local()


class PairCounter:
    """
    Counts query-key dot products performed by `mhsa` while active.

    Counters nest; every active counter on the current thread receives each
    increment. The count is per attention map and does not depend on the
    number of heads.

    Attributes:
        count (int): Pair interactions observed so far
        calls (int): Number of attention evaluations observed
    """

    def __init__(self):
        self.count = 0
        self.calls = 0

    def __enter__(self):
        _counter_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _counter_stack().remove(self)
        return False

    @staticmethod
    def notify(pairs):
        for counter in _counter_stack():
            counter.count += pairs
            counter.calls += 1


def _counter_stack():
    if not hasattr(_counters, "stack"):
        _counters.stack = []
    return _counters.stack


def layer_norm(x, gain, bias, eps=1e-5):
    """
    Normalize over the channel axis, then apply gain and bias.

    Args:
        x (Tensor): [..., D]
        gain (Tensor): [D]
        bias (Tensor): [D]
        eps (float): Variance floor

    Returns:
        Tensor: same shape as x
    """
    if x.shape[-1] < 1:
        raise DimensionError("layer_norm needs at least one channel")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match {x.shape}")
    mu = tn.mean(x, axis=-1, keepdims=True)
    centered = tn.sub(x, mu)
    var = tn.mean(tn.mul(centered, centered), axis=-1, keepdims=True)
    inv_std = tn.power(tn.add(var, eps), -0.5)
    return tn.add(tn.mul(tn.mul(centered, inv_std), gain), bias)


def linear(x, weight, bias):
    """x @ weight + bias with weight stored as [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} does not match weight {weight.shape}")
    return tn.add(tn.matmul(x, weight), bias)


@dataclass(frozen=True)
class AttentionWeights:
    """Query, key, value and output projections of one multi-head attention layer."""
    q_weight: tn.Tensor
    q_bias: tn.Tensor
    k_weight: tn.Tensor
    k_bias: tn.Tensor
    v_weight: tn.Tensor
    v_bias: tn.Tensor
    o_weight: tn.Tensor
    o_bias: tn.Tensor
    heads: int

    @property
    def width(self):
        return self.q_weight.shape[0]


def _split_heads(x, heads):
    *lead, n, d = x.shape
    x = tn.reshape(x, tuple(lead) + (n, heads, d // heads))
    k = len(lead)
    return tn.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(x):
    *lead, h, n, dh = x.shape
    k = len(lead)
    x = tn.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
    return tn.reshape(x, tuple(lead) + (n, h * dh))


def mhsa(x, w):
    """
    Multi-head scaled dot-product self-attention over the second-to-last axis.

    Leading axes are independent batches. Scores are scaled by
    1/sqrt(D/heads). Every active PairCounter is charged n² per attention
    map (times the product of the leading extents).

    Args:
        x (Tensor): [..., n, D], already layer-normalized by the caller
        w (AttentionWeights): Projections for width D

    Returns:
        Tensor: [..., n, D]

    Raises:
        ConfigurationError: If D is not divisible by the head count
        DimensionError: If x's width does not match the weights
    """
    d = x.shape[-1]
    if w.heads < 1 or d % w.heads != 0:
        raise ConfigurationError(f"width {d} is not divisible by {w.heads} heads", key="heads")
    if d != w.width:
        raise DimensionError(f"mhsa: input width {d} does not match weights {w.width}")
    n = x.shape[-2]
    q = _split_heads(linear(x, w.q_weight, w.q_bias), w.heads)
    k = _split_heads(linear(x, w.k_weight, w.k_bias), w.heads)
    v = _split_heads(linear(x, w.v_weight, w.v_bias), w.heads)
    scores = tn.mul(tn.matmul(q, tn.swap_last(k)), 1.0 / math.sqrt(d // w.heads))
    attn = tn.softmax_rows(scores)
    PairCounter.notify(n * n * int(np.prod(x.shape[:-2], dtype=np.int64)))
    context = _merge_heads(tn.matmul(attn, v))
    return linear(context, w.o_weight, w.o_bias)


def mlp(x, fc1_weight, fc1_bias, fc2_weight, fc2_bias):
    """Two linear layers with a GELU between them."""
    return linear(tn.gelu(linear(x, fc1_weight, fc1_bias)), fc2_weight, fc2_bias)
