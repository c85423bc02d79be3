"""Rotation-aware multi-scale fusion decoding.

Four encoder scales are aligned by 1x1 lateral transforms and merged top
down: upsample the deeper decoder map, concatenate with the lateral map,
refine with L2-normalized linear attention (channel flavor on the two
coarser fusions, spatial flavor on the finest), then mix with an adaptive
rotated convolution whose kernel angles and blend weights are predicted
from the feature map itself.

The linear attention is the residual form

    out = x + gamma * (sum_t V_t + Q (K^T V)) / (T + Q sum_t K_t + eps)

over T tokens, with every query and key token scaled to unit L2 norm, so
the denominator is bounded below by eps and the whole block is the exact
identity at gamma = 0.  In channel mode the tokens are the channels; in
spatial mode they are the pixel positions.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeError
from .tensor import Tensor

DEFAULT_ARC_KERNELS = 4
MAX_ARC_KERNELS = 8
DEFAULT_ATTENTION_EPS = 1e-6
DEFAULT_DECODER_WIDTH = 96


@dataclass
class ScalePyramid:
    """Encoder features at strides 4/8/16/32; consecutive scales must
    differ by exactly 2x in each spatial dimension."""

    x1: Tensor
    x2: Tensor
    x3: Tensor
    x4: Tensor

    def __post_init__(self):
        maps = [self.x1, self.x2, self.x3, self.x4]
        for a, b in zip(maps, maps[1:]):
            if a.shape[1] != 2 * b.shape[1] or a.shape[2] != 2 * b.shape[2]:
                raise ShapeError(
                    f"pyramid scales must halve: {a.shape} then {b.shape}")

    @property
    def maps(self):
        return [self.x1, self.x2, self.x3, self.x4]


@dataclass
class LinearAttentionParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    gamma: Tensor
    eps: float = DEFAULT_ATTENTION_EPS

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigurationError(f"attention eps must be positive, got {self.eps}")

    def parameters(self):
        return [("w_q", self.w_q), ("b_q", self.b_q),
                ("w_k", self.w_k), ("b_k", self.b_k),
                ("w_v", self.w_v), ("b_v", self.b_v),
                ("gamma", self.gamma)]


@dataclass
class ArcParams:
    """Base kernels plus the routing head that predicts, per input, one
    rotation angle and one blend weight for each kernel."""

    kernels: list
    w_r1: Tensor
    b_r1: Tensor
    w_r2: Tensor
    b_r2: Tensor
    n: int

    def __post_init__(self):
        if not 1 <= self.n <= MAX_ARC_KERNELS:
            raise ConfigurationError(
                f"kernel count must be in [1, {MAX_ARC_KERNELS}], got {self.n}")
        if len(self.kernels) != self.n:
            raise ConfigurationError(
                f"expected {self.n} kernels, got {len(self.kernels)}")

    def parameters(self):
        named = [(f"k{i}", k) for i, k in enumerate(self.kernels)]
        named += [("w_r1", self.w_r1), ("b_r1", self.b_r1),
                  ("w_r2", self.w_r2), ("b_r2", self.b_r2)]
        return named


@dataclass
class RamsfStageParams:
    attention: LinearAttentionParams
    arc: ArcParams

    def parameters(self):
        named = [(f"attn.{n}", t) for n, t in self.attention.parameters()]
        named += [(f"arc.{n}", t) for n, t in self.arc.parameters()]
        return named


@dataclass
class RamsfParams:
    """Lateral transforms for all four scales plus one fusion stage per
    top-down step (deepest first: refines scales 3, 2, then 1).

    ``arc_before_attention`` is fixed at creation because it decides the
    channel width the attention projections are built for.
    """

    lateral_w: list
    lateral_b: list
    stages: list
    c_dec: int = DEFAULT_DECODER_WIDTH
    arc_before_attention: bool = False

    def parameters(self):
        named = []
        for i, (w, b) in enumerate(zip(self.lateral_w, self.lateral_b)):
            named.append((f"lat{i + 1}.w", w))
            named.append((f"lat{i + 1}.b", b))
        for stage, scale in zip(self.stages, (3, 2, 1)):
            named += [(f"stage{scale}.{n}", t) for n, t in stage.parameters()]
        return named


def _conv_kernel(rng, c_out, c_in, k):
    std = math.sqrt(2.0 / (c_in * k * k))
    w = T.gaussian(rng, (c_out, c_in, k, k), std=std)
    b = T.zeros((c_out,), requires_grad=True)
    return w, b


def routing_hidden_width(c_in):
    return max(4, c_in // 4)


def create_linear_attention_params(rng, channels, eps=DEFAULT_ATTENTION_EPS):
    params = {}
    for name in ("q", "k", "v"):
        w, b = _conv_kernel(rng, channels, channels, 1)
        params[f"w_{name}"] = w
        params[f"b_{name}"] = b
    # gamma starts at zero so the block begins as the identity
    gamma = T.zeros((), requires_grad=True)
    return LinearAttentionParams(gamma=gamma, eps=eps, **params)


def create_arc_params(rng, c_in, c_out, n=DEFAULT_ARC_KERNELS, k=3):
    kernels = [_conv_kernel(rng, c_out, c_in, k)[0] for _ in range(n)]
    hidden = routing_hidden_width(c_in)
    w_r1 = T.gaussian(rng, (hidden, c_in), std=1.0 / math.sqrt(c_in))
    b_r1 = T.zeros((hidden,), requires_grad=True)
    w_r2 = T.gaussian(rng, (2 * n, hidden), std=1.0 / math.sqrt(hidden))
    b_r2 = T.zeros((2 * n,), requires_grad=True)
    return ArcParams(kernels, w_r1, b_r1, w_r2, b_r2, n=n)


def create_ramsf_params(rng, in_channels, c_dec=DEFAULT_DECODER_WIDTH,
                        arc_n=DEFAULT_ARC_KERNELS, eps=DEFAULT_ATTENTION_EPS,
                        arc_before_attention=False):
    if len(in_channels) != 4:
        raise ConfigurationError(f"expected 4 pyramid widths, got {in_channels}")
    lateral_w, lateral_b = [], []
    for c in in_channels:
        w, b = _conv_kernel(rng, c_dec, c, 1)
        lateral_w.append(w)
        lateral_b.append(b)
    attn_width = c_dec if arc_before_attention else 2 * c_dec
    stages = []
    for _ in range(3):
        attn = create_linear_attention_params(rng, attn_width, eps=eps)
        arc = create_arc_params(rng, 2 * c_dec, c_dec, n=arc_n)
        stages.append(RamsfStageParams(attn, arc))
    return RamsfParams(lateral_w, lateral_b, stages, c_dec=c_dec,
                       arc_before_attention=arc_before_attention)


def expected_ramsf_param_count(in_channels, c_dec=DEFAULT_DECODER_WIDTH,
                               arc_n=DEFAULT_ARC_KERNELS, arc_before_attention=False):
    """Closed-form parameter count of the full decoder bundle."""
    laterals = sum(c_dec * c + c_dec for c in in_channels)
    c = 2 * c_dec
    aw = c_dec if arc_before_attention else c
    attention = 3 * (aw * aw + aw) + 1  # q/k/v 1x1 convs plus gamma
    hidden = routing_hidden_width(c)
    arc = arc_n * (c_dec * c * 9) + (hidden * c + hidden) + (2 * arc_n * hidden + 2 * arc_n)
    return laterals + 3 * (attention + arc)


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def lateral(x, w, b):
    """ReLU(1x1 conv): align one encoder scale to the decoder width."""
    return T.relu(T.conv2d(x, w, b))


def concat_fuse(l_i, y_i):
    """Channel concatenation of a lateral map with the upsampled decoder map."""
    if l_i.shape[1:] != y_i.shape[1:]:
        raise ShapeError(
            f"spatial dims disagree for fusion: {l_i.shape} vs {y_i.shape}")
    return T.concat([l_i, y_i], axis=0)


def _token_qkv(x, p, mode):
    """Project 1x1 q/k/v and lay them out as token matrices.

    Returns (Q, K, V, token_count, feature_dim) with Q and K rows scaled
    to unit L2 norm.  Spatial mode: one token per pixel, channel features.
    Channel mode: one token per channel, pixel features.
    """
    c, h, w = x.shape
    m = h * w
    q = T.reshape(T.conv2d(x, p.w_q, p.b_q), (c, m))
    k = T.reshape(T.conv2d(x, p.w_k, p.b_k), (c, m))
    v = T.reshape(T.conv2d(x, p.w_v, p.b_v), (c, m))
    if mode == "spatial":
        return (T.l2_normalize_rows(T.transpose(q)),
                T.l2_normalize_rows(T.transpose(k)),
                T.transpose(v), m, c)
    if mode == "channel":
        return T.l2_normalize_rows(q), T.l2_normalize_rows(k), v, c, m
    raise ConfigurationError(f"mode must be 'channel' or 'spatial', got {mode!r}")


def _attention_ratio(x, p, mode, literal_hw_denominator):
    qn, kn, v, tokens, d = _token_qkv(x, p, mode)
    if mode == "channel":
        qkv = T.matmul(T.matmul(qn, T.transpose(kn)), v)
    else:
        qkv = T.matmul(qn, T.matmul(T.transpose(kn), v))
    ones_row = T.ones((1, tokens))
    sum_v = T.matmul(ones_row, v)                       # 1 x d
    num = T.add(T.matmul(T.ones((tokens, 1)), sum_v), qkv)
    sum_k = T.matmul(ones_row, kn)                      # 1 x d
    den_col = T.matmul(qn, T.transpose(sum_k))          # tokens x 1
    base = x.shape[1] * x.shape[2] if literal_hw_denominator else tokens
    den = T.add(T.matmul(den_col, T.ones((1, d))), T.full((tokens, d), base + p.eps))
    return T.div(num, den)


def linear_attention(x, p, mode, literal_hw_denominator=False):
    """Residual linear attention over channels or pixels of a C x H x W map.

    With unit-norm query/key tokens the denominator stays within
    [eps, 2*tokens + eps], so the ratio is finite for all finite inputs.
    ``literal_hw_denominator`` switches the channel variant's denominator
    base from the token count to H*W.
    """
    c, h, w = x.shape
    ratio = _attention_ratio(x, p, mode, literal_hw_denominator)
    if mode == "spatial":
        attn_map = T.reshape(T.transpose(ratio), (c, h, w))
    else:
        attn_map = T.reshape(ratio, (c, h, w))
    return T.add(x, T.mul(p.gamma, attn_map))


def attention_denominator(x, p, mode, literal_hw_denominator=False):
    """The raw denominator values, exposed for positivity checks."""
    qn, kn, _, tokens, _ = _token_qkv(x, p, mode)
    sum_k = T.matmul(T.ones((1, tokens)), kn)
    den_col = T.matmul(qn, T.transpose(sum_k))
    base = x.shape[1] * x.shape[2] if literal_hw_denominator else tokens
    return den_col.data.reshape(-1) + base + p.eps


def arc_routing(x, p):
    """Predict per-kernel rotation angles and blend weights from the map.

    Angles pass through an odd squashing onto [-pi/2, pi/2]; weights are a
    softmax, so they are nonnegative and sum to one.
    """
    c = x.shape[0]
    pooled = T.reshape(T.global_avg_pool(x), (1, c))
    hidden = T.relu(T.conv1d(pooled, p.w_r1, p.b_r1))
    raw = T.conv1d(hidden, p.w_r2, p.b_r2)
    theta = T.scale(T.tanh(T.narrow(raw, 1, 0, p.n)), math.pi / 2.0)
    lam = T.softmax_lastdim(T.narrow(raw, 1, p.n, p.n))
    return T.reshape(theta, (p.n,)), T.reshape(lam, (p.n,))


def arc_conv(x, p, stride=1, padding=1):
    """Adaptive rotated convolution: rotate each base kernel by its routed
    angle, convolve, and blend the outputs with the routed weights."""
    theta, lam = arc_routing(x, p)
    c_out = p.kernels[0].shape[0]
    zero_bias = T.zeros((c_out,))
    out = None
    for i in range(p.n):
        w_i = T.rotate_kernel(p.kernels[i], T.narrow(theta, 0, i, 1))
        y_i = T.conv2d(x, w_i, zero_bias, stride=stride, padding=padding)
        term = T.mul(T.narrow(lam, 0, i, 1), y_i)
        out = term if out is None else T.add(out, term)
    return out


def ramsf_decode(pyr, params, literal_hw_denominator=False):
    """Top-down decode of a four-scale pyramid to the stride-4 resolution.

    Stage order is deepest first; the two coarser fusions use channel
    attention, the finest uses spatial attention.
    """
    lats = [lateral(x, w, b) for x, w, b
            in zip(pyr.maps, params.lateral_w, params.lateral_b)]
    y = lats[3]
    modes = ("channel", "channel", "spatial")
    for stage, lat_i, mode in zip(params.stages, (lats[2], lats[1], lats[0]), modes):
        up = T.upsample_bilinear(y, 2)
        fused = concat_fuse(lat_i, up)
        if params.arc_before_attention:
            fused = arc_conv(fused, stage.arc)
            y = linear_attention(fused, stage.attention, mode,
                                 literal_hw_denominator)
        else:
            fused = linear_attention(fused, stage.attention, mode,
                                     literal_hw_denominator)
            y = arc_conv(fused, stage.arc)
    return y
