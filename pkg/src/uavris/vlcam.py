"""Vision-language cross-attention fusion.

Vision tokens query language tokens through multi-head scaled dot-product
attention; the attended features gate the vision stream elementwise and a
small feed-forward stack produces the fused output, which keeps the vision
input's shape so the block drops into any encoder stage.

Pipeline: project q/k/v -> add learnable positional offsets to q ->
multi-head cross attention -> elementwise fusion -> FFN -> projection.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeError
from .tensor import Tensor

DEFAULT_HEADS = 8
DEFAULT_CK = 64
DEFAULT_DROPOUT = 0.1
POSITIONAL_STD = 0.02


@dataclass
class VlcamParams:
    """Learnable bundle for one fusion block.

    c_v / c_l / c_k are the vision, language, and query-key widths; both
    c_k and c_v must be divisible by the head count.  p_v is sized for a
    fixed vision-token count.
    """

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    p_v: Tensor
    w_fuse: Tensor
    b_fuse: Tensor
    w_ffn1: Tensor
    b_ffn1: Tensor
    w_ffn2: Tensor
    b_ffn2: Tensor
    w_out: Tensor
    b_out: Tensor
    heads: int = DEFAULT_HEADS
    c_k: int = DEFAULT_CK
    c_v: int = 0
    c_l: int = 0
    dropout_rate: float = DEFAULT_DROPOUT

    def __post_init__(self):
        if self.c_k % self.heads or self.c_v % self.heads:
            raise ConfigurationError(
                f"heads={self.heads} must divide c_k={self.c_k} and c_v={self.c_v}")
        if self.p_v.shape[1] != self.c_k:
            raise ShapeError(f"p_v width {self.p_v.shape} != c_k {self.c_k}")

    @property
    def tokens(self):
        return self.p_v.shape[0]

    def parameters(self):
        named = [
            ("w_q", self.w_q), ("b_q", self.b_q),
            ("w_k", self.w_k), ("b_k", self.b_k),
            ("w_v", self.w_v), ("b_v", self.b_v),
            ("p_v", self.p_v),
            ("w_fuse", self.w_fuse), ("b_fuse", self.b_fuse),
            ("w_ffn1", self.w_ffn1), ("b_ffn1", self.b_ffn1),
            ("w_ffn2", self.w_ffn2), ("b_ffn2", self.b_ffn2),
            ("w_out", self.w_out), ("b_out", self.b_out),
        ]
        return named


def _proj(rng, c_out, c_in):
    w = T.gaussian(rng, (c_out, c_in), std=1.0 / math.sqrt(c_in))
    b = T.zeros((c_out,), requires_grad=True)
    return w, b


def create_vlcam_params(rng, tokens, c_v, c_l, c_k=DEFAULT_CK, heads=DEFAULT_HEADS,
                        dropout_rate=DEFAULT_DROPOUT):
    w_q, b_q = _proj(rng, c_k, c_v)
    w_k, b_k = _proj(rng, c_k, c_l)
    w_v, b_v = _proj(rng, c_v, c_l)
    p_v = T.gaussian(rng, (tokens, c_k), std=POSITIONAL_STD)
    w_fuse, b_fuse = _proj(rng, c_v, c_v)
    w_ffn1, b_ffn1 = _proj(rng, 4 * c_v, c_v)
    w_ffn2, b_ffn2 = _proj(rng, c_v, 4 * c_v)
    w_out, b_out = _proj(rng, c_v, c_v)
    return VlcamParams(w_q, b_q, w_k, b_k, w_v, b_v, p_v, w_fuse, b_fuse,
                       w_ffn1, b_ffn1, w_ffn2, b_ffn2, w_out, b_out,
                       heads=heads, c_k=c_k, c_v=c_v, c_l=c_l,
                       dropout_rate=dropout_rate)


def expected_vlcam_param_count(tokens, c_v, c_l, c_k=DEFAULT_CK):
    """Closed-form size of one fusion block's parameter bundle."""
    proj = (c_k * c_v + c_k) + (c_k * c_l + c_k) + (c_v * c_l + c_v)
    pos = tokens * c_k
    fuse = c_v * c_v + c_v
    ffn = (4 * c_v * c_v + 4 * c_v) + (c_v * 4 * c_v + c_v)
    out = c_v * c_v + c_v
    return proj + pos + fuse + ffn + out


def project_qkv(f_v, f_l, p):
    """Project both streams into the shared attention space.

    The query path is instance-normalized and offset by the learnable
    positional table; keys and values are plain projections.
    """
    if f_v.shape[0] != p.tokens:
        raise ShapeError(
            f"vision token count {f_v.shape[0]} != positional table {p.tokens}")
    q = T.instance_norm(T.conv1d(f_v, p.w_q, p.b_q))
    q = T.add(q, p.p_v)
    k = T.conv1d(f_l, p.w_k, p.b_k)
    v = T.conv1d(f_l, p.w_v, p.b_v)
    return q, k, v


def cross_attention(q, k, v, heads):
    """Multi-head scaled dot-product attention of vision queries over
    language keys/values; heads are concatenated back to full width."""
    c_k = q.shape[1]
    c_v = v.shape[1]
    if c_k % heads or c_v % heads:
        raise ConfigurationError(
            f"heads={heads} must divide query width {c_k} and value width {c_v}")
    dk = c_k // heads
    dv = c_v // heads
    outs = []
    for h in range(heads):
        qh = T.narrow(q, 1, h * dk, dk)
        kh = T.narrow(k, 1, h * dk, dk)
        vh = T.narrow(v, 1, h * dv, dv)
        logits = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dk))
        attn = T.softmax_lastdim(logits)
        outs.append(T.matmul(attn, vh))
    return outs[0] if heads == 1 else T.concat(outs, axis=1)


def fuse(f_vl, f_v, p):
    """Elementwise interaction with the vision stream, then a normalized
    projection back to the vision width."""
    if f_vl.shape != f_v.shape:
        raise ShapeError(f"fusion inputs disagree: {f_vl.shape} vs {f_v.shape}")
    return T.instance_norm(T.conv1d(T.mul(f_vl, f_v), p.w_fuse, p.b_fuse))


def vlcam_forward(f_v, f_l, p, dropout_rng=None, fuse_residual=False):
    """Full fusion block: attention, gating, FFN, output projection.

    ``dropout_rng=None`` runs in eval mode (dropout disabled, fully
    deterministic).  ``fuse_residual`` optionally adds the raw vision
    features back after the gating stage; off by default.
    """
    q, k, v = project_qkv(f_v, f_l, p)
    f_vl = cross_attention(q, k, v, p.heads)
    fused = fuse(f_vl, f_v, p)
    if fuse_residual:
        fused = T.add(fused, f_v)
    h1 = T.relu(T.conv1d(fused, p.w_ffn1, p.b_ffn1))
    h1 = T.dropout(h1, p.dropout_rate, dropout_rng)
    f_ffn = T.instance_norm(T.conv1d(h1, p.w_ffn2, p.b_ffn2))
    out = T.dropout(T.conv1d(f_ffn, p.w_out, p.b_out), p.dropout_rate, dropout_rng)
    return out
