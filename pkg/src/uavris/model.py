"""End-to-end referring-segmentation model at desk scale.

A four-stage strided-conv encoder stands in for a pretrained hierarchical
vision transformer, and a seeded embedding table plus one mixing layer
stands in for a pretrained language model.  Cross-attention fusion is
applied per encoder scale (when enabled), the rotation-aware decoder (or a
plain lateral+add pyramid path) produces stride-4 features, and a 1x1 head
emits 2-class logits upsampled back to the input resolution.

Also here: the decoupled-weight-decay Adam optimizer, the single-sample
smoke trainer, and the flat binary checkpoint container.
"""

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import ramsf, tensor as T, vlcam
from .errors import ContractError, NonFiniteError, ShapeError, TrainingError
from .tensor import Tape, Tensor, backward

CHECKPOINT_MAGIC = b"UVRSCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    image_size: int = 448
    in_channels: int = 3
    encoder_channels: tuple = (32, 64, 128, 256)
    c_l: int = 64
    c_k: int = 64
    heads: int = 8
    c_dec: int = ramsf.DEFAULT_DECODER_WIDTH
    arc_n: int = ramsf.DEFAULT_ARC_KERNELS
    vocab_size: int = 1000
    max_tokens: int = 20
    dropout_rate: float = vlcam.DEFAULT_DROPOUT
    enable_vlcam: bool = True
    enable_ramsf: bool = True
    fuse_residual: bool = False
    arc_before_attention: bool = False
    literal_hw_denominator: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.image_size % 32:
            raise ShapeError(f"image size must be divisible by 32, got {self.image_size}")
        if len(self.encoder_channels) != 4:
            raise ShapeError(f"need 4 encoder widths, got {self.encoder_channels}")

    @classmethod
    def smoke(cls, **overrides):
        """Small preset that trains in seconds on one synthetic sample."""
        base = dict(image_size=64, encoder_channels=(8, 16, 32, 64),
                    c_l=16, c_k=16, heads=4, c_dec=16, arc_n=2, max_tokens=12)
        base.update(overrides)
        return cls(**base)


ENCODER_STRIDES = (4, 2, 2, 2)


class Model:
    """Owns every parameter bundle and the forward graph."""

    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)

        self.embed = T.gaussian(rng, (cfg.vocab_size, cfg.c_l), std=0.02)
        self.mix_w = T.gaussian(rng, (cfg.c_l, cfg.c_l), std=1.0 / math.sqrt(cfg.c_l))
        self.mix_b = T.zeros((cfg.c_l,), requires_grad=True)

        self.enc_w, self.enc_b = [], []
        c_prev = cfg.in_channels
        for c in cfg.encoder_channels:
            std = math.sqrt(2.0 / (c_prev * 9))
            self.enc_w.append(T.gaussian(rng, (c, c_prev, 3, 3), std=std))
            self.enc_b.append(T.zeros((c,), requires_grad=True))
            c_prev = c

        self.vlcams = None
        if cfg.enable_vlcam:
            self.vlcams = []
            size = cfg.image_size
            for stride_total, c in zip((4, 8, 16, 32), cfg.encoder_channels):
                tokens = (size // stride_total) ** 2
                self.vlcams.append(vlcam.create_vlcam_params(
                    rng, tokens, c_v=c, c_l=cfg.c_l, c_k=cfg.c_k,
                    heads=cfg.heads, dropout_rate=cfg.dropout_rate))

        if cfg.enable_ramsf:
            self.decoder = ramsf.create_ramsf_params(
                rng, cfg.encoder_channels, c_dec=cfg.c_dec, arc_n=cfg.arc_n,
                arc_before_attention=cfg.arc_before_attention)
            self.baseline_lateral = None
        else:
            self.decoder = None
            self.baseline_lateral = []
            for c in cfg.encoder_channels:
                std = math.sqrt(2.0 / c)
                w = T.gaussian(rng, (cfg.c_dec, c, 1, 1), std=std)
                b = T.zeros((cfg.c_dec,), requires_grad=True)
                self.baseline_lateral.append((w, b))

        self.head_w = T.gaussian(rng, (2, cfg.c_dec, 1, 1),
                                 std=1.0 / math.sqrt(cfg.c_dec))
        self.head_b = T.zeros((2,), requires_grad=True)

    # -- parameter bookkeeping ---------------------------------------------

    def parameters(self):
        named = [("text.embed", self.embed), ("text.mix_w", self.mix_w),
                 ("text.mix_b", self.mix_b)]
        for i, (w, b) in enumerate(zip(self.enc_w, self.enc_b)):
            named.append((f"enc{i + 1}.w", w))
            named.append((f"enc{i + 1}.b", b))
        if self.vlcams is not None:
            for i, p in enumerate(self.vlcams):
                named += [(f"vlcam{i + 1}.{n}", t) for n, t in p.parameters()]
        if self.decoder is not None:
            named += [(f"dec.{n}", t) for n, t in self.decoder.parameters()]
        else:
            for i, (w, b) in enumerate(self.baseline_lateral):
                named.append((f"fpn.lat{i + 1}.w", w))
                named.append((f"fpn.lat{i + 1}.b", b))
        named += [("head.w", self.head_w), ("head.b", self.head_b)]
        return named

    def param_count(self):
        return sum(t.size for _, t in self.parameters())

    def state(self):
        return {name: t.data.copy() for name, t in self.parameters()}

    def load_state(self, state):
        for name, t in self.parameters():
            if name not in state:
                raise ContractError(f"checkpoint is missing parameter {name!r}")
            if state[name].shape != t.data.shape:
                raise ShapeError(
                    f"checkpoint shape {state[name].shape} != {t.data.shape} for {name!r}")
            t.data = np.asarray(state[name], dtype=np.float64).copy()

    # -- forward -------------------------------------------------------------

    def encode_text(self, token_ids):
        if not 1 <= len(token_ids) <= self.cfg.max_tokens:
            raise ContractError(
                f"token count {len(token_ids)} outside [1, {self.cfg.max_tokens}]")
        emb = T.embedding(self.embed, token_ids)
        return T.conv1d(emb, self.mix_w, self.mix_b)

    def forward(self, image, token_ids, train_rng=None):
        """image: C x H x W tensor with H = W = cfg.image_size; returns
        2 x H x W logits.  ``train_rng=None`` is deterministic eval mode."""
        size = self.cfg.image_size
        if image.shape != (self.cfg.in_channels, size, size):
            raise ShapeError(
                f"expected image {(self.cfg.in_channels, size, size)}, got {image.shape}")
        f_l = self.encode_text(token_ids)

        maps = []
        x = image
        for i, stride in enumerate(ENCODER_STRIDES):
            x = T.relu(T.conv2d(x, self.enc_w[i], self.enc_b[i],
                                stride=stride, padding=1))
            if self.vlcams is not None:
                c, h, w = x.shape
                tokens = T.transpose(T.reshape(x, (c, h * w)))
                fused = vlcam.vlcam_forward(tokens, f_l, self.vlcams[i],
                                            dropout_rng=train_rng,
                                            fuse_residual=self.cfg.fuse_residual)
                x = T.reshape(T.transpose(fused), (c, h, w))
            maps.append(x)

        pyr = ramsf.ScalePyramid(*maps)
        if self.decoder is not None:
            y = ramsf.ramsf_decode(pyr, self.decoder,
                                   literal_hw_denominator=self.cfg.literal_hw_denominator)
        else:
            y = self._baseline_decode(pyr)
        logits = T.conv2d(y, self.head_w, self.head_b)
        return T.upsample_bilinear(logits, 4)

    def _baseline_decode(self, pyr):
        # plain lateral + upsample + add pyramid path
        lats = [ramsf.lateral(x, w, b)
                for x, (w, b) in zip(pyr.maps, self.baseline_lateral)]
        y = lats[3]
        for lat_i in (lats[2], lats[1], lats[0]):
            y = T.add(lat_i, T.upsample_bilinear(y, 2))
        return y


def expected_param_count(cfg):
    """Closed-form total parameter count for a configuration."""
    total = cfg.vocab_size * cfg.c_l + cfg.c_l * cfg.c_l + cfg.c_l
    c_prev = cfg.in_channels
    for c in cfg.encoder_channels:
        total += c * c_prev * 9 + c
        c_prev = c
    if cfg.enable_vlcam:
        for stride_total, c in zip((4, 8, 16, 32), cfg.encoder_channels):
            tokens = (cfg.image_size // stride_total) ** 2
            total += vlcam.expected_vlcam_param_count(tokens, c, cfg.c_l, cfg.c_k)
    if cfg.enable_ramsf:
        total += ramsf.expected_ramsf_param_count(
            cfg.encoder_channels, cfg.c_dec, cfg.arc_n,
            arc_before_attention=cfg.arc_before_attention)
    else:
        total += sum(cfg.c_dec * c + cfg.c_dec for c in cfg.encoder_channels)
    total += 2 * cfg.c_dec + 2  # head
    return total


def predict_mask(logits):
    """Per-pixel argmax of 2-class logits; ties go to background."""
    if isinstance(logits, Tensor):
        logits = logits.data
    if logits.ndim != 3 or logits.shape[0] != 2:
        raise ShapeError(f"expected 2 x H x W logits, got {logits.shape}")
    return (logits[1] > logits[0]).astype(np.uint8)


# ---------------------------------------------------------------------------
# Optimizer and smoke training
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, named_params, lr=5e-4, weight_decay=0.01,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = [t for _, t in named_params]
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        b1, b2 = self.betas
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                         + self.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def make_synthetic_sample(cfg, rng=None):
    """One (image, token ids, ground-truth mask) overfit target: a bright
    block on a dim noisy background, block edges on the stride-4 grid."""
    rng = rng or np.random.default_rng(cfg.seed + 1)
    s = cfg.image_size
    lo, hi = s // 4, 3 * s // 4
    mask = np.zeros((s, s), dtype=np.uint8)
    mask[lo:hi, lo:hi] = 1
    image = 0.15 + 0.05 * rng.standard_normal((cfg.in_channels, s, s))
    image[:, lo:hi, lo:hi] += 0.8
    tokens = list(rng.integers(0, cfg.vocab_size, size=5))
    return image, [int(t) for t in tokens], mask


def train_smoke(cfg, sample, iters, lr=5e-4, weight_decay=0.01):
    """Overfit one sample with the default optimizer settings.

    Returns (loss history, trained model).  A NaN/Inf loss aborts with a
    TrainingError carrying the iteration index.
    """
    if iters < 1:
        raise ContractError(f"iters must be >= 1, got {iters}")
    image, token_ids, gt = sample
    image_t = image if isinstance(image, Tensor) else Tensor(image)
    model = Model(cfg)
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    dropout_rng = np.random.default_rng(cfg.seed + 2)
    losses = []
    for it in range(iters):
        try:
            with Tape() as tape:
                logits = model.forward(image_t, token_ids, train_rng=dropout_rng)
                loss = T.cross_entropy_with_logits(logits, gt)
        except NonFiniteError as exc:
            raise TrainingError(f"loss diverged at iteration {it}: {exc}",
                                iteration=it) from exc
        losses.append(loss.item())
        backward(tape, loss)
        opt.step()
        opt.zero_grad()
    return losses, model


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path, state):
    """Flat binary container: magic, version, then per-parameter records of
    (name length, utf-8 name, rank, dims, float64 little-endian data)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(state)))
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"not a checkpoint file: bad magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        state = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            state[name] = data.astype(np.float64)
        return state
