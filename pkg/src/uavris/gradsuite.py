"""Finite-difference verification of every backward rule.

Each registered check builds a random small instance, pulls analytic
gradients through a tape, and compares them against central differences.
Cheap ops are checked coordinate-by-coordinate; the large composites are
checked on a seeded sample of coordinates to keep the whole suite fast.

``corrupt_backward`` is a testing hook that scales one op's gradient
without touching its forward value, so a deliberately wrong backward is
guaranteed to be caught and named.
"""

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import model as model_mod, ramsf, tensor as T, vlcam
from .tensor import Tape, Tensor, backward, max_rel_err

DEFAULT_TOLERANCE = 1e-4
DEFAULT_SEEDS = 20


@dataclass
class OpReport:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance


@contextmanager
def corrupt_backward(op_name, factor=1.02):
    """Scale ``op_name``'s gradient by ``factor`` while leaving its forward
    output untouched."""
    orig = getattr(T, op_name)

    def scaled_grad(t):
        out = Tensor(t.data.copy())

        def bw(g):
            return (g * factor,)

        return T._register(out, (t,), bw)

    def wrapped(*args, **kwargs):
        return scaled_grad(orig(*args, **kwargs))

    setattr(T, op_name, wrapped)
    try:
        yield
    finally:
        setattr(T, op_name, orig)


# ---------------------------------------------------------------------------
# Check machinery
# ---------------------------------------------------------------------------

def _fd_coord(loss_fn, p, offset, h):
    flat = p.data.reshape(-1)
    orig = flat[offset]
    flat[offset] = orig + h
    hi = loss_fn().item()
    flat[offset] = orig - h
    lo = loss_fn().item()
    flat[offset] = orig
    return (hi - lo) / (2.0 * h)


def _grad_check(make, seeds, h=1e-5, sample=None):
    """make(rng) -> (loss_fn, params); compares tape gradients of the scalar
    ``loss_fn()`` against central differences for every (or a sampled subset
    of) parameter coordinate.  Returns the worst relative error seen."""
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        loss_fn, params = make(rng)
        with Tape() as tape:
            loss = loss_fn()
        backward(tape, loss)
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                 for p in params]
        for p in params:
            p.grad = None
        if sample is None:
            coords = [(i, off) for i, p in enumerate(params)
                      for off in range(p.data.size)]
        else:
            sizes = np.array([p.data.size for p in params])
            total = int(sizes.sum())
            chosen = rng.choice(total, size=min(sample, total), replace=False)
            bounds = np.cumsum(sizes)
            coords = []
            for flat_idx in chosen:
                pi = int(np.searchsorted(bounds, flat_idx, side="right"))
                off = int(flat_idx - (bounds[pi - 1] if pi else 0))
                coords.append((pi, off))
        analytic = np.array([grads[pi].reshape(-1)[off] for pi, off in coords])
        numeric = np.array([_fd_coord(loss_fn, params[pi], off, h)
                            for pi, off in coords])
        worst = max(worst, max_rel_err(analytic, numeric))
    return worst


def _randn(rng, shape, avoid_zero=0.0):
    x = rng.standard_normal(shape)
    if avoid_zero:
        x = x + avoid_zero * np.sign(x + 1e-12)
    return x


def _param(rng, shape, avoid_zero=0.0):
    return Tensor(_randn(rng, shape, avoid_zero), requires_grad=True)


def _probe_loss(out, probe):
    return T.sum_all(T.mul(out, probe))


# ---------------------------------------------------------------------------
# Individual checks
# ---------------------------------------------------------------------------

def _check_matmul(seeds):
    def make(rng):
        a = _param(rng, (5, 7))
        b = _param(rng, (7, 3))
        probe = Tensor(rng.standard_normal((5, 3)))
        return lambda: _probe_loss(T.matmul(a, b), probe), [a, b]
    return _grad_check(make, seeds, h=1e-6)


def _check_conv1d(seeds):
    def make(rng):
        x = _param(rng, (6, 4))
        w = _param(rng, (3, 4))
        b = _param(rng, (3,))
        probe = Tensor(rng.standard_normal((6, 3)))
        return lambda: _probe_loss(T.conv1d(x, w, b), probe), [x, w, b]
    return _grad_check(make, seeds, h=1e-6)


def _check_conv2d(seeds):
    def make(rng):
        x = _param(rng, (2, 5, 5))
        w = _param(rng, (3, 2, 3, 3))
        b = _param(rng, (3,))
        p1 = Tensor(rng.standard_normal((3, 5, 5)))
        p2 = Tensor(rng.standard_normal((3, 3, 3)))

        def loss_fn():
            y1 = T.conv2d(x, w, b, stride=1, padding=1)
            y2 = T.conv2d(x, w, b, stride=2, padding=1)
            return T.add(_probe_loss(y1, p1), _probe_loss(y2, p2))

        return loss_fn, [x, w, b]
    return _grad_check(make, seeds)


def _check_instance_norm(seeds):
    def make(rng):
        x = _param(rng, (8, 4))
        probe = Tensor(rng.standard_normal((8, 4)))
        return lambda: _probe_loss(T.instance_norm(x), probe), [x]
    return _grad_check(make, seeds)


def _check_softmax(seeds):
    def make(rng):
        x = _param(rng, (3, 5))
        probe = Tensor(rng.standard_normal((3, 5)))
        return lambda: _probe_loss(T.softmax_lastdim(x), probe), [x]
    return _grad_check(make, seeds, h=1e-6)


def _check_relu(seeds):
    def make(rng):
        x = _param(rng, (4, 6), avoid_zero=0.1)
        probe = Tensor(rng.standard_normal((4, 6)))
        return lambda: _probe_loss(T.relu(x), probe), [x]
    return _grad_check(make, seeds)


def _check_add(seeds):
    def make(rng):
        a = _param(rng, (3, 4))
        b = _param(rng, (3, 4))
        probe = Tensor(rng.standard_normal((3, 4)))
        return lambda: _probe_loss(T.add(a, b), probe), [a, b]
    return _grad_check(make, seeds)


def _check_mul(seeds):
    def make(rng):
        a = _param(rng, (3, 4))
        b = _param(rng, (3, 4))
        probe = Tensor(rng.standard_normal((3, 4)))
        return lambda: _probe_loss(T.mul(a, b), probe), [a, b]
    return _grad_check(make, seeds)


def _check_div(seeds):
    def make(rng):
        a = _param(rng, (3, 4))
        b = Tensor(np.abs(rng.standard_normal((3, 4))) + 0.5, requires_grad=True)
        probe = Tensor(rng.standard_normal((3, 4)))
        return lambda: _probe_loss(T.div(a, b), probe), [a, b]
    return _grad_check(make, seeds)


def _check_scale(seeds):
    def make(rng):
        a = _param(rng, (4, 3))
        probe = Tensor(rng.standard_normal((4, 3)))
        return lambda: _probe_loss(T.scale(a, 1.7), probe), [a]
    return _grad_check(make, seeds)


def _check_tanh(seeds):
    def make(rng):
        a = _param(rng, (4, 3))
        probe = Tensor(rng.standard_normal((4, 3)))
        return lambda: _probe_loss(T.tanh(a), probe), [a]
    return _grad_check(make, seeds)


def _check_transpose(seeds):
    def make(rng):
        a = _param(rng, (3, 5))
        probe = Tensor(rng.standard_normal((5, 3)))
        return lambda: _probe_loss(T.transpose(a), probe), [a]
    return _grad_check(make, seeds)


def _check_reshape(seeds):
    def make(rng):
        a = _param(rng, (3, 4))
        probe = Tensor(rng.standard_normal((2, 6)))
        return lambda: _probe_loss(T.reshape(a, (2, 6)), probe), [a]
    return _grad_check(make, seeds)


def _check_concat(seeds):
    def make(rng):
        a = _param(rng, (2, 3))
        b = _param(rng, (2, 2))
        probe = Tensor(rng.standard_normal((2, 5)))
        return lambda: _probe_loss(T.concat([a, b], axis=1), probe), [a, b]
    return _grad_check(make, seeds)


def _check_narrow(seeds):
    def make(rng):
        a = _param(rng, (4, 6))
        probe = Tensor(rng.standard_normal((4, 3)))
        return lambda: _probe_loss(T.narrow(a, 1, 2, 3), probe), [a]
    return _grad_check(make, seeds)


def _check_sum(seeds):
    def make(rng):
        a = _param(rng, (3, 4))
        return lambda: T.sum_all(a), [a]
    return _grad_check(make, seeds)


def _check_l2_normalize(seeds):
    def make(rng):
        a = _param(rng, (4, 5), avoid_zero=0.1)
        probe = Tensor(rng.standard_normal((4, 5)))
        return lambda: _probe_loss(T.l2_normalize_rows(a), probe), [a]
    return _grad_check(make, seeds)


def _check_upsample(seeds):
    def make(rng):
        a = _param(rng, (3, 4, 4))
        probe = Tensor(rng.standard_normal((3, 8, 8)))
        return lambda: _probe_loss(T.upsample_bilinear(a, 2), probe), [a]
    return _grad_check(make, seeds)


def _check_gap(seeds):
    def make(rng):
        a = _param(rng, (3, 4, 5))
        probe = Tensor(rng.standard_normal((3,)))
        return lambda: _probe_loss(T.global_avg_pool(a), probe), [a]
    return _grad_check(make, seeds)


def _check_dropout(seeds):
    def make(rng):
        a = _param(rng, (5, 6))
        probe = Tensor(rng.standard_normal((5, 6)))
        drop_seed = int(rng.integers(1 << 31))

        def loss_fn():
            # re-seed per call so the op is a fixed deterministic function
            out = T.dropout(a, 0.3, np.random.default_rng(drop_seed))
            return _probe_loss(out, probe)

        return loss_fn, [a]
    return _grad_check(make, seeds)


def _check_embedding(seeds):
    def make(rng):
        table = _param(rng, (7, 3))
        ids = [1, 2, 2, 5]  # repeated id exercises accumulation
        probe = Tensor(rng.standard_normal((4, 3)))
        return lambda: _probe_loss(T.embedding(table, ids), probe), [table]
    return _grad_check(make, seeds)


def _check_cross_entropy(seeds):
    def make(rng):
        logits = _param(rng, (2, 4, 4))
        target = rng.integers(0, 2, size=(4, 4))
        return lambda: T.cross_entropy_with_logits(logits, target), [logits]
    return _grad_check(make, seeds)


def _check_rotate_kernel(seeds):
    def make(rng):
        w = _param(rng, (2, 3, 3, 3))
        theta = Tensor(rng.uniform(-1.3, 1.3, size=()), requires_grad=True)
        probe = Tensor(rng.standard_normal((2, 3, 3, 3)))
        return lambda: _probe_loss(T.rotate_kernel(w, theta), probe), [w, theta]
    return _grad_check(make, seeds)


def _tiny_vlcam(rng, tokens=6, c_v=4, c_l=3, c_k=4, heads=2):
    return vlcam.create_vlcam_params(rng, tokens, c_v, c_l, c_k=c_k, heads=heads)


def _check_project_qkv(seeds):
    def make(rng):
        p = _tiny_vlcam(rng)
        f_v = _param(rng, (6, 4))
        f_l = _param(rng, (3, 3))
        pq = Tensor(rng.standard_normal((6, 4)))
        pk = Tensor(rng.standard_normal((3, 4)))
        pv = Tensor(rng.standard_normal((3, 4)))

        def loss_fn():
            q, k, v = vlcam.project_qkv(f_v, f_l, p)
            return T.add(T.add(_probe_loss(q, pq), _probe_loss(k, pk)),
                         _probe_loss(v, pv))

        params = [f_v, f_l] + [t for _, t in p.parameters()]
        return loss_fn, params
    return _grad_check(make, seeds)


def _check_cross_attention(seeds):
    def make(rng):
        q = _param(rng, (5, 4))
        k = _param(rng, (3, 4))
        v = _param(rng, (3, 6))
        probe = Tensor(rng.standard_normal((5, 6)))
        return (lambda: _probe_loss(vlcam.cross_attention(q, k, v, heads=2), probe),
                [q, k, v])
    return _grad_check(make, seeds)


def _check_fuse(seeds):
    def make(rng):
        p = _tiny_vlcam(rng)
        f_vl = _param(rng, (6, 4))
        f_v = _param(rng, (6, 4))
        probe = Tensor(rng.standard_normal((6, 4)))
        return (lambda: _probe_loss(vlcam.fuse(f_vl, f_v, p), probe),
                [f_vl, f_v, p.w_fuse, p.b_fuse])
    return _grad_check(make, seeds)


def _check_vlcam_forward(seeds):
    def make(rng):
        p = _tiny_vlcam(rng)
        f_v = _param(rng, (6, 4))
        f_l = _param(rng, (3, 3))
        probe = Tensor(rng.standard_normal((6, 4)))

        def loss_fn():
            return _probe_loss(vlcam.vlcam_forward(f_v, f_l, p), probe)

        return loss_fn, [f_v, f_l] + [t for _, t in p.parameters()]
    return _grad_check(make, seeds)


def _check_linear_attention(mode):
    def run(seeds):
        def make(rng):
            p = ramsf.create_linear_attention_params(rng, 3)
            # random gamma so the attention branch carries gradient
            p.gamma.data = np.array(rng.uniform(0.4, 1.2))
            x = _param(rng, (3, 4, 4))
            probe = Tensor(rng.standard_normal((3, 4, 4)))

            def loss_fn():
                return _probe_loss(ramsf.linear_attention(x, p, mode), probe)

            return loss_fn, [x] + [t for _, t in p.parameters()]
        return _grad_check(make, seeds)
    return run


def _check_lateral(seeds):
    def make(rng):
        x = _param(rng, (3, 4, 4))
        w = _param(rng, (2, 3, 1, 1))
        b = _param(rng, (2,))
        probe = Tensor(rng.standard_normal((2, 4, 4)))
        return lambda: _probe_loss(ramsf.lateral(x, w, b), probe), [x, w, b]
    return _grad_check(make, seeds)


def _check_concat_fuse(seeds):
    def make(rng):
        a = _param(rng, (2, 4, 4))
        b = _param(rng, (3, 4, 4))
        probe = Tensor(rng.standard_normal((5, 4, 4)))
        return lambda: _probe_loss(ramsf.concat_fuse(a, b), probe), [a, b]
    return _grad_check(make, seeds)


def _check_arc_routing(seeds):
    def make(rng):
        p = ramsf.create_arc_params(rng, 3, 2, n=2)
        x = _param(rng, (3, 4, 4))
        pt = Tensor(rng.standard_normal((2,)))
        pl = Tensor(rng.standard_normal((2,)))

        def loss_fn():
            theta, lam = ramsf.arc_routing(x, p)
            return T.add(_probe_loss(theta, pt), _probe_loss(lam, pl))

        return loss_fn, [x, p.w_r1, p.b_r1, p.w_r2, p.b_r2]
    return _grad_check(make, seeds)


def _check_arc_conv(seeds):
    def make(rng):
        p = ramsf.create_arc_params(rng, 3, 2, n=2)
        x = _param(rng, (3, 5, 5))
        probe = Tensor(rng.standard_normal((2, 5, 5)))

        def loss_fn():
            return _probe_loss(ramsf.arc_conv(x, p), probe)

        return loss_fn, [x] + [t for _, t in p.parameters()]
    return _grad_check(make, seeds)


def _check_ramsf_decode(seeds):
    def make(rng):
        params = ramsf.create_ramsf_params(rng, (4, 8, 16, 32), c_dec=4, arc_n=2)
        for stage in params.stages:
            stage.attention.gamma.data = np.array(rng.uniform(0.4, 1.2))
        maps = [_param(rng, (4, 8, 8)), _param(rng, (8, 4, 4)),
                _param(rng, (16, 2, 2)), _param(rng, (32, 1, 1))]
        probe = Tensor(rng.standard_normal((4, 8, 8)))

        def loss_fn():
            pyr = ramsf.ScalePyramid(*maps)
            return _probe_loss(ramsf.ramsf_decode(pyr, params), probe)

        return loss_fn, maps + [t for _, t in params.parameters()]
    return _grad_check(make, seeds, sample=40)


def _check_model_forward(seeds):
    def make(rng):
        cfg = model_mod.ModelConfig(
            image_size=64, encoder_channels=(4, 8, 12, 16), c_l=6, c_k=8,
            heads=2, c_dec=6, arc_n=2, max_tokens=8,
            seed=int(rng.integers(1 << 31)))
        m = model_mod.Model(cfg)
        image = Tensor(rng.standard_normal((3, 64, 64)) * 0.5, requires_grad=True)
        tokens = [int(t) for t in rng.integers(0, cfg.vocab_size, size=4)]
        target = rng.integers(0, 2, size=(64, 64))

        def loss_fn():
            logits = m.forward(image, tokens)
            return T.cross_entropy_with_logits(logits, target)

        return loss_fn, [image] + [t for _, t in m.parameters()]
    return _grad_check(make, seeds, sample=30)


CHECKS = [
    ("matmul", _check_matmul),
    ("conv1d", _check_conv1d),
    ("conv2d", _check_conv2d),
    ("instance_norm", _check_instance_norm),
    ("softmax_lastdim", _check_softmax),
    ("relu", _check_relu),
    ("add", _check_add),
    ("mul", _check_mul),
    ("div", _check_div),
    ("scale", _check_scale),
    ("tanh", _check_tanh),
    ("transpose", _check_transpose),
    ("reshape", _check_reshape),
    ("concat", _check_concat),
    ("narrow", _check_narrow),
    ("sum_all", _check_sum),
    ("l2_normalize_rows", _check_l2_normalize),
    ("upsample_bilinear", _check_upsample),
    ("global_avg_pool", _check_gap),
    ("dropout", _check_dropout),
    ("embedding", _check_embedding),
    ("cross_entropy_with_logits", _check_cross_entropy),
    ("rotate_kernel", _check_rotate_kernel),
    ("project_qkv", _check_project_qkv),
    ("cross_attention", _check_cross_attention),
    ("fuse", _check_fuse),
    ("vlcam_forward", _check_vlcam_forward),
    ("linear_attention_channel", _check_linear_attention("channel")),
    ("linear_attention_spatial", _check_linear_attention("spatial")),
    ("lateral", _check_lateral),
    ("concat_fuse", _check_concat_fuse),
    ("arc_routing", _check_arc_routing),
    ("arc_conv", _check_arc_conv),
    ("ramsf_decode", _check_ramsf_decode),
    ("model_forward", _check_model_forward),
]


def run_suite(n_seeds=DEFAULT_SEEDS, tolerance=DEFAULT_TOLERANCE, base_seed=0,
              corrupt_op=None, only=None):
    """Run every registered check and return one report per op."""
    seeds = range(base_seed, base_seed + n_seeds)
    reports = []
    for name, check in CHECKS:
        if only and name not in only:
            continue
        if corrupt_op:
            with corrupt_backward(corrupt_op):
                err = check(seeds)
        else:
            err = check(seeds)
        reports.append(OpReport(name, err, tolerance))
    return reports
