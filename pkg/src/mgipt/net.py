"""MiniSegNet: a small conv-BN-ReLU encoder/decoder with a hand-written backward.

Layout is N x C x H x W throughout. Three BN regimes are supported through a
single code path, which keeps the calibration identities bitwise exact:

* ``"source"``   normalize with the stored running statistics,
* ``"batch"``    normalize with the statistics of the current batch and
                 differentiate through them (source pretraining),
* ``float lam``  calibrated statistics ``mu = lam*mu_s + (1-lam)*mu_t`` and
                 ``var = lam*std_s**2 + (1-lam)*std_t**2``.

In source and calibrated modes the normalization constants are treated as
fixed during backward. Gradients of losses defined *on* the test statistics
are injected explicitly at each BN input (see :func:`bn_align_loss`).
"""

import hashlib
import struct

import numpy as np

STD_FLOOR = 1e-5
BN_MOMENTUM = 0.1

# (kind, name, in_ch, out_ch) ; kinds: conv3, conv1, bn, relu, pool, up
ARCHITECTURE = (
    ("conv3", "enc1.conv1", 3, 8),
    ("bn", "enc1.bn1", 8, 8),
    ("relu", "enc1.relu1", 8, 8),
    ("conv3", "enc1.conv2", 8, 8),
    ("bn", "enc1.bn2", 8, 8),
    ("relu", "enc1.relu2", 8, 8),
    ("pool", "enc1.pool", 8, 8),
    ("conv3", "enc2.conv", 8, 16),
    ("bn", "enc2.bn", 16, 16),
    ("relu", "enc2.relu", 16, 16),
    ("pool", "enc2.pool", 16, 16),
    ("conv3", "bottleneck.conv", 16, 16),
    ("bn", "bottleneck.bn", 16, 16),
    ("relu", "bottleneck.relu", 16, 16),
    ("up", "dec1.up", 16, 16),
    ("conv3", "dec1.conv", 16, 8),
    ("bn", "dec1.bn", 8, 8),
    ("relu", "dec1.relu", 8, 8),
    ("up", "dec2.up", 8, 8),
    ("conv3", "dec2.conv", 8, 8),
    ("bn", "dec2.bn", 8, 8),
    ("relu", "dec2.relu", 8, 8),
    ("conv1", "head", 8, 2),
)

BN_LAYERS = tuple(name for kind, name, _, _ in ARCHITECTURE if kind == "bn")
# BN layers that see only encoder features (enc1, enc2, bottleneck)
ENCODER_BN_LAYERS = BN_LAYERS[:4]

ARCH_HASH = hashlib.sha256(repr(ARCHITECTURE).encode()).digest()

CHECKPOINT_MAGIC = b"MSEG"
CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    """Raised when an activation or gradient stops being finite."""


class CheckpointError(ValueError):
    pass


def calibrated(lam):
    """BN mode blending source and test statistics with weight ``lam``."""
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"calibration weight must lie in [0, 1], got {lam}")
    return lam


def _mode_weight(bn_mode):
    if isinstance(bn_mode, str):
        if bn_mode == "source":
            return 1.0
        if bn_mode == "batch":
            return 0.0
        raise ValueError(f"unknown bn mode {bn_mode!r}")
    return calibrated(bn_mode)


class MiniSegNet:
    """Frozen-architecture segmentation network with two sigmoid output channels.

    ``params`` holds trainable tensors (conv weights/biases, BN gamma/beta);
    ``buffers`` holds the BN running statistics ``<bn>.running_mean`` and
    ``<bn>.running_std``.
    """

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.params = {}
        self.buffers = {}
        for kind, name, cin, cout in ARCHITECTURE:
            if kind in ("conv3", "conv1"):
                k = 3 if kind == "conv3" else 1
                fan_in = cin * k * k
                self.params[name + ".w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, k, k))
                self.params[name + ".b"] = np.zeros(cout)
            elif kind == "bn":
                self.params[name + ".gamma"] = np.ones(cout)
                self.params[name + ".beta"] = np.zeros(cout)
                self.buffers[name + ".running_mean"] = np.zeros(cout)
                self.buffers[name + ".running_std"] = np.ones(cout)

    def copy(self):
        other = MiniSegNet.__new__(MiniSegNet)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    def source_stats(self, name):
        return self.buffers[name + ".running_mean"], self.buffers[name + ".running_std"]

    def digest(self):
        """SHA-256 over every parameter and buffer, in a fixed order."""
        h = hashlib.sha256()
        for key in sorted(self.params):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.params[key], dtype="<f8").tobytes())
        for key in sorted(self.buffers):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.buffers[key], dtype="<f8").tobytes())
        return h.hexdigest()

    def forward(self, x, bn_mode="source", update_running=False):
        return forward(self, x, bn_mode, update_running=update_running)


class ForwardTape:
    """Everything backward needs, plus the observed per-BN test statistics."""

    def __init__(self, net, x, lam, batch_stats):
        self.net = net
        self.input_shape = x.shape
        self.lam = lam
        self.batch_stats = batch_stats
        self.caches = []
        # name -> (mu_t, std_t) observed on the pre-normalization input
        self.stats = {}
        # name -> (mu, sigma) actually used to normalize
        self.norm = {}

    def __len__(self):
        return len(self.caches)


def _im2col(x):
    """Columns of 3x3 same-padded patches, shape (C*9, N*H*W)."""
    n, c, h, w = x.shape
    xp = np.zeros((c, n, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, 3, 3, n, h, w))
    for a in range(3):
        for b in range(3):
            cols[:, a, b] = xp[:, :, a:a + h, b:b + w]
    return cols.reshape(c * 9, n * h * w)


def _conv3(x, w, b, cols=None):
    n, _, h, ww = x.shape
    if cols is None:
        cols = _im2col(x)
    out = (w.reshape(w.shape[0], -1) @ cols).reshape(w.shape[0], n, h, ww)
    return out.transpose(1, 0, 2, 3) + b[None, :, None, None], cols


def _conv3_backward(cols, w, g, need_params):
    # input gradient is a same-padded conv with the flipped, transposed kernel
    w_t = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx, _ = _conv3(g, w_t, np.zeros(w.shape[1]))
    if not need_params:
        return dx, None, None
    g_mat = g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1)
    dw = (g_mat @ cols.T).reshape(w.shape)
    return dx, dw, g.sum(axis=(0, 2, 3))


def _check_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite activations in layer {name}")


def forward(net, x, bn_mode="source", update_running=False):
    """Run the network; returns ``(logits, tape)``.

    ``update_running`` refreshes the BN running statistics with momentum 0.1;
    it is only meaningful for batch-mode pretraining.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected N x 3 x H x W input, got {x.shape}")
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ValueError(f"H and W must be divisible by 4, got {x.shape[2:]}")
    _check_finite(x, "input")
    lam = _mode_weight(bn_mode)
    tape = ForwardTape(net, x, lam, batch_stats=(bn_mode == "batch"))
    p = net.params
    h = x
    for kind, name, _, _ in ARCHITECTURE:
        if kind == "conv3":
            h, cols = _conv3(h, p[name + ".w"], p[name + ".b"])
            tape.caches.append(cols)
        elif kind == "conv1":
            tape.caches.append(h)
            h = np.einsum("nchw,oc->nohw", h, p[name + ".w"][:, :, 0, 0]) + p[name + ".b"][None, :, None, None]
        elif kind == "bn":
            mu_t = h.mean(axis=(0, 2, 3))
            raw_std = np.sqrt(h.var(axis=(0, 2, 3)))
            std_t = np.maximum(raw_std, STD_FLOOR)
            tape.stats[name] = (mu_t, std_t)
            mu_s, std_s = net.source_stats(name)
            mu = lam * mu_s + (1.0 - lam) * mu_t
            sigma = np.sqrt(lam * std_s**2 + (1.0 - lam) * std_t**2)
            xhat = (h - mu[None, :, None, None]) / sigma[None, :, None, None]
            tape.norm[name] = (mu, sigma)
            tape.caches.append((h, xhat, sigma, raw_std > STD_FLOOR))
            h = p[name + ".gamma"][None, :, None, None] * xhat + p[name + ".beta"][None, :, None, None]
            if update_running:
                rm = net.buffers[name + ".running_mean"]
                rs = net.buffers[name + ".running_std"]
                rm *= 1.0 - BN_MOMENTUM
                rm += BN_MOMENTUM * mu_t
                rs[:] = np.sqrt((1.0 - BN_MOMENTUM) * rs**2 + BN_MOMENTUM * std_t**2)
        elif kind == "relu":
            tape.caches.append(h > 0)
            h = np.where(h > 0, h, 0.0)
        elif kind == "pool":
            n, c, hh, ww = h.shape
            blocks = h.reshape(n, c, hh // 2, 2, ww // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh // 2, ww // 2, 4)
            idx = blocks.argmax(axis=-1)[..., None]
            tape.caches.append((h.shape, idx))
            h = np.take_along_axis(blocks, idx, axis=-1)[..., 0]
        elif kind == "up":
            tape.caches.append(None)
            h = h.repeat(2, axis=2).repeat(2, axis=3)
        if kind in ("conv3", "conv1", "bn"):
            _check_finite(h, name)
    return h, tape


def backward(tape, grad_logits=None, stat_grads=None, need_params=False):
    """Backpropagate through a recorded forward.

    ``grad_logits`` is dL/dlogits (or None for losses that do not touch the
    output); ``stat_grads`` maps BN layer name -> (dL/dmu_t, dL/dstd_t).
    Returns ``(grad_x, param_grads)``; ``param_grads`` is None unless
    ``need_params``.
    """
    net = tape.net
    p = net.params
    stat_grads = stat_grads or {}
    grads = {} if need_params else None
    g = None if grad_logits is None else np.asarray(grad_logits, dtype=np.float64)
    layers = list(zip(ARCHITECTURE, tape.caches))
    for (kind, name, _, _), cache in reversed(layers):
        if kind == "bn":
            h, xhat, sigma, unfloored = cache
            dx = None
            if g is not None:
                gamma = p[name + ".gamma"]
                if need_params:
                    grads[name + ".gamma"] = (g * xhat).sum(axis=(0, 2, 3))
                    grads[name + ".beta"] = g.sum(axis=(0, 2, 3))
                gx = g * gamma[None, :, None, None]
                if tape.batch_stats:
                    m_gx = gx.mean(axis=(0, 2, 3), keepdims=True)
                    m_gxx = (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
                    m_gxx = m_gxx * unfloored[None, :, None, None]
                    dx = (gx - m_gx - xhat * m_gxx) / sigma[None, :, None, None]
                else:
                    dx = gx / sigma[None, :, None, None]
            elif need_params:
                grads[name + ".gamma"] = np.zeros_like(p[name + ".gamma"])
                grads[name + ".beta"] = np.zeros_like(p[name + ".beta"])
            if name in stat_grads:
                d_mu, d_std = stat_grads[name]
                mu_t, std_t = tape.stats[name]
                m = h.shape[0] * h.shape[2] * h.shape[3]
                d_std = np.where(unfloored, d_std, 0.0)
                inj = (d_mu[None, :, None, None]
                       + d_std[None, :, None, None] * (h - mu_t[None, :, None, None]) / std_t[None, :, None, None]) / m
                dx = inj if dx is None else dx + inj
            g = dx
            continue
        if g is None:
            if need_params and kind in ("conv3", "conv1"):
                grads[name + ".w"] = np.zeros_like(p[name + ".w"])
                grads[name + ".b"] = np.zeros_like(p[name + ".b"])
            continue
        if kind == "conv3":
            g, dw, db = _conv3_backward(cache, p[name + ".w"], g, need_params)
            if need_params:
                grads[name + ".w"], grads[name + ".b"] = dw, db
        elif kind == "conv1":
            w = p[name + ".w"][:, :, 0, 0]
            if need_params:
                grads[name + ".w"] = np.einsum("nohw,nchw->oc", g, cache)[:, :, None, None]
                grads[name + ".b"] = g.sum(axis=(0, 2, 3))
            g = np.einsum("nohw,oc->nchw", g, w)
        elif kind == "relu":
            g = np.where(cache, g, 0.0)
        elif kind == "pool":
            shape, idx = cache
            n, c, hh, ww = shape
            blocks = np.zeros((n, c, hh // 2, ww // 2, 4))
            np.put_along_axis(blocks, idx, g[..., None], axis=-1)
            g = blocks.reshape(n, c, hh // 2, ww // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
        elif kind == "up":
            n, c, hh, ww = g.shape
            g = g.reshape(n, c, hh // 2, 2, ww // 2, 2).sum(axis=(3, 5))
    if g is None:
        g = np.zeros(tape.input_shape)
    return g, grads


def backward_input(tape, grad_logits, stat_grads=None):
    return backward(tape, grad_logits, stat_grads)[0]


def backward_params(tape, grad_logits):
    return backward(tape, grad_logits, need_params=True)[1]


def bn_align_loss(tape, scope="all"):
    """Mean over BN layers of the channel-averaged L1 gaps in mean and std.

    ``scope`` is ``"all"``, ``"encoder"`` or an explicit sequence of BN layer
    names. Returns ``(loss, stat_grads)`` where ``stat_grads`` can be fed to
    :func:`backward` to reach the network input.
    """
    if scope == "all":
        names = BN_LAYERS
    elif scope == "encoder":
        names = ENCODER_BN_LAYERS
    elif isinstance(scope, str):
        raise ValueError(f"unknown bn loss scope {scope!r}")
    else:
        names = tuple(scope)
    missing = [n for n in names if n not in tape.stats]
    if missing:
        raise ValueError(f"tape lacks statistics for {missing}")
    n_layers = len(names)
    loss = 0.0
    stat_grads = {}
    for name in names:
        mu_s, std_s = tape.net.source_stats(name)
        mu_t, std_t = tape.stats[name]
        c = mu_t.size
        loss += (np.abs(mu_s - mu_t).mean() + np.abs(std_s - std_t).mean()) / n_layers
        stat_grads[name] = (np.sign(mu_t - mu_s) / (c * n_layers), np.sign(std_t - std_s) / (c * n_layers))
    return float(loss), stat_grads


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def seg_loss(logits, target, return_grad=False):
    """Smooth Dice (epsilon 1) plus binary cross-entropy, averaged over channels."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if z.shape != t.shape:
        raise ValueError(f"logits {z.shape} and target {t.shape} differ in shape")
    q = sigmoid(z)
    axes = (0, 2, 3)
    inter = (q * t).sum(axis=axes)
    denom = q.sum(axis=axes) + t.sum(axis=axes) + 1.0
    dice = 1.0 - (2.0 * inter + 1.0) / denom
    bce = np.logaddexp(0.0, z) - t * z
    loss = float(dice.mean() + bce.mean())
    if not return_grad:
        return loss
    n_ch = z.shape[1]
    # d dice_c / d q
    dq = -(2.0 * t * denom[None, :, None, None] - (2.0 * inter + 1.0)[None, :, None, None]) / denom[None, :, None, None] ** 2
    grad = dq / n_ch * q * (1.0 - q) + (q - t) / z.size
    return loss, grad


def save_checkpoint(net, path):
    entries = [(k, net.params[k]) for k in sorted(net.params)]
    entries += [(k, net.buffers[k]) for k in sorted(net.buffers)]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(ARCH_HASH)
        fh.write(struct.pack("<I", len(entries)))
        for key, arr in entries:
            name = key.encode()
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if blob[8:40] != ARCH_HASH:
        raise CheckpointError(f"{path}: architecture hash mismatch")
    (count,) = struct.unpack_from("<I", blob, 40)
    off = 44
    net = MiniSegNet.__new__(MiniSegNet)
    net.params, net.buffers = {}, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            key = blob[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
            target = net.buffers if key.endswith((".running_mean", ".running_std")) else net.params
            target[key] = arr
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if set(net.params) | set(net.buffers) != set(MiniSegNet(0).params) | set(MiniSegNet(0).buffers):
        raise CheckpointError(f"{path}: parameter set does not match the architecture")
    return net
