"""Source-model pretraining on domain A (Dice + BCE, Adam, batch-mode BN)."""

import logging

import numpy as np

from .metrics import dsc
from .net import MiniSegNet, backward, forward, seg_loss

log = logging.getLogger(__name__)


class ParamAdam:
    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def to_batch(images):
    return np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2))


def pretrain(images, masks, steps=1500, seed=0, batch_size=4, lr=0.01):
    """Train a fresh MiniSegNet; images n x H x W x 3, masks n x H x W x 2.

    Batches are drawn with random flips. BN running statistics are refreshed
    every step with momentum 0.1.
    """
    if not 1 <= batch_size <= 4:
        raise ValueError("batch_size must lie in 1..4")
    rng = np.random.default_rng(seed)
    net = MiniSegNet(seed)
    opt = ParamAdam(net.params, lr=lr)
    x_all = to_batch(images)
    y_all = to_batch(masks)
    n = len(x_all)
    for step in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        xb, yb = x_all[idx], y_all[idx]
        if rng.random() < 0.5:
            xb, yb = xb[..., ::-1], yb[..., ::-1]
        if rng.random() < 0.5:
            xb, yb = xb[..., ::-1, :], yb[..., ::-1, :]
        logits, tape = forward(net, np.ascontiguousarray(xb), "batch", update_running=True)
        loss, g = seg_loss(logits, yb, return_grad=True)
        _, grads = backward(tape, g, need_params=True)
        opt.step(net.params, grads)
        if step % 250 == 0:
            log.debug("pretrain step %d loss %.4f", step, loss)
    return net


def predict(net, images, bn_mode="source"):
    """Logits for each H x W x 3 image, evaluated one at a time."""
    return np.stack([forward(net, to_batch(img[None]), bn_mode)[0][0] for img in images])


def evaluate(net, images, masks, bn_mode="source"):
    """Mean over samples of the class-averaged DSC."""
    scores = []
    for img, msk in zip(images, masks):
        logits = forward(net, to_batch(img[None]), bn_mode)[0][0]
        scores.append(dsc(logits.transpose(1, 2, 0) > 0, msk > 0.5).mean())
    return float(np.mean(scores))
