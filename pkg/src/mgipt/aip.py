"""Adaptive-scale instance prompts: ring-by-ring growth with consistency-based early stopping."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .net import NumericError, forward, sigmoid
from .prompt import AdamState, PromptGrid, adam_step, align_loss_and_grad, apply_prompt, to_nchw

log = logging.getLogger(__name__)

DICE_SMOOTH = 1.0


@dataclass
class AipConfig:
    epochs_per_scale: int = 7
    max_scale_steps: int = 6
    lr: float = 0.05
    jitter_params: tuple = ((1.2, 0.8), (0.8, 1.2))
    patience: int = 1

    def __post_init__(self):
        if self.epochs_per_scale < 1:
            raise ValueError("epochs_per_scale must be >= 1")
        if self.max_scale_steps < 1:
            raise ValueError("max_scale_steps must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class AipResult:
    best_prompt: PromptGrid
    best_scale: int
    consistency_trace: list = field(default_factory=list)
    steps_taken: int = 0
    aborted: bool = False


def grow_prompt(prompt):
    """Pad a square odd-sided prompt with a trainable ring of ones; freeze the old cells."""
    h, w, c = prompt.shape
    if h != w or h % 2 == 0:
        raise ValueError(f"prompt must be square with odd side, got {h}x{w}")
    values = np.ones((h + 2, w + 2, c))
    values[1:-1, 1:-1] = prompt.values
    frozen = np.zeros(values.shape, dtype=bool)
    frozen[1:-1, 1:-1] = True
    return PromptGrid(values, frozen)


def augment(x, brightness, contrast):
    """Colour jitter around the global image mean, clamped to [0, 1]."""
    if brightness <= 0 or contrast < 0:
        raise ValueError("brightness must be positive and contrast non-negative")
    x = np.asarray(x, dtype=np.float64)
    m = x.mean()
    return np.clip(contrast * (x - m) + m + (brightness - 1.0) * m, 0.0, 1.0)


def dice_loss_masks(a, b):
    """1 - smoothed Dice between boolean masks, averaged over the leading channel axis."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    axes = tuple(range(1, a.ndim))
    inter = (a & b).sum(axis=axes)
    total = a.sum(axis=axes) + b.sum(axis=axes)
    return float(np.mean(1.0 - (2.0 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH)))


def consistency(pred, pred_aug):
    """Dice loss between 0.5-thresholded sigmoid masks of two C x H x W logit maps."""
    return dice_loss_masks(sigmoid(np.asarray(pred)) > 0.5, sigmoid(np.asarray(pred_aug)) > 0.5)


def measure_consistency(prompt, x, net, cfg, eval_mode):
    """Consistency of the prompted image's prediction with its jittered variants."""
    adapted = apply_prompt(prompt, x)
    pred = forward(net, to_nchw(adapted), eval_mode)[0][0]
    aug_logits = [forward(net, to_nchw(augment(adapted, b, c)), eval_mode)[0][0] for b, c in cfg.jitter_params]
    pred_aug = np.mean(aug_logits, axis=0)
    return consistency(pred, pred_aug)


def tune_instance_prompt(x, net, cfg=None, train_mode="source", eval_mode=0.8, scope="all"):
    """Grow and tune an instance prompt for image ``x`` (H x W x 3 in [0, 1]).

    At each scale the unfrozen ring gets ``epochs_per_scale`` Adam steps on
    the BN alignment loss, then consistency is measured. The loop stops once
    consistency has not improved for ``patience`` scales and the best
    snapshot is returned.
    """
    cfg = cfg or AipConfig()
    channels = x.shape[2]
    prompt = PromptGrid.ones(1, 1, channels)
    best = AipResult(prompt.copy(), 1)
    best_value = np.inf
    stale = 0
    for k in range(cfg.max_scale_steps):
        if k > 0:
            prompt = grow_prompt(prompt)
        state = AdamState(lr=cfg.lr)
        try:
            for _ in range(cfg.epochs_per_scale):
                _, grad = align_loss_and_grad(prompt, x, net, train_mode, scope)
                adam_step(prompt, grad, state)
            if not np.all(np.isfinite(prompt.values)):
                raise NumericError("instance prompt became non-finite")
            value = measure_consistency(prompt, x, net, cfg, eval_mode)
        except (NumericError, FloatingPointError, ValueError) as exc:
            log.warning("instance prompt aborted at scale %d: %s", 2 * k + 1, exc)
            best.aborted = True
            break
        best.consistency_trace.append(value)
        best.steps_taken = k + 1
        if value < best_value:
            best_value = value
            best.best_prompt = prompt.copy()
            best.best_scale = 2 * k + 1
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best
