"""Low-frequency amplitude prompts, their gradient, and the Adam updates used on them."""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import fourier
from .net import backward, bn_align_loss, forward

PROMPT_MAGIC = b"PRMT"


class PromptFormatError(ValueError):
    pass


@dataclass
class PromptGrid:
    """Multiplier for the central H_P x W_P block of each channel's magnitude spectrum.

    ``frozen`` marks cells excluded from optimizer updates.
    """

    values: np.ndarray
    frozen: np.ndarray = None

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"prompt must be H_P x W_P x C, got {self.values.shape}")
        if self.frozen is None:
            self.frozen = np.zeros(self.values.shape, dtype=bool)
        else:
            self.frozen = np.array(self.frozen, dtype=bool)
            if self.frozen.shape != self.values.shape:
                raise ValueError("frozen mask does not match prompt shape")

    @classmethod
    def ones(cls, height, width=None, channels=3):
        width = height if width is None else width
        return cls(np.ones((height, width, channels)))

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        """Side length of a square prompt."""
        return self.values.shape[0]

    def copy(self):
        return PromptGrid(self.values.copy(), self.frozen.copy())


@dataclass
class AdamState:
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def copy(self):
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         None if self.m is None else self.m.copy(),
                         None if self.v is None else self.v.copy())


def _block_slices(h, w, ph, pw):
    if ph > h or pw > w:
        raise ValueError(f"prompt {ph}x{pw} does not fit a {h}x{w} spectrum")
    ch, cw = fourier.dc_index(h, w)
    top, left = ch - ph // 2, cw - pw // 2
    return slice(top, top + ph), slice(left, left + pw)


def one_pad(prompt, h, w):
    """Full H x W x C multiplier: ones everywhere, prompt centered on the DC bin."""
    values = prompt.values if isinstance(prompt, PromptGrid) else np.asarray(prompt)
    ph, pw, c = values.shape
    rows, cols = _block_slices(h, w, ph, pw)
    full = np.ones((h, w, c))
    full[rows, cols] = values
    return full


def apply_prompt(prompt, image):
    """Scale the low-frequency magnitude of ``image`` (H x W x C) by the prompt; phase is kept."""
    spec = fourier.fft2(image)
    if prompt.shape[2] != spec.shape[2]:
        raise ValueError(f"prompt has {prompt.shape[2]} channels, image has {spec.shape[2]}")
    mag, phase = fourier.split_mag_phase(spec)
    mult = one_pad(prompt, spec.shape[0], spec.shape[1])
    return fourier.ifft2(fourier.combine_mag_phase(mult * mag, phase))


def to_nchw(image):
    return np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1)[None])


def to_hwc(batch):
    return np.ascontiguousarray(np.asarray(batch)[0].transpose(1, 2, 0))


def align_loss_and_grad(prompt, image, net, bn_mode="source", scope="all"):
    """BN alignment loss of the prompted image and its gradient w.r.t. the prompt.

    The prompted image is Re(ifft(Q * X)) with X the centered spectrum and Q
    the one-padded prompt, so dL/dQ_k = Re(X_k * G_k) where G is the centered
    normalized inverse transform of dL/dimage. Frozen cells get zero gradient.
    """
    spec = fourier.fft2(image)
    h, w, _ = spec.shape
    mult = one_pad(prompt, h, w)
    adapted = fourier.ifft2(mult * spec)
    _, tape = forward(net, to_nchw(adapted), bn_mode)
    loss, stat_grads = bn_align_loss(tape, scope)
    grad_img = to_hwc(backward(tape, None, stat_grads)[0])
    back = np.fft.fftshift(np.fft.ifft2(grad_img, axes=(0, 1)), axes=(0, 1))
    grad_full = np.real(spec * back)
    rows, cols = _block_slices(h, w, prompt.shape[0], prompt.shape[1])
    grad = grad_full[rows, cols].copy()
    grad[prompt.frozen] = 0.0
    return loss, grad


def prompt_grad(prompt, image, net, bn_mode="source", scope="all"):
    return align_loss_and_grad(prompt, image, net, bn_mode, scope)[1]


def adam_step(prompt, grad, state):
    """One Adam update on the unfrozen cells; mutates and returns ``(prompt, state)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != prompt.shape:
        raise ValueError(f"gradient shape {grad.shape} != prompt shape {prompt.shape}")
    if state.m is None or state.m.shape != prompt.shape:
        state.m = np.zeros(prompt.shape)
        state.v = np.zeros(prompt.shape)
    state.step += 1
    live = ~prompt.frozen
    g = np.where(live, grad, 0.0)
    state.m[live] = state.beta1 * state.m[live] + (1.0 - state.beta1) * g[live]
    state.v[live] = state.beta2 * state.v[live] + (1.0 - state.beta2) * g[live] ** 2
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    prompt.values[live] -= update[live]
    return prompt, state


def save_prompt(prompt, path):
    values = np.ascontiguousarray(prompt.values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(PROMPT_MAGIC)
        fh.write(struct.pack("<3I", *values.shape))
        fh.write(values.tobytes())
        fh.write(np.packbits(prompt.frozen.ravel()).tobytes())


def load_prompt(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PROMPT_MAGIC:
        raise PromptFormatError(f"{path}: bad magic {blob[:4]!r}")
    try:
        shape = struct.unpack_from("<3I", blob, 4)
        n = int(np.prod(shape))
        values = np.frombuffer(blob, dtype="<f8", count=n, offset=16).reshape(shape)
        bits = np.frombuffer(blob, dtype=np.uint8, offset=16 + 8 * n)
        frozen = np.unpackbits(bits, count=n).astype(bool).reshape(shape)
    except (struct.error, ValueError) as exc:
        raise PromptFormatError(f"{path}: truncated prompt file") from exc
    return PromptGrid(values.astype(np.float64), frozen)
