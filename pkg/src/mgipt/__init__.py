"""Multi-scale global and instance prompt tuning for continual test-time adaptation of a frozen segmenter."""

from .aip import AipConfig, AipResult, augment, consistency, grow_prompt, tune_instance_prompt
from .bench import DEFAULT_STYLES, Dataset, DomainStyle, generate_benchmark, generate_domain, read_dataset, write_dataset
from .fourier import fft2, ifft2, split_mag_phase
from .metrics import confidence, dsc
from .mgp import GlobalPromptBank, ema_update
from .net import MiniSegNet, backward_input, backward_params, bn_align_loss, calibrated, forward, seg_loss
from .prompt import AdamState, PromptGrid, adam_step, apply_prompt, prompt_grad
from .runtime import AdaptationRecord, RunConfig, adapt_sample, ensemble, run_stream

__version__ = "0.1.0"
