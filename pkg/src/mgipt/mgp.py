"""Multi-scale global prompts kept as EMA teachers of per-sample students."""

import json
import logging
from pathlib import Path

import numpy as np

from .net import NumericError
from .prompt import AdamState, PromptGrid, adam_step, align_loss_and_grad, load_prompt, save_prompt

log = logging.getLogger(__name__)


def ema_update(teacher, student, decay):
    """teacher <- decay * teacher + (1 - decay) * student, elementwise."""
    if teacher.shape != student.shape:
        raise ValueError(f"teacher {teacher.shape} and student {student.shape} differ")
    return PromptGrid(decay * teacher.values + (1.0 - decay) * student.values)


class GlobalPromptBank:
    """Teacher prompts at sizes ``bs-2, bs, bs+2`` (or a single ``bs`` scale)."""

    def __init__(self, bs=5, decay=0.1, epochs=1, lr=0.05, channels=3,
                 student_init="teacher", reset_student_optimizer=True, scales=None):
        if scales is None:
            if bs < 3 or bs % 2 == 0:
                raise ValueError(f"base size must be odd and >= 3, got {bs}")
            scales = (bs - 2, bs, bs + 2)
        if any(s < 1 or s % 2 == 0 for s in scales):
            raise ValueError(f"scales must be odd and positive, got {scales}")
        if student_init not in ("teacher", "ones"):
            raise ValueError(f"unknown student_init {student_init!r}")
        if not 0.0 <= decay <= 1.0:
            raise ValueError("EMA decay must lie in [0, 1]")
        self.scales = tuple(scales)
        self.decay = decay
        self.epochs = epochs
        self.lr = lr
        self.student_init = student_init
        self.reset_student_optimizer = reset_student_optimizer
        self.teachers = [PromptGrid.ones(s, s, channels) for s in self.scales]
        self.optimizers = [AdamState(lr=lr) for _ in self.scales]
        self.samples_seen = 0

    def student_update(self, x, net, bn_mode="source", scope="all"):
        """One student per scale, warm-started (or reset to ones) and tuned on the BN alignment loss."""
        students = []
        for n, teacher in enumerate(self.teachers):
            start = teacher.copy() if self.student_init == "teacher" else PromptGrid.ones(*teacher.shape)
            if self.reset_student_optimizer:
                self.optimizers[n] = AdamState(lr=self.lr)
            state = self.optimizers[n].copy()
            student = start.copy()
            try:
                for _ in range(self.epochs):
                    _, grad = align_loss_and_grad(student, x, net, bn_mode, scope)
                    adam_step(student, grad, state)
                if not np.all(np.isfinite(student.values)):
                    raise NumericError("student prompt became non-finite")
            except (NumericError, FloatingPointError, ValueError) as exc:
                log.warning("student at scale %d fell back to its teacher: %s", self.scales[n], exc)
                students.append(teacher.copy())
                continue
            self.optimizers[n] = state
            students.append(student)
        return students

    def teacher_update(self, students):
        if len(students) != len(self.teachers):
            raise ValueError("one student per scale is required")
        self.teachers = [ema_update(t, s, self.decay) for t, s in zip(self.teachers, students)]
        self.samples_seen += 1
        return self

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for scale, teacher in zip(self.scales, self.teachers):
            save_prompt(teacher, d / f"teacher_{scale}.prmt")
        meta = {"scales": list(self.scales), "decay": self.decay, "samples_seen": self.samples_seen}
        (d / "bank.json").write_text(json.dumps(meta, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory, **kwargs):
        d = Path(directory)
        meta = json.loads((d / "bank.json").read_text())
        bank = cls(decay=meta["decay"], scales=tuple(meta["scales"]), **kwargs)
        bank.teachers = [load_prompt(d / f"teacher_{s}.prmt") for s in bank.scales]
        bank.samples_seen = meta["samples_seen"]
        return bank
