"""Continual test-time adaptation loop, ablation variants and long-term reporting."""

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import viz
from .aip import AipConfig, tune_instance_prompt
from .metrics import confidence, dsc
from .mgp import GlobalPromptBank
from .net import NumericError, calibrated, forward, sigmoid
from .prompt import apply_prompt, to_nchw

log = logging.getLogger(__name__)

METHODS = ("mgipt", "source_only", "bn_calib_only", "single_scale_gp", "gp_only", "ip_only")
_USES_IP = {"mgipt", "ip_only"}
_USES_GP = {"mgipt", "single_scale_gp", "gp_only"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    method: str = "mgipt"
    lam: float = 0.8
    ema_decay: float = 0.1
    bs: int = 5
    ip_lr: float = 0.05
    gp_lr: float = 0.05
    ip_epochs: int = 7
    gp_epochs: int = 1
    max_scale_steps: int = 6
    patience: int = 1
    rounds: int = 1
    domains: tuple = ("B", "C", "D", "E")
    seed: int = 0
    bn_loss_scope: str = "all"
    train_bn_mode: str = "source"
    confidence_reduce: str = "mean"
    student_init: str = "teacher"
    reset_student_optimizer: bool = True
    log_wall_time: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.bn_loss_scope not in ("all", "encoder"):
            raise ConfigError("bn_loss_scope must be 'all' or 'encoder'")
        if self.train_bn_mode not in ("source", "calibrated"):
            raise ConfigError("train_bn_mode must be 'source' or 'calibrated'")
        if self.confidence_reduce not in ("mean", "min"):
            raise ConfigError("confidence_reduce must be 'mean' or 'min'")
        if self.student_init not in ("teacher", "ones"):
            raise ConfigError("student_init must be 'teacher' or 'ones'")
        self.domains = tuple(self.domains)

    @property
    def eval_mode(self):
        return calibrated(self.lam)

    @property
    def train_mode(self):
        return "source" if self.train_bn_mode == "source" else calibrated(self.lam)

    def aip_config(self):
        return AipConfig(epochs_per_scale=self.ip_epochs, max_scale_steps=self.max_scale_steps,
                         lr=self.ip_lr, patience=self.patience)

    def make_bank(self, channels=3):
        if self.method not in _USES_GP:
            return None
        scales = (self.bs,) if self.method == "single_scale_gp" else None
        return GlobalPromptBank(bs=self.bs, decay=self.ema_decay, epochs=self.gp_epochs, lr=self.gp_lr,
                                channels=channels, student_init=self.student_init,
                                reset_student_optimizer=self.reset_student_optimizer, scales=scales)

    def to_dict(self):
        d = asdict(self)
        d["domains"] = list(self.domains)
        return d

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


@dataclass
class AdaptationRecord:
    sample_id: str
    domain_id: str
    round: int
    confidences: list = field(default_factory=list)
    w_ip: float = 0.0
    w_gp: list = field(default_factory=list)
    dsc: list = field(default_factory=list)
    best_scale: int = 0
    trace: list = field(default_factory=list)
    steps: int = 0
    wall_time: float = 0.0

    def to_json(self, with_time=False):
        d = asdict(self)
        if not with_time:
            d.pop("wall_time")
        return json.dumps(d, sort_keys=True)


def ensemble(p_ip, p_gp, c_ip, c_gp):
    """Confidence-weighted average of branch probability maps.

    ``p_ip``/``c_ip`` may be None when the instance branch is absent. All-zero
    confidences fall back to uniform weights. Returns ``(O, w_ip, w_gp)``.
    """
    maps = ([] if p_ip is None else [np.asarray(p_ip)]) + [np.asarray(p) for p in p_gp]
    conf = np.array(([] if p_ip is None else [c_ip]) + list(c_gp), dtype=np.float64)
    if not maps:
        raise ValueError("ensemble needs at least one branch")
    if np.any(conf < 0):
        raise ValueError("confidences must be non-negative")
    total = conf.sum()
    weights = conf / total if total > 0 else np.full(len(maps), 1.0 / len(maps))
    out = sum(w * m for w, m in zip(weights, maps))
    if p_ip is None:
        return out, 0.0, list(weights)
    return out, float(weights[0]), list(weights[1:])


def _branch(net, image, prompt, mode, reduce):
    adapted = image if prompt is None else apply_prompt(prompt, image)
    logits = forward(net, to_nchw(adapted), mode)[0][0]
    return sigmoid(logits), confidence(logits, reduce), adapted


def adapt_sample(x, net, bank, cfg, sample_id="", domain_id="", round_index=1, mask=None):
    """Adapt one H x W x 3 image; returns ``(O, record, extras)``.

    ``O`` is the 2 x H x W probability map. ``extras`` carries the prompt and
    adapted image used for visual dumps. Network weights are never written.
    """
    t0 = time.perf_counter()
    rec = AdaptationRecord(sample_id, domain_id, round_index)
    extras = {"prompt": None, "adapted": x}
    method = cfg.method
    if method == "source_only":
        out, c, _ = _branch(net, x, None, "source", cfg.confidence_reduce)
        rec.confidences, rec.w_ip = [c], 1.0
    elif method == "bn_calib_only":
        out, c, _ = _branch(net, x, None, cfg.eval_mode, cfg.confidence_reduce)
        rec.confidences, rec.w_ip = [c], 1.0
    else:
        ip_prompt = None
        if method in _USES_IP:
            res = tune_instance_prompt(x, net, cfg.aip_config(), cfg.train_mode, cfg.eval_mode, cfg.bn_loss_scope)
            ip_prompt = res.best_prompt
            rec.best_scale, rec.trace, rec.steps = res.best_scale, list(res.consistency_trace), res.steps_taken
        if bank is not None:
            students = bank.student_update(x, net, cfg.train_mode, cfg.bn_loss_scope)
            bank.teacher_update(students)
        p_ip = c_ip = None
        p_gp, c_gp = [], []
        if ip_prompt is not None:
            try:
                p_ip, c_ip, adapted = _branch(net, x, ip_prompt, cfg.eval_mode, cfg.confidence_reduce)
                extras.update(prompt=ip_prompt, adapted=adapted)
            except (NumericError, FloatingPointError, ValueError) as exc:
                log.warning("instance branch dropped for %s: %s", sample_id, exc)
                p_ip = c_ip = None
        for teacher in ([] if bank is None else bank.teachers):
            try:
                p, c, adapted = _branch(net, x, teacher, cfg.eval_mode, cfg.confidence_reduce)
            except (NumericError, FloatingPointError, ValueError) as exc:
                log.warning("global branch %d dropped for %s: %s", teacher.size, sample_id, exc)
                continue
            p_gp.append(p)
            c_gp.append(c)
            if extras["prompt"] is None and teacher.size == cfg.bs:
                extras.update(prompt=teacher, adapted=adapted)
        if p_ip is None and not p_gp:
            out, c, _ = _branch(net, x, None, cfg.eval_mode, cfg.confidence_reduce)
            rec.confidences, rec.w_ip = [c], 1.0
        else:
            out, rec.w_ip, rec.w_gp = ensemble(p_ip, p_gp, c_ip, c_gp)
            rec.confidences = ([] if c_ip is None else [c_ip]) + c_gp
    if mask is not None:
        rec.dsc = [float(v) for v in dsc(out.transpose(1, 2, 0) > 0.5, np.asarray(mask) > 0.5)]
    rec.wall_time = time.perf_counter() - t0
    return out, rec, extras


def summarize(records, domains, rounds):
    """Per-domain/per-round mean DSC (percent), overall average and degradation."""
    per_domain = {}
    for r in range(1, rounds + 1):
        per_domain[str(r)] = {}
        for d in domains:
            vals = [np.mean(rec.dsc) for rec in records if rec.round == r and rec.domain_id == d]
            per_domain[str(r)][d] = 100.0 * float(np.mean(vals)) if vals else float("nan")
    per_round = [float(np.mean(list(per_domain[str(r)].values()))) for r in range(1, rounds + 1)]
    overall = float(np.mean(per_round))
    return {
        "per_domain_dsc": per_domain,
        "per_round_avg": per_round,
        "overall_avg": overall,
        "pd": per_round[0] - overall,
    }


def run_stream(datasets, net, cfg, dump_dir=None, bank=None):
    """Stream every dataset in order, ``cfg.rounds`` times, with one persistent bank.

    ``datasets`` is an ordered list of :class:`~mgipt.bench.Dataset`. A bank
    is built from ``cfg`` unless one is passed in. Returns ``(summary, records)``.
    """
    digest_before = net.digest()
    if bank is None:
        bank = cfg.make_bank(datasets[0].images.shape[-1])
    records = []
    for r in range(1, cfg.rounds + 1):
        for ds in datasets:
            for sid, img, msk in zip(ds.ids, ds.images, ds.masks):
                _, rec, extras = adapt_sample(img, net, bank, cfg, sid, ds.domain, r, msk)
                records.append(rec)
                if dump_dir is not None:
                    viz.dump_triplet(Path(dump_dir) / f"r{r}_{ds.domain}_{sid}", img, extras["prompt"], extras["adapted"])
    summary = summarize(records, [ds.domain for ds in datasets], cfg.rounds)
    digest_after = net.digest()
    summary["weights_digest"] = digest_after
    summary["weights_unchanged"] = digest_before == digest_after
    summary["config"] = cfg.to_dict()
    if bank is not None:
        summary["teacher_samples_seen"] = bank.samples_seen
    return summary, records


def summary_json(summary):
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


def write_report(out_dir, summary, records, cfg, bank=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(summary_json(summary))
    (out / "records.jsonl").write_text("".join(rec.to_json(cfg.log_wall_time) + "\n" for rec in records))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "summary.csv").write_text(summary_csv(summary))
    if bank is not None:
        bank.save(out / "bank")


def summary_rows(summary, label=None):
    rows = []
    for r, per in summary["per_domain_dsc"].items():
        for d, v in per.items():
            row = {"round": int(r), "domain": d, "dsc": v}
            if label is not None:
                row = {"run": label, **row}
            rows.append(row)
    return rows


def summary_csv(summary, label=None):
    buf = io.StringIO()
    rows = summary_rows(summary, label)
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def load_report(report_dir):
    path = Path(report_dir) / "summary.json"
    if not path.is_file():
        raise FileNotFoundError(f"no summary.json in {report_dir}")
    return json.loads(path.read_text())
