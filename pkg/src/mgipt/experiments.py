"""Standard desk-scale protocol: one cached source model, seeded target streams, ablations and sweeps."""

import hashlib
import logging
import os
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, net as netmod, training
from .runtime import RunConfig, run_stream

log = logging.getLogger(__name__)

SOURCE_SEED = 1
SOURCE_TRAIN = 140
SOURCE_HELDOUT = 20
PRETRAIN_STEPS = 1500
PRETRAIN_SEED = 0
TARGET_N = 10
TARGET_SEED_BASE = 100
ABLATION_SEEDS = (0, 1, 2, 3, 4)
E_GRID = tuple(round(0.1 * i, 1) for i in range(10))
LAMBDA_GRID = (0.0, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0)


def source_split(seed=SOURCE_SEED):
    """Domain-A training images/masks and a disjoint held-out split."""
    a = bench.generate_domain("A", SOURCE_TRAIN + SOURCE_HELDOUT, seed)
    train = (a.images[:SOURCE_TRAIN], a.masks[:SOURCE_TRAIN])
    held = (a.images[SOURCE_TRAIN:], a.masks[SOURCE_TRAIN:])
    return train, held


def _setup_key(steps):
    h = hashlib.sha256()
    for mod in (bench, netmod, training):
        h.update(Path(mod.__file__).read_bytes())
    h.update(f"{SOURCE_SEED}/{SOURCE_TRAIN}/{steps}/{PRETRAIN_SEED}".encode())
    return h.hexdigest()[:16]


def cache_dir():
    return Path(os.environ.get("MGIPT_CACHE", Path.home() / ".cache" / "mgipt"))


def source_model(steps=PRETRAIN_STEPS, cache=True):
    """Pretrained reference network, cached on disk by a hash of the code that produces it."""
    path = cache_dir() / f"source_{_setup_key(steps)}.mseg"
    if cache and path.is_file():
        return netmod.load_checkpoint(path)
    (images, masks), _ = source_split()
    log.info("pretraining source model (%d steps)", steps)
    net = training.pretrain(images, masks, steps=steps, seed=PRETRAIN_SEED)
    if cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        netmod.save_checkpoint(net, tmp)
        tmp.replace(path)
    return net


def target_streams(seed, n=TARGET_N, domains=("B", "C", "D", "E")):
    return [bench.generate_domain(d, n, TARGET_SEED_BASE + seed) for d in domains]


def run(net, cfg, seed=0, n=TARGET_N):
    summary, _ = run_stream(target_streams(seed, n, cfg.domains), net, replace(cfg, seed=seed))
    return summary


def ablation(net, methods=("source_only", "bn_calib_only", "mgipt"), seeds=ABLATION_SEEDS, n=TARGET_N, base=None):
    """Seed-averaged overall DSC per method: ``{method: (mean, [per-seed])}``."""
    base = base or RunConfig()
    out = {}
    for m in methods:
        vals = [run(net, replace(base, method=m), s, n)["overall_avg"] for s in seeds]
        out[m] = (float(np.mean(vals)), vals)
    return out


def sweep(net, key, values, seed=0, n=TARGET_N, base=None):
    """Overall DSC for each value of one RunConfig field."""
    base = base or RunConfig()
    return {v: run(net, replace(base, **{key: v}), seed, n)["overall_avg"] for v in values}
