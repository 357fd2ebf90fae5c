"""Command-line entry point: gen, pretrain, adapt, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import bench, training
from .net import CheckpointError, NumericError, load_checkpoint, save_checkpoint
from .prompt import PromptFormatError
from .runtime import (ConfigError, RunConfig, load_report, run_stream, summary_csv, summary_rows,
                      write_report)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SOURCE_GATE = 0.90
SWEEP_ALIASES = {"e": "ema_decay", "lambda": "lam"}

log = logging.getLogger("mgipt")


# ---- config file -------------------------------------------------------

def _coerce(key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_config_text(text):
    """Parse flat ``key = value`` lines into RunConfig overrides; unknown keys are an error."""
    defaults = {f.name: f.default for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw, defaults[key])
    return out


def load_config(path=None, **overrides):
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        values = parse_config_text(p.read_text())
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def parse_sweep(spec):
    """``key=start:stop:step`` (stop exclusive) or ``key=v1,v2,...`` -> (field, values)."""
    if "=" not in spec:
        raise ConfigError(f"sweep must look like key=start:stop:step, got {spec!r}")
    key, rng = spec.split("=", 1)
    key = SWEEP_ALIASES.get(key.strip(), key.strip())
    defaults = {f.name: f.default for f in fields(RunConfig)}
    if key not in defaults:
        raise ConfigError(f"cannot sweep unknown key {key!r}")
    try:
        if ":" in rng:
            start, stop, step = (float(v) for v in rng.split(":"))
            if step <= 0:
                raise ValueError("step")
            count = int(np.floor((stop - start) / step - 1e-9)) + 1
            vals = [round(start + i * step, 10) for i in range(max(count, 0))]
        else:
            vals = [v for v in rng.split(",") if v.strip()]
        vals = [_coerce(key, str(v), defaults[key]) for v in vals]
    except ValueError as exc:
        raise ConfigError(f"bad sweep range {rng!r}") from exc
    if not vals:
        raise ConfigError(f"sweep {spec!r} is empty")
    return key, vals


# ---- commands ----------------------------------------------------------

def _dataset_digest(ds):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.images, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(ds.masks, dtype="<f8").tobytes())
    return h.hexdigest()


def cmd_gen(args):
    if args.n_per_domain < 1:
        raise ConfigError("--n-per-domain must be >= 1")
    for domain, ds in bench.generate_benchmark(args.n_per_domain, args.seed).items():
        bench.write_dataset(ds, args.out)
        print(f"{domain} {len(ds)} {_dataset_digest(ds)}")
    return EXIT_OK


def cmd_pretrain(args):
    ds = bench.read_dataset(args.data, "A")
    n = len(ds)
    n_held = max(1, n // 5) if n > 1 else 0
    train = ds.subset(range(n - n_held))
    held = ds.subset(range(n - n_held, n)) if n_held else train
    net = training.pretrain(train.images, train.masks, steps=args.steps, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, args.out)
    score = training.evaluate(net, held.images, held.masks, "source")
    print(f"held-out A DSC {score:.4f} (n={len(held)})")
    print(f"weights sha256 {net.digest()}")
    if args.steps > 0 and not args.no_gate and score < SOURCE_GATE:
        print(f"source gate failed: {score:.4f} < {SOURCE_GATE}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _load_streams(data, domains):
    return [bench.read_dataset(data, d) for d in domains]


def _adapt_once(model, data, cfg, out, dump):
    net = load_checkpoint(model)
    datasets = _load_streams(data, cfg.domains)
    bank = cfg.make_bank(datasets[0].images.shape[-1])
    summary, records = run_stream(datasets, net, cfg, Path(out) / "images" if dump else None, bank)
    write_report(out, summary, records, cfg, bank)
    return summary


def cmd_adapt(args):
    cfg = load_config(args.config, method=args.method, rounds=args.rounds, seed=args.seed)
    if args.sweep is None:
        summary = _adapt_once(args.model, args.data, cfg, args.out, args.dump_images)
        _print_summary(summary)
        return EXIT_OK
    key, values = parse_sweep(args.sweep)
    cfgs = [replace(cfg, **{key: v}) for v in values]
    for c in cfgs:
        c.__post_init__()
    outs = [Path(args.out) / f"{key}={v}" for v in values]
    jobs = [(args.model, args.data, c, o, args.dump_images) for c, o in zip(cfgs, outs)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            summaries = list(pool.map(_adapt_star, jobs))
    else:
        summaries = [_adapt_once(*j) for j in jobs]
    lines = [f"{key},overall_avg,pd\n"]
    for v, s in zip(values, summaries):
        lines.append(f"{v},{s['overall_avg']:.6f},{s['pd']:.6f}\n")
        print(f"{key}={v}: overall {s['overall_avg']:.2f}  PD {s['pd']:.2f}")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "sweep.csv").write_text("".join(lines))
    return EXIT_OK


def _adapt_star(job):
    return _adapt_once(*job)


def _print_summary(summary):
    for r, avg in enumerate(summary["per_round_avg"], 1):
        per = summary["per_domain_dsc"][str(r)]
        cells = "  ".join(f"{d} {v:.2f}" for d, v in per.items())
        print(f"round {r}: {cells}  avg {avg:.2f}")
    print(f"overall {summary['overall_avg']:.2f}  PD {summary['pd']:.2f}  "
          f"weights unchanged: {summary['weights_unchanged']}")


def render_markdown(reports):
    """Markdown tables for one or more ``(label, summary)`` pairs."""
    multi = len(reports) > 1
    head = (["run"] if multi else []) + ["round", "domain", "dsc"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for label, summary in reports:
        for row in summary_rows(summary, label if multi else None):
            lines.append("| " + " | ".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in row.values()) + " |")
    lines += ["", "| " + ("run | " if multi else "") + "round | avg |", "|" + "---|" * (3 if multi else 2)]
    for label, summary in reports:
        for r, avg in enumerate(summary["per_round_avg"], 1):
            lines.append("| " + (f"{label} | " if multi else "") + f"{r} | {avg:.6f} |")
    lines += ["", "| " + ("run | " if multi else "") + "overall | pd |", "|" + "---|" * (3 if multi else 2)]
    for label, summary in reports:
        lines.append("| " + (f"{label} | " if multi else "") + f"{summary['overall_avg']:.6f} | {summary['pd']:.6f} |")
    return "\n".join(lines) + "\n"


def render_csv(reports):
    if len(reports) == 1:
        return summary_csv(reports[0][1])
    parts = [summary_csv(s, label) for label, s in reports]
    return parts[0] + "".join(p.split("\n", 1)[1] for p in parts[1:])


def cmd_report(args):
    reports = []
    for d in args.inputs:
        if not Path(d).is_dir():
            raise FileNotFoundError(f"report directory {d} does not exist")
        reports.append((Path(d).name, load_report(d)))
    text = render_csv(reports) if args.format == "csv" else render_markdown(reports)
    sys.stdout.write(text)
    return EXIT_OK


# ---- entry -------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="mgipt", description="Prompt-based continual test-time adaptation on a synthetic benchmark.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write the five-domain synthetic benchmark")
    g.add_argument("--out", required=True, help="output dataset root")
    g.add_argument("--seed", type=int, default=0, help="scene seed (default 0)")
    g.add_argument("--n-per-domain", type=int, default=100, help="samples per domain (default 100)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("pretrain", help="train the source network on domain A")
    t.add_argument("--data", required=True, help="dataset root containing A/")
    t.add_argument("--out", required=True, help="checkpoint path (.mseg)")
    t.add_argument("--seed", type=int, default=0, help="initialization and batching seed")
    t.add_argument("--steps", type=int, default=1500, help="Adam steps (default 1500)")
    t.add_argument("--no-gate", action="store_true", help=f"do not fail when held-out DSC < {SOURCE_GATE}")
    t.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("adapt", help="stream target domains through a frozen network")
    a.add_argument("--model", required=True, help="checkpoint from pretrain")
    a.add_argument("--data", required=True, help="dataset root")
    a.add_argument("--config", help="flat key = value file with RunConfig fields")
    a.add_argument("--out", required=True, help="report directory")
    a.add_argument("--method", help="override method")
    a.add_argument("--rounds", type=int, help="override number of rounds")
    a.add_argument("--seed", type=int, help="override seed recorded in the report")
    a.add_argument("--dump-images", action="store_true", help="write original/prompt/adapted PPM triplets")
    a.add_argument("--sweep", help="key=start:stop:step (stop exclusive) or key=v1,v2; one report per value")
    a.add_argument("--jobs", type=int, default=1, help="parallel processes for --sweep")
    a.set_defaults(func=cmd_adapt)

    r = sub.add_parser("report", help="render one or more run reports")
    r.add_argument("--in", dest="inputs", nargs="+", required=True, help="report directories")
    r.add_argument("--format", choices=("csv", "md"), default="md")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (bench.DataFormatError, CheckpointError, PromptFormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
