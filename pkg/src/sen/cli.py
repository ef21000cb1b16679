"""``sen`` command line: train, eval, gradcheck, ablate, params."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Optional

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, SENConfig, default_config, load_config
from .experiments import (ABLATION_AXES, ablate, build_model, build_task, gradcheck_variants,
                          run_gradcheck)
from .network import count_parameters, transformer_layer_param_count
from .ra import ra_param_count
from .training import Recipe, TrainingDiverged, evaluate, make_head, precompute_first_pass, train


class MetricsWriter:
    """Append-only JSON Lines sink; every line is flushed so any prefix is valid."""

    def __init__(self, path: Optional[Path]):
        self.path = path
        self.fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "a", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        if self.fh is not None:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _config(args) -> SENConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _out(args) -> Optional[Path]:
    if args.out is None:
        return None
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_train(args) -> int:
    out = _out(args)
    if args.resume:
        restored = load_checkpoint(args.resume)
        cfg, seed = restored.config, restored.seed
        if args.seed is not None and args.seed != seed:
            raise ValueError(f"--seed {args.seed} conflicts with the checkpoint's seed {seed}")
        sen, head, state = restored.sen, restored.head, restored.state
    else:
        cfg = _config(args)
        seed = cfg.seed
        sen = build_model(cfg, seed)
        head, state = None, None
    task = build_task(cfg, seed)
    writer = MetricsWriter(out / "metrics.jsonl" if out else None)
    try:
        res = train(sen, task, Recipe.from_config(cfg.training), head=head, seed=seed,
                    state=state, until=args.until, emit=writer)
    finally:
        writer.close()
    ckpt = args.ckpt or (str(out / "checkpoint.senc") if out else None)
    if ckpt:
        save_checkpoint(ckpt, sen, res["head"], res["state"], seed)
    last = {r["metric"]: r["value"] for r in res["records"]}
    print(json.dumps({"step": res["state"].step, "arm": sen.arm, "seed": seed, **last}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    if not args.ckpt:
        raise ValueError("eval needs --ckpt PATH")
    r = load_checkpoint(args.ckpt)
    task = build_task(r.config, r.seed)
    if r.sen.n_modalities < task.n_modalities:
        task = task.restrict(r.sen.n_modalities)
    first = precompute_first_pass(r.sen, task.test)
    metric, value = evaluate(r.sen, r.head, task.test, first)
    rec = {"step": r.state.step, "arm": r.sen.arm, "metric": metric, "value": value, "seed": r.seed}
    out = _out(args)
    if out:
        w = MetricsWriter(out / "eval.jsonl")
        w(rec)
        w.close()
    print(json.dumps(rec, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    cfgs = gradcheck_variants() if args.all_variants else [_config(args)]
    out = _out(args)
    w = MetricsWriter(out / "gradcheck.jsonl" if out else None)
    worst = 0.0
    t0 = time.perf_counter()
    for cfg in cfgs:
        rep = run_gradcheck(cfg, args.seed)
        rep = {k: (bool(v) if k == "pass" else float(v) if k == "max_rel_err" else v)
               for k, v in rep.items()}
        worst = max(worst, rep["max_rel_err"])
        w(rep)
        print(f"{cfg.arm:<11} {cfg.ra.fusion:<9} {cfg.ra.distribution:<6} "
              f"prompt={'on ' if cfg.ra.learnable_prompt else 'off'} "
              f"max_rel_err={rep['max_rel_err']:.3e} checked={rep['checked']} "
              f"frozen_excluded={rep['frozen_excluded']}")
    w.close()
    ok = worst < 1e-4
    print(f"{'PASS' if ok else 'FAIL'} worst max_rel_err={worst:.3e} over {len(cfgs)} config(s) "
          f"in {time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = args.seeds if args.seeds else [cfg.seed]
    out = _out(args)
    metrics = MetricsWriter(out / "metrics.jsonl" if out else None)
    rows_out = MetricsWriter(out / f"ablate_{args.axis}.jsonl" if out else None)
    try:
        rows = ablate(cfg, args.axis, seeds, emit=metrics)
    finally:
        metrics.close()
    for row in rows:
        rows_out(row)
        print(json.dumps(row, sort_keys=True))
    rows_out.close()
    return 0


def cmd_params(args) -> int:
    cfg = _config(args)
    sen = build_model(cfg)
    frozen, trainable = count_parameters(sen)
    head = make_head(build_task(cfg), sen.d, cfg.seed)
    d, k, m = cfg.shared_dim, cfg.ra.prompt_tokens, cfg.n_modalities
    report = {
        "arm": sen.arm, "frozen": frozen, "trainable": trainable,
        "head": sum(t.size for t in head.parameters()),
        "ra_layer": ra_param_count(cfg.ra.distribution, cfg.ra.fusion, d, k, m, cfg.ra.learnable_prompt),
        "transformer_layer": transformer_layer_param_count(d, k, m),
        "rounds": sen.rounds,
    }
    print(f"frozen={frozen} trainable={trainable}")
    print(json.dumps(report, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="JSON config (defaults used if omitted)")
    shared.add_argument("--seed", type=int, help="override the config seed")
    shared.add_argument("--out", metavar="DIR", help="directory for metrics and artifacts")
    shared.add_argument("--ckpt", metavar="PATH", help="checkpoint to write (train) or read (eval)")

    p = argparse.ArgumentParser(prog="sen", description="Super encoding network experiments at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[shared], help="train one arm on the configured task")
    t.add_argument("--resume", metavar="PATH", help="continue from a checkpoint")
    t.add_argument("--until", type=int, metavar="STEP", help="stop (and checkpoint) at this step")
    sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint on the test split")
    g = sub.add_parser("gradcheck", parents=[shared], help="finite-difference gradient check")
    g.add_argument("--all-variants", action="store_true",
                   help="sweep every fusion x distribution x prompt setting at M=3, d=8, k=2, L=2")
    a = sub.add_parser("ablate", parents=[shared], help="sweep one ablation axis")
    a.add_argument("--axis", required=True, choices=ABLATION_AXES)
    a.add_argument("--seeds", type=int, nargs="+", help="seeds to run (default: the config seed)")
    sub.add_parser("params", parents=[shared], help="print frozen/trainable parameter counts")
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "ablate": cmd_ablate, "params": cmd_params}


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"sen: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"sen: error: {exc}", file=sys.stderr)
        return 1


run_command = main

if __name__ == "__main__":
    sys.exit(main())
