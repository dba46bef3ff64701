"""``tempclip`` command line: gen-data, pretrain, train, patch, eval, check.

Exit codes: 0 success, 1 usage/config error, 2 invariant failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .checks import run_checks
from .config import ConfigError, RunConfig, load_run_config
from .data import gen_dataset, load_dataset, save_dataset
from .evaluation import embed, ep1_eval, metrics_json, retrieval_recall, sweep_lambda, zero_shot_accuracy
from .experiments import Benchmark, pretrain
from .model import ModelConfig, check_params
from .training import TrainingAborted, load_train_state, save_train_state, total_steps, train
from .weightspace import (Checkpoint, CheckpointError, ConfigMismatchError, IncompatibleParamsError,
                          file_digest, interpolate, load_checkpoint, save_checkpoint)

log = logging.getLogger("tempclip")

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_IO = 0, 1, 2, 3
PROTOCOLS = ("ep1", "ep2", "closeset", "retrieval", "sweep")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_run_config(args.config, overrides)


def _run_dir(path) -> Path:
    """Create the output directory; its parent must already exist."""
    out = Path(path)
    if not out.parent.is_dir():
        raise FileNotFoundError(f"parent directory of {out} does not exist")
    out.mkdir(exist_ok=True)
    return out


def _bench(cfg: RunConfig, data_dir) -> Benchmark:
    ds = load_dataset(data_dir)
    return Benchmark(ds, ds.bank(cfg.model.embed_dim, cfg.data.text_seed))


def _write_jsonl(path: Path, lines) -> None:
    path.write_text("".join(line + "\n" for line in lines))


def _load_model_checkpoint(path, model: ModelConfig) -> Checkpoint:
    cp = load_checkpoint(path)
    if cp.model_config is None:
        raise ConfigMismatchError(f"{path} carries no model config")
    stored = ModelConfig.from_dict(cp.model_config)
    if stored.architecture() != model.architecture():
        diff = sorted(k for k, v in model.architecture().items() if stored.architecture().get(k) != v)
        raise ConfigMismatchError(f"{path} was written for a different model: fields {diff}")
    check_params(cp.params, model)
    return cp


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _run_dir(args.out)
    ds = gen_dataset(cfg.data.video_spec(cfg.model), cfg.data.counts, seed=cfg.seed)
    manifest = save_dataset(ds, out)
    cfg.dump(out / "config.json")
    pools = {p: len(ds.pool(p)) for p in ("pretrain", "finetune", "zeroshot")}
    print(json.dumps({"out": str(out), "classes": pools, "blob_sha256": manifest["blob_sha256"]}, sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    bench = _bench(cfg, args.data)
    out = _run_dir(args.out)
    res = pretrain(bench, cfg.model, cfg.pretrain, seed=cfg.seed)
    _write_jsonl(out / "metrics.jsonl", [r.to_json() for r in res.reports])
    digest = save_checkpoint(out / "pretrained.ovcp",
                             Checkpoint("pretrained", res.theta, cfg.model.to_dict(), {"seed": cfg.seed}))
    cfg.dump(out / "config.json")
    print(json.dumps({"pretrained": str(out / "pretrained.ovcp"), "sha256": digest}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    tc_ = cfg.train
    if tc_.mode != "iwr":
        ignored = [k for k in ("C", "R") if f"train.{k}" in cfg.explicit]
        if ignored or tc_.mode == "plain":
            log.warning("mode=%s: interpolation settings %s are ignored", tc_.mode, ignored or ["C", "R"])
    bench = _bench(cfg, args.data)
    clip = _load_model_checkpoint(args.clip, cfg.model).params
    out = _run_dir(args.out)
    resume = None
    if args.resume:
        resume, meta = load_train_state(args.resume, cfg.model)
        if meta.get("config") != cfg.to_dict():
            raise ConfigMismatchError("training state was written with a different run config")
    metrics = out / "metrics.jsonl"
    lines = metrics.read_text().splitlines() if (resume is not None and metrics.exists()) else []
    lines = lines[:resume.step] if resume is not None else []
    res = train(tc_, bench.data.splits["finetune/train"], clip, bench.bank, cfg.model,
                candidates=bench.data.pool_ids("finetune"), resume=resume, stop_after=args.stop_after)
    lines += [r.to_json() for r in res.reports]
    _write_jsonl(metrics, lines)
    cfg.dump(out / "config.json")
    clip_hash = file_digest(args.clip)
    spe = math.ceil(len(bench.data.splits["finetune/train"]) / tc_.batch)
    if res.state.step < total_steps(tc_, spe):
        digest = save_train_state(out / "state.ovcp", res.state, cfg.model,
                                  {"config": cfg.to_dict(), "clip_sha256": clip_hash})
        print(json.dumps({"state": str(out / "state.ovcp"), "step": res.state.step, "sha256": digest}))
        return EXIT_OK
    meta = {"clip_sha256": clip_hash, "steps": res.state.step, "swa_count": res.swa.count}
    h1 = save_checkpoint(out / "finetuned.ovcp", Checkpoint("finetuned", res.theta, cfg.model.to_dict(), meta))
    h2 = save_checkpoint(out / "swa.ovcp", Checkpoint("swa", res.swa_params, cfg.model.to_dict(), meta))
    print(json.dumps({"finetuned": h1, "swa": h2, "steps": res.state.step}, sort_keys=True))
    return EXIT_OK


def cmd_patch(args) -> int:
    lam = args.lam
    if not 0.0 <= lam <= 1.0:
        raise UsageError(f"lambda must lie in [0, 1], got {lam}")
    a = load_checkpoint(args.clip)
    b = load_checkpoint(args.swa)
    a.params.check_compatible(b.params)
    if a.model_config and b.model_config and \
            ModelConfig.from_dict(a.model_config).architecture() != ModelConfig.from_dict(b.model_config).architecture():
        raise IncompatibleParamsError("checkpoints were written for different architectures")
    patched = interpolate(a.params, b.params, lam)
    meta = {"lambda": lam, "clip_sha256": file_digest(args.clip), "end_sha256": file_digest(args.swa)}
    digest = save_checkpoint(args.out, Checkpoint("patched", patched, b.model_config, meta))
    print(json.dumps({"patched": str(args.out), "sha256": digest, **meta}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.protocol not in PROTOCOLS:
        raise UsageError(f"unknown protocol {args.protocol!r}; valid: {', '.join(PROTOCOLS)}")
    cfg = _config(args)
    bench = _bench(cfg, args.data)
    theta = _load_model_checkpoint(args.checkpoint, cfg.model).params
    ev = cfg.eval
    if args.protocol == "sweep":
        if not args.clip:
            raise UsageError("the sweep protocol needs --clip (the pretrained checkpoint)")
        clip = _load_model_checkpoint(args.clip, cfg.model).params
        curve = sweep_lambda(clip, theta, ev.lambda_grid, bench.closeset, bench.zeroshot, cfg.model, bench.bank)
        text = curve.to_csv()
    else:
        if args.protocol == "ep1":
            px, labels, cands = bench.zeroshot
            result = ep1_eval(px, labels, cands, theta, cfg.model, bench.bank, repeats=ev.ep1_repeats,
                              seed=cfg.seed).to_dict()
        elif args.protocol in ("ep2", "closeset"):
            view = bench.zeroshot if args.protocol == "ep2" else bench.closeset
            result = zero_shot_accuracy(*view, theta, cfg.model, bench.bank).to_dict()
        else:
            px, labels, cands = bench.zeroshot
            first = [int(np.flatnonzero(labels == c)[0]) for c in cands]
            emb = embed(px[first], theta, cfg.model)
            text_emb = bench.bank.matrix(cands)
            pairs = [(i, i) for i in range(len(cands))]
            result = {f"R@{n}": retrieval_recall(emb, text_emb, pairs, n) for n in ev.recall_at}
        result = {"protocol": args.protocol, "checkpoint_sha256": file_digest(args.checkpoint), **result}
        text = metrics_json(result) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_check(args) -> int:
    results = run_checks(args.level)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return EXIT_OK if ok else EXIT_INVARIANT


# -- wiring --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tempclip", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="run config JSON (sections model/pretrain/train/data/eval)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config field; repeatable")
        return sp

    sp = with_config(sub.add_parser("gen-data", help="render the synthetic benchmark"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = with_config(sub.add_parser("pretrain", help="train the image model on the photo pool"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_pretrain)

    sp = with_config(sub.add_parser("train", help="fine-tune on videos from a pretrained checkpoint"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--clip", required=True, help="pretrained checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="state.ovcp written by an earlier --stop-after run")
    sp.add_argument("--stop-after", type=int, help="stop after this many total updates and save a state")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("patch", help="interpolate pretrained and fine-tuned weights")
    sp.add_argument("--clip", required=True)
    sp.add_argument("--swa", required=True, help="fine-tuned (usually weight-averaged) checkpoint")
    sp.add_argument("--lam", type=float, required=True, help="weight on the pretrained checkpoint")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_patch)

    sp = with_config(sub.add_parser("eval", help="score a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--protocol", required=True, help=f"one of {', '.join(PROTOCOLS)}")
    sp.add_argument("--clip", help="pretrained checkpoint (sweep only)")
    sp.add_argument("--out", help="also write the metrics here")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("check", help="run the invariant suite")
    sp.add_argument("--level", choices=("fast", "full"), default="fast")
    sp.set_defaults(fn=cmd_check)
    return p


def _thread_limit():
    n = os.environ.get("OVCP_THREADS")
    if not n:
        return None
    try:
        n = int(n)
    except ValueError:
        raise UsageError(f"OVCP_THREADS must be a positive integer, got {n!r}") from None
    if n < 1:
        raise UsageError("OVCP_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.fn(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except (UsageError, ConfigError, ConfigMismatchError, IncompatibleParamsError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
