"""Command-line harness: data generation, baseline training, adaptation, evaluation.

Every command prints ``key=value`` lines that are easy to grep; commands
producing tables print a human-readable table after them.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import adapt as ad
from .data import (
    ParallelCorpus,
    SyntheticTaskConfig,
    Vocabulary,
    generate_synthetic,
    load_lines,
    load_parallel,
)
from .errors import CompatibilityError, ConfigError, DataError, FormatError, LengthError
from .metrics import bleu, repetition_rate
from .model import REGIONS, ModelConfig, batch_loss, make_batch, param_count, translate
from .persistence import load_checkpoint, load_offsets, save_checkpoint, save_offsets
from .train import train_baseline

log = logging.getLogger("compact_nmt")

SPLITS = ("baseline", "heldout", "adapt", "test")


class UsageError(Exception):
    pass


def _kv(**items) -> None:
    print(" ".join(f"{k}={_fmt(v)}" for k, v in items.items()))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _vocabs(args) -> tuple[Vocabulary, Vocabulary]:
    d = Path(args.vocab_dir)
    return Vocabulary.load(d / "src.vocab"), Vocabulary.load(d / "tgt.vocab")


def _corpus(prefix: str, vocabs) -> ParallelCorpus:
    return load_parallel(f"{prefix}.src", f"{prefix}.tgt", *vocabs)


def _write_lines(path: str, seqs, vocab: Vocabulary) -> None:
    Path(path).write_text("".join(vocab.decode(s) + "\n" for s in seqs), encoding="utf-8")


def _baseline(args):
    ckpt = load_checkpoint(args.checkpoint)
    params = ckpt.params
    offsets = None
    if getattr(args, "offsets", None):
        offsets = load_offsets(args.offsets, expected_checksum=ckpt.checksum)
        params = ad.compose(ckpt.params, offsets, ckpt.checksum)
    return ckpt, params, offsets


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = SyntheticTaskConfig(
        vocab=args.vocab, min_len=args.min_len, max_len=args.max_len,
        n_baseline=args.n_baseline, n_heldout=args.n_heldout, n_adapt=args.n_adapt,
        n_test=args.n_test, shift=args.shift, repeat=args.repeat, seed=args.seed)
    task = generate_synthetic(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task.src_vocab.save(out / "src.vocab")
    task.tgt_vocab.save(out / "tgt.vocab")
    for split in SPLITS:
        getattr(task, split).write(out / f"{split}.src", out / f"{split}.tgt")
        _kv(split=split, segments=len(getattr(task, split)))
    _kv(out=out, vocab=cfg.vocab, shifted_tokens=cfg.shifted_count, seed=cfg.seed)
    return 0


def cmd_train_baseline(args) -> int:
    vocabs = _vocabs(args)
    corpus = _corpus(args.corpus, vocabs)
    config = ModelConfig(
        src_vocab=len(vocabs[0]), tgt_vocab=len(vocabs[1]), d_model=args.d_model,
        enc_layers=args.enc_layers, dec_layers=args.dec_layers, enc_filter=args.enc_filter,
        heads=args.heads, max_len=args.max_len, dropout=args.dropout)
    params = train_baseline(
        corpus, config, epochs=args.epochs, lr=args.lr, batch_tokens=args.batch_tokens,
        eps_ls=args.label_smoothing, seed=args.seed,
        callback=lambda e, loss: _kv(epoch=e, loss=loss))
    checksum = save_checkpoint(args.out, params, config)
    _kv(out=args.out, params=param_count(config).total, checksum=checksum.hex())
    return 0


def _adapt_config(args, mode: str) -> ad.AdaptationConfig:
    fixed = None
    if args.method == "fixed":
        if not args.fixed_from:
            raise UsageError("--method fixed needs --fixed-from OFFSETS")
        fixed = ad.select_fixed_tensors(load_offsets(args.fixed_from), args.fixed_threshold)
    overrides = {"seed": args.seed}
    if mode == "batch":
        for key in ("lr", "epochs", "batch_tokens", "dropout"):
            if getattr(args, key) is not None:
                overrides[key] = getattr(args, key)
        if args.label_smoothing is not None:
            overrides["eps_ls"] = args.label_smoothing
    else:
        if args.incr_lr is not None:
            overrides["lr"] = args.incr_lr
        overrides["max_updates_per_segment"] = args.max_updates
        overrides["ppl_stop"] = args.ppl_stop
    return ad.method_config(args.method, mode, fixed_tensors=fixed,
                            lam=args.lam, theta=args.theta, **overrides)


def cmd_adapt(args) -> int:
    vocabs = _vocabs(args)
    ckpt = load_checkpoint(args.checkpoint)
    config, base = ckpt.config, ckpt.params
    offsets = ad.OffsetSet({}, ckpt.checksum)
    if args.init_offsets:
        offsets = load_offsets(args.init_offsets, expected_checksum=ckpt.checksum)
    if args.mode in ("batch", "combined"):
        if not args.adapt:
            raise UsageError(f"--mode {args.mode} needs --adapt PREFIX")
        cfg = _adapt_config(args, "batch")
        offsets = ad.batch_adapt(base, _corpus(args.adapt, vocabs), cfg, config, offsets,
                                 callback=lambda e, loss: _kv(epoch=e, loss=loss))
    if args.mode in ("incremental", "combined"):
        if not args.test:
            raise UsageError(f"--mode {args.mode} needs --test PREFIX")
        test = _corpus(args.test, vocabs)
        cfg = _adapt_config(args, "incremental")
        result = ad.incremental_adapt(base, offsets, test, cfg, config)
        offsets = result.offsets
        score = bleu(result.translations, test.targets)
        updates = sum(s.updates for s in result.stats)
        _kv(incremental_bleu=score.score, segments=len(test), updates=updates)
        if args.translations_out:
            _write_lines(args.translations_out, result.translations, vocabs[1])
    size = save_offsets(args.out, offsets, ckpt.checksum)
    count = ad.offset_param_count(offsets, config)
    _kv(method=args.method, mode=args.mode, stored_params=count.total,
        nonzero_tensors=len(offsets.nonzero()), file_bytes=size, out=args.out)
    return 0


def cmd_translate(args) -> int:
    vocabs = _vocabs(args)
    ckpt, params, _ = _baseline(args)
    sources = load_lines(args.input, vocabs[0])
    if any(len(s) == 0 for s in sources):
        raise DataError("empty source line")
    hyps = translate(sources, params, ckpt.config, max_steps=args.max_steps)
    if args.output:
        _write_lines(args.output, hyps, vocabs[1])
    else:
        for h in hyps:
            print(vocabs[1].decode(h))
    _kv(segments=len(hyps), offsets=args.offsets or "none")
    return 0


def _read_tokens(path: str) -> list[list[str]]:
    return [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines()]


def cmd_evaluate(args) -> int:
    if args.metric == "bleu":
        if not (args.hyp and args.ref):
            raise UsageError("--metric bleu needs --hyp and --ref")
        report = bleu(_read_tokens(args.hyp), _read_tokens(args.ref))
        _kv(metric="bleu", score=report.score, bp=report.brevity_penalty,
            hyp_len=report.hyp_len, ref_len=report.ref_len,
            **{f"p{n + 1}": p for n, p in enumerate(report.precisions)})
        print(report)
    elif args.metric == "rr":
        if not args.text:
            raise UsageError("--metric rr needs --text")
        tokens = [t for line in _read_tokens(args.text) for t in line]
        report = repetition_rate(tokens, args.window)
        _kv(metric="rr", rate=report.rate, window=report.window,
            **{f"r{n + 1}": r for n, r in enumerate(report.ratios)})
    else:
        if not (args.checkpoint and args.corpus):
            raise UsageError("--metric ppl needs --checkpoint and --corpus")
        vocabs = _vocabs(args)
        ckpt, params, _ = _baseline(args)
        corpus = _corpus(args.corpus, vocabs)
        loss, _ = batch_loss(make_batch((s.source, s.target) for s in corpus),
                             params, ckpt.config)
        _kv(metric="ppl", perplexity=math.exp(loss.item()), segments=len(corpus))
    return 0


def cmd_report_params(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config = ckpt.config
    total = param_count(config).total
    test = vocabs = None
    if args.test:
        if not args.vocab_dir:
            raise UsageError("--test needs --vocab-dir")
        vocabs = _vocabs(args)
        test = _corpus(args.test, vocabs)
    rows = []

    def score(params) -> float | None:
        if test is None:
            return None
        return bleu(translate(test.sources, params, config), test.targets).score

    rows.append(("baseline", total, None, score(ckpt.params)))
    for item in args.offsets or []:
        label, _, path = item.partition("=")
        if not path:
            raise UsageError(f"--offsets expects LABEL=PATH, got {item!r}")
        offsets = load_offsets(path, expected_checksum=ckpt.checksum)
        count = ad.offset_param_count(offsets, config)
        rows.append((label, count.total, count.per_region,
                     score(ad.compose(ckpt.params, offsets, ckpt.checksum))))
    for label, stored, regions, b in rows:
        extra = {} if regions is None else {k.replace("-", "_"): v for k, v in regions.items()}
        _kv(label=label, stored_params=stored, **({"bleu": b} if b is not None else {}), **extra)
    print()
    print(f"{'method':<24}{'# param':>12}{'% of model':>12}{'BLEU':>8}")
    for label, stored, _, b in rows:
        bs = "-" if b is None else f"{b:.1f}"
        print(f"{label:<24}{stored:>12,}{100.0 * stored / total:>11.1f}%{bs:>8}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="compact-nmt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic domain-shift task")
    g.add_argument("--out", required=True)
    g.add_argument("--vocab", type=int, default=120)
    g.add_argument("--min-len", type=int, default=4)
    g.add_argument("--max-len", type=int, default=12)
    g.add_argument("--n-baseline", type=int, default=20_000)
    g.add_argument("--n-heldout", type=int, default=500)
    g.add_argument("--n-adapt", type=int, default=2_000)
    g.add_argument("--n-test", type=int, default=500)
    g.add_argument("--shift", type=float, default=0.3)
    g.add_argument("--repeat", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-baseline", help="train the shared baseline with Adam")
    t.add_argument("--vocab-dir", required=True)
    t.add_argument("--corpus", required=True, help="prefix of PREFIX.src / PREFIX.tgt")
    t.add_argument("--out", required=True)
    t.add_argument("--d-model", type=int, default=64)
    t.add_argument("--enc-layers", type=int, default=2)
    t.add_argument("--dec-layers", type=int, default=1)
    t.add_argument("--enc-filter", type=int, default=128)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--max-len", type=int, default=32)
    t.add_argument("--dropout", type=float, default=0.1)
    t.add_argument("--epochs", type=int, default=16)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--batch-tokens", type=int, default=4000)
    t.add_argument("--label-smoothing", type=float, default=0.1)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train_baseline)

    a = sub.add_parser("adapt", help="fine-tune offsets and write an offset file")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--vocab-dir", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--mode", choices=("batch", "incremental", "combined"), default="batch")
    a.add_argument("--method", default="full",
                   help="full | sparse-output | fixed | lasso | region:<"
                        + "|".join(REGIONS) + ">")
    a.add_argument("--adapt", help="prefix of the batch adaptation corpus")
    a.add_argument("--test", help="prefix of the incremental test corpus")
    a.add_argument("--init-offsets")
    a.add_argument("--lambda", dest="lam", type=float, default=1e-6)
    a.add_argument("--theta", type=float, default=1e-4)
    a.add_argument("--fixed-from", help="offsets from a development domain")
    a.add_argument("--fixed-threshold", type=float, default=0.002)
    a.add_argument("--lr", type=float)
    a.add_argument("--epochs", type=int)
    a.add_argument("--batch-tokens", type=int)
    a.add_argument("--dropout", type=float)
    a.add_argument("--label-smoothing", type=float)
    a.add_argument("--incr-lr", type=float)
    a.add_argument("--max-updates", type=int, default=3)
    a.add_argument("--ppl-stop", type=float, default=1.5)
    a.add_argument("--translations-out")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_adapt)

    tr = sub.add_parser("translate", help="greedy-decode a source file")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--vocab-dir", required=True)
    tr.add_argument("--offsets")
    tr.add_argument("--input", required=True)
    tr.add_argument("--output")
    tr.add_argument("--max-steps", type=int)
    tr.add_argument("--seed", type=int, default=0)
    tr.set_defaults(func=cmd_translate)

    e = sub.add_parser("evaluate", help="BLEU, repetition rate or perplexity")
    e.add_argument("--metric", choices=("bleu", "rr", "ppl"), required=True)
    e.add_argument("--hyp")
    e.add_argument("--ref")
    e.add_argument("--text")
    e.add_argument("--window", type=int, default=1000)
    e.add_argument("--checkpoint")
    e.add_argument("--offsets")
    e.add_argument("--vocab-dir")
    e.add_argument("--corpus")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report-params", help="stored-parameter / BLEU table per method")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--offsets", action="append", metavar="LABEL=PATH")
    r.add_argument("--vocab-dir")
    r.add_argument("--test")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_report_params)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return 2
    except (DataError, ConfigError, FormatError, CompatibilityError, LengthError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
