"""``costt`` command line: gen-data, pretrain-mt, train, decode, evaluate.

Exit codes: 0 success, 2 bad input or configuration, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import checkpoint
from .config import ConfigError, RunConfig
from .corpus import (
    CorpusError,
    Quadruple,
    Vocabulary,
    build_vocab,
    load_manifest,
    save_manifest,
    synth_generate,
)
from .model import CosttModel
from .pipeline import decode_corpus, evaluate, reference_records
from .train import (
    STAGES_PRETRAIN,
    NumericalError,
    TrainingError,
    train_from_scratch,
    train_with_pretrain,
)

log = logging.getLogger("costt")

RUN_CONFIG = "run.cfg"
VOCAB = "vocab.txt"


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _manifest(path: Path) -> list:
    if not path.is_file():
        raise UsageError(f"missing corpus file {path}")
    return load_manifest(path)


def _model_config(cfg: RunConfig, vocab: Vocabulary):
    d_feat = cfg.data.d_feat
    return dataclasses.replace(cfg.model, vocab_size=vocab.size, d_input=d_feat * (cfg.train.right_context + 1))


def _write_jsonl(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")


def _read_jsonl(path: Path) -> list[dict]:
    if not path.is_file():
        raise UsageError(f"missing file {path}")
    out = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise UsageError(f"{path}:{n}: {e.msg}") from None
    return out


# -- commands ----------------------------------------------------------------
def cmd_gen_data(args) -> None:
    cfg = _config(args)
    out = Path(args.out or cfg.paths.corpus_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = synth_generate(cfg.data)
    splits = {"train": corpus.train, "dev": corpus.dev, "test": corpus.test, "text": corpus.text}
    for name, records in splits.items():
        save_manifest(records, out / f"{name}.manifest")
    build_vocab(splits.values()).save(out / VOCAB)
    cfg.save(out / RUN_CONFIG)
    log.info("wrote %s", ", ".join(f"{k}={len(v)}" for k, v in splits.items()))


def _progress(rec: dict) -> None:
    if rec["step"] % 100 == 0:
        log.info("%s step %d  L_AS %.4f  L_TT %.4f  L %.4f", rec["stage"], rec["step"], rec["l_as"], rec["l_tt"],
                 rec["loss"])


def _train(args, stages) -> None:
    cfg = _config(args)
    data = Path(args.data or cfg.paths.corpus_dir)
    out = Path(args.out or cfg.paths.checkpoint_dir)
    vocab_path = data / VOCAB
    if not vocab_path.is_file():
        raise UsageError(f"missing vocabulary {vocab_path}; run gen-data first")
    vocab = Vocabulary.load(vocab_path)
    train = _manifest(data / "train.manifest")
    dev = _manifest(data / "dev.manifest")
    model = CosttModel(_model_config(cfg, vocab), seed=cfg.seed)
    resume = None
    if args.checkpoint:
        ck = Path(args.checkpoint)
        if ck.name == "train_state.ckpt":
            resume = ck
        else:
            # weights from an earlier run (typically pretrain-mt); continue with the remaining stages
            model.load_state_dict(checkpoint.load(ck))
            stages = tuple(s for s in stages if s != "condec") or stages
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / RUN_CONFIG)
    vocab.save(out / VOCAB)
    if stages == ("scratch",):
        train_from_scratch(model, vocab, train, cfg.train, dev, out_dir=out, resume=resume, on_step=_progress)
    else:
        text = _manifest(data / "text.manifest") if "condec" in stages else []
        train_with_pretrain(model, vocab, train, text, cfg.train, dev, out_dir=out, resume=resume,
                            on_step=_progress, stages=stages)
    log.info("wrote %s", out / "final.ckpt")


def cmd_pretrain_mt(args) -> None:
    _train(args, ("condec",))


def cmd_train(args) -> None:
    _train(args, ("scratch",) if args.mode == "scratch" else STAGES_PRETRAIN)


def _load_model(args) -> tuple[RunConfig, Vocabulary, CosttModel]:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    ck = Path(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ck.parent / RUN_CONFIG
    cfg = RunConfig.load(cfg_path)
    vocab_path = Path(args.vocab) if args.vocab else ck.parent / VOCAB
    if not vocab_path.is_file():
        raise UsageError(f"missing vocabulary {vocab_path}")
    vocab = Vocabulary.load(vocab_path)
    model = CosttModel(_model_config(cfg, vocab))
    try:
        model.load_state_dict(checkpoint.load(ck))
    except (KeyError, ValueError) as e:
        raise UsageError(f"checkpoint {ck} does not match the vocabulary/config: {e}") from None
    return cfg, vocab, model


def cmd_decode(args) -> None:
    cfg, vocab, model = _load_model(args)
    if not args.input:
        raise UsageError("--input is required")
    records = _manifest(Path(args.input))
    if records and not isinstance(records[0], Quadruple):
        raise UsageError(f"{args.input} is a text manifest; decoding needs speech features")
    hyps = decode_corpus(model, vocab, records, right_context=cfg.train.right_context)
    bad = sum(h["st_count"] != 1 for h in hyps)
    if bad:
        log.warning("%d of %d decodes do not contain exactly one <st>", bad, len(hyps))
    out = Path(args.out) if args.out else Path(args.input).with_suffix(".hyp.jsonl")
    _write_jsonl(out, hyps)
    log.info("wrote %d hypotheses to %s", len(hyps), out)


def _references(path: Path) -> list[dict]:
    if not path.is_file():
        raise UsageError(f"missing file {path}")
    with path.open(encoding="utf-8") as fh:
        first = fh.readline()
    if '"costt-manifest"' in first:
        records = load_manifest(path)
        if records and isinstance(records[0], Quadruple):
            return reference_records(records)
        return [{"id": r.id, "text": " ".join(r.translation), "transcript": " ".join(r.transcript)} for r in records]
    return _read_jsonl(path)


def cmd_evaluate(args) -> None:
    hyps = _read_jsonl(Path(args.hyp))
    if not hyps:
        raise UsageError(f"{args.hyp} holds no hypotheses")
    refs = _references(Path(args.ref))
    try:
        report = evaluate(hyps, refs)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out) if args.out else Path(args.hyp).with_suffix(".report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.table())


# -- entry point -------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="costt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="key=value run configuration")
        sp.add_argument("--seed", type=int, help="root seed (overrides the config)")
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("gen-data", help="generate the synthetic corpora and vocabulary")
    common(sp, "corpus directory (default paths.corpus_dir)")
    sp.set_defaults(func=cmd_gen_data)

    for name, func, hlp in (("pretrain-mt", cmd_pretrain_mt, "pretrain the decoder on text pairs"),
                            ("train", cmd_train, "train the speech translation model")):
        sp = sub.add_parser(name, help=hlp)
        common(sp, "checkpoint directory (default paths.checkpoint_dir)")
        sp.add_argument("--data", help="corpus directory (default paths.corpus_dir)")
        sp.add_argument("--checkpoint", help="train_state.ckpt to resume, or model weights to start from")
        if name == "train":
            sp.add_argument("--mode", choices=("scratch", "pretrained"), default="scratch")
        sp.set_defaults(func=func)

    sp = sub.add_parser("decode", help="greedy consecutive decoding of a speech manifest")
    common(sp, "hypotheses file (default <input>.hyp.jsonl)")
    sp.add_argument("--checkpoint", help="model weights")
    sp.add_argument("--vocab", help="vocabulary (default next to the checkpoint)")
    sp.add_argument("--input", help="speech manifest")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("evaluate", help="score hypotheses against references")
    sp.add_argument("--hyp", required=True, help="hypotheses jsonl")
    sp.add_argument("--ref", required=True, help="reference jsonl or manifest")
    sp.add_argument("--out", help="report file (default <hyp>.report.json)")
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        args.func(args)
    except NumericalError as e:
        log.error("numerical failure: %s", e)
        return 3
    except (UsageError, ConfigError, CorpusError, checkpoint.CheckpointError, TrainingError, OSError) as e:
        log.error("error: %s", e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
