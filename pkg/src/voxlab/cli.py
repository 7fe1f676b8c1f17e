"""Command-line surface: corpus generation, pre-training, the staged
schedule, alignment labelling, inference, score judging, and selftest.

Every command is driven by a config plus a seed, so rerunning with the
same inputs reproduces the same artifacts byte for byte.
"""

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from . import config as config_mod
from . import corpus, dsp, phonemes, stats, training

SUMMARY_HEADER = ["mean_cmos", "p_value", "judges", "utterances"]


def _resolve_config(args):
    """Config from --config (or the desk default) with overrides applied."""
    if getattr(args, "config", None):
        cfg = config_mod.load_config(args.config)
    else:
        cfg = config_mod.desk()
    if getattr(args, "override", None):
        cfg = config_mod.apply_overrides(cfg, args.override)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


# -- commands -----------------------------------------------------------------


def cmd_gen_corpus(args):
    cfg = _resolve_config(args)
    spec = corpus.SynthSpec(seed=cfg.seed, sample_rate=cfg.sample_rate,
                            hop=cfg.hop, n_utterances=args.utterances)
    manifest = corpus.generate_corpus(spec, args.out)
    print(f"wrote {len(manifest['files'])} files for "
          f"{spec.n_utterances} utterances to {args.out}")
    return 0


def cmd_pretrain(args):
    cfg = _resolve_config(args)
    sentences = corpus.pretrain_corpus(args.sentences, cfg.seed)
    vocab = phonemes.learn_sup_phonemes(sentences, cfg.sup_vocab)
    rng = np.random.default_rng(cfg.seed)
    encoder = phonemes.PhonemeEncoder(
        vocab.base_size, vocab.total_size, cfg.hidden, cfg.enc_heads,
        cfg.enc_blocks, cfg.enc_kernel, cfg.enc_filter, cfg.max_phonemes, rng)
    model = phonemes.PretrainModel(encoder, vocab.base_size + 1,
                                   vocab.total_size + 1, rng)
    before = phonemes.masked_accuracy(model, sentences, vocab, trials=50,
                                      seed=cfg.seed + 1)
    losses = phonemes.pretrain(model, sentences, vocab, steps=args.steps,
                               seed=cfg.seed, dropout=cfg.enc_dropout,
                               batch_size=cfg.batch_size)
    after = phonemes.masked_accuracy(model, sentences, vocab, trials=50,
                                     seed=cfg.seed + 1)
    os.makedirs(args.out, exist_ok=True)
    from . import checkpoint
    checkpoint.save_checkpoint(model, os.path.join(args.out, "pretrain.ckpt"))
    vocab.save(os.path.join(args.out, training.VOCAB_FILE))
    config_mod.save_config(cfg, os.path.join(args.out, training.CONFIG_FILE))
    print(f"pretrained {args.steps} steps on {args.sentences} sentences: "
          f"loss {losses[0]:.3f} -> {losses[-1]:.3f}, "
          f"masked accuracy {before:.3f} -> {after:.3f}")
    return 0


def cmd_train(args):
    cfg = _resolve_config(args)
    _, utterances = corpus.load_synth_corpus(args.data)

    def progress(row):
        print(f"epoch {row['epoch']:3d} {row['stage']:7s} "
              f"total {row['total']:9.3f} mas {row['mas_acc']:.4f} "
              f"heldout_mel {row['heldout_mel']:.4f}", flush=True)

    training.train(cfg, utterances, out_dir=args.out, progress=progress)
    print(f"artifacts in {args.out}")
    return 0


def cmd_align(args):
    cfg = _resolve_config(args)
    _, utterances = corpus.load_synth_corpus(args.data)
    accuracy, labels = training.align_corpus(cfg, utterances)
    os.makedirs(args.out, exist_ok=True)
    for i, lab in enumerate(labels):
        path = os.path.join(args.out, f"utt_{i:04d}.labels")
        with open(path, "w") as fh:
            fh.write(" ".join(str(int(d)) for d in lab) + "\n")
    print(f"labelled {len(labels)} utterances; "
          f"{accuracy:.4f} of phonemes within one frame of ground truth")
    return 0


def _parse_phonemes(text):
    if os.path.exists(text):
        with open(text) as fh:
            text = fh.read()
    ids = [int(t) for t in text.replace(",", " ").split()]
    if not ids:
        raise ValueError("no phoneme ids given")
    return ids


def cmd_infer(args):
    state = training.load_state(args.run)
    if getattr(args, "override", None):
        state.cfg = config_mod.apply_overrides(state.cfg, args.override)
    ids = _parse_phonemes(args.phonemes)
    seed = args.seed if args.seed is not None else state.cfg.seed
    result = training.infer(ids, state, seed=seed)
    os.makedirs(args.out, exist_ok=True)
    wav = os.path.join(args.out, "infer.wav")
    dsp.save_wav(wav, result.wave, state.cfg.sample_rate)
    print(f"wrote {wav}: {len(result.wave)} samples, "
          f"durations {' '.join(str(d) for d in result.durations)}")
    return 0


def cmd_judge(args):
    with open(args.scores, newline="") as fh:
        header = next(csv.reader(fh), None)
    if header == stats.CSV_HEADER:
        table = stats.CmosTable.from_csv(args.scores)
        print(stats.judge_human_level(table).format_report())
        return 0
    if header == SUMMARY_HEADER:
        with open(args.scores, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            rows = [(float(c), float(p), int(j), int(u))
                    for c, p, j, u in reader]
        if not rows:
            raise ValueError("no summary rows to judge")
        for mean_cmos, p_value, judges, utterances in rows:
            passed, reason = stats.verdict(mean_cmos, p_value, judges,
                                           utterances)
            print(f"mean CMOS {mean_cmos:+.4f}, p {p_value:.4g} "
                  f"({judges} judges, {utterances} utterances; from input): "
                  f"{'PASS' if passed else 'FAIL'}: {reason}")
        return 0
    raise ValueError(
        f"unrecognised header {header}: expected {','.join(stats.CSV_HEADER)}"
        f" for raw scores or {','.join(SUMMARY_HEADER)} for summaries")


def cmd_selftest(args):
    from . import checks
    results = checks.run_all(verbose=True)
    failed = [r for r in results if not r.ok]
    print(checks.format_table(results))
    return 1 if failed else 0


# -- argument plumbing --------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file to start from")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="config override, repeatable")

    parser = argparse.ArgumentParser(
        prog="voxlab",
        description="desk-scale text-to-waveform synthesis lab")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    p = sub.add_parser("gen-corpus", parents=[common],
                       help="write a synthetic corpus")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--utterances", type=int, default=300)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain", parents=[common],
                       help="masked pre-training of the phoneme encoder")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--sentences", type=int, default=200)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common],
                       help="run the staged training schedule")
    p.add_argument("data", help="corpus directory from gen-corpus")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("align", parents=[common],
                       help="estimate per-phoneme frame counts")
    p.add_argument("data", help="corpus directory from gen-corpus")
    p.add_argument("--out", required=True, help="label directory")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("infer", parents=[common],
                       help="synthesise a waveform from phoneme ids")
    p.add_argument("run", help="run directory from train")
    p.add_argument("phonemes",
                   help="phoneme ids ('3 14 7') or a .phonemes file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("judge", parents=[common],
                       help="human-level judgment on a score table")
    p.add_argument("scores", help="CSV of raw paired scores or summaries")
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("selftest", parents=[common],
                       help="run the oracle suites")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
