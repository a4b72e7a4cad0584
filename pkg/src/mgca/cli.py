"""Command-line entry point: ``mgca <command> [--config F] [--seed N] [--out DIR] [--set k=v ...]``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
runtime failures. Errors go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, echo_config, parse_config

log = logging.getLogger("mgca")

USAGE, RUNTIME = 1, 2


class UsageError(Exception):
    pass


def _require(cfg: RunConfig, *keys: str) -> None:
    for key in keys:
        value = getattr(cfg, key)
        if not value:
            raise UsageError(f"config key '{key}' is required for this command")
        if key.endswith(("_file", "_dir")) or key == "checkpoint":
            if not Path(value).exists():
                raise UsageError(f"{key} does not exist: {value}")


def _optional_path(cfg: RunConfig, key: str) -> str | None:
    value = getattr(cfg, key)
    if value and not Path(value).exists():
        raise UsageError(f"{key} does not exist: {value}")
    return value or None


def _load_data(cfg: RunConfig):
    from .pipeline import load_training_data

    _require(cfg, "parallel_file")
    return load_training_data(
        cfg.parallel_file,
        mono_dir=_optional_path(cfg, "mono_dir"),
        dictionary_file=_optional_path(cfg, "dictionary_file"),
        vocab_file=_optional_path(cfg, "vocab_file"),
        heldout_file=_optional_path(cfg, "heldout_file"),
        vocab_size=cfg.vocab_size,
    )


# commands --------------------------------------------------------------------


def cmd_train_vocab(cfg: RunConfig, out: Path) -> int:
    from .sampler import read_mono_dir, read_parallel_tsv
    from .tokenizer import train_vocab

    if not cfg.mono_dir and not cfg.parallel_file:
        raise UsageError("train-vocab needs mono_dir or parallel_file")
    corpus: list[str] = []
    if cfg.mono_dir:
        _require(cfg, "mono_dir")
        corpus += [ln for lines in read_mono_dir(cfg.mono_dir).values() for ln in lines]
    if cfg.parallel_file:
        _require(cfg, "parallel_file")
        rows, _ = read_parallel_tsv(cfg.parallel_file)
        corpus += [x for row in rows for x in row]
    vocab = train_vocab(corpus, cfg.vocab_size)
    path = out / "vocab.txt"
    vocab.save(path)
    print(f"vocabulary: {vocab.size} tokens (target {cfg.vocab_size}) -> {path}")
    return 0


def cmd_mine(cfg: RunConfig, out: Path) -> int:
    from .synonyms import mine_pairs

    _require(cfg, "dictionary_file")
    data = _load_data(cfg)
    pairs = data.parallel.pairs
    counts = []
    examples = []
    for p in pairs:
        found = mine_pairs(p.source, p.target, data.dictionary, source_offset=0, target_offset=0)
        counts.append(len(found))
        if found and len(examples) < cfg.mine_samples:
            examples.append((p, found))
    counts_arr = np.array(counts)
    stats = {
        "sentence_pairs": len(pairs),
        "pairs_with_alignment": int(np.sum(counts_arr > 0)),
        "mined_pairs": int(counts_arr.sum()),
        "mean_pairs_per_sentence": float(counts_arr.mean()),
        "dictionary_entries": len(data.dictionary),
        "dictionary_lines_skipped": data.dictionary.skipped,
    }
    for key, value in stats.items():
        print(f"{key:<26} {value:.4f}" if isinstance(value, float) else f"{key:<26} {value}")
    for p, found in examples:
        print()
        print(f"  {' '.join(p.source.words)}")
        print(f"  {' '.join(p.target.words)}")
        for pair in found:
            print(f"    {pair.source_word} <-> {pair.target_word}")
    (out / "mine_stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_sample_stats(cfg: RunConfig, out: Path) -> int:
    from .sampler import draw_languages, language_sampling_probs, read_mono_dir

    if cfg.language_counts:
        langs = [f"lang{i}" for i in range(len(cfg.language_counts))]
        counts = list(cfg.language_counts)
    else:
        _require(cfg, "mono_dir")
        texts = read_mono_dir(cfg.mono_dir)
        langs, counts = list(texts), [len(v) for v in texts.values()]
    if cfg.stats_draws < 1:
        raise UsageError("stats_draws must be positive")
    probs = language_sampling_probs(counts, cfg.alpha)
    draws = draw_languages(probs, cfg.stats_draws, np.random.default_rng(cfg.seed))
    empirical = np.bincount(draws, minlength=len(probs)) / cfg.stats_draws
    print(f"alpha {cfg.alpha}, {cfg.stats_draws} draws")
    print(f"{'language':<12}{'count':>12}{'analytic':>12}{'empirical':>12}")
    for lang, n, q, e in zip(langs, counts, probs, empirical):
        print(f"{lang:<12}{n:>12}{q:>12.4f}{e:>12.4f}")
    print("analytic " + " / ".join(f"{q:.4f}" for q in probs))
    print("empirical " + " / ".join(f"{e:.4f}" for e in empirical))
    print(f"L1 distance {np.abs(probs - empirical).sum():.4f}")
    table = {"languages": langs, "counts": counts, "analytic": probs.tolist(),
             "empirical": empirical.tolist()}
    (out / "sample_stats.json").write_text(json.dumps(table, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_pretrain(cfg: RunConfig, out: Path) -> int:
    from .pipeline import build_state
    from .trainer import load_checkpoint, restore_state, train

    data = _load_data(cfg)
    data.vocab.save(out / "vocab.txt")
    state = build_state(data, cfg.model_config(data.vocab.size), cfg.sampler_config(),
                        cfg.train_config(), cfg.loss_config())
    mode = "w"
    if cfg.checkpoint:
        _require(cfg, "checkpoint")
        restore_state(load_checkpoint(cfg.checkpoint), state)
        mode = "a"
        # drop records past the checkpoint so the resumed run does not repeat steps
        metrics_path = out / "metrics.jsonl"
        if metrics_path.exists():
            kept = [ln for ln in metrics_path.read_text(encoding="utf-8").splitlines(keepends=True)
                    if ln.strip() and json.loads(ln)["step"] <= state.step]
            metrics_path.write_text("".join(kept), encoding="utf-8", newline="\n")
        print(f"resumed from {cfg.checkpoint} at step {state.step}")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    print(f"model: {state.model.num_parameters()} parameters, vocab {data.vocab.size}")
    with open(out / "metrics.jsonl", mode, encoding="utf-8", newline="\n") as metrics:
        records = train(state, metrics=metrics, checkpoint_dir=ckpt_dir)
    if records:
        last = records[-1]
        print(f"step {last['step']}: total loss {last['total']:.4f}")
    print(f"checkpoints in {ckpt_dir}")
    return 0


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    from .evaluation import RetrievalSet, retrieval_accuracy, synonym_alignment_accuracy, synonym_items
    from .model import Model
    from .sampler import ParallelCorpus, read_parallel_tsv
    from .synonyms import load_dictionary
    from .tensor import Tensor
    from .tokenizer import Vocab
    from .trainer import configs_from_checkpoint, load_checkpoint

    _require(cfg, "checkpoint", "heldout_file")
    _optional_path(cfg, "dictionary_file")
    vocab_path = cfg.vocab_file or str(Path(cfg.checkpoint).resolve().parent.parent / "vocab.txt")
    if not Path(vocab_path).exists():
        raise UsageError(f"vocab file not found: {vocab_path}")
    ckpt = load_checkpoint(cfg.checkpoint)
    vocab = Vocab.load(vocab_path)
    model_config = configs_from_checkpoint(ckpt)[0]
    if model_config.vocab_size != vocab.size:
        raise UsageError(f"vocabulary has {vocab.size} tokens, checkpoint expects "
                         f"{model_config.vocab_size}")
    model = Model(model_config, {k: Tensor(v, requires_grad=True) for k, v in ckpt.params.items()})
    rows, tag = read_parallel_tsv(cfg.heldout_file)
    heldout = ParallelCorpus.from_text(vocab, rows, tag).pairs
    results = {"step": ckpt.step, "retrieval_acc": retrieval_accuracy(model, RetrievalSet(heldout))}
    if cfg.dictionary_file:
        items = synonym_items(heldout, load_dictionary(cfg.dictionary_file))
        results["synonym_items"] = len(items)
        results["synonym_acc"] = synonym_alignment_accuracy(model, items)
    for key, value in results.items():
        print(f"{key:<16} {value:.4f}" if isinstance(value, float) else f"{key:<16} {value}")
    (out / "eval.json").write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    from .evaluation import AblationSpec, run_ablation, save_report
    from .pipeline import prepare_cipher_data
    from .toy import make_cipher_corpus

    if cfg.parallel_file:
        _require(cfg, "heldout_file", "dictionary_file")
        data = _load_data(cfg)
    else:
        print("no parallel_file given: using the built-in cipher corpus")
        data = prepare_cipher_data(make_cipher_corpus(seed=cfg.seed), cfg.vocab_size)
    if len(data.heldout) < 2:
        raise UsageError("ablation needs at least two held-out pairs")
    if not cfg.ablation_seeds:
        raise UsageError("ablation_seeds is empty")
    spec = AblationSpec(data, cfg.model_config(data.vocab.size), cfg.sampler_config(),
                        cfg.train_config(), cfg.loss_config(), cfg.ablation_steps)
    report = run_ablation(spec, cfg.ablation_seeds)
    print(report.format_table())
    save_report(report, out / "ablation.json")
    failed = [r for r in report.runs if r.failed]
    if failed:
        print(f"{len(failed)} run(s) diverged; see ablation.json", file=sys.stderr)
        return RUNTIME
    return 0


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    from .checks import run_all

    results = run_all(cfg.seed)
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<28} rel err {r.error:.3e} (tol {r.tolerance:.0e})")
    worst = max(results, key=lambda r: r.error / r.tolerance)
    print(f"max relative error {max(r.error for r in results):.3e} (worst vs tolerance: {worst.name})")
    (out / "gradcheck.json").write_text(
        json.dumps([{"name": r.name, "error": r.error, "tolerance": r.tolerance} for r in results],
                   indent=2) + "\n", encoding="utf-8")
    if not all(r.ok for r in results):
        print("gradient check failed", file=sys.stderr)
        return RUNTIME
    return 0


def cmd_make_cipher(cfg: RunConfig, out: Path) -> int:
    from .toy import make_cipher_corpus

    paths = make_cipher_corpus(seed=cfg.seed).write(out / "data")
    for key, path in paths.items():
        print(f"{key:<12} {path}")
    return 0


COMMANDS = {
    "train-vocab": (cmd_train_vocab, "train a subword vocabulary and write vocab.txt"),
    "mine": (cmd_mine, "print synonym-pair statistics and sample alignments"),
    "sample-stats": (cmd_sample_stats, "compare analytic and empirical language sampling"),
    "pretrain": (cmd_pretrain, "train a model, writing metrics.jsonl and checkpoints"),
    "eval": (cmd_eval, "retrieval and synonym-alignment accuracy of a checkpoint"),
    "ablate": (cmd_ablate, "run the objective ablation and write ablation.json"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient self-check"),
    "make-cipher": (cmd_make_cipher, "write the synthetic cipher corpus to <out>/data"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgca", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--seed", type=int, help="overrides the seed key")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _parse_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        threads = os.environ.get("MGCA_THREADS")
        if threads is not None and (not threads.isdigit() or int(threads) < 1):
            raise ConfigError(f"MGCA_THREADS must be a positive integer, got {threads!r}")
        cfg = parse_config(args.config, _parse_sets(args.set),
                           {"seed": args.seed, "output_dir": args.out})
        out = Path(cfg.output_dir)
        echo_config(cfg, out)
        handler = COMMANDS[args.command][0]
        return handler(cfg, out)
    except (ConfigError, UsageError, json.JSONDecodeError) as exc:
        print(f"mgca {args.command}: {exc}", file=sys.stderr)
        return USAGE
    except FileNotFoundError as exc:
        print(f"mgca {args.command}: {exc}", file=sys.stderr)
        return USAGE
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 2
        if args.verbose:
            log.exception("command failed")
        print(f"mgca {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME


if __name__ == "__main__":
    sys.exit(main())
