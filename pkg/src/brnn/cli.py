"""Command-line interface: ``brnn train | eval | entropy-gap | prune | sample``.

Exit codes: 0 on success, 2 for usage, configuration, data or vocabulary
problems, 3 when training diverges beyond its skip budget.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as tn
from .config import RunConfig, load_config, parse_config
from .data import (Vocab, bundled_text_path, build_vocab, epoch_layout, grammar_corpus,
                   load_ptb, make_cuts, read_text, split_tokens, tokenize)
from .errors import BrnnError, ConfigError, DataError, FormatError, NumericError, StorageError
from .evaluation import entropy_gap, perplexity, unigram_entropy
from .lstm import LstmConfig, detach_state, lstm_step, param_shapes, project, zero_state
from .model import BayesianLSTM, SharpeningConfig
from .pruning import DEFAULT_FRACTIONS, export_masks, prune, prune_sweep, sweep_table
from .rng import RandomSource
from .trainer import TrainConfig, TrainState, run_epoch
from .variational import MixturePrior

log = logging.getLogger("brnn")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


# ---------------------------------------------------------------------------
# wiring config -> library objects


def corpus_tokens(cfg: RunConfig) -> dict[str, list[str]]:
    """Train/valid/test token lists for the configured data source."""
    source = cfg["data.source"]
    if source == "grammar":
        return grammar_corpus(cfg["data.grammar_tokens"], cfg["data.grammar_seed"])
    if source == "ptb":
        if not cfg["data.path"]:
            raise ConfigError("data.path must name the PTB directory")
        return load_ptb(cfg["data.path"])
    path = bundled_text_path() if source == "bundled" else cfg["data.path"]
    if not path:
        raise ConfigError("data.path must name a text file")
    tokens = tokenize(read_text(path), cfg["model.vocab_mode"])
    return split_tokens(tokens, cfg["data.valid_frac"], cfg["data.test_frac"])


def train_config(cfg: RunConfig, B: int, C: int) -> TrainConfig:
    return TrainConfig(
        B=B, C=C, T=cfg["trainer.T"], batch_size=cfg["trainer.batch_size"],
        learning_rate=cfg["trainer.lr"], lr_decay=cfg["trainer.lr_decay"],
        decay_after=cfg["trainer.decay_after"], clip_norm=cfg["trainer.clip"],
        prior=MixturePrior.from_log_sigmas(cfg["prior.pi"], cfg["prior.log_sigma1"],
                                           cfg["prior.log_sigma2"]),
        seed=cfg["trainer.seed"], kl_enabled=cfg["trainer.kl_enabled"],
        deterministic=cfg["trainer.deterministic"], max_skips=cfg["trainer.max_skips"],
        sharpen=cfg["sharpening.enabled"], second_order=cfg["sharpening.second_order"],
        eta_lr_scale=cfg["sharpening.eta_lr_scale"], phi_kl_divisor=cfg["sharpening.kl_divisor"],
    )


def new_state(cfg: RunConfig, vocab_size: int) -> TrainState:
    """Fresh model; one random source seeds the weights and then drives training."""
    lc = LstmConfig(vocab_size, cfg["model.embed_size"], cfg["model.hidden_size"],
                    cfg["model.num_layers"])
    source = RandomSource(cfg["trainer.seed"])
    model = BayesianLSTM.initial(lc, source, sigma_init=cfg["model.sigma_init"],
                                 init_scale=cfg["model.init_scale"])
    if cfg["sharpening.enabled"]:
        model.sharpening = SharpeningConfig.initial(param_shapes(lc), cfg["sharpening.eta_init"],
                                                    cfg["sharpening.sigma0"])
    return TrainState(model=model, rng=source)


def validation_report(model: BayesianLSTM, ids, cfg: RunConfig, seed: int):
    if cfg["sharpening.enabled"] and cfg["sharpening.inference"] == "sharpened":
        return perplexity(model, ids, "sharpened", cfg["eval.samples"], seed, cfg["eval.T"])
    mode = cfg["eval.mode"]
    if mode == "sharpened" and model.sharpening is None:
        mode = "map"
    return perplexity(model, ids, mode, cfg["eval.samples"], seed, cfg["eval.T"])


def _report_line(report) -> str:
    label = "upper bound on perplexity" if report.upper_bound else "perplexity"
    return (f"{report.mode}: {label} {report.perplexity:.4f} "
            f"(nll/token {report.nll_per_token:.6f}, tokens {report.tokens}, S {report.samples})")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg.set("trainer.epochs", args.epochs)
    if args.seed is not None:
        cfg.set("trainer.seed", args.seed)
    if args.sharpening is not None:
        cfg.set("sharpening.enabled", args.sharpening)
    for path_key, flag in (("paths.checkpoint", args.checkpoint), ("paths.metrics", args.metrics),
                           ("paths.vocab", args.vocab)):
        if flag is not None:
            cfg.set(path_key, flag)
    log.info("resolved configuration:\n%s", cfg.render())

    splits = corpus_tokens(cfg)
    vocab = build_vocab(splits["train"], cfg["model.vocab_mode"], cfg["model.min_count"])
    train_ids = vocab.encode(splits["train"])
    valid_ids = vocab.encode(splits["valid"])
    per_seq = cfg["trainer.cuts_per_sequence"] or None
    cuts = make_cuts(train_ids, cfg["trainer.batch_size"], cfg["trainer.T"], per_seq)
    B, C = epoch_layout(cuts)
    tcfg = train_config(cfg, B, C)

    ckpt_path = Path(cfg["paths.checkpoint"])
    if args.resume and ckpt_path.exists():
        state, extra = checkpoint.load(ckpt_path)
        if extra and parse_config(_config_text(extra)).section("model") != cfg.section("model"):
            raise ConfigError("checkpoint was written with a different model configuration")
        mode = "a"
    else:
        state = new_state(cfg, len(vocab))
        mode = "w"
    vocab.save(cfg["paths.vocab"])

    wall = cfg["run.wall_time"]
    start = time.perf_counter()
    metrics_path = Path(cfg["paths.metrics"])
    with metrics_path.open(mode, encoding="utf-8") as out:
        def emit(record: dict):
            out.write(json.dumps(record, sort_keys=True) + "\n")
            out.flush()

        emit({"event": "config", "config": cfg.as_strings(), "B": B, "C": C})

        def on_step(m: dict):
            emit({
                "event": "step",
                "step": m["step"],
                "epoch": m["epoch"],
                "nll_per_token": m["nll_per_token"],
                "weighted_kl": m["weighted_kl"],
                "sharpening_kl": m["sharpening_kl"],
                "objective": m["objective"],
                "grad_norm": m["grad_norm"],
                "lr": m["lr"],
                "wall_time": round(time.perf_counter() - start, 6) if wall else None,
            })

        report = None
        try:
            while state.epoch < cfg["trainer.epochs"]:
                state, summary = run_epoch(state, cuts, tcfg, on_step=on_step)
                report = validation_report(state.model, valid_ids, cfg, cfg["trainer.seed"])
                emit({"event": "epoch", "epoch": summary["epoch"],
                      "train_perplexity": summary["train_perplexity"],
                      "valid_perplexity": report.perplexity, "valid_mode": report.mode,
                      "skipped": summary["skipped"], "lr": summary["lr"]})
                checkpoint.save(state, ckpt_path, extra=cfg.as_strings())
                log.info("epoch %d: train perplexity %.4f, validation %s", summary["epoch"],
                         summary["train_perplexity"], _report_line(report))
        except NumericError as e:
            emit({"event": "diverged", "step": state.step, "message": str(e)})
            print(f"training diverged: {e}", file=sys.stderr)
            return EXIT_NUMERIC
    if report is None:
        report = validation_report(state.model, valid_ids, cfg, cfg["trainer.seed"])
    print(f"validation {_report_line(report)}")
    return EXIT_OK


def _config_text(extra: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in extra.items())


def _load_run(args):
    """Checkpoint, its stored config, and the vocabulary it was trained with."""
    state, extra = checkpoint.load(args.checkpoint)
    cfg = parse_config(_config_text(extra)) if extra else RunConfig()
    vocab_path = args.vocab or cfg["paths.vocab"]
    try:
        vocab = Vocab.load(vocab_path, cfg["model.vocab_mode"])
    except DataError as e:
        raise ConfigError(str(e)) from None
    if len(vocab) != state.model.config.vocab_size:
        raise ConfigError(f"vocabulary has {len(vocab)} tokens but the model expects "
                          f"{state.model.config.vocab_size}")
    return state, cfg, vocab


def _eval_ids(args, cfg: RunConfig, vocab: Vocab) -> list[int]:
    if args.corpus:
        return vocab.encode_text(read_text(args.corpus))
    return vocab.encode(corpus_tokens(cfg)[args.split])


def cmd_eval(args) -> int:
    state, cfg, vocab = _load_run(args)
    ids = _eval_ids(args, cfg, vocab)
    from .evaluation import parse_mode
    mode, S = parse_mode(args.mode)
    report = perplexity(state.model, ids, mode, S, args.seed, cfg["eval.T"])
    print(_report_line(report))
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_entropy_gap(args) -> int:
    state, cfg, vocab = _load_run(args)
    ids = _eval_ids(args, cfg, vocab)
    print("samples,forward,reversed,gap")
    for S in args.samples:
        r = entropy_gap(state.model, ids, S, args.seed, cfg["eval.T"])
        print(f"{S},{r.forward:.6f},{r.reversed:.6f},{r.gap:.6f}")
    print(f"# unigram entropy {unigram_entropy(ids):.6f} nats/word; ln V = {np.log(len(vocab)):.6f}")
    return EXIT_OK


def cmd_prune(args) -> int:
    state, cfg, vocab = _load_run(args)
    ids = _eval_ids(args, cfg, vocab)
    fractions = sorted(args.fractions)
    points = prune_sweep(state.model, ids, fractions, cfg["eval.T"])
    sys.stdout.write(sweep_table(points))
    if args.mask_dir:
        for f in fractions:
            _, mask = prune(state.model, f)
            export_masks(mask, Path(args.mask_dir) / f"fraction_{f:g}")
    return EXIT_OK


def sample_tokens(model: BayesianLSTM, length: int, mode: str, seed: int) -> list[int]:
    """Autoregressive generation; posterior mode draws the weights once."""
    source = RandomSource(seed)
    params = model.mean_params() if mode == "map" else model.sample(source)[0]
    out: list[int] = []
    s = zero_state(model.config, 1)
    with tn.no_grad():
        logits = project(params, s[-1][1])
        for _ in range(length):
            probs = tn.softmax_np(logits.data)[0]
            token = source.categorical(probs)
            out.append(token)
            x = tn.take_rows(params["embedding"], np.array([token]))
            s = detach_state(lstm_step(params, x, s))
            logits = project(params, s[-1][1])
    return out


def cmd_sample(args) -> int:
    state, cfg, vocab = _load_run(args)
    if args.length < 0:
        raise ConfigError("--length must be non-negative")
    ids = sample_tokens(state.model, args.length, args.mode, args.seed)
    print(vocab.render(ids))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _on_off(text: str) -> bool:
    t = text.lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError("expected on or off")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="brnn", description="Variational LSTM language models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sharpening", type=_on_off, metavar="on|off")
    p.add_argument("--checkpoint")
    p.add_argument("--metrics")
    p.add_argument("--vocab")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint if present")
    p.set_defaults(func=cmd_train)

    def run_args(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--vocab")
        p.add_argument("--corpus", help="text file to evaluate (default: configured split)")
        p.add_argument("--split", default="test", choices=("train", "valid", "test"))
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="perplexity of a corpus")
    run_args(p)
    p.add_argument("--mode", default="map", help="map, mc:S or sharpened:S")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("entropy-gap", help="entropy on the reversed corpus minus forward")
    run_args(p)
    p.add_argument("--samples", type=_int_list, default=[0, 1, 4, 16],
                   help="comma-separated sample counts; 0 uses the posterior mean")
    p.set_defaults(func=cmd_entropy_gap)

    p = sub.add_parser("prune", help="signal-to-noise pruning sweep")
    run_args(p)
    p.add_argument("--fractions", type=_float_list, default=list(DEFAULT_FRACTIONS))
    p.add_argument("--mask-dir")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("sample", help="generate text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.add_argument("--length", type=int, default=50)
    p.add_argument("--mode", choices=("map", "posterior"), default="map")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, FormatError, StorageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except BrnnError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
