"""Command-line surface for the embedding pipeline.

Subcommands cover the pipeline end to end: vocab, count, stats,
dispersion, train, simulate, export, neighbors.  Every option can also be
supplied through a line-oriented key=value config file (--config);
explicit command-line values win over the file, the file wins over
defaults, and unknown keys are rejected.  The fully resolved
configuration is logged to stderr before the command runs.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import cooccur, dispersion, simulate, trainer
from .model import DispersionAssignment
from .optimizer import ConvergenceConfig

EXPORT_MODES = ("avg", "w", "wt")


class CliError(RuntimeError):
    """Runtime failure of a subcommand (distinct from usage errors)."""


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _coerce(raw: str, like) -> object:
    if isinstance(like, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CliError(f"cannot parse boolean from {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def resolve_config(args: argparse.Namespace, defaults: dict) -> dict:
    """Three-layer resolution: command line > config file > defaults."""
    file_values: dict[str, str] = {}
    if getattr(args, "config", None):
        file_values = _read_config_file(args.config)
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
    resolved = {}
    for key, default in defaults.items():
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            resolved[key] = cli_value
        elif key in file_values:
            resolved[key] = _coerce(file_values[key], default)
        else:
            resolved[key] = default
    for key in sorted(resolved):
        print(f"config: {key}={resolved[key]}", file=sys.stderr)
    return resolved


def _add_config_opt(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key=value config file (CLI overrides it)")


# ---------------------------------------------------------------------------
# subcommands


def cmd_vocab(args) -> int:
    cfg = resolve_config(args, {"corpus": None, "out": None,
                                "vocab_size": 0, "min_count": 1})
    if not cfg["corpus"] or not cfg["out"]:
        raise CliError("vocab needs --corpus and --out")
    vocab = cooccur.build_vocab(cooccur.read_corpus(cfg["corpus"]),
                                max_size=cfg["vocab_size"] or None,
                                min_count=cfg["min_count"])
    vocab.save(cfg["out"])
    print(f"vocab: {len(vocab)} tokens -> {cfg['out']}")
    return 0


def cmd_count(args) -> int:
    cfg = resolve_config(args, {"corpus": None, "vocab": None, "out": None,
                                "window": 10, "log1p": False})
    if not cfg["corpus"] or not cfg["vocab"] or not cfg["out"]:
        raise CliError("count needs --corpus, --vocab and --out")
    vocab = cooccur.Vocabulary.load(cfg["vocab"])
    out = cfg["out"]
    if cfg["log1p"]:
        raw_path = out + ".raw"
        store = cooccur.count_cooccurrences(cooccur.read_corpus(cfg["corpus"]),
                                            vocab, cfg["window"], raw_path)
        store = cooccur.apply_log1p(store, out)
        os.unlink(raw_path)
    else:
        store = cooccur.count_cooccurrences(cooccur.read_corpus(cfg["corpus"]),
                                            vocab, cfg["window"], out)
    print(f"count: {store.n_records} records over {store.n} tokens -> {out}")
    return 0


def cmd_stats(args) -> int:
    cfg = resolve_config(args, {"store": None, "out": None})
    if not cfg["store"] or not cfg["out"]:
        raise CliError("stats needs --store and --out")
    store = cooccur.CooccurrenceStore(cfg["store"])
    stats = cooccur.compute_row_stats(store)
    with open(cfg["out"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "mean", "variance", "n_positive", "skewness"])
        for i in range(len(stats)):
            writer.writerow([i, repr(float(stats.mean[i])),
                             repr(float(stats.variance[i])),
                             int(stats.n_positive[i]),
                             repr(float(stats.skewness[i]))])
    print(f"stats: {len(stats)} rows -> {cfg['out']}")
    return 0


def cmd_dispersion(args) -> int:
    cfg = resolve_config(args, {"store": None, "out": None, "breakpoints": ""})
    if not cfg["store"] or not cfg["out"]:
        raise CliError("dispersion needs --store and --out")
    store = cooccur.CooccurrenceStore(cfg["store"])
    stats = cooccur.compute_row_stats(store)
    breakpoints = None
    if cfg["breakpoints"]:
        breakpoints = [float(v) for v in cfg["breakpoints"].split(",")]
    table = dispersion.fit_table(stats, breakpoints)
    table.save(cfg["out"])
    for k, iv in enumerate(table.intervals):
        mark = " (flagged)" if iv.flagged else ""
        print(f"interval {k}: [{iv.lo:.3f}, {iv.hi:.3f}) p={iv.p_hat:.3f} "
              f"delta={iv.delta_hat:.3f} n={iv.n_points}{mark}")
    return 0


def _train_defaults() -> dict:
    return {"store": None, "out": None, "history": None, "table": None,
            "dim": 50, "optimizer": "fisher_lr", "lr": 0.5,
            "no_lr_adjust": False, "n_epoch": 10, "num_chunks": 1,
            "epsilon": 1e-4, "maxit": 100, "seed": 0, "p": 1.5, "phi": 1.0,
            "resume": None}


def cmd_train(args) -> int:
    cfg = resolve_config(args, _train_defaults())
    if not cfg["store"] or not cfg["out"]:
        raise CliError("train needs --store and --out")
    store = cooccur.CooccurrenceStore(cfg["store"])
    optimizer = cfg["optimizer"]
    if cfg["no_lr_adjust"] and optimizer == "fisher_lr":
        optimizer = "fisher"
    if cfg["table"]:
        table = dispersion.DispersionTable.load(cfg["table"])
        stats = cooccur.compute_row_stats(store)
        disp = dispersion.assign(table, stats)
    else:
        disp = DispersionAssignment.constant(store.n, p=cfg["p"], phi=cfg["phi"])
    tcfg = trainer.TrainConfig(
        n_epoch=cfg["n_epoch"], num_chunks=cfg["num_chunks"],
        optimizer=optimizer,
        convergence=ConvergenceConfig(epsilon=cfg["epsilon"], maxit=cfg["maxit"]),
        seed=cfg["seed"], lr=cfg["lr"])
    resume = trainer.load_checkpoint(cfg["resume"]) if cfg["resume"] else None
    params = trainer.init_params(store.n, cfg["dim"], cfg["seed"])

    def report(rec):
        print(f"iter {rec.iteration}: loss={rec.loss:.6f} "
              f"rel_change={rec.rel_change:.3e} "
              f"|U_beta|={rec.u_beta_norm:.4e} |U_betatilde|={rec.u_betatilde_norm:.4e}")

    params, history = trainer.train(store, params, disp, tcfg,
                                    history_path=cfg["history"],
                                    checkpoint_path=cfg["out"],
                                    resume=resume, progress=report)
    status = "converged" if history.converged else "reached maxit"
    print(f"train: {status} after {history.records[-1].iteration} iterations, "
          f"final loss {history.final_loss!r}")
    return 0


def cmd_simulate(args) -> int:
    cfg = resolve_config(args, {"out_dir": None, "n": 300, "dim": 50, "seed": 0,
                                "epsilon": 1e-4, "maxit": 100, "n_epoch": 10,
                                "num_chunks": 1, "lr": 0.5,
                                "arms": "fisher,fisher_lr,adam",
                                "compare": True, "freeze_bias": False})
    if not cfg["out_dir"]:
        raise CliError("simulate needs --out-dir")
    os.makedirs(cfg["out_dir"], exist_ok=True)
    spec = simulate.SimSpec(n=cfg["n"], d=cfg["dim"], seed=cfg["seed"])
    store_path = os.path.join(cfg["out_dir"], "simulated.cooc")
    store, truth, disp = simulate.generate(spec, store_path)
    trainer.save_checkpoint(os.path.join(cfg["out_dir"], "truth.ckpt"),
                            trainer.Checkpoint(params=truth, iteration=0,
                                               prev_loss=float("nan"),
                                               optimizer="fisher"))
    print(f"simulate: {store.n_records} records for n={cfg['n']} -> {store_path}")
    if not cfg["compare"]:
        return 0
    arms = tuple(a.strip() for a in cfg["arms"].split(",") if a.strip())
    results = simulate.compare_optimizers(
        store, disp, cfg["dim"], seed=cfg["seed"], arms=arms,
        convergence=ConvergenceConfig(epsilon=cfg["epsilon"], maxit=cfg["maxit"]),
        n_epoch=cfg["n_epoch"], num_chunks=cfg["num_chunks"], lr=cfg["lr"],
        freeze_bias=cfg["freeze_bias"], out_dir=cfg["out_dir"])
    failures = []
    for arm, res in results.items():
        if res.error is not None:
            failures.append(arm)
            print(f"arm {arm}: FAILED ({res.error})", file=sys.stderr)
        else:
            last = res.history.records[-1]
            print(f"arm {arm}: {len(res.history.records)} iterations, "
                  f"final loss {last.loss!r}")
    if failures:
        raise CliError(f"arm(s) failed: {', '.join(failures)}")
    return 0


def _load_embeddings(path: str):
    tokens, vectors = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            tokens.append(parts[0])
            vectors.append([float(v) for v in parts[1:]])
    if not tokens:
        raise CliError(f"{path}: no embeddings found")
    return tokens, np.asarray(vectors, dtype=float)


def cmd_export(args) -> int:
    cfg = resolve_config(args, {"checkpoint": None, "vocab": None, "out": None,
                                "export_mode": "avg"})
    if not cfg["checkpoint"] or not cfg["vocab"] or not cfg["out"]:
        raise CliError("export needs --checkpoint, --vocab and --out")
    if cfg["export_mode"] not in EXPORT_MODES:
        raise CliError(f"export-mode must be one of {EXPORT_MODES}")
    ckpt = trainer.load_checkpoint(cfg["checkpoint"])
    vocab = cooccur.Vocabulary.load(cfg["vocab"])
    params = ckpt.params
    if params.n != len(vocab):
        raise CliError(f"checkpoint has {params.n} rows but vocabulary has "
                       f"{len(vocab)} tokens")
    if cfg["export_mode"] == "avg":
        vectors = 0.5 * (params.W + params.Wt)
    elif cfg["export_mode"] == "w":
        vectors = params.W
    else:
        vectors = params.Wt
    with open(cfg["out"], "w", encoding="utf-8") as fh:
        for tok, vec in zip(vocab.tokens, vectors):
            fh.write(tok + " " + " ".join(f"{v:.17g}" for v in vec) + "\n")
    print(f"export: {len(vocab)} vectors ({cfg['export_mode']}) -> {cfg['out']}")
    return 0


def neighbors_of(tokens: list[str], vectors: np.ndarray, query: str,
                 k: int) -> list[tuple[str, float]]:
    """Top-k cosine neighbors of query, ties broken by token id."""
    try:
        qi = tokens.index(query)
    except ValueError:
        raise CliError(f"unknown token {query!r}") from None
    norms = np.linalg.norm(vectors, axis=1)
    qv = vectors[qi]
    qn = norms[qi]
    denom = norms * qn
    with np.errstate(divide="ignore", invalid="ignore"):
        sims = np.where(denom > 0.0, vectors @ qv / denom, 0.0)
    order = np.lexsort((np.arange(len(tokens)), -sims))
    out = []
    for idx in order:
        if idx == qi:
            continue
        out.append((tokens[idx], float(sims[idx])))
        if len(out) == k:
            break
    return out


def cmd_neighbors(args) -> int:
    cfg = resolve_config(args, {"embeddings": None, "token": None, "k": 10})
    if not cfg["embeddings"] or not cfg["token"]:
        raise CliError("neighbors needs --embeddings and --token")
    tokens, vectors = _load_embeddings(cfg["embeddings"])
    for tok, sim in neighbors_of(tokens, vectors, cfg["token"], cfg["k"]):
        print(f"{tok}\t{sim:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tweedievec",
        description="Dense embeddings from co-occurrence counts by "
                    "alternating Tweedie regression.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("vocab", help="build a frequency-ranked vocabulary")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--vocab-size", type=int, dest="vocab_size")
    p.add_argument("--min-count", type=int, dest="min_count")
    _add_config_opt(p)
    p.set_defaults(func=cmd_vocab)

    p = subs.add_parser("count", help="count distance-weighted co-occurrences")
    p.add_argument("--corpus")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--window", type=int)
    p.add_argument("--log1p", action="store_const", const=True, default=None)
    _add_config_opt(p)
    p.set_defaults(func=cmd_count)

    p = subs.add_parser("stats", help="per-row moment statistics")
    p.add_argument("--store")
    p.add_argument("--out")
    _add_config_opt(p)
    p.set_defaults(func=cmd_stats)

    p = subs.add_parser("dispersion", help="fit the piecewise dispersion table")
    p.add_argument("--store")
    p.add_argument("--out")
    p.add_argument("--breakpoints", help="comma-separated log-mean edges")
    _add_config_opt(p)
    p.set_defaults(func=cmd_dispersion)

    p = subs.add_parser("train", help="fit embeddings to a count store")
    p.add_argument("--store")
    p.add_argument("--out", help="checkpoint output path")
    p.add_argument("--history", help="per-iteration history CSV")
    p.add_argument("--table", help="dispersion table CSV from `dispersion`")
    p.add_argument("--dim", type=int)
    p.add_argument("--optimizer", choices=("fisher", "fisher_lr", "adam"))
    p.add_argument("--lr", type=float)
    p.add_argument("--no-lr-adjust", dest="no_lr_adjust",
                   action="store_const", const=True, default=None)
    p.add_argument("--n-epoch", type=int, dest="n_epoch")
    p.add_argument("--num-chunks", type=int, dest="num_chunks")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--maxit", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--p", type=float, help="constant power when no table is given")
    p.add_argument("--phi", type=float, help="constant dispersion when no table is given")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_config_opt(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("simulate", help="generate synthetic data and compare optimizers")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--n", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--maxit", type=int)
    p.add_argument("--n-epoch", type=int, dest="n_epoch")
    p.add_argument("--num-chunks", type=int, dest="num_chunks")
    p.add_argument("--lr", type=float)
    p.add_argument("--arms")
    p.add_argument("--no-compare", dest="compare",
                   action="store_const", const=False, default=None)
    p.add_argument("--freeze-bias", dest="freeze_bias",
                   action="store_const", const=True, default=None)
    _add_config_opt(p)
    p.set_defaults(func=cmd_simulate)

    p = subs.add_parser("export", help="write embeddings as text")
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--export-mode", dest="export_mode", choices=EXPORT_MODES)
    _add_config_opt(p)
    p.set_defaults(func=cmd_export)

    p = subs.add_parser("neighbors", help="nearest tokens by cosine similarity")
    p.add_argument("--embeddings")
    p.add_argument("--token")
    p.add_argument("--k", type=int)
    _add_config_opt(p)
    p.set_defaults(func=cmd_neighbors)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures exit 1, usage errors exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
