"""Command-line entry point.

Usage::

    seic <command> [--config run.json] [--print-config] [--dotted.key value ...]

Commands: synth, pairgen, align, enhance, evaluate, report.
Exit codes: 0 ok, 2 config/precondition, 3 I/O, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, parse_overrides
from .embedding_store import EmbeddingMatrix, normalize_rows, read_embeddings, write_embeddings
from .encoders import StubVisionEncoder
from .errors import ConfigError, DegenerateDataError, FormatError, NonFiniteLossError, SeicError
from .heads import load_checkpoint, read_checkpoint, save_checkpoint
from .metrics import evaluate
from .pairgen import generate_pairs, load_pairs, load_vocabulary, save_pairs
from .synth import embedding_mixture, stub_image_benchmark
from .trainer import predict_clusters, run_alignment, run_self_enhancement

logger = logging.getLogger("seic")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
ABLATION_KEYS = ("center_strategy", "balance_mode", "self_mode", "stage3.placement", "stage3.use_relu", "weights")


class CommandError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _need_file(path, what):
    if not path:
        raise CommandError(EXIT_CONFIG, f"no {what} given (set paths.{what})")
    if not Path(path).exists():
        raise CommandError(EXIT_IO, f"{what} not found: {path}")
    return Path(path)


def read_labels(path) -> np.ndarray:
    """One integer label per line; blank lines are ignored."""
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise FormatError(f"{path}:{n}: expected an integer label, got {line.strip()!r}") from None
    return np.array(out, dtype=np.int64)


def write_labels(path, labels):
    Path(path).write_text("".join(f"{int(x)}\n" for x in labels), encoding="utf-8")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_config(cfg: RunConfig, out: Path):
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")


def _make_encoder(cfg: RunConfig):
    e = cfg.encoder
    if e.kind != "stub":
        raise CommandError(EXIT_CONFIG, f"encoder.kind={e.kind!r} is not available in this build; precompute embeddings instead")
    return StubVisionEncoder(e.dim, e.image_size, e.patch, 3, e.n_blocks, e.n_heads, seed=e.seed)


def _write_report(out, labels, cfg: RunConfig, truth=None, name="report.json", extra=None):
    report = evaluate(labels, cfg.K, truth)
    report.extra = extra or {}
    (out / name).write_text(report.to_json(), encoding="utf-8")
    write_labels(out / "predictions.txt", labels)
    return report


def _maybe_truth(cfg: RunConfig):
    return read_labels(_need_file(cfg.paths.labels, "labels")) if cfg.paths.labels else None


def cmd_synth(cfg: RunConfig) -> int:
    s = cfg.synth
    out = _out_dir(cfg)
    if s.kind == "embeddings":
        mix = embedding_mixture(s.N, s.D, cfg.K, s.separation_deg, s.spread_deg, s.imbalance, s.nouns_per_cluster, s.distractors, s.seed)
        V = normalize_rows(EmbeddingMatrix.from_array(mix.data))
        nouns, noun_data = mix.nouns, mix.noun_data
        print(f"synthetic mixture: N={s.N} D={s.D} K={cfg.K} min angle {mix.min_angle_deg:.1f} deg")
        labels = mix.labels
    elif s.kind == "images":
        bench = stub_image_benchmark(_make_encoder(cfg), s.N, cfg.K, s.signal, s.clutter, imbalance=s.imbalance,
                                     n_per_cluster=s.nouns_per_cluster, n_distractors=s.distractors, seed=s.seed)
        np.save(out / "images.npy", bench.images)
        V = normalize_rows(EmbeddingMatrix.from_array(bench.features))
        nouns, noun_data, labels = bench.nouns, bench.noun_data, bench.labels
        print(f"synthetic images: N={s.N} K={cfg.K} size={bench.images.shape[-1]}")
    else:
        raise CommandError(EXIT_CONFIG, f"synth.kind must be 'embeddings' or 'images', got {s.kind!r}")
    write_embeddings(V, out / "images.emb")
    write_embeddings(normalize_rows(EmbeddingMatrix(noun_data, nouns)), out / "nouns.emb")
    (out / "nouns.txt").write_text("\n".join(nouns) + "\n", encoding="utf-8")
    write_labels(out / "labels.txt", labels)
    _save_config(cfg, out)
    return EXIT_OK


def cmd_pairgen(cfg: RunConfig) -> int:
    emb = _need_file(cfg.paths.embeddings, "embeddings")
    nouns = _need_file(cfg.paths.nouns, "nouns")
    noun_emb = _need_file(cfg.paths.noun_embeddings, "noun_embeddings")
    V = read_embeddings(emb)
    vocab = load_vocabulary(nouns, noun_emb)
    if cfg.pairgen.k1 > len(vocab):
        raise CommandError(EXIT_CONFIG, f"pairgen.k1={cfg.pairgen.k1} exceeds the vocabulary size {len(vocab)}")
    pairs = generate_pairs(V, vocab, cfg.pairgen_config())
    out = _out_dir(cfg)
    save_pairs(pairs, out, vocab)
    _save_config(cfg, out)
    print(f"candidate nouns: {len(pairs.candidate_indices)}")
    return EXIT_OK


def _load_pairs(cfg: RunConfig):
    pairs_dir = cfg.paths.pairs_dir
    if pairs_dir:
        if not (Path(pairs_dir) / "candidates.json").exists():
            raise CommandError(EXIT_IO, f"no pair set in {pairs_dir}")
        pairs = load_pairs(pairs_dir)
        return pairs.image, pairs.text
    V = read_embeddings(_need_file(cfg.paths.embeddings, "embeddings"))
    # without a pair set the image features pair with themselves
    return V, V


def cmd_align(cfg: RunConfig) -> int:
    V, T = _load_pairs(cfg)
    truth = _maybe_truth(cfg)
    out = _out_dir(cfg)
    _save_config(cfg, out)
    heads, history = run_alignment(V, T, cfg.train_config(), cfg.K, truth=truth, out_dir=out)
    save_checkpoint(out / "stage2.ckpt", heads, step=len(history.steps), extra={"stage": 2})
    history.write_epochs_csv(out / "history_stage2.csv")
    history.write_steps_csv(out / "steps_stage2.csv")
    labels = predict_clusters(heads, V)
    report = _write_report(out, labels, cfg, truth, extra={"stage": 2, "best_epoch": history.best_epoch, "best_acc": history.best_acc})
    print(f"stage 2 done: {report.summary()}")
    return EXIT_OK


def cmd_enhance(cfg: RunConfig) -> int:
    ckpt = cfg.paths.checkpoint
    if not ckpt or not Path(ckpt).exists():
        raise CommandError(EXIT_CONFIG, "enhance needs a stage-2 checkpoint (paths.checkpoint)")
    images = np.load(_need_file(cfg.paths.images, "images"))
    encoder = _make_encoder(cfg)
    heads, _, _ = load_checkpoint(ckpt)
    if heads.n_clusters != cfg.K:
        raise CommandError(EXIT_CONFIG, f"checkpoint has K={heads.n_clusters}, config says K={cfg.K}")
    text = None
    if cfg.self_mode == "align_loss":
        _, T = _load_pairs(cfg)
        text = T.data
    truth = _maybe_truth(cfg)
    out = _out_dir(cfg)
    _save_config(cfg, out)
    adapters, heads, history = run_self_enhancement(images, encoder, heads, cfg.train_config(), text=text, truth=truth, out_dir=out)
    save_checkpoint(out / "stage3.ckpt", heads, adapters, step=len(history.steps), extra={"stage": 3, "encoder": cfg.to_dict()["encoder"]})
    history.write_epochs_csv(out / "history_stage3.csv")
    history.write_steps_csv(out / "steps_stage3.csv")
    report = _write_report(out, history.final_labels, cfg, truth, extra={"stage": 3, "best_epoch": history.best_epoch})
    print(f"stage 3 done: {report.summary()}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    truth = _maybe_truth(cfg)
    out = _out_dir(cfg)
    if cfg.paths.predictions:
        labels = read_labels(_need_file(cfg.paths.predictions, "predictions"))
    else:
        ckpt = _need_file(cfg.paths.checkpoint, "checkpoint")
        header, _ = read_checkpoint(ckpt)
        if header.get("r"):
            encoder = _make_encoder(cfg)
            heads, _, _ = load_checkpoint(ckpt, encoder=encoder)
            images = np.load(_need_file(cfg.paths.images, "images"))
            labels = predict_clusters(heads, images, encoder=encoder)
        else:
            heads, _, _ = load_checkpoint(ckpt)
            labels = predict_clusters(heads, read_embeddings(_need_file(cfg.paths.embeddings, "embeddings")))
    K = max(cfg.K, int(labels.max()) + 1, int(truth.max()) + 1 if truth is not None else 0)
    report = evaluate(labels, K, truth)
    (out / "evaluation.json").write_text(report.to_json(), encoding="utf-8")
    d = cfg.metrics.decimals
    if truth is not None:
        print(f"nmi {report.nmi:.{d}f}")
        print(f"acc {report.acc:.{d}f}")
        print(f"ari {report.ari:.{d}f}")
    print(f"hist_std {report.hist_std:.{d}f}")
    return EXIT_OK


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _ablation_items(flat):
    return {k: v for k, v in flat.items() if any(k == a or k.startswith(a + ".") for a in ABLATION_KEYS)}


def cmd_report(cfg: RunConfig) -> int:
    runs = [Path(r) for r in cfg.paths.runs]
    if not runs:
        raise CommandError(EXIT_IO, "no run directories given (paths.runs)")
    loaded, curves = [], {}
    for run in runs:
        histories = sorted(run.glob("history_stage*.csv")) if run.is_dir() else []
        if not (run / "config.json").exists() or not histories:
            raise CommandError(EXIT_IO, f"missing run artifacts in {run}")
        flat = _flatten(json.loads((run / "config.json").read_text(encoding="utf-8")))
        rows = _read_csv(histories[-1])
        if not rows:
            raise CommandError(EXIT_IO, f"empty history in {histories[-1]}")
        loaded.append((_ablation_items(flat), rows[-1]))
        curves[str(run)] = [float(r["hist_std"]) for r in _read_csv(histories[0])]

    # a cell is identified by the ablation settings that differ between runs
    varying = sorted({k for items, _ in loaded for k in items if len({str(i.get(k)) for i, _ in loaded}) > 1})
    cells = {}
    for items, final in loaded:
        key = ", ".join(f"{k}={items.get(k)}" for k in varying) or "all runs"
        cells.setdefault(key, []).append(final)

    metrics = [m for m in ("acc", "hist_std") if all(m in r for rs in cells.values() for r in rs)]
    lines = ["| cell | runs | " + " | ".join(metrics) + " |", "|---" * (len(metrics) + 2) + "|"]
    for cell, finals in cells.items():
        stats = []
        for m in metrics:
            vals = np.array([float(r[m]) for r in finals])
            stats.append(f"{vals.mean():.3f} ± {vals.std():.3f}")
        lines.append(f"| {cell} | {len(finals)} | " + " | ".join(stats) + " |")
    out = _out_dir(cfg)
    table = "\n".join(lines) + "\n"
    (out / "ablation.md").write_text(table, encoding="utf-8")
    length = max(len(c) for c in curves.values())
    with open(out / "hist_std_curves.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", *curves])
        for e in range(length):
            writer.writerow([e, *[c[e] if e < len(c) else "" for c in curves.values()]])
    print(table, end="")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "pairgen": cmd_pairgen,
    "align": cmd_align,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="seic", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, parse_overrides(rest))
        if args.print_config:
            print(json.dumps(cfg.to_dict(), indent=2))
            return EXIT_OK
        return COMMANDS[args.command](cfg)
    except CommandError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, DegenerateDataError) as exc:
        print(f"{args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"{args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"{args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SeicError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
