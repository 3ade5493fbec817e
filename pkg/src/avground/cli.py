"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 bad data or config, 3 runtime
failure (for example a non-finite loss).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .archive import read_archive, check_same_source
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .distill import distill_checkpoint
from .errors import AVGroundError, ConfigError, DataFormatError, TrainingError
from .experiments import (check_fractions, heldout_report, scaling_experiment, speaker_groups,
                          train_grounding)
from .probe import invariance_gap_report, pca_project_2d
from .retrieval import rows_to_text
from .synth import generate_corpus, load_corpus, save_corpus

log = logging.getLogger("avground")

COMMANDS = ("gen-data", "train", "eval-retrieval", "distill", "probe", "scaling-exp", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


@dataclass
class RunManifest:
    run_id: str
    command: str
    config: dict
    seed: int
    version: str
    artifacts: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        self.artifacts = sorted({*self.artifacts, str(path)})
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return path


def _run_id(command: str, cfg: RunConfig) -> str:
    digest = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True, default=str).encode()).hexdigest()
    return f"{command}-{digest[:12]}"


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.corpus.seed = cfg.training.seed = cfg.probe.seed = args.seed
    return cfg


def _write_table(out_dir: Path, stem: str, csv_text: str, text: str, artifacts: list[str]) -> None:
    for suffix, body in ((".csv", csv_text), (".txt", text)):
        path = out_dir / f"{stem}{suffix}"
        path.write_text(body)
        artifacts.append(str(path))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ---------------------------------------------------------------------------


def cmd_gen_data(args) -> RunManifest:
    cfg = _config(args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    corpus = generate_corpus(cfg.corpus, jobs=args.jobs)
    paths = save_corpus(corpus, out)
    man = RunManifest(_run_id("gen-data", cfg), "gen-data", cfg.to_dict(), cfg.corpus.seed, __version__,
                      [str(p) for p in paths], {"generate": time.perf_counter() - t0})
    print(f"wrote {len(corpus.pairs)} pairs and {len(corpus.probe)} probe utterances to {out}")
    return man


def cmd_train(args) -> RunManifest:
    cfg = _config(args)
    corpus = load_corpus(args.corpus)
    out = _out_dir(args)
    t0 = time.perf_counter()

    def progress(epoch, r10):
        print(f"epoch {epoch + 1}/{cfg.training.epochs}  held-out R@10 {r10:.4f}", file=sys.stderr)

    result = train_grounding(corpus, cfg, on_epoch=progress)
    man = RunManifest(_run_id("train", cfg), "train", cfg.to_dict(), cfg.training.seed, __version__,
                      timings={"train": time.perf_counter() - t0})
    ckpt = save_checkpoint(result.model, out / "model.gdck")
    curve = out / "loss_curve.csv"
    curve.write_text(result.curve_csv())
    man.artifacts += [str(ckpt), str(curve)]
    best = "n/a" if result.best_r10 is None else f"{result.best_r10:.4f} (epoch {result.best_epoch + 1})"
    print(f"best held-out R@10 {best}; checkpoint {ckpt}")
    return man


def cmd_eval_retrieval(args) -> RunManifest:
    cfg = _config(args)
    corpus = load_corpus(args.corpus)
    model = load_checkpoint(args.ckpt)
    out = _out_dir(args)
    t0 = time.perf_counter()
    report = heldout_report(model, corpus, cfg)
    man = RunManifest(_run_id("eval-retrieval", cfg), "eval-retrieval", cfg.to_dict(), model.seed, __version__,
                      timings={"evaluate": time.perf_counter() - t0})
    _write_table(out, "retrieval", report.to_csv(), report.to_text(), man.artifacts)
    print(report.to_text(), end="")
    return man


def cmd_distill(args) -> RunManifest:
    cfg = _config(args)
    layers = tuple(s.strip() for s in args.layers.split(",")) if args.layers else cfg.distill.layers
    source = args.source or str(Path(args.corpus) / "probe.gdfa")
    out = _out_dir(args)
    t0 = time.perf_counter()
    try:
        paths = distill_checkpoint(args.ckpt, source, out, layers, jobs=args.jobs)
    except ValueError as exc:
        if isinstance(exc, AVGroundError):
            raise
        raise ConfigError("layers", str(exc)) from None
    man = RunManifest(_run_id("distill", cfg), "distill", {**cfg.to_dict(), "layers": list(layers)},
                      cfg.training.seed, __version__, [str(p) for p in paths], {"distill": time.perf_counter() - t0})
    for p in paths:
        print(p)
    return man


def _feature_name(header) -> str:
    return "fbank" if header.layer_name == "FBANK" else header.layer_name


def cmd_probe(args) -> RunManifest:
    cfg = _config(args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    loaded = [(Path(p), *read_archive(p)) for p in args.archives]
    distilled = [h for _, h, _ in loaded if h.source_hash]
    check_same_source(distilled)
    features = [(_feature_name(h), recs) for p, h, recs in loaded]
    names = [n for n, _ in features]
    if len(set(names)) != len(names):
        raise DataFormatError(f"duplicate feature names among archives: {names}")
    groups = None
    n_classes = None
    if args.corpus:
        corpus = load_corpus(args.corpus)
        groups, n_classes = speaker_groups(corpus), corpus.config.n_phones
    table = invariance_gap_report(features, cfg.probe, n_classes, groups, jobs=args.jobs)
    man = RunManifest(_run_id("probe", cfg), "probe", {**cfg.to_dict(), "archives": list(args.archives)},
                      cfg.probe.seed, __version__, timings={"probe": time.perf_counter() - t0})
    _write_table(out, "invariance", table.to_csv(), table.to_text(), man.artifacts)
    if args.pca:
        man.artifacts.append(str(write_pca(loaded, args.corpus, out, args.pca_frames, cfg.probe.seed)))
    print(table.to_text(), end="")
    return man


def write_pca(loaded, corpus_dir, out: Path, max_frames: int, seed: int) -> Path:
    """2-D projection of the test-split frames of every archive, one CSV."""
    meta = {}
    phones = None
    if corpus_dir:
        corpus = load_corpus(corpus_dir)
        meta = {u.utt_id: u.speaker for u in corpus.probe}
        phones = corpus.language.inventory.phones
    lines = ["feature,x,y,phone,manner,speaker,condition"]
    for _, header, recs in loaded:
        recs = [r for r in recs if r.utt_id.startswith("te")]
        frames = np.concatenate([r.frames for r in recs])
        labels = np.concatenate([r.labels for r in recs])
        speakers = np.concatenate([np.full(r.num_frames, meta.get(r.utt_id, -1)) for r in recs])
        conds = np.concatenate([np.full(r.num_frames, r.condition) for r in recs])
        pick = np.sort(np.random.default_rng(seed).permutation(len(frames))[:max_frames])
        proj = pca_project_2d(frames[pick])
        name = _feature_name(header)
        for (x, y), lab, spk, cond in zip(proj.coords, labels[pick], speakers[pick], conds[pick]):
            sym = phones[lab].symbol if phones else str(lab)
            manner = phones[lab].manner if phones else ""
            lines.append(f"{name},{x:.6f},{y:.6f},{sym},{manner},{spk},{cond}")
    target = out / "pca.csv"
    target.write_text("\n".join(lines) + "\n")
    return target


def cmd_scaling(args) -> RunManifest:
    cfg = _config(args)
    fractions = [float(f) for f in args.fractions.split(",")]
    try:
        check_fractions(fractions)
    except ValueError as exc:
        raise ConfigError("fractions", str(exc)) from None
    corpus = load_corpus(args.corpus)
    out = _out_dir(args)
    t0 = time.perf_counter()
    man = RunManifest(_run_id("scaling-exp", cfg), "scaling-exp", {**cfg.to_dict(), "fractions": fractions},
                      cfg.training.seed, __version__)

    def keep(frac, model):
        path = save_checkpoint(model, out / f"model-f{frac:g}.gdck")
        man.artifacts.append(str(path))

    table = scaling_experiment(corpus, cfg, fractions, jobs=args.jobs, on_model=keep)
    man.timings["scaling"] = time.perf_counter() - t0
    _write_table(out, "scaling", table.to_csv(), table.to_text(), man.artifacts)
    print(table.to_text(), end="")
    return man


def cmd_report(args) -> RunManifest | None:
    """Print every table (CSV) found in the given run directories."""
    for run in args.runs:
        run = Path(run)
        if not run.is_dir():
            raise DataFormatError(f"{run}: not a run directory")
        manifest = run / "manifest.json"
        if manifest.exists():
            m = json.loads(manifest.read_text())
            print(f"== {run}  ({m['command']}, run {m['run_id']}, seed {m['seed']})")
            for name, secs in sorted(m.get("timings", {}).items()):
                print(f"   {name}: {secs:.1f} s")
        else:
            print(f"== {run}")
        for table in sorted(run.glob("*.csv")):
            if table.name == "pca.csv":
                continue
            rows = list(csv.DictReader(table.open()))
            print(f"-- {table.name}")
            print(rows_to_text(rows), end="")
    return None


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides every section)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for parallel stages")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="avground", description="Audio-visual grounding experiments on synthetic speech.")
    p.add_argument("--version", action="version", version=f"avground {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train a grounding model")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval-retrieval", parents=[common], help="held-out Recall@K")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)

    d = sub.add_parser("distill", parents=[common], help="write per-layer feature archives")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--layers", help="comma-separated taps, e.g. L1,L2,L3,L4")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--corpus", help="corpus directory (its probe.gdfa is distilled)")
    src.add_argument("--source", help="FBank archive to distill")
    d.add_argument("--out", required=True)

    pr = sub.add_parser("probe", parents=[common], help="frame probes and the invariance-gap table")
    pr.add_argument("archives", nargs="+")
    pr.add_argument("--corpus", help="corpus directory for speaker groups and phone names")
    pr.add_argument("--out", required=True)
    pr.add_argument("--pca", action="store_true", help="also write 2-D projections")
    pr.add_argument("--pca-frames", type=int, default=2000)

    s = sub.add_parser("scaling-exp", parents=[common], help="nested data-scaling experiment")
    s.add_argument("--corpus", required=True)
    s.add_argument("--fractions", default="0.25,0.5,1.0")
    s.add_argument("--out", required=True)

    r = sub.add_parser("report", parents=[common], help="print the tables of finished runs")
    r.add_argument("runs", nargs="+")
    return p


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-retrieval": cmd_eval_retrieval,
    "distill": cmd_distill,
    "probe": cmd_probe,
    "scaling-exp": cmd_scaling,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.jobs < 1:
        print("avground: error: --jobs must be >= 1", file=sys.stderr)
        return 1
    try:
        manifest = HANDLERS[args.command](args)
        if manifest is not None:
            manifest.write(Path(args.out))
    except (ConfigError, DataFormatError, FileNotFoundError) as exc:
        print(f"avground {args.command}: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, AVGroundError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"avground {args.command}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
