"""Command-line entry point.

Every command that writes files also writes ``manifest.json`` next to them,
recording the command line, the effective configuration and git-style blob
hashes of the inputs.

Exit codes: 0 success, 2 usage error, 3 invalid input data.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import evaluation, explain, sampler, synth
from .kg import KGError, load_graph
from .model import ModelConfig, collate, predict, predict_arrays, tensorize
from .train import TrainConfig, grid_search, mean_auc, run_ablation, train

log = logging.getLogger("espa")

EXIT_USAGE = 2
EXIT_DATA = 3


class DataError(Exception):
    pass


def blob_hash(path: str | Path) -> str:
    """Hash of a file as ``git hash-object`` computes it."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _input_files(paths: Sequence[str | Path]) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(x for x in p.rglob("*") if x.is_file() and x.name != "manifest.json") if p.is_dir() else [p]
        for f in files:
            out[str(f)] = blob_hash(f)
    return out


def write_manifest(out_dir: Path, command: str, argv: Sequence[str], config: dict, seed: int | None,
                   inputs: Sequence[str | Path], outputs: Sequence[Path]) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": _input_files(inputs),
        "outputs": sorted(str(p) for p in outputs),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_config(path: str | None) -> dict:
    """Sections ``synth``, ``sample``, ``model`` and ``train``; all optional."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise DataError(f"config {path}: top level must be an object")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise DataError(f"config section {name!r} must be an object")
    return dict(sec)


def _model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**_section(cfg, "model"))
    except (TypeError, ValueError) as exc:
        raise DataError(f"model config: {exc}") from None


def _train_config(cfg: dict, args) -> TrainConfig:
    sec = _section(cfg, "train")
    if args.seed is not None:
        sec["seed"] = args.seed
    for key in ("epochs", "learning_rate", "batch_size"):
        val = getattr(args, key, None)
        if val is not None:
            sec[key] = val
    try:
        return TrainConfig(**sec)
    except (TypeError, ValueError) as exc:
        raise DataError(f"train config: {exc}") from None


def _require(value, flag: str):
    if value is None:
        raise argparse.ArgumentTypeError(f"{flag} is required for this command")
    return value


def _out_dir(args) -> Path:
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_dataset(path: str):
    d = Path(path)
    if not (d / "vocab.json").is_file():
        raise DataError(f"{d} is not a dataset directory (vocab.json missing)")
    try:
        return sampler.read_dataset(d)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"dataset {d}: {exc}") from None


def _load_checkpoint(path: str):
    try:
        params, meta = ad.load_params(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"checkpoint {path}: {exc}") from None
    info = json.loads(meta) if meta else {}
    return params, ModelConfig.from_dict(info.get("model", {})), info


# -- commands ----------------------------------------------------------------------

def cmd_synth(args, cfg: dict, argv) -> int:
    sec = _section(cfg, "synth")
    if args.seed is not None:
        sec["seed"] = args.seed
    if args.null_signal:
        scfg = synth.SynthConfig.null_signal(**sec)
    else:
        try:
            scfg = synth.SynthConfig(**sec)
        except (TypeError, ValueError) as exc:
            raise DataError(f"synth config: {exc}") from None
    out = _out_dir(args)
    g, truth = synth.generate(scfg)
    paths = synth.write_synth(out, g, truth)
    write_manifest(out, "synth", argv, scfg.to_dict(), scfg.seed, [], list(paths.values()))
    print(json.dumps(g.summary(), sort_keys=True))
    return 0


def cmd_ingest(args, cfg: dict, argv) -> int:
    data = _require(args.data, "--data")
    g = load_graph(data)
    summary = g.summary()
    if args.out:
        out = _out_dir(args)
        target = out / "summary.json"
        target.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_manifest(out, "ingest", argv, {}, None, [data], [target])
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_sample(args, cfg: dict, argv) -> int:
    data = _require(args.data, "--data")
    sec = _section(cfg, "sample")
    split = args.split_term if args.split_term is not None else sec.get("split_term")
    limit = sec.get("limit", sampler.DEFAULT_SIMILAR_LIMIT) if args.limit is None else args.limit
    max_paths = sec.get("max_paths", sampler.DEFAULT_MAX_PATHS) if args.max_paths is None else args.max_paths
    g = load_graph(data)
    if split is None:
        terms = [t for t in g.grade_term.values() if t is not None]
        if not terms:
            raise DataError("graph has no enrollment terms; cannot split")
        split = max(terms)
    tr, te, stats = sampler.build_dataset(g, int(split), int(limit), int(max_paths))
    out = _out_dir(args)
    sampler.write_dataset(out, tr, te, sampler.Vocabulary.from_graph(g), stats)
    config = {"split_term": int(split), "limit": int(limit), "max_paths": int(max_paths)}
    write_manifest(out, "sample", argv, config, None, [data], sorted(out.glob("*.json*")))
    print(json.dumps(dict(vars(stats), dropped=stats.dropped), sort_keys=True))
    return 0


def _checkpoint_meta(mc: ModelConfig, tc: TrainConfig, pos_weight: float, best_epoch: int) -> str:
    return json.dumps({"model": mc.to_dict(), "train": tc.to_dict(), "pos_weight": pos_weight,
                       "best_epoch": best_epoch}, sort_keys=True)


def cmd_train(args, cfg: dict, argv) -> int:
    data = _require(args.data, "--data")
    tr, _, vocab = _read_dataset(data)
    mc = _model_config(cfg)
    tc = _train_config(cfg, args)
    out = _out_dir(args)
    res = train(mc, vocab, tr, tc)
    ckpt = out / "checkpoint.espt"
    ad.save_params(res.params, ckpt, _checkpoint_meta(mc, tc, res.pos_weight, res.best_epoch))
    res.write_log(out / "train_log.csv")
    write_manifest(out, "train", argv, {"model": mc.to_dict(), "train": tc.to_dict()}, tc.seed, [data],
                   [ckpt, out / "train_log.csv"])
    print(json.dumps({"best_epoch": res.best_epoch, "best_dev_auc": res.best_dev_auc}))
    return 0


def cmd_gridsearch(args, cfg: dict, argv) -> int:
    data = _require(args.data, "--data")
    tr, _, vocab = _read_dataset(data)
    mc = _model_config(cfg)
    tc = _train_config(cfg, args)
    out = _out_dir(args)
    best, runs = grid_search(mc, vocab, tr, tc)
    lines = ["learning_rate,batch_size,dev_auc"] + [f"{r.learning_rate!r},{r.batch_size},{r.dev_auc!r}" for r in runs]
    (out / "grid.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "best_config.json").write_text(json.dumps({"model": mc.to_dict(), "train": best.to_dict()}, indent=2,
                                                     sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out, "gridsearch", argv, {"model": mc.to_dict(), "train": tc.to_dict()}, tc.seed, [data],
                   [out / "grid.csv", out / "best_config.json"])
    print(json.dumps(best.to_dict(), sort_keys=True))
    return 0


def cmd_eval(args, cfg: dict, argv) -> int:
    data = _require(args.data, "--data")
    ckpt = _require(args.checkpoint, "--checkpoint")
    tr, te, vocab = _read_dataset(data)
    params, mc, _ = _load_checkpoint(ckpt)
    items = [tensorize(s, vocab) for s in te]
    labels = np.array([s.label for s in te])
    scores = predict_arrays(params, mc, items, vocab.n_students)
    rows = [("ESPA", evaluation.classification_report(scores, labels)),
            ("Majority", evaluation.classification_report(
                evaluation.majority_scores([s.label for s in tr], len(te)), labels))]
    text = evaluation.format_table(rows) if args.format == "text" else json.dumps(
        {name: rep.to_dict() for name, rep in rows}, indent=2, sort_keys=True)
    if args.out:
        out = _out_dir(args)
        target = out / ("report.txt" if args.format == "text" else "report.json")
        target.write_text(text + "\n", encoding="utf-8")
        write_manifest(out, "eval", argv, {"model": mc.to_dict()}, None, [data, ckpt], [target])
    print(text)
    return 0


def cmd_ablate(args, cfg: dict, argv) -> int:
    data = _require(args.data, "--data")
    tr, te, vocab = _read_dataset(data)
    mc = _model_config(cfg)
    tc = _train_config(cfg, args)
    seeds = [tc.seed + k for k in range(args.seeds)]
    rows = run_ablation(mc, vocab, tr, te, tc, seeds)
    table = evaluation.format_table([(f"{r.name} (seed {r.seed})", r.report) for r in rows])
    means = mean_auc(rows)
    summary = "\n".join(f"{name:<22}mean AUC {v:.4f}" for name, v in means.items())
    text = table + "\n\n" + summary
    out = _out_dir(args)
    (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    (out / "ablation.json").write_text(json.dumps(
        {"rows": [{"name": r.name, "seed": r.seed, "best_epoch": r.best_epoch, "report": r.report.to_dict()}
                  for r in rows], "mean_auc": means}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out, "ablate", argv, {"model": mc.to_dict(), "train": tc.to_dict(), "seeds": seeds},
                   tc.seed, [data], [out / "ablation.txt", out / "ablation.json"])
    print(text)
    return 0


def cmd_explain(args, cfg: dict, argv) -> int:
    data = _require(args.data, "--data")
    ckpt = _require(args.checkpoint, "--checkpoint")
    _, te, vocab = _read_dataset(data)
    params, mc, _ = _load_checkpoint(ckpt)
    if args.student is not None or args.course is not None:
        chosen = [s for s in te if vocab.entity(s.student).value == args.student
                  and vocab.entity(s.course).value == args.course]
        if not chosen:
            raise DataError(f"no test pair ({args.student}, {args.course})")
        samples = chosen[:1]
    else:
        start = args.index
        if not 0 <= start < len(te):
            raise DataError(f"index {start} outside the {len(te)} test pairs")
        samples = te[start:start + args.count]
    fmt = args.format or "text"
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    written = []
    for k, smp in enumerate(samples):
        trace = predict(params, mc, collate([tensorize(smp, vocab)], vocab.n_students))
        report = explain.build_report(trace, smp, vocab)
        ext = {"json": "json", "dot": "dot", "text": "txt"}[fmt]
        target = out / f"report_{k:03d}.{ext}" if out is not None else None
        text = explain.export(report, fmt, target)
        if target is not None:
            written.append(target)
        else:
            print(text)
    if out is not None:
        write_manifest(out, "explain", argv, {"format": fmt}, None, [data, ckpt], written)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "sample": cmd_sample,
    "train": cmd_train,
    "gridsearch": cmd_gridsearch,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "explain": cmd_explain,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="input graph file or dataset directory")
    common.add_argument("--checkpoint", help="parameter container written by train")
    common.add_argument("--format", choices=("json", "dot", "text"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="espa", description="Student failure prediction over a knowledge graph")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="generate a synthetic graph")
    p.add_argument("--null-signal", action="store_true", help="labels independent of the graph")
    sub.add_parser("ingest", parents=[common], help="validate a triple file and summarize it")
    p = sub.add_parser("sample", parents=[common], help="enumerate paths and write a dataset")
    p.add_argument("--split-term", type=int)
    p.add_argument("--limit", type=int)
    p.add_argument("--max-paths", type=int)
    for name in ("train", "gridsearch", "ablate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--epochs", type=int)
        p.add_argument("--learning-rate", type=float)
        p.add_argument("--batch-size", type=int)
        if name == "ablate":
            p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    sub.add_parser("eval", parents=[common], help="score a checkpoint on the test split")
    p = sub.add_parser("explain", parents=[common], help="attention reports for test pairs")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--student")
    p.add_argument("--course")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "eval" and args.format is None:
        args.format = "text"
    if args.command == "eval" and args.format == "dot":
        print("usage error: eval supports --format json or text", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg, argv)
    except argparse.ArgumentTypeError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, KGError, sampler.ConfigurationError, synth.SynthError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
