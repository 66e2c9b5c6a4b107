"""Command-line entry point: ``querylife <subcommand> ...``.

Exit status is 0 on success, 2 for an invalid config or arguments, 3 for
missing inputs and 1 for a failed check or aborted run.  Failures print one
JSON line on stderr: ``{"error": kind, "path": ..., "message": ...}``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import (
    OUT_DIR_ENV,
    PRESETS,
    ConfigError,
    RunConfig,
    config_to_dict,
    dump_config,
    load_config,
    preset_path,
)

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3

log = logging.getLogger("querylife")


class MissingInput(FileNotFoundError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with its own status
        raise ConfigError("argv", message)


def _fail(kind: str, message: str, path: str | None = None) -> None:
    sys.stderr.write(json.dumps({"error": kind, "path": path, "message": message}, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ------------------------------------------------------------------ config

def _resolve_config(args) -> RunConfig:
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "genfilt_sigma", None) is not None:
        overrides.append(f"genfilt.threshold={args.genfilt_sigma}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "data_dir", None):
        overrides.append(f"data_dir={json.dumps(args.data_dir)}")
    src = Path(args.config) if args.config else preset_path(args.preset)
    if not src.exists():
        raise MissingInput(str(src))
    cfg = load_config(src, overrides)
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    return cfg


def _write_manifest(cfg: RunConfig, out_dir: Path, command: str, extra: dict) -> Path:
    dump_config(cfg, out_dir / "resolved_config.json")
    body = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
        "config_sha256": _sha256(out_dir / "resolved_config.json"),
        **extra,
    }
    path = out_dir / f"manifest.{command}.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingInput(str(path))
    return path


# -------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    from .corpus.synth import CorpusConfig, generate_corpus

    base = CorpusConfig()
    if args.config or args.preset != "reference":
        base = _resolve_config(args).corpus
    counts = base.counts
    if args.counts:
        try:
            counts = tuple(int(x) for x in args.counts.split(","))
        except ValueError:
            raise ConfigError("corpus.counts", f"expected three comma-separated integers, got {args.counts!r}") from None
    cats = tuple(args.categories.split(",")) if args.categories else base.categories
    cfg = CorpusConfig(
        seed=args.seed if args.seed is not None else base.seed,
        counts=counts,
        eval_count=args.eval_count if args.eval_count is not None else base.eval_count,
        noise_rate=args.noise_rate if args.noise_rate is not None else base.noise_rate,
        image_size=args.image_size if args.image_size is not None else base.image_size,
        image_noise=base.image_noise,
        categories=cats,
        category_mix=base.category_mix if cats == base.categories else None,
        click_catalog=base.click_catalog,
        image_format=args.image_format or base.image_format,
        pair_title_leak=base.pair_title_leak,
        title_leak=base.title_leak,
    )
    try:
        cfg.validate()
    except ValueError as err:
        msg = str(err)
        raise ConfigError(msg.split(" ", 1)[0], msg) from None
    manifest = generate_corpus(cfg, args.out_dir)
    print(json.dumps({"out_dir": str(args.out_dir), "duplicate_query_density": manifest["duplicate_query_density"]}))
    return EXIT_OK


def cmd_genfilt(args) -> int:
    from .corpus.data import load_dataset
    from .genfilt import CACHE_NAME, SubprocessGenerator, SyntheticGenerator, precompute_features, read_responses, write_requests

    cfg = _resolve_config(args)
    data = Path(cfg.data_dir)
    out = Path(cfg.out_dir)
    splits = [load_dataset(_need(data / s.dataset)) for s in cfg.schedule.stages[1:]]
    out.mkdir(parents=True, exist_ok=True)
    if args.write_requests:
        n = write_requests([e for ds in splits for e in ds], out / args.write_requests)
        print(json.dumps({"requests": str(out / args.write_requests), "count": n}))
        return EXIT_OK
    cache = out / CACHE_NAME
    if args.responses:
        feats = read_responses(_need(Path(args.responses)))
        with open(cache, "w", encoding="utf-8") as fh:
            for pid in sorted(feats):
                fh.write(json.dumps(feats[pid].to_json(), sort_keys=True) + "\n")
    else:
        gen = SubprocessGenerator(args.generator_cmd.split()) if args.generator_cmd else \
            SyntheticGenerator(image_size=cfg.encoder.image_size)
        try:
            feats = precompute_features(splits, gen, cache)
        finally:
            if hasattr(gen, "close"):
                gen.close()
    failed = sum(1 for f in feats.values() if not f.ok)
    _write_manifest(cfg, out, "genfilt", {"cache": str(cache), "cache_sha256": _sha256(cache),
                                          "products": len(feats), "failed": failed})
    print(json.dumps({"cache": str(cache), "products": len(feats), "failed": failed}))
    return EXIT_OK


def _parse_stages(args) -> tuple[int, ...]:
    if args.stage is not None:
        if args.stage not in (1, 2, 3):
            raise ConfigError("--stage", "must be 1, 2 or 3")
        return (args.stage,)
    if args.stages in (None, "all"):
        return (1, 2, 3)
    try:
        stages = tuple(sorted({int(s) for s in args.stages.split(",")}))
    except ValueError:
        raise ConfigError("--stages", f"expected 'all' or a list like 1,2 (got {args.stages!r})") from None
    if not stages or any(s not in (1, 2, 3) for s in stages):
        raise ConfigError("--stages", "stages must be drawn from 1, 2, 3")
    return stages


def cmd_train(args) -> int:
    from .corpus.training import TrainingAborted, checkpoint_path, run_training_schedule
    from .genfilt import CACHE_NAME

    cfg = _resolve_config(args)
    stages = _parse_stages(args)
    data = Path(cfg.data_dir)
    _need(data / "vocab.json")
    for k in stages:
        _need(data / cfg.schedule.stages[k - 1].dataset)
    out = Path(cfg.out_dir)
    if stages[0] > 1 and not args.init_checkpoint:
        _need(checkpoint_path(out, stages[0] - 1))
    if args.init_checkpoint:
        _need(Path(args.init_checkpoint))
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "resolved_config.json")
    try:
        result = run_training_schedule(
            cfg.encoder, cfg.losses, cfg.schedule.stages, cfg.schedule.optimizer, data, out, cfg.seed,
            stages=stages, genfilt=cfg.genfilt, init_checkpoint=args.init_checkpoint,
            precision=cfg.precision, feature_cache=out / CACHE_NAME,
        )
    except TrainingAborted as err:
        _fail("aborted", str(err))
        return EXIT_FAILED
    except ValueError as err:
        raise ConfigError("run", str(err)) from None
    ckpts = {str(k): {"path": v, "sha256": _sha256(Path(v))} for k, v in sorted(result.checkpoints.items())}
    previous = out / "manifest.train.json"
    if previous.exists():
        earlier = json.loads(previous.read_text(encoding="utf-8")).get("checkpoints", {})
        ckpts = {**{k: v for k, v in earlier.items() if k not in ckpts}, **ckpts}
    _write_manifest(cfg, out, "train", {"stages": list(stages), "checkpoints": ckpts,
                                        "seconds": round(result.seconds, 2)})
    print(json.dumps({"out_dir": str(out), "checkpoints": {k: v["sha256"] for k, v in ckpts.items()}}))
    return EXIT_OK


def _load_model(cfg: RunConfig, checkpoint: str | None):
    from .corpus.training import checkpoint_path, load_tokenizer
    from .encoders import QueryLifeModel

    ck = Path(checkpoint) if checkpoint else checkpoint_path(cfg.out_dir, 3)
    model = QueryLifeModel.load(_need(ck))
    tok = load_tokenizer(_need(Path(cfg.data_dir)), model.cfg.max_text_len)
    return model, tok, ck


def cmd_eval(args) -> int:
    from .corpus.data import load_dataset
    from .eval import EvalConfigError, evaluate, export_projection, pick_projection_query

    cfg = _resolve_config(args)
    model, tok, ck = _load_model(cfg, args.checkpoint)
    examples = load_dataset(_need(Path(cfg.data_dir) / args.split))
    out = Path(args.report_dir) if args.report_dir else Path(cfg.out_dir) / "eval"
    try:
        report = evaluate(model, tok, examples, cfg.eval,
                          meta={"checkpoint": str(ck), "checkpoint_sha256": _sha256(ck), "seed": cfg.seed})
    except EvalConfigError as err:
        raise ConfigError("eval.candidates", str(err)) from None
    written = report.write(out)
    query = pick_projection_query(examples)
    if query is not None:
        pos = [e for e in examples if e.query == query and e.positive]
        neg = [e for e in examples if e.query == query and not e.positive]
        export_projection(model, tok, query, pos, neg, out / "projection.csv")
        written.append(out / "projection.csv")
    _write_manifest(cfg, out, "eval", {"checkpoint": str(ck), "checkpoint_sha256": _sha256(ck),
                                       "artifacts": {p.name: _sha256(p) for p in written}})
    print(json.dumps({"report": str(out / "report.json"), "auc": report.auc}, sort_keys=True))
    return EXIT_OK


def cmd_export_projection(args) -> int:
    from .corpus.data import load_dataset
    from .eval import export_projection

    cfg = _resolve_config(args)
    model, tok, _ = _load_model(cfg, args.checkpoint)
    examples = load_dataset(_need(Path(cfg.data_dir) / args.split))
    pos = [e for e in examples if e.query == args.query and e.positive]
    neg = [e for e in examples if e.query == args.query and not e.positive]
    if len(pos) < 2 or len(neg) < 2:
        raise ConfigError("--query", f"query {args.query!r} has {len(pos)} positives and {len(neg)} negatives; need 2 of each")
    out = Path(args.out) if args.out else Path(cfg.out_dir) / "projection.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = export_projection(model, tok, args.query, pos, neg, out)
    print(json.dumps({"projection": str(out), "rows": len(rows)}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import format_table, run_gradcheck

    rows = run_gradcheck(trials=args.trials, seed=args.seed or 0)
    print(format_table(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_FAILED


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="querylife", description="Query-aware language-image fusion for product relevance.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, out=True):
        sp.add_argument("--config", help="run config JSON (default: the chosen preset)")
        sp.add_argument("--preset", default="reference", choices=PRESETS)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one scalar config leaf")
        sp.add_argument("--genfilt-sigma", type=float, help="override genfilt.threshold")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--data-dir")
        if out:
            sp.add_argument("--out-dir", help=f"output directory (also settable via {OUT_DIR_ENV})")

    g = sub.add_parser("gen-data", help="write the synthetic corpus")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--counts", help="stage1,stage2,stage3 example counts")
    g.add_argument("--eval-count", type=int)
    g.add_argument("--noise-rate", type=float)
    g.add_argument("--image-size", type=int)
    g.add_argument("--categories", help="comma-separated subset of dress,monitor,phone")
    g.add_argument("--image-format", choices=("png", "npy"))
    g.add_argument("--config")
    g.add_argument("--preset", default="reference", choices=PRESETS)
    g.set_defaults(func=cmd_gen_data, set=None, genfilt_sigma=None, data_dir=None)

    f = sub.add_parser("genfilt", help="precompute generated features for GenFilt")
    with_config(f)
    f.add_argument("--generator-cmd", help="external generator speaking line-delimited JSON")
    f.add_argument("--write-requests", metavar="FILE", help="write adapter requests under the out dir and stop")
    f.add_argument("--responses", metavar="FILE", help="build the cache from an adapter response file")
    f.set_defaults(func=cmd_genfilt)

    t = sub.add_parser("train", help="run training stages")
    with_config(t)
    t.add_argument("--stage", type=int)
    t.add_argument("--stages", default=None, help="'all' or a comma-separated list")
    t.add_argument("--init-checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="write the evaluation report")
    with_config(e)
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="eval.jsonl")
    e.add_argument("--report-dir")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-projection", help="2-D projection of one query's embeddings")
    with_config(x)
    x.add_argument("--checkpoint")
    x.add_argument("--query", required=True)
    x.add_argument("--split", default="eval.jsonl")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_projection)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(list(sys.argv[1:] if argv is None else argv))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        return args.func(args)
    except ConfigError as err:
        _fail("config", err.message, err.path or None)
        return EXIT_CONFIG
    except (MissingInput, FileNotFoundError) as err:
        missing = err.filename if getattr(err, "filename", None) else str(err)
        _fail("missing-input", f"required input not found: {missing}", str(missing))
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
