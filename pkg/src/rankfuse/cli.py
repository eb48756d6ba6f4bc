"""Command-line pipeline: gen-data, encoder, train, eval, sweep, rank.

Every command takes --out-dir, echoes its effective configuration there as
`config.resolved`, and writes exactly one `manifest.json` recording the
command, the resolved config, input/output file digests, and wall-clock
duration. Exit codes: 0 success, 1 validation or missing-input error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from time import perf_counter

from . import config as cf
from . import data as dt
from . import evaluation as ev
from . import model as md
from . import training as tr
from .encoder import (
    build_index,
    encoder_digest,
    load_encoder,
    load_index,
    pretrain_encoder,
    finetune_encoder,
    save_encoder,
    save_index,
)
from .errors import (
    DatasetParseError,
    DependencyError,
    DimensionError,
    ValidationError,
)

ALPHA_SWEEP = (1.0, 2.0, 4.0, 6.0, 8.0)
GAMMA_SWEEP = (0.0, 0.1, 0.3, 0.5, 1.0)


# ---------------------------------------------------------------------------
# plumbing


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DependencyError(f"{what} not found: {p}")
    return p


def _prepare_out_dir(out_dir, force: bool) -> Path:
    out = Path(out_dir)
    if out.exists():
        if not out.is_dir():
            raise ValidationError(f"--out-dir exists and is not a directory: {out}")
        if any(out.iterdir()) and not force:
            raise ValidationError(f"--out-dir is not empty (use --force to overwrite): {out}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out, command, cfg, inputs, outputs, started, extra=None):
    manifest = {
        "command": command,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()},
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {str(p): _sha256(Path(p)) for p in outputs},
        "duration_seconds": round(perf_counter() - started, 3),
    }
    if extra:
        manifest.update(extra)
    path = Path(out) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _overrides(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _write_lines(path: Path, lines) -> Path:
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# commands


GEN_KEYS = ("seed", "n_users", "n_items", "n_queries", "n_impressions", "n_categories", "n_descriptors")


def cmd_gen_data(args) -> int:
    started = perf_counter()
    cfg = cf.resolve_config(args.config, _overrides(args, GEN_KEYS))
    out = _prepare_out_dir(args.out_dir, args.force)
    samples, stats = dt.generate_corpus(cf.to_generator_config(cfg))
    train, validation, test = dt.split_corpus(samples)

    outputs = []
    for name, subset in (
        ("dataset.tsv", samples),
        ("train.tsv", train),
        ("validation.tsv", validation),
        ("test.tsv", test),
    ):
        path = out / name
        dt.write_dataset(subset, path)
        outputs.append(path)
    sidecar = out / "ground_truth.tsv"
    dt.write_sidecar(samples, sidecar)
    outputs.append(sidecar)
    outputs.append(cf.write_resolved(cfg, out))

    inputs = [args.config] if args.config else []
    _write_manifest(out, "gen-data", cfg, inputs, outputs, started, extra={"stats": stats})
    print(
        f"gen-data: {len(samples)} impressions "
        f"(train {len(train)}, validation {len(validation)}, test {len(test)}) -> {out}"
    )
    return 0


ENCODER_KEYS = (
    "seed",
    "vocab_size",
    "d_raw",
    "d",
    "encoder_lr",
    "encoder_batch_size",
    "encoder_epochs",
    "finetune_lr_factor",
    "finetune_epochs",
)


def cmd_encoder(args) -> int:
    started = perf_counter()
    cfg = cf.resolve_config(args.config, _overrides(args, ENCODER_KEYS))
    out = _prepare_out_dir(args.out_dir, args.force)
    inputs = [args.config] if args.config else []

    if args.encoder_command == "pretrain":
        train_file = _require(args.train_file, "train split")
        inputs.append(train_file)
        samples = dt.read_dataset(train_file)
        pairs = [(s.query_text, s.item_text, s.click) for s in samples]
        params, trace = pretrain_encoder(pairs, cf.to_encoder_config(cfg))
        ckpt = out / "encoder.ckpt"
        save_encoder(params, ckpt)
        log = _write_lines(
            out / "encoder.log", [f"{e}\t{loss:.10f}" for e, loss in enumerate(trace)]
        )
        outputs = [ckpt, log, cf.write_resolved(cfg, out)]
        _write_manifest(out, "encoder-pretrain", cfg, inputs, outputs, started)
        print(f"encoder pretrain: {len(pairs)} pairs, {len(trace)} epochs -> {ckpt}")
        return 0

    if args.encoder_command == "finetune":
        ckpt_in = _require(args.checkpoint, "encoder checkpoint")
        train_file = _require(args.train_file, "train split")
        inputs.extend([ckpt_in, train_file])
        params = load_encoder(ckpt_in)
        # architecture comes from the checkpoint; rates come from the config
        merged = dict(
            vocab_size=params.config.vocab_size,
            d_raw=params.config.d_raw,
            d=params.config.d,
            seed=cfg["seed"],
            lr=cfg["encoder_lr"],
            batch_size=cfg["encoder_batch_size"],
            epochs=cfg["encoder_epochs"],
            finetune_lr_factor=cfg["finetune_lr_factor"],
            finetune_epochs=cfg["finetune_epochs"],
        )
        from .encoder import EncoderConfig

        samples = dt.read_dataset(train_file)
        labeled = [(s.query_text, s.item_text, s.rsl) for s in samples]
        params, trace = finetune_encoder(params, labeled, EncoderConfig(**merged))
        ckpt = out / "encoder.ckpt"
        save_encoder(params, ckpt)
        log = _write_lines(
            out / "encoder.log", [f"{e}\t{loss:.10f}" for e, loss in enumerate(trace)]
        )
        outputs = [ckpt, log, cf.write_resolved(cfg, out)]
        _write_manifest(out, "encoder-finetune", cfg, inputs, outputs, started)
        print(f"encoder finetune: {len(labeled)} pairs, {len(trace)} epochs -> {ckpt}")
        return 0

    # build-index
    ckpt_in = _require(args.checkpoint, "encoder checkpoint")
    if not args.dataset_file:
        raise ValidationError("build-index needs at least one --dataset-file")
    inputs.append(ckpt_in)
    params = load_encoder(ckpt_in)
    texts: set[str] = set()
    pairs: set[tuple[str, str]] = set()
    for dataset_path in args.dataset_file:
        dataset_path = _require(dataset_path, "dataset file")
        inputs.append(dataset_path)
        for s in dt.read_dataset(dataset_path):
            texts.update([s.query_text, s.item_text])
            pairs.add((s.query_text, s.item_text))
            for q, i in s.history:
                texts.update([q, i])
                pairs.add((q, i))
    index = build_index(params, sorted(texts), sorted(pairs), encoder_digest(params))
    index_path = out / "index.tsv"
    save_index(index, index_path)
    outputs = [index_path, cf.write_resolved(cfg, out)]
    _write_manifest(out, "encoder-build-index", cfg, inputs, outputs, started)
    print(f"build-index: {len(index.text)} texts, {len(index.pair)} pairs -> {index_path}")
    return 0


TRAIN_KEYS = (
    "seed",
    "d",
    "alpha",
    "beta",
    "gamma",
    "batch_size",
    "stage1_epochs",
    "stage2_epochs",
    "lr_stage1",
    "lr_base",
    "lr_rsl_finetune",
    "lr_prim",
    "grouping",
)


def _train_variant(args) -> tuple[str, bool]:
    """Map ablation flags to (variant, force_gamma_zero); reject conflicts."""
    others = [
        name
        for flag, name in (
            (args.no_prim, "--no-prim"),
            (args.no_regularizer, "--no-regularizer"),
            (args.no_two_stage, "--no-two-stage"),
        )
        if flag
    ]
    if args.base_only and others:
        raise ValidationError(f"--base-only conflicts with {', '.join(others)}")
    if args.gamma is not None and (args.no_regularizer or args.base_only):
        raise ValidationError("explicit --gamma conflicts with a flag that forces gamma=0")
    if args.base_only:
        return "base-only", True
    variant = "no-prim" if args.no_prim else "full"
    return variant, bool(args.no_regularizer)


def cmd_train(args) -> int:
    started = perf_counter()
    variant, force_gamma_zero = _train_variant(args)
    cfg = cf.resolve_config(args.config, _overrides(args, TRAIN_KEYS))
    out = _prepare_out_dir(args.out_dir, args.force)
    train_file = _require(args.train_file, "train split")
    index_file = _require(args.index, "embedding index")

    samples = dt.read_dataset(train_file)
    index = load_index(index_file)
    mcfg = cf.to_model_config(cfg, variant)
    cache = md.TrainingCache(samples, index, mcfg)
    params = md.build_model(mcfg)
    tcfg = cf.to_train_config(
        cfg, gamma=0.0 if force_gamma_zero else None, no_two_stage=args.no_two_stage
    )
    params, reports = tr.train_two_stage(cache, params, tcfg)

    ckpt = out / "model.ckpt"
    md.save_model(params, ckpt, extra_meta={"train_variant": variant})
    log = _write_lines(out / "training.log", [r.to_line() for r in reports])
    outputs = [ckpt, log, cf.write_resolved(cfg, out)]
    inputs = ([args.config] if args.config else []) + [train_file, index_file]
    _write_manifest(out, "train", cfg, inputs, outputs, started, extra={"variant": variant})
    last = reports[-1].total if reports else float("nan")
    print(f"train [{variant}]: {len(samples)} impressions, final batch loss {last:.6f} -> {ckpt}")
    return 0


def _parse_checkpoint_specs(specs) -> list[tuple[str, str]]:
    if not specs:
        raise ValidationError("eval needs at least one --checkpoint NAME=PATH")
    out = []
    for spec in specs:
        if "=" not in spec:
            raise ValidationError(f"--checkpoint expects NAME=PATH, got {spec!r}")
        name, path = spec.split("=", 1)
        if not name or not path:
            raise ValidationError(f"--checkpoint expects NAME=PATH, got {spec!r}")
        out.append((name, str(_require(path, f"checkpoint {name}"))))
    return out


def cmd_eval(args) -> int:
    started = perf_counter()
    cfg = cf.resolve_config(args.config, _overrides(args, ("seed", "batch_size")))
    out = _prepare_out_dir(args.out_dir, args.force)
    variants = _parse_checkpoint_specs(args.checkpoint)
    test_file = _require(args.test_file, "test split")
    index_file = _require(args.index, "embedding index")

    samples = dt.read_dataset(test_file)
    index = load_index(index_file)
    rows = ev.run_comparison(variants, samples, index, batch_size=cfg["batch_size"])
    table = ev.format_comparison(rows)
    print(table)

    table_path = _write_lines(out / "comparison.tsv", table.splitlines())
    metrics_path = _write_lines(out / "metrics.txt", ev.metric_lines(rows))
    outputs = [table_path, metrics_path, cf.write_resolved(cfg, out)]
    inputs = ([args.config] if args.config else []) + [test_file, index_file]
    inputs += [path for _, path in variants]
    _write_manifest(out, "eval", cfg, inputs, outputs, started)
    return 0


def cmd_sweep(args) -> int:
    started = perf_counter()
    cfg = cf.resolve_config(args.config, _overrides(args, TRAIN_KEYS))
    out = _prepare_out_dir(args.out_dir, args.force)
    train_file = _require(args.train_file, "train split")
    test_file = _require(args.test_file, "test split")
    index_file = _require(args.index, "embedding index")

    if args.values:
        try:
            values = tuple(float(v) for v in args.values.split(","))
        except ValueError:
            raise ValidationError(f"--values expects comma-separated numbers: {args.values!r}") from None
    else:
        values = ALPHA_SWEEP if args.param == "alpha" else GAMMA_SWEEP
    if len(values) < 2:
        raise ValidationError("sweep needs at least 2 values")

    train_samples = dt.read_dataset(train_file)
    test_samples = dt.read_dataset(test_file)
    index = load_index(index_file)
    mcfg = cf.to_model_config(cfg, "full")
    cache = md.TrainingCache(train_samples, index, mcfg)

    series = ["value\tauc\tgauc\trelevance_score"]
    outputs = []
    for i, value in enumerate(values):
        run_cfg = dict(cfg)
        run_cfg["beta"] = 1.0  # held constant across sweeps
        run_cfg[args.param] = value
        tcfg = cf.to_train_config(run_cfg)
        params = md.build_model(mcfg)
        params, _ = tr.train_two_stage(cache, params, tcfg)
        scores = md.score_dataset(params, test_samples, index, batch_size=cfg["batch_size"])
        report = ev.evaluate_scores(ev.samples_to_impressions(test_samples, scores), index)
        row = {
            "variant": f"run{i}",
            "auc": report.auc,
            "rela_impr": 0.0,
            "gauc": report.gauc,
            "relevance_score": report.relevance_score,
        }
        point_path = _write_lines(out / f"metrics-{i}.txt", ev.metric_lines([row]))
        outputs.append(point_path)
        # read back through the machine-readable format; .17g round-trips floats
        parsed = ev.read_metrics_file(point_path)
        series.append(
            f"{value!r}\t{parsed[f'run{i}.auc']:.17g}"
            f"\t{parsed[f'run{i}.gauc']:.17g}"
            f"\t{parsed[f'run{i}.relevance_score']:.17g}"
        )
        print(f"sweep {args.param}={value}: auc {report.auc:.6f} gauc {report.gauc:.6f}")

    series_path = _write_lines(out / f"sweep-{args.param}.tsv", series)
    outputs.append(series_path)
    outputs.append(cf.write_resolved(cfg, out))
    inputs = ([args.config] if args.config else []) + [train_file, test_file, index_file]
    _write_manifest(
        out, "sweep", cfg, inputs, outputs, started,
        extra={"param": args.param, "values": list(values)},
    )
    return 0


def _read_user_context(path) -> tuple[int, list[tuple[str, str]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("user_id="):
        raise DatasetParseError(1, "expected first line user_id=<int>")
    try:
        user_id = int(lines[0][len("user_id="):])
    except ValueError:
        raise DatasetParseError(1, f"bad user id: {lines[0]!r}") from None
    history = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("^")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise DatasetParseError(line_no, "history line must be <query>^<item>")
        history.append((parts[0], parts[1]))
    if len(history) > dt.HISTORY_LIMIT:
        raise ValidationError(f"history exceeds {dt.HISTORY_LIMIT} entries")
    return user_id, history


def _read_candidates(path) -> list[tuple[int, str]]:
    out = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1]:
            raise DatasetParseError(line_no, "candidate line must be <item_id>\\t<item_text>")
        try:
            out.append((int(parts[0]), parts[1]))
        except ValueError:
            raise DatasetParseError(line_no, f"bad item id: {parts[0]!r}") from None
    if not out:
        raise ValidationError("candidates file has no candidates")
    return out


def cmd_rank(args) -> int:
    started = perf_counter()
    cfg = cf.resolve_config(args.config, _overrides(args, ("seed",)))
    out = _prepare_out_dir(args.out_dir, args.force)
    ckpt_file = _require(args.checkpoint, "model checkpoint")
    index_file = _require(args.index, "embedding index")
    user_file = _require(args.user_file, "user context file")
    cand_file = _require(args.candidates_file, "candidates file")

    params, _ = md.load_model(ckpt_file)
    index = load_index(index_file)
    if args.encoder:
        index.attach_encoder(load_encoder(_require(args.encoder, "encoder checkpoint")))
    user_id, history = _read_user_context(user_file)
    candidates = _read_candidates(cand_file)

    scored = []
    for item_id, item_text in candidates:
        sample = md.sample_for_scoring(user_id, args.query, item_id, item_text, history)
        scored.append((item_id, item_text, md.personalized_score(sample, index, params)))
    scored.sort(key=lambda row: (-row[2].final, row[0]))

    rank_lines = [f"{item_id}\t{item_text}\t{bd.final:.17g}" for item_id, item_text, bd in scored]
    for line in rank_lines:
        print(line)
    outputs = [_write_lines(out / "ranking.tsv", rank_lines)]
    if args.explain:
        outputs.append(_write_lines(out / "explain.tsv", [bd.to_line() for _, _, bd in scored]))
    outputs.append(cf.write_resolved(cfg, out))
    inputs = ([args.config] if args.config else []) + [ckpt_file, index_file, user_file, cand_file]
    if args.encoder:
        inputs.append(args.encoder)
    _write_manifest(out, "rank", cfg, inputs, outputs, started)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p):
    p.add_argument("--out-dir", required=True, help="output directory (one per command run)")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty out-dir")


def _add_override(p, key, kind=float, **kw):
    flag = "--" + key.replace("_", "-")
    p.add_argument(flag, dest=key, type=kind, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus and splits")
    _add_common(p)
    for key in GEN_KEYS:
        _add_override(p, key, int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("encoder", help="encoder pretrain / finetune / build-index")
    enc = p.add_subparsers(dest="encoder_command", required=True)

    pp = enc.add_parser("pretrain", help="pretrain the text encoder on click pairs")
    _add_common(pp)
    pp.add_argument("--train-file", required=True)
    for key in ("seed", "vocab_size", "d_raw", "d", "encoder_batch_size", "encoder_epochs"):
        _add_override(pp, key, int)
    for key in ("encoder_lr",):
        _add_override(pp, key, float)
    pp.set_defaults(func=cmd_encoder)

    pf = enc.add_parser("finetune", help="finetune a pretrained encoder on relevance levels")
    _add_common(pf)
    pf.add_argument("--checkpoint", required=True, help="pretrained encoder checkpoint")
    pf.add_argument("--train-file", required=True)
    for key in ("seed", "encoder_batch_size", "finetune_epochs"):
        _add_override(pf, key, int)
    for key in ("encoder_lr", "finetune_lr_factor"):
        _add_override(pf, key, float)
    pf.set_defaults(func=cmd_encoder)

    pb = enc.add_parser("build-index", help="precompute embeddings for dataset splits")
    _add_common(pb)
    pb.add_argument("--checkpoint", required=True, help="encoder checkpoint")
    pb.add_argument(
        "--dataset-file", action="append", default=[], help="dataset split (repeatable)"
    )
    pb.set_defaults(func=cmd_encoder)

    p = sub.add_parser("train", help="two-stage training with ablation flags")
    _add_common(p)
    p.add_argument("--train-file", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--no-two-stage", action="store_true", help="skip the warm-up stage")
    p.add_argument("--no-regularizer", action="store_true", help="drop the listwise term")
    p.add_argument("--no-prim", action="store_true", help="freeze the incentive path at 1")
    p.add_argument("--base-only", action="store_true", help="single-head CTR model, no fusion")
    for key in ("seed", "d", "batch_size", "stage1_epochs", "stage2_epochs"):
        _add_override(p, key, int)
    for key in ("alpha", "beta", "gamma", "lr_stage1", "lr_base", "lr_rsl_finetune", "lr_prim"):
        _add_override(p, key, float)
    _add_override(p, "grouping", str, choices=tr.GROUPINGS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compare checkpoints on a split")
    _add_common(p)
    p.add_argument(
        "--checkpoint", action="append", default=[], help="NAME=PATH (repeatable; first is base)"
    )
    p.add_argument("--test-file", required=True)
    p.add_argument("--index", required=True)
    _add_override(p, "batch_size", int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate across hyperparameter values")
    _add_common(p)
    p.add_argument("--param", required=True, choices=("alpha", "gamma"))
    p.add_argument("--values", default=None, help="comma-separated values (default per param)")
    p.add_argument("--train-file", required=True)
    p.add_argument("--test-file", required=True)
    p.add_argument("--index", required=True)
    for key in ("seed", "d", "batch_size", "stage1_epochs", "stage2_epochs"):
        _add_override(p, key, int)
    for key in ("alpha", "beta", "gamma", "lr_stage1", "lr_base", "lr_rsl_finetune", "lr_prim"):
        _add_override(p, key, float)
    _add_override(p, "grouping", str, choices=tr.GROUPINGS)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rank", help="score and rank candidates for one query")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--index", required=True)
    p.add_argument("--encoder", default=None, help="encoder checkpoint for unseen texts")
    p.add_argument("--query", required=True)
    p.add_argument("--user-file", required=True, help="user_id=<int> line, then <query>^<item> history lines")
    p.add_argument("--candidates-file", required=True, help="<item_id>\\t<item_text> lines")
    p.add_argument("--explain", action="store_true", help="write per-item score breakdowns")
    p.set_defaults(func=cmd_rank)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except (ValidationError, DependencyError, DatasetParseError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - the CLI boundary maps everything to exit 2
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
