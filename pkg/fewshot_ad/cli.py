"""
FEWSHOT-AD CLI
==============
Single entry point for the pipeline.

Usage:
    fewshot synth --out data
    fewshot pretrain --out base.ckpt
    fewshot customize data --category stripes --out stripes.ckpt
    fewshot generate-normals stripes.ckpt --count 100 --out pool/
    fewshot personalize stripes.ckpt data/stripes/test/spot --out personalized/
    fewshot bank stripes.ckpt --out stripes.bank [--pool pool/]
    fewshot score stripes.ckpt stripes.bank data/stripes/test --out reports.json
    fewshot map stripes.ckpt stripes.bank query.png --out map.png [--figure panel.png]
    fewshot eval data --category stripes --out runs/

Settings come from flag > --config file > defaults. Every command prints one
JSON summary line on stdout. Exit codes: 0 success, 1 user error, 2 internal
error.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import container
from .bank import MemoryBank, build_bank, export_pool, generate_normals, import_pool
from .config import RunConfig, resolve_config
from .customization import catalog_of, customize, references_of
from .datasets import list_categories, list_images, load_category, sample_references
from .denoiser import Denoiser
from .encoder import make_encoder
from .errors import ArtifactError, ConfigError, FewShotADError, TrainingDivergedError
from .evaluation import (ArtifactCache, ablation_suite, base_model_for, format_table,
                         query_seed, shot_sweep, summarize, text_features_for)
from .figures import localization_panel
from .imaging import read_mask, read_png, write_heatmap, write_png
from .personalization import personalize
from .prompts import catalog_for
from .scorer import FULL_MASK, mask_label, parse_mask, score_query
from .synth import DEFECT_KINDS, FAMILIES, SyntheticSpec, write_dataset

log = logging.getLogger("fewshot_ad.cli")

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2

# =============================================================================
# PLUMBING
# =============================================================================

class FewShotArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the user-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def setup_logging(level: str = "INFO", log_file: Optional[str] = None):
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format=LOG_FORMAT, handlers=handlers, force=True)


def emit(summary: Dict[str, Any]):
    """The machine-readable summary line."""
    print(json.dumps(summary, sort_keys=True, default=container.json_default), flush=True)


# Flags that overlay RunConfig fields; default None means "not given".
CONFIG_FLAGS: Tuple[Tuple[str, str, dict], ...] = (
    ("--t-ratio", "t_ratio", {"type": float}),
    ("--t-ratio-bank", "t_ratio_bank", {"type": float}),
    ("--alpha", "alpha", {"type": float}),
    ("--beta", "beta", {"type": float}),
    ("--temperature", "temperature", {"type": float}),
    ("--bank-capacity", "bank_capacity", {"type": int}),
    ("--shots", "shots", {"type": int}),
    ("--shot-sweep", "shot_sweep", {"type": int, "nargs": "+"}),
    ("--seeds", "seeds", {"type": int, "nargs": "+"}),
    ("--category", "category", {"type": str}),
    ("--image-size", "image_size", {"type": int, "nargs": 2}),
    ("--num-steps", "num_steps", {"type": int}),
    ("--epochs", "epochs", {"type": int}),
    ("--learning-rate", "learning_rate", {"type": float}),
    ("--per-image", "per_image", {"type": int}),
    ("--prompt-count", "prompt_count", {"type": int}),
    ("--generated-count", "generated_count", {"type": int}),
    ("--base-epochs", "base_epochs", {"type": int}),
    ("--workers", "workers", {"type": int}),
    ("--cache-dir", "cache_dir", {"type": str}),
)


def _common_parser() -> argparse.ArgumentParser:
    common = FewShotArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration file")
    common.add_argument("--log-level", default="INFO", help="DEBUG, INFO, WARNING")
    common.add_argument("--log-file", help="also log to this file")
    common.add_argument("--timing", action="store_true", default=None,
                        help="record per-query wall-clock")
    for flag, dest, kwargs in CONFIG_FLAGS:
        common.add_argument(flag, dest=dest, default=None, **kwargs)
    return common


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {dest: getattr(args, dest, None) for _, dest, _ in CONFIG_FLAGS}
    overrides["timing"] = getattr(args, "timing", None)
    return resolve_config(getattr(args, "config", None), overrides)


def _seed(args, config: RunConfig) -> int:
    return args.seed if getattr(args, "seed", None) is not None else config.seeds[0]


def _query_paths(target: str) -> List[Tuple[str, Path]]:
    path = Path(target)
    if path.is_file():
        return [(path.stem, path)]
    if not path.is_dir():
        raise ArtifactError("query path does not exist", path=str(path))
    found = []
    for sub in sorted({p.parent for p in path.rglob("*")} | {path}):
        for img in list_images(sub):
            found.append((img.relative_to(path).with_suffix("").as_posix(), img))
    if not found:
        raise ArtifactError("no query images found", path=str(path))
    return found


def _load_model(path: str) -> Denoiser:
    model = Denoiser.load(path)
    if "references" not in model.artifacts:
        raise ConfigError(f"{path} is a base checkpoint; run customize first")
    return model

# =============================================================================
# COMMANDS
# =============================================================================

def cmd_synth(args, config: RunConfig) -> int:
    size = tuple(config.image_size)
    written = []
    for family in args.families:
        spec = SyntheticSpec(texture_family=family, image_size=size, defect_kinds=tuple(args.kinds),
                             defect_area_frac=args.area_frac, seed=args.seed, channels=args.channels)
        manifest = write_dataset(spec, args.n_train, args.n_test_normal, args.n_test_anom, args.out)
        written.append({"category": family, "files": len(manifest.files)})
    emit({"command": "synth", "out": args.out, "categories": written})
    return EXIT_OK


def cmd_pretrain(args, config: RunConfig) -> int:
    shape = tuple(config.image_size) + (args.channels,)
    cache = ArtifactCache(config.cache_root())
    model = base_model_for(config, shape, cache)
    model.save(args.out)
    history = model.metadata.get("loss_history", [])
    emit({"command": "pretrain", "checkpoint": args.out, "sha256": container.file_sha256(args.out),
          "initial_loss": history[0] if history else None,
          "final_loss": history[-1] if history else None})
    return EXIT_OK


def cmd_customize(args, config: RunConfig) -> int:
    category = config.category
    if not category:
        raise ConfigError("customize needs --category (or 'category' in the config file)")
    seed = _seed(args, config)
    data = load_category(args.dataset, category, tuple(config.image_size))
    refs = sample_references(data, config.shots, seed)
    if args.base:
        base = Denoiser.load(args.base)
    else:
        base = base_model_for(config, data.image_shape, ArtifactCache(config.cache_root()))
    model = customize(base, refs, catalog_for(category), config.customization(), rng_seed=seed)
    model.save(args.out)
    history = model.metadata["loss_history"]
    emit({"command": "customize", "category": category, "shots": config.shots, "seed": seed,
          "checkpoint": args.out, "sha256": container.file_sha256(args.out),
          "initial_loss": history[0], "final_loss": history[-1]})
    return EXIT_OK


def cmd_generate_normals(args, config: RunConfig) -> int:
    model = _load_model(args.checkpoint)
    count = args.count if args.count is not None else config.generated_count
    seed = _seed(args, config)
    images = generate_normals(model, catalog_of(model), count, references_of(model),
                              config.t_ratio_bank, rng_seed=seed, prompt_count=config.prompt_count)
    manifest = export_pool(images, args.out, seed=seed,
                           model_hash=container.file_sha256(args.checkpoint))
    emit({"command": "generate-normals", "out": args.out, "count": manifest["count"], "seed": seed})
    return EXIT_OK


def cmd_personalize(args, config: RunConfig) -> int:
    model = _load_model(args.checkpoint)
    catalog = catalog_of(model)
    seed = _seed(args, config)
    out = Path(args.out)
    queries = _query_paths(args.query)
    for i, (query_id, path) in enumerate(queries):
        image = read_png(path, model.image_shape[:2])
        result = personalize(image, model, catalog, config.t_ratio,
                             rng_seed=query_seed(seed, i), prompt_count=config.prompt_count)
        write_png(result.personalized, out / f"{query_id}_personalized.png")
        record = {"query": query_id, "seed": seed, **result.to_record()}
        container.atomic_write_json(out / f"{query_id}.json", record)
    emit({"command": "personalize", "out": str(out), "queries": len(queries), "seed": seed})
    return EXIT_OK


def cmd_bank(args, config: RunConfig) -> int:
    model = _load_model(args.checkpoint)
    refs = references_of(model)
    capacity = config.bank_capacity
    if args.pool:
        generated = import_pool(args.pool)
    else:
        generated = generate_normals(model, catalog_of(model), max(capacity - refs.shot_count, 0),
                                     refs, config.t_ratio_bank, rng_seed=_seed(args, config),
                                     prompt_count=config.prompt_count)
    encoder = make_encoder(config.cell_sizes, config.feature_dim, config.encoder_seed)
    bank = build_bank(refs.images, generated, encoder, capacity)
    bank.save(args.out)
    emit({"command": "bank", "out": args.out, "entries": len(bank),
          "references": refs.shot_count, "generated": len(bank) - refs.shot_count,
          "encoder_hash": bank.encoder_hash, "sha256": container.file_sha256(args.out)})
    return EXIT_OK


def _scoring_setup(args, config: RunConfig):
    model = _load_model(args.checkpoint)
    bank = MemoryBank.load(args.bank)
    catalog = catalog_of(model)
    encoder = make_encoder(config.cell_sizes, config.feature_dim, config.encoder_seed)
    return model, bank, catalog, encoder, text_features_for(catalog, config.feature_dim)


def _score_one(image, index, model, bank, catalog, encoder, text, config, seed, mask,
               out_shape=None):
    fq = encoder.encode_image(image)
    fp = result = None
    if "P" in mask:
        result = personalize(image, model, catalog, config.t_ratio,
                             rng_seed=query_seed(seed, index), prompt_count=config.prompt_count)
        fp = encoder.encode_image(result.personalized)
    report = score_query(fq, fp, bank if "N" in mask else None, text, config.alpha, config.beta,
                         config.temperature, mask, out_shape)
    report.chosen_prompt = result.chosen_prompt if result else None
    report.seed = seed
    return report, result


def cmd_score(args, config: RunConfig) -> int:
    model, bank, catalog, encoder, text = _scoring_setup(args, config)
    mask = parse_mask(args.branches)
    seed = _seed(args, config)
    records = []
    for i, (query_id, path) in enumerate(_query_paths(args.query)):
        started = time.perf_counter()
        image = read_png(path, model.image_shape[:2])
        want_map = args.heatmaps is not None
        report, _ = _score_one(image, i, model, bank, catalog, encoder, text, config, seed, mask,
                               image.shape[:2] if want_map else None)
        report.query_id = query_id
        if config.timing:
            report.elapsed_ms = (time.perf_counter() - started) * 1000.0
        if want_map:
            write_heatmap(report.heatmap, Path(args.heatmaps) / f"{query_id}_map.png")
        records.append(report.to_record())
    container.atomic_write_json(args.out, {"branches": mask_label(mask), "reports": records})
    emit({"command": "score", "out": args.out, "queries": len(records),
          "max_a_score": max(r["a_score"] for r in records)})
    return EXIT_OK


def cmd_map(args, config: RunConfig) -> int:
    model, bank, catalog, encoder, text = _scoring_setup(args, config)
    seed = _seed(args, config)
    image = read_png(args.query, model.image_shape[:2])
    report, result = _score_one(image, 0, model, bank, catalog, encoder, text, config, seed,
                                FULL_MASK, image.shape[:2])
    write_heatmap(report.heatmap, args.out)
    if args.figure:
        mask = read_mask(args.mask, image.shape[:2]) if args.mask else None
        localization_panel(image, report.heatmap, args.figure, personalized=result.personalized,
                           mask=mask, title=Path(args.query).name, score=report.a_score)
    peak = np.unravel_index(int(np.argmax(report.heatmap)), report.heatmap.shape)
    emit({"command": "map", "out": args.out, "figure": args.figure, "a_score": report.a_score,
          "peak": [int(peak[0]), int(peak[1])], "heatmap_max": float(report.heatmap.max())})
    return EXIT_OK


def cmd_eval(args, config: RunConfig) -> int:
    categories = [config.category] if config.category else list_categories(args.dataset)
    if not categories:
        raise ConfigError(f"no categories found under {args.dataset}")
    use_disk = not args.no_cache
    results = []
    for category in categories:
        if args.mode in ("ablation", "all"):
            results += ablation_suite(args.dataset, category, config.shots, config.seeds, config,
                                      use_disk_cache=use_disk)
        if args.mode in ("sweep", "all"):
            results += shot_sweep(args.dataset, category, config.shot_sweep, config.seeds, config,
                                  use_disk_cache=use_disk)
    rows = summarize(results)

    out = Path(args.out or config.output_dir)
    container.atomic_write_bytes(
        out / "episodes.jsonl",
        b"".join(json.dumps(r.to_record(), sort_keys=True).encode() + b"\n" for r in results))
    container.atomic_write_json(out / "summary.json", {"config": config.to_dict(), "rows": rows})
    table = format_table(rows)
    container.atomic_write_bytes(out / "table.txt", table.encode() + b"\n")
    print(table, file=sys.stderr)
    emit({"command": "eval", "out": str(out), "episodes": len(results), "rows": len(rows),
          "config_hash": config.config_hash()})
    return EXIT_OK

# =============================================================================
# MAIN
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = FewShotArgumentParser(
        prog="fewshot",
        description="Few-shot anomaly detection with a customized diffusion model",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", parents=[common], help="write the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--families", nargs="+", default=list(FAMILIES), choices=FAMILIES)
    p.add_argument("--kinds", nargs="+", default=list(DEFECT_KINDS), choices=DEFECT_KINDS)
    p.add_argument("--area-frac", type=float, default=0.05)
    p.add_argument("--n-train", type=int, default=20)
    p.add_argument("--n-test-normal", type=int, default=30)
    p.add_argument("--n-test-anom", type=int, default=30)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common], help="train the base denoiser")
    p.add_argument("--out", required=True)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("customize", parents=[common], help="customize on k references")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--base", help="base checkpoint (default: cached pre-trained base)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_customize)

    p = sub.add_parser("generate-normals", parents=[common], help="export anomaly-free samples")
    p.add_argument("checkpoint")
    p.add_argument("--count", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate_normals)

    p = sub.add_parser("personalize", parents=[common], help="one-to-normal personalization")
    p.add_argument("checkpoint")
    p.add_argument("query", help="image file or folder")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_personalize)

    p = sub.add_parser("bank", parents=[common], help="build a memory bank file")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--pool", help="exported pool folder to use as generated samples")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_bank)

    p = sub.add_parser("score", parents=[common], help="score query images")
    p.add_argument("checkpoint")
    p.add_argument("bank")
    p.add_argument("query", help="image file or folder")
    p.add_argument("--out", required=True)
    p.add_argument("--branches", default="P,N,text")
    p.add_argument("--heatmaps", help="folder for per-query heatmaps")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("map", parents=[common], help="anomaly heatmap for one query")
    p.add_argument("checkpoint")
    p.add_argument("bank")
    p.add_argument("query")
    p.add_argument("--out", required=True)
    p.add_argument("--figure", help="also write a matplotlib panel")
    p.add_argument("--mask", help="ground-truth mask shown in the panel")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("eval", parents=[common], help="episodes, ablation and shot sweep")
    p.add_argument("dataset")
    p.add_argument("--out")
    p.add_argument("--mode", choices=("ablation", "sweep", "all"), default="ablation")
    p.add_argument("--no-cache", action="store_true", help="keep artifacts in memory only")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_USER

    setup_logging(args.log_level, args.log_file)
    try:
        config = config_from_args(args)
        return args.func(args, config)
    except TrainingDivergedError as e:
        log.error("%s", e)
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except FewShotADError as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
