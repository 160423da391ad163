"""
FEWSHOT-AD EVALUATION
=====================
Few-shot episodes and the studies built on them.

An episode samples k references by seed, customizes the base model, builds
the memory bank, then personalizes and scores every test image. Branch
scores are computed once per (category, k, seed) and shared by every branch
mask, so ablation rows for one seed always come from the same checkpoint.

Metrics:
    AUROC - Mann-Whitney form, ties count one half
    AUPRC - area under the precision-recall step curve, no interpolation
"""

import hashlib
import json
import logging
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from sklearn.metrics import average_precision_score, roc_auc_score

from . import container
from .bank import MemoryBank, build_bank, export_pool, generate_normals, import_pool
from .config import CODE_VERSION, RunConfig
from .customization import ReferenceSet, customize, pretrain_base
from .datasets import CategoryData, dataset_fingerprint, load_category, sample_references
from .denoiser import Denoiser
from .encoder import ImageEncoder, TextFeatures, encode_texts, make_encoder
from .errors import EvaluationError
from .personalization import personalize
from .prompts import Polarity, PromptCatalog, catalog_for, render_prompts
from .schedule_core import make_schedule
from .scorer import (ABLATION_MASKS, BRANCH_N, BRANCH_P, BRANCH_TEXT, FULL_MASK, anomaly_map,
                     combine, mask_label, parse_mask, score_bank, score_personalized, score_text)

log = logging.getLogger("fewshot_ad.eval")

PathLike = Union[str, Path]
MaskLike = Union[str, Iterable[str]]

# =============================================================================
# METRICS
# =============================================================================

def _check_binary(scores: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size != labels.size:
        raise EvaluationError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise EvaluationError("labels must be 0 or 1")
    if np.unique(labels).size < 2:
        raise EvaluationError("both classes must be present")
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("scores must be finite")
    return scores, labels.astype(int)


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    scores, labels = _check_binary(scores, labels)
    return float(roc_auc_score(labels, scores))


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    scores, labels = _check_binary(scores, labels)
    return float(average_precision_score(labels, scores))

# =============================================================================
# RESULTS
# =============================================================================

@dataclass
class QueryScores:
    query_id: str
    label: int
    s_p: float = 0.0
    s_n: float = 0.0
    s_text: float = 0.0
    chosen_prompt: Optional[str] = None
    elapsed_ms: float = 0.0


@dataclass
class EpisodeResult:
    dataset_id: str
    category: str
    shots: int
    seed: int
    branch_mask: str
    auroc: float
    auprc: float
    per_query: List[Tuple[str, int, float]] = field(repr=False)
    checkpoint_hash: Optional[str] = None
    bank_hash: Optional[str] = None
    config_hash: str = ""
    mean_query_ms: Optional[float] = None

    def to_record(self) -> Dict:
        record = asdict(self)
        record["per_query"] = [list(row) for row in self.per_query]
        if self.mean_query_ms is None:
            record.pop("mean_query_ms")
        return record


def episode_from_scores(scores: Sequence[QueryScores], mask: FrozenSet[str], config: RunConfig,
                        dataset_id: str, category: str, shots: int, seed: int,
                        checkpoint_hash: Optional[str] = None,
                        bank_hash: Optional[str] = None) -> EpisodeResult:
    """Fuse shared branch scores under one mask; disabled branches add 0."""
    per_query = []
    for q in scores:
        a = combine(q.s_p if BRANCH_P in mask else 0.0,
                    q.s_n if BRANCH_N in mask else 0.0,
                    q.s_text if BRANCH_TEXT in mask else 0.0,
                    config.alpha, config.beta)
        per_query.append((q.query_id, q.label, float(a)))
    values = [row[2] for row in per_query]
    labels = [row[1] for row in per_query]
    timing = float(np.mean([q.elapsed_ms for q in scores])) if config.timing and scores else None
    return EpisodeResult(
        dataset_id=dataset_id, category=category, shots=shots, seed=seed,
        branch_mask=mask_label(mask), auroc=auroc(values, labels), auprc=auprc(values, labels),
        per_query=per_query,
        checkpoint_hash=checkpoint_hash if mask & {BRANCH_P, BRANCH_N} else None,
        bank_hash=bank_hash if BRANCH_N in mask else None,
        config_hash=config.config_hash(), mean_query_ms=timing,
    )

# =============================================================================
# ARTIFACT CACHE
# =============================================================================

class ArtifactCache:
    """
    Content-addressed store for base models, customized models and banks.
    Keys hash the dataset contents, the result-relevant config and the code
    version. ``root=None`` keeps artifacts in memory only.
    """

    def __init__(self, root: Optional[PathLike] = None):
        self.root = Path(root) if root else None
        self._memory: Dict[str, object] = {}

    @staticmethod
    def key(*parts) -> str:
        payload = json.dumps([CODE_VERSION, *parts], sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:20]

    def _path(self, name: str, key: str, suffix: str) -> Optional[Path]:
        return self.root / f"{name}-{key}{suffix}" if self.root else None

    def denoiser(self, name: str, key: str, build: Callable[[], Denoiser]) -> Denoiser:
        tag = f"{name}:{key}"
        if tag in self._memory:
            return self._memory[tag]
        path = self._path(name, key, ".ckpt")
        if path is not None and path.exists():
            log.info("cache hit: %s", path.name)
            model = Denoiser.load(path)
        else:
            model = build()
            if path is not None:
                model.save(path)
        self._memory[tag] = model
        return model

    def bank(self, key: str, build: Callable[[], MemoryBank]) -> MemoryBank:
        tag = f"bank:{key}"
        if tag in self._memory:
            return self._memory[tag]
        path = self._path("bank", key, ".bank")
        if path is not None and path.exists():
            log.info("cache hit: %s", path.name)
            bank = MemoryBank.load(path)
        else:
            bank = build()
            if path is not None:
                bank.save(path)
        self._memory[tag] = bank
        return bank


def base_model_for(config: RunConfig, image_shape: Tuple[int, int, int],
                   cache: Optional[ArtifactCache] = None) -> Denoiser:
    cache = cache or ArtifactCache()
    key = ArtifactCache.key("base", list(image_shape), config.num_steps, config.beta_start,
                            config.beta_end, asdict(config.base_training()), config.base_seed)
    schedule = make_schedule(config.num_steps, config.beta_start, config.beta_end)
    return cache.denoiser("base", key, lambda: pretrain_base(
        image_shape, schedule, config.base_training(), seed=config.base_seed))

# =============================================================================
# EPISODES
# =============================================================================

@dataclass
class EpisodeContext:
    """Everything one (category, k, seed) episode shares across branch masks."""
    data: CategoryData
    dataset_id: str
    refs: ReferenceSet
    catalog: PromptCatalog
    encoder: ImageEncoder
    text: TextFeatures
    model: Optional[Denoiser] = None
    bank: Optional[MemoryBank] = None
    checkpoint_hash: Optional[str] = None
    bank_hash: Optional[str] = None


def text_features_for(catalog: PromptCatalog, dim: int) -> TextFeatures:
    return encode_texts(render_prompts(catalog, Polarity.NORMAL),
                        render_prompts(catalog, Polarity.ABNORMAL), dim=dim)


def prepare_episode(data: CategoryData, k: int, seed: int, config: RunConfig,
                    diffusion: bool = True, cache: Optional[ArtifactCache] = None,
                    dataset_id: Optional[str] = None) -> EpisodeContext:
    """Sample references and, when ``diffusion`` is set, customize and build the bank."""
    cache = cache or ArtifactCache()
    dataset_id = dataset_id or f"{data.category}@{dataset_fingerprint(data.root.parent, data.category)}"
    refs = sample_references(data, k, seed)
    catalog = catalog_for(data.category)
    encoder = make_encoder(config.cell_sizes, config.feature_dim, config.encoder_seed)
    ctx = EpisodeContext(data=data, dataset_id=dataset_id, refs=refs, catalog=catalog,
                         encoder=encoder, text=text_features_for(catalog, config.feature_dim))
    if not diffusion:
        return ctx

    base = base_model_for(config, data.image_shape, cache)
    custom_key = ArtifactCache.key("custom", dataset_id, k, seed, config.config_hash(), base.checksum())
    ctx.model = cache.denoiser("custom", custom_key, lambda: customize(
        base, refs, catalog, config.customization(), rng_seed=seed))
    ctx.checkpoint_hash = container.bytes_sha256(ctx.model.to_bytes())

    def build() -> MemoryBank:
        room = max(config.bank_capacity - refs.shot_count, 0)
        generated = generate_normals(ctx.model, catalog, room, refs, config.t_ratio_bank,
                                     rng_seed=seed, prompt_count=config.prompt_count)
        return build_bank(refs.images, generated, encoder, config.bank_capacity)

    ctx.bank = cache.bank(ArtifactCache.key("bank", custom_key, encoder.config_hash()), build)
    ctx.bank_hash = container.bytes_sha256(ctx.bank.to_bytes())
    return ctx


def query_seed(seed: int, index: int) -> int:
    return int(seed) * 100_003 + int(index)


def score_queries(ctx: EpisodeContext, config: RunConfig, seed: int,
                  branches: FrozenSet[str] = FULL_MASK) -> List[QueryScores]:
    """Branch scores for every test image; only the requested branches run."""
    use_p, use_n = BRANCH_P in branches, BRANCH_N in branches
    if (use_p or use_n) and ctx.model is None:
        raise EvaluationError("image branches requested but the episode has no customized model")
    out = []
    for i, query in enumerate(ctx.data.test):
        started = time.perf_counter()
        fq = ctx.encoder.encode_image(query.image)
        scores = QueryScores(query_id=query.query_id, label=query.label)
        if use_p:
            result = personalize(query.image, ctx.model, ctx.catalog, config.t_ratio,
                                 rng_seed=query_seed(seed, i), prompt_count=config.prompt_count)
            scores.s_p = score_personalized(fq, ctx.encoder.encode_image(result.personalized))
            scores.chosen_prompt = result.chosen_prompt
        if use_n:
            scores.s_n = score_bank(fq, ctx.bank)
        if BRANCH_TEXT in branches:
            scores.s_text = score_text(fq.global_vec, ctx.text, config.temperature)
        scores.elapsed_ms = (time.perf_counter() - started) * 1000.0
        log.debug("%s: s_p=%.4f s_n=%.4f s_text=%.4f", query.query_id,
                  scores.s_p, scores.s_n, scores.s_text)
        out.append(scores)
    return out


def _load(dataset_dir: PathLike, category: str, config: RunConfig) -> CategoryData:
    return load_category(dataset_dir, category, tuple(config.image_size))


def run_episode(dataset_dir: PathLike, category: str, k: int, seed: int, config: RunConfig,
                branch_mask: MaskLike = FULL_MASK,
                cache: Optional[ArtifactCache] = None) -> EpisodeResult:
    """One few-shot episode; a text-only mask never touches the diffusion model."""
    mask = parse_mask(branch_mask)
    data = _load(dataset_dir, category, config)
    ctx = prepare_episode(data, k, seed, config, diffusion=bool(mask & {BRANCH_P, BRANCH_N}),
                          cache=cache)
    scores = score_queries(ctx, config, seed, mask)
    result = episode_from_scores(scores, mask, config, ctx.dataset_id, category, k, seed,
                                 ctx.checkpoint_hash, ctx.bank_hash)
    log.info("episode %s k=%d seed=%d mask=%s: AUROC %.4f AUPRC %.4f",
             category, k, seed, result.branch_mask, result.auroc, result.auprc)
    return result

# =============================================================================
# SUITES
# =============================================================================

def _cache_for(config: RunConfig, use_disk: bool) -> ArtifactCache:
    return ArtifactCache(config.cache_root() if use_disk else None)


def _ablation_seed(dataset_dir: PathLike, category: str, k: int, seed: int,
                   config: RunConfig, masks: Sequence[FrozenSet[str]],
                   use_disk_cache: bool) -> List[EpisodeResult]:
    data = _load(dataset_dir, category, config)
    ctx = prepare_episode(data, k, seed, config, diffusion=True,
                          cache=_cache_for(config, use_disk_cache))
    scores = score_queries(ctx, config, seed, FULL_MASK)
    return [episode_from_scores(scores, mask, config, ctx.dataset_id, category, k, seed,
                                ctx.checkpoint_hash, ctx.bank_hash) for mask in masks]


def _fan_out(jobs: List[tuple], config: RunConfig) -> List[List[EpisodeResult]]:
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_ablation_seed, *job) for job in jobs]
            return [f.result() for f in futures]
    return [_ablation_seed(*job) for job in jobs]


def ablation_suite(dataset_dir: PathLike, category: str, k: int, seeds: Sequence[int],
                   config: RunConfig, masks: Sequence[FrozenSet[str]] = ABLATION_MASKS,
                   use_disk_cache: bool = False) -> List[EpisodeResult]:
    """Rows for every mask x seed, seed-major; masks of one seed share artifacts."""
    jobs = [(dataset_dir, category, k, seed, config, tuple(masks), use_disk_cache) for seed in seeds]
    return [row for rows in _fan_out(jobs, config) for row in rows]


def shot_sweep(dataset_dir: PathLike, category: str, shots: Sequence[int], seeds: Sequence[int],
               config: RunConfig, use_disk_cache: bool = False) -> List[EpisodeResult]:
    """Full-mask episodes over every (k, seed)."""
    jobs = [(dataset_dir, category, k, seed, config, (FULL_MASK,), use_disk_cache)
            for k in shots for seed in seeds]
    return [row for rows in _fan_out(jobs, config) for row in rows]


def summarize(results: Sequence[EpisodeResult]) -> List[Dict]:
    """Mean and (population) std of AUROC/AUPRC per (category, shots, mask)."""
    groups: Dict[Tuple[str, int, str], List[EpisodeResult]] = {}
    for r in results:
        groups.setdefault((r.category, r.shots, r.branch_mask), []).append(r)
    rows = []
    for (category, shots, mask), group in groups.items():
        aurocs = np.array([r.auroc for r in group])
        auprcs = np.array([r.auprc for r in group])
        rows.append({
            "category": category, "shots": shots, "branch_mask": mask, "runs": len(group),
            "auroc_mean": float(aurocs.mean()), "auroc_std": float(aurocs.std()),
            "auprc_mean": float(auprcs.mean()), "auprc_std": float(auprcs.std()),
        })
    return rows


def format_table(rows: Sequence[Dict]) -> str:
    header = f"{'category':<10} {'k':>3} {'mask':<10} {'AUROC':>15} {'AUPRC':>15}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row['category']:<10} {row['shots']:>3} {row['branch_mask']:<10} "
            f"{row['auroc_mean']:>7.4f}±{row['auroc_std']:<7.4f} "
            f"{row['auprc_mean']:>7.4f}±{row['auprc_std']:<7.4f}")
    return "\n".join(lines)

# =============================================================================
# STUDIES
# =============================================================================

def pool_augmentation_study(dataset_dir: PathLike, category: str, k: int, seeds: Sequence[int],
                            config: RunConfig, count: Optional[int] = None) -> List[Dict]:
    """
    S_N-only detector per seed: pool of references alone vs references plus
    ``count`` generated samples, exported to disk and read back.
    """
    count = config.generated_count if count is None else count
    data = _load(dataset_dir, category, config)
    cache = ArtifactCache()
    labels = data.labels()
    rows = []
    for seed in seeds:
        ctx = prepare_episode(data, k, seed, config, diffusion=True, cache=cache)
        generated = generate_normals(ctx.model, ctx.catalog, count, ctx.refs, config.t_ratio_bank,
                                     rng_seed=seed + 1, prompt_count=config.prompt_count)
        with tempfile.TemporaryDirectory(prefix="fewshot_pool_") as tmp:
            export_pool(generated, tmp, seed=seed, model_hash=ctx.checkpoint_hash or "")
            pooled = import_pool(tmp)
        plain = build_bank(ctx.refs.images, [], ctx.encoder, capacity=k)
        augmented = build_bank(ctx.refs.images, pooled, ctx.encoder, capacity=k + len(pooled))
        feats = [ctx.encoder.encode_image(q.image) for q in data.test]
        before = auroc([score_bank(f, plain) for f in feats], labels)
        after = auroc([score_bank(f, augmented) for f in feats], labels)
        rows.append({"seed": seed, "shots": k, "generated": len(pooled),
                     "auroc_references_only": before, "auroc_with_generated": after})
        log.info("pool study seed %d: AUROC %.4f -> %.4f", seed, before, after)
    return rows


def dilate_mask(mask: np.ndarray, cell: int) -> np.ndarray:
    structure = np.ones((2 * cell + 1, 2 * cell + 1), dtype=bool)
    return ndimage.binary_dilation(mask, structure=structure)


def localization_hit_rate(dataset_dir: PathLike, category: str, k: int, seed: int,
                          config: RunConfig, limit: int = 100,
                          cache: Optional[ArtifactCache] = None) -> Dict:
    """Share of anomalous queries whose heatmap argmax falls in the mask grown by one cell."""
    data = _load(dataset_dir, category, config)
    ctx = prepare_episode(data, k, seed, config, diffusion=True, cache=cache)
    cell = min(config.cell_sizes)
    hits = total = 0
    for i, query in enumerate(data.test):
        if not query.label or query.mask is None:
            continue
        if total >= limit:
            break
        fq = ctx.encoder.encode_image(query.image)
        result = personalize(query.image, ctx.model, ctx.catalog, config.t_ratio,
                             rng_seed=query_seed(seed, i), prompt_count=config.prompt_count)
        fp = ctx.encoder.encode_image(result.personalized)
        heatmap = anomaly_map(fq, fp, ctx.bank, query.image.shape[:2])
        peak = np.unravel_index(int(np.argmax(heatmap)), heatmap.shape)
        hits += bool(dilate_mask(query.mask, cell)[peak])
        total += 1
    if total == 0:
        raise EvaluationError(f"no anomalous queries with masks in {category}")
    return {"category": category, "shots": k, "seed": seed, "queries": total,
            "hits": hits, "hit_rate": hits / total}
