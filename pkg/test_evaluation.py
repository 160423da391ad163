import numpy as np
import pytest

import fewshot_ad.evaluation as evaluation
from fewshot_ad.config import RunConfig
from fewshot_ad.errors import EvaluationError
from fewshot_ad.evaluation import (ArtifactCache, EpisodeResult, QueryScores, ablation_suite,
                                   auprc, auroc, dilate_mask, episode_from_scores, format_table,
                                   localization_hit_rate, pool_augmentation_study, query_seed,
                                   run_episode, shot_sweep, summarize)
from fewshot_ad.scorer import ABLATION_MASKS, FULL_MASK, mask_label


def pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def swept_auprc(scores, labels):
    scores, labels = np.asarray(scores), np.asarray(labels)
    positives = labels.sum()
    area, prev_recall = 0.0, 0.0
    for threshold in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= threshold
        tp = labels[predicted].sum()
        recall = tp / positives
        area += (recall - prev_recall) * (tp / predicted.sum())
        prev_recall = recall
    return area

# ==========================================
# METRICS
# ==========================================

def test_auroc_hand_case():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_auroc_extremes():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5


def test_auroc_matches_pair_count():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(4, 30))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(n), 1)
        assert abs(auroc(scores, labels) - pairwise_auroc(scores, labels)) < 1e-9


def test_auprc_cases():
    assert auprc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auprc([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == pytest.approx(0.25)
    assert abs(auprc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
               - swept_auprc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])) < 1e-12


def test_auprc_matches_threshold_sweep():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(4, 30))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(n), 1)
        assert abs(auprc(scores, labels) - swept_auprc(scores, labels)) < 1e-12


def test_auroc_ignores_monotone_rescaling():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(4, 30))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.standard_normal(n)
        base = auroc(scores, labels)
        assert auroc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert auroc(3.0 * scores ** 3 + scores - 7.0, labels) == pytest.approx(base, abs=1e-12)


def test_negated_scores_complement_auroc():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(4, 30))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.permutation(n) / n
        assert auroc(scores, labels) + auroc(-scores, labels) == pytest.approx(1.0, abs=1e-12)


def test_metric_inputs_checked():
    with pytest.raises(EvaluationError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(EvaluationError):
        auroc([0.1, 0.2, 0.3], [0, 1])
    with pytest.raises(EvaluationError):
        auprc([0.1, np.nan], [0, 1])
    with pytest.raises(EvaluationError):
        auroc([0.1, 0.2], [0, 2])

# ==========================================
# EPISODE RECORDS
# ==========================================

def _scores():
    return [
        QueryScores("good/000", 0, s_p=0.1, s_n=0.2, s_text=0.6),
        QueryScores("good/001", 0, s_p=0.2, s_n=0.1, s_text=0.4),
        QueryScores("spot/000", 1, s_p=0.5, s_n=0.6, s_text=0.5),
        QueryScores("spot/001", 1, s_p=0.6, s_n=0.5, s_text=0.45),
    ]


def test_mask_controls_fusion():
    config = RunConfig()
    full = episode_from_scores(_scores(), FULL_MASK, config, "d", "stripes", 8, 0, "ck", "bk")
    assert full.per_query[0][2] == pytest.approx(0.1 + 0.2 + 0.5 * 0.6)
    assert full.auroc == 1.0
    assert full.checkpoint_hash == "ck" and full.bank_hash == "bk"

    text = episode_from_scores(_scores(), frozenset({"text"}), config, "d", "stripes", 8, 0, "ck", "bk")
    assert text.per_query[0][2] == pytest.approx(0.3)
    assert text.checkpoint_hash is None and text.bank_hash is None
    assert text.branch_mask == "text"
    assert "mean_query_ms" not in text.to_record()


def test_summary_and_table():
    def row(seed, value):
        return EpisodeResult("d", "stripes", 8, seed, "P,N,text", value, value, [])

    rows = summarize([row(0, 0.8), row(1, 1.0)])
    assert rows == [{"category": "stripes", "shots": 8, "branch_mask": "P,N,text", "runs": 2,
                     "auroc_mean": pytest.approx(0.9), "auroc_std": pytest.approx(0.1),
                     "auprc_mean": pytest.approx(0.9), "auprc_std": pytest.approx(0.1)}]
    table = format_table(rows)
    assert "P,N,text" in table and "0.9000" in table


def test_query_seeds_are_distinct():
    seeds = {query_seed(s, i) for s in range(5) for i in range(200)}
    assert len(seeds) == 1000


def test_dilate_mask():
    mask = np.zeros((8, 8), dtype=bool)
    mask[4, 4] = True
    grown = dilate_mask(mask, 1)
    assert grown.sum() == 9 and grown[3, 3] and not grown[2, 2]

# ==========================================
# CACHE
# ==========================================

def test_memory_cache_builds_once(short_schedule):
    from fewshot_ad.denoiser import Denoiser
    built = []

    def build():
        built.append(1)
        return Denoiser.create((8, 8, 1), short_schedule, base_channels=4)

    cache = ArtifactCache()
    key = ArtifactCache.key("base", 1)
    assert cache.denoiser("base", key, build) is cache.denoiser("base", key, build)
    assert len(built) == 1
    assert ArtifactCache.key("base", 1) != ArtifactCache.key("base", 2)


def test_disk_cache_survives_a_new_process(tmp_path, short_schedule):
    from fewshot_ad.denoiser import Denoiser
    model = Denoiser.create((8, 8, 1), short_schedule, base_channels=4)
    ArtifactCache(tmp_path).denoiser("base", "k", lambda: model)
    assert (tmp_path / "base-k.ckpt").exists()

    def fail():
        raise AssertionError("should load from disk")

    loaded = ArtifactCache(tmp_path).denoiser("base", "k", fail)
    assert loaded.checksum() == model.checksum()

# ==========================================
# END TO END (tiny)
# ==========================================

def test_episode_is_deterministic(tiny_dataset, tiny_config):
    a = run_episode(tiny_dataset, "stripes", 2, 0, tiny_config)
    b = run_episode(tiny_dataset, "stripes", 2, 0, tiny_config)
    assert a.to_record() == b.to_record()
    assert 0.0 <= a.auroc <= 1.0
    assert len(a.per_query) == 5
    assert a.checkpoint_hash and a.bank_hash


def test_text_only_episode_skips_diffusion(tiny_dataset, tiny_config, monkeypatch):
    def no_diffusion(*args, **kwargs):
        raise AssertionError("text-only episode touched the diffusion model")

    monkeypatch.setattr(evaluation, "base_model_for", no_diffusion)
    monkeypatch.setattr(evaluation, "personalize", no_diffusion)
    result = run_episode(tiny_dataset, "stripes", 2, 0, tiny_config, branch_mask="text")
    assert result.branch_mask == "text"
    assert result.checkpoint_hash is None


def test_ablation_rows_share_artifacts(tiny_dataset, tiny_config):
    rows = ablation_suite(tiny_dataset, "stripes", 2, [0], tiny_config)
    assert [r.branch_mask for r in rows] == [mask_label(m) for m in ABLATION_MASKS]
    image_rows = [r for r in rows if r.branch_mask != "text"]
    assert len({r.checkpoint_hash for r in image_rows}) == 1
    full = next(r for r in rows if r.branch_mask == "P,N,text")
    single = run_episode(tiny_dataset, "stripes", 2, 0, tiny_config)
    assert full.to_record() == single.to_record()


def test_shot_sweep_rows(tiny_dataset, tiny_config):
    rows = shot_sweep(tiny_dataset, "stripes", [1, 2], [0], tiny_config)
    assert [(r.shots, r.branch_mask) for r in rows] == [(1, "P,N,text"), (2, "P,N,text")]


def test_studies_run(tiny_dataset, tiny_config):
    pool_rows = pool_augmentation_study(tiny_dataset, "stripes", 2, [0], tiny_config, count=3)
    assert pool_rows[0]["generated"] == 3
    assert 0.0 <= pool_rows[0]["auroc_with_generated"] <= 1.0

    hits = localization_hit_rate(tiny_dataset, "stripes", 2, 0, tiny_config, limit=2)
    assert hits["queries"] == 2
    assert 0 <= hits["hits"] <= 2
