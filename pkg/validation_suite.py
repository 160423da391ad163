#!/usr/bin/env python3
"""
FEWSHOT-AD VALIDATION SUITE
===========================
Long-running end-to-end checks on the synthetic benchmark.

Covers:
- Customization effectiveness (loss drop, smoothed loss trend, sample fidelity)
- Detection trend over k = 2, 4, 8
- Branch complementarity (full mask vs single branches)
- Generated-pool augmentation of the memory bank
- Heatmap localization
- Run determinism

The unit tests (pytest) cover the kernels; this suite trains real models at
the default 32x32 scale and takes tens of minutes on a laptop CPU.

Usage:
    python validation_suite.py [--workers 4] [--work-dir /tmp/fewshot_validation]
"""

import argparse
import json
import logging
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from fewshot_ad.bank import generate_normals
from fewshot_ad.config import RunConfig
from fewshot_ad.customization import build_demos, customize
from fewshot_ad.datasets import load_category, sample_references
from fewshot_ad.denoiser import denoising_loss
from fewshot_ad.evaluation import (ArtifactCache, ablation_suite, base_model_for,
                                   localization_hit_rate, pool_augmentation_study, run_episode,
                                   shot_sweep)
from fewshot_ad.personalization import ssim
from fewshot_ad.prompts import catalog_for
from fewshot_ad.scorer import ABLATION_MASKS, FULL_MASK, mask_label
from fewshot_ad.synth import FAMILIES, SyntheticSpec, make_normal, write_dataset

SHOTS = (2, 4, 8)
SEEDS = (0, 1, 2, 3, 4)
TREND_SLACK = 0.03
COMPLEMENT_SLACK = 0.01
LOCALIZATION_QUERIES = 100
LOSS_WINDOW = 5
LOSS_RISE_SLACK = 0.02


@dataclass
class TestResult:
    module: str
    test_name: str
    passed: bool
    details: str
    duration_ms: float


class ValidationSuite:
    def __init__(self, work_dir: Path, workers: int = 1):
        self.results: List[TestResult] = []
        self.start_time = time.time()
        self.work_dir = work_dir
        self.dataset_dir = work_dir / "data"
        self.config = RunConfig(seeds=list(SEEDS), shot_sweep=list(SHOTS), workers=workers,
                                cache_dir=str(work_dir / "cache"))
        self._sweep: Optional[Dict[Tuple[str, int], List[float]]] = None

    def run_test(self, module: str, test_name: str, test_func) -> TestResult:
        """Execute a single check and capture the result."""
        start = time.time()
        try:
            result = test_func()
            passed = result[0] if isinstance(result, tuple) else bool(result)
            details = result[1] if isinstance(result, tuple) and len(result) > 1 else "OK"
            return TestResult(module, test_name, passed, str(details), (time.time() - start) * 1000)
        except Exception as e:
            return TestResult(module, test_name, False, f"ERROR: {e}", (time.time() - start) * 1000)

    def add_result(self, result: TestResult):
        self.results.append(result)

    # ==========================================
    # BENCHMARK
    # ==========================================

    def prepare_benchmark(self):
        per_family_anomalies = -(-LOCALIZATION_QUERIES // len(FAMILIES))
        for family in FAMILIES:
            if (self.dataset_dir / family / "manifest.json").exists():
                continue
            spec = SyntheticSpec(texture_family=family, image_size=tuple(self.config.image_size))
            write_dataset(spec, 20, 30, per_family_anomalies, self.dataset_dir)

    def sweep(self) -> Dict[Tuple[str, int], List[float]]:
        """AUROC per (category, k) over all seeds; computed once, shared by later checks."""
        if self._sweep is None:
            self._sweep = {}
            for family in FAMILIES:
                rows = shot_sweep(self.dataset_dir, family, SHOTS, SEEDS, self.config,
                                  use_disk_cache=True)
                for row in rows:
                    self._sweep.setdefault((family, row.shots), []).append(row.auroc)
        return self._sweep

    # ==========================================
    # CUSTOMIZATION
    # ==========================================

    def test_customization(self) -> Tuple[bool, str]:
        cache = ArtifactCache(self.config.cache_root())
        ratios, margins = [], []
        family, unrelated = FAMILIES[0], FAMILIES[2]
        data = load_category(self.dataset_dir, family, tuple(self.config.image_size))
        base = base_model_for(self.config, data.image_shape, cache)
        other = SyntheticSpec(texture_family=unrelated, image_size=tuple(self.config.image_size))
        for seed in SEEDS:
            refs = sample_references(data, 8, seed)
            catalog = catalog_for(family)
            model = customize(base, refs, catalog, self.config.customization(), rng_seed=seed)
            history = model.metadata["loss_history"]
            ratios.append(history[-1] / history[0])

            samples = generate_normals(model, catalog, 8, refs, self.config.t_ratio_bank,
                                       rng_seed=seed, prompt_count=self.config.prompt_count)
            fidelity = np.mean([ssim(s, r) for s in samples for r in refs.images])
            strangers = [make_normal(other, 1000 + i) for i in range(8)]
            baseline = np.mean([ssim(s, r) for s in strangers for r in refs.images])
            margins.append(fidelity - baseline)
        ratio, margin = float(np.median(ratios)), float(np.median(margins))
        return ratio < 0.5 and margin > 0, f"loss ratio={ratio:.3f}, SSIM margin={margin:.4f}"

    def test_loss_trend(self) -> Tuple[bool, str]:
        cache = ArtifactCache(self.config.cache_root())
        family = FAMILIES[0]
        data = load_category(self.dataset_dir, family, tuple(self.config.image_size))
        base = base_model_for(self.config, data.image_shape, cache)
        catalog = catalog_for(family)
        worst_rise, wins = 0.0, 0
        for seed in SEEDS:
            final = {}
            for shots in (SHOTS[0], SHOTS[-1]):
                refs = sample_references(data, shots, seed)
                model = customize(base, refs, catalog, self.config.customization(), rng_seed=seed)
                history = np.asarray(model.metadata["loss_history"])
                smoothed = np.convolve(history, np.ones(LOSS_WINDOW) / LOSS_WINDOW, mode="valid")
                worst_rise = max(worst_rise, float(np.max(np.diff(smoothed), initial=0.0)) / history[0])
                demos, _ = build_demos(refs, catalog, self.config.per_image, 0, model, rng_seed=seed)
                final[shots] = denoising_loss(model, demos, [], model.schedule, rng_seed=seed)
            wins += final[SHOTS[-1]] <= final[SHOTS[0]]
        ok = worst_rise <= LOSS_RISE_SLACK and wins > len(SEEDS) // 2
        return ok, (f"worst smoothed rise={worst_rise:.4f}, "
                    f"k={SHOTS[-1]} final loss <= k={SHOTS[0]} in {wins}/{len(SEEDS)} seeds")

    # ==========================================
    # DETECTION
    # ==========================================

    def test_detection_level(self) -> Tuple[bool, str]:
        sweep = self.sweep()
        top = float(np.mean([v for (_, k), vals in sweep.items() if k == 8 for v in vals]))
        return top >= 0.85, f"mean AUROC at k=8: {top:.4f}"

    def test_shot_trend(self) -> Tuple[bool, str]:
        sweep = self.sweep()
        means = [float(np.mean([v for (_, k), vals in sweep.items() if k == shots for v in vals]))
                 for shots in SHOTS]
        ok = all(b >= a - TREND_SLACK for a, b in zip(means, means[1:]))
        return ok, " ".join(f"k={k}:{m:.4f}" for k, m in zip(SHOTS, means))

    def test_complementarity(self) -> Tuple[bool, str]:
        by_mask: Dict[str, List[float]] = {}
        for family in FAMILIES:
            for row in ablation_suite(self.dataset_dir, family, 8, SEEDS, self.config,
                                      use_disk_cache=True):
                by_mask.setdefault(row.branch_mask, []).append(row.auroc)
        means = {mask: float(np.mean(v)) for mask, v in by_mask.items()}
        full = means[mask_label(FULL_MASK)]
        singles = [mask_label(m) for m in ABLATION_MASKS if len(m) == 1]
        ok = all(full >= means[s] - COMPLEMENT_SLACK for s in singles)
        return ok, ", ".join(f"{m}={means[m]:.4f}" for m in [*singles, mask_label(FULL_MASK)])

    def test_pool_augmentation(self) -> Tuple[bool, str]:
        gains = []
        for family in FAMILIES:
            for row in pool_augmentation_study(self.dataset_dir, family, 8, SEEDS, self.config,
                                               count=100):
                gains.append(row["auroc_with_generated"] - row["auroc_references_only"])
        median = float(np.median(gains))
        return median >= 0.0, f"median AUROC gain={median:+.4f} over {len(gains)} runs"

    def test_localization(self) -> Tuple[bool, str]:
        cache = ArtifactCache(self.config.cache_root())
        hits = total = 0
        remaining = LOCALIZATION_QUERIES
        for i, family in enumerate(FAMILIES):
            limit = -(-remaining // (len(FAMILIES) - i))
            out = localization_hit_rate(self.dataset_dir, family, 8, SEEDS[0], self.config,
                                        limit=limit, cache=cache)
            hits += out["hits"]
            total += out["queries"]
            remaining -= out["queries"]
        rate = hits / total
        return rate >= 0.9 and total == LOCALIZATION_QUERIES, f"{hits}/{total} hits ({rate:.1%})"

    def test_determinism(self) -> Tuple[bool, str]:
        first = [run_episode(self.dataset_dir, FAMILIES[0], SHOTS[0], SEEDS[0], self.config,
                             cache=ArtifactCache()) for _ in range(2)]
        records = [json.dumps(r.to_record(), sort_keys=True).encode() for r in first]
        return records[0] == records[1], f"record sha match={records[0] == records[1]}"

    # ==========================================
    # RUN
    # ==========================================

    def run_all(self) -> bool:
        print("=" * 70)
        print("   FEWSHOT-AD VALIDATION SUITE")
        print("=" * 70)
        print(f"   work dir: {self.work_dir}")
        print(f"   config:   {self.config.config_hash()}")
        print()
        self.prepare_benchmark()

        all_tests = [
            ("CUSTOMIZATION", [
                ("customize", "Loss drop and sample fidelity", self.test_customization),
                ("customize", "Smoothed loss and shot count", self.test_loss_trend),
            ]),
            ("DETECTION", [
                ("eval", "AUROC at k=8", self.test_detection_level),
                ("eval", "Non-decreasing in k", self.test_shot_trend),
                ("scorer", "Branch complementarity", self.test_complementarity),
                ("bank", "Generated pool augmentation", self.test_pool_augmentation),
                ("scorer", "Heatmap localization", self.test_localization),
            ]),
            ("REPRODUCIBILITY", [
                ("eval", "Byte-identical episode records", self.test_determinism),
            ]),
        ]

        for section_name, tests in all_tests:
            print(f"--- {section_name} ---")
            for module, test_name, test_func in tests:
                result = self.run_test(module, test_name, test_func)
                self.add_result(result)
                status = "PASS" if result.passed else "FAIL"
                print(f"   {status} [{module}] {test_name}: {result.details} ({result.duration_ms / 1000:.1f}s)")
            print()

        passed = sum(1 for r in self.results if r.passed)
        total = len(self.results)
        duration = time.time() - self.start_time

        print("=" * 70)
        print("   VALIDATION SUMMARY")
        print("=" * 70)
        print(f"\n   Checks Passed: {passed}/{total}")
        print(f"   Total Time:    {duration / 60:.1f} min")
        if passed != total:
            print(f"\n   >> {total - passed} CHECK(S) FAILED.")
            for r in self.results:
                if not r.passed:
                    print(f"      FAIL [{r.module}] {r.test_name}: {r.details}")
        print("=" * 70)
        return passed == total

# ==========================================
# MAIN
# ==========================================
if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="fewshot-ad end-to-end validation")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--work-dir", help="reuse datasets and cached models across runs")
    args = parser.parse_args()

    logging.basicConfig(level=logging.WARNING,
                        format="%(asctime)s | %(levelname)s | %(name)s | %(message)s")
    work_dir = Path(args.work_dir) if args.work_dir else Path(tempfile.mkdtemp(prefix="fewshot_validation_"))
    suite = ValidationSuite(work_dir, workers=args.workers)
    sys.exit(0 if suite.run_all() else 1)
