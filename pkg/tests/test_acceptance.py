"""Acceptance criteria, one test per criterion; each records a PASS/FAIL line for the session summary."""

import struct
import time
from decimal import Decimal
from pathlib import Path

import numpy as np
import pytest

from dede import pipeline
from dede.config import PipelineConfig
from dede.data import apply_mask, apply_trigger, sample_mask
from dede.detector import TAU_MULTIPLIER, per_sample_errors, reconstruct_images, test_alpha as alpha_at_test
from dede.evalkit import evaluate_downstream, roc_curve
from dede.nets import patchify
from dede.rng import Rng
from dede.selftest import AUC_TOL, GRAD_RTOL, auc_check, primitive_checks, transformer_check
from desk import ATTACKS, SEEDS, criterion

pytestmark = pytest.mark.trained


def test_criterion_01_gradient_oracle():
    with criterion(1, "gradient oracle: primitives and 2-block transformer vs central differences") as note:
        t0 = time.perf_counter()
        checks = primitive_checks() + [transformer_check(depth=2)]
        took = time.perf_counter() - t0
        worst = max(checks, key=lambda c: c.max_rel_error)
        note["detail"] = f"{len(checks)} checks, worst {worst.name} {worst.max_rel_error:.2e}, {took:.1f}s"
        assert all(c.max_rel_error <= GRAD_RTOL for c in checks)
        assert took <= 60.0


def test_criterion_02_auc_oracle():
    with criterion(2, "AUC oracle: trapezoid vs pairwise Mann-Whitney on 200 tied sets") as note:
        t0 = time.perf_counter()
        gap = auc_check(200)
        took = time.perf_counter() - t0
        note["detail"] = f"max gap {gap:.1e}, {took:.2f}s"
        assert gap <= AUC_TOL and took <= 10.0


def test_criterion_03_threshold_and_masking_exactness(desk):
    with criterion(3, "tau = 1.5 x recomputed mean training loss; test alpha bump exact") as note:
        assert alpha_at_test(0.9) == 0.99 and alpha_at_test(0.95) == 1.0
        assert Decimal(repr(alpha_at_test(0.9))) == Decimal("0.99")
        worst = 0.0
        for seed in SEEDS:
            cfg = desk.cfg(seed)
            model = desk.detector(seed, "embedding-target")
            train = pipeline.detector_training_data(cfg, desk.data(seed)["dede_train"]).pixels
            errors = per_sample_errors(model, train, model.alpha_train,
                                       pipeline.stage_rng(cfg, "dede").child("calibrate"))
            recomputed = float(np.mean(errors))
            assert struct.pack("<d", model.tau) == struct.pack("<d", TAU_MULTIPLIER * recomputed)
            # the first chunk of errors against an image-space recomputation with the same masks
            recon = reconstruct_images(model, train[:256], model.alpha_train,
                                       pipeline.stage_rng(cfg, "dede").child("calibrate").child("chunk0"))
            oracle = ((recon.astype(np.float64) - train[:256].astype(np.float64)) ** 2).mean(axis=(1, 2, 3))
            np.testing.assert_allclose(errors[:256], oracle, rtol=1e-12)
            worst = max(worst, abs(model.tau - 1.5 * recomputed))
        note["detail"] = f"3 seeds bit-exact, max |tau - 1.5 mean| = {worst:.1e}"


def test_criterion_04_attack_viability(desk):
    with criterion(4, "embedding-target: ASR >= 90% with CA within 5 points of clean, <= 5 min per seed") as note:
        lines = []
        ok = True
        for seed in SEEDS:
            clean = desk.downstream(seed, "none")
            attacked = desk.downstream(seed, "embedding-target")
            took = desk.elapsed(("data", seed), ("pretrain", seed), ("attack", seed, "embedding-target"),
                                ("downstream", seed, "embedding-target", False, False),
                                ("downstream", seed, "none", False, False))
            seed_ok = attacked.asr >= 90.0 and abs(attacked.ca - clean.ca) <= 5.0 and took <= 300.0
            ok &= seed_ok
            lines.append(f"seed {seed}: ASR {attacked.asr:.1f} CA {attacked.ca:.1f} vs {clean.ca:.1f}, {took:.0f}s")
        note["detail"] = "; ".join(lines)
        assert ok


def test_criterion_05_detection_trend(desk):
    with criterion(5, "DeDe AUC >= 0.95 (embedding-target) and >= 0.85 (stealth-aligned), 3-seed mean, <= 10 min") as note:
        auc = {kind: [desk.detection(seed, kind).report.auc for seed in SEEDS] for kind in ATTACKS}
        keys = []
        for seed in SEEDS:
            keys += [("data", seed), ("pretrain", seed)]
            for kind in ATTACKS:
                keys += [("attack", seed, kind), ("dede", seed, kind, False), ("detect", seed, kind, False)]
        took = desk.elapsed(*keys)
        et, sa = np.mean(auc["embedding-target"]), np.mean(auc["stealth-aligned"])
        note["detail"] = f"mean AUC {et:.3f} / {sa:.3f}, {took:.0f}s total"
        assert et >= 0.95 and sa >= 0.85 and took <= 600.0


def test_criterion_06_ood_training(desk):
    with criterion(6, "DeDe trained on a differently seeded distribution: AUC >= 0.85 on embedding-target") as note:
        aucs = [desk.detection(seed, "embedding-target", ood=True).report.auc for seed in SEEDS]
        note["detail"] = "AUC " + ", ".join(f"{a:.3f}" for a in aucs) + f" (mean {np.mean(aucs):.3f})"
        assert np.mean(aucs) >= 0.85


def test_criterion_07_defense_trend(desk):
    with criterion(7, "DeDe filtering: ASR >= 90% -> <= 20%, CA within 5 points of clean baseline") as note:
        lines = []
        ok = True
        for seed in SEEDS:
            base = desk.downstream(seed, "none").ca
            nodef = desk.downstream(seed, "embedding-target")
            dede = desk.downstream(seed, "embedding-target", defended=True)
            ok &= nodef.asr >= 90.0 and dede.asr <= 20.0 and abs(dede.ca - base) <= 5.0
            lines.append(f"seed {seed}: ASR {nodef.asr:.1f} -> {dede.asr:.1f}, CA {dede.ca:.1f} vs {base:.1f}")
        note["detail"] = "; ".join(lines)
        assert ok


def test_criterion_08_stealth_differential(desk):
    with criterion(8, "k-means AUC lower on stealth-aligned in every seed; DeDe AUC drop <= 0.10") as note:
        lines = []
        ok = True
        for seed in SEEDS:
            et, sa = desk.detection(seed, "embedding-target"), desk.detection(seed, "stealth-aligned")
            drop = et.report.auc - sa.report.auc
            ok &= sa.kmeans_auc < et.kmeans_auc and drop <= 0.10
            lines.append(f"seed {seed}: k-means {et.kmeans_auc:.3f} -> {sa.kmeans_auc:.3f}, DeDe drop {drop:+.3f}")
        note["detail"] = "; ".join(lines)
        assert ok


REPORT_FILES = ["attack.json", "detection.json", "baseline.json", "downstream-none.json", "downstream-dede.json",
                "scores.csv", "roc.csv", "histogram.svg", "config.ini", "encoder-clean.ckpt",
                "encoder-embedding-target.ckpt", "dede.ckpt"]


def test_criterion_09_determinism(tmp_path, monkeypatch):
    with criterion(9, "two complete pipeline runs with the same config and seed are byte-identical") as note:
        cfg = PipelineConfig().with_overrides(run={"seed": 0, "out": "run"})
        for side in ("a", "b"):
            (tmp_path / side).mkdir()
            monkeypatch.chdir(tmp_path / side)
            pipeline.run_all(cfg, Path("run"))
        differing = [f for f in REPORT_FILES
                     if (tmp_path / "a/run" / f).read_bytes() != (tmp_path / "b/run" / f).read_bytes()]
        note["detail"] = f"{len(REPORT_FILES) - len(differing)}/{len(REPORT_FILES)} files identical"
        assert not differing, differing


def test_criterion_10_invariants(desk):
    with criterion(10, "invariants: mask exactness, victim freeze, ASR monotonicity, ROC endpoints") as note:
        checked = 0
        # mask exactness on real images at the training and test ratios
        x = desk.data(0)["test"].pixels[:64]
        grid = desk.clean(0).grid
        for alpha in (0.9, 0.99, 0.75, 1.0):
            mask = sample_mask(alpha, grid.patch_count, Rng(0).child(str(alpha)), len(x))
            got = patchify(apply_mask(x, mask, grid).pixels, grid)
            want = np.zeros_like(got)
            rows = np.arange(len(x))[:, None]
            want[rows, mask.visible] = patchify(x, grid)[rows, mask.visible]
            assert got.tobytes() == want.tobytes()
            checked += 1
        for seed in SEEDS:
            for kind in ATTACKS:
                model = desk.detector(seed, kind)
                before, after, stored = desk.freeze[(seed, kind, False)]
                assert before == after == stored
                # same encoder, probe and test split with and without the detector
                nodef = desk.downstream(seed, kind)
                test = desk.data(seed)["test"]
                cfg = desk.cfg(seed, kind)
                trig = apply_trigger(test.pixels, cfg.trigger())
                victim = desk.victim(seed, kind)
                bare = evaluate_downstream(victim, nodef.probe, test.pixels, test.labels, trig, test.labels,
                                           cfg.attack["target"])
                filtered = evaluate_downstream(victim, nodef.probe, test.pixels, test.labels, trig, test.labels,
                                               cfg.attack["target"], lambda imgs: model.classify(imgs, Rng(seed)))
                silent = evaluate_downstream(victim, nodef.probe, test.pixels, test.labels, trig, test.labels,
                                             cfg.attack["target"], lambda imgs: np.zeros(len(imgs), bool))
                assert filtered.asr <= bare.asr
                assert (silent.ca, silent.asr) == (bare.ca, bare.asr)
                rep = desk.detection(seed, kind).report
                fpr, tpr, _ = roc_curve(rep.scores, rep.labels)
                assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
                assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
                checked += 1
        note["detail"] = f"{checked} model/ratio combinations"
