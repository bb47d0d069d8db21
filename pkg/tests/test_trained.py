"""Measured properties of desk-scale trained encoders, attacks and detectors."""

import json

import numpy as np
import pytest

from dede import pipeline
from dede.data import apply_mask, apply_trigger, centroid_radius, ood_noise_images, sample_mask
from dede.detector import per_sample_errors, reconstruct_images
from dede.nets import patchify
from dede.rng import Rng
from dede.tensor import Tensor
from dede.victim import AttackConfig, inject_embedding_target, reference_embedding
from desk import ATTACKS, SEEDS

pytestmark = pytest.mark.trained


def cosine_means(emb, labels):
    sims = emb @ emb.T
    same = labels[:, None] == labels[None]
    off_diag = ~np.eye(len(labels), dtype=bool)
    return sims[same & off_diag].mean(), sims[~same].mean()


# ------------------------------------------------------------ clean encoder

@pytest.mark.parametrize("seed", SEEDS)
def test_clean_encoder_intra_class_beats_inter_class(desk, seed):
    test = desk.data(seed)["test"]
    intra, inter = cosine_means(desk.clean(seed).embed(test.pixels[:400]).astype(np.float64), test.labels[:400])
    assert intra > inter


@pytest.mark.parametrize("seed", SEEDS)
def test_clean_encoder_probe_accuracy(desk, seed):
    assert desk.downstream(seed, "none").ca >= 90.0


@pytest.mark.parametrize("seed", SEEDS)
def test_clean_encoder_patch_trigger_asr_near_chance(desk, seed):
    assert desk.downstream(seed, "none").asr < 15.0


def test_pretraining_loss_falls(desk):
    history = desk.pretrain_history(0)
    assert np.mean(history[-5:]) < np.mean(history[:5])


# ------------------------------------------------------------------ attacks

def test_utility_only_objective_is_distillation(desk):
    data = desk.data(0)
    cfg = AttackConfig(kind="embedding-target", lambda_eff=0.0)
    res = inject_embedding_target(desk.clean(0), cfg, data["pretrain"], Rng(0).child("distill"),
                                  heldout=data["test"].pixels[:256])
    assert res.utility >= 0.99


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ATTACKS)
def test_attack_reports_success(desk, seed, kind):
    res = desk.attack(seed, kind)
    assert res.success and res.effectiveness >= 0.9 and res.utility >= 0.9


def backdoor_mean_gap(desk, seed, kind):
    cfg = desk.cfg(seed, kind).attack_config()
    data = desk.data(seed)
    _, ref = reference_embedding(desk.clean(seed), data["pretrain"], cfg,
                                 pipeline.stage_rng(desk.cfg(seed, kind), "attack").child("reference"))
    test = data["test"]
    trig = apply_trigger(test.pixels[test.labels != cfg.target][:256], cfg.trigger)
    return float(np.linalg.norm(desk.victim(seed, kind).embed(trig).mean(0) - ref.mean(0)))


@pytest.mark.parametrize("seed", SEEDS)
def test_alignment_brings_backdoor_mean_closer_to_target(desk, seed):
    assert backdoor_mean_gap(desk, seed, "stealth-aligned") < backdoor_mean_gap(desk, seed, "embedding-target")


@pytest.mark.parametrize("seed", SEEDS)
def test_kmeans_baseline_weaker_on_stealth_attack(desk, seed):
    assert desk.detection(seed, "stealth-aligned").kmeans_auc < desk.detection(seed, "embedding-target").kmeans_auc


@pytest.mark.parametrize("seed", SEEDS)
def test_kmeans_baseline_catches_embedding_target(desk, seed):
    assert desk.detection(seed, "embedding-target").kmeans_auc >= 0.9


def test_poisoned_pretrain_moves_triggered_embeddings_off_clean_clusters(desk):
    enc = desk.victim(0, "poisoned-pretrain")
    test = desk.data(0)["test"]
    cfg = desk.cfg(0, "poisoned-pretrain")
    emb = enc.embed(test.pixels).astype(np.float64)
    centroids = np.stack([emb[test.labels == c].mean(0) for c in range(cfg.data["classes"])])

    def nearest(x):
        return np.sqrt(((x[:, None] - centroids[None]) ** 2).sum(-1)).min(1)

    keep = test.labels != cfg.attack["target"]
    trig = enc.embed(apply_trigger(test.pixels[keep], cfg.trigger())).astype(np.float64)
    assert nearest(trig).mean() > np.quantile(nearest(emb), 0.95)


# ----------------------------------------------------------------- detector

@pytest.mark.parametrize("seed", SEEDS)
def test_detector_training_curve_moving_average_decreases(desk, seed):
    model = desk.detector(seed, "embedding-target")
    every = 20
    windows = [np.mean(model.history[i * every:(i + 1) * every]) for i in range(10)]
    assert all(b < a for a, b in zip(windows, windows[1:]))


@pytest.mark.parametrize("seed", SEEDS)
def test_detector_generalises_to_held_out_clean(desk, seed):
    model = desk.detector(seed, "embedding-target")
    held_out = desk.data(seed)["test"].pixels
    errors = per_sample_errors(model, held_out, model.alpha_train, Rng(seed).child("held-out"))
    assert errors.mean() <= model.tau / 1.5


@pytest.mark.parametrize("seed", SEEDS)
def test_triggered_inputs_reconstruct_worse(desk, seed):
    rep = desk.detection(seed, "embedding-target").report
    assert rep.scores[rep.labels].mean() > rep.scores[~rep.labels].mean()


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ATTACKS)
def test_clean_held_out_flag_rate(desk, seed, kind):
    model = desk.detector(seed, kind)
    flagged = model.classify(desk.data(seed)["test"].pixels, Rng(seed).child("flag-rate"))
    assert flagged.mean() <= 0.35


def test_visible_order_irrelevant_on_trained_detector(desk):
    model = desk.detector(0, "embedding-target")
    grid = model.victim.grid
    x = desk.data(0)["test"].pixels[:32]
    mask = sample_mask(0.75, grid.patch_count, Rng(1), len(x))
    masked = apply_mask(x, mask, grid).pixels
    e = Tensor(model.victim.embed(x))
    ref = model.decoder(e, model.patch_encoder(masked, mask.visible), mask.visible).data
    perm = np.ascontiguousarray(mask.visible[:, ::-1])
    out = model.decoder(e, model.patch_encoder(masked, perm), perm).data
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_noise_fill_lands_outside_clean_ball(desk):
    enc = desk.clean(0)
    ref = enc.embed(desk.data(0)["dede_train"].pixels)
    noise = ood_noise_images(200, ref, Rng(0).child("noise"), 0.99, encoder=enc)
    centroid, radius = centroid_radius(ref, 0.99)
    outside = np.linalg.norm(enc.embed(noise.pixels) - centroid, axis=1) > radius
    assert outside.mean() >= 0.5


def test_reconstruction_error_is_full_image_mse(desk):
    model = desk.detector(0, "embedding-target")
    x = desk.data(0)["test"].pixels[:16]
    ours = per_sample_errors(model, x, model.alpha_test, Rng(4))
    # same mask stream, recomputed in image space
    recon = reconstruct_images(model, x, model.alpha_test, Rng(4).child("chunk0"))
    oracle = ((recon.astype(np.float64) - x.astype(np.float64)) ** 2).mean(axis=(1, 2, 3))
    np.testing.assert_allclose(ours, oracle, rtol=1e-12)
    assert patchify(x, model.victim.grid).shape[1] == model.victim.grid.patch_count


# ------------------------------------------------------ five-scenario table

def test_five_scenario_report(desk, tmp_path):
    scenarios = [("none", False), ("embedding-target", False), ("stealth-aligned", False),
                 ("embedding-target", True), ("poisoned-pretrain", False)]
    dirs = []
    for i, (kind, ood) in enumerate(scenarios):
        out = tmp_path / f"{i}-{kind}{'-ood' if ood else ''}"
        out.mkdir()
        cfg = desk.cfg(0, kind, ood)
        pipeline.write_detection(cfg, out, desk.detector(0, kind, ood), desk.detection(0, kind, ood))
        pipeline.write_downstream(cfg, out, desk.downstream(0, kind, ood=ood), "none")
        pipeline.write_downstream(cfg, out, desk.downstream(0, kind, True, ood), "dede")
        dirs.append(out)
    table = pipeline.report(dirs, tmp_path / "summary")
    print(table)
    rows = table.splitlines()[2:]
    assert [r.split("|")[1].strip() for r in rows] == [
        "no attack", "embedding-target", "stealth-aligned", "embedding-target (DeDe OOD)", "poisoned-pretrain"]
    summary = json.loads((tmp_path / "summary" / "summary.json").read_text())
    assert len(summary["runs"]) == 5
