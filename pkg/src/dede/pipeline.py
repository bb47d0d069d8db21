"""Pipeline stages shared by the CLI and in-process runs.

Each stage reads its inputs from, and writes its outputs to, a run directory.
Randomness for a stage comes from a fixed child stream of the master seed, so
running stages through the CLI or through :func:`run_all` gives identical bytes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import persist, reports
from .config import PipelineConfig
from .data import ImageBatch, apply_trigger, generate_dataset, poison_dataset
from .detector import DedeModel, train_dede
from .evalkit import (DetectionReport, DownstreamReport, detection_report, evaluate_downstream,
                      kmeans_outlier_baseline, roc_auc, roc_curve, train_linear_probe)
from .nets import VictimEncoder
from .rng import Rng
from .victim import (AttackResult, attack_metrics, inject_embedding_target, inject_stealth_aligned,
                     poisoned_pretrain, pretrain_clean, reference_embedding, spectral_poison)

log = logging.getLogger(__name__)

SPLITS = ("pretrain", "dede_train", "downstream_train", "test", "ood_dede_train")


class MissingInput(FileNotFoundError):
    pass


@dataclass(frozen=True)
class RunPaths:
    root: Path

    def dataset(self, split: str) -> Path:
        return self.root / "data" / f"{split}.dset"

    @property
    def clean_encoder(self) -> Path:
        return self.root / "encoder-clean.ckpt"

    def attacked_encoder(self, kind: str) -> Path:
        return self.root / f"encoder-{kind}.ckpt"

    def victim_encoder(self, cfg: PipelineConfig) -> Path:
        kind = cfg.attack["kind"]
        return self.clean_encoder if kind == "none" else self.attacked_encoder(kind)

    @property
    def dede(self) -> Path:
        return self.root / "dede.ckpt"

    @property
    def config(self) -> Path:
        return self.root / "config.ini"

    def __getattr__(self, name: str) -> Path:
        files = {
            "attack_json": "attack.json", "detection_json": "detection.json", "scores_csv": "scores.csv",
            "roc_csv": "roc.csv", "histogram_svg": "histogram.svg", "baseline_json": "baseline.json",
            "summary_txt": "summary.txt", "summary_json": "summary.json",
        }
        if name in files:
            return self.root / files[name]
        raise AttributeError(name)

    def downstream_json(self, defense: str) -> Path:
        return self.root / f"downstream-{defense}.json"


def stage_rng(cfg: PipelineConfig, stage: str) -> Rng:
    return Rng(cfg.seed).child(stage)


def run_meta(cfg: PipelineConfig) -> dict:
    return {"seed": cfg.seed, "config": cfg.to_dict()}


def meta_string(cfg: PipelineConfig) -> str:
    return json.dumps(run_meta(cfg), sort_keys=True)


def require(path: Path) -> Path:
    if not Path(path).is_file():
        raise MissingInput(f"missing input file: {path}")
    return Path(path)


# ------------------------------------------------------------------- stages


def make_data(cfg: PipelineConfig) -> dict[str, ImageBatch]:
    rng = stage_rng(cfg, "data")
    data = generate_dataset(cfg.dataset_spec(), rng.child("main"))
    ood_spec = cfg.dataset_spec(ood=True)
    ood = generate_dataset(ood_spec, rng.child("ood"))
    data["ood_dede_train"] = ood["dede_train"]
    return data


def gen_data(cfg: PipelineConfig, out: Path) -> dict[str, ImageBatch]:
    paths = RunPaths(out)
    (out / "data").mkdir(parents=True, exist_ok=True)
    data = make_data(cfg)
    for split in SPLITS:
        persist.save_dataset(paths.dataset(split), data[split])
    paths.config.write_text(cfg.to_ini(), encoding="utf-8")
    return data


def load_split(paths: RunPaths, split: str, override: Path | None = None) -> ImageBatch:
    tag = {"dede_train": "dede-train", "ood_dede_train": "dede-train", "test": "test"}.get(split, "train")
    return persist.load_dataset(require(override or paths.dataset(split)), tag)


def new_encoder(cfg: PipelineConfig) -> VictimEncoder:
    return VictimEncoder(cfg.grid(), cfg.encoder_arch(), stage_rng(cfg, "encoder-init"))


def train_clean_encoder(cfg: PipelineConfig, data: ImageBatch) -> VictimEncoder:
    enc = new_encoder(cfg)
    pretrain_clean(enc, data, cfg.contrastive(), stage_rng(cfg, "pretrain"))
    enc.set_trainable(False)
    return enc


def pretrain(cfg: PipelineConfig, out: Path, dataset: Path | None = None) -> VictimEncoder:
    paths = RunPaths(out)
    enc = train_clean_encoder(cfg, load_split(paths, "pretrain", dataset))
    persist.save_encoder(paths.clean_encoder, enc, meta_string(cfg))
    return enc


def run_attack(cfg: PipelineConfig, clean: VictimEncoder | None, shadow: ImageBatch,
               heldout: np.ndarray) -> AttackResult:
    """Backdoor an encoder; ``poisoned-pretrain`` trains from scratch and ignores ``clean``."""
    acfg = cfg.attack_config()
    rng = stage_rng(cfg, "attack")
    if acfg.kind == "poisoned-pretrain":
        poisoned = spectral_poison(shadow, acfg, rng.child("poison"))
        enc = new_encoder(cfg)
        history = poisoned_pretrain(enc, poisoned, cfg.contrastive(cfg.attack["pretrain_epochs"]), rng.child("pretrain"))
        enc.set_trainable(False)
        e_target, _ = reference_embedding(enc, shadow, acfg, rng.child("reference"))
        eff, _ = attack_metrics(enc, enc, heldout, acfg.trigger, e_target)
        util = float("nan") if clean is None else attack_metrics(clean, enc, heldout, acfg.trigger, e_target)[1]
        return AttackResult(enc, eff, util, history, eff >= acfg.min_effectiveness)
    if clean is None:
        raise MissingInput(f"{acfg.kind} attack needs a clean encoder")
    inject = inject_embedding_target if acfg.kind == "embedding-target" else inject_stealth_aligned
    return inject(clean, acfg, shadow, rng, heldout=heldout)


def attack(cfg: PipelineConfig, out: Path, encoder: Path | None = None, dataset: Path | None = None) -> AttackResult:
    paths = RunPaths(out)
    kind = cfg.attack["kind"]
    if kind == "none":
        raise ValueError("[attack] kind = none: nothing to inject")
    clean = None
    if encoder is not None or kind != "poisoned-pretrain" or paths.clean_encoder.is_file():
        clean = persist.load_encoder(require(encoder or paths.clean_encoder))
    shadow = load_split(paths, "pretrain", dataset)
    heldout = load_split(paths, "test").pixels[:256]
    result = run_attack(cfg, clean, shadow, heldout)
    persist.save_encoder(paths.attacked_encoder(kind), result.encoder, meta_string(cfg))
    payload = {"kind": kind, "effectiveness": result.effectiveness, "utility": result.utility,
               "success": result.success, **run_meta(cfg)}
    paths.attack_json.write_text(reports.dumps(payload), encoding="utf-8")
    return result


def detector_training_data(cfg: PipelineConfig, data: ImageBatch) -> ImageBatch:
    """``data`` with ``[dede] poison_rate`` of it triggered; the defender does not filter."""
    rate = cfg.dede["poison_rate"]
    if rate <= 0:
        return data
    return poison_dataset(data, cfg.trigger(), rate, cfg.attack["target"], stage_rng(cfg, "dede").child("poison"))


def fit_detector(cfg: PipelineConfig, victim: VictimEncoder, data: ImageBatch) -> DedeModel:
    return train_dede(victim, detector_training_data(cfg, data), cfg.dede_config(), stage_rng(cfg, "dede"),
                      cfg.dede_arch())


def train_detector(cfg: PipelineConfig, out: Path, encoder: Path | None = None,
                   dataset: Path | None = None) -> DedeModel:
    paths = RunPaths(out)
    victim = persist.load_encoder(require(encoder or paths.victim_encoder(cfg)))
    split = "ood_dede_train" if cfg.dede["train_data"] == "ood" else "dede_train"
    model = fit_detector(cfg, victim, load_split(paths, split, dataset))
    persist.save_dede(paths.dede, model, meta_string(cfg))
    return model


def balanced_test_set(cfg: PipelineConfig, test: ImageBatch) -> tuple[np.ndarray, np.ndarray]:
    """(images, is_triggered) with the configured triggered fraction.

    Candidates are split by a seeded permutation: triggered samples come from
    non-target-class images of one part, clean samples from the other.
    """
    frac = cfg.values["eval"]["test_triggered_fraction"]
    target = cfg.attack["target"]
    order = stage_rng(cfg, "balanced").permutation(len(test))
    half = len(test) // 2
    clean_pool, trig_pool = order[:half], order[half:]
    trig_pool = trig_pool[test.labels[trig_pool] != target]
    n_pos = min(len(trig_pool), int(np.floor(len(clean_pool) * frac / (1 - frac) + 1e-9)))
    n_neg = min(len(clean_pool), int(np.floor(n_pos * (1 - frac) / frac + 1e-9)))
    pos = apply_trigger(test.pixels[np.sort(trig_pool[:n_pos])], cfg.trigger())
    neg = test.pixels[np.sort(clean_pool[:n_neg])]
    return np.concatenate([neg, pos]), np.r_[np.zeros(n_neg, bool), np.ones(n_pos, bool)]


@dataclass
class DetectionOutcome:
    report: DetectionReport
    thresholds: np.ndarray
    kmeans_auc: float
    kmeans_k: int


def evaluate_detection(cfg: PipelineConfig, victim: VictimEncoder, model: DedeModel,
                       test: ImageBatch) -> DetectionOutcome:
    images, labels = balanced_test_set(cfg, test)
    rng = stage_rng(cfg, "detect")
    scores = model.score(images, rng.child("score"), cfg.values["eval"]["ensemble"])
    rep = detection_report(scores, labels, model.tau)
    _, _, thresholds = roc_curve(scores, labels)
    k = cfg.values["eval"]["kmeans_k"] or cfg.data["classes"] + 1
    km = kmeans_outlier_baseline(victim.embed(images), k, rng.child("kmeans"))
    return DetectionOutcome(rep, thresholds, roc_auc(km, labels), k)


def detect(cfg: PipelineConfig, out: Path, encoder: Path | None = None, dede: Path | None = None,
           dataset: Path | None = None) -> DetectionOutcome:
    paths = RunPaths(out)
    victim = persist.load_encoder(require(encoder or paths.victim_encoder(cfg)))
    model = persist.load_dede(require(dede or paths.dede), victim)
    outcome = evaluate_detection(cfg, victim, model, load_split(paths, "test", dataset))
    write_detection(cfg, out, model, outcome)
    return outcome


def write_detection(cfg: PipelineConfig, out: Path, model: DedeModel, outcome: DetectionOutcome) -> dict:
    paths = RunPaths(out)
    rep = outcome.report
    reports.write_scores_csv(paths.scores_csv, rep.scores, rep.labels, rep.tau)
    fpr, tpr = rep.roc
    reports.write_roc_csv(paths.roc_csv, fpr, tpr, outcome.thresholds)
    paths.histogram_svg.write_text(
        reports.histogram_svg(rep.scores[~rep.labels], rep.scores[rep.labels], rep.tau), encoding="utf-8")
    payload = {
        "tpr": rep.tpr, "fpr": rep.fpr, "auc": rep.auc, "tau": rep.tau,
        "alpha_train": model.alpha_train, "alpha_test": model.alpha_test,
        "n_pos": int(rep.labels.sum()), "n_neg": int((~rep.labels).sum()),
        "scores_path": paths.scores_csv.name, **run_meta(cfg),
    }
    reports.write_json(paths.detection_json, payload, reports.DETECTION_KEYS)
    baseline = {"kmeans_auc": outcome.kmeans_auc, "kmeans_k": outcome.kmeans_k, **run_meta(cfg)}
    paths.baseline_json.write_text(reports.dumps(baseline), encoding="utf-8")
    return payload


def evaluate_defense(cfg: PipelineConfig, victim: VictimEncoder, model: DedeModel | None,
                     train: ImageBatch, test: ImageBatch) -> DownstreamReport:
    """Linear probe on the (optionally filtered, optionally poisoned) downstream split, then CA/ASR."""
    rng = stage_rng(cfg, "downstream")
    target = cfg.attack["target"]
    rate = cfg.values["eval"]["downstream_poison_rate"]
    if rate > 0:
        train = poison_dataset(train, cfg.trigger(), rate, target, rng.child("poison"))
    keep = None
    detector = None
    if model is not None:
        calls = iter(range(1 << 30))
        detector = lambda x: model.classify(x, rng.child(f"filter{next(calls)}"))
        keep = ~detector(train.pixels)
    probe = train_linear_probe(victim, train.pixels, train.labels, cfg.data["classes"], cfg.probe_config(),
                               rng.child("probe"), keep)
    filtered_train = 0 if keep is None else int((~keep).sum())
    return evaluate_downstream(victim, probe, test.pixels, test.labels, apply_trigger(test.pixels, cfg.trigger()),
                               test.labels, target, detector, filtered_train)


def downstream(cfg: PipelineConfig, out: Path, encoder: Path | None = None, dede: Path | None = None,
               dataset: Path | None = None) -> DownstreamReport:
    paths = RunPaths(out)
    victim = persist.load_encoder(require(encoder or paths.victim_encoder(cfg)))
    model = None if dede is None else persist.load_dede(require(dede), victim)
    rep = evaluate_defense(cfg, victim, model, load_split(paths, "downstream_train", dataset),
                           load_split(paths, "test"))
    write_downstream(cfg, out, rep, "none" if model is None else "dede")
    return rep


def write_downstream(cfg: PipelineConfig, out: Path, rep: DownstreamReport, defense: str) -> dict:
    payload = {"ca": rep.ca, "asr": rep.asr, "filtered_train": rep.filtered_train,
               "filtered_test": rep.filtered_test, "attack_kind": cfg.attack["kind"], "defense": defense,
               **run_meta(cfg)}
    reports.write_json(RunPaths(out).downstream_json(defense), payload, reports.DOWNSTREAM_KEYS)
    return payload


def collect_run(run_dir: Path) -> dict:
    run_dir = Path(run_dir)
    run: dict = {"detection": None, "downstream": {}, "dir": str(run_dir)}
    for path in sorted(run_dir.glob("*.json")):
        payload = reports.read_json(path)
        try:
            kind = reports.report_kind(payload)
        except reports.ReportSchemaError:
            continue
        reports.validate_keys(payload, reports.DETECTION_KEYS if kind == "detection" else reports.DOWNSTREAM_KEYS)
        if kind == "detection":
            run["detection"] = payload
        else:
            run["downstream"][payload["defense"]] = payload
    return run


def report(run_dirs: list[Path], out: Path) -> str:
    runs = [collect_run(d) for d in run_dirs]
    runs = [r for r in runs if r["detection"] or r["downstream"]]
    if not runs:
        raise MissingInput("no detection or downstream reports found")
    table = reports.summary_table(runs)
    out.mkdir(parents=True, exist_ok=True)
    paths = RunPaths(out)
    paths.summary_txt.write_text(table, encoding="utf-8")
    summary = [{"scenario": reports.scenario_name((r["detection"] or next(iter(r["downstream"].values())))["config"]),
                "detection": r["detection"] and {k: r["detection"][k] for k in sorted(reports.DETECTION_KEYS)},
                "downstream": {d: {k: v[k] for k in sorted(reports.DOWNSTREAM_KEYS)} for d, v in r["downstream"].items()}}
               for r in runs]
    paths.summary_json.write_text(reports.dumps({"runs": summary}), encoding="utf-8")
    return table


def run_all(cfg: PipelineConfig, out: Path) -> None:
    """Every stage in order through the run directory."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    gen_data(cfg, out)
    if cfg.attack["kind"] != "poisoned-pretrain":
        pretrain(cfg, out)
    if cfg.attack["kind"] != "none":
        attack(cfg, out)
    train_detector(cfg, out)
    detect(cfg, out)
    downstream(cfg, out)
    downstream(cfg, out, dede=RunPaths(out).dede)
