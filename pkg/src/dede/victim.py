"""Encoders under test: contrastive pretraining and backdoor injection."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import AugmentConfig, ImageBatch, Trigger, apply_trigger, augment, poison_dataset
from .nets import VictimEncoder
from .optim import Optimizer
from .rng import Rng
from .tensor import Graph, Tensor

log = logging.getLogger(__name__)

ATTACK_KINDS = ("embedding-target", "stealth-aligned", "poisoned-pretrain")


class TrainingDiverged(RuntimeError):
    pass


class AttackFailed(RuntimeError):
    pass


@dataclass
class ContrastiveConfig:
    temperature: float = 0.5
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3


def nt_xent(z: Tensor, temperature: float) -> Tensor:
    """NT-Xent over 2B normalized rows where row i and row i+B are a positive pair."""
    n2 = z.shape[0]
    if n2 % 2 or n2 < 2:
        raise T.ContractError(f"nt_xent needs an even number of rows, got {n2}")
    b = n2 // 2
    sim = T.scale(T.matmul(z, z.transpose(1, 0)), 1.0 / temperature)
    self_mask = np.zeros((n2, n2), dtype=z.dtype)
    np.fill_diagonal(self_mask, -1e9)
    logits = T.add(sim, Tensor(self_mask))
    labels = np.concatenate([np.arange(b, n2), np.arange(0, b)])
    return T.cross_entropy_with_logits(logits, labels)


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"{what}: loss became {value}")


def pretrain_clean(encoder: VictimEncoder, data: ImageBatch, cfg: ContrastiveConfig, rng: Rng) -> list[float]:
    """SimCLR-style training in place; returns the per-step loss history."""
    if cfg.batch_size < 2:
        raise ValueError("contrastive batch size must be at least 2")
    n = len(data)
    if n < 2:
        raise ValueError("need at least two images")
    opt = Optimizer(encoder.parameters(), lr=cfg.lr)
    bs = min(cfg.batch_size, n)
    history = []
    for epoch in range(cfg.epochs):
        erng = rng.child(f"epoch{epoch}")
        order = erng.permutation(n)
        for step, start in enumerate(range(0, n - bs + 1, bs)):
            x = data.pixels[order[start : start + bs]]
            srng = erng.child(f"step{step}")
            views = np.concatenate([augment(x, cfg.augment, srng.child("a")), augment(x, cfg.augment, srng.child("b"))])
            with Graph() as g:
                loss = nt_xent(encoder(views), cfg.temperature)
            g.backward(loss)
            opt.step()
            opt.zero_grad()
            history.append(loss.item())
            _check_finite(history[-1], "contrastive pretraining")
        log.info("pretrain epoch %d loss %.4f", epoch, history[-1])
    return history


@dataclass
class AttackConfig:
    kind: str = "embedding-target"
    trigger: Trigger = field(default_factory=Trigger)
    target: int = 0
    reference_size: int = 32
    lambda_eff: float = 1.0
    lambda_util: float = 1.0
    lambda_align: float = 1.0
    align_warmup_epochs: int = 2
    epochs: int = 6
    batch_size: int = 64
    lr: float = 1e-3
    poison_rate: float = 0.08
    min_effectiveness: float = 0.9
    min_utility: float = 0.9

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if min(self.lambda_eff, self.lambda_util, self.lambda_align) < 0:
            raise ValueError("attack weights must be nonnegative")


@dataclass
class AttackResult:
    encoder: VictimEncoder
    effectiveness: float
    utility: float
    history: list[float]
    success: bool


def reference_embedding(encoder: VictimEncoder, shadow: ImageBatch, cfg: AttackConfig, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Renormalized mean clean embedding of ``reference_size`` target-class images.

    Also returns the reference embeddings themselves.
    """
    pool = np.nonzero(shadow.labels == cfg.target)[0]
    if len(pool) == 0:
        raise ValueError(f"shadow set has no images of target class {cfg.target}")
    pick = pool[rng.subset(len(pool), min(cfg.reference_size, len(pool)))]
    ref = encoder.embed(shadow.pixels[pick]).astype(np.float64)
    mean = ref.mean(axis=0)
    return (mean / np.linalg.norm(mean)).astype(np.float32), ref


def attack_metrics(clean: VictimEncoder, backdoored: VictimEncoder, heldout: np.ndarray,
                   trigger: Trigger, e_target: np.ndarray) -> tuple[float, float]:
    """(mean cos(f*(x+t), e_target), mean cos(f*(x), f(x))) on held-out clean images."""
    trig = backdoored.embed(apply_trigger(heldout, trigger))
    eff = float((trig @ e_target).mean())
    util = float((backdoored.embed(heldout) * clean.embed(heldout)).sum(axis=1).mean())
    return eff, util


STD_EPS = 1e-8


def _moments(e: Tensor, eps: float = STD_EPS) -> tuple[Tensor, Tensor]:
    mu = T.mean(e, axis=0)
    centered = T.add(e, T.scale(mu, -1.0))
    var = T.mean(T.mul(centered, centered), axis=0)
    return mu, T.sqrt(var, eps=eps)


def _finetune(clean: VictimEncoder, cfg: AttackConfig, shadow: ImageBatch, rng: Rng, align: bool,
              heldout: np.ndarray | None) -> AttackResult:
    e_target, ref = reference_embedding(clean, shadow, cfg, rng.child("reference"))
    tgt_mu = ref.mean(axis=0).astype(np.float32)
    tgt_sigma = np.sqrt(ref.var(axis=0) + STD_EPS).astype(np.float32)
    victim = copy.deepcopy(clean)
    victim.set_trainable(True)
    clean_emb = clean.embed(shadow.pixels)
    opt = Optimizer(victim.parameters(), lr=cfg.lr)
    n = len(shadow)
    bs = min(cfg.batch_size, n)
    target_t = Tensor(e_target[None, :])
    history = []
    for epoch in range(cfg.epochs):
        order = rng.child(f"epoch{epoch}").permutation(n)
        for start in range(0, n - bs + 1, bs):
            idx = order[start : start + bs]
            x = shadow.pixels[idx]
            xt = apply_trigger(x, cfg.trigger)
            with Graph() as g:
                both = victim(np.concatenate([xt, x]))
                e_bd, e_cl = both[:bs], both[bs:]
                eff = T.mean(T.cosine_similarity(e_bd, target_t))
                util = T.mean(T.cosine_similarity(e_cl, Tensor(clean_emb[idx])))
                loss = T.add(T.scale(eff, -cfg.lambda_eff), T.scale(util, -cfg.lambda_util))
                if align and cfg.lambda_align > 0 and epoch >= cfg.align_warmup_epochs:
                    mu, sigma = _moments(e_bd, STD_EPS)
                    dmu = T.add(mu, Tensor(-tgt_mu))
                    dsig = T.add(sigma, Tensor(-tgt_sigma))
                    gap = T.add(T.sum_(T.mul(dmu, dmu)), T.sum_(T.mul(dsig, dsig)))
                    loss = T.add(loss, T.scale(gap, cfg.lambda_align))
            g.backward(loss)
            opt.step()
            opt.zero_grad()
            history.append(loss.item())
            _check_finite(history[-1], f"{cfg.kind} injection")
    victim.set_trainable(False)
    if heldout is None:
        heldout = shadow.pixels[: min(256, n)]
    eff_v, util_v = attack_metrics(clean, victim, heldout, cfg.trigger, e_target)
    ok = eff_v >= cfg.min_effectiveness and util_v >= cfg.min_utility
    if not ok:
        log.warning("%s attack below thresholds: effectiveness %.3f utility %.3f", cfg.kind, eff_v, util_v)
    return AttackResult(victim, eff_v, util_v, history, ok)


def inject_embedding_target(clean: VictimEncoder, cfg: AttackConfig, shadow: ImageBatch, rng: Rng,
                            heldout: np.ndarray | None = None) -> AttackResult:
    """Fine-tune a copy of ``clean`` so triggered inputs land on the target embedding."""
    return _finetune(clean, cfg, shadow, rng, align=False, heldout=heldout)


def inject_stealth_aligned(clean: VictimEncoder, cfg: AttackConfig, shadow: ImageBatch, rng: Rng,
                           heldout: np.ndarray | None = None) -> AttackResult:
    """As :func:`inject_embedding_target`, plus matching the per-dimension mean and
    std of backdoor embeddings to the target-class clean embedding distribution."""
    return _finetune(clean, cfg, shadow, rng, align=True, heldout=heldout)


def poisoned_pretrain(encoder: VictimEncoder, data: ImageBatch, cfg: ContrastiveConfig, rng: Rng) -> list[float]:
    """Contrastive pretraining on an already-poisoned split (see :func:`spectral_poison`)."""
    return pretrain_clean(encoder, data, cfg, rng)


def spectral_poison(data: ImageBatch, attack: AttackConfig, rng: Rng) -> ImageBatch:
    """Trigger ``attack.poison_rate`` of the pretraining split, drawn from the target class."""
    return poison_dataset(data, attack.trigger, attack.poison_rate, attack.target, rng, pool="target")
