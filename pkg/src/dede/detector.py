"""Masked-reconstruction backdoor detector.

A patch encoder sees a few visible patches, a decoder combines them with the
victim encoder's global embedding to reconstruct the whole image, and inputs
whose reconstruction error exceeds ``1.5 x`` the mean training error are
flagged. At test time the masking ratio is raised so the reconstruction leans
on the embedding, which a backdoor has steered to another class.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from . import tensor as T
from .data import ImageBatch, apply_mask, ood_noise_images, sample_mask
from .nets import DedeArch, Decoder, PatchEncoder, VictimEncoder, patchify, unpatchify
from .optim import Optimizer
from .rng import Rng
from .tensor import Graph, Tensor
from .victim import TrainingDiverged

log = logging.getLogger(__name__)

TAU_MULTIPLIER = 1.5


def params_hash(module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode("utf-8"))
        h.update(str(p.dtype).encode("ascii"))
        h.update(np.asarray(p.shape, dtype="<u4").tobytes())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def test_alpha(alpha: float) -> float:
    """Test-time masking ratio ``min(1.1 * alpha, 1.0)``, in decimal so 0.9 -> 0.99 exactly."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"masking ratio {alpha} outside [0, 1]")
    return min(float(Decimal("1.1") * Decimal(repr(float(alpha)))), 1.0)


test_alpha.__test__ = False  # not a pytest test


@dataclass
class DedeTrainConfig:
    iterations: int = 600
    lr: float = 1e-3
    alpha: float = 0.9
    batch_size: int = 64
    ood_fraction: float = 0.0
    ood_quantile: float = 0.99
    optimizer: str = "adam"
    checkpoint_every: int = 20

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    @classmethod
    def ctrl_preset(cls, **overrides) -> "DedeTrainConfig":
        base = dict(alpha=0.75, ood_fraction=0.1)
        base.update(overrides)
        return cls(**base)


@dataclass
class DedeModel:
    patch_encoder: PatchEncoder
    decoder: Decoder
    victim: VictimEncoder
    arch: DedeArch
    alpha_train: float
    tau: float = float("nan")
    train_loss_mean: float = float("nan")
    victim_hash: str = ""
    history: list[float] = field(default_factory=list)

    @property
    def alpha_test(self) -> float:
        return test_alpha(self.alpha_train)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return (self.patch_encoder.named_parameters("patch_encoder.")
                + self.decoder.named_parameters("decoder."))

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def score(self, images: np.ndarray, rng: Rng, ensemble: int = 1) -> np.ndarray:
        return score(self, images, rng, ensemble)

    def classify(self, images: np.ndarray, rng: Rng, ensemble: int = 1) -> np.ndarray:
        return classify(self, images, rng, ensemble)


def build_dede(victim: VictimEncoder, arch: DedeArch, rng: Rng, alpha: float = 0.9, dtype=np.float32) -> DedeModel:
    grid = victim.grid
    h_e = PatchEncoder(grid, arch.enc_depth, arch.enc_width, arch.heads, rng.child("h_e"), dtype)
    h_d = Decoder(grid, victim.arch.embed_dim, arch.enc_width, arch.dec_depth, arch.dec_width, arch.heads,
                  rng.child("h_d"), dtype)
    return DedeModel(h_e, h_d, victim, arch, alpha, victim_hash=params_hash(victim))


def reconstruct(model: DedeModel, images: np.ndarray, alpha: float, rng: Rng,
                embeddings: np.ndarray | None = None) -> Tensor:
    """Predicted patch grid (N, P, patch_dim); recorded on the active graph if any."""
    grid = model.victim.grid
    mask = sample_mask(alpha, grid.patch_count, rng, len(images))
    masked = apply_mask(images, mask, grid)
    if embeddings is None:
        embeddings = model.victim.embed(images)
    b = model.patch_encoder(masked.pixels, mask.visible)
    return model.decoder(Tensor(embeddings), b, mask.visible)


def reconstruct_images(model: DedeModel, images: np.ndarray, alpha: float, rng: Rng) -> np.ndarray:
    return unpatchify(reconstruct(model, images, alpha, rng).data, model.victim.grid)


def per_sample_errors(model: DedeModel, images: np.ndarray, alpha: float, rng: Rng,
                      batch_size: int = 256, embeddings: np.ndarray | None = None) -> np.ndarray:
    """Mean squared pixel error per image, float64, one fresh mask per image."""
    out = []
    grid = model.victim.grid
    for i, start in enumerate(range(0, len(images), batch_size)):
        x = images[start : start + batch_size]
        emb = None if embeddings is None else embeddings[start : start + batch_size]
        pred = reconstruct(model, x, alpha, rng.child(f"chunk{i}"), emb).data.astype(np.float64)
        diff = pred - patchify(x, grid).astype(np.float64)
        out.append((diff * diff).mean(axis=(1, 2)))
    return np.concatenate(out) if out else np.zeros(0)


def reconstruction_loss(model: DedeModel, images: np.ndarray, alpha: float, rng: Rng,
                        embeddings: np.ndarray | None = None) -> Tensor:
    """Batch mean of per-sample mean squared pixel error, full image."""
    if len(images) == 0:
        raise T.ContractError("reconstruction_loss: empty batch")
    pred = reconstruct(model, images, alpha, rng, embeddings)
    target = Tensor(patchify(images, model.victim.grid).astype(pred.dtype, copy=False))
    return T.mse(pred, target)


def train_dede(victim: VictimEncoder, data: ImageBatch, cfg: DedeTrainConfig, rng: Rng,
               arch: DedeArch | None = None) -> DedeModel:
    """Fit the patch encoder and decoder on ``data``; calibrate the threshold afterwards."""
    if len(data) == 0:
        raise T.ContractError("train_dede: empty training data")
    arch = arch or DedeArch()
    victim.set_trainable(False)
    model = build_dede(victim, arch, rng.child("init"), cfg.alpha)
    images = data.pixels
    if cfg.ood_fraction > 0:
        count = int(round(cfg.ood_fraction * len(images)))
        ref = victim.embed(images)
        noise = ood_noise_images(count, ref, rng.child("ood"), cfg.ood_quantile, encoder=victim,
                                 image_shape=images.shape[1:])
        train_images = np.concatenate([images, noise.pixels])
    else:
        train_images = images
    embeddings = victim.embed(train_images)
    n = len(train_images)
    bs = min(cfg.batch_size, n)
    opt = Optimizer(model.parameters(), lr=cfg.lr, mode=cfg.optimizer)
    order = np.zeros(0, dtype=np.int64)
    cursor = 0
    epoch = 0
    for it in range(cfg.iterations):
        if cursor + bs > len(order):
            order = rng.child(f"epoch{epoch}").permutation(n)
            cursor = 0
            epoch += 1
        idx = order[cursor : cursor + bs]
        cursor += bs
        with Graph() as g:
            loss = reconstruction_loss(model, train_images[idx], cfg.alpha, rng.child(f"mask{it}"), embeddings[idx])
        g.backward(loss)
        opt.step()
        opt.zero_grad()
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"detector training diverged at iteration {it}")
        model.history.append(value)
    calibrate(model, images, rng.child("calibrate"))
    log.info("dede trained: mean loss %.5f tau %.5f", model.train_loss_mean, model.tau)
    return model


def calibrate(model: DedeModel, images: np.ndarray, rng: Rng) -> np.ndarray:
    """Set tau = 1.5 x mean training error under the final parameters; returns the errors."""
    errors = per_sample_errors(model, images, model.alpha_train, rng)
    model.train_loss_mean = float(np.mean(errors))
    model.tau = TAU_MULTIPLIER * model.train_loss_mean
    return errors


def score(model: DedeModel, images: np.ndarray, rng: Rng, ensemble: int = 1) -> np.ndarray:
    """Reconstruction error at the test masking ratio; median over ``ensemble`` masks."""
    images = np.asarray(images)
    model.victim.grid.check(images)
    alpha = model.alpha_test
    embeddings = model.victim.embed(images)
    if ensemble <= 1:
        return per_sample_errors(model, images, alpha, rng, embeddings=embeddings)
    runs = [per_sample_errors(model, images, alpha, rng.child(f"mask{m}"), embeddings=embeddings)
            for m in range(ensemble)]
    return np.median(np.stack(runs), axis=0)


def classify(model: DedeModel, images: np.ndarray, rng: Rng, ensemble: int = 1) -> np.ndarray:
    return decide(score(model, images, rng, ensemble), model.tau)


def decide(scores: np.ndarray, tau: float) -> np.ndarray:
    return np.asarray(scores) > tau
