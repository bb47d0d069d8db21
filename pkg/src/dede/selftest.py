"""Independent oracles: central finite differences for gradients, pairwise Mann-Whitney for AUC."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .evalkit import roc_auc
from .nets import TransformerStack
from .rng import Rng
from .tensor import Graph, Tensor

FD_STEP = 1e-5
GRAD_RTOL = 1e-5
GRAD_FLOOR = 1e-8
AUC_TOL = 1e-9


@dataclass
class GradCheck:
    name: str
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= GRAD_RTOL


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error with an absolute floor on the denominator."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), GRAD_FLOOR)
    return float(num / den)


def finite_difference(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_function(name: str, build: Callable[[list[Tensor]], Tensor], inputs: list[np.ndarray],
                   rng: Rng) -> GradCheck:
    """Compare backprop with finite differences for ``sum(build(xs) * w)`` with a fixed random ``w``."""
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    probe = build(leaves)
    w = rng.standard_normal(probe.shape) if probe.ndim else np.array(1.0)

    def loss_value() -> float:
        return float((np.asarray(build(leaves).data, dtype=np.float64) * w).sum())

    with Graph() as g:
        out = build(leaves)
        loss = T.sum_(T.mul(out, Tensor(w, dtype=np.float64)))
    for t in leaves:
        t.grad = None
    g.backward(loss)
    worst = 0.0
    for t in leaves:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        worst = max(worst, relative_error(analytic, finite_difference(loss_value, t.data)))
    return GradCheck(name, worst)


def _away_from_zero(a: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(a) < margin, np.sign(a) * margin + (a == 0) * margin, a)


def primitive_checks(seed: int = 0) -> list[GradCheck]:
    rng = Rng(seed).child("primitive-grad")
    n = lambda *s: rng.standard_normal(s)
    checks = [
        ("matmul", lambda t: T.matmul(t[0], t[1]), [n(3, 4), n(4, 5)]),
        ("matmul-batched", lambda t: T.matmul(t[0], t[1]), [n(2, 3, 4), n(4, 2)]),
        ("add-broadcast", lambda t: T.add(t[0], t[1]), [n(3, 4), n(4)]),
        ("mul-broadcast", lambda t: T.mul(t[0], t[1]), [n(2, 3, 4), n(3, 1)]),
        ("scale", lambda t: T.scale(t[0], -1.7), [n(3, 4)]),
        ("transpose", lambda t: T.transpose(t[0], (2, 0, 1)), [n(2, 3, 4)]),
        ("reshape", lambda t: T.reshape(t[0], (4, 6)), [n(2, 3, 4)]),
        ("slice-basic", lambda t: T.slice_(t[0], (slice(None), slice(1, 3))), [n(3, 4)]),
        ("slice-gather", lambda t: T.slice_(t[0], np.array([0, 2, 2, 1])), [n(3, 4)]),
        ("concat", lambda t: T.concat([t[0], t[1]], axis=1), [n(2, 3), n(2, 2)]),
        ("mean", lambda t: T.mean(t[0], axis=1, keepdims=True), [n(3, 4)]),
        ("sum", lambda t: T.sum_(t[0], axis=0), [n(3, 4)]),
        ("relu", lambda t: T.relu(t[0]), [_away_from_zero(n(3, 4))]),
        ("gelu", lambda t: T.gelu(t[0]), [n(3, 4)]),
        ("softmax_lastdim", lambda t: T.softmax_lastdim(t[0]), [n(3, 5)]),
        ("layernorm_lastdim", lambda t: T.layernorm_lastdim(t[0]), [n(3, 6)]),
        ("mse", lambda t: T.mse(t[0], t[1]), [n(3, 4), n(3, 4)]),
        ("cosine_similarity", lambda t: T.cosine_similarity(t[0], t[1]), [n(4, 5), n(4, 5)]),
        ("cross_entropy_with_logits", lambda t: T.cross_entropy_with_logits(t[0], np.array([0, 2, 1, 2])),
         [n(4, 3)]),
        ("exp", lambda t: T.exp(t[0]), [n(3, 4)]),
        ("log", lambda t: T.log(t[0]), [0.5 + rng.uniform01((3, 4))]),
        ("sqrt", lambda t: T.sqrt(t[0]), [0.5 + rng.uniform01((3, 4))]),
        ("l2_normalize", lambda t: T.l2_normalize(t[0]), [n(3, 4)]),
        ("clamp01", lambda t: T.clamp01(t[0]), [0.5 + 0.4 * _away_from_zero(n(3, 4)).clip(-1, 1)]),
    ]
    return [check_function(name, fn, inputs, rng.child(name)) for name, fn, inputs in checks]


def transformer_check(seed: int = 0, depth: int = 2, width: int = 8, heads: int = 2) -> GradCheck:
    """Every parameter and the input of a ``depth``-block transformer under an MSE loss."""
    rng = Rng(seed).child("transformer-grad")
    stack = TransformerStack(depth, width, heads, rng.child("init"), dtype=np.float64)
    for name, p in stack.named_parameters():
        # break the default unit-gain / zero-shift symmetry so every path carries signal
        p.data += 0.1 * rng.child(f"jitter/{name}").standard_normal(p.shape)
    x = Tensor(rng.standard_normal((2, 5, width)), requires_grad=True, dtype=np.float64)
    target = Tensor(rng.standard_normal((2, 5, width)), dtype=np.float64)
    stack.set_trainable(True)
    leaves = [x] + stack.parameters()
    for t in leaves:
        t.grad = None
    with Graph() as g:
        loss = T.mse(stack(x), target)
    g.backward(loss)

    def value() -> float:
        return float(T.mse(stack(x), target).data)

    worst = 0.0
    for t in leaves:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        worst = max(worst, relative_error(analytic, finite_difference(value, t.data)))
    return GradCheck(f"transformer-{depth}-block", worst)


def mann_whitney_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """P(pos > neg) + 0.5 P(pos == neg) by brute-force pairing."""
    pos = scores[labels]
    neg = scores[~labels]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def auc_oracle_sets(count: int = 200, max_n: int = 50, seed: int = 0):
    rng = Rng(seed).child("auc-oracle")
    for i in range(count):
        r = rng.child(f"set{i}")
        n = int(r.integers(2, max_n + 1))
        labels = r.uniform01(n) < 0.5
        labels[0], labels[1] = True, False
        # coarse grid forces ties
        scores = np.round(r.standard_normal(n) * 2) / 2 if i % 2 == 0 else r.standard_normal(n)
        yield scores, labels


def auc_check(count: int = 200, seed: int = 0) -> float:
    """Largest |trapezoid AUC - Mann-Whitney| over the random sets."""
    return max(abs(roc_auc(s, y) - mann_whitney_auc(s, y)) for s, y in auc_oracle_sets(count, seed=seed))


def run_selftest(quick: bool = False, echo: Callable[[str], None] = print) -> bool:
    ok = True
    t0 = time.perf_counter()
    checks = primitive_checks()
    if not quick:
        checks.append(transformer_check())
    for c in checks:
        ok &= c.ok
        echo(f"{'PASS' if c.ok else 'FAIL'} grad {c.name}: rel error {c.max_rel_error:.2e}")
    gap = auc_check()
    ok &= gap <= AUC_TOL
    echo(f"{'PASS' if gap <= AUC_TOL else 'FAIL'} auc vs Mann-Whitney on 200 sets: max gap {gap:.2e}")
    echo(f"selftest {'passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f}s")
    return bool(ok)
