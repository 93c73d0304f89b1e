"""Planner network trained by imitation plus repulsion from mined hard negatives.

The net maps the scaled 49-dim condition to a standardized differential
trajectory. A raster head on the last hidden layer reconstructs the corridor
occupancy as an auxiliary task.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteGradient, NonFiniteLoss, StandardizationMismatch
from .learner import (
    BATCH_SIZE, KIND_POLICY, PEAK_LR, TOTAL_EPOCHS, Adam, Mlp, checkpoint_bytes, parse_checkpoint,
    round_standardizer, round_to_f32,
)
from .rng import Stream
from .scene import COND_DIM, COND_SCALE, RASTER, Scene, corridor_raster, encode_condition
from .trajectory import DIFF_DIM, DiffTrajectory, Standardizer, from_diff

HIDDEN = 256
DEFAULT_CLIP = 5.0


@dataclass(frozen=True)
class LossWeights:
    imi: float = 10.0
    sem: float = 1.0
    rd: float = 5.0
    clip: float = DEFAULT_CLIP
    allow_unstable: bool = False  # permit rd >= imi (known to diverge)

    def __post_init__(self):
        if not self.imi > 0:
            raise ConfigError(f"imitation weight must be positive, got {self.imi}")
        if self.sem < 0 or self.rd < 0:
            raise ConfigError("loss weights must be non-negative")
        if not self.clip > 0:
            raise ConfigError(f"clip constant must be positive, got {self.clip}")
        if self.rd >= self.imi:
            if not self.allow_unstable:
                raise ConfigError(f"repulsion weight {self.rd} >= imitation weight {self.imi}; "
                                  "pass allow_unstable to override")
            warnings.warn(f"training with repulsion weight {self.rd} >= imitation weight {self.imi}",
                          RuntimeWarning, stacklevel=3)


@dataclass
class Policy:
    net: Mlp
    aux: Mlp
    standardizer: Standardizer
    epoch: int = 0
    seed: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, standardizer: Standardizer, seed: int) -> "Policy":
        st = Stream(seed, "policy-init")
        net = Mlp.init([COND_DIM, HIDDEN, HIDDEN, DIFF_DIM], st)
        aux = Mlp.init([HIDDEN, RASTER * RASTER], st)
        return cls(net, aux, standardizer, seed=seed)

    @classmethod
    def zeros(cls, standardizer: Standardizer) -> "Policy":
        return cls(Mlp.zeros([COND_DIM, HIDDEN, HIDDEN, DIFF_DIM]), Mlp.zeros([HIDDEN, RASTER * RASTER]),
                   standardizer)

    def params(self) -> list:
        return self.net.params() + self.aux.params()

    def predict(self, cond) -> np.ndarray:
        """Standardized differential output for raw conditions (B, 49) or (49,)."""
        return self.net(np.asarray(cond, dtype=float) / COND_SCALE)

    def __call__(self, scene: Scene) -> np.ndarray:
        return plan(self, scene)

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(KIND_POLICY, self.net, self.aux, self.standardizer, self.epoch, self.seed)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Policy":
        ck = parse_checkpoint(data)
        if ck["kind"] != KIND_POLICY:
            raise ValueError(f"checkpoint kind {ck['kind']:#04x} is not a policy")
        return cls(ck["main"], ck["aux"], ck["standardizer"], epoch=ck["epoch"], seed=ck["seed"])

    @classmethod
    def load(cls, path) -> "Policy":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def plan(policy: Policy, scene: Scene) -> np.ndarray:
    """Planned (8, 3) trajectory; raises DegenerateHeading for collapsed headings."""
    x = policy.predict(encode_condition(scene))
    steps = policy.standardizer.destandardize(x).reshape(-1, 4)
    return from_diff(DiffTrajectory(steps))


# ---------------------------------------------------------------- losses


def rd_loss(pred: DiffTrajectory, neg: DiffTrajectory, clip: float = DEFAULT_CLIP) -> float:
    """Negated clipped l1 distance; lies in [-clip, 0]."""
    if pred.standardized != neg.standardized:
        raise StandardizationMismatch("prediction and negative use different normalizations")
    d = float(np.abs(pred.flat() - neg.flat()).sum())
    return -min(d, clip)


def rd_terms(pred, neg, clip: float):
    """Per-row loss and d(loss)/d(pred) for flat (B, 32) arrays.

    Repulsion is active while the distance is below ``clip``; at or beyond it
    the gradient is zero.
    """
    diff = np.asarray(pred, dtype=float) - np.asarray(neg, dtype=float)
    dist = np.abs(diff).sum(axis=1)
    loss = -np.minimum(dist, clip)
    active = dist < clip
    grad = np.where(active[:, None], -np.sign(diff), 0.0)
    return loss, grad


@dataclass
class LossParts:
    total: float
    imi: float
    rd: float
    sem: float
    n_neg: int


def total_loss_terms(policy: Policy, cond, expert, negative, has_neg, raster,
                     weights: LossWeights) -> tuple[LossParts, list]:
    """Weighted objective and gradients for one batch of standardized targets.

    ``expert`` and ``negative`` are (B, 32) standardized differentials; rows of
    ``negative`` where ``has_neg`` is False are ignored. The repulsion mean runs
    over present negatives only.
    """
    expert = np.asarray(expert, dtype=float)
    has_neg = np.asarray(has_neg, dtype=bool)
    b = len(expert)
    pred, cache = policy.net.forward(np.asarray(cond, dtype=float) / COND_SCALE)

    resid = pred - expert
    imi = float(np.abs(resid).sum(axis=1).mean())
    g_pred = weights.imi * np.sign(resid) / b

    n_neg = int(has_neg.sum())
    rd = 0.0
    if n_neg:
        neg = np.asarray(negative, dtype=float)[has_neg]
        per, g_rd = rd_terms(pred[has_neg], neg, weights.clip)
        rd = float(per.sum() / n_neg)
        if weights.rd:
            g_pred[has_neg] += weights.rd * g_rd / n_neg

    logits, aux_cache = policy.aux.forward(policy.net.hidden(cache))
    y = np.asarray(raster, dtype=float)
    sem = float((np.logaddexp(0.0, logits) - y * logits).mean())
    g_logits = weights.sem * (1.0 / (1.0 + np.exp(-logits)) - y) / logits.size

    aux_grads, g_hidden = policy.aux.backward(aux_cache, g_logits)
    net_grads, _ = policy.net.backward(cache, g_pred, grad_hidden=g_hidden)
    total = weights.imi * imi + weights.rd * rd + weights.sem * sem
    if not np.isfinite(total):
        raise NonFiniteLoss("policy loss is not finite")
    return LossParts(total, imi, rd, sem, n_neg), net_grads + aux_grads


def prepare(scenes, negatives, standardizer: Standardizer):
    """Stack conditions, standardized targets, negatives and rasters for training."""
    scenes = list(scenes)
    negatives = [None] * len(scenes) if negatives is None else list(negatives)
    if len(negatives) != len(scenes):
        raise ValueError(f"{len(negatives)} negatives for {len(scenes)} scenes")
    cond = np.stack([encode_condition(s) for s in scenes])
    expert = standardizer.encode(np.stack([s.expert for s in scenes]))
    has_neg = np.array([n is not None for n in negatives], dtype=bool)
    neg = np.zeros_like(expert)
    if has_neg.any():
        neg[has_neg] = standardizer.encode(np.stack([np.asarray(n, dtype=float)
                                                     for n in negatives if n is not None]))
    raster = np.stack([corridor_raster(s) for s in scenes])
    return cond, expert, neg, has_neg, raster


def total_loss(policy: Policy, scenes, negatives, weights: LossWeights = LossWeights()):
    """Loss parts and gradients for a list of scenes and aligned negatives (or None)."""
    cond, expert, neg, has_neg, raster = prepare(scenes, negatives, policy.standardizer)
    return total_loss_terms(policy, cond, expert, neg, has_neg, raster, weights)


def train_policy(scenes, negatives=None, weights: LossWeights = LossWeights(), seed: int = 0,
                 epochs: int = TOTAL_EPOCHS, batch_size: int = BATCH_SIZE,
                 standardizer: Standardizer | None = None, peak_lr: float = PEAK_LR,
                 log=None) -> Policy:
    """Train the planner; ``negatives`` holds one (8, 3) trajectory or None per scene."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("train_policy needs a non-empty scene set")
    if standardizer is None:
        standardizer = Standardizer.fit(np.stack([s.expert for s in scenes]))
    standardizer = round_standardizer(standardizer)
    policy = Policy.init(standardizer, seed)
    cond, expert, neg, has_neg, raster = prepare(scenes, negatives, standardizer)
    opt = Adam(policy.params(), peak_lr=peak_lr, total=epochs, warmup=min(3, epochs))
    n = len(scenes)
    n_batches = (n + batch_size - 1) // batch_size
    for epoch in range(epochs):
        order = Stream(seed, "policy-epoch", epoch).permutation(n)
        sums = np.zeros(4)
        for bi in range(n_batches):
            idx = order[bi * batch_size:(bi + 1) * batch_size]
            try:
                parts, grads = total_loss_terms(policy, cond[idx], expert[idx], neg[idx], has_neg[idx],
                                                raster[idx], weights)
                opt.step(policy.params(), grads, epoch + bi / n_batches)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(str(exc), epoch) from exc
            except NonFiniteGradient as exc:
                raise NonFiniteGradient(str(exc), epoch) from exc
            sums += len(idx) * np.array([parts.total, parts.imi, parts.rd, parts.sem])
        sums /= n
        policy.history.append({"epoch": epoch, "loss": sums[0], "imi": sums[1], "rd": sums[2],
                               "sem": sums[3]})
        if log:
            log(f"policy epoch {epoch}: loss {sums[0]:.4f} imi {sums[1]:.4f} rd {sums[2]:.4f}")
    policy.net = round_to_f32(policy.net)
    policy.aux = round_to_f32(policy.aux)
    policy.epoch = epochs
    return policy
