"""Conditional flow-matching trajectory generator with classifier-free guidance.

Trajectories are modelled in standardized differential space (32 dims). The
velocity net sees ``[x_t, time features, scaled condition, null flag]``; the
null condition is the zero vector with the flag set. An auxiliary head on the
last hidden layer reconstructs the 16x16 corridor raster for samples whose
condition was kept.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteLoss
from .learner import (
    BATCH_SIZE, KIND_GENERATOR, TOTAL_EPOCHS, Adam, Mlp, checkpoint_bytes, parse_checkpoint,
    round_standardizer, round_to_f32, time_embedding,
)
from .rng import Stream
from .scene import COND_DIM, COND_SCALE, RASTER, Scene, corridor_raster, encode_condition
from .trajectory import DIFF_DIM, Standardizer

HIDDEN = 256
IN_DIM = DIFF_DIM + 8 + COND_DIM + 1
DROP_PROB = 0.1
PRIOR_SIGMA = 1.0
MAP_WEIGHT = 1.0
# 800 scenes x 100 epochs is only ~2.5k Adam steps; at 2e-4 the field stays underfit
GENERATOR_PEAK_LR = 1e-3


@dataclass
class SamplingConfig:
    w: float = 0.5
    steps: int = 5
    n: int = 64
    sigma_scale: float = 2.0  # sampling noise as a multiple of the training prior scale

    def __post_init__(self):
        if self.w < 0 or self.steps < 1 or self.n < 1 or self.sigma_scale < 0:
            raise ValueError(f"invalid sampling config {self}")


@dataclass
class FlowModel:
    net: Mlp
    aux: Mlp
    standardizer: Standardizer
    sigma: float = PRIOR_SIGMA
    drop_prob: float = DROP_PROB
    epoch: int = 0
    seed: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def init(cls, standardizer: Standardizer, seed: int) -> "FlowModel":
        st = Stream(seed, "generator-init")
        net = Mlp.init([IN_DIM, HIDDEN, HIDDEN, DIFF_DIM], st)
        aux = Mlp.init([HIDDEN, RASTER * RASTER], st)
        return cls(net, aux, standardizer, seed=seed)

    def params(self) -> list:
        return self.net.params() + self.aux.params()

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(KIND_GENERATOR, self.net, self.aux, self.standardizer, self.epoch,
                                self.seed)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "FlowModel":
        ck = parse_checkpoint(data)
        if ck["kind"] != KIND_GENERATOR:
            raise ValueError(f"checkpoint kind {ck['kind']:#04x} is not a generator")
        return cls(ck["main"], ck["aux"], ck["standardizer"], epoch=ck["epoch"], seed=ck["seed"])

    @classmethod
    def load(cls, path) -> "FlowModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def net_input(x, t, cond, keep) -> np.ndarray:
    """Assemble velocity-net inputs. ``cond`` is the raw 49-dim condition (B, 49)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    b = len(x)
    t = np.broadcast_to(np.asarray(t, dtype=float), (b,))
    cond = np.broadcast_to(np.asarray(cond, dtype=float), (b, COND_DIM))
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), (b,))
    c = np.where(keep[:, None], cond / COND_SCALE, 0.0)
    flag = (~keep).astype(float)[:, None]
    return np.concatenate([x, time_embedding(t), c, flag], axis=1)


def velocity(model: FlowModel, x, t, cond=None) -> np.ndarray:
    """Conditional velocity, or unconditional when ``cond`` is None."""
    x = np.atleast_2d(x)
    keep = cond is not None
    c = np.zeros(COND_DIM) if cond is None else cond
    return model.net(net_input(x, t, c, keep))


def guided_velocity(model: FlowModel, x, t, cond, w: float) -> np.ndarray:
    """Classifier-free guidance: unconditional plus ``w`` times the conditional offset.

    Written as ``(1 - w) * v_uncond + w * v_cond`` so that w=1 and w=0 return
    the corresponding branch exactly.
    """
    v_u = velocity(model, x, t, None)
    v_c = velocity(model, x, t, cond)
    return (1.0 - w) * v_u + w * v_c


# ---------------------------------------------------------------- training


def interpolate(x0, x1, t) -> np.ndarray:
    """Point at time ``t`` (B,) on the straight path from noise ``x0`` to data ``x1``."""
    t = np.asarray(t, dtype=float)[:, None]
    return (1.0 - t) * x0 + t * x1


def fm_loss_terms(model: FlowModel, x1, cond, raster, x0, t, keep, map_weight: float = MAP_WEIGHT):
    """Loss and parameter gradients for one batch with explicit noise draws.

    ``loss = mean_b |v(x_t, t | C_in) - (x1 - x0)|_1 + map_weight * BCE(raster)``,
    the map term averaged over samples that kept their condition.
    Returns ``(loss, fm_loss, grads)`` with grads ordered like ``model.params()``.
    """
    x1 = np.asarray(x1, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    t = np.asarray(t, dtype=float)
    keep = np.asarray(keep, dtype=bool)
    b = len(x1)
    xt = interpolate(x0, x1, t)
    target = x1 - x0
    inp = net_input(xt, t, cond, keep)
    v, cache = model.net.forward(inp)
    resid = v - target
    fm = float(np.abs(resid).sum(axis=1).mean())
    g_out = np.sign(resid) / b

    hidden = model.net.hidden(cache)
    logits, aux_cache = model.aux.forward(hidden)
    n_keep = int(keep.sum())
    if n_keep and map_weight:
        y = np.asarray(raster, dtype=float)
        bce = np.logaddexp(0.0, logits) - y * logits
        per = bce.mean(axis=1)
        map_loss = float(per[keep].sum() / n_keep)
        g_logits = (1.0 / (1.0 + np.exp(-logits)) - y) / logits.shape[1]
        g_logits = np.where(keep[:, None], g_logits, 0.0) * (map_weight / n_keep)
    else:
        map_loss = 0.0
        g_logits = np.zeros_like(logits)
    aux_grads, g_hidden = model.aux.backward(aux_cache, g_logits)
    net_grads, _ = model.net.backward(cache, g_out, grad_hidden=g_hidden)
    loss = fm + map_weight * map_loss
    if not np.isfinite(loss):
        raise NonFiniteLoss("flow-matching loss is not finite")
    return loss, fm, net_grads + aux_grads


def draw_noise(seed: int, epoch: int, batch: int, b: int, sigma: float, drop_prob: float):
    st = Stream(seed, "generator-noise", epoch, batch)
    x0 = st.normal((b, DIFF_DIM)) * sigma
    t = st.uniform(b)
    keep = st.uniform(b) >= drop_prob
    return x0, t, keep


def fm_loss(model: FlowModel, scenes, seed: int = 0, epoch: int = 0, batch: int = 0):
    """Loss and gradients on a batch of scenes, noise drawn from the keyed stream."""
    x1 = model.standardizer.encode(np.stack([s.expert for s in scenes]))
    cond = np.stack([encode_condition(s) for s in scenes])
    raster = np.stack([corridor_raster(s) for s in scenes])
    x0, t, keep = draw_noise(seed, epoch, batch, len(scenes), model.sigma, model.drop_prob)
    return fm_loss_terms(model, x1, cond, raster, x0, t, keep)


def prepare(scenes, standardizer: Standardizer):
    x1 = standardizer.encode(np.stack([s.expert for s in scenes]))
    cond = np.stack([encode_condition(s) for s in scenes])
    raster = np.stack([corridor_raster(s) for s in scenes])
    return x1, cond, raster


def train_generator(scenes, seed: int = 0, epochs: int = TOTAL_EPOCHS, batch_size: int = BATCH_SIZE,
                    standardizer: Standardizer | None = None, peak_lr: float = GENERATOR_PEAK_LR,
                    log=None) -> FlowModel:
    """Train the velocity field with condition dropout; returns the checkpoint-exact model."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("train_generator needs a non-empty scene set")
    if standardizer is None:
        standardizer = Standardizer.fit(np.stack([s.expert for s in scenes]))
    standardizer = round_standardizer(standardizer)
    model = FlowModel.init(standardizer, seed)
    x1, cond, raster = prepare(scenes, standardizer)
    opt = Adam(model.params(), peak_lr=peak_lr, total=epochs, warmup=min(3, epochs))
    n = len(scenes)
    n_batches = (n + batch_size - 1) // batch_size
    for epoch in range(epochs):
        order = Stream(seed, "generator-epoch", epoch).permutation(n)
        fm_sum, tot_sum = 0.0, 0.0
        for bi in range(n_batches):
            idx = order[bi * batch_size:(bi + 1) * batch_size]
            x0, t, keep = draw_noise(seed, epoch, bi, len(idx), model.sigma, model.drop_prob)
            try:
                loss, fm, grads = fm_loss_terms(model, x1[idx], cond[idx], raster[idx], x0, t, keep)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(str(exc), epoch) from exc
            params = model.params()
            opt.step(params, grads, epoch + bi / n_batches)
            fm_sum += fm * len(idx)
            tot_sum += loss * len(idx)
        model.history.append({"epoch": epoch, "fm_loss": fm_sum / n, "loss": tot_sum / n})
        if log:
            log(f"generator epoch {epoch}: fm {fm_sum / n:.4f}")
    model.net = round_to_f32(model.net)
    model.aux = round_to_f32(model.aux)
    model.epoch = epochs
    return model


# ---------------------------------------------------------------- sampling


def initial_noise(seed: int, scene_id: int, n: int, sigma_sample: float) -> np.ndarray:
    """One independent stream per candidate, so candidates can be drawn in any order."""
    return np.stack([Stream(seed, "sample", scene_id, i).normal(DIFF_DIM) for i in range(n)]) * sigma_sample


def euler_integrate(field_fn, x0, steps: int) -> np.ndarray:
    """Explicit Euler from t=0 to t=1, evaluating the field at each step's start time."""
    x = np.array(x0, dtype=float)
    dt = 1.0 / steps
    for k in range(steps):
        x = x + field_fn(x, k * dt) * dt
    return x


def sample_standardized(model: FlowModel, cond, cfg: SamplingConfig, seed: int, scene_id: int):
    x0 = initial_noise(seed, scene_id, cfg.n, cfg.sigma_scale * model.sigma)
    return euler_integrate(lambda x, t: guided_velocity(model, x, t, cond, cfg.w), x0, cfg.steps)


def sample_candidates(model: FlowModel, scene: Scene, cfg: SamplingConfig = SamplingConfig(),
                      seed: int = 0):
    """N decoded candidate trajectories plus a per-candidate degenerate-heading flag."""
    x = sample_standardized(model, encode_condition(scene), cfg, seed, scene.scene_id)
    return model.standardizer.decode(x)
