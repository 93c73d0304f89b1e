import numpy as np
import pytest

from hnplan.flowgen import FlowModel, fm_loss_terms, interpolate, net_input
from hnplan.policy import Policy, total_loss_terms
from hnplan.rng import Stream
from hnplan.scene import (
    Corridor, EgoState, Scene, corridor_raster, encode_condition, generate_scene_set, synthesize_expert,
)
from hnplan.trajectory import K


def random_trajectories(rng: np.random.Generator, n: int) -> np.ndarray:
    """Plausible forward-driving (n, 8, 3) trajectories with wrapped headings."""
    heading = np.cumsum(rng.normal(0, 0.15, (n, K)), axis=1)
    speed = rng.uniform(0.5, 8.0, (n, K))
    dx = speed * np.cos(heading)
    dy = speed * np.sin(heading)
    xy = np.cumsum(np.stack([dx, dy], axis=-1), axis=1)
    h = np.mod(heading + np.pi, 2 * np.pi) - np.pi
    return np.concatenate([xy, h[..., None]], axis=-1)


def straight_road_scenes(n, seed=0):
    """Empty straight corridors with random width and ego speed."""
    st = Stream(seed, "straight-roads")
    xs = np.arange(-16.0, 160.0, 2.0)
    out = []
    for i in range(n):
        corridor = Corridor(np.stack([xs, np.zeros_like(xs)], axis=1), st.uniform_range(2.0, 4.0))
        scene = Scene(i, "easy", corridor, [], EgoState(st.uniform_range(2.0, 15.0), 0.0), "go_straight")
        scene.expert = synthesize_expert(scene)
        out.append(scene)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def medium_scenes():
    return generate_scene_set(0, 40, "medium", 0, workers=1)


@pytest.fixture(scope="session")
def easy_scenes():
    return generate_scene_set(3, 30, "easy", 0, workers=1)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def directional_fd(loss_at, params, grads, stream, h=1e-3, tries=20):
    """Relative error between the analytic and central-difference slope along a random unit direction.

    ``loss_at(params)`` returns ``(loss, pattern)`` where ``pattern`` records which
    side of every piecewise-linear kink the evaluation lies on. Directions whose
    +-h probes land on different sides of a kink are redrawn, since a central
    difference across a kink measures neither one-sided slope.
    """
    _, base = loss_at(params)
    for _ in range(tries):
        d = [stream.normal(p.shape) for p in params]
        norm = np.sqrt(sum(float((x * x).sum()) for x in d))
        d = [x / norm for x in d]
        lp, sp = loss_at([p + h * x for p, x in zip(params, d)])
        lm, sm = loss_at([p - h * x for p, x in zip(params, d)])
        if np.array_equal(sp, base) and np.array_equal(sm, base):
            analytic = sum(float((g * x).sum()) for g, x in zip(grads, d))
            return rel_err((lp - lm) / (2 * h), analytic)
    raise AssertionError("every probe direction crossed a kink")


def fm_fd_error(model, scenes, stream) -> float:
    """Finite-difference check of the generator loss on one batch with fresh noise draws."""
    x1, cond, raster = (model.standardizer.encode(np.stack([s.expert for s in scenes])),
                        np.stack([encode_condition(s) for s in scenes]),
                        np.stack([corridor_raster(s) for s in scenes]))
    b = len(scenes)
    x0 = stream.normal((b, 32))
    t = stream.uniform(b)
    keep = stream.uniform(b) >= 0.3
    _, _, grads = fm_loss_terms(model, x1, cond, raster, x0, t, keep)
    n_net = len(model.net.params())

    def loss_at(params):
        m = FlowModel(model.net.copy(), model.aux.copy(), model.standardizer)
        m.net.set_params(params[:n_net])
        m.aux.set_params(params[n_net:])
        loss, _, _ = fm_loss_terms(m, x1, cond, raster, x0, t, keep)
        resid = m.net(net_input(interpolate(x0, x1, t), t, cond, keep)) - (x1 - x0)
        return loss, np.sign(resid)

    return directional_fd(loss_at, model.params(), grads, stream)


def policy_fd_error(policy, cond, expert, negative, has_neg, raster, weights, stream) -> float:
    """Finite-difference check of the planner objective on one batch."""
    _, grads = total_loss_terms(policy, cond, expert, negative, has_neg, raster, weights)
    n_net = len(policy.net.params())

    def loss_at(params):
        p = Policy(policy.net.copy(), policy.aux.copy(), policy.standardizer)
        p.net.set_params(params[:n_net])
        p.aux.set_params(params[n_net:])
        parts, _ = total_loss_terms(p, cond, expert, negative, has_neg, raster, weights)
        pred = p.predict(cond)
        gap = pred[has_neg] - negative[has_neg]
        active = np.abs(gap).sum(axis=1) < weights.clip
        return parts.total, np.concatenate([np.sign(pred - expert).ravel(), np.sign(gap).ravel(), active])

    return directional_fd(loss_at, policy.params(), grads, stream)


def negatives_near_clip(pred, clip, offsets, stream):
    """Negatives at l1 distance ``clip + offset`` from each row of ``pred``."""
    signs = np.where(stream.uniform(pred.shape) < 0.5, -1.0, 1.0)
    return pred + signs * ((clip + np.asarray(offsets))[:, None] / pred.shape[1])


ACCEPTANCE = {}  # criterion number -> verdict line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
