"""Per-scene driving metrics, the composite PDMS, and closed-loop HD-Score.

Sub-metric definitions (all fixed constants):

* NC   - ego footprint, interpolated along the plan at 0.1 s and refined to
         0.01 s near agents, never overlaps an agent.
* DAC  - every interpolated footprint corner stays inside the corridor.
* TTC  - from each waypoint, a 1 s constant-velocity projection of the ego
         overlaps no agent.
* Comf - per-step |dv|/dt <= 4 m/s^2 and |dh|/dt <= 0.8 rad/s.
* EP   - centerline progress relative to the reference (expert) progress,
         with the reference floored at 1 m.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import Polyline, rect_corners, rects_overlap
from .scene import (
    EGO_LENGTH, EGO_WIDTH, N_TICKS, TICK, TICKS_PER_STEP, Agent, Corridor, EgoState, Scene,
    best_effort_expert, script_lateral, script_speed,
)
from .trajectory import DT, K, wrap_angle

TTC_HORIZON = 1.0
MAX_ACCEL = 4.0
MAX_YAW_RATE = 0.8
MIN_REF_PROGRESS = 1.0
W_EP, W_TTC, W_COMF = 5.0, 5.0, 2.0
AGENT_BRAKE_GAP = 5.0
AGENT_BRAKE_DECEL = 4.0
AGENT_RECOVER_ACCEL = 2.0

HALF_L = EGO_LENGTH / 2
HALF_W = EGO_WIDTH / 2
ORIGIN = (0.0, 0.0, 0.0)
NC_REFINE = 10  # substeps per 0.1 s tick for the collision sweep


def compose_pdms(nc, dac, ep, ttc, comf):
    return nc * dac * (W_EP * ep + W_TTC * ttc + W_COMF * comf) / (W_EP + W_TTC + W_COMF)


def compose_tick(nc, dac, ttc, comf):
    return nc * dac * (W_TTC * ttc + W_COMF * comf) / (W_TTC + W_COMF)


@dataclass(frozen=True)
class ScoreBreakdown:
    nc: float
    dac: float
    ep: float
    ttc: float
    comf: float
    pdms: float

    @classmethod
    def of(cls, nc, dac, ep, ttc, comf) -> "ScoreBreakdown":
        return cls(float(nc), float(dac), float(ep), float(ttc), float(comf),
                   float(compose_pdms(nc, dac, ep, ttc, comf)))

    @classmethod
    def zero(cls) -> "ScoreBreakdown":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def as_dict(self) -> dict:
        return {"nc": self.nc, "dac": self.dac, "ep": self.ep, "ttc": self.ttc,
                "comf": self.comf, "pdms": self.pdms}


def dense_poses(trajs, sub: int = TICKS_PER_STEP, origin=ORIGIN) -> np.ndarray:
    """(N, K, 3) waypoints -> (N, K*sub + 1, 3) poses including the start pose at t=0."""
    t = np.asarray(trajs, dtype=float)
    n = t.shape[0]
    full = _with_origin(t, origin)
    dh = wrap_angle(np.diff(full[..., 2], axis=1))
    heading = origin[2] + np.concatenate([np.zeros((n, 1)), np.cumsum(dh, axis=1)], axis=1)
    frac = np.arange(sub) / sub
    a_xy = full[:, :-1, None, :2]
    b_xy = full[:, 1:, None, :2]
    xy = a_xy + (b_xy - a_xy) * frac[None, None, :, None]
    h = heading[:, :-1, None] + (heading[:, 1:, None] - heading[:, :-1, None]) * frac[None, None, :]
    xy = xy.reshape(n, -1, 2)
    h = h.reshape(n, -1)
    xy = np.concatenate([xy, full[:, -1:, :2]], axis=1)
    h = np.concatenate([h, heading[:, -1:]], axis=1)
    return np.concatenate([xy, h[..., None]], axis=-1)


def _with_origin(trajs: np.ndarray, origin) -> np.ndarray:
    start = np.broadcast_to(np.asarray(origin, dtype=float), (len(trajs), 1, 3))
    return np.concatenate([start, trajs], axis=1)


def progress(path: Polyline, pts, origin=ORIGIN) -> np.ndarray:
    """Centerline progress of points relative to the start pose."""
    s0 = path.project(np.asarray(origin[:2], dtype=float))[0]
    return path.project(pts)[0] - s0


def _collides(dense: np.ndarray, ap: np.ndarray, dims: np.ndarray) -> np.ndarray:
    """(N,) overlap flags for ego poses (N, P, 3) against agent poses (A, P, 3) on the same ticks.

    Footprints are tested at every tick, then at NC_REFINE substeps inside any
    tick interval where the bounding circles can meet, so short grazes between
    ticks are caught too.
    """
    hl, hw = dims[:, 0] / 2, dims[:, 1] / 2
    hit = rects_overlap(
        dense[:, None, :, 0], dense[:, None, :, 1], dense[:, None, :, 2], HALF_L, HALF_W,
        ap[None, :, :, 0], ap[None, :, :, 1], ap[None, :, :, 2], hl[None, :, None], hw[None, :, None])
    out = hit.any(axis=(1, 2))

    # closest approach of the centers over each interval (both move linearly)
    rel = ap[None, :, :, :2] - dense[:, None, :, :2]  # (N, A, P, 2)
    r0, dr = rel[:, :, :-1], np.diff(rel, axis=2)
    dd = (dr ** 2).sum(-1)
    u = np.clip(-(r0 * dr).sum(-1) / np.where(dd > 0, dd, 1.0), 0.0, 1.0)
    closest = np.hypot(*np.moveaxis(r0 + u[..., None] * dr, -1, 0))
    reach = math.hypot(HALF_L, HALF_W) + np.hypot(hl, hw)
    n_i, a_i, k_i = np.nonzero((closest <= reach[None, :, None]) & ~out[:, None, None])
    if len(n_i) == 0:
        return out
    f = np.arange(1, NC_REFINE) / NC_REFINE
    e0, e1 = dense[n_i, k_i], dense[n_i, k_i + 1]
    a0, a1 = ap[a_i, k_i], ap[a_i, k_i + 1]
    e = e0[:, None] + (e1 - e0)[:, None] * f[:, None]
    a_h = a0[:, None, 2] + wrap_angle(a1[:, 2] - a0[:, 2])[:, None] * f
    a_xy = a0[:, None, :2] + (a1 - a0)[:, None, :2] * f[:, None]
    sub = rects_overlap(e[..., 0], e[..., 1], e[..., 2], HALF_L, HALF_W, a_xy[..., 0], a_xy[..., 1], a_h,
                        hl[a_i, None], hw[a_i, None]).any(axis=1)
    out[np.unique(n_i[sub])] = True
    return out


def _metrics(scene: Scene, trajs: np.ndarray, ref_progress: float, origin=ORIGIN) -> np.ndarray:
    """(N, 5) columns nc, dac, ep, ttc, comf for finite trajectories."""
    n = len(trajs)
    path = scene.corridor.path
    hw = scene.corridor.half_width
    dense = dense_poses(trajs, origin=origin)  # (N, 41, 3)
    n_dense = dense.shape[1]

    agents = scene.agent_poses
    dims = scene.agent_dims
    if len(agents):
        nc = ~_collides(dense, agents[:, :n_dense], dims)
    else:
        nc = np.ones(n, dtype=bool)

    corners = rect_corners(dense[..., 0], dense[..., 1], dense[..., 2], HALF_L, HALF_W)
    _, d, beyond = path.project(corners)
    dac = ((np.abs(d) <= hw) & ~beyond).all(axis=(1, 2))

    full = _with_origin(trajs, origin)
    step = np.diff(full[..., :2], axis=1)
    speed = np.hypot(step[..., 0], step[..., 1]) / DT  # (N, K)

    if len(agents):
        taus = TICK * np.arange(1, int(round(TTC_HORIZON / TICK)) + 1)  # (J,)
        h = trajs[..., 2]
        px = trajs[:, :, None, 0] + speed[:, :, None] * taus * np.cos(h)[:, :, None]
        py = trajs[:, :, None, 1] + speed[:, :, None] * taus * np.sin(h)[:, :, None]
        tick_idx = (np.arange(1, K + 1)[:, None] * TICKS_PER_STEP
                    + np.arange(1, len(taus) + 1)[None, :])  # (K, J)
        tick_idx = np.minimum(tick_idx, agents.shape[1] - 1)
        fut = agents[:, tick_idx]  # (A, K, J, 3)
        hit = rects_overlap(
            px[:, None], py[:, None], np.broadcast_to(h[:, None, :, None], px[:, None].shape), HALF_L, HALF_W,
            fut[None, ..., 0], fut[None, ..., 1], fut[None, ..., 2],
            dims[None, :, None, None, 0] / 2, dims[None, :, None, None, 1] / 2)
        ttc = ~hit.any(axis=(1, 2, 3))
    else:
        ttc = np.ones(n, dtype=bool)

    v_all = np.concatenate([np.full((n, 1), scene.ego.v), speed], axis=1)
    accel = np.abs(np.diff(v_all, axis=1)) / DT
    h_all = full[..., 2]
    yaw = np.abs(wrap_angle(np.diff(h_all, axis=1))) / DT
    comf = (accel <= MAX_ACCEL).all(axis=1) & (yaw <= MAX_YAW_RATE).all(axis=1)

    prog = progress(path, trajs[:, -1, :2], origin)
    ep = np.clip(prog / max(ref_progress, MIN_REF_PROGRESS), 0.0, 1.0)
    return np.stack([nc, dac, ep, ttc, comf], axis=1).astype(float)


def reference_progress(scene: Scene, reference=None, origin=ORIGIN) -> float:
    ref = scene.expert if reference is None else reference
    if ref is None:
        raise ValueError("scoring needs an expert trajectory as progress reference")
    return float(progress(scene.corridor.path, np.asarray(ref, dtype=float)[-1, :2], origin))


def score_matrix(scene: Scene, trajs, reference=None, valid=None, origin=ORIGIN) -> np.ndarray:
    """(N, 6) matrix nc, dac, ep, ttc, comf, pdms. Invalid rows score all zeros.

    Trajectories start from ``origin`` (the ego pose at t=0), which is the
    frame origin for ego-frame scenes.
    """
    t = np.asarray(trajs, dtype=float).reshape(-1, K, 3)
    ok = np.all(np.isfinite(t), axis=(1, 2))
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    out = np.zeros((len(t), 6))
    if ok.any():
        m = _metrics(scene, t[ok], reference_progress(scene, reference, origin), origin)
        out[ok, :5] = m
        out[ok, 5] = compose_pdms(*m.T)
    return out


def score(scene: Scene, traj, reference=None, origin=ORIGIN) -> ScoreBreakdown:
    row = score_matrix(scene, np.asarray(traj, dtype=float)[None], reference, origin=origin)[0]
    return ScoreBreakdown(*map(float, row))


def score_batch(scene: Scene, trajs, reference=None, valid=None) -> list:
    if len(trajs) == 0:
        return []
    return [ScoreBreakdown(*map(float, r)) for r in score_matrix(scene, trajs, reference, valid)]


# ---------------------------------------------------------------- closed loop


Policy = Callable[[Scene], np.ndarray]


@dataclass
class ClosedLoopScore:
    scene_id: int
    rc: float
    hd_score: float
    nc: list = field(default_factory=list)
    dac: list = field(default_factory=list)
    ttc: list = field(default_factory=list)
    comf: list = field(default_factory=list)
    progress: float = 0.0


def _transform(pts, x, y, h):
    c, s = math.cos(h), math.sin(h)
    rel = np.asarray(pts, dtype=float) - (x, y)
    return np.stack([c * rel[..., 0] + s * rel[..., 1], -s * rel[..., 0] + c * rel[..., 1]], axis=-1)


def _to_world(px, py, ph, x, y, h):
    c, s = math.cos(h), math.sin(h)
    return x + c * px - s * py, y + s * px + c * py, wrap_angle(h + ph)


class _ReactiveAgents:
    """Agents that follow their script but brake when the ego sits just ahead."""

    def __init__(self, scene: Scene):
        self.path = scene.corridor.path
        self.agents = scene.agents
        self.s = np.array([a.frenet[0, 0] for a in scene.agents])
        self.v = np.array([a.speeds[0] for a in scene.agents])
        self.d = np.array([a.frenet[0, 1] for a in scene.agents])
        self.dims = scene.agent_dims

    def step(self, t_next: float, ego_s: float, ego_d: float):
        for j, a in enumerate(self.agents):
            target = script_speed(a.behavior, a.params, t_next)
            gap = ego_s - self.s[j] - (self.dims[j, 0] + EGO_LENGTH) / 2
            lateral = abs(ego_d - self.d[j]) < (self.dims[j, 1] + EGO_WIDTH) / 2
            if lateral and ego_s > self.s[j] and gap < AGENT_BRAKE_GAP:
                v_new = max(0.0, self.v[j] - AGENT_BRAKE_DECEL * TICK)
            else:
                v_new = min(target, self.v[j] + AGENT_RECOVER_ACCEL * TICK)
            self.s[j] += 0.5 * (self.v[j] + v_new) * TICK
            self.v[j] = v_new
            self.d[j] = script_lateral(a.behavior, a.params, t_next)

    def poses(self, s=None):
        s = self.s if s is None else s
        x, y, h = self.path.frenet_to_xy(s, self.d)
        return np.stack([x, y, h], axis=-1)


def _local_scene(scene: Scene, pose, v: float, a: float, agents: _ReactiveAgents) -> Scene:
    """Scene re-expressed in the current ego frame with constant-velocity agent forecasts."""
    x, y, h = pose
    centerline = _transform(scene.corridor.centerline, x, y, h)
    corridor = Corridor(centerline, scene.corridor.half_width)
    taus = TICK * np.arange(N_TICKS)
    new_agents = []
    for j, ag in enumerate(scene.agents):
        s = agents.s[j] + agents.v[j] * taus
        d = np.full(N_TICKS, agents.d[j])
        wx, wy, wh = agents.path.frenet_to_xy(s, d)
        local = _transform(np.stack([wx, wy], axis=-1), x, y, h)
        poses = np.concatenate([local, wrap_angle(wh - h)[:, None]], axis=1)
        new_agents.append(Agent(ag.id, ag.length, ag.width, ag.behavior, ag.params, poses,
                                np.full(N_TICKS, agents.v[j]), np.stack([s, d], axis=1)))
    ego = EgoState(min(max(v, 0.0), 25.0), min(max(a, -6.0), 6.0))
    return Scene(scene.scene_id, scene.difficulty, corridor, new_agents, ego, scene.command)


def _safe_plan(policy: Policy, local: Scene) -> np.ndarray:
    try:
        traj = np.asarray(policy(local), dtype=float).reshape(K, 3)
    except Exception:  # degenerate plans hold position
        return np.zeros((K, 3))
    if not np.all(np.isfinite(traj)):
        return np.zeros((K, 3))
    return traj


def closed_loop_rollout(scene: Scene, policy: Policy, T: int = 8) -> ClosedLoopScore:
    """Replan every 0.5 s, execute the first waypoint, and score each tick."""
    if T < 1:
        raise ValueError("T must be >= 1")
    path = scene.corridor.path
    agents = _ReactiveAgents(scene)
    x = y = h = 0.0
    v, a = scene.ego.v, scene.ego.a
    s_start = float(path.project(np.zeros(2))[0])
    out = ClosedLoopScore(scene.scene_id, 0.0, 0.0)
    crashed = False
    half = (HALF_L, HALF_W)
    for tick in range(T):
        if crashed:
            for lst in (out.nc, out.dac, out.ttc, out.comf):
                lst.append(0.0)
            continue
        local = _local_scene(scene, (x, y, h), v, a, agents)
        traj = _safe_plan(policy, local)
        nx, ny, nh = _to_world(traj[0, 0], traj[0, 1], traj[0, 2], x, y, h)
        dh = wrap_angle(nh - h)
        nc = dac = True
        t0 = tick * DT
        for sub in range(1, TICKS_PER_STEP + 1):
            f = sub / TICKS_PER_STEP
            ex, ey, eh = x + (nx - x) * f, y + (ny - y) * f, h + dh * f
            es, ed, _ = path.project(np.array([ex, ey]))
            agents.step(t0 + sub * TICK, float(es), float(ed))
            if len(agents.dims):
                ap = agents.poses()
                if rects_overlap(ex, ey, eh, *half, ap[:, 0], ap[:, 1], ap[:, 2],
                                 agents.dims[:, 0] / 2, agents.dims[:, 1] / 2).any():
                    nc = False
            corners = rect_corners(ex, ey, eh, *half)
            _, d, beyond = path.project(corners)
            if not ((np.abs(d) <= scene.corridor.half_width) & ~beyond).all():
                dac = False
        v_new = math.hypot(nx - x, ny - y) / DT
        comf = abs(v_new - v) / DT <= MAX_ACCEL and abs(dh) / DT <= MAX_YAW_RATE
        ttc = True
        if len(agents.dims):
            for j in range(1, int(round(TTC_HORIZON / TICK)) + 1):
                tau = j * TICK
                px, py = nx + v_new * tau * math.cos(nh), ny + v_new * tau * math.sin(nh)
                ap = agents.poses(agents.s + agents.v * tau)
                if rects_overlap(px, py, nh, *half, ap[:, 0], ap[:, 1], ap[:, 2],
                                 agents.dims[:, 0] / 2, agents.dims[:, 1] / 2).any():
                    ttc = False
                    break
        a = (v_new - v) / DT
        v = v_new
        x, y, h = nx, ny, nh
        out.nc.append(float(nc))
        out.dac.append(float(dac))
        out.ttc.append(float(ttc))
        out.comf.append(float(comf))
        if not nc:
            crashed = True
    s_end = float(path.project(np.array([x, y]))[0])
    out.progress = s_end - s_start
    ref = scene.expert if scene.expert is not None else best_effort_expert(scene)
    ref_prog = float(progress(path, ref[-1, :2]))
    route = max(ref_prog * T / K, MIN_REF_PROGRESS)
    out.rc = float(np.clip(out.progress / route, 0.0, 1.0))
    terms = [compose_tick(*vals) for vals in zip(out.nc, out.dac, out.ttc, out.comf)]
    out.hd_score = float(out.rc * np.mean(terms))
    return out


def replay_expert_policy(scene: Scene) -> np.ndarray:
    """Privileged planner re-run on whatever scene it is handed."""
    return best_effort_expert(scene)
