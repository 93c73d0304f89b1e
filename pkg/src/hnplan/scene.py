"""Synthetic driving scenes and privileged expert demonstrations.

Every scene lives in the ego frame at t=0: ego at the origin facing +x. The
road is a single corridor (centerline polyline plus constant half-width).
Agents move along the corridor in Frenet coordinates ``(s, d)`` according to a
scripted behavior; their poses are tabulated at 0.1 s ticks over 5 s so that
scoring can look one second past the 4 s planning horizon.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import ExpertSynthesisFailed, FormatError
from .geometry import Polyline
from .rng import Stream
from .trajectory import DT, K, wrap_angle

TICK = 0.1
N_TICKS = 51  # 0.0 .. 5.0 s
TICKS_PER_STEP = int(round(DT / TICK))
EGO_LENGTH = 4.5
EGO_WIDTH = 1.9
COMMANDS = ("go_straight", "turn_left", "turn_right")
BEHAVIORS = ("constant_velocity", "stop_and_go", "cut_in")
DIFFICULTIES = {
    # agents (min, max), max |curvature|
    "easy": ((0, 2), 0.01),
    "medium": ((2, 5), 0.03),
    "hard": ((4, 8), 0.05),
}
COND_DIM = 49
N_CENTERLINE_SAMPLES = 10
CENTERLINE_SPACING = 5.0
N_NEAREST = 4
RASTER = 16
RASTER_X = (-8.0, 56.0)
RASTER_Y = (-32.0, 32.0)
MAX_EXPERT_RETRIES = 20
EXPERT_MIN_PDMS = 0.9


def q9(x):
    """Round to 9 significant digits so scenes survive a JSON round trip bit-exactly."""
    if np.ndim(x) == 0:
        return float(f"{float(x):.9g}")
    a = np.asarray(x, dtype=float)
    return np.array([float(f"{v:.9g}") for v in a.ravel()]).reshape(a.shape)


@dataclass
class Corridor:
    centerline: np.ndarray  # (P, 2)
    half_width: float

    @cached_property
    def path(self) -> Polyline:
        return Polyline(self.centerline)

    def boundary_polygon(self) -> np.ndarray:
        left = self.path.offset(self.half_width)
        right = self.path.offset(-self.half_width)
        return np.concatenate([right, left[::-1]])


@dataclass
class EgoState:
    v: float
    a: float
    length: float = EGO_LENGTH
    width: float = EGO_WIDTH


@dataclass
class Agent:
    id: int
    length: float
    width: float
    behavior: str
    params: dict
    poses: np.ndarray  # (N_TICKS, 3) ego frame
    speeds: np.ndarray  # (N_TICKS,)
    frenet: np.ndarray  # (N_TICKS, 2) arc length and lateral offset

    def script_speed(self, t: float) -> float:
        return script_speed(self.behavior, self.params, t)

    def lateral(self, t: float) -> float:
        return script_lateral(self.behavior, self.params, t)


@dataclass
class Scene:
    scene_id: int
    difficulty: str
    corridor: Corridor
    agents: list
    ego: EgoState
    command: str
    expert: np.ndarray | None = None  # (K, 3)
    expert_pdms: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def agent_poses(self) -> np.ndarray:
        """(A, N_TICKS, 3) stack of agent poses."""
        if not self.agents:
            return np.zeros((0, N_TICKS, 3))
        return np.stack([a.poses for a in self.agents])

    @property
    def agent_dims(self) -> np.ndarray:
        """(A, 2) lengths and widths."""
        if not self.agents:
            return np.zeros((0, 2))
        return np.array([[a.length, a.width] for a in self.agents])


# ---------------------------------------------------------------- agent scripts


def script_speed(behavior: str, p: dict, t: float) -> float:
    if behavior == "stop_and_go":
        v1, t1, dec, t_stop, acc = p["v"], p["t_brake"], p["decel"], p["t_stop"], p["accel"]
        t_halt = t1 + v1 / dec
        if t <= t1:
            return v1
        if t <= t_halt:
            return v1 - dec * (t - t1)
        if t <= t_halt + t_stop:
            return 0.0
        return min(v1, acc * (t - t_halt - t_stop))
    return p["v"]


def script_lateral(behavior: str, p: dict, t: float) -> float:
    if behavior == "cut_in":
        u = min(max((t - p["t_start"]) / p["duration"], 0.0), 1.0)
        smooth = u * u * (3.0 - 2.0 * u)
        return p["d_start"] + (p["d_end"] - p["d_start"]) * smooth
    return p["d"]


def agent_tick_speed(behavior: str, p: dict, k: int) -> float:
    return script_speed(behavior, p, k * TICK)


def roll_agent(behavior: str, p: dict, path: Polyline, n_ticks: int = N_TICKS):
    """Integrate the scripted motion; returns (poses, speeds, frenet)."""
    s = np.empty(n_ticks)
    v = np.array([script_speed(behavior, p, k * TICK) for k in range(n_ticks)])
    d = np.array([script_lateral(behavior, p, k * TICK) for k in range(n_ticks)])
    s[0] = p["s0"]
    for k in range(1, n_ticks):
        s[k] = s[k - 1] + 0.5 * (v[k - 1] + v[k]) * TICK
    x, y, h = path.frenet_to_xy(s, d)
    dd = np.gradient(d, TICK)
    h = h + np.arctan2(dd, np.maximum(v, 0.5))
    poses = np.stack([x, y, wrap_angle(h)], axis=1)
    return poses, v, np.stack([s, d], axis=1)


# ---------------------------------------------------------------- generation


def _road_centerline(st: Stream, kappa_max: float):
    """Centerline in a road frame whose origin sits at arc length ``behind``."""
    behind, ahead, spacing = 16.0, 112.0, 2.0
    mode = st.integers(0, 3)  # 0 straight, 1 left, 2 right
    kappa = 0.0
    if mode > 0:
        kappa = st.uniform_range(0.3, 1.0) * kappa_max * (1 if mode == 1 else -1)
    s_curve = st.uniform_range(0.0, 25.0)
    ramp = 15.0
    fine = 0.25
    n = int(round((behind + ahead) / fine))
    s = -behind + fine * np.arange(n + 1)
    k = kappa * np.clip((s - s_curve) / ramp, 0.0, 1.0)
    theta = np.concatenate([[0.0], np.cumsum(0.5 * (k[1:] + k[:-1]) * fine)])
    theta -= np.interp(0.0, s, theta)
    c, si = np.cos(theta), np.sin(theta)
    x = np.concatenate([[0.0], np.cumsum(0.5 * (c[1:] + c[:-1]) * fine)])
    y = np.concatenate([[0.0], np.cumsum(0.5 * (si[1:] + si[:-1]) * fine)])
    x -= np.interp(0.0, s, x)
    y -= np.interp(0.0, s, y)
    step = int(round(spacing / fine))
    pts = np.stack([x[::step], y[::step]], axis=1)
    heading_change = float(np.interp(50.0, s, theta))
    if heading_change > 0.3:
        command = "turn_left"
    elif heading_change < -0.3:
        command = "turn_right"
    else:
        command = "go_straight"
    return pts, behind, kappa, command


def _sample_agents(st: Stream, difficulty: str, hw: float, v0: float, s_ego: float):
    (lo, hi), _ = DIFFICULTIES[difficulty]
    n = st.integers(lo, hi + 1)
    specs = []
    s = s_ego + 14.0 + st.uniform_range(0.0, 10.0)
    need_cut_in = difficulty == "hard"
    for i in range(n):
        length = st.uniform_range(3.8, 5.2) if st.uniform() < 0.85 else st.uniform_range(8.0, 12.0)
        width = st.uniform_range(1.7, 2.1) if length < 6 else st.uniform_range(2.3, 2.6)
        roll = st.uniform()
        if need_cut_in and i == n - 1 and not any(sp[0] == "cut_in" for sp in specs):
            roll = 0.95
        side = 1.0 if st.uniform() < 0.5 else -1.0
        if roll < 0.35:
            behavior = "constant_velocity"
            params = {"v": v0 * st.uniform_range(0.0, 1.0), "d": st.uniform_range(-0.3, 0.3)}
        elif roll < 0.6:
            behavior = "constant_velocity"  # shoulder traffic: slow or parked at the edge
            inner = EGO_WIDTH / 2 + st.uniform_range(0.8, 1.4)
            params = {"v": v0 * st.uniform_range(0.0, 0.6), "d": side * (inner + width / 2)}
        elif roll < 0.82:
            behavior = "stop_and_go"
            params = {
                "v": v0 * st.uniform_range(0.5, 1.0),
                "t_brake": st.uniform_range(0.0, 2.5),
                "decel": st.uniform_range(1.5, 3.5),
                "t_stop": st.uniform_range(0.5, 2.5),
                "accel": st.uniform_range(1.0, 2.0),
                "d": st.uniform_range(-0.3, 0.3),
            }
        else:
            behavior = "cut_in"
            inner = EGO_WIDTH / 2 + st.uniform_range(0.6, 1.2)
            params = {
                "v": v0 * st.uniform_range(0.5, 1.0),
                "d_start": side * (inner + width / 2),
                "d_end": st.uniform_range(-0.3, 0.3),
                "t_start": st.uniform_range(0.0, 2.0),
                "duration": st.uniform_range(1.5, 3.0),
            }
        params["s0"] = s
        specs.append((behavior, params, length, width))
        s += length + st.uniform_range(6.0, 16.0)
    return specs


def _to_ego_frame(pts, origin, heading):
    c, s = math.cos(heading), math.sin(heading)
    rel = np.asarray(pts) - origin
    return np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1]], axis=1)


def generate_scene(global_seed: int, scene_id: int, difficulty: str = "medium") -> Scene:
    """Synthesize one scene with its expert; deterministic in the arguments."""
    if scene_id < 0:
        raise ValueError("scene_id must be >= 0")
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    st = Stream(global_seed, "scene", difficulty, scene_id)
    (_, kappa_max) = DIFFICULTIES[difficulty]
    road_pts, behind, kappa, command = _road_centerline(st, kappa_max)
    hw = st.uniform_range(2.6, 4.0)
    d_ego = st.uniform_range(-0.3, 0.3)
    psi_ego = st.uniform_range(-0.03, 0.03)
    v_hi = min(14.0, 0.6 / max(abs(kappa), 1e-3))
    v0 = st.uniform_range(4.0, v_hi)
    a0 = st.uniform_range(-1.0, 1.0)

    road = Polyline(road_pts)
    ox, oy, oh = road.frenet_to_xy(behind, d_ego)
    centerline = q9(_to_ego_frame(road_pts, np.array([float(ox), float(oy)]), float(oh) + psi_ego))
    corridor = Corridor(centerline, q9(hw))
    path = corridor.path
    s_ego = float(path.project(np.zeros(2))[0])
    specs = _sample_agents(st, difficulty, hw, v0, s_ego)
    agents = [make_agent(i, b, p, l, w, path) for i, (b, p, l, w) in enumerate(specs)]
    scene = Scene(scene_id, difficulty, corridor, agents, EgoState(q9(v0), q9(a0)), command)
    expert, pdms = synthesize_expert_scored(scene)
    return replace(scene, expert=expert, expert_pdms=pdms)


def make_agent(i, behavior, params, length, width, path: Polyline) -> Agent:
    params = {k: q9(v) for k, v in params.items()}
    poses, speeds, frenet = roll_agent(behavior, params, path)
    return Agent(i, q9(length), q9(width), behavior, params, q9(poses), q9(speeds), q9(frenet))


# ---------------------------------------------------------------- expert


@dataclass(frozen=True)
class ExpertParams:
    headway: float = 1.5
    min_gap: float = 3.0
    speed_factor: float = 1.0
    a_max: float = 1.5
    b_comf: float = 2.0
    b_max: float = 3.5

    @classmethod
    def attempt(cls, r: int) -> "ExpertParams":
        return cls(headway=1.5 + 0.15 * r, min_gap=3.0 + 0.5 * r, speed_factor=0.96 ** r,
                   b_comf=2.0 + 0.1 * r)


def _predict_agents_frenet(scene: Scene, n_ticks: int) -> np.ndarray:
    """(A, n_ticks, 2) agent Frenet tracks, padded by constant extrapolation."""
    tracks = []
    for a in scene.agents:
        f = a.frenet[:n_ticks]
        if len(f) < n_ticks:
            last_v = a.speeds[len(f) - 1] if len(a.speeds) >= len(f) else 0.0
            extra = np.arange(1, n_ticks - len(f) + 1) * TICK * last_v
            pad = np.stack([f[-1, 0] + extra, np.full(len(extra), f[-1, 1])], axis=1)
            f = np.concatenate([f, pad])
        tracks.append(f)
    if not tracks:
        return np.zeros((0, n_ticks, 2))
    return np.stack(tracks)


def privileged_rollout(scene: Scene, params: ExpertParams = ExpertParams()) -> np.ndarray:
    """Pure pursuit on the centerline with an IDM gap rule on privileged agent tracks."""
    path = scene.corridor.path
    n = K * TICKS_PER_STEP
    tracks = _predict_agents_frenet(scene, n + 21)
    dims = scene.agent_dims
    speeds = np.stack([a.speeds for a in scene.agents]) if scene.agents else np.zeros((0, N_TICKS))
    v_des = max(scene.ego.v * params.speed_factor, 0.5)
    x = y = h = 0.0
    v = scene.ego.v
    out = np.zeros((K, 3))
    band = dims[:, 1] / 2 + EGO_WIDTH / 2 + 0.5 if len(dims) else np.zeros(0)
    for k in range(n):
        s_e, d_e, _ = path.project(np.array([x, y]))
        s_e, d_e = float(s_e), float(d_e)
        look = max(4.0, 0.9 * v)
        tx, ty, _ = path.frenet_to_xy(s_e + look, 0.0)
        alpha = wrap_angle(math.atan2(float(ty) - y, float(tx) - x) - h)
        curv = 2.0 * math.sin(alpha) / look
        # lead vehicle: ahead and laterally in our band now or within the next 2 s
        gap, v_lead = math.inf, 0.0
        for j in range(len(dims)):
            window = tracks[j, k:k + 21]
            if not np.any(np.abs(window[:, 1] - d_e) < band[j]):
                continue
            s_a = tracks[j, k, 0]
            g = s_a - s_e - (dims[j, 0] + EGO_LENGTH) / 2
            if s_a > s_e and g < gap:
                gap = g
                v_lead = float(speeds[j, min(k, N_TICKS - 1)])
        free = 1.0 - (v / v_des) ** 4
        if math.isfinite(gap):
            s_star = params.min_gap + v * params.headway + v * (v - v_lead) / (
                2.0 * math.sqrt(params.a_max * params.b_comf))
            acc = params.a_max * (free - (max(s_star, 0.0) / max(gap, 0.1)) ** 2)
        else:
            acc = params.a_max * free
        acc = min(max(acc, -params.b_max), params.a_max)
        v_new = max(v + acc * TICK, 0.0)
        yaw_rate = max(min(curv * v, 0.7), -0.7)
        v_mid = 0.5 * (v + v_new)
        h_mid = h + 0.5 * yaw_rate * TICK
        x += v_mid * math.cos(h_mid) * TICK
        y += v_mid * math.sin(h_mid) * TICK
        h = h + yaw_rate * TICK
        v = v_new
        if (k + 1) % TICKS_PER_STEP == 0:
            out[(k + 1) // TICKS_PER_STEP - 1] = (x, y, wrap_angle(h))
    return out


def synthesize_expert_scored(scene: Scene) -> tuple[np.ndarray, float]:
    from .scoring import score  # scoring depends on scene types

    best = None
    for r in range(MAX_EXPERT_RETRIES):
        traj = q9(privileged_rollout(scene, ExpertParams.attempt(r)))
        result = score(scene, traj, reference=traj)
        if result.pdms >= EXPERT_MIN_PDMS:
            return traj, result.pdms
        if best is None or result.pdms > best[1]:
            best = (traj, result.pdms)
    raise ExpertSynthesisFailed(
        f"scene {scene.scene_id}: best expert PDMS {best[1]:.3f} after {MAX_EXPERT_RETRIES} attempts")


def synthesize_expert(scene: Scene) -> np.ndarray:
    return synthesize_expert_scored(scene)[0]


def best_effort_expert(scene: Scene) -> np.ndarray:
    """Privileged plan that never raises: the best-scoring of the retry ladder."""
    from .scoring import score

    best, best_pdms = None, -1.0
    for r in range(MAX_EXPERT_RETRIES):
        traj = privileged_rollout(scene, ExpertParams.attempt(r))
        p = score(scene, traj, reference=traj).pdms
        if p >= EXPERT_MIN_PDMS:
            return traj
        if p > best_pdms:
            best, best_pdms = traj, p
    return best


# ---------------------------------------------------------------- features


COND_SCALE = np.concatenate([
    [10.0, 2.0],
    np.ones(3),
    np.full(2 * N_CENTERLINE_SAMPLES, 20.0),
    np.tile([20.0, 20.0, 10.0, 10.0, 1.0, 1.0], N_NEAREST),
])


def encode_condition(scene: Scene) -> np.ndarray:
    """49-dim symbolic condition: ego state, command, centerline ahead, nearest agents."""
    out = np.zeros(COND_DIM)
    out[0] = scene.ego.v
    out[1] = scene.ego.a
    out[2 + COMMANDS.index(scene.command)] = 1.0
    path = scene.corridor.path
    s0 = float(path.project(np.zeros(2))[0])
    sx, sy, _ = path.frenet_to_xy(s0 + CENTERLINE_SPACING * np.arange(1, N_CENTERLINE_SAMPLES + 1))
    out[5:25] = np.stack([sx, sy], axis=1).ravel()
    if scene.agents:
        now = np.array([a.poses[0] for a in scene.agents])
        v = np.array([a.speeds[0] for a in scene.agents])
        dist = np.hypot(now[:, 0], now[:, 1])
        order = np.argsort(dist, kind="stable")[:N_NEAREST]
        for slot, j in enumerate(order):
            x, y, h = now[j]
            out[25 + 6 * slot: 31 + 6 * slot] = (
                x, y, v[j] * math.cos(h) - scene.ego.v, v[j] * math.sin(h), math.sin(h), math.cos(h))
    return out


def corridor_raster(scene: Scene) -> np.ndarray:
    """16x16 binary occupancy of the corridor over a fixed ego-frame window, flattened."""
    xs = RASTER_X[0] + (np.arange(RASTER) + 0.5) * (RASTER_X[1] - RASTER_X[0]) / RASTER
    ys = RASTER_Y[0] + (np.arange(RASTER) + 0.5) * (RASTER_Y[1] - RASTER_Y[0]) / RASTER
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    _, d, beyond = scene.corridor.path.project(np.stack([gx, gy], axis=-1))
    return ((np.abs(d) <= scene.corridor.half_width) & ~beyond).astype(float).ravel()


# ---------------------------------------------------------------- serialization


def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def scene_to_record(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "difficulty": scene.difficulty,
        "corridor": {"centerline": _floats(scene.corridor.centerline),
                     "half_width": float(scene.corridor.half_width)},
        "agents": [
            {"id": a.id, "length": a.length, "width": a.width, "behavior": a.behavior,
             "params": a.params, "poses": _floats(a.poses), "speeds": _floats(a.speeds),
             "frenet": _floats(a.frenet)}
            for a in scene.agents
        ],
        "ego": {"v": scene.ego.v, "a": scene.ego.a},
        "command": scene.command,
        "expert": None if scene.expert is None else _floats(scene.expert),
        "expert_pdms": scene.expert_pdms,
    }


def scene_from_record(rec: dict) -> Scene:
    try:
        agents = [
            Agent(a["id"], float(a["length"]), float(a["width"]), a["behavior"], dict(a["params"]),
                  np.array(a["poses"], dtype=float), np.array(a["speeds"], dtype=float),
                  np.array(a["frenet"], dtype=float))
            for a in rec["agents"]
        ]
        expert = None if rec.get("expert") is None else np.array(rec["expert"], dtype=float)
        return Scene(
            int(rec["scene_id"]), rec.get("difficulty", "medium"),
            Corridor(np.array(rec["corridor"]["centerline"], dtype=float),
                     float(rec["corridor"]["half_width"])),
            agents, EgoState(float(rec["ego"]["v"]), float(rec["ego"]["a"])), rec["command"],
            expert, rec.get("expert_pdms"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad scene record: {exc}") from exc


def dumps_scenes(scenes) -> str:
    return json.dumps([scene_to_record(s) for s in scenes], separators=(",", ":"))


def save_scenes(scenes, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_scenes(scenes))


def load_scenes(path) -> list:
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a JSON array of scene records")
    out = []
    for i, rec in enumerate(data):
        try:
            out.append(scene_from_record(rec))
        except FormatError as exc:
            raise FormatError(f"{path}: record {i}: {exc}") from exc
    return out


def generate_scene_set(global_seed: int, count: int, difficulty: str, start_id: int = 0,
                       workers: int | None = None) -> list:
    """``count`` scenes with consecutive ids from ``start_id``, skipping infeasible draws."""
    from .parallel import pmap

    scenes = []
    next_id = start_id
    while len(scenes) < count:
        ids = list(range(next_id, next_id + (count - len(scenes))))
        next_id = ids[-1] + 1
        batch = pmap(_try_generate, [(global_seed, i, difficulty) for i in ids], workers=workers)
        scenes.extend(s for s in batch if s is not None)
    return scenes


def _try_generate(args):
    seed, sid, difficulty = args
    try:
        return generate_scene(seed, sid, difficulty)
    except ExpertSynthesisFailed:
        return None
