"""Deterministic 2D slot-insertion environment.

A point gripper picks up a disc-shaped peg and inserts it into a gap in a
horizontal wall. Episodes end in success (peg seated in the slot), failure
(collision with the wall or leaving the workspace), or timeout. The slot
gap width is randomized per episode; narrow gaps can be held out of
demonstrations to create genuinely novel deployment states.

Also provides the scripted expert (a waypoint controller) and the scripted
supervisor that stands in for a human during automated experiments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .nnet import UsageError

OBS_DIM = 12

RUNNING = "running"
SUCCESS = "success"
FAILURE = "failure"
TIMEOUT = "timeout"


@dataclass(frozen=True)
class EnvConfig:
    wall_y0: float = 0.55
    wall_y1: float = 0.62
    gap_lo: float = 0.06
    gap_hi: float = 0.10
    demo_gap_lo: float = 0.07           # narrow gaps held out of demonstrations
    gap_center_lo: float = 0.20
    gap_center_hi: float = 0.80
    peg_radius: float = 0.02
    grasp_radius: float = 0.03
    action_max: float = 0.05
    max_steps: int = 300
    hover_y: float = 0.70
    descend_speed: float = 0.02
    transit_speed: float = 0.04
    align_tol: float = 0.004
    risk_margin: float = 0.03           # m_risk: proximity alarm distance
    risk_margin_hard: float = 0.006     # fires regardless of heading
    lookahead_steps: int = 10
    stall_steps: int = 60
    stall_progress_eps: float = 0.005
    release_clear_steps: int = 10

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, d: dict) -> "EnvConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


Box = tuple[float, float, float, float]  # x0, y0, x1, y1


@dataclass(frozen=True)
class EnvState:
    robot_xy: tuple[float, float]
    peg_xy: tuple[float, float]
    grasped: bool
    goal_xy: tuple[float, float]        # slot center
    gap_width: float
    obstacles: tuple[Box, ...]
    step_count: int = 0
    terminal: str = RUNNING


@dataclass(frozen=True)
class Action:
    dx: float
    dy: float
    grip: int = 0  # 0 = hold, 1 = toggle

    def as_vector(self) -> np.ndarray:
        return np.array([self.dx, self.dy, float(self.grip)])

    @classmethod
    def from_vector(cls, v) -> "Action":
        return cls(float(v[0]), float(v[1]), int(round(float(v[2]))))


@dataclass(frozen=True)
class StepOutcome:
    next_state: EnvState
    reward: float
    terminal: str


def _point_in_box(x: float, y: float, box: Box) -> bool:
    return box[0] <= x <= box[2] and box[1] <= y <= box[3]


def _dist_point_box(x: float, y: float, box: Box) -> float:
    dx = max(box[0] - x, 0.0, x - box[2])
    dy = max(box[1] - y, 0.0, y - box[3])
    return math.hypot(dx, dy)


def _closest_box_point(x: float, y: float, box: Box) -> tuple[float, float]:
    return (min(max(x, box[0]), box[2]), min(max(y, box[1]), box[3]))


def _wall_boxes(gap_center: float, gap_width: float, cfg: EnvConfig) -> tuple[Box, Box]:
    lo = gap_center - gap_width / 2.0
    hi = gap_center + gap_width / 2.0
    return ((0.0, cfg.wall_y0, lo, cfg.wall_y1), (hi, cfg.wall_y0, 1.0, cfg.wall_y1))


def obstacle_clearance(state: EnvState, cfg: EnvConfig) -> float:
    """Distance from the robot (and the peg disc surface, if grasped) to the
    nearest obstacle; negative means overlap."""
    x, y = state.robot_xy
    d = min(_dist_point_box(x, y, b) for b in state.obstacles)
    if state.grasped:
        px, py = state.peg_xy
        dp = min(_dist_point_box(px, py, b) for b in state.obstacles) - cfg.peg_radius
        d = min(d, dp)
    return d


def nearest_obstacle_displacement(state: EnvState) -> tuple[float, float, float]:
    """(dx, dy, distance) from the robot to the closest obstacle point."""
    x, y = state.robot_xy
    best = None
    for b in state.obstacles:
        cx, cy = _closest_box_point(x, y, b)
        d = math.hypot(cx - x, cy - y)
        if best is None or d < best[2]:
            best = (cx - x, cy - y, d)
    return best


def in_slot(peg_xy: tuple[float, float], state: EnvState, cfg: EnvConfig) -> bool:
    gx, _ = state.goal_xy
    px, py = peg_xy
    lateral_ok = abs(px - gx) <= state.gap_width / 2.0 - cfg.peg_radius
    vertical_ok = cfg.wall_y0 <= py <= cfg.wall_y1 - cfg.peg_radius
    return lateral_ok and vertical_ok


def observe(state: EnvState, cfg: EnvConfig) -> np.ndarray:
    """12-dim observation vector; a deterministic function of EnvState."""
    odx, ody, odist = nearest_obstacle_displacement(state)
    return np.array([
        state.robot_xy[0], state.robot_xy[1],
        state.peg_xy[0], state.peg_xy[1],
        1.0 if state.grasped else 0.0,
        state.goal_xy[0], state.goal_xy[1],
        odx, ody, odist,
        state.gap_width,
        state.step_count / cfg.max_steps,
    ])


def reset(rng: np.random.Generator, cfg: EnvConfig,
          gap_lo: float | None = None, gap_hi: float | None = None) -> EnvState:
    """Randomized start pose and slot drawn from the documented distribution."""
    gap = rng.uniform(cfg.gap_lo if gap_lo is None else gap_lo,
                      cfg.gap_hi if gap_hi is None else gap_hi)
    gx = rng.uniform(cfg.gap_center_lo, cfg.gap_center_hi)
    peg = (rng.uniform(0.08, 0.92), rng.uniform(0.68, 0.88))
    robot = (rng.uniform(0.05, 0.95), rng.uniform(0.72, 0.95))
    slot_center_y = (cfg.wall_y0 + cfg.wall_y1 - cfg.peg_radius) / 2.0
    return EnvState(
        robot_xy=robot, peg_xy=peg, grasped=False,
        goal_xy=(gx, slot_center_y), gap_width=gap,
        obstacles=_wall_boxes(gx, gap, cfg),
    )


def step(state: EnvState, action: Action, cfg: EnvConfig) -> StepOutcome:
    """Kinematic update; pure function of (state, action)."""
    if state.terminal != RUNNING:
        raise UsageError("step() called on a terminal state")

    dx = min(max(action.dx, -cfg.action_max), cfg.action_max)
    dy = min(max(action.dy, -cfg.action_max), cfg.action_max)
    x, y = state.robot_xy
    nx, ny = x + dx, y + dy

    exited = not (0.0 <= nx <= 1.0 and 0.0 <= ny <= 1.0)
    nx = min(max(nx, 0.0), 1.0)
    ny = min(max(ny, 0.0), 1.0)

    grasped = state.grasped
    peg = state.peg_xy
    if grasped:
        peg = (nx, ny)
    if action.grip == 1:
        if grasped:
            grasped = False
        elif math.hypot(nx - peg[0], ny - peg[1]) <= cfg.grasp_radius:
            grasped = True
            peg = (nx, ny)

    nxt = replace(state, robot_xy=(nx, ny), peg_xy=peg, grasped=grasped,
                  step_count=state.step_count + 1)

    collided = any(_point_in_box(nx, ny, b) for b in state.obstacles)
    if grasped and not collided:
        collided = any(
            _dist_point_box(peg[0], peg[1], b) < cfg.peg_radius
            for b in state.obstacles
        )

    if exited or collided:
        # roll the robot back so the stored state never sits inside an obstacle
        nxt = replace(nxt, robot_xy=state.robot_xy,
                      peg_xy=state.peg_xy if state.grasped else peg,
                      grasped=state.grasped, terminal=FAILURE)
        return StepOutcome(nxt, 0.0, FAILURE)

    if in_slot(peg, nxt, cfg):
        nxt = replace(nxt, terminal=SUCCESS)
        return StepOutcome(nxt, 1.0, SUCCESS)

    if nxt.step_count >= cfg.max_steps:
        nxt = replace(nxt, terminal=TIMEOUT)
        return StepOutcome(nxt, 0.0, TIMEOUT)

    return StepOutcome(nxt, 0.0, RUNNING)


# ---------------------------------------------------------------------
# Scripted expert


def _toward(src, dst, speed):
    ex, ey = dst[0] - src[0], dst[1] - src[1]
    d = math.hypot(ex, ey)
    if d < 1e-12:
        return 0.0, 0.0
    s = min(speed, d)
    return ex / d * s, ey / d * s


def expert_action(state: EnvState, noise_scale: float = 0.0,
                  rng: np.random.Generator | None = None,
                  cfg: EnvConfig = EnvConfig()) -> Action:
    """Waypoint controller: approach, grasp, transit above the slot, descend.

    With noise_scale=0 the controller is deterministic.
    """
    gx, _ = state.goal_xy
    rx, ry = state.robot_xy

    if not state.grasped:
        if in_slot(state.peg_xy, state, cfg):
            dx, dy, grip = 0.0, 0.0, 0  # task already done; env flags success
        else:
            d = math.hypot(state.peg_xy[0] - rx, state.peg_xy[1] - ry)
            if d <= cfg.grasp_radius * 0.6:
                dx, dy, grip = 0.0, 0.0, 1
            else:
                dx, dy = _toward((rx, ry), state.peg_xy, cfg.transit_speed)
                grip = 0
    else:
        aligned = abs(rx - gx) <= cfg.align_tol
        at_hover = ry <= cfg.hover_y + 0.01
        if not (aligned and at_hover):
            dx, dy = _toward((rx, ry), (gx, cfg.hover_y), cfg.transit_speed)
            grip = 0
        else:
            dx = min(max(gx - rx, -0.01), 0.01)
            dy = -cfg.descend_speed
            grip = 0

    if noise_scale > 0.0 and rng is not None:
        dx += rng.normal(scale=noise_scale)
        dy += rng.normal(scale=noise_scale)
    return Action(dx, dy, grip)


def run_episode(policy, rng: np.random.Generator, cfg: EnvConfig,
                gap_lo: float | None = None, gap_hi: float | None = None,
                start: EnvState | None = None):
    """Roll one episode under ``policy(state) -> Action``; returns the
    trajectory as (states, actions, rewards, terminal)."""
    state = reset(rng, cfg, gap_lo, gap_hi) if start is None else start
    states, actions, rewards = [state], [], []
    while state.terminal == RUNNING:
        a = policy(state)
        out = step(state, a, cfg)
        actions.append(a)
        rewards.append(out.reward)
        state = out.next_state
        states.append(state)
    return states, actions, rewards, state.terminal


# ---------------------------------------------------------------------
# Scripted supervisor (stands in for the human)


def _phase_progress(state: EnvState, cfg: EnvConfig) -> float:
    """Monotone task-progress potential: distance still to cover."""
    gx, gy = state.goal_xy
    if not state.grasped:
        d_peg = math.hypot(state.peg_xy[0] - state.robot_xy[0],
                           state.peg_xy[1] - state.robot_xy[1])
        d_task = math.hypot(state.peg_xy[0] - gx, state.peg_xy[1] - gy)
        return d_peg + d_task + 1.0
    return math.hypot(state.peg_xy[0] - gx, state.peg_xy[1] - gy)


def predict_failure_ahead(state: EnvState, velocity: tuple[float, float],
                          cfg: EnvConfig, steps: int) -> bool:
    """Ghost-rollout of a constant velocity; true if it collides or exits."""
    vx, vy = velocity
    if math.hypot(vx, vy) < 1e-5:
        return False
    ghost = state
    for _ in range(steps):
        if ghost.terminal != RUNNING:
            break
        out = step(ghost, Action(vx, vy, 0), cfg)
        ghost = out.next_state
        if out.terminal == FAILURE:
            return True
    return False


def oracle_should_intervene(state: EnvState, recent_actions: list[Action],
                            cfg: EnvConfig, stalled: bool = False) -> bool:
    """Risk predicate of the scripted supervisor.

    Fires on dangerous proximity while approaching an obstacle, on a heading
    that reaches an obstacle or the boundary within the lookahead horizon,
    or when the episode has stopped making progress.
    """
    if stalled:
        return True
    clear = obstacle_clearance(state, cfg)
    if clear < cfg.risk_margin_hard:
        return True

    if recent_actions:
        recent = recent_actions[-5:]
        vx = sum(a.dx for a in recent) / len(recent)
        vy = sum(a.dy for a in recent) / len(recent)
        if clear < cfg.risk_margin:
            odx, ody, od = nearest_obstacle_displacement(state)
            if od > 1e-9 and (vx * odx + vy * ody) / od > 1e-4:
                return True
        if predict_failure_ahead(state, (vx, vy), cfg, cfg.lookahead_steps):
            return True
    return False


def oracle_recovery_action(state: EnvState, cfg: EnvConfig = EnvConfig()) -> Action:
    """Corrective teleoperation stand-in: the noiseless expert."""
    return expert_action(state, 0.0, None, cfg)


class ScriptedSupervisor:
    """Per-episode supervisor: watches transitions, decides takeover/release.

    Holds control until the risk predicate stays clear for
    ``release_clear_steps`` consecutive steps.
    """

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.recent: list[Action] = []
        self.in_control = False
        self._clear_streak = 0
        self._best_progress = math.inf
        self._last_progress_step = 0

    def observe(self, state: EnvState, action: Action):
        self.recent.append(action)
        if len(self.recent) > 5:
            self.recent.pop(0)
        p = _phase_progress(state, self.cfg)
        if p < self._best_progress - self.cfg.stall_progress_eps:
            self._best_progress = p
            self._last_progress_step = state.step_count

    def _stalled(self, state: EnvState) -> bool:
        return state.step_count - self._last_progress_step >= self.cfg.stall_steps

    def wants_control(self, state: EnvState) -> bool:
        risk = oracle_should_intervene(state, self.recent, self.cfg,
                                       stalled=self._stalled(state))
        if self.in_control:
            if risk or self._stalled(state):
                self._clear_streak = 0
            else:
                self._clear_streak += 1
                if self._clear_streak >= self.cfg.release_clear_steps:
                    self.in_control = False
                    self._clear_streak = 0
        elif risk:
            self.in_control = True
            self._clear_streak = 0
            # a takeover resets the stall clock; the expert will make progress
            self._last_progress_step = state.step_count
        return self.in_control

    def action(self, state: EnvState) -> Action:
        return oracle_recovery_action(state, self.cfg)
