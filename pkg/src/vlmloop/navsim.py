"""2D kinematic navigation benchmark.

The agent moves on a plane with a fixed action repertoire — stay, a 0.25 m
forward step, and 15-degree left/right rotations — and is driven by a
text-generating policy whose output is scanned for a JSON action object.
Malformed output is a value, not an error: it consumes a step and leaves the
pose unchanged.  Heading 0 points along +x; positive rotation is
counterclockwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable

import numpy as np

from .errors import ContractError
from .rng import Stream
from .vision import ImageGrid

FORWARD_STEP = 0.25
ROTATE_DEG = 15.0


class Action(Enum):
    STAY = "stay"
    FORWARD = "move_forward"
    ROTATE_LEFT = "rotate_left"
    ROTATE_RIGHT = "rotate_right"


_ACTION_BY_NAME = {a.value: a for a in Action}
ACTION_SCHEMA = '{"action": "<stay|move_forward|rotate_left|rotate_right>"}'


def parse_action(text: str) -> Action | None:
    """First well-formed JSON object in the text wins; it must carry an
    "action" field with a known value, else the result is Malformed (None).
    Never raises."""
    if not isinstance(text, str):
        return None
    decoder = json.JSONDecoder()
    idx = text.find("{")
    while idx != -1:
        try:
            obj, _ = decoder.raw_decode(text[idx:])
        except json.JSONDecodeError:
            idx = text.find("{", idx + 1)
            continue
        if isinstance(obj, dict) and obj.get("action") in _ACTION_BY_NAME:
            return _ACTION_BY_NAME[obj["action"]]
        return None
    return None


@dataclass(frozen=True)
class NavState:
    x: float
    y: float
    heading: float  # degrees in [0, 360)
    goal: tuple[float, float]
    steps: int = 0
    max_steps: int = 50

    def distance(self) -> float:
        return math.hypot(self.x - self.goal[0], self.y - self.goal[1])

    @property
    def terminated(self) -> bool:
        return self.steps >= self.max_steps


def _norm_heading(h: float) -> float:
    return h % 360.0


def step(state: NavState, action: Action | None) -> NavState:
    """Advance one tick.  Stay and Malformed leave the pose unchanged but
    still consume the step."""
    if state.terminated:
        raise ContractError("cannot step a terminated episode")
    x, y, h = state.x, state.y, state.heading
    if action is Action.FORWARD:
        x += FORWARD_STEP * math.cos(math.radians(h))
        y += FORWARD_STEP * math.sin(math.radians(h))
    elif action is Action.ROTATE_LEFT:
        h = _norm_heading(h + ROTATE_DEG)
    elif action is Action.ROTATE_RIGHT:
        h = _norm_heading(h - ROTATE_DEG)
    return replace(state, x=x, y=y, heading=h, steps=state.steps + 1)


@dataclass(frozen=True)
class Landmark:
    color: str
    shape: str
    x: float
    y: float


@dataclass(frozen=True)
class World:
    size: float
    landmarks: tuple[Landmark, ...]
    goal_index: int

    @property
    def goal(self) -> Landmark:
        return self.landmarks[self.goal_index]


def make_world(stream: Stream, size: float = 10.0, n_landmarks: int = 4) -> World:
    """Distinct color/shape landmarks scattered away from the borders."""
    from .data import COLORS, SHAPES

    rng = stream.child("world").generator()
    combos = [(c, s) for c in COLORS for s in SHAPES]
    pick = rng.choice(len(combos), size=n_landmarks, replace=False)
    landmarks = []
    for i in pick:
        c, s = combos[int(i)]
        landmarks.append(Landmark(c, s,
                                  float(rng.uniform(1.5, size - 1.5)),
                                  float(rng.uniform(1.5, size - 1.5))))
    return World(size=size, landmarks=tuple(landmarks),
                 goal_index=int(rng.integers(n_landmarks)))


def make_episode(stream: Stream, world: World, max_steps: int = 50,
                 min_dist: float = 2.0, max_dist: float = 8.0) -> NavState:
    """Start pose sampled so the initial goal distance lies in [min, max]."""
    rng = stream.child("episode").generator()
    goal = (world.goal.x, world.goal.y)
    for _ in range(256):
        x = float(rng.uniform(0.5, world.size - 0.5))
        y = float(rng.uniform(0.5, world.size - 0.5))
        d = math.hypot(x - goal[0], y - goal[1])
        if min_dist <= d <= max_dist:
            heading = float(rng.integers(24)) * ROTATE_DEG
            return NavState(x=x, y=y, heading=heading, goal=goal, max_steps=max_steps)
    raise ContractError(f"could not sample a start {min_dist}-{max_dist} m from the goal")


def render_observation(state: NavState, world: World, px_h: int = 36,
                       px_w: int = 48) -> tuple[ImageGrid, str]:
    """Top-down schematic: landmarks as colored shapes, a white ring on the
    goal, the agent as a gray disc with a heading tick."""
    from .data import COLOR_RGB, draw_shape

    pixels = np.zeros((px_h, px_w, 3), dtype=np.float32)
    sx = px_w / world.size
    sy = px_h / world.size

    def to_px(wx: float, wy: float) -> tuple[int, int]:
        col = int(np.clip(wx * sx, 0, px_w - 1))
        row = int(np.clip(px_h - 1 - wy * sy, 0, px_h - 1))
        return row, col

    cell = 7
    for lm in world.landmarks:
        r, c = to_px(lm.x, lm.y)
        r0 = int(np.clip(r - cell // 2, 0, px_h - cell))
        c0 = int(np.clip(c - cell // 2, 0, px_w - cell))
        draw_shape(pixels, r0, c0, cell, lm.shape, COLOR_RGB[lm.color])

    gr, gc = to_px(*state.goal)
    for dr, dc in ((-2, 0), (2, 0), (0, -2), (0, 2)):
        rr, cc = gr + dr, gc + dc
        if 0 <= rr < px_h and 0 <= cc < px_w:
            pixels[rr, cc] = 1.0

    ar, ac = to_px(state.x, state.y)
    yy, xx = np.mgrid[0:px_h, 0:px_w]
    agent = (yy - ar) ** 2 + (xx - ac) ** 2 <= 4
    pixels[agent] = np.array([0.6, 0.6, 0.6], dtype=np.float32)
    tr = ar - int(round(2 * math.sin(math.radians(state.heading))))
    tc = ac + int(round(2 * math.cos(math.radians(state.heading))))
    if 0 <= tr < px_h and 0 <= tc < px_w:
        pixels[tr, tc] = 1.0

    goal_lm = world.goal
    instruction = (f"goal : reach the {goal_lm.color} {goal_lm.shape} . "
                   f"reply with one json action")
    return ImageGrid(pixels), instruction


Policy = Callable[[ImageGrid, str, NavState], str]


def run_episode(start: NavState, world: World, policy: Policy,
                obs_px: tuple[int, int] = (36, 48)) -> dict:
    """Observe -> generate -> parse -> step until the budget runs out.

    A policy exception ends the episode at the failure pose.  Returns the
    Euclidean final distance and the full per-step trace.
    """
    if start.max_steps < 1:
        raise ContractError("episode needs max_steps >= 1")
    state = start
    trace: list[dict] = []
    failed = False
    while not state.terminated:
        obs, instruction = render_observation(state, world, obs_px[0], obs_px[1])
        try:
            text = policy(obs, instruction, state)
        except Exception as e:  # noqa: BLE001 - policy failures are data
            trace.append({"step": state.steps, "pose": _pose(state),
                          "action": None, "parsed_ok": False,
                          "error": f"{type(e).__name__}: {e}"})
            failed = True
            break
        action = parse_action(text)
        state = step(state, action)
        trace.append({"step": state.steps - 1, "pose": _pose(state),
                      "action": action.value if action else None,
                      "parsed_ok": action is not None})
    return {"final_distance": state.distance(), "trace": trace,
            "steps": state.steps, "failed": failed,
            "initial_distance": start.distance()}


def _pose(state: NavState) -> dict:
    return {"x": state.x, "y": state.y, "heading": state.heading}


def heading_error(state: NavState) -> float:
    """Signed degrees from current heading to the goal bearing, in (-180, 180]."""
    bearing = math.degrees(math.atan2(state.goal[1] - state.y,
                                      state.goal[0] - state.x))
    err = (bearing - state.heading) % 360.0
    if err > 180.0:
        err -= 360.0
    return err


def oracle_policy(obs: ImageGrid, instruction: str, state: NavState) -> str:
    """Scripted turn-then-go controller used as a benchmark upper bound."""
    if state.distance() <= FORWARD_STEP / 2.0:
        return '{"action": "stay"}'
    err = heading_error(state)
    if abs(err) > ROTATE_DEG / 2.0:
        name = "rotate_left" if err > 0 else "rotate_right"
        return json.dumps({"action": name})
    return '{"action": "move_forward"}'


def malformed_policy(obs: ImageGrid, instruction: str, state: NavState) -> str:
    return "no structured output here"


def mean_final_distance(results: list[dict]) -> float:
    """Benchmark aggregate: arithmetic mean of per-episode final distances."""
    if not results:
        raise ContractError("no episodes to aggregate")
    return float(np.mean([r["final_distance"] for r in results]))


def action_text(action: Action) -> str:
    """Space-separated JSON action string whose words are all vocabulary
    tokens, so it round-trips through the tokenizer."""
    return f'{{ "action" : "{action.value}" }}'


def oracle_action(state: NavState) -> Action:
    parsed = parse_action(oracle_policy(None, "", state))
    assert parsed is not None
    return parsed


def gen_nav_sample(stream: Stream):
    """One supervised navigation sample: rendered observation, instruction,
    and the oracle action as a JSON label."""
    from .data import Sample

    world = make_world(stream)
    state = make_episode(stream, world)
    obs, instruction = render_observation(state, world)
    action = oracle_action(state)
    return Sample(obs, instruction, action_text(action), "navigate",
                  {"goal": list(state.goal)})
