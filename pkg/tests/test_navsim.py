"""Action parsing, kinematics, episode mechanics, rendering determinism."""

import math

import numpy as np
import pytest

from vlmloop import navsim as N
from vlmloop.errors import ContractError
from vlmloop.rng import Stream


class TestParseAction:
    def test_plain_object(self):
        assert N.parse_action('{"action": "move_forward"}') is N.Action.FORWARD

    def test_embedded_object_accepted(self):
        out = N.parse_action('Sure! {"action":"rotate_left"} hope that helps')
        assert out is N.Action.ROTATE_LEFT

    def test_schema_violation(self):
        assert N.parse_action('{"act": "go"}') is None

    def test_unknown_action_value(self):
        assert N.parse_action('{"action": "fly"}') is None

    def test_first_wellformed_object_wins(self):
        text = 'junk { not json } {"action": "stay"} {"action": "move_forward"}'
        assert N.parse_action(text) is N.Action.STAY

    def test_never_raises_on_garbage(self):
        rng = Stream(1).child("garbage").generator()
        alphabet = list('{}[]":a1, \n\\')
        for _ in range(200):
            s = "".join(rng.choice(alphabet, size=rng.integers(0, 30)))
            out = N.parse_action(s)
            assert out is None or isinstance(out, N.Action)

    def test_spaced_action_text_roundtrip(self):
        for a in N.Action:
            assert N.parse_action(N.action_text(a)) is a


def start(x=0.0, y=0.0, heading=0.0, goal=(1.0, 0.0), max_steps=50):
    return N.NavState(x=x, y=y, heading=heading, goal=goal, max_steps=max_steps)


class TestStep:
    def test_forward_along_x(self):
        s = N.step(start(), N.Action.FORWARD)
        assert abs(s.x - 0.25) < 1e-12 and abs(s.y) < 1e-12

    def test_rotate_wraparound(self):
        s = N.step(start(heading=350.0), N.Action.ROTATE_LEFT)
        assert s.heading == 5.0

    def test_six_lefts_then_forward_points_up(self):
        s = start()
        for _ in range(6):
            s = N.step(s, N.Action.ROTATE_LEFT)
        s = N.step(s, N.Action.FORWARD)
        assert abs(s.x - 0.25 * math.cos(math.radians(90))) < 1e-12
        assert abs(s.y - 0.25) < 1e-12

    def test_stay_and_malformed_consume_step_only(self):
        s0 = start()
        for a in (N.Action.STAY, None):
            s = N.step(s0, a)
            assert (s.x, s.y, s.heading) == (s0.x, s0.y, s0.heading)
            assert s.steps == s0.steps + 1

    def test_kinematic_closure_24_lefts(self):
        s = start(heading=37.0)
        for _ in range(24):
            s = N.step(s, N.Action.ROTATE_LEFT)
        assert s.heading == 37.0

    def test_terminated_episode_rejects_step(self):
        s = start(max_steps=1)
        s = N.step(s, N.Action.STAY)
        with pytest.raises(ContractError):
            N.step(s, N.Action.STAY)


class TestEpisodes:
    def test_distance_euclidean(self):
        assert start(goal=(1.0, 0.0)).distance() == 1.0
        assert start(x=3.0, y=4.0, goal=(0.0, 0.0)).distance() == 5.0

    def test_oracle_reaches_goal(self):
        world = N.make_world(Stream(3).child("w"))
        for e in range(6):
            es = Stream(3).child(f"e{e}")
            s = N.make_episode(es, world, max_steps=50, min_dist=2.0, max_dist=4.0)
            res = N.run_episode(s, world, N.oracle_policy)
            assert res["final_distance"] < 0.25, res["final_distance"]

    def test_malformed_policy_preserves_distance(self):
        world = N.make_world(Stream(4).child("w"))
        s = N.make_episode(Stream(4).child("e"), world, max_steps=20)
        res = N.run_episode(s, world, N.malformed_policy)
        assert res["final_distance"] == res["initial_distance"]
        assert all(not row["parsed_ok"] for row in res["trace"])
        assert len(res["trace"]) == 20

    def test_policy_exception_terminates_with_distance(self):
        world = N.make_world(Stream(5).child("w"))
        s = N.make_episode(Stream(5).child("e"), world, max_steps=20)

        calls = {"n": 0}

        def flaky(obs, instruction, state):
            calls["n"] += 1
            if calls["n"] >= 3:
                raise RuntimeError("policy crashed")
            return N.action_text(N.Action.FORWARD)

        res = N.run_episode(s, world, flaky)
        assert res["failed"]
        assert res["final_distance"] > 0
        assert len(res["trace"]) == 3

    def test_mean_final_distance(self):
        results = [{"final_distance": d} for d in (1.0, 2.0, 6.0)]
        assert N.mean_final_distance(results) == 3.0

    def test_episode_start_distance_in_band(self):
        world = N.make_world(Stream(6).child("w"))
        for i in range(10):
            s = N.make_episode(Stream(6).child(f"e{i}"), world,
                               min_dist=2.0, max_dist=8.0)
            assert 2.0 <= s.distance() <= 8.0


class TestRender:
    def test_deterministic(self):
        world = N.make_world(Stream(7).child("w"))
        s = N.make_episode(Stream(7).child("e"), world)
        img1, txt1 = N.render_observation(s, world)
        img2, txt2 = N.render_observation(s, world)
        assert img1.pixels.tobytes() == img2.pixels.tobytes()
        assert txt1 == txt2

    def test_instruction_names_goal(self):
        world = N.make_world(Stream(8).child("w"))
        s = N.make_episode(Stream(8).child("e"), world)
        _, txt = N.render_observation(s, world)
        assert world.goal.color in txt and world.goal.shape in txt

    def test_agent_goal_coincident_overlap(self):
        world = N.make_world(Stream(9).child("w"))
        goal = (world.goal.x, world.goal.y)
        s = N.NavState(x=goal[0], y=goal[1], heading=0.0, goal=goal)
        img, _ = N.render_observation(s, world)  # draws without error
        assert img.pixels.shape == (36, 48, 3)

    def test_moving_goal_moves_only_goal_marker(self):
        lm_a = N.Landmark("red", "square", 2.0, 2.0)
        lm_b = N.Landmark("blue", "circle", 8.0, 8.0)
        world_a = N.World(size=10.0, landmarks=(lm_a, lm_b), goal_index=0)
        world_b = N.World(size=10.0, landmarks=(lm_a, lm_b), goal_index=1)
        s = N.NavState(x=5.0, y=2.0, heading=0.0, goal=(lm_a.x, lm_a.y))
        img_a, _ = N.render_observation(s, world_a)
        s2 = N.NavState(x=5.0, y=2.0, heading=0.0, goal=(lm_b.x, lm_b.y))
        img_b, _ = N.render_observation(s2, world_b)
        diff = np.argwhere((img_a.pixels != img_b.pixels).any(axis=2))
        assert len(diff) > 0
        # every differing pixel sits near one of the two goal ring locations
        for r, c in diff:
            near_a = abs(r - 28) <= 3 and abs(c - 9) <= 3
            near_b = abs(r - 7) <= 3 and abs(c - 38) <= 3
            assert near_a or near_b, (r, c)

    def test_parse_partition_of_action_space(self):
        outs = {N.parse_action(N.action_text(a)) for a in N.Action}
        outs.add(N.parse_action("word salad"))
        assert outs == {N.Action.STAY, N.Action.FORWARD, N.Action.ROTATE_LEFT,
                        N.Action.ROTATE_RIGHT, None}
