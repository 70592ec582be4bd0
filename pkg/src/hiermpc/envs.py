"""Deterministic toy environments and a discrete MDP with exact oracles.

The continuous tasks are 1-D point masses under semi-implicit Euler
integration (v += a*dt; x += v*dt), dt=0.1, 200-step episodes:

  stand  obs [x, v]           reward -|v|
  walk   obs [x, v]           reward -|v - 0.3|
  run    obs [x, v]           reward -|v - 1.0|
  reach  obs [x, v, g]        reward -|x - g|
  door   obs [x, v, g, phase, theta], two action dims.  Phase 1 rewards
         approaching the handle at g=1.0; holding |x-g| < 0.05 for 5
         consecutive steps latches phase 2, where the second action dim turns
         the handle angle theta toward 1.0 (reward -|theta - 1|) and full
         opening ends the episode with a +5 bonus.

Per-step rewards are clipped to [-2, 5].  Identical seeds and action
sequences give bitwise-identical trajectories.

The DiscreteMdp is a tabular fixture for contraction / value-iteration checks.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .core import InvalidInput, RngStream, as_vector

ENV_KINDS = ("stand", "walk", "run", "reach", "door")
DT = 0.1
MAX_STEPS = 200
HANDLE_POS = 1.0
HANDLE_BAND = 0.05
HOLD_STEPS = 5
THETA_OPEN = 1.0
OPEN_THRESHOLD = 0.95  # feedback turn laws approach THETA_OPEN asymptotically
DOOR_BONUS = 5.0
REWARD_RANGE = (-2.0, 5.0)

OBS_DIMS = {"stand": 2, "walk": 2, "run": 2, "reach": 3, "door": 5}
ACTION_DIMS = {"stand": 1, "walk": 1, "run": 1, "reach": 1, "door": 2}


@dataclass(frozen=True)
class Transition:
    o: np.ndarray
    a: np.ndarray
    r: float
    o_next: np.ndarray
    done: bool

    def to_json(self) -> str:
        return json.dumps(
            {
                "o": self.o.tolist(),
                "a": self.a.tolist(),
                "r": self.r,
                "o_next": self.o_next.tolist(),
                "done": self.done,
            }
        )

    @staticmethod
    def from_json(line: str) -> "Transition":
        d = json.loads(line)
        return Transition(
            o=np.asarray(d["o"], dtype=np.float64),
            a=np.asarray(d["a"], dtype=np.float64),
            r=float(d["r"]),
            o_next=np.asarray(d["o_next"], dtype=np.float64),
            done=bool(d["done"]),
        )


class ToyEnv:
    """1-D point-mass environment; single-owner, reset before use."""

    def __init__(self, kind: str, max_steps: int = MAX_STEPS, dt: float = DT):
        if kind not in ENV_KINDS:
            raise InvalidInput(f"unknown env kind {kind!r}")
        self.kind = kind
        self.max_steps = max_steps
        self.dt = dt
        self.obs_dim = OBS_DIMS[kind]
        self.action_dim = ACTION_DIMS[kind]
        self._ready = False

    def reset(self, seed: int) -> np.ndarray:
        gen = RngStream(seed).child("env-reset").generator()
        self.t = 0
        self.v = 0.0
        self.theta = 0.0
        self.phase = 0
        self.hold = 0
        self.goal = 0.0
        if self.kind in ("stand", "walk", "run"):
            self.x = gen.uniform(-0.5, 0.5)
            self.v = gen.uniform(-0.5, 0.5)
        elif self.kind == "reach":
            self.x = gen.uniform(-0.5, 0.5)
            self.v = gen.uniform(-0.1, 0.1)
            self.goal = gen.uniform(-1.0, 1.0)
        else:  # door
            self.x = gen.uniform(-0.2, 0.2)
            self.goal = HANDLE_POS
        self.done = False
        self._ready = True
        return self._obs()

    def _obs(self) -> np.ndarray:
        if self.kind in ("stand", "walk", "run"):
            return np.array([self.x, self.v])
        if self.kind == "reach":
            return np.array([self.x, self.v, self.goal])
        return np.array([self.x, self.v, self.goal, float(self.phase), self.theta])

    def step(self, a) -> Transition:
        if not self._ready:
            raise InvalidInput("reset the environment before stepping")
        if self.done:
            raise InvalidInput("episode is done; reset before stepping")
        act = as_vector(a)
        if act.size != self.action_dim:
            raise InvalidInput(f"action dim {act.size}, expected {self.action_dim}")
        if np.any(np.abs(act) > 1.0):
            warnings.warn("action outside [-1, 1]; clamping", stacklevel=2)
            act = np.clip(act, -1.0, 1.0)

        o = self._obs()
        self.v += act[0] * self.dt
        self.x += self.v * self.dt
        opened = False
        if self.kind == "door":
            if self.phase == 0:
                if abs(self.x - self.goal) < HANDLE_BAND:
                    self.hold += 1
                    if self.hold >= HOLD_STEPS:
                        self.phase = 1
                else:
                    self.hold = 0
            else:
                self.theta = float(np.clip(self.theta + act[1] * self.dt, 0.0, THETA_OPEN))
                opened = self.theta >= OPEN_THRESHOLD

        if self.kind == "stand":
            r = -abs(self.v)
        elif self.kind == "walk":
            r = -abs(self.v - 0.3)
        elif self.kind == "run":
            r = -abs(self.v - 1.0)
        elif self.kind == "reach":
            r = -abs(self.x - self.goal)
        else:
            if self.phase == 0:
                r = -abs(self.x - self.goal)
            else:
                r = -abs(self.theta - THETA_OPEN)
                if opened:
                    r += DOOR_BONUS
        r = float(np.clip(r, *REWARD_RANGE))

        self.t += 1
        self.done = opened or self.t >= self.max_steps
        return Transition(o=o, a=act, r=r, o_next=self._obs(), done=self.done)


def dump_trajectory(transitions, path) -> None:
    """Write one transition per line as JSONL for oracle replay."""
    with open(path, "w") as fh:
        for tr in transitions:
            fh.write(tr.to_json() + "\n")


def load_trajectory(path) -> list:
    with open(path) as fh:
        return [Transition.from_json(line) for line in fh if line.strip()]


@dataclass(frozen=True)
class DiscreteMdp:
    transition: np.ndarray  # (S, A, S), rows are distributions
    reward: np.ndarray  # (S, A)
    gamma: float

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=np.float64)
        r = np.asarray(self.reward, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or r.shape != p.shape[:2]:
            raise InvalidInput(f"inconsistent MDP shapes: P {p.shape}, R {r.shape}")
        if np.any(p < 0) or not np.allclose(p.sum(axis=2), 1.0, atol=1e-9):
            raise InvalidInput("transition rows must be probability distributions")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidInput("gamma must lie in (0, 1)")
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


def bellman_operator(mdp: DiscreteMdp, Q: np.ndarray) -> np.ndarray:
    """(TQ)(s,a) = r(s,a) + gamma * sum_s' P(s'|s,a) max_a' Q(s',a')."""
    q = np.asarray(Q, dtype=np.float64)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise InvalidInput(f"Q shape {q.shape}, expected {(mdp.n_states, mdp.n_actions)}")
    if not np.all(np.isfinite(q)):
        raise InvalidInput("Q must be finite")
    v_next = q.max(axis=1)
    return mdp.reward + mdp.gamma * (mdp.transition @ v_next)


def value_iteration(mdp: DiscreteMdp, tol: float = 1e-8) -> np.ndarray:
    """Iterate the Bellman operator to a sup-norm fixed point within tol."""
    if tol <= 0:
        raise InvalidInput("tol must be positive")
    q = np.zeros((mdp.n_states, mdp.n_actions))
    while True:
        q_next = bellman_operator(mdp, q)
        if np.max(np.abs(q_next - q)) < tol:
            return q_next
        q = q_next


def random_mdp(rng: RngStream, n_states: int = 4, n_actions: int = 3, gamma: float = 0.99) -> DiscreteMdp:
    """Random dense MDP (Dirichlet transition rows, rewards in [-1, 1])."""
    gen = rng.generator()
    p = gen.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = gen.uniform(-1.0, 1.0, size=(n_states, n_actions))
    return DiscreteMdp(transition=p, reward=r, gamma=gamma)
