"""Scripted expert controllers and the expert library.

Each expert is a deterministic feedback law over a named observation layout:
damping (kill velocity), velocity tracking (hold a target speed), goal seeking
(proportional pull toward a goal coordinate), and handle turning (drive a door
angle open).  The library fixes expert ordering, so index i means the same
expert everywhere (weights, selection probabilities, fused actions).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import InvalidInput, as_vector, clamp_action

CONTROLLER_KINDS = ("damping", "velocity_track", "goal_seek", "turn")


@dataclass(frozen=True)
class ExpertDescriptor:
    id: str
    embedding: np.ndarray
    description: str = ""

    def __post_init__(self):
        e = as_vector(self.embedding)
        e.setflags(write=False)
        object.__setattr__(self, "embedding", e)


@dataclass(frozen=True)
class ScriptedController:
    """One feedback law writing into a single action slot.

    obs_layout maps semantic names (x, v, goal, phase, theta) to observation
    indices for the environment the expert is scripted for.
    """

    kind: str
    obs_layout: dict
    action_dim: int
    slot: int = 0
    gain: float = 1.0
    target: float = 0.0  # tracked speed (velocity_track) or open angle (turn)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        a = np.zeros(self.action_dim)
        if self.kind == "damping":
            a[self.slot] = -self.gain * obs[self.obs_layout["v"]]
        elif self.kind == "velocity_track":
            a[self.slot] = self.gain * (self.target - obs[self.obs_layout["v"]])
        elif self.kind == "goal_seek":
            a[self.slot] = self.gain * (obs[self.obs_layout["goal"]] - obs[self.obs_layout["x"]])
        elif self.kind == "turn":
            a[self.slot] = self.gain * (self.target - obs[self.obs_layout["theta"]])
        else:
            raise InvalidInput(f"unknown controller kind {self.kind!r}")
        return clamp_action(a)


@dataclass(frozen=True)
class ExpertLibrary:
    descriptors: tuple
    policies: tuple
    obs_dim: int
    action_dim: int

    def __post_init__(self):
        if len(self.descriptors) < 1 or len(self.descriptors) != len(self.policies):
            raise InvalidInput("library needs at least one expert, one policy per descriptor")
        ids = [d.id for d in self.descriptors]
        if len(set(ids)) != len(ids):
            raise InvalidInput(f"duplicate expert ids: {ids}")
        dims = {d.embedding.size for d in self.descriptors}
        if len(dims) != 1:
            raise InvalidInput(f"inconsistent embedding dims: {dims}")

    @property
    def K(self) -> int:
        return len(self.descriptors)

    @property
    def embedding_dim(self) -> int:
        return self.descriptors[0].embedding.size

    @property
    def ids(self):
        return [d.id for d in self.descriptors]


def expert_action(library: ExpertLibrary, i: int, obs) -> np.ndarray:
    """Deterministic action of expert i at obs, clamped into [-1, 1]."""
    if not 0 <= i < library.K:
        raise InvalidInput(f"expert index {i} out of range for K={library.K}")
    o = as_vector(obs)
    if o.size != library.obs_dim:
        raise InvalidInput(f"obs dim {o.size} does not match library obs dim {library.obs_dim}")
    return library.policies[i](o)


def expert_actions(library: ExpertLibrary, obs) -> np.ndarray:
    """All expert actions at obs, stacked (K, action_dim)."""
    return np.stack([expert_action(library, i, obs) for i in range(library.K)])


def expert_embedding(library: ExpertLibrary, i: int) -> np.ndarray:
    if not 0 <= i < library.K:
        raise InvalidInput(f"expert index {i} out of range for K={library.K}")
    return library.descriptors[i].embedding


def library_from_config(cfg: dict) -> ExpertLibrary:
    """Build a library from a config dict (ids, controller kinds, gains, embeddings).

    Embeddings default to one-hot over the expert index when not given
    explicitly; explicit embeddings must all share one dimension.
    """
    specs = cfg["experts"]
    k = len(specs)
    obs_layout = cfg["obs_layout"]
    action_dim = int(cfg["action_dim"])
    descriptors, policies = [], []
    for idx, spec in enumerate(specs):
        if "embedding" in spec:
            emb = np.asarray(spec["embedding"], dtype=np.float64)
        else:
            emb = np.eye(k)[idx]
        descriptors.append(
            ExpertDescriptor(id=spec["id"], embedding=emb, description=spec.get("description", ""))
        )
        policies.append(
            ScriptedController(
                kind=spec["kind"],
                obs_layout=obs_layout,
                action_dim=action_dim,
                slot=int(spec.get("slot", 0)),
                gain=float(spec.get("gain", 1.0)),
                target=float(spec.get("target", 0.0)),
            )
        )
    return ExpertLibrary(
        descriptors=tuple(descriptors),
        policies=tuple(policies),
        obs_dim=int(cfg["obs_dim"]),
        action_dim=action_dim,
    )


LOCOMOTION_LAYOUT = {"x": 0, "v": 1}
REACH_LAYOUT = {"x": 0, "v": 1, "goal": 2}
DOOR_LAYOUT = {"x": 0, "v": 1, "goal": 2, "phase": 3, "theta": 4}

_BASE_DESCRIPTIONS = {
    "walk": "walk forward at a moderate pace",
    "stand": "stand and hold position steady, damping velocity",
    "run": "run fast at high speed",
    "reach": "reach toward the goal position, approaching the handle",
    "turn": "turn the held handle, swinging it open",
}


def default_library(env_kind: str) -> ExpertLibrary:
    """Stock library for a toy environment kind.

    Locomotion/reach tasks use the four base experts with one-hot embeddings.
    The door task adds a turn expert and uses hand-set embeddings in
    observation space so that state-aware selection (identity encoder) favors
    approaching before the handle is held and turning afterwards.  The constant
    goal coordinate in the door observation acts as a bias term for those
    inner products.
    """
    if env_kind in ("stand", "walk", "run"):
        layout, obs_dim, action_dim = LOCOMOTION_LAYOUT, 2, 1
    elif env_kind == "reach":
        layout, obs_dim, action_dim = REACH_LAYOUT, 3, 1
    elif env_kind == "door":
        layout, obs_dim, action_dim = DOOR_LAYOUT, 5, 2
    else:
        raise InvalidInput(f"unknown env kind {env_kind!r}")

    experts = [
        {"id": "walk", "kind": "velocity_track", "gain": 1.0, "target": 0.3},
        {"id": "stand", "kind": "damping", "gain": 1.0},
        {"id": "run", "kind": "velocity_track", "gain": 1.0, "target": 1.0},
    ]
    if env_kind in ("reach", "door"):
        experts.append({"id": "reach", "kind": "goal_seek", "gain": 1.0})
    if env_kind == "door":
        # Stiffer approach/brake gains: the fused reach+stand pair must act as
        # a well-damped PD law that settles inside the handle band within an
        # episode, which unit gains cannot do at these weights.
        experts[1]["gain"] = 4.0
        experts[3]["gain"] = 4.0
        experts.append({"id": "turn", "kind": "turn", "gain": 4.0, "target": 1.0, "slot": 1})
        # Embedding layout mirrors the door observation [x, v, goal, phase, theta].
        # goal is constantly 1.0, so its coefficient is a bias; the phase flag
        # flips preference from reach to turn once the handle is held.
        hand_set = {
            "walk": [0.0, 0.0, -1.0, 0.0, 0.0],
            "stand": [0.0, -1.0, 0.5, 0.0, 0.0],
            "run": [0.0, 0.0, -2.0, 0.0, 0.0],
            "reach": [0.0, 0.0, 2.0, -4.0, 0.0],
            "turn": [0.0, 0.0, -2.0, 4.0, 0.0],
        }
        for spec in experts:
            spec["embedding"] = hand_set[spec["id"]]
    for spec in experts:
        spec["description"] = _BASE_DESCRIPTIONS[spec["id"]]
    return library_from_config(
        {"obs_dim": obs_dim, "action_dim": action_dim, "obs_layout": layout, "experts": experts}
    )
