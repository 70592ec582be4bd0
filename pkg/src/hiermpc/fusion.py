"""State-aware expert selection and fusion with semantic weights.

The state is encoded, matched against expert embeddings by inner product, and
the resulting selection distribution is blended with the semantic weights by a
convex coefficient alpha.  The fused weights average the expert actions into
the reference action used to warm-start planning and to regularize training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidInput, RngStream, Simplex, as_vector, clamp_action, softmax
from .experts import ExpertLibrary, expert_actions


@dataclass(frozen=True)
class StateEncoder:
    """Fixed state-feature map: identity, or a seeded random projection.

    The projection matrix is drawn once from N(0, 1/d_in) at construction and
    never changes, so encoding is a pure function of the state.
    """

    in_dim: int
    out_dim: int
    mode: str = "random_projection"
    seed: RngStream = RngStream(0)
    projection: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("identity", "random_projection"):
            raise InvalidInput(f"unknown encoder mode {self.mode!r}")
        if self.mode == "identity":
            if self.in_dim != self.out_dim:
                raise InvalidInput("identity encoder requires matching input and output dims")
            object.__setattr__(self, "projection", None)
        else:
            gen = self.seed.child("state-encoder").generator()
            p = gen.standard_normal((self.out_dim, self.in_dim)) / np.sqrt(self.in_dim)
            p.setflags(write=False)
            object.__setattr__(self, "projection", p)


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInput(f"alpha must lie in [0, 1], got {self.alpha}")


def encode_state(enc: StateEncoder, s) -> np.ndarray:
    v = as_vector(s)
    if v.size != enc.in_dim:
        raise InvalidInput(f"state dim {v.size} does not match encoder input dim {enc.in_dim}")
    if enc.mode == "identity":
        return v
    return enc.projection @ v


def selection_probs(phi_s, library: ExpertLibrary) -> Simplex:
    """Softmax over inner products of the encoded state with each embedding."""
    p = as_vector(phi_s)
    if p.size != library.embedding_dim:
        raise InvalidInput(
            f"encoded state dim {p.size} does not match embedding dim {library.embedding_dim}"
        )
    logits = np.array([float(p @ d.embedding) for d in library.descriptors])
    return softmax(logits)


def fuse(w: Simplex, p: Simplex, cfg: FusionConfig) -> Simplex:
    """Convex combination alpha*w + (1-alpha)*p of semantic and selection weights."""
    if len(w) != len(p):
        raise InvalidInput(f"weight lengths differ: {len(w)} vs {len(p)}")
    return Simplex(cfg.alpha * w.weights + (1.0 - cfg.alpha) * p.weights)


def reference_action(w_tilde: Simplex, library: ExpertLibrary, obs) -> np.ndarray:
    """Weight-averaged expert action, clamped into the action box."""
    if len(w_tilde) != library.K:
        raise InvalidInput(f"expected {library.K} weights, got {len(w_tilde)}")
    acts = expert_actions(library, obs)
    return clamp_action(w_tilde.weights @ acts)
