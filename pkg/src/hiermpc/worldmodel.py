"""Learned latent world model and its training update.

Small fully-connected nets (float64, explicit backprop) implement the latent
encoder, dynamics, reward head, quantile Q-head, value head, and a policy
prior head.  One training step minimizes

    total = td + guidance + dynamics + reward + value

where td is a squared TD error (n_quantiles=1) or a pinball loss against the
scalar bootstrap target (n_quantiles>1), guidance pulls the policy prior
toward the fused reference action with weight lambda, and the dynamics /
reward / value terms are squared consistency errors.  Bootstrap targets are
computed without gradient flow (stop-gradient), and the latent consistency
target encode(o') is likewise treated as a constant.

Updates are plain gradient descent with global-norm clipping; a non-finite
loss aborts the update and leaves parameters untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import InvalidInput, NumericalFailure, RngStream, as_vector

CHECKPOINT_VERSION = 1
LOSS_TERMS = ("td", "guidance", "dynamics", "reward", "value")


class Mlp:
    """Fully-connected net with per-layer caches for manual backprop."""

    def __init__(self, widths, rng, activation="tanh", out_activation=None):
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise InvalidInput(f"bad layer widths {widths}")
        if activation not in ("tanh", "relu"):
            raise InvalidInput(f"unknown activation {activation!r}")
        self.widths = list(widths)
        self.activation = activation
        self.out_activation = out_activation
        self.weights = []
        self.biases = []
        for din, dout in zip(widths[:-1], widths[1:]):
            self.weights.append(rng.standard_normal((din, dout)) / np.sqrt(din))
            self.biases.append(np.zeros(dout))

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def _act(self, u):
        return np.tanh(u) if self.activation == "tanh" else np.maximum(u, 0.0)

    def forward(self, x, want_cache=False):
        h = x
        cache = [] if want_cache else None
        n = len(self.weights)
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            u = h @ w + b
            last = li == n - 1
            if not last:
                y = self._act(u)
            elif self.out_activation == "tanh":
                y = np.tanh(u)
            else:
                y = u
            if want_cache:
                cache.append((h, u, y))
            h = y
        return (h, cache) if want_cache else h

    def backward(self, cache, dy):
        """Grads of sum(dy * output); returns ([dW1, db1, ...], dx)."""
        grads = [None] * (2 * len(self.weights))
        g = dy
        n = len(self.weights)
        for li in range(n - 1, -1, -1):
            h, u, y = cache[li]
            last = li == n - 1
            if not last:
                g = g * (1.0 - y * y) if self.activation == "tanh" else g * (u > 0)
            elif self.out_activation == "tanh":
                g = g * (1.0 - y * y)
            grads[2 * li] = h.T @ g
            grads[2 * li + 1] = g.sum(axis=0)
            g = g @ self.weights[li].T
        return grads, g


@dataclass(frozen=True)
class WorldModelConfig:
    obs_dim: int
    action_dim: int
    latent_dim: int = 16
    hidden: tuple = (32, 32)
    activation: str = "tanh"
    gamma: float = 0.99
    lambda_guidance: float = 0.05
    n_quantiles: int = 5
    grad_clip: float = 10.0
    optimizer: str = "sgd"
    return_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise InvalidInput("gamma must lie in (0, 1)")
        if self.lambda_guidance < 0:
            raise InvalidInput("lambda_guidance must be >= 0")
        if self.latent_dim < 1 or self.n_quantiles < 1:
            raise InvalidInput("latent_dim and n_quantiles must be >= 1")
        if self.return_scale <= 0:
            raise InvalidInput("return_scale must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidInput(f"unknown optimizer {self.optimizer!r}")
        object.__setattr__(self, "hidden", tuple(self.hidden))


@dataclass(frozen=True)
class LossReport:
    total: float
    td: float
    guidance: float
    dynamics: float
    reward: float
    value: float

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "td": self.td,
            "guidance": self.guidance,
            "dynamics": self.dynamics,
            "reward": self.reward,
            "value": self.value,
        }


@dataclass(frozen=True)
class TrainBatch:
    o: np.ndarray        # (B, obs_dim)
    a: np.ndarray        # (B, action_dim)
    r: np.ndarray        # (B,)
    o_next: np.ndarray   # (B, obs_dim)
    done: np.ndarray     # (B,) float 0/1
    a_ref: np.ndarray    # (B, action_dim)

    def __post_init__(self):
        b = self.o.shape[0]
        if b < 1:
            raise InvalidInput("batch must contain at least one transition")
        shapes = (self.a.shape[0], self.r.shape[0], self.o_next.shape[0], self.done.shape[0], self.a_ref.shape[0])
        if any(s != b for s in shapes):
            raise InvalidInput("batch arrays must share the leading dimension")

    @staticmethod
    def from_transitions(transitions, a_refs) -> "TrainBatch":
        if len(transitions) != len(a_refs):
            raise InvalidInput("one a_ref per transition required")
        return TrainBatch(
            o=np.stack([t.o for t in transitions]),
            a=np.stack([t.a for t in transitions]),
            r=np.array([t.r for t in transitions], dtype=np.float64),
            o_next=np.stack([t.o_next for t in transitions]),
            done=np.array([float(t.done) for t in transitions]),
            a_ref=np.stack(a_refs).astype(np.float64),
        )


class WorldModel:
    """Parameter bundle for encoder/dynamics/reward/Q/value/policy heads."""

    def __init__(self, cfg: WorldModelConfig, rng: RngStream):
        self.cfg = cfg
        gen = rng.child("world-model-init").generator()
        do, da, dz, hid = cfg.obs_dim, cfg.action_dim, cfg.latent_dim, list(cfg.hidden)
        act = cfg.activation
        self.encoder = Mlp([do, *hid, dz], gen, act)
        self.dynamics = Mlp([dz + da, *hid, dz], gen, act)
        self.reward_head = Mlp([dz + da, *hid, 1], gen, act)
        self.q_head = Mlp([dz + da, *hid, cfg.n_quantiles], gen, act)
        self.value_head = Mlp([dz, *hid, 1], gen, act)
        self.policy_head = Mlp([dz, *hid, da], gen, act, out_activation="tanh")
        self._opt_m = [np.zeros_like(p) for p in self.parameters()]
        self._opt_v = [np.zeros_like(p) for p in self.parameters()]
        self._opt_t = 0

    @property
    def gamma(self) -> float:
        return self.cfg.gamma

    @property
    def lambda_guidance(self) -> float:
        return self.cfg.lambda_guidance

    @property
    def quantile_fractions(self) -> np.ndarray:
        n = self.cfg.n_quantiles
        return (2.0 * np.arange(1, n + 1) - 1.0) / (2.0 * n)

    def _nets(self):
        return (self.encoder, self.dynamics, self.reward_head, self.q_head, self.value_head, self.policy_head)

    def parameters(self):
        out = []
        for net in self._nets():
            out.extend(net.parameters())
        return out

    def copy(self) -> "WorldModel":
        clone = WorldModel(self.cfg, RngStream(0))
        for dst, src in zip(clone.parameters(), self.parameters()):
            dst[...] = src
        for dst, src in zip(clone._opt_m, self._opt_m):
            dst[...] = src
        for dst, src in zip(clone._opt_v, self._opt_v):
            dst[...] = src
        clone._opt_t = self._opt_t
        return clone

    # -- forward surfaces (all accept single vectors or batches) ------------

    def _check(self, x, dim, name):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != dim:
            raise InvalidInput(f"{name} has shape {x.shape}, expected (*, {dim})")
        return x, squeeze

    def encode(self, o):
        x, squeeze = self._check(o, self.cfg.obs_dim, "observation")
        z = self.encoder.forward(x)
        return z[0] if squeeze else z

    def predict(self, z, a):
        zz, squeeze = self._check(z, self.cfg.latent_dim, "latent")
        aa, _ = self._check(a, self.cfg.action_dim, "action")
        za = np.concatenate([zz, np.broadcast_to(aa, (zz.shape[0], aa.shape[1]))], axis=1)
        z_next = self.dynamics.forward(za)
        r_hat = self.reward_head.forward(za)[:, 0]
        if squeeze:
            return z_next[0], float(r_hat[0])
        return z_next, r_hat

    def q_value(self, z, a):
        zz, squeeze = self._check(z, self.cfg.latent_dim, "latent")
        aa, _ = self._check(a, self.cfg.action_dim, "action")
        za = np.concatenate([zz, aa], axis=1)
        q = self.cfg.return_scale * self.q_head.forward(za)
        return q[0] if squeeze else q

    def q_mean(self, z, a):
        q = self.q_value(z, a)
        return float(q.mean()) if q.ndim == 1 else q.mean(axis=1)

    def value(self, z):
        zz, squeeze = self._check(z, self.cfg.latent_dim, "latent")
        v = self.cfg.return_scale * self.value_head.forward(zz)[:, 0]
        return float(v[0]) if squeeze else v

    def policy(self, z):
        zz, squeeze = self._check(z, self.cfg.latent_dim, "latent")
        a = self.policy_head.forward(zz)
        return a[0] if squeeze else a


def td_target(model: WorldModel, r: float, z_next, a_next, done: bool = False) -> float:
    """Bootstrap target r + gamma * mean-quantile Q(z', a'); r alone at terminals.

    The target is a plain number: no gradient flows through it.
    """
    if done:
        return float(r)
    return float(r + model.gamma * model.q_mean(as_vector(z_next), as_vector(a_next)))


def guidance_loss(a, a_ref, lam: float) -> float:
    """lam * squared distance between an action and the reference action."""
    if lam < 0:
        raise InvalidInput("lambda must be >= 0")
    av, rv = as_vector(a), as_vector(a_ref)
    if av.size != rv.size:
        raise InvalidInput("action dims differ")
    if lam == 0.0:
        return 0.0
    return float(lam * np.sum((av - rv) ** 2))


def _forward_backward(
    model: WorldModel,
    batch: TrainBatch,
    term_mask=None,
    frozen_target=None,
    frozen_next_latent=None,
):
    """Losses plus parameter gradients for the selected loss terms.

    term_mask maps term name -> weight in the backward pass (default all 1);
    forward losses are always all computed.  frozen_target / frozen_next_latent
    override the stop-gradient constants (bootstrap target and next-latent
    consistency target); the finite-difference and stop-gradient tests pin
    them so that numeric differentiation sees the same constants the analytic
    gradient treats as fixed.
    """
    cfg = model.cfg
    B = batch.o.shape[0]
    mask = {t: 1.0 for t in LOSS_TERMS}
    if term_mask is not None:
        mask = {t: float(term_mask.get(t, 0.0)) for t in LOSS_TERMS}

    z, enc_cache = model.encoder.forward(batch.o, want_cache=True)
    if frozen_next_latent is None:
        z_next_tgt = model.encoder.forward(batch.o_next)  # constant target (stop-gradient)
    else:
        z_next_tgt = np.asarray(frozen_next_latent, dtype=np.float64)
    za = np.concatenate([z, batch.a], axis=1)
    z_pred, dyn_cache = model.dynamics.forward(za, want_cache=True)
    r_pred, rew_cache = model.reward_head.forward(za, want_cache=True)
    q, q_cache = model.q_head.forward(za, want_cache=True)
    a_pi, pol_cache = model.policy_head.forward(z, want_cache=True)
    v, val_cache = model.value_head.forward(z, want_cache=True)

    s = cfg.return_scale
    if frozen_target is None:
        a_next = model.policy_head.forward(z_next_tgt)
        q_next = model.q_head.forward(np.concatenate([z_next_tgt, a_next], axis=1))
        y = batch.r + cfg.gamma * (1.0 - batch.done) * s * q_next.mean(axis=1)
    else:
        y = np.asarray(frozen_target, dtype=np.float64)

    dz = cfg.latent_dim
    nq = cfg.n_quantiles
    lam = cfg.lambda_guidance

    # The Q and value heads regress normalized returns: their raw outputs are
    # multiplied by return_scale on the way out, and the TD / value residuals
    # are taken in normalized units so gradient magnitudes stay comparable to
    # the other loss terms whatever the return magnitude.
    yn = y / s
    if nq == 1:
        td = float(np.mean((q[:, 0] - yn) ** 2))
    else:
        taus = model.quantile_fractions
        u = yn[:, None] - q
        td = float(np.mean((taus[None, :] - (u < 0)) * u))
    dyn = float(np.mean((z_pred - z_next_tgt) ** 2))
    rew = float(np.mean((r_pred[:, 0] - batch.r) ** 2))
    diff = a_pi - batch.a_ref
    guid = float(lam * np.mean(np.sum(diff * diff, axis=1))) if lam > 0 else 0.0
    val = float(np.mean((v[:, 0] - yn) ** 2))
    losses = LossReport(total=td + guid + dyn + rew + val, td=td, guidance=guid,
                        dynamics=dyn, reward=rew, value=val)

    # Backward: each head contributes its masked output gradient; the encoder
    # sums the latent gradients of every consumer.
    if nq == 1:
        dq = (2.0 / B) * (q - yn[:, None])
    else:
        dq = -(taus[None, :] - (u < 0)) / (B * nq)
    q_grads, dza_q = model.q_head.backward(q_cache, mask["td"] * dq)

    dr = (2.0 / B) * (r_pred - batch.r[:, None])
    rew_grads, dza_r = model.reward_head.backward(rew_cache, mask["reward"] * dr)

    dzp = (2.0 / (B * dz)) * (z_pred - z_next_tgt)
    dyn_grads, dza_d = model.dynamics.backward(dyn_cache, mask["dynamics"] * dzp)

    dapi = (2.0 * lam / B) * diff if lam > 0 else np.zeros_like(diff)
    pol_grads, dz_pol = model.policy_head.backward(pol_cache, mask["guidance"] * dapi)

    dv = (2.0 / B) * (v - yn[:, None])
    val_grads, dz_val = model.value_head.backward(val_cache, mask["value"] * dv)

    dz_enc = dza_q[:, :dz] + dza_r[:, :dz] + dza_d[:, :dz] + dz_pol + dz_val
    enc_grads, _ = model.encoder.backward(enc_cache, dz_enc)

    # matches parameters() order: encoder, dynamics, reward, q, value, policy
    ordered = enc_grads + dyn_grads + rew_grads + q_grads + val_grads + pol_grads
    return losses, ordered


def compute_losses(model: WorldModel, batch: TrainBatch) -> LossReport:
    losses, _ = _forward_backward(model, batch, term_mask={})
    return losses


def train_step(model: WorldModel, batch: TrainBatch, lr: float) -> LossReport:
    """One clipped gradient-descent step on the combined loss.

    Raises NumericalFailure (parameters untouched) if the loss or any gradient
    is non-finite.
    """
    if lr <= 0:
        raise InvalidInput("lr must be positive")
    losses, grads = _forward_backward(model, batch)
    if not np.isfinite(losses.total):
        raise NumericalFailure(f"non-finite loss {losses}")
    sq = 0.0
    for g in grads:
        sq += float(np.sum(g * g))
    if not np.isfinite(sq):
        raise NumericalFailure("non-finite gradient")
    norm = np.sqrt(sq)
    scale = 1.0 if norm <= model.cfg.grad_clip else model.cfg.grad_clip / norm
    if model.cfg.optimizer == "sgd":
        for p, g in zip(model.parameters(), grads):
            p -= lr * scale * g
    else:
        b1, b2, eps = 0.9, 0.999, 1e-8
        model._opt_t += 1
        t = model._opt_t
        for p, g, m, v in zip(model.parameters(), grads, model._opt_m, model._opt_v):
            gc = scale * g
            m *= b1
            m += (1 - b1) * gc
            v *= b2
            v += (1 - b2) * gc * gc
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return losses


def stop_gradient_targets(model: WorldModel, batch: TrainBatch):
    """The constants of one update: bootstrap target y and next-latent target."""
    z_next = model.encoder.forward(batch.o_next)
    a_next = model.policy_head.forward(z_next)
    q_next = model.q_head.forward(np.concatenate([z_next, a_next], axis=1))
    y = batch.r + model.cfg.gamma * (1.0 - batch.done) * model.cfg.return_scale * q_next.mean(axis=1)
    return y, z_next


def term_loss(model: WorldModel, batch: TrainBatch, term: str,
              frozen_target=None, frozen_next_latent=None) -> float:
    losses, _ = _forward_backward(
        model, batch, term_mask={},
        frozen_target=frozen_target, frozen_next_latent=frozen_next_latent,
    )
    return getattr(losses, term)


def finite_diff_check(
    model: WorldModel,
    batch: TrainBatch,
    term: str = "td",
    rng: RngStream = RngStream(0),
    n_params: int = 120,
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples n_params parameters at random; relative error uses a
    max(|analytic|, |numeric|, 1e-8) denominator so disconnected (zero
    gradient) parameters compare cleanly.  Stop-gradient constants (bootstrap
    and next-latent targets) are pinned at their unperturbed values, matching
    the semantics of the analytic gradient.
    """
    if term not in LOSS_TERMS:
        raise InvalidInput(f"unknown loss term {term!r}")
    y0, z_next0 = stop_gradient_targets(model, batch)
    _, grads = _forward_backward(model, batch, term_mask={term: 1.0})
    params = model.parameters()
    sizes = [p.size for p in params]
    total = sum(sizes)
    gen = rng.child("finite-diff-" + term).generator()
    idx = gen.choice(total, size=min(n_params, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for flat_i in idx:
        pi = int(np.searchsorted(offsets, flat_i, side="right") - 1)
        j = int(flat_i - offsets[pi])
        p = params[pi]
        orig = p.flat[j]
        p.flat[j] = orig + h
        f_plus = term_loss(model, batch, term, frozen_target=y0, frozen_next_latent=z_next0)
        p.flat[j] = orig - h
        f_minus = term_loss(model, batch, term, frozen_target=y0, frozen_next_latent=z_next0)
        p.flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        analytic = grads[pi].flat[j]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


# -- checkpointing ----------------------------------------------------------


def save_checkpoint(model: WorldModel, path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": {
            "obs_dim": model.cfg.obs_dim,
            "action_dim": model.cfg.action_dim,
            "latent_dim": model.cfg.latent_dim,
            "hidden": list(model.cfg.hidden),
            "activation": model.cfg.activation,
            "gamma": model.cfg.gamma,
            "lambda_guidance": model.cfg.lambda_guidance,
            "n_quantiles": model.cfg.n_quantiles,
            "grad_clip": model.cfg.grad_clip,
            "optimizer": model.cfg.optimizer,
            "return_scale": model.cfg.return_scale,
        },
        "params": [p.tolist() for p in model.parameters()],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> WorldModel:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise InvalidInput(f"unsupported checkpoint version {payload.get('version')!r}")
    cfg = WorldModelConfig(**payload["config"])
    model = WorldModel(cfg, RngStream(0))
    params = model.parameters()
    saved = payload["params"]
    if len(saved) != len(params):
        raise InvalidInput("checkpoint parameter count does not match config")
    for p, s in zip(params, saved):
        arr = np.asarray(s, dtype=np.float64)
        if arr.shape != p.shape:
            raise InvalidInput(f"checkpoint shape {arr.shape} does not match expected {p.shape}")
        p[...] = arr
    return model
