"""Function approximators and the two learning problems.

The high-level skill policy is a shared per-agent network over the skill
catalog (trained with policy gradient and a centralized critic, or with a
Q-loss under an additive per-agent mixer).  The low-level policy produces
the per-step program parameters through a squash into the admissible box;
it is trained with a score-function gradient by default, with a pathwise
variant chained through the program's KKT sensitivities for audits.

Everything is plain numpy; the networks are small shared MLPs with tanh
hidden layers and Adam-style per-parameter step scaling.
"""

from __future__ import annotations

import math
import numpy as np

from . import dynamics as dyn
from . import qp
from .barriers import QPParams
from .errors import (ConfigError, DomainError, EmptyMaskError, PartitionError,
                     StaleBatchError)
from .observation import AGENT, FROZEN, Observation, own_velocity
from .skills import QPBuild, SkillSpec

MAX_NEIGHBORS = 4


# ---------------------------------------------------------------------------
# observation encoding
# ---------------------------------------------------------------------------

def obs_dim(catalog: str) -> int:
    base = 10 if catalog == "road" else 8
    return base + 5 * MAX_NEIGHBORS


def encode_obs(obs: Observation) -> np.ndarray:
    """Fixed-size feature vector for the policy networks."""
    feats = []
    if obs.model == dyn.FRENET:
        s = obs.own
        band = obs.band
        feats += [s.d / 2.0, s.psi, s.v / 8.0,
                  (obs.speed_cap - s.v) / 8.0,
                  min(band.hi - s.d, 5.0) / 5.0,
                  min(s.d - band.lo, 5.0) / 5.0,
                  float(obs.left_lane), float(obs.right_lane),
                  (obs.lane_center - s.d) / 4.0,
                  min(obs.goal.distance, 200.0) / 200.0]
        pos_scale, vel_scale = (30.0, 5.0), 8.0
    else:
        vel = own_velocity(obs)
        feats += [vel[0] / 10.0, vel[1] / 10.0]
        g = obs.goal.direction
        gn = float(np.linalg.norm(g))
        feats += [g[0] / 6.0, g[1] / 6.0, min(gn, 12.0) / 12.0,
                  min(obs.goal.distance, 12.0) / 12.0]
        if obs.model == dyn.CARTESIAN:
            feats += [obs.own.cos_t, obs.own.sin_t]
        else:
            feats += [0.0, 0.0]
        pos_scale, vel_scale = (6.0, 6.0), 5.0
    for k in range(MAX_NEIGHBORS):
        if k < len(obs.neighbors):
            nb = obs.neighbors[k]
            kind = 1.0 if nb.kind == AGENT else (0.5 if nb.kind == FROZEN else 0.0)
            feats += [nb.rel_pos[0] / pos_scale[0], nb.rel_pos[1] / pos_scale[1],
                      nb.rel_vel[0] / vel_scale, nb.rel_vel[1] / vel_scale, kind]
        else:
            feats += [0.0, 0.0, 0.0, 0.0, -1.0]
    return np.asarray(feats, dtype=float)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class MLP:
    """Tanh network; deterministic forward given parameters and input."""

    def __init__(self, sizes, rng: np.random.Generator, out_scale: float = 1.0):
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = math.sqrt(1.0 / fan_in)
            self.weights.append(rng.normal(scale=scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        if self.weights:
            self.weights[-1] *= out_scale

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cache(x)
        return out

    def forward_cache(self, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        acts = [x]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ W + b
            if i < len(self.weights) - 1:
                z = np.tanh(z)
            acts.append(z)
        return acts[-1], acts

    def backward(self, acts, d_out: np.ndarray):
        """Parameter gradients and input gradient for the cached forward."""
        d = np.atleast_2d(d_out)
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        for i in reversed(range(len(self.weights))):
            a_in = acts[i]
            grads_w[i] = a_in.T @ d
            grads_b[i] = d.sum(axis=0)
            d = d @ self.weights[i].T
            if i > 0:
                d = d * (1.0 - acts[i] ** 2)
        return grads_w, grads_b, d

    def get_flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights]
                              + [b.ravel() for b in self.biases])

    def set_flat(self, flat: np.ndarray) -> None:
        k = 0
        for w in self.weights:
            w[...] = flat[k:k + w.size].reshape(w.shape)
            k += w.size
        for b in self.biases:
            b[...] = flat[k:k + b.size]
            k += b.size


class Adam:
    """Per-parameter adaptive step scaling on a list of arrays."""

    def __init__(self, arrays, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads) -> None:
        self.t += 1
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m[...] = self.b1 * m + (1 - self.b1) * g
            v[...] = self.b2 * v + (1 - self.b2) * g * g
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            a -= self.lr * mh / (np.sqrt(vh) + self.eps)


def _net_arrays(net: MLP):
    return net.weights + net.biases


# ---------------------------------------------------------------------------
# high-level policy
# ---------------------------------------------------------------------------

def masked_probs(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("no initiable skill")
    z = np.where(mask, logits, -np.inf)
    z = z - z[mask].max()
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum()


class HighPolicy:
    """Shared actor over the skill catalog plus a centralized critic."""

    def __init__(self, obs_size: int, n_skills: int, joint_size: int,
                 hidden=(64, 64), rng=None):
        rng = rng or np.random.default_rng(0)
        self.n_skills = n_skills
        self.actor = MLP([obs_size, *hidden, n_skills], rng, out_scale=0.1)
        self.critic = MLP([joint_size, *hidden, 1], rng, out_scale=0.1)
        self.version = 0

    def probs(self, obs_vec: np.ndarray, mask) -> np.ndarray:
        logits = self.actor.forward(obs_vec)[0]
        return masked_probs(logits, mask)

    def value(self, joint_vec: np.ndarray) -> float:
        return float(self.critic.forward(joint_vec)[0, 0])


def sample_skill(policy: HighPolicy, obs_vec: np.ndarray, mask,
                 rng: np.random.Generator):
    p = policy.probs(obs_vec, mask)
    idx = int(rng.choice(len(p), p=p))
    return idx, float(np.log(p[idx]))


def greedy_skill(policy: HighPolicy, obs_vec: np.ndarray, mask) -> int:
    p = policy.probs(obs_vec, mask)
    return int(np.argmax(p))


# ---------------------------------------------------------------------------
# low-level policy
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def squash(x: np.ndarray, floor: float, cap: float) -> np.ndarray:
    # clip the saturated tail so the output stays strictly above the floor
    s = np.clip(_sigmoid(x), 1e-12, 1.0)
    return floor + (cap - floor) * s


class LowPolicy:
    """Maps (observation, skill) to program parameters inside the box.

    The network outputs a pre-squash mean; exploration adds Gaussian noise
    in pre-squash space and the sigmoid squash keeps every entry strictly
    inside (floor, cap].
    """

    def __init__(self, obs_size: int, skill_specs: list[SkillSpec],
                 hidden=(64, 64), sigma: float = 0.5, rng=None):
        rng = rng or np.random.default_rng(1)
        self.skill_specs = list(skill_specs)
        self.layouts = [s.param_layout() for s in skill_specs]
        self.dims = [sum(l) for l in self.layouts]
        self.max_dim = max(self.dims)
        self.n_skills = len(skill_specs)
        self.floor = skill_specs[0].safety.phi_floor
        self.cap = skill_specs[0].safety.phi_cap
        self.sigma = sigma
        self.net = MLP([obs_size + self.n_skills, *hidden, self.max_dim],
                       rng, out_scale=0.1)
        self.version = 0

    def _input(self, obs_vec: np.ndarray, skill_idx: int) -> np.ndarray:
        onehot = np.zeros(self.n_skills)
        onehot[skill_idx] = 1.0
        return np.concatenate([obs_vec, onehot])

    def mean(self, obs_vec: np.ndarray, skill_idx: int) -> np.ndarray:
        out = self.net.forward(self._input(obs_vec, skill_idx))[0]
        return out[:self.dims[skill_idx]]

    def params_from_flat(self, flat: np.ndarray, skill_idx: int) -> QPParams:
        return QPParams.from_flat(flat, self.layouts[skill_idx],
                                  floor=self.floor, cap=self.cap)


def sample_phi(policy: LowPolicy, obs_vec: np.ndarray, skill_idx: int,
               rng: np.random.Generator | None = None):
    """Draw parameters; returns (QPParams, pre-squash sample, log density).

    With sigma = 0 the draw is deterministic and the log density is
    reported as 0.
    """
    mean = policy.mean(obs_vec, skill_idx)
    if policy.sigma == 0.0 or rng is None:
        x = mean
        logp = 0.0
    else:
        x = mean + policy.sigma * rng.standard_normal(mean.size)
        span = policy.cap - policy.floor
        s = _sigmoid(x)
        log_gauss = (-0.5 * ((x - mean) / policy.sigma) ** 2
                     - math.log(policy.sigma * math.sqrt(2 * math.pi)))
        log_jac = np.log(span * s * (1.0 - s))
        logp = float(np.sum(log_gauss - log_jac))
    flat = squash(x, policy.floor, policy.cap)
    return policy.params_from_flat(flat, skill_idx), x, logp


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------

def _check_version(batch, version: int) -> None:
    for seg in batch:
        if seg.policy_version != version:
            raise StaleBatchError("batch collected under a different policy")


def high_advantages(policy: HighPolicy, batch, gamma: float) -> np.ndarray:
    starts = np.stack([s.joint_start for s in batch])
    ends = np.stack([s.joint_end for s in batch])
    v_start = policy.critic.forward(starts)[:, 0]
    v_end = policy.critic.forward(ends)[:, 0]
    out = np.empty(len(batch))
    for i, seg in enumerate(batch):
        boot = 0.0 if seg.done else v_end[i]
        out[i] = seg.seg_return + gamma ** seg.duration * boot - v_start[i]
    return out


def high_pg_update(policy: HighPolicy, batch, gamma: float,
                   lr_actor: float = 3e-4, lr_critic: float = 1e-3,
                   entropy_coef: float = 0.01,
                   actor_opt: Adam | None = None,
                   critic_opt: Adam | None = None,
                   critic_sweeps: int = 5) -> dict:
    """REINFORCE with a centralized critic baseline on skill segments."""
    if not batch:
        return {"actor_loss": 0.0, "critic_loss": 0.0,
                "actor_grad_norm": 0.0, "critic_grad_norm": 0.0}
    _check_version(batch, policy.version)
    adv = high_advantages(policy, batch, gamma)

    obs = np.stack([s.obs_start for s in batch])
    logits, acts = policy.actor.forward_cache(obs)
    d_logits = np.zeros_like(logits)
    actor_loss = 0.0
    n = len(batch)
    for i, seg in enumerate(batch):
        mask = seg.mask_start if seg.mask_start is not None \
            else np.ones(policy.n_skills, dtype=bool)
        p = masked_probs(logits[i], mask)
        weight = (gamma ** seg.t_abs) * adv[i]
        grad = p.copy()
        grad[seg.skill_index] -= 1.0
        d_logits[i] = weight * grad / n
        actor_loss -= weight * math.log(max(p[seg.skill_index], 1e-12)) / n
        if entropy_coef:
            with np.errstate(divide="ignore", invalid="ignore"):
                logp = np.where(p > 0, np.log(np.maximum(p, 1e-12)), 0.0)
            ent = -float((p * logp).sum())
            d_ent = np.where(mask, -p * (logp + ent), 0.0)
            d_logits[i] -= entropy_coef * d_ent / n
            actor_loss -= entropy_coef * ent / n
    gw, gb, _ = policy.actor.backward(acts, d_logits)
    a_arrays = _net_arrays(policy.actor)
    a_grads = gw + gb
    a_norm = math.sqrt(sum(float((g ** 2).sum()) for g in a_grads))
    if actor_opt is None:
        for a, g in zip(a_arrays, a_grads):
            a -= lr_actor * g
    else:
        actor_opt.step(a_arrays, a_grads)

    starts = np.stack([s.joint_start for s in batch])
    targets = np.empty(n)
    v_end = policy.critic.forward(np.stack([s.joint_end for s in batch]))[:, 0]
    for i, seg in enumerate(batch):
        boot = 0.0 if seg.done else v_end[i]
        targets[i] = seg.seg_return + gamma ** seg.duration * boot
    critic_loss = 0.0
    c_norm = 0.0
    c_arrays = _net_arrays(policy.critic)
    for sweep in range(critic_sweeps):
        pred, c_acts = policy.critic.forward_cache(starts)
        err = pred[:, 0] - targets
        if sweep == 0:
            critic_loss = float((err ** 2).mean())
        d_pred = (2.0 * err / n)[:, None]
        cw, cb, _ = policy.critic.backward(c_acts, d_pred)
        c_grads = cw + cb
        if sweep == 0:
            c_norm = math.sqrt(sum(float((g ** 2).sum()) for g in c_grads))
        if critic_opt is None:
            for a, g in zip(c_arrays, c_grads):
                a -= lr_critic * g
        else:
            critic_opt.step(c_arrays, c_grads)

    policy.version += 1
    return {"actor_loss": actor_loss, "critic_loss": critic_loss,
            "actor_grad_norm": a_norm, "critic_grad_norm": c_norm}


def high_q_loss(q_fn, batch, gamma: float) -> float:
    """Squared segment TD error under the additive per-agent mixer.

    ``q_fn(obs_vec)`` returns the per-skill value vector; with the
    additive total the argmax decomposes per agent, so the loss is a mean
    over per-agent segments.
    """
    if not batch:
        return 0.0
    total = 0.0
    for seg in batch:
        q_now = float(q_fn(seg.obs_start)[seg.skill_index])
        if seg.done:
            boot = 0.0
        else:
            q_next = np.asarray(q_fn(seg.obs_end), dtype=float)
            mask = seg.mask_end if seg.mask_end is not None \
                else np.ones(q_next.size, dtype=bool)
            q_next = np.where(mask, q_next, -np.inf)
            boot = float(q_next.max())
        td = seg.seg_return + gamma ** seg.duration * boot - q_now
        total += td * td
    return total / len(batch)


class QNet:
    """Per-skill value head shared across agents, for the Q-loss path."""

    def __init__(self, obs_size: int, n_skills: int, hidden=(64, 64), rng=None):
        rng = rng or np.random.default_rng(2)
        self.net = MLP([obs_size, *hidden, n_skills], rng, out_scale=0.1)
        self.n_skills = n_skills
        self.version = 0

    def __call__(self, obs_vec: np.ndarray) -> np.ndarray:
        return self.net.forward(obs_vec)[0]


def q_update(qnet: QNet, batch, gamma: float, lr: float = 1e-3,
             opt: Adam | None = None) -> dict:
    """One semi-gradient step on the additive-mixer Q loss."""
    if not batch:
        return {"q_loss": 0.0}
    loss_before = high_q_loss(qnet, batch, gamma)
    obs = np.stack([s.obs_start for s in batch])
    out, acts = qnet.net.forward_cache(obs)
    d_out = np.zeros_like(out)
    n = len(batch)
    for i, seg in enumerate(batch):
        if seg.done:
            boot = 0.0
        else:
            q_next = qnet(seg.obs_end)
            mask = seg.mask_end if seg.mask_end is not None \
                else np.ones(q_next.size, dtype=bool)
            boot = float(np.where(mask, q_next, -np.inf).max())
        td = seg.seg_return + gamma ** seg.duration * boot \
            - out[i, seg.skill_index]
        d_out[i, seg.skill_index] = -2.0 * td / n
    gw, gb, _ = qnet.net.backward(acts, d_out)
    arrays = _net_arrays(qnet.net)
    grads = gw + gb
    if opt is None:
        for a, g in zip(arrays, grads):
            a -= lr * g
    else:
        opt.step(arrays, grads)
    qnet.version += 1
    return {"q_loss": loss_before}


def blend_reward(r_low: float, advantage_high: float, lam: float,
                 n_agents: int) -> float:
    """Mix of the segment-level advantage and the intrinsic reward."""
    if not 0.0 <= lam <= 1.0:
        raise DomainError("lambda must be in [0, 1]")
    return lam * advantage_high / n_agents + (1.0 - lam) * r_low


def phi_grads_from_qp(build: QPBuild, sol, d_control: np.ndarray,
                      spec_qp=None) -> np.ndarray | None:
    """Chain a control-space gradient back to the flat parameter vector.

    Returns None when the sample is degenerate for differentiation.
    """
    spec_qp = spec_qp or build.qp_spec
    incoming = np.zeros(spec_qp.n)
    incoming[:build.n_controls] = d_control
    try:
        diffs = qp.kkt_differentials(spec_qp, sol, incoming)
    except Exception:
        return None
    grads = qp.parameter_grads(spec_qp, sol, diffs.d_mu, diffs.d_lambda)
    blocks = {"h_weights": 0, "f_weights": 1, "barrier_gains": 2,
              "clf_rates": 3, "slack_weights": 4}
    sizes = [0, 0, 0, 0, 0]
    for name, bi, target, coeff in build.assembly:
        sizes[blocks[name]] = max(sizes[blocks[name]], bi + 1)
    out = [np.zeros(s) for s in sizes]
    for name, bi, target, coeff in build.assembly:
        kind = target[0]
        if kind == "Hdiag":
            val = grads.dH[target[1], target[1]]
        elif kind == "F":
            val = grads.dF[target[1]]
        else:
            val = grads.dh[target[1]]
        out[blocks[name]][bi] += coeff * val
    return np.concatenate(out)


def low_pg_update(policy: LowPolicy, step_batch, lam: float, gamma: float,
                  lr: float = 1e-4, estimator: str = "score",
                  n_agents: int = 1, opt: Adam | None = None) -> dict:
    """Update the parameter-producing policy from per-step records.

    ``step_batch`` is a list of per-agent step records carrying the
    observation vector, skill index, pre-squash sample, blended reward-to-
    go (score estimator) or the chained parameter gradient (pathwise).
    """
    if estimator == "score" and policy.sigma == 0.0:
        raise ConfigError("score-function estimator needs sigma > 0")
    if not step_batch:
        return {"low_loss": 0.0, "grad_norm": 0.0}
    for rec in step_batch:
        if rec.policy_version != policy.version:
            raise StaleBatchError("low-level batch is stale")

    inputs = np.stack([policy._input(rec.obs_vec, rec.skill_idx)
                       for rec in step_batch])
    out, acts = policy.net.forward_cache(inputs)
    d_out = np.zeros_like(out)
    n = len(step_batch)
    loss = 0.0
    for i, rec in enumerate(step_batch):
        dim = policy.dims[rec.skill_idx]
        if estimator == "score":
            # d/d mean of log q(x) is (x - mean) / sigma^2
            mean = out[i, :dim]
            d_mean = -(rec.presquash - mean) / policy.sigma ** 2 \
                * rec.return_to_go / n
            loss -= rec.return_to_go / n
        else:
            if rec.phi_grad is None:
                continue
            span = policy.cap - policy.floor
            s = _sigmoid(rec.presquash)
            d_mean = -(rec.phi_grad * span * s * (1.0 - s)) / n
            loss -= 0.0
        d_out[i, :dim] = d_mean
    gw, gb, _ = policy.net.backward(acts, d_out)
    arrays = _net_arrays(policy.net)
    grads = gw + gb
    norm = math.sqrt(sum(float((g ** 2).sum()) for g in grads))
    if opt is None:
        for a, g in zip(arrays, grads):
            a -= lr * g
    else:
        opt.step(arrays, grads)
    policy.version += 1
    return {"low_loss": loss, "grad_norm": norm}


# ---------------------------------------------------------------------------
# grouping
# ---------------------------------------------------------------------------

def validate_partition(partition, agents) -> list[frozenset]:
    groups = [frozenset(g) for g in partition]
    if any(not g for g in groups):
        raise PartitionError("empty group")
    union = set()
    for g in groups:
        if union & g:
            raise PartitionError("overlapping groups")
        union |= g
    if union != set(agents):
        raise PartitionError("groups do not cover the agent set")
    return groups


def group_returns(reward_streams: dict, partition, gamma: float) -> list[float]:
    """Discounted return of each group's summed per-agent reward stream.

    The group values add up to the joint return exactly.
    """
    groups = validate_partition(partition, reward_streams.keys())
    out = []
    for g in groups:
        total = 0.0
        for agent in sorted(g):
            stream = reward_streams[agent]
            scale = 1.0
            for r in stream:
                total += scale * r
                scale *= gamma
        out.append(total)
    return out


def train(config, out_dir="runs/latest", writer=None, progress=None):
    """Run the full training loop for a parsed configuration.

    Thin entry point over the training module: collects episodes with the
    current stochastic policies, updates both levels alternately from the
    same data, writes metric rows and a final checkpoint.
    """
    from .training import run_training
    return run_training(config, out_dir, writer=writer, progress=progress)


def blended_objective_identity(segments, step_records, lam: float,
                               gamma: float, n_agents: int):
    """Both sides of the exact blended-objective decomposition for one
    agent's trajectory: per-segment closed form vs per-step sum."""
    lhs = 0.0
    for seg in segments:
        geom = (1.0 - gamma ** seg.duration) / (1.0 - gamma) \
            if gamma < 1.0 else float(seg.duration)
        lhs += (gamma ** seg.t_abs) * geom * seg.advantage * lam / n_agents
    lhs += (1.0 - lam) * sum((gamma ** rec.t) * rec.r_low
                             for rec in step_records)
    rhs = sum((gamma ** rec.t) * blend_reward(rec.r_low, rec.advantage, lam,
                                              n_agents)
              for rec in step_records)
    return lhs, rhs
