"""LC-MAPPO: constrained multi-agent PPO with a multi-head centralized critic.

One iteration collects episodes with the current actors and prices, regresses
the critic heads onto Monte Carlo task/cost returns, computes counterfactual
advantages on the shaped joint value, takes clipped PPO steps per agent, and
finally moves the dual variables.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from . import agents as A
from .episode import AGENTS, RESOURCES, Budgets, EpisodeConfig, Prices
from .harness import Dataset, run_episode
from .neural import Adam, CriticBundle, segment_log_softmax
from .policy import ActorSet

log = logging.getLogger(__name__)

VARIANTS = ("lcmappo", "mappo", "fixed_lambda", "rcpo")
METRIC_COLUMNS = (
    "iter", "em", "c_edge", "c_lat", "c_tok", "lambda_edge", "lambda_lat", "lambda_tok",
    "feasibility", "viol_edge", "viol_lat", "viol_tok", "loss_pi", "loss_v", "entropy",
)


class TrainingError(RuntimeError):
    pass


@dataclass
class Transition:
    agent: int
    obs: np.ndarray
    feats: np.ndarray
    offsets: np.ndarray
    mask: np.ndarray
    action: int
    logp: float
    glob: np.ndarray
    joint: np.ndarray  # (3, ACTION_FEATS)
    cand_critic: np.ndarray  # (n + 1, ACTION_FEATS)
    costs: np.ndarray  # (3,) increments caused by this action
    reward: float = 0.0
    terminal: bool = False
    episode: int = 0


@dataclass
class EpisodeSummary:
    episode: int
    example: int
    r_acc: float
    costs: np.ndarray
    n_transitions: int


@dataclass
class Buffer:
    transitions: list[Transition] = field(default_factory=list)
    episodes: list[EpisodeSummary] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.transitions)

    def episode_slices(self) -> list[slice]:
        out, start = [], 0
        for ep in self.episodes:
            out.append(slice(start, start + ep.n_transitions))
            start += ep.n_transitions
        return out

    def mean_costs(self) -> np.ndarray:
        return np.mean([e.costs for e in self.episodes], axis=0) if self.episodes else np.zeros(3)

    def serialize(self) -> bytes:
        parts = []
        for t in self.transitions:
            parts += [np.array([t.agent, t.action, t.episode, int(t.terminal)], dtype=np.int64).tobytes(),
                      np.array([t.logp, t.reward]).tobytes(), t.obs.tobytes(), t.feats.tobytes(),
                      t.offsets.tobytes(), t.mask.tobytes(), t.glob.tobytes(), t.joint.tobytes(),
                      t.cand_critic.tobytes(), t.costs.tobytes()]
        for e in self.episodes:
            parts += [np.array([e.episode, e.example, e.n_transitions], dtype=np.int64).tobytes(),
                      np.array([e.r_acc]).tobytes(), e.costs.tobytes()]
        return b"".join(parts)


# --- duals ----------------------------------------------------------------

@dataclass
class PidGains:
    kp: float = 0.0
    ki: float = 0.02
    kd: float = 0.0


@dataclass
class DualState:
    """Nonnegative resource prices (edge, lat, tok) and the ascent state that moves them."""

    lam: np.ndarray = field(default_factory=lambda: np.zeros(3))
    eta: np.ndarray = field(default_factory=lambda: np.array([0.02, 0.02, 0.002]))
    lambda_max: float = 10.0
    pid: PidGains | None = None
    integral: np.ndarray = field(default_factory=lambda: np.zeros(3))
    prev_error: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.lam = np.clip(np.asarray(self.lam, dtype=float).reshape(3), 0.0, self.lambda_max)
        self.eta = np.broadcast_to(np.asarray(self.eta, dtype=float), (3,)).copy()
        self.integral = np.asarray(self.integral, dtype=float).reshape(3)
        self.prev_error = np.asarray(self.prev_error, dtype=float).reshape(3)

    @property
    def prices(self) -> Prices:
        return Prices(*map(float, self.lam))

    def copy(self) -> "DualState":
        return DualState(self.lam.copy(), self.eta.copy(), self.lambda_max, self.pid,
                         self.integral.copy(), self.prev_error.copy())

    def to_dict(self) -> dict[str, Any]:
        return {"lam": self.lam.tolist(), "eta": self.eta.tolist(), "lambda_max": self.lambda_max,
                "pid": asdict(self.pid) if self.pid else None,
                "integral": self.integral.tolist(), "prev_error": self.prev_error.tolist()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DualState":
        pid = PidGains(**d["pid"]) if d.get("pid") else None
        return cls(np.array(d["lam"]), np.array(d["eta"]), d["lambda_max"], pid,
                   np.array(d["integral"]), np.array(d["prev_error"]))


def dual_update(duals: DualState, mean_costs: Sequence[float] | np.ndarray, budgets: Sequence[float] | np.ndarray,
                active: Sequence[bool] | np.ndarray = (True, True, True)) -> DualState:
    """Projected ascent lam <- clip(lam + eta (C - beta), 0, lam_max), or PID on e = C - beta."""
    c = np.asarray(mean_costs, dtype=float)
    if np.any(c < 0):
        raise ValueError("mean costs must be nonnegative")
    e = c - np.asarray(budgets, dtype=float)
    on = np.asarray(active, dtype=bool)
    out = duals.copy()
    if duals.pid is None:
        new = np.clip(duals.lam + duals.eta * e, 0.0, duals.lambda_max)
    else:
        k = duals.pid
        out.integral = duals.integral + e
        new = np.clip(k.kp * e + k.ki * out.integral + k.kd * (e - duals.prev_error), 0.0, duals.lambda_max)
        out.prev_error = e
    out.lam = np.where(on, new, duals.lam)
    return out


# --- returns and advantages ---------------------------------------------

def shaped_rewards(buffer: Buffer, lam: Sequence[float] | np.ndarray) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    r = np.array([t.reward for t in buffer.transitions])
    c = np.array([t.costs for t in buffer.transitions]).reshape(-1, 3)
    return r - c @ lam


def reward_to_go(values: np.ndarray, slices: list[slice], gamma: float = 1.0) -> np.ndarray:
    out = np.zeros_like(values, dtype=float)
    for sl in slices:
        acc = np.zeros(values.shape[1:]) if values.ndim > 1 else 0.0
        for i in range(sl.stop - 1, sl.start - 1, -1):
            acc = values[i] + gamma * acc
            out[i] = acc
    return out


def shaped_returns(buffer: Buffer, duals: DualState | Sequence[float], gamma: float = 1.0) -> np.ndarray:
    """G'_t = sum_{t' >= t} gamma^(t'-t) (r_acc - lam . c) within each episode."""
    lam = duals.lam if isinstance(duals, DualState) else np.asarray(duals, dtype=float)
    return reward_to_go(shaped_rewards(buffer, lam), buffer.episode_slices(), gamma)


def head_targets(buffer: Buffer, cost_scale: np.ndarray) -> np.ndarray:
    """(T, 4) Monte Carlo targets: task reward-to-go and scaled cost-to-go (gamma = 1)."""
    r = np.array([t.reward for t in buffer.transitions])
    c = np.array([t.costs for t in buffer.transitions]).reshape(-1, 3) / cost_scale
    return reward_to_go(np.column_stack([r, c]), buffer.episode_slices(), 1.0)


def counterfactual_advantages(q_values: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """A(a') = Q'(a') - sum_a pi(a) Q'(a) over the presented actions."""
    q = np.asarray(q_values, dtype=float)
    p = np.asarray(probs, dtype=float)
    return q - np.dot(p, np.where(p > 0, q, 0.0))


def head_coefficients(lam: np.ndarray, cost_scale: np.ndarray) -> np.ndarray:
    """Weights turning the 4 mixed heads into the shaped value Q_task - sum_k lam_k Q_k."""
    return np.concatenate([[1.0], -np.asarray(lam) * np.asarray(cost_scale)])


def coma_advantage(bundle: CriticBundle, lam: Sequence[float] | np.ndarray, t: Transition, probs: np.ndarray,
                   cost_scale: np.ndarray = np.array([8.0, 8.0, 64.0])) -> tuple[float, np.ndarray]:
    """Counterfactual advantage of the taken action and of every presented alternative.

    Other agents' actions stay fixed at ``t.joint``; only agent ``t.agent``'s
    slot is swapped through its candidate list (stop included).
    """
    n = len(t.cand_critic)
    joint = np.repeat(t.joint[None], n, axis=0)
    joint[:, t.agent] = t.cand_critic
    mixed, _, _ = bundle.forward(np.repeat(t.glob[None], n, axis=0), joint)
    q = mixed @ head_coefficients(np.asarray(lam, dtype=float), cost_scale)
    adv = counterfactual_advantages(q, probs)
    return float(adv[t.action]), adv


# --- batched actor evaluation --------------------------------------------

@dataclass
class AgentBatch:
    obs: np.ndarray
    feats: np.ndarray
    seg: np.ndarray
    offsets: np.ndarray
    starts: np.ndarray
    cand_pos: np.ndarray
    stop_pos: np.ndarray
    mask: np.ndarray
    act_pos: np.ndarray
    logp_old: np.ndarray

    @classmethod
    def pack(cls, ts: Sequence[Transition]) -> "AgentBatch":
        lens = np.array([len(t.offsets) for t in ts], dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(lens + 1)])
        seg = np.repeat(np.arange(len(ts)), lens)
        cand_pos = np.concatenate([starts[b] + np.arange(n) for b, n in enumerate(lens)]) if lens.sum() else np.zeros(0, np.int64)
        feat_dim = ts[0].feats.shape[1] if ts[0].feats.ndim == 2 else 0
        feats = np.concatenate([t.feats.reshape(-1, feat_dim) for t in ts]) if lens.sum() else np.zeros((0, feat_dim))
        return cls(
            obs=np.stack([t.obs for t in ts]),
            feats=feats,
            seg=seg,
            offsets=np.concatenate([t.offsets for t in ts]) if lens.sum() else np.zeros(0),
            starts=starts,
            cand_pos=cand_pos.astype(np.int64),
            stop_pos=starts[1:] - 1,
            mask=np.concatenate([t.mask for t in ts]),
            act_pos=starts[:-1] + np.array([t.action for t in ts]),
            logp_old=np.array([t.logp for t in ts]),
        )

    def logits(self, actor) -> tuple[np.ndarray, dict]:
        cand, stop, cache = actor.forward(self.obs, self.feats, self.seg)
        full = np.zeros(self.starts[-1])
        full[self.cand_pos] = cand + self.offsets
        full[self.stop_pos] = stop
        return full, cache


def ppo_actor_loss(batch: AgentBatch, full_logits: np.ndarray, adv: np.ndarray, clip: float, ent_coef: float
                   ) -> tuple[float, float, np.ndarray, dict[str, float]]:
    """Clipped surrogate loss (to minimize), mean entropy, and d loss / d logits."""
    B = len(adv)
    logp, p = segment_log_softmax(full_logits, batch.mask, batch.starts)
    logp_safe = np.where(batch.mask, logp, 0.0)
    ratio = np.exp(logp[batch.act_pos] - batch.logp_old)
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    surr = np.minimum(s1, s2)
    ent_terms = p * logp_safe
    lens = np.diff(batch.starts)
    H = -np.add.reduceat(ent_terms, batch.starts[:-1])
    loss = -surr.mean() - ent_coef * H.mean()
    active = (s1 <= s2).astype(float)
    g = -(ratio * adv * active) / B  # d loss / d logp[action]
    d = -np.repeat(g, lens) * p
    d[batch.act_pos] += g
    d += (ent_coef / B) * p * (logp_safe + np.repeat(H, lens))
    d = np.where(batch.mask, d, 0.0)
    info = {"clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip)), "approx_kl": float(np.mean(batch.logp_old - logp[batch.act_pos]))}
    return float(loss), float(H.mean()), d, info


# --- configuration and the loop -----------------------------------------

@dataclass
class TrainConfig:
    iterations: int = 100
    episodes_per_iter: int = 64
    max_transitions: int | None = None
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    ent_coef: float = 0.01
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    gamma: float = 1.0
    eta: tuple[float, float, float] = (0.02, 0.02, 0.002)
    pid: tuple[float, float, float] | None = None
    lambda_max: float = 10.0
    lambda_init: tuple[float, float, float] = (0.0, 0.0, 0.0)
    variant: str = "lcmappo"
    fixed_lambda: tuple[float, float, float] = (0.1, 0.1, 0.1)
    mode: str = "cap"
    budgets: tuple[int, int, int] = (64, 64, 4096)
    critic_epochs: int = 4
    critic_aux: float = 0.1
    cost_scale: tuple[float, float, float] = (8.0, 8.0, 64.0)
    max_grad_norm: float = 0.5
    freeze_fusion: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.clip <= 0:
            raise ValueError("clip epsilon must be > 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.mode not in ("cap", "price"):
            raise ValueError("mode must be cap or price")


@dataclass
class Learner:
    actors: ActorSet
    critic: CriticBundle
    duals: DualState
    config: TrainConfig
    actor_opt: dict[str, Adam] = field(default_factory=dict)
    critic_opt: Adam | None = None

    @classmethod
    def create(cls, config: TrainConfig) -> "Learner":
        rng = np.random.default_rng(config.seed)
        actors = ActorSet(rng, freeze_fusion=config.freeze_fusion)
        critic = CriticBundle(A.GLOBAL_FEATS, A.ACTION_FEATS, rng)
        lam = config.fixed_lambda if config.variant == "fixed_lambda" else config.lambda_init
        if config.variant == "mappo":
            lam = (0.0, 0.0, 0.0)
        eta = config.eta
        pid = PidGains(*config.pid) if config.pid else None
        if config.variant == "rcpo":
            duals = DualState(np.array([lam[0], 0.0, 0.0]), eta[0], config.lambda_max, pid)
        else:
            duals = DualState(np.array(lam, dtype=float), np.array(eta), config.lambda_max, pid)
        ln = cls(actors, critic, duals, config)
        ln.actor_opt = {a: Adam(actors.actor(a).named_params(), config.lr_actor, max_grad_norm=config.max_grad_norm)
                        for a in AGENTS}
        ln.critic_opt = Adam(critic.named_params(), config.lr_critic, max_grad_norm=config.max_grad_norm)
        return ln

    @property
    def cost_scale(self) -> np.ndarray:
        return np.asarray(self.config.cost_scale, dtype=float)

    @property
    def budgets(self) -> Budgets:
        return Budgets(*self.config.budgets)

    def prices(self) -> np.ndarray:
        """Per-resource prices the agents see and the shaping uses."""
        if self.config.variant == "rcpo":
            return self.duals.lam[0] / np.maximum(np.asarray(self.config.budgets, dtype=float), 1.0)
        return self.duals.lam.copy()

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"actor.{k}": v for k, v in self.actors.named_params().items()}
        out.update({f"critic.{k}": v for k, v in self.critic.named_params().items()})
        return out


def collect_rollouts(
    actors: Any,
    lam: Sequence[float] | np.ndarray,
    dataset: Dataset,
    n_episodes: int,
    seed: int,
    mode: str = "cap",
    budgets: Budgets | None = None,
    config: EpisodeConfig | None = None,
) -> Buffer:
    """Sample ``n_episodes`` episodes with the current actors; reproducible from ``seed``."""
    buf = Buffer()
    if n_episodes <= 0:
        return buf
    prices = Prices(*map(float, lam))
    pick = np.random.default_rng([seed, 7919])
    for ep in range(n_episodes):
        ex_idx = int(pick.integers(len(dataset.examples)))
        start = len(buf.transitions)

        def hook(agent_idx, d, glob, joint, idx, logp, delta, _ep=ep):
            buf.transitions.append(Transition(
                agent_idx, d.obs, d.feats, d.offsets, d.mask, idx, logp, glob, joint, d.critic_feats,
                np.asarray(delta, dtype=float), episode=_ep))

        ep_seed = int(np.random.SeedSequence([seed, ep]).generate_state(1)[0])
        res = run_episode(dataset.graph, dataset.examples[ex_idx], actors, mode=mode,
                          budgets=budgets if mode == "cap" else None, prices=prices,
                          seed=ep_seed, greedy=False, config=config, hook=hook)
        n = len(buf.transitions) - start
        if n:
            last = buf.transitions[-1]
            last.reward = float(res.em)
            last.terminal = True
            spent = np.sum([t.costs for t in buf.transitions[start:]], axis=0)
            last.costs = last.costs + (res.counters.as_array() - spent)
        buf.episodes.append(EpisodeSummary(ep, ex_idx, float(res.em), res.counters.as_array(), n))
    return buf


def critic_update(ln: Learner, buffer: Buffer, rng: np.random.Generator) -> float:
    ts = buffer.transitions
    targets = head_targets(buffer, ln.cost_scale)
    glob = np.stack([t.glob for t in ts])
    joint = np.stack([t.joint for t in ts])
    agent = np.array([t.agent for t in ts])
    cfg = ln.config
    losses = []
    for _ in range(cfg.critic_epochs):
        for mb in _minibatches(len(ts), cfg.minibatch, rng):
            mixed, U, cache = ln.critic.forward(glob[mb], joint[mb])
            y = targets[mb]
            B = len(mb)
            err = mixed - y
            acting = U[np.arange(B), agent[mb]]
            aux = acting - y
            loss = float(np.mean(err ** 2) + cfg.critic_aux * np.mean(aux ** 2))
            if not np.isfinite(loss):
                raise TrainingError("non-finite critic loss")
            d_mixed = 2.0 * err / err.size
            d_u = np.zeros_like(U)
            d_u[np.arange(B), agent[mb]] = cfg.critic_aux * 2.0 * aux / aux.size
            grads = ln.critic.backward(cache, d_mixed, d_u)
            ln.critic_opt.step(grads)
            losses.append(loss)
    return float(np.mean(losses)) if losses else 0.0


def batch_advantages(ln: Learner, buffer: Buffer) -> np.ndarray:
    """Counterfactual advantages for every transition, vectorized per agent."""
    ts = buffer.transitions
    adv = np.zeros(len(ts))
    coef = head_coefficients(ln.prices(), ln.cost_scale)
    for i, agent in enumerate(AGENTS):
        idx = [k for k, t in enumerate(ts) if t.agent == i]
        if not idx:
            continue
        sub = [ts[k] for k in idx]
        batch = AgentBatch.pack(sub)
        full, _ = batch.logits(ln.actors.actor(agent))
        _, probs = segment_log_softmax(full, batch.mask, batch.starts)
        glob = np.stack([t.glob for t in sub])
        cand = np.concatenate([t.cand_critic for t in sub])
        owner = np.repeat(np.arange(len(sub)), np.diff(batch.starts))
        U, _ = ln.critic.utility(i, glob[owner], cand)
        w_raw, _, _ = ln.critic.mixer(glob)
        w = np.abs(w_raw[:, :, i])  # (B, heads)
        q = (U * w[owner]) @ coef
        base = np.add.reduceat(probs * q, batch.starts[:-1])
        adv[idx] = q[batch.act_pos] - base
    return adv


def ppo_update(ln: Learner, buffer: Buffer, advantages: np.ndarray, rng: np.random.Generator) -> tuple[float, float]:
    """Clipped PPO epochs per agent with per-agent normalized advantages. Returns (loss_pi, entropy)."""
    cfg = ln.config
    ts = buffer.transitions
    losses, ents = [], []
    for i, agent in enumerate(AGENTS):
        idx = np.array([k for k, t in enumerate(ts) if t.agent == i], dtype=np.int64)
        if len(idx) == 0:
            continue
        a = advantages[idx]
        a = (a - a.mean()) / (a.std() + 1e-8)
        actor = ln.actors.actor(agent)
        for _ in range(cfg.epochs):
            for mb in _minibatches(len(idx), cfg.minibatch, rng):
                batch = AgentBatch.pack([ts[k] for k in idx[mb]])
                full, cache = batch.logits(actor)
                loss, ent, d, _ = ppo_actor_loss(batch, full, a[mb], cfg.clip, cfg.ent_coef)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite policy loss for {agent}")
                grads = actor.backward_full(cache, d, batch.cand_pos, batch.stop_pos)
                ln.actor_opt[agent].step(grads)
                losses.append(loss)
                ents.append(ent)
    return (float(np.mean(losses)) if losses else 0.0, float(np.mean(ents)) if ents else 0.0)


def _minibatches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def iteration_row(it: int, ln: Learner, buffer: Buffer, loss_pi: float, loss_v: float, entropy: float) -> dict[str, float]:
    costs = np.array([e.costs for e in buffer.episodes]).reshape(-1, 3)
    beta = np.asarray(ln.config.budgets, dtype=float)
    viol = np.maximum(0.0, costs - beta) / np.maximum(beta, 1.0)
    lam = ln.prices()
    mean = costs.mean(axis=0) if len(costs) else np.zeros(3)
    return {
        "iter": it, "em": float(np.mean([e.r_acc for e in buffer.episodes])) if buffer.episodes else 0.0,
        "c_edge": mean[0], "c_lat": mean[1], "c_tok": mean[2],
        "lambda_edge": lam[0], "lambda_lat": lam[1], "lambda_tok": lam[2],
        "feasibility": float(np.all(costs <= beta, axis=1).mean()) if len(costs) else 1.0,
        "viol_edge": float(viol[:, 0].mean()) if len(costs) else 0.0,
        "viol_lat": float(viol[:, 1].mean()) if len(costs) else 0.0,
        "viol_tok": float(viol[:, 2].mean()) if len(costs) else 0.0,
        "loss_pi": loss_pi, "loss_v": loss_v, "entropy": entropy,
    }


def train_iteration(ln: Learner, dataset: Dataset, it: int, episode_config: EpisodeConfig | None = None) -> tuple[dict[str, float], Buffer]:
    cfg = ln.config
    rng = np.random.default_rng([cfg.seed, it, 17])
    budgets = ln.budgets
    buf = collect_rollouts(ln.actors, ln.prices(), dataset, cfg.episodes_per_iter, seed=cfg.seed * 1_000_003 + it,
                           mode=cfg.mode, budgets=budgets, config=episode_config)
    if len(buf) == 0:
        return iteration_row(it, ln, buf, 0.0, 0.0, 0.0), buf
    loss_v = critic_update(ln, buf, rng)
    adv = batch_advantages(ln, buf)
    loss_pi, ent = ppo_update(ln, buf, adv, rng)
    row = iteration_row(it, ln, buf, loss_pi, loss_v, ent)
    if not all(np.isfinite(v) for v in row.values()):
        raise TrainingError(f"non-finite metrics at iteration {it}: {row}")
    mean_c = buf.mean_costs()
    beta = np.asarray(cfg.budgets, dtype=float)
    if cfg.variant == "lcmappo":
        ln.duals = dual_update(ln.duals, mean_c, beta)
    elif cfg.variant == "rcpo":
        norm = np.mean([np.sum(e.costs / np.maximum(beta, 1.0)) for e in buf.episodes])
        ln.duals = dual_update(ln.duals, [norm, 0.0, 0.0], [3.0, 0.0, 0.0], active=(True, False, False))
    return row, buf


def train(config: TrainConfig, dataset: Dataset, episode_config: EpisodeConfig | None = None,
          learner: Learner | None = None, callback=None) -> tuple[Learner, list[dict[str, float]]]:
    """Iterate collect -> critic -> advantages -> PPO -> duals; returns the learner and metric rows."""
    ln = learner or Learner.create(config)
    rows: list[dict[str, float]] = []
    seen = 0
    for it in range(config.iterations):
        if config.max_transitions is not None and seen >= config.max_transitions:
            break
        row, buf = train_iteration(ln, dataset, it, episode_config)
        seen += len(buf)
        rows.append(row)
        log.info("iter %d em=%.3f costs=(%.2f, %.2f, %.1f) lam=(%.3f, %.3f, %.4f) n=%d",
                 it, row["em"], row["c_edge"], row["c_lat"], row["c_tok"],
                 row["lambda_edge"], row["lambda_lat"], row["lambda_tok"], seen)
        if callback is not None:
            callback(it, row, ln, seen)
    return ln, rows


# --- checkpoints ----------------------------------------------------------

def save_learner(path, ln: Learner, meta: dict[str, Any] | None = None) -> None:
    from .neural import save_checkpoint

    cfg = asdict(ln.config)
    save_checkpoint(path, ln.tensors(), {"train": cfg, "duals": ln.duals.to_dict(), **(meta or {})})


def load_learner(path) -> tuple[Learner, dict[str, Any]]:
    from .neural import load_checkpoint

    tensors, meta = load_checkpoint(path)
    cfg = dict(meta["train"])
    for k in ("eta", "lambda_init", "fixed_lambda", "budgets", "cost_scale"):
        cfg[k] = tuple(cfg[k])
    if cfg.get("pid") is not None:
        cfg["pid"] = tuple(cfg["pid"])
    ln = Learner.create(TrainConfig(**cfg))
    ln.actors.load_params({k[len("actor."):]: v for k, v in tensors.items() if k.startswith("actor.")})
    ln.critic.load_params({k[len("critic."):]: v for k, v in tensors.items() if k.startswith("critic.")})
    ln.duals = DualState.from_dict(meta["duals"])
    return ln, meta


def parameter_checksum(ln: Learner) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(ln.tensors().items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    h.update(ln.duals.lam.tobytes())
    return h.hexdigest()
