import numpy as np
import pytest

from clause.agents import ACTION_FEATS, GLOBAL_FEATS
from clause.episode import Budgets
from clause.lcmappo import (
    AgentBatch,
    Buffer,
    DualState,
    EpisodeSummary,
    Learner,
    PidGains,
    TrainConfig,
    Transition,
    batch_advantages,
    coma_advantage,
    collect_rollouts,
    counterfactual_advantages,
    critic_update,
    dual_update,
    head_coefficients,
    load_learner,
    parameter_checksum,
    ppo_actor_loss,
    save_learner,
    shaped_returns,
    train,
)
from clause.neural import CriticBundle, masked_softmax, segment_log_softmax


def _transition(agent=0, costs=(0, 0, 0), reward=0.0, n=2, action=0, rng=None):
    rng = rng or np.random.default_rng(0)
    return Transition(
        agent=agent, obs=np.zeros(3), feats=np.zeros((n, 2)), offsets=np.zeros(n), mask=np.ones(n + 1, bool),
        action=action, logp=0.0, glob=rng.normal(size=GLOBAL_FEATS), joint=rng.normal(size=(3, ACTION_FEATS)),
        cand_critic=rng.normal(size=(n + 1, ACTION_FEATS)), costs=np.asarray(costs, dtype=float), reward=reward,
    )


def _buffer(episodes):
    buf = Buffer()
    for e, steps in enumerate(episodes):
        for costs, r in steps:
            buf.transitions.append(_transition(costs=costs, reward=r))
        buf.episodes.append(EpisodeSummary(e, e, steps[-1][1], np.sum([c for c, _ in steps], axis=0), len(steps)))
    return buf


# --- returns ---------------------------------------------------------------

def test_zero_prices_give_task_returns():
    buf = _buffer([[((1, 0, 0), 0.0), ((0, 1, 6), 1.0)], [((0, 0, 3), 0.0)]])
    assert np.array_equal(shaped_returns(buf, [0, 0, 0]), [1.0, 1.0, 0.0])


def test_single_step_shaped_return():
    buf = _buffer([[((0, 0, 6), 1.0)]])
    assert shaped_returns(buf, [0.0, 0.0, 0.05])[0] == pytest.approx(0.7)


def test_shaped_returns_suffix_oracle(rng):
    eps = []
    for _ in range(4):
        T = int(rng.integers(1, 9))
        eps.append([(tuple(rng.integers(0, 5, size=3)), float(t == T - 1) * float(rng.integers(0, 2))) for t in range(T)])
    buf = _buffer(eps)
    lam = rng.random(3)
    for gamma in (1.0, 0.9):
        got = shaped_returns(buf, lam, gamma)
        want, k = [], 0
        for steps in eps:
            for t in range(len(steps)):
                want.append(sum(gamma ** (u - t) * (steps[u][1] - np.dot(lam, steps[u][0])) for u in range(t, len(steps))))
        assert np.allclose(got, want)


# --- counterfactual advantages --------------------------------------------

def test_uniform_two_actions():
    assert np.allclose(counterfactual_advantages([1.0, 0.0], [0.5, 0.5]), [0.5, -0.5])


def test_deterministic_policy_zero_advantage():
    assert counterfactual_advantages([3.0, -1.0, 2.0], [0.0, 1.0, 0.0])[1] == 0.0


def test_three_action_marginalization(rng):
    for _ in range(20):
        q = rng.normal(size=3)
        p = rng.dirichlet(np.ones(3))
        base = p[0] * q[0] + p[1] * q[1] + p[2] * q[2]
        adv = counterfactual_advantages(q, p)
        assert np.allclose(adv, [q[0] - base, q[1] - base, q[2] - base])
        assert abs(np.dot(p, adv)) < 1e-12


def test_coma_swaps_only_own_slot(rng):
    bundle = CriticBundle(GLOBAL_FEATS, ACTION_FEATS, rng)
    for v in bundle.named_params().values():
        v += rng.normal(scale=0.2, size=v.shape)
    t = _transition(agent=1, n=3, action=2, rng=rng)
    lam, scale = np.array([0.1, 0.2, 0.01]), np.array([8.0, 8.0, 64.0])
    probs = rng.dirichlet(np.ones(4))
    _, adv = coma_advantage(bundle, lam, t, probs, scale)
    q = []
    for a in range(4):
        joint = t.joint.copy()
        joint[1] = t.cand_critic[a]
        mixed, _, _ = bundle.forward(t.glob[None], joint[None])
        q.append(mixed[0, 0] - np.dot(lam * scale, mixed[0, 1:]))
    q = np.array(q)
    assert np.allclose(adv, q - probs @ q)


def test_head_coefficients():
    assert np.allclose(head_coefficients(np.array([0.5, 0.0, 0.1]), np.array([8.0, 8.0, 64.0])), [1, -4, 0, -6.4])


# --- PPO loss --------------------------------------------------------------

def _batch(logits_per_decision, actions, logp_old):
    lens = [len(x) for x in logits_per_decision]
    starts = np.concatenate([[0], np.cumsum(lens)])
    full = np.concatenate(logits_per_decision)
    mask = np.ones(len(full), dtype=bool)
    b = AgentBatch(obs=None, feats=None, seg=None, offsets=None, starts=starts, cand_pos=None,
                   stop_pos=starts[1:] - 1, mask=mask, act_pos=starts[:-1] + np.array(actions),
                   logp_old=np.asarray(logp_old, dtype=float))
    return b, full


def test_ratio_one_gives_mean_advantage(rng):
    logits = [rng.normal(size=3), rng.normal(size=4)]
    acts = [0, 2]
    old = [masked_softmax(l, np.ones(len(l), bool))[1][a] for l, a in zip(logits, acts)]
    b, full = _batch(logits, acts, old)
    adv = np.array([0.7, -0.2])
    loss, _, _, _ = ppo_actor_loss(b, full, adv, 0.2, 0.0)
    assert loss == pytest.approx(-adv.mean())


def test_clipped_branch_has_zero_gradient(rng):
    logits = [rng.normal(size=3)]
    eps = 0.2
    logp = masked_softmax(logits[0], np.ones(3, bool))[1][1]
    b, full = _batch(logits, [1], [logp - np.log(1 + 2 * eps)])
    loss, _, d, info = ppo_actor_loss(b, full, np.array([1.0]), eps, 0.0)
    assert loss == pytest.approx(-(1 + eps))
    assert np.array_equal(d, np.zeros(3))
    assert info["clip_frac"] == 1.0


def _scalar_ppo(logits, actions, logp_old, adv, eps, c):
    total, ent = 0.0, 0.0
    for x, a, lo, A in zip(logits, actions, logp_old, adv):
        p = np.exp(x - x.max())
        p /= p.sum()
        r = p[a] / np.exp(lo)
        total += min(r * A, min(max(r, 1 - eps), 1 + eps) * A)
        ent += -sum(pi * np.log(pi) for pi in p)
    n = len(adv)
    return -total / n - c * ent / n


def test_two_transition_hand_oracle(rng):
    logits = [rng.normal(size=3), rng.normal(size=2)]
    acts, old, adv = [2, 0], [-1.3, -0.4], np.array([0.8, -1.1])
    b, full = _batch(logits, acts, old)
    loss, _, d, _ = ppo_actor_loss(b, full, adv, 0.2, 0.01)
    assert loss == pytest.approx(_scalar_ppo(logits, acts, old, adv, 0.2, 0.01), abs=1e-12)
    h = 1e-6
    for i in range(len(full)):
        up, down = full.copy(), full.copy()
        up[i] += h
        down[i] -= h
        fd = (_scalar_ppo([up[:3], up[3:]], acts, old, adv, 0.2, 0.01)
              - _scalar_ppo([down[:3], down[3:]], acts, old, adv, 0.2, 0.01)) / (2 * h)
        assert d[i] == pytest.approx(fd, abs=1e-7)


# --- duals ------------------------------------------------------------------

def test_dual_formula():
    d = dual_update(DualState(np.array([0.2, 0, 0]), eta=0.1), [0.4, 0, 0], [0.5, 0, 0])
    assert d.lam[0] == pytest.approx(0.19)


def test_dual_projection_at_zero():
    d = dual_update(DualState(np.zeros(3), eta=0.1), [0.1, 0.1, 0.1], [0.5, 0.5, 0.5])
    assert np.array_equal(d.lam, np.zeros(3))


def test_dual_upper_clip_and_inactive():
    d = dual_update(DualState(np.array([9.9, 1.0, 1.0]), eta=1.0), [100, 100, 100], [0, 0, 0], active=(True, False, True))
    assert d.lam[0] == 10.0 and d.lam[1] == 1.0


def test_negative_costs_rejected():
    with pytest.raises(ValueError):
        dual_update(DualState(), [-1, 0, 0], [0, 0, 0])


def test_pi_recurrence_oracle():
    gains = PidGains(kp=0.05, ki=0.02, kd=0.01)
    d = DualState(pid=gains)
    excess = 3.0
    integral, prev, traj = 0.0, 0.0, []
    for _ in range(300):
        d = dual_update(d, [5.0 + excess, 0, 0], [5.0, 0, 0])
        integral += excess
        traj.append(min(max(gains.kp * excess + gains.ki * integral + gains.kd * (excess - prev), 0.0), 10.0))
        prev = excess
        assert d.lam[0] == pytest.approx(traj[-1])
    assert traj[-1] == 10.0  # saturates at lambda_max


def test_dual_state_round_trip():
    d = DualState(np.array([0.1, 0.2, 0.3]), pid=PidGains())
    d2 = DualState.from_dict(d.to_dict())
    assert np.array_equal(d.lam, d2.lam) and d2.pid == d.pid


# --- rollouts and training -------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(clip=0.0)
    with pytest.raises(ValueError):
        TrainConfig(gamma=0.0)
    with pytest.raises(ValueError):
        TrainConfig(variant="ppo")


def test_empty_rollout(small_tasks):
    ln = Learner.create(TrainConfig())
    buf = collect_rollouts(ln.actors, np.zeros(3), small_tasks, 0, seed=0)
    assert len(buf) == 0 and buf.episodes == []


def test_rollouts_are_reproducible_and_capped(small_tasks):
    ln = Learner.create(TrainConfig())
    b = Budgets(6, 5, 20)
    a1 = collect_rollouts(ln.actors, np.zeros(3), small_tasks, 6, seed=11, budgets=b)
    a2 = collect_rollouts(ln.actors, np.zeros(3), small_tasks, 6, seed=11, budgets=b)
    assert a1.serialize() == a2.serialize()
    assert a1.serialize() != collect_rollouts(ln.actors, np.zeros(3), small_tasks, 6, seed=12, budgets=b).serialize()
    for e, sl in zip(a1.episodes, a1.episode_slices()):
        assert np.all(e.costs <= b.as_array())
        ts = a1.transitions[sl]
        assert np.array_equal(np.sum([t.costs for t in ts], axis=0), e.costs)
        assert [t.terminal for t in ts] == [False] * (len(ts) - 1) + [True]
        assert all(t.reward == 0 for t in ts[:-1])
        assert all(np.all(t.costs >= 0) for t in ts)


def test_batch_advantages_match_single(small_tasks):
    ln = Learner.create(TrainConfig(seed=2))
    buf = collect_rollouts(ln.actors, np.zeros(3), small_tasks, 3, seed=5)
    lam = np.array([0.1, 0.05, 0.01])
    ln.duals = DualState(lam)
    adv = batch_advantages(ln, buf)
    for k in range(0, len(buf), 5):
        t = buf.transitions[k]
        logits = AgentBatch.pack([t]).logits(ln.actors.actor(("architect", "navigator", "curator")[t.agent]))[0]
        _, p = segment_log_softmax(logits, t.mask, np.array([0, len(t.mask)]))
        a, vec = coma_advantage(ln.critic, lam, t, p, ln.cost_scale)
        assert adv[k] == pytest.approx(a, abs=1e-10)
        assert abs(np.dot(p, vec)) < 1e-10


def test_cost_head_calibration(small_tasks):
    # Frozen initial policy, regression only: full-batch steps, then a lower learning rate.
    ln = Learner.create(TrainConfig(seed=4, critic_epochs=1, minibatch=4096))
    buf = collect_rollouts(ln.actors, np.zeros(3), small_tasks, 32, seed=3)
    rng = np.random.default_rng(0)
    for i in range(600):
        if i == 400:
            ln.critic_opt.lr = 1e-4
        critic_update(ln, buf, rng)
    first = [buf.transitions[sl.start] for sl in buf.episode_slices()]
    mixed, _, _ = ln.critic.forward(np.stack([t.glob for t in first]), np.stack([t.joint for t in first]))
    pred = mixed[:, 1:].mean(axis=0) * ln.cost_scale
    emp = buf.mean_costs()
    assert np.all(np.abs(pred - emp) <= 0.1 * emp), (pred, emp)


@pytest.mark.parametrize("variant", ["mappo", "fixed_lambda"])
def test_variant_prices(small_tasks, variant):
    cfg = TrainConfig(iterations=3, episodes_per_iter=4, variant=variant, budgets=(2, 2, 10), seed=1)
    _, rows = train(cfg, small_tasks)
    lam = np.array([[r["lambda_edge"], r["lambda_lat"], r["lambda_tok"]] for r in rows])
    want = 0.0 if variant == "mappo" else 0.1
    assert np.all(lam == want)


def test_rcpo_single_multiplier(small_tasks):
    cfg = TrainConfig(iterations=3, episodes_per_iter=4, variant="rcpo", mode="price", budgets=(2, 2, 10), eta=(0.5, 0.5, 0.5), seed=1)
    ln, rows = train(cfg, small_tasks)
    assert ln.duals.lam[0] > 0 and ln.duals.lam[1] == ln.duals.lam[2] == 0
    assert np.allclose(ln.prices(), ln.duals.lam[0] / np.array([2, 2, 10]))


def test_tight_budget_raises_price(small_tasks):
    cfg = TrainConfig(iterations=12, episodes_per_iter=16, mode="price", budgets=(2, 64, 4096),
                      eta=(0.05, 0.02, 0.002), seed=0)
    _, rows = train(cfg, small_tasks)
    lam = [r["lambda_edge"] for r in rows]
    assert all(x >= 0 for x in lam)
    assert lam[-1] > 0.0
    early = np.mean([r["c_edge"] for r in rows[:3]])
    late = np.mean([r["c_edge"] for r in rows[-3:]])
    assert late < early


def test_learner_round_trip(tmp_path, small_tasks):
    cfg = TrainConfig(iterations=1, episodes_per_iter=2, pid=(0.1, 0.01, 0.0), seed=3)
    ln, _ = train(cfg, small_tasks)
    save_learner(tmp_path / "ck.bin", ln, {"note": 1})
    ln2, meta = load_learner(tmp_path / "ck.bin")
    assert meta["note"] == 1
    assert parameter_checksum(ln) == parameter_checksum(ln2)
    assert ln2.config == ln.config
    assert ln2.duals.pid == ln.duals.pid


def test_training_is_deterministic(small_tasks):
    cfg = TrainConfig(iterations=2, episodes_per_iter=3, seed=9)
    a, ra = train(cfg, small_tasks)
    b, rb = train(cfg, small_tasks)
    assert parameter_checksum(a) == parameter_checksum(b)
    assert ra == rb
