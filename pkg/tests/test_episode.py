import copy

import numpy as np
import pytest

from clause import agents as A
from clause.episode import (
    AuditError,
    BudgetError,
    Budgets,
    EpisodeConfig,
    Prices,
    counters_from_trace,
    new_episode,
    replay_trace,
)
from clause.harness import run_episode
from clause.kg import GraphError, KnowledgeGraph
from clause.policy import RandomPolicy

Q = "Who co-starred with Brian Backer?"


def test_initial_budget_vector(case_kb):
    s = new_episode(case_kb, Q, budgets=Budgets(4, 4, 64))
    assert np.array_equal(s.budget_vector()[:3], np.ones(3))
    assert s.counters.as_dict() == {"edge": 0, "lat": 0, "tok": 0}


def test_case_study_frontier(case_kb):
    s = new_episode(case_kb, Q, budgets=Budgets(4, 4, 64))
    assert list(s.frontier) == [case_kb.entity_id("Brian Backer")]
    assert s.edges == {}


def test_zero_edge_budget_is_stop_only(case_kb):
    s = new_episode(case_kb, Q, budgets=Budgets(0, 4, 64))
    d = A.architect_decision(s, np.full(4, 0.25), 2)
    assert d.n > 0
    assert d.only_stop()
    assert d.mask[d.stop_index]


def test_charge_accumulates(case_kb):
    s = new_episode(case_kb, Q, budgets=Budgets(4, 4, 512))
    s.charge("tok", 30)
    s.charge("tok", 6)
    assert s.counters.tok == 36


def test_charge_zero_raises(case_kb):
    s = new_episode(case_kb, Q, budgets=Budgets(4, 4, 512))
    with pytest.raises(ValueError):
        s.charge("tok", 0)


def test_cap_overflow_raises(case_kb):
    s = new_episode(case_kb, Q, budgets=Budgets(4, 2, 512))
    s.charge("lat", 2)
    with pytest.raises(BudgetError):
        s.charge("lat", 1)
    assert s.counters.lat == 2


def test_price_mode_has_no_caps(case_kb):
    s = new_episode(case_kb, Q, mode="price", prices=Prices(0.1, 0.1, 0.01))
    s.charge("lat", 1000)
    assert not s.exhausted()
    assert np.array_equal(s.budget_vector(), [1, 1, 1, 0.1, 0.1, 0.01])


def test_bad_construction(case_kb):
    empty = KnowledgeGraph([], [], np.zeros((0, 3)))
    with pytest.raises(GraphError):
        new_episode(empty, Q, budgets=Budgets(1, 1, 1))
    with pytest.raises(ValueError):
        new_episode(case_kb, Q, mode="cap")
    with pytest.raises(ValueError):
        new_episode(case_kb, Q, mode="price")
    with pytest.raises(ValueError):
        Budgets(-1, 0, 0)


def test_empty_trace_replays_to_zero(case_kb):
    s = new_episode(case_kb, Q, budgets=Budgets(4, 4, 64))
    counters, edges = replay_trace(case_kb, s.trace_document())
    assert counters.as_dict() == {"edge": 0, "lat": 0, "tok": 0}
    assert edges == set()


def _random_episodes(tasks, n, budgets=None, mode="cap", prices=None):
    pol = RandomPolicy()
    for k in range(n):
        ex = tasks.examples[k % len(tasks.examples)]
        yield run_episode(tasks.graph, ex, pol, mode=mode, budgets=budgets, prices=prices, seed=k, greedy=False)


def test_replay_matches_live(small_tasks):
    for res in _random_episodes(small_tasks, 20, Budgets(6, 6, 40)):
        doc = res.trace
        counters, edges = replay_trace(small_tasks.graph, doc)
        assert counters == res.state.counters
        assert edges == set(res.state.edges)
        assert counters_from_trace(res.state.trace) == res.state.counters


def _episode_with_curation(tasks):
    for res in _random_episodes(tasks, 50):
        if any(e.kind == "curate" for e in res.state.trace):
            return res
    raise AssertionError("no random episode curated anything")


def test_forged_curate_fails_audit(small_tasks):
    doc = _episode_with_curation(small_tasks).trace
    forged = copy.deepcopy(doc)
    i = next(k for k, e in enumerate(forged["events"]) if e["kind"] == "curate")
    missing = next(t for t in range(small_tasks.graph.n_triples) if t not in forged["final"]["subgraph"])
    forged["events"][i]["payload"]["provenance"] = [missing]
    with pytest.raises(AuditError) as exc:
        replay_trace(small_tasks.graph, forged)
    assert exc.value.index == i


def test_unknown_triple_fails_audit(small_tasks):
    doc = copy.deepcopy(_episode_with_curation(small_tasks).trace)
    i = next(k for k, e in enumerate(doc["events"]) if e["kind"] == "edit")
    doc["events"][i]["payload"]["triple"] = 10 ** 6
    with pytest.raises(AuditError) as exc:
        replay_trace(small_tasks.graph, doc)
    assert exc.value.index == i


def test_tampered_counters_fail_audit(small_tasks):
    doc = copy.deepcopy(_episode_with_curation(small_tasks).trace)
    doc["final"]["counters"]["tok"] += 1
    with pytest.raises(AuditError):
        replay_trace(small_tasks.graph, doc)


def test_terminal_predicate(small_tasks):
    for res in _random_episodes(small_tasks, 30, Budgets(5, 5, 30)):
        s = res.state
        assert s.is_terminal()
        assert all(s.stopped.values()) or s.exhausted() or s.round >= s.config.max_rounds


def test_trace_json_fields(small_tasks):
    res = next(_random_episodes(small_tasks, 1))
    for ev in res.trace["events"]:
        assert set(ev) == {"kind", "agent", "round", "payload", "cost"}
        assert set(ev["cost"]) == {"edge", "lat", "tok"}


def test_lat_counts_all_actions_flag(small_tasks):
    ex = small_tasks.examples[0]
    cfg = EpisodeConfig(lat_counts_all_actions=True)
    res = run_episode(small_tasks.graph, ex, RandomPolicy(), budgets=Budgets(64, 64, 4096), seed=1, greedy=False, config=cfg)
    ev = res.state.trace
    n_actions = sum(e.kind in ("edit", "hop", "backtrack", "curate") for e in ev)
    assert res.state.counters.lat == n_actions
    replay_trace(small_tasks.graph, res.trace)
