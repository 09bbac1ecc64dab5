"""Policies that turn a :class:`~clause.agents.Decision` into an action index."""

from __future__ import annotations

from typing import Callable, Protocol

import numpy as np

from .agents import ARCH_FEATS, ARCH_OBS, CUR_FEATS, CUR_OBS, NAV_FEATS, NAV_OBS, Decision
from .episode import AGENTS, EpisodeState
from .neural import ActorNet, Module, actor_forward


class Policy(Protocol):
    def decide(self, d: Decision, state: EpisodeState, rng: np.random.Generator, greedy: bool) -> tuple[int, float]:
        ...


def sample_index(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(p) - 1))


class ActorSet(Module):
    """The three candidate-conditioned actors."""

    def __init__(self, rng: np.random.Generator, trunk=(64, 64), scorer_hidden: int = 32, freeze_fusion: bool = False):
        super().__init__()
        self.children["architect"] = ActorNet(ARCH_OBS, ARCH_FEATS, rng, trunk, scorer_hidden, fusion=4)
        self.children["navigator"] = ActorNet(NAV_OBS, NAV_FEATS, rng, trunk, scorer_hidden)
        self.children["curator"] = ActorNet(CUR_OBS, CUR_FEATS, rng, trunk, scorer_hidden)
        if freeze_fusion:
            self.children["architect"].frozen.add("fusion")

    def actor(self, agent: str) -> ActorNet:
        return self.children[agent]  # type: ignore[return-value]

    @property
    def fusion_weights(self) -> np.ndarray:
        return self.actor("architect").fusion_weights

    def distribution(self, d: Decision) -> tuple[np.ndarray, np.ndarray]:
        return actor_forward(self.actor(d.agent), d.obs, d.feats, d.mask, d.offsets)

    def decide(self, d: Decision, state: EpisodeState, rng: np.random.Generator, greedy: bool) -> tuple[int, float]:
        p, logp = self.distribution(d)
        idx = int(np.argmax(p)) if greedy else sample_index(p, rng)
        return idx, float(logp[idx])

    def candidate_scores(self, d: Decision) -> np.ndarray:
        """Raw candidate logits (without the stop entry)."""
        actor = self.actor(d.agent)
        cand, _, _ = actor.forward(d.obs[None, :], d.feats, np.zeros(d.n, dtype=np.int64))
        return cand + d.offsets


class RandomPolicy:
    """Uniform over unmasked actions (stop included)."""

    fusion_weights = np.full(4, 0.25)

    def decide(self, d: Decision, state: EpisodeState, rng: np.random.Generator, greedy: bool) -> tuple[int, float]:
        idx = np.flatnonzero(d.mask)
        choice = int(idx[rng.integers(len(idx))])
        return choice, float(-np.log(len(idx)))

    def candidate_scores(self, d: Decision) -> np.ndarray:
        return d.feats[:, 0] + d.offsets if d.n else np.zeros(0)


class ScriptedPolicy:
    """Wraps ``fn(decision, state) -> index``; used for hand-written oracle policies in tests."""

    fusion_weights = np.full(4, 0.25)

    def __init__(self, fn: Callable[[Decision, EpisodeState], int]):
        self.fn = fn

    def decide(self, d: Decision, state: EpisodeState, rng: np.random.Generator, greedy: bool) -> tuple[int, float]:
        idx = int(self.fn(d, state))
        if not d.mask[idx]:
            raise ValueError(f"scripted policy chose masked action {idx} for {d.agent}")
        return idx, 0.0

    def candidate_scores(self, d: Decision) -> np.ndarray:
        return d.feats[:, 0] + d.offsets if d.n else np.zeros(0)


__all__ = ["AGENTS", "ActorSet", "Policy", "RandomPolicy", "ScriptedPolicy", "sample_index"]
