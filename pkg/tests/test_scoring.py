import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clause.kg import GraphError, load_triples
from clause.scoring import EdgeFeatures, QuestionScorer, degree_prior, edge_features, fused_score
from clause.text import cosine, embed_text, sim01, tokenize


def test_tokenize_casefolds():
    assert tokenize("Brian BACKER, 1985!") == ["brian", "backer", "1985"]


def test_empty_embedding_is_zero():
    v = embed_text("")
    assert v.shape == (128,)
    assert not v.any()


def test_repeated_tokens_same_direction():
    assert np.allclose(embed_text("a a"), embed_text("a"))


def test_unit_norm_and_deterministic():
    v = embed_text("Moving Violations starred actors")
    assert abs(np.linalg.norm(v) - 1.0) < 1e-6
    assert np.array_equal(v, embed_text(["moving", "violations", "STARRED", "actors"]))


def test_self_similarity():
    v = embed_text("Jennifer Tilly")
    assert cosine(v, v) == pytest.approx(1.0)
    assert sim01(v, v) == pytest.approx(1.0)
    assert sim01(v, np.zeros(128)) == 0.5


def test_fused_examples():
    phi = EdgeFeatures(0.8, 0.6, 0.4, 0.5)
    assert fused_score(phi, [0.25] * 4) == pytest.approx(0.575)
    assert fused_score(phi, [1, 0, 0, 0]) == 0.8


def test_fused_random_matches_sum(rng):
    for _ in range(50):
        phi, w = rng.random(4), rng.normal(size=4)
        assert fused_score(phi, w) == pytest.approx(sum(p * x for p, x in zip(phi, w)), abs=1e-12)


def test_fused_linear_in_weights(rng):
    phi, w1, w2 = rng.random(4), rng.normal(size=4), rng.normal(size=4)
    a, b = 0.3, -1.7
    assert fused_score(phi, a * w1 + b * w2) == pytest.approx(a * fused_score(phi, w1) + b * fused_score(phi, w2))


def test_degree_prior():
    assert degree_prior(0) == 1.0
    assert degree_prior(4) == pytest.approx(1 / (1 + math.log(5)))


FIXTURE = """\
red fox|hunts|brown rabbit
brown rabbit|eats|green clover
red fox|lives_in|dark forest
dark forest|contains|green clover
owl|hunts|brown rabbit
"""


def _oracle(q, s, r, o, g):
    """Independent recomputation of each feature from raw names."""
    def s01(a, b):
        va, vb = embed_text(a), embed_text(b)
        if not va.any() or not vb.any():
            return 0.5
        return 0.5 * (1 + float(va @ vb) / (np.linalg.norm(va) * np.linalg.norm(vb)))

    ent = max(s01(q, s), s01(q, o))
    rel = s01(q, r)
    nbrs = []
    for s2, _, o2 in (line.split("|") for line in FIXTURE.strip().splitlines()):
        if s2 == o and o2 not in nbrs:
            nbrs.append(o2)
    for s2, _, o2 in (line.split("|") for line in FIXTURE.strip().splitlines()):
        if o2 == o and s2 not in nbrs:
            nbrs.append(s2)
    # neighbor lists are ordered by the graph; the mean does not depend on order
    nbr = float(np.mean([s01(q, n) for n in nbrs])) if nbrs else 0.0
    degree = sum(o in (a, c) for a, _, c in (line.split("|") for line in FIXTURE.strip().splitlines()))
    deg = 1.0 / (1.0 + math.log(1 + degree))
    return np.array([ent, rel, nbr, deg])


def test_features_match_scalar_oracle():
    g = load_triples(FIXTURE)
    q = "what does the red fox hunts in the forest"
    scorer = QuestionScorer(g, q)
    all_feats = scorer.features(range(g.n_triples))
    for tid in range(g.n_triples):
        t = g.triple(tid)
        s, r, o = g.entity_names[t.subject], g.relation_names[t.relation], g.entity_names[t.object]
        want = _oracle(q, s, r, o, g)
        assert np.allclose(edge_features(q, tid, g).as_array(), want, atol=1e-12)
        assert np.allclose(all_feats[tid], want, atol=1e-12)


def test_isolated_neighbor_mean_is_zero():
    # The object's only neighbor is the subject, so phi_nbr averages one similarity.
    g = load_triples("a|r|b\n")
    f = edge_features("a", 0, g)
    assert f.phi_nbr == pytest.approx(sim01(embed_text("a"), embed_text("a")))
    assert f.phi_deg == pytest.approx(1 / (1 + math.log(2)))


def test_invalid_triple():
    g = load_triples(FIXTURE)
    with pytest.raises(GraphError):
        edge_features("q", 99, g)
    with pytest.raises(GraphError):
        QuestionScorer(g, "q").features([99])


def test_rel_rank_follows_mention_order():
    g = load_triples("a|directed_by|b\nb|starred_actors|c\n")
    sc = QuestionScorer(g, "from a follow starred_actors then directed_by")
    assert sc.rel_rank[g.relation_id("starred_actors")] == 1
    assert sc.rel_rank[g.relation_id("directed_by")] == 2
    assert sc.rel_position[g.relation_id("directed_by")] == 1.0


_words = st.text(alphabet="abcdefgh ", min_size=0, max_size=12)


@settings(max_examples=60, deadline=None)
@given(
    edges=st.lists(st.tuples(_words, st.sampled_from(["r", "s t", "u_v"]), _words), min_size=1, max_size=10),
    question=_words,
)
def test_features_in_unit_interval(edges, question):
    lines = [f"{s.strip() or 'x'}|{r}|{o.strip() or 'y'}" for s, r, o in edges]
    g = load_triples("\n".join(lines))
    q = question if tokenize(question) else "q"
    phi = QuestionScorer(g, q).features(range(g.n_triples))
    assert np.all(phi >= 0.0) and np.all(phi <= 1.0)
    assert np.all(np.isfinite(phi))
