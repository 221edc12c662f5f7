import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gda.core import AttackConfig, Caption, Image, ImageTextPair, substitution_distance
from gda.text_attack import (
    CandidatePool,
    ExclusionSet,
    NoViableCandidate,
    StaticMlmProvider,
    SubstitutionRecord,
    SynonymLexicon,
    TextResources,
    attack_text_stage,
    build_candidate_pool,
    caption_loss,
    evaluate_substitution_loss,
    globally_aware_replace,
    greedy_top1_replace,
    importance_scores,
    rank_positions,
    score_token_importance,
    select_global_substitution,
)
from gda.resources import read_text, STOPWORDS_FILE
from oracles import brute_force_gar, cos, mask_ranking, pool_by_sets

BLANK = Image(np.random.default_rng(11).uniform(0.2, 0.8, (3, 8, 8)), "img")
STOP = ExclusionSet(frozenset({"a", "the", "on", "in"}))


def pair_of(*texts, image=BLANK, pair_id="p"):
    return ImageTextPair(image, tuple(Caption.from_text(t) for t in texts), pair_id)


def test_default_stopword_list_has_fifty_unique_words():
    words = read_text(STOPWORDS_FILE).split()
    assert len(words) == 50 and len(set(words)) == 50


def test_exclusion_membership():
    ex = ExclusionSet(frozenset({"the"}))
    assert "the" in ex
    assert "##ing" in ex
    assert "dog-like" in ex and "[UNK]" in ex and "." in ex
    assert "dog" not in ex


def test_lexicon_absent_token_is_empty():
    assert SynonymLexicon({"dog": ["hound"]}).synonyms("cat") == frozenset()


def test_static_provider_respects_width():
    mlm = StaticMlmProvider({"dog": ["cat", "horse", "cow"]})
    assert [t for t, _ in mlm.top_candidates(["a", "dog"], 1, 2)] == ["cat", "horse"]
    assert mlm.top_candidates(["a", "pig"], 1, 5) == []


# -- importance --------------------------------------------------------------

def test_rigged_image_makes_dog_most_important(toy):
    v = toy.encode_text(["dog"])
    ranked = rank_positions(["a", "dog", "runs"], v, toy)
    assert ranked[0] == 1
    assert ranked == mask_ranking(["a", "dog", "runs"], v, toy.encode_text, lambda t: False)


def test_score_token_importance_saturates_and_skips_stopwords(toy):
    pair = pair_of("a dog runs")
    v = toy.encode_text(["dog"])
    full = mask_ranking(["a", "dog", "runs"], v, toy.encode_text, lambda t: False)
    assert score_token_importance(pair, 0, toy, 10, image_embedding=v) == full
    assert score_token_importance(pair, 0, toy, 1, image_embedding=v) == [1]
    assert score_token_importance(pair, 0, toy, 10, STOP, image_embedding=v) == [1, 2]


def test_identical_tokens_tie_break_to_lower_index(toy):
    assert rank_positions(["dog", "dog"], toy.encode_text(["cat"]), toy) == [0, 1]


def test_all_tokens_excluded_raises(toy):
    with pytest.raises(NoViableCandidate):
        rank_positions(["a", "the"], toy.encode_text(["dog"]), toy, STOP)


def test_single_token_mask_scores_against_zero(toy):
    v = toy.encode_text(["dog"])
    assert importance_scores(["dog"], v, toy)[0] == pytest.approx(1.0)


def test_gradient_importance_mode(toy):
    v = toy.encode_text(["dog"])
    s = importance_scores(["a", "dog", "runs"], v, toy, mode="gradient")
    assert int(np.argmax(s)) == 1


# -- candidate pools ---------------------------------------------------------

def test_pool_example_from_set_arithmetic():
    cap = Caption.from_text("a cat sleeps")
    mlm = StaticMlmProvider({"cat": ["cat", "feline", "the", "##og"]})
    lex = SynonymLexicon({"cat": ["feline", "kitty"]})
    mlm2 = StaticMlmProvider({"cat": ["kitten", "feline", "the", "##og"]})
    pool = build_candidate_pool("cat", 1, cap, mlm2, lex, ExclusionSet(frozenset({"the"})), 10)
    assert pool.candidates == ("kitten", "feline", "kitty")
    # the word itself is never offered
    pool = build_candidate_pool("cat", 1, cap, mlm, lex, ExclusionSet(frozenset({"the"})), 10)
    assert pool.candidates == ("feline", "kitty")


def test_pool_matches_documented_example():
    cap = Caption.from_text("a dog runs")
    mlm = StaticMlmProvider({"dog": ["cat", "feline", "the", "##og"]})
    lex = SynonymLexicon({"dog": ["feline", "kitty"]})
    pool = build_candidate_pool("dog", 1, cap, mlm, lex, ExclusionSet(frozenset({"the"})), 10)
    assert pool.candidates == ("cat", "feline", "kitty")


def test_empty_pool_raises():
    cap = Caption.from_text("a dog runs")
    with pytest.raises(NoViableCandidate):
        build_candidate_pool("dog", 1, cap, StaticMlmProvider({}), SynonymLexicon({}), STOP, 5)


def test_self_synonym_excluded():
    cap = Caption.from_text("a dog runs")
    pool = build_candidate_pool(
        "dog", 1, cap, StaticMlmProvider({"dog": ["cat"]}), SynonymLexicon({"dog": ["dog"]}), STOP, 5
    )
    assert pool.candidates == ("cat",)


def test_pool_precondition():
    cap = Caption.from_text("a dog runs")
    with pytest.raises(ValueError):
        build_candidate_pool("cat", 1, cap, StaticMlmProvider({}), None, STOP, 5)


tokens_st = st.sampled_from(["cat", "dog", "the", "a", "##s", "dog-like", "kitty", "hound", "[UNK]", "horse", "cow", "on"])


@given(
    st.lists(tokens_st, max_size=8),
    st.lists(tokens_st, max_size=5),
    st.sets(st.sampled_from(["the", "a", "on", "cow"]), max_size=3),
    st.integers(1, 8),
)
def test_pool_soundness_property(mlm_list, syns, stops, width):
    cap = Caption.from_text("the dog runs")
    exclusion = ExclusionSet(frozenset(stops))
    mlm = StaticMlmProvider({"dog": mlm_list})
    lex = SynonymLexicon({"dog": syns})
    expected = pool_by_sets("dog", mlm_list[:width], syns, lambda t: t in exclusion)
    try:
        pool = build_candidate_pool("dog", 1, cap, mlm, lex, exclusion, width)
    except NoViableCandidate:
        assert expected == set()
        return
    assert set(pool.candidates) == expected
    assert len(pool.candidates) == len(set(pool.candidates))
    # MLM candidates come first, in provider order
    mlm_part = [t for t in pool.candidates if t in mlm_list[:width]]
    assert list(pool.candidates[: len(mlm_part)]) == mlm_part


# -- losses and selection -----------------------------------------------------

def test_substitution_loss_definition(toy):
    pair = pair_of("a dog runs")
    v = toy.encode_text(["dog", "runs"])
    loss = evaluate_substitution_loss(pair, 0, 1, "cat", toy, image_embedding=v)
    assert loss == pytest.approx(-cos(toy.encode_text(["a", "cat", "runs"]), v), abs=1e-9)
    with pytest.raises(ValueError):
        evaluate_substitution_loss(pair, 0, 1, "dog", toy, image_embedding=v)


def test_orthogonal_substitute_raises_loss(toy):
    pair = pair_of("a dog runs")
    v = toy.encode_text(["a", "dog", "runs"])
    cands = ["cat", "beach", "red", "snow", "sings", "city"]
    far = min(cands, key=lambda c: abs(toy.encode_text([c]) @ toy.encode_text(["dog"])))
    assert evaluate_substitution_loss(pair, 0, 1, far, toy, image_embedding=v) > caption_loss(toy, pair.captions[0].tokens, v)


def test_select_global_substitution_handcrafted_table():
    table = {(1, "a"): 0.1, (1, "b"): 0.4, (2, "c"): 0.3}
    options = [(2, CandidatePool("y", ("c",))), (1, CandidatePool("x", ("a", "b")))]
    assert select_global_substitution(options, lambda p, c: table[(p, c)]) == (1, "b", 0.4)


def test_select_global_substitution_tie_break():
    options = [(3, CandidatePool("y", ("c", "d"))), (1, CandidatePool("x", ("a", "b")))]
    assert select_global_substitution(options, lambda p, c: 1.0)[:2] == (1, "a")
    assert select_global_substitution([], lambda p, c: 0.0) is None


def test_substitution_record_must_change_token():
    with pytest.raises(ValueError):
        SubstitutionRecord(0, "dog", "dog", 0.0)


# -- GAR and greedy -------------------------------------------------------------

def _random_instance(seed, toy):
    rng = np.random.default_rng(seed)
    vocab = ["man", "woman", "dog", "cat", "horse", "red", "blue", "green", "runs", "jumps", "sits",
             "beach", "park", "street", "snow", "field", "tall", "young", "plays", "stage"]
    stops = ["a", "the", "on", "in"]
    n = int(rng.integers(3, 8))
    tokens = [str(rng.choice(vocab + stops)) for _ in range(n)]
    if all(t in stops for t in tokens):
        tokens[0] = "dog"
    table = {w: [str(x) for x in rng.choice(vocab + stops + ["##x", "a-b"], size=int(rng.integers(0, 7)))] for w in vocab}
    lex = {w: [str(x) for x in rng.choice(vocab, size=int(rng.integers(0, 3)))] for w in vocab}
    k = int(rng.integers(1, 4))
    width = int(rng.integers(1, 6))
    v = toy.encode_text([str(rng.choice(vocab)) for _ in range(3)])
    return tokens, table, lex, k, width, v


def test_gar_matches_brute_force_on_random_instances(toy):
    checked = 0
    for seed in range(60):
        tokens, table, lex, k, width, v = _random_instance(seed, toy)
        exclusion = ExclusionSet(frozenset({"a", "the", "on", "in"}))
        pair = ImageTextPair(BLANK, (Caption(tuple(tokens)),), "r")
        cfg = AttackConfig(k_influential=k, candidate_width=width)
        expected = brute_force_gar(tokens, v, toy.encode_text, lambda t: t in exclusion, table, lex, k, width)
        out, recs = globally_aware_replace(
            pair, 0, toy, StaticMlmProvider(table), SynonymLexicon(lex), exclusion, cfg, image_embedding=v
        )
        if expected is None:
            assert recs == [] and out == pair.captions[0]
            continue
        checked += 1
        assert (recs[0].position, recs[0].replacement) == expected[:2]
        assert recs[0].loss == pytest.approx(expected[2], abs=1e-12)
    assert checked >= 30


def test_gar_zero_budget_returns_unchanged(toy, resources):
    pair = pair_of("a red dog runs on the beach")
    cfg = AttackConfig().replace(eps_text=0)
    out, recs = globally_aware_replace(
        pair, 0, toy, resources.mlm, resources.lexicon, resources.exclusion, cfg
    )
    assert out == pair.captions[0] and recs == []


def test_gar_multi_round_budget(toy, resources):
    pair = pair_of("a red dog runs on the beach")
    cfg = AttackConfig().replace(eps_text=3)
    out, recs = globally_aware_replace(pair, 0, toy, resources.mlm, resources.lexicon, resources.exclusion, cfg)
    assert len(recs) == 3
    assert len({r.position for r in recs}) == 3
    assert substitution_distance(pair.captions[0].tokens, out.tokens) == 3


def test_gar_requires_flag(toy, resources):
    with pytest.raises(ValueError):
        globally_aware_replace(
            pair_of("a dog"), 0, toy, resources.mlm, resources.lexicon, resources.exclusion,
            AttackConfig(enable_gar=False),
        )


def test_greedy_falls_into_local_trap_that_gar_avoids(toy):
    v = toy.encode_text(["dog", "runs"])
    pair = pair_of("a dog runs")
    cands = ["cat", "horse", "beach", "red", "snow", "sings", "city", "blue"]
    losses = {c: caption_loss(toy, ["a", c, "runs"], v) for c in cands}
    order = sorted(cands, key=losses.get)  # worst substitute first
    mlm = StaticMlmProvider({"dog": order, "runs": []})
    cfg_gar = AttackConfig(k_influential=1, candidate_width=len(cands))
    cfg_greedy = cfg_gar.replace(enable_gar=False)
    _, greedy = greedy_top1_replace(pair, 0, toy, mlm, STOP, cfg_greedy, image_embedding=v)
    _, gar = globally_aware_replace(pair, 0, toy, mlm, SynonymLexicon(), STOP, cfg_gar, image_embedding=v)
    assert greedy[0].replacement == order[0]
    assert gar[0].replacement == order[-1]
    assert gar[0].loss > greedy[0].loss


def test_greedy_equals_gar_when_search_space_collapses(toy, resources):
    for pair in [pair_of("a red dog runs on the beach"), pair_of("the girl sings in the park")]:
        cfg = AttackConfig(k_influential=1, candidate_width=1)
        _, gar = globally_aware_replace(pair, 0, toy, resources.mlm, SynonymLexicon(), resources.exclusion, cfg)
        _, greedy = greedy_top1_replace(pair, 0, toy, resources.mlm, resources.exclusion, cfg.replace(enable_gar=False))
        assert [(r.position, r.replacement) for r in gar] == [(r.position, r.replacement) for r in greedy]


def test_greedy_falls_back_to_next_position(toy):
    v = toy.encode_text(["dog"])
    pair = pair_of("a dog runs")
    mlm = StaticMlmProvider({"dog": [], "runs": ["jumps"]})
    _, recs = greedy_top1_replace(pair, 0, toy, mlm, STOP, AttackConfig(enable_gar=False), image_embedding=v)
    assert [(r.position, r.replacement) for r in recs] == [(2, "jumps")]


def test_gar_no_candidates_anywhere_is_not_fatal(toy):
    pair = pair_of("a dog runs")
    out, recs = globally_aware_replace(
        pair, 0, toy, StaticMlmProvider({}), SynonymLexicon(), STOP, AttackConfig()
    )
    assert out == pair.captions[0] and recs == []


# -- stage ------------------------------------------------------------------------

def test_text_stage_shape_budget_and_non_harm(toy, resources, desk_pairs):
    for pair in desk_pairs[:10]:
        v = toy.encode_image(pair.image)
        out = attack_text_stage(pair, toy, resources, AttackConfig())
        assert len(out) == len(pair.captions)
        for orig, res in zip(pair.captions, out):
            assert res.original == orig
            assert substitution_distance(orig.tokens, res.caption.tokens) <= 1
            assert caption_loss(toy, res.caption.tokens, v) >= caption_loss(toy, orig.tokens, v)


def test_non_harm_keeps_original_when_every_substitute_helps_alignment(toy):
    # the only candidate makes the caption match the image better
    v = toy.encode_text(["a", "dog", "runs"])
    img_pair = pair_of("a cat runs")
    res = TextResources(StaticMlmProvider({"cat": ["dog"], "runs": []}), SynonymLexicon(), STOP)
    from gda.text_attack import attack_caption

    out = attack_caption(img_pair, 0, toy, res, AttackConfig(), v)
    assert out.caption == img_pair.captions[0]
    assert out.substitutions == [] and out.error


def test_cte_disabled_equals_empty_lexicon(toy, resources, desk_pairs):
    empty = TextResources(resources.mlm, SynonymLexicon(), resources.exclusion)
    for pair in desk_pairs[:6]:
        a = attack_text_stage(pair, toy, resources, AttackConfig(enable_cte=False))
        b = attack_text_stage(pair, toy, empty, AttackConfig())
        assert [x.caption for x in a] == [x.caption for x in b]


def test_text_stage_is_deterministic(toy, resources, desk_pairs):
    a = attack_text_stage(desk_pairs[0], toy, resources, AttackConfig())
    b = attack_text_stage(desk_pairs[0], toy, resources, AttackConfig())
    assert [x.caption for x in a] == [x.caption for x in b]
