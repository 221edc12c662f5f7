import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gda.core import (
    AttackConfig,
    Budget,
    BudgetError,
    Caption,
    CaptionRejected,
    Image,
    ImageTextPair,
    child_seed,
    detokenize,
    parse_number,
    substitution_distance,
    tokenize,
)


def test_tokenize_basic():
    assert tokenize("A boy plays soccer.") == ["a", "boy", "plays", "soccer"]


def test_tokenize_strips_quotes_and_keeps_inner_hyphen():
    assert tokenize("“Dog-like” creature!") == ["dog-like", "creature"]


@pytest.mark.parametrize("text", ["", "   ", "... !!"])
def test_tokenize_rejects_empty(text):
    with pytest.raises(CaptionRejected):
        tokenize(text)


words = st.text(alphabet="abcdefghij", min_size=1, max_size=6)


@given(st.lists(words, min_size=1, max_size=8))
def test_tokenize_detokenize_round_trip(tokens):
    assert tokenize(detokenize(tokens)) == tokens


def test_detokenize_empty_raises():
    with pytest.raises(ValueError):
        detokenize([])


def test_substitution_distance():
    assert substitution_distance(["a", "dog", "runs"], ["a", "cat", "runs"]) == 1
    assert substitution_distance(["a"], ["a"]) == 0
    with pytest.raises(ValueError):
        substitution_distance(["a"], ["a", "b"])


@given(st.lists(words, min_size=1, max_size=8), st.data())
def test_substitution_distance_is_a_metric(a, data):
    b = data.draw(st.lists(words, min_size=len(a), max_size=len(a)))
    c = data.draw(st.lists(words, min_size=len(a), max_size=len(a)))
    assert substitution_distance(a, a) == 0
    assert substitution_distance(a, b) == substitution_distance(b, a)
    assert substitution_distance(a, c) <= substitution_distance(a, b) + substitution_distance(b, c)


def test_image_is_immutable_copy():
    arr = np.full((3, 4, 4), 0.5)
    img = Image(arr, "x")
    arr[0, 0, 0] = 0.0
    assert img.pixels[0, 0, 0] == 0.5
    with pytest.raises(ValueError):
        img.pixels[0, 0, 0] = 0.1


@pytest.mark.parametrize(
    "arr",
    [np.zeros((4, 4)), np.full((1, 2, 2), 1.5), np.full((1, 2, 2), -0.1), np.full((1, 2, 2), np.nan)],
)
def test_image_validation(arr):
    with pytest.raises(ValueError):
        Image(arr)


def test_image_equality_and_hash():
    a = Image(np.full((1, 2, 2), 0.25), "a")
    b = Image(np.full((1, 2, 2), 0.25), "a")
    assert a == b and hash(a) == hash(b)
    assert a != Image(np.full((1, 2, 2), 0.25), "b")


def test_caption_replace_and_text():
    cap = Caption.from_text("A dog runs.")
    assert cap.tokens == ("a", "dog", "runs")
    assert cap.raw == "A dog runs."
    new = cap.replace(1, "cat")
    assert new.text() == "a cat runs"
    assert cap.tokens[1] == "dog"


def test_pair_requires_captions():
    img = Image(np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        ImageTextPair(img, (), "p")


def test_budget_defaults_and_validation():
    b = Budget()
    assert b.eps_image == pytest.approx(8 / 255)
    assert b.eps_text == 1
    with pytest.raises(BudgetError):
        Budget(0.0, 1)
    with pytest.raises(BudgetError):
        Budget(0.1, -1)
    with pytest.raises(BudgetError):
        Budget(0.1, 1.5)


def test_config_defaults():
    c = AttackConfig()
    assert c.pgd_steps == 10
    assert c.step_size == pytest.approx(2 / 255)
    assert c.k_influential == 3
    assert c.scales == (0.5, 0.75, 1.0, 1.25, 1.5)
    assert (c.bsr_grid, c.bsr_angle_max, c.bsr_copies) == (2, 24.0, 20)
    assert c.stage_mode == "two_stage"


@pytest.mark.parametrize(
    "changes",
    [
        {"pgd_steps": -1},
        {"step_size": 0.0},
        {"k_influential": 0},
        {"candidate_width": 0},
        {"scales": ()},
        {"scales": (1.0, -0.5)},
        {"bsr_copies": -1},
        {"bsr_grid": 0},
        {"stage_mode": "four"},
        {"rotation_mode": "diagonal"},
        {"interpolation": "cubic"},
        {"importance": "random"},
    ],
)
def test_config_rejects_invalid(changes):
    with pytest.raises(ValueError):
        AttackConfig().replace(**changes)


def test_config_replace_budget_fields():
    c = AttackConfig().replace(eps_image=4 / 255, eps_text=2)
    assert c.budget == Budget(4 / 255, 2)


@given(
    st.integers(0, 20), st.integers(1, 8), st.integers(0, 2**32),
    st.lists(st.sampled_from([0.5, 0.75, 1.0, 1.25]), min_size=1, max_size=4), st.booleans(),
)
def test_fingerprint_stable_under_reserialization(steps, k, seed, scales, cte):
    c = AttackConfig(pgd_steps=steps, k_influential=k, seed=seed, scales=tuple(scales), enable_cte=cte)
    again = AttackConfig.from_dict(json.loads(json.dumps(c.to_dict())))
    assert again == c
    assert again.fingerprint() == c.fingerprint()


def test_fingerprint_changes_with_config():
    assert AttackConfig().fingerprint() != AttackConfig(seed=1).fingerprint()


def test_parse_number():
    assert parse_number("8/255") == pytest.approx(8 / 255)
    assert parse_number("0.5") == 0.5
    assert parse_number(" 3 ") == 3.0


def test_child_seed_deterministic_and_keyed():
    assert child_seed(0, "pair:a") == child_seed(0, "pair:a")
    assert child_seed(0, "pair:a") != child_seed(0, "pair:b")
    assert child_seed(0, "pair:a") != child_seed(1, "pair:a")
    assert 0 <= child_seed(5, "x") < 2**64
