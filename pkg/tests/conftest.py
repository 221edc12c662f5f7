import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gda.core import AttackConfig, Caption, Image, ImageTextPair
from gda.encoders import EncoderAdapter, make_toy_adapter
from gda.fixtures import make_desk_fixture
from gda.text_attack import TextResources

settings.register_profile("ci", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

# one "PASS/FAIL criterion N: ..." line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture(scope="session")
def toy():
    return make_toy_adapter(1, 64)


@pytest.fixture(scope="session")
def toy_b():
    return make_toy_adapter(2, 64)


@pytest.fixture(scope="session")
def resources():
    return TextResources.default()


@pytest.fixture(scope="session")
def desk_pairs():
    return make_desk_fixture()


@pytest.fixture(scope="session")
def small_pairs():
    return make_desk_fixture(n_pairs=6, seed=3)


@pytest.fixture
def fast_config():
    # no augmentation, few steps: unit tests that only need the plumbing
    return AttackConfig(pgd_steps=3, scales=(1.0,), bsr_copies=0)


def random_image(rng, shape=(3, 8, 8), lo=0.05, hi=0.95, image_id="img"):
    return Image(rng.uniform(lo, hi, size=shape), image_id)


def simple_pair(text_list, image, pair_id="p"):
    return ImageTextPair(image, tuple(Caption.from_text(t) for t in text_list), pair_id)


@pytest.fixture(scope="session")
def desk_examples(toy, resources, desk_pairs):
    """Default-config two-stage examples for the 64-pair fixture (seed 0)."""
    from gda.pipeline import run_attack

    cfg = AttackConfig()
    return [run_attack(p, toy, resources, cfg) for p in desk_pairs]


class RecordingAdapter(EncoderAdapter):
    """Wraps the toy model and logs every call in order."""

    def __init__(self, inner):
        self.inner = inner
        self.name = inner.name
        self.embedding_dim = inner.embedding_dim
        self.log = []

    def encode_image(self, image):
        self.log.append(("encode_image", np.array(image.pixels)))
        return self.inner.encode_image(image)

    def encode_text(self, tokens):
        self.log.append(("encode_text", tuple(tokens)))
        return self.inner.encode_text(tokens)

    def image_gradient(self, image, objective):
        self.log.append(("image_gradient", np.array(image.pixels)))
        return self.inner.image_gradient(image, objective)
