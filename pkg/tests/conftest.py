import pytest

try:
    from hypothesis import settings

    settings.register_profile("suite", deadline=None, max_examples=50)
    settings.load_profile("suite")
except ImportError:  # pragma: no cover - hypothesis is a test dependency
    pass

from .helpers import make_rng


@pytest.fixture
def rng():
    return make_rng(20260814)
