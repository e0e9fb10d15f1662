import pytest

from refmodel import REF


@pytest.fixture(scope="session")
def ref():
    """Reference model used by the frozen expected values in the suite."""
    return REF
