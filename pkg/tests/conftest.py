import pytest

from hdv_platoon.vehicle import VehicleParams


@pytest.fixture
def truck():
    return VehicleParams()


from hypothesis import settings  # noqa: E402

settings.register_profile("repo", derandomize=True, print_blob=True)
settings.load_profile("repo")
