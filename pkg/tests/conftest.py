import numpy as np
import pytest

from diffusion_fiqa import recipes

_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'} - {detail}"
    _CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])


@pytest.fixture(scope="session")
def toy_denoiser():
    """The standard 64-image, 200-epoch desk model (about a minute on one core)."""
    return recipes.train_toy_denoiser()


@pytest.fixture(scope="session")
def toy_embedder():
    """Conv embedder trained on 150 toy identities (a few seconds)."""
    model, _ = recipes.train_toy_embedder()
    return model


@pytest.fixture(scope="session")
def heldout_images():
    from diffusion_fiqa.toyfaces import generate
    return generate(recipes.HELDOUT_DATA).images


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
