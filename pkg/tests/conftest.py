import numpy as np
import pytest

from respmtl.models import EncoderSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    """Mini transformer small enough for finite differences."""
    return EncoderSpec("mini_transformer", embed_dim=8, depth=1, heads=2, patch=(2, 3), stride=(2, 3),
                       input_shape=(4, 6), mlp_ratio=2)


@pytest.fixture(scope="session")
def fixture_corpus(tmp_path_factory):
    from respmtl.synthetic import make_fixture_corpus
    return make_fixture_corpus(tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="session")
def ingested(fixture_corpus, tmp_path_factory):
    from respmtl.cli import main
    out = tmp_path_factory.mktemp("ingested")
    assert main(["ingest", "--data-root", str(fixture_corpus), "--output-dir", str(out)]) == 0
    return out


# acceptance criteria report one line each at the end of the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE, key=lambda k: (int(str(k).rstrip("ab")), str(k))):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{status}] criterion {str(n):>2}: {title}" + (f" ({detail})" if detail else ""))
