import numpy as np
import pytest

from crm import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["direct", "im2col"])
def conv_path(request, monkeypatch):
    """Run a test through both convolution code paths."""
    if request.param == "im2col":
        monkeypatch.setattr(kernels, "use_direct_conv", lambda *a: False)
    elif kernels.conv2d_padded is None:
        pytest.skip("compiled kernels not built")
    else:
        monkeypatch.setattr(kernels, "use_direct_conv", lambda k, cin, cout: k > 1)
    return request.param


# one pass/fail line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    def record(tag: str, ok: bool, detail: str) -> None:
        line = f"{tag} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
