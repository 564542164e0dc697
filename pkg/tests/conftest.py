import numpy as np
import pytest
import torch

from selfdocseg.docgen import PageSpec, generate_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus64")
    return generate_corpus(PageSpec(64, 64, (1, 2), seed=3), 24, out)


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


# acceptance criteria report one line each, echoed live and again in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion(request):
    def report(number, name, passed, detail, seconds=None):
        timing = f" [{seconds:.1f}s]" if seconds is not None else ""
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {name}: {detail}{timing}"
        ACCEPTANCE_LINES.append(line)
        reporter = request.config.pluginmanager.get_plugin("terminalreporter")
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
