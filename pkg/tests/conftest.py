import numpy as np
import pytest

from debiasdiff import datasets, diffusion, io


@pytest.fixture(scope="session")
def schedule():
    return diffusion.make_schedule()


@pytest.fixture(scope="session")
def biased_data():
    return datasets.synthesize(4000, 0.95, 1.0, 0)


@pytest.fixture(scope="session")
def pretrained(biased_data, schedule):
    """Default-config biased denoiser, trained once per session."""
    net, history = diffusion.pretrain_biased(biased_data, schedule, diffusion.PretrainConfig(),
                                             io.stream(0, "pretrain"), init_seed=0)
    return net, history


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def inferred_groups(pretrained, biased_data, schedule):
    from debiasdiff import grouper

    net, _ = pretrained
    ell = grouper.per_sample_loss(biased_data, net, schedule, 16, 0)
    return ell, grouper.infer_groups(ell.values, 4, 1.0, 500, 1e-2, 0)


CRITERIA: list[str] = []


def record_criterion(label: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
    CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
