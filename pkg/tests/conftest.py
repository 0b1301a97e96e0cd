import pytest

from mixsup.config import ExperimentConfig


@pytest.fixture
def tiny_cfg():
    """A config that trains in well under a second per run."""
    return ExperimentConfig(name="tiny", variant="kl_ent", seeds=[0], size=16, levels=2, base_channels=2,
                            ratio=1.0, epochs=2, ent_start=0, batch_size=4, patience=5)


@pytest.fixture
def runs_dir(tmp_path, monkeypatch):
    d = tmp_path / "runs"
    monkeypatch.setenv("MIXSUP_RUNS_DIR", str(d))
    return d


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
