import pytest

from memvad.datasets import SynthSpec, write_synthetic_dataset


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """A few short synthetic videos; enough for plumbing tests, not for accuracy."""
    root = tmp_path_factory.mktemp("tiny_synth")
    spec = SynthSpec(train_videos=2, train_frames=10, test_videos_per_class=1, normal_frames=8,
                     anomaly_frames=6, seed=3)
    write_synthetic_dataset(root, spec)
    return root


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
