import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from voxcam.nn import ModelConfig, TrainConfig  # noqa: E402
from voxcam.pipeline import ExperimentConfig, PreprocessConfig  # noqa: E402
from voxcam.roi import ThresholdConfig  # noqa: E402
from voxcam.volume import PhantomSpec  # noqa: E402

TINY_DIMS = (16, 16, 8)


def tiny_config(out_dir, sweep=((0.7, "top"), (0.7, "low")), epochs=6, k=2) -> ExperimentConfig:
    """A run that finishes in seconds: small volumes, narrow layers, two folds."""
    return ExperimentConfig(
        out_dir=str(out_dir),
        phantom=PhantomSpec(dims=TINY_DIMS, n_subjects_per_class=16, structure_radius=2.5),
        preprocess=PreprocessConfig(target_dims=TINY_DIMS),
        model=ModelConfig(input_dims=TINY_DIMS, filters=(4, 8, 8), dense_units=16),
        stage1=TrainConfig(epochs=epochs, batch_size=8, seed=0),
        stage2=TrainConfig(epochs=epochs, batch_size=8, seed=100),
        threshold=ThresholdConfig(0.7, "top"),
        sweep=[ThresholdConfig(a, b) for a, b in sweep],
        test_frac=0.25,
        k=k,
    )


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    from voxcam.pipeline import kfold_run

    cfg = tiny_config(tmp_path_factory.mktemp("tiny") / "run")
    return cfg, kfold_run(cfg)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_line():
    """Record one PASS/FAIL line for the end-of-run acceptance summary."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
