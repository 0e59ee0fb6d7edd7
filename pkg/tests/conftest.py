import numpy as np
import pytest

from flexsep.config import Config, data_preset, model_preset
from flexsep.data import Manifest, build_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory) -> Manifest:
    """Small on-disk dataset with every mixture kind, shared across modules."""
    out = tmp_path_factory.mktemp("tiny_data")
    return Manifest(build_dataset(data_preset("tiny"), out))


def tiny_config(**train) -> Config:
    cfg = Config(model=model_preset("tiny"), data=data_preset("tiny"))
    cfg.train.max_epochs = 1
    for key, value in train.items():
        setattr(cfg.train, key, value)
    return cfg


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_manifest):
    """Stage 1 -> stage 2 -> stage 3 on the tiny preset, one epoch each."""
    from flexsep.training import train_stage1, train_stage2, train_stage3

    root = tmp_path_factory.mktemp("tiny_run")
    cfg = tiny_config()
    s1 = train_stage1(cfg, tiny_manifest, root / "s1")
    s2 = train_stage2(cfg, tiny_manifest, s1.best_path, root / "s2")
    s3 = train_stage3(cfg, tiny_manifest, s2.best_path, root / "s3")
    return {"root": root, "s1": s1, "s2": s2, "s3": s3, "manifest": tiny_manifest}


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
