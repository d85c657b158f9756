import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def tiny_config(seed: int = 0):
    """Seconds-scale recipe: 24 scenes, 6 identities, one epoch."""
    from psearch.pipeline.config import PipelineConfig

    cfg = PipelineConfig.toy()
    cfg.seed = seed
    cfg.data.num_scenes = 24
    cfg.data.num_identities = 6
    cfg.data.test_fraction = 0.34
    cfg.optim.epochs = 1
    return cfg


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """One joint training run on the standard 200-scene toy set, shared by the slow checks."""
    from psearch.pipeline.config import PipelineConfig
    from psearch.pipeline.features import FeatureStore
    from psearch.pipeline.train import build_backbone, load_dataset, train

    cfg = PipelineConfig.toy()
    dataset = load_dataset(cfg)
    backbone = build_backbone(cfg, dataset)
    store = FeatureStore(backbone, dataset)
    digest = backbone.parameter_digest()
    out = tmp_path_factory.mktemp("toy_run")
    res = train(cfg, "joint", out_dir=out, dataset=dataset, backbone=backbone, store=store)
    return {"cfg": cfg, "dataset": dataset, "backbone": backbone, "store": store,
            "result": res, "digest_before": digest, "out": out}


_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(name: str, ok: bool, detail: str):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
