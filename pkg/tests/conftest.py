import pytest
import torch

from costagg.aggregator import AggregatorConfig
from costagg.model import ModelConfig, SegmentationModel
from costagg.training import SYNTHETIC_CLASSES, TrainConfig, make_state, synthetic_dataset, train

torch.set_num_threads(1)

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def small_model_cfg(**overrides) -> ModelConfig:
    agg = dict(d_agg=8, num_blocks=2, window_size=4, num_heads=2, class_heads=2, mlp_ratio=2.0)
    agg.update(overrides.pop("aggregator", {}))
    base = dict(vision_dim=16, patch_size=8, aggregator=AggregatorConfig(**agg), reducer_hidden=4, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def small_model():
    return SegmentationModel(small_model_cfg())


def desk_model_cfg(seed: int = 0) -> ModelConfig:
    return ModelConfig(vision_dim=32, patch_size=8,
                       aggregator=AggregatorConfig(d_agg=16, num_blocks=6, window_size=4, num_heads=2, class_heads=2),
                       reducer_hidden=8, seed=seed)


def desk_train_cfg(**kw) -> TrainConfig:
    base = dict(batch_size=4, iterations=200, train_resolution=64, lr_head=1e-3, lr_backbone=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def trained_desk():
    """Desk-profile model trained for 200 steps on the 16-image synthetic set."""
    model = SegmentationModel(desk_model_cfg())
    data = synthetic_dataset(16, 64, seed=0)
    state = make_state(model, desk_train_cfg(), SYNTHETIC_CLASSES)
    losses = train(state, data, 200)
    model.eval()
    return model, data, losses


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")
