import os

import pytest
import torch


def pytest_collection_modifyitems(config, items):
    if os.environ.get("DREAMSTACK_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(
        reason="long-running; set DREAMSTACK_RUN_SLOW=1 to enable")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def tiny_overrides():
    """Config overrides shared by the fast integration tests."""
    return [
        "model.h_size=32", "model.groups=4", "model.classes=4",
        "model.cnn_base=8", "model.hidden=32",
        "env.cell_px=1", "env.image_size=16",
        "train.batch_size=2", "train.batch_length=8",
        "train.prefill=32", "train.train_ratio=4",
        "train.imagination_horizon=5",
        "run.checkpoint_every=1000000", "run.eval_every=0",
        "run.log_every=1", "run.snapshot_every=20",
    ]
