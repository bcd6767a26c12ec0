import pytest

from dualcam.config import TrainConfig
from dualcam.data import generate_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small shared dataset for harness-level tests (32x32, 4 classes)."""
    root = tmp_path_factory.mktemp("tiny_ds")
    generate_dataset(16, 6, 32, 32, 4, seed=123, out_dir=root)
    return root


def tiny_config(data_dir, out_dir, **overrides) -> TrainConfig:
    base = dict(
        data_dir=str(data_dir), out_dir=str(out_dir), image_size=32,
        num_classes=4, batch_size=4, total_iters=10, warmup_cls_iters=2,
        warmup_seg_iters=5, eval_interval=5, checkpoint_interval=10,
        lr=1e-3, widths="8,12,16,24", min_valid_pixels=32, seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base).validate()
