import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from candle.config import TrainConfig  # noqa: E402


def tiny_config(**changes) -> TrainConfig:
    base = dict(num_classes=3, synth_per_class=40, synth_teacher_per_class=20, synth_test_per_class=10,
                ratio=4.0, image_size=8, resolutions="4,8,16", binary_width=4, teacher_width=2,
                teacher_epochs=1, calib_epochs=1, epochs=2, batch_size=16, lr=0.01, seed=0,
                profile_warmup=1, profile_steps=2)
    base.update(changes)
    return TrainConfig(**base).validate()


@pytest.fixture
def tiny_cfg():
    return tiny_config()
