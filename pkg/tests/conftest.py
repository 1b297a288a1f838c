import sys
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance outcomes, printed once at the end of the session
CRITERIA: dict[str, tuple[bool, str]] = {}


def record(name: str, passed: bool, detail: str = "") -> None:
    CRITERIA[name] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(CRITERIA, key=lambda k: int(k.split()[0])):
        ok, detail = CRITERIA[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def tiny_model_config():
    from lanevec.net import ModelConfig
    return ModelConfig(n_groups=2, n_lines=4, n_points=6, n_classes=5, d_model=32, n_heads=4,
                       decoder_layers=2, memory_depth=3, image_size=32,
                       encoder_channels=(8, 16, 16, 32), stage_strides=(2, 2, 2, 2))
