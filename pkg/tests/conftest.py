import numpy as np
import pytest
import torch

from globaltrack import _accel
from globaltrack.model import GlobalTrack, ModelConfig
from globaltrack.modelcore import BackboneConfig
from globaltrack.qg_rcnn import RcnnConfig
from globaltrack.qg_rpn import RpnConfig

# acceptance lines collected during the run and echoed in the terminal summary
ACCEPTANCE_LINES = []

BACKENDS = ["numpy"] + (["numba"] if _accel.HAS_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run a test once per kernel implementation."""
    monkeypatch.setattr(_accel, "USE_NUMBA", request.param == "numba")
    return request.param


def tiny_config(channels=4, roi_size=3, hidden=8, stride=16, **kw) -> ModelConfig:
    return ModelConfig(
        backbone=BackboneConfig("desk", channels, stride, desk_blocks=int(np.log2(stride)) + 1, desk_width=4),
        roi_size=roi_size,
        anchor_scales=kw.pop("anchor_scales", (16.0, 32.0)),
        anchor_ratios=kw.pop("anchor_ratios", (1.0,)),
        rpn=RpnConfig(num_samples=32, pre_nms_top_k=64, train_max_proposals=32, test_max_proposals=32),
        rcnn=RcnnConfig(hidden=hidden, num_samples=12),
        **kw,
    )


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return GlobalTrack(tiny_config()).eval()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
