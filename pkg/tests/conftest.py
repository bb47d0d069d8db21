import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def images():
    from dede.rng import Rng

    return Rng(7).uniform01((6, 3, 16, 16)).astype(np.float32)


TINY_INI = """\
[data]
height = 8
width = 8
pretrain = 96
dede_train = 64
downstream_train = 64
test = 64

[encoder]
depth = 1
width = 16
heads = 2
embed_dim = 8

[contrastive]
epochs = 1
batch_size = 32

[attack]
epochs = 1
batch_size = 32
reference_size = 8
pretrain_epochs = 1

[dede]
iterations = 4
batch_size = 16
enc_depth = 1
enc_width = 16
dec_depth = 1
dec_width = 16
heads = 2

[eval]
probe_epochs = 2
probe_batch_size = 32
"""


@pytest.fixture
def tiny_config(tmp_path):
    """Seconds-scale pipeline config for exercising the CLI plumbing."""
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI, encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def desk():
    from desk import DESK

    return DESK


def pytest_terminal_summary(terminalreporter):
    from desk import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        title, ok, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}" +
                                    (f" ({detail})" if detail else ""))
