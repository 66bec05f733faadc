import sys

import numpy as np
import pytest

from ssdnf import synth
from ssdnf import trainer as tr


def tiny_model(**kw):
    base = dict(channels=2, resolution=4, decoder_hidden=16, unet_base=8, unet_mults=(1,), unet_groups=4,
                unet_depth=1)
    base.update(kw)
    return tr.ModelConfig(**base)


def tiny_train(**kw):
    base = dict(scene_batch=2, ray_batch=16, n_samples=4, k_out=3, k_in=[[1, 3], [None, 2]],
                lr_code=0.05, lr_decoder=0.01, lr_diffusion=1e-3)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return synth.make_dataset(4, 2, 8, 8, seed=3, n_test_scenes=1, n_views_test=17)


@pytest.fixture(scope="session")
def tiny_obs(tiny_dataset):
    return tr.observations_for(tiny_dataset.split("train"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
