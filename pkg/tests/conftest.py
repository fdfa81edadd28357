import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # makes the shared oracles importable

from emdepart.config import AlignmentConfig, Config, ModelConfig, TrainConfig  # noqa: E402
from emdepart.data import SynthConfig, gen_synthetic  # noqa: E402

TINY_SYNTH = SynthConfig(c_seen=6, c_unseen=2, views=4, views_per_class=2, n=4, m=2,
                         distractors=2, r0=8, word_dim=12, images_per_class=4,
                         val_classes=2, seed=11)


def tiny_config(epochs=2, **train) -> Config:
    return Config(model=ModelConfig(r=8, k=2, enc_heads=2, enc_layers=1, sdm_layers=1),
                  alignment=AlignmentConfig(tau=0.5, p=1),
                  train=TrainConfig(base_lr=3e-3, batch_size=8, epochs=epochs, **train))


@pytest.fixture(scope="session")
def tiny_synth():
    return gen_synthetic(TINY_SYNTH)


@pytest.fixture(scope="session")
def tiny_data(tiny_synth):
    return tiny_synth.dataset()


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory, tiny_synth):
    path = tmp_path_factory.mktemp("tiny")
    tiny_synth.write(path)
    return path


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
