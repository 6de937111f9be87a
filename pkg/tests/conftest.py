import pytest
import torch

from aurora_gan.config import small_config
from aurora_gan.data import SyntheticSpec, generate_synthetic
from aurora_gan.text_encoding import ToyTextEncoder

torch.set_num_threads(1)


@pytest.fixture
def cfg(tmp_path):
    c = small_config(out_dir=str(tmp_path / "run"))
    c.model.resolutions = [4, 8, 16]
    return c


@pytest.fixture
def model_cfg(cfg):
    return cfg.model


@pytest.fixture
def encoder(model_cfg):
    m = model_cfg
    return ToyTextEncoder(m.text_dim, m.context_length, m.vocab_size, m.encoder_layers,
                          m.encoder_heads, m.encoder_seed)


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = SyntheticSpec(colors=["red", "blue"], shapes=["circle", "square"],
                         backgrounds=["black"], seed=3, image_size=16)
    return generate_synthetic(spec, 64)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    results = item.config.stash.setdefault(_ACCEPTANCE, {})
    results[number] = (title, rep.passed, detail, rep.duration)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, detail, seconds = results[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number} [{title}]: {status} ({seconds:.1f}s) {detail}")
