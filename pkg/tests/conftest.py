import numpy as np
import pytest

from cmr.config import tiny_config
from cmr.data import SyntheticExample
from cmr.model import init_params, make_batch


def random_examples(cfg, n, seed=0, n_tokens=None):
    rng = np.random.default_rng(seed)
    task = "nlvr_like" if cfg.task == "nlvr" else "vqa_like"
    n_labels = 2 if cfg.task == "nlvr" else cfg.n_classes
    out = []
    for i in range(n):
        length = cfg.n_text if n_tokens is None else n_tokens
        tokens = rng.integers(0, cfg.vocab_size, length).tolist()
        visual = [rng.standard_normal((cfg.n_visual, cfg.d_raw_v)) for _ in range(cfg.n_images)]
        out.append(SyntheticExample(f"r{i}", task, tokens, visual, int(rng.integers(0, n_labels))))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["nlvr", "vqa"])
def task(request):
    return request.param


@pytest.fixture
def tiny():
    return tiny_config("nlvr")


@pytest.fixture
def tiny_store(tiny):
    return init_params(tiny, seed=3)


@pytest.fixture
def tiny_batch(tiny):
    return make_batch(random_examples(tiny, 3, seed=5), tiny)


def pytest_terminal_summary(terminalreporter):
    lines = [value for reports in terminalreporter.stats.values() for rep in reports
             for key, value in getattr(rep, "user_properties", ()) if key == "acceptance" and rep.when == "call"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
