import numpy as np
import pytest
from hypothesis import settings

from caface.config import ModelConfig
from caface.model import CAFace
from caface.synthetic import SyntheticWorld, generate_corpus

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

TOY = ModelConfig(feat_dim=8, style_channels=3, gamma_dim=4, norm_dim=4, n_centers=2, n_heads=2,
                  token_hidden=4, channel_hidden=8, ffn_mult=2)
SMALL = ModelConfig(feat_dim=16, style_channels=4, gamma_dim=8, norm_dim=8, n_centers=4, n_heads=2,
                    token_hidden=8, channel_hidden=16, ffn_mult=2, max_batch=64)


def randomize_head(model, rng, scale=0.5):
    """Give the zero-initialized head nonzero weights so P is non-uniform."""
    for name, p in model.named_parameters().items():
        if name.startswith("agn.head"):
            p.data = rng.normal(0, scale, p.data.shape).astype(p.data.dtype)
    return model


def make_model(cfg=SMALL, seed=0, head=True, dtype=np.float32):
    model = CAFace(cfg, seed=seed).astype(dtype)
    model.set_norm_stats(12.0, 2.0)
    if head:
        randomize_head(model, np.random.default_rng(seed + 100))
    return model


def random_records(cfg, n, seed=0, sid=0):
    world = SyntheticWorld.create(cfg.feat_dim, cfg.style_channels, cfg.n_taps, seed=0)
    corpus = generate_corpus(seed, 2, max(n, 1), world)
    rs = corpus.records[np.arange(n)]
    rs.subject_ids[:] = sid
    return rs


@pytest.fixture
def small_model():
    return make_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
