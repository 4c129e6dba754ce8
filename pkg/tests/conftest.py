import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from mscpt.core import Bag, ModelConfig, ScaleView  # noqa: E402
from mscpt.data import ConceptWorld, SyntheticSpec  # noqa: E402
from mscpt.descriptions import synthesize_description_bank  # noqa: E402
from mscpt.encoders import Tokenizer, ToyVLM  # noqa: E402

torch.set_num_threads(1)


def random_bag(rng, bag_id="b0", label=0, m_low=4, m_high=6, d=8, K=2):
    def view(m):
        cells = rng.choice(100, size=m, replace=False)
        return ScaleView(rng.standard_normal((m, d)), np.stack([cells // 10, cells % 10], 1))
    return Bag(bag_id, label, {"low": view(m_low), "high": view(m_high)}, num_classes=K)


def tiny_setup(d=8, L=2, C=2, heads=2, seed=0):
    """Untrained tiny VLM + a synthetic bank sized for gradient checks."""
    spec = SyntheticSpec(d_raw=d, seed=seed)
    world = ConceptWorld.build(spec)
    torch.manual_seed(seed)
    vlm = ToyVLM(Tokenizer.fit(world.vocabulary()), d, d_model=d, d_joint=d, L_text=L, L_img=L,
                 n_heads=heads).double().requires_grad_(False)
    bank = synthesize_description_bank(world, C, C, seed=seed)
    cfg = ModelConfig(d_joint=d, d_model=d, n_heads=heads, C_low=C, C_high=C, n_select=3, K_top=2,
                      L_text=L, L_img=L, knn_k=2)
    return world, vlm, bank, cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny():
    return tiny_setup()


ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """Record a pass/fail line for an acceptance criterion; the line is printed and summarised."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
