import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from hldiff.bundle import init_bundle
from hldiff.dit import DitConfig
from hldiff.schedule import build_schedule
from hldiff.seeding import SeedStreams

TINY_CFG = DitConfig(latent_channels=3, latent_size=8, patch_size=4,
                     hidden_dim=16, depth=1, heads=2, cond_dim=16,
                     cond_max_tokens=16)


@pytest.fixture
def tiny_cfg() -> DitConfig:
    return TINY_CFG


@pytest.fixture
def sched50():
    return build_schedule(50)


@pytest.fixture
def make_bundle():
    def _make(seed: int = 0, cfg: DitConfig = TINY_CFG, T: int = 50,
              vocab: int = 256):
        streams = SeedStreams(seed)
        return init_bundle(cfg, T, vocab, streams.generator("init"))

    return _make


@pytest.fixture
def make_live_bundle(make_bundle):
    """Bundle whose zero-init output head is perturbed so outputs are nonzero."""

    def _make(seed: int = 0, **kw):
        bundle = make_bundle(seed, **kw)
        gen = torch.Generator().manual_seed(seed + 1000)
        with torch.no_grad():
            bundle.dit.head.weight.normal_(0, 0.05, generator=gen)
            bundle.dit.head.bias.normal_(0, 0.01, generator=gen)
        return bundle

    return _make


@pytest.fixture(autouse=True)
def _single_thread():
    # the sandbox has one core; oversubscribed threads only add overhead
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One line per acceptance criterion, collected from record_property."""
    results = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", "call") != "call" and status != "error":
                continue
            props = dict(getattr(rep, "user_properties", []))
            label = props.get("criterion")
            if label is None:
                continue
            num, text = label
            outcome = "PASS" if status == "passed" else "FAIL"
            results[num] = (outcome, text)
    if not results:
        return
    tw = terminalreporter
    tw.write_sep("-", "acceptance criteria")
    for num in sorted(results):
        outcome, text = results[num]
        tw.write_line(f"criterion {num:2d} {outcome} - {text}")
