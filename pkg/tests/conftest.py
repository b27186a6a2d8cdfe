import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mixsurv.config import PipelineConfig  # noqa: E402
from mixsurv.dataio import PatchBag, SyntheticSpec, generate_synthetic_cohort  # noqa: E402


def distinct_bags(times, d=16, seed=0, censored=()):
    """One bag per time, each drawn around its own centroid so slides are separable."""
    rng = np.random.default_rng(seed)
    bags = []
    for i, t in enumerate(times):
        n = int(rng.integers(20, 40))
        centre = 2.0 * rng.normal(size=d)
        feats = centre + 0.3 * rng.normal(size=(n, d))
        bags.append(PatchBag(f"s{i}", feats, rng.uniform(0, 100, (n, 2)), float(t), int(i not in censored)))
    return bags


@pytest.fixture
def small_config():
    """Reduced widths so end-to-end tests run in well under a second per epoch."""
    return PipelineConfig(epochs=2, experts=2, components=8, heads=2, group_size=16,
                          attn_hidden=16, scorer_hidden=16)


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    spec = SyntheticSpec(n_slides=12, seed=5, patches_per_slide=(10, 30), d=8)
    return generate_synthetic_cohort(spec, out)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; it is printed now and again in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(name, ok, detail=""):
        status = "N/A " if ok is None else ("PASS" if ok else "FAIL")
        line = f"{status}  {name}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        assert ok is None or ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
