import numpy as np
import pytest

from posefuse.aggregation import AggregatorModel, ModelConfig
from posefuse.features import FeatureStack

SMALL_SPEC = ((4, 8, 8), (6, 16, 16), (8, 32, 32))
TINY_SPEC = ((3, 4, 4), (5, 8, 8))


def random_stack(layer_spec, seed, timestep=0, scale=1.0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    layers = []
    for i, (c, h, w) in enumerate(layer_spec):
        layers.append((f"layer_{i}",
                       (scale * rng.standard_normal((c, h, w))).astype(dtype)))
    return FeatureStack(layers, timestep=timestep)


def small_model(arch="va", seed=0, channels=8, resolution=16,
                layer_spec=TINY_SPEC, dtype=np.float32):
    config = ModelConfig(arch, layer_spec, channels=channels,
                         resolution=resolution, seed=seed)
    return AggregatorModel(config, dtype=dtype)


# acceptance criteria report one line each in the terminal summary so the
# pass/fail verdict survives pytest's output capturing
_ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(num, title): acceptance criterion; reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    num, title = marker.args
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    _ACCEPTANCE_LINES[num] = f"criterion {num:2d} [{status}] {title}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria", sep="-")
    for num in sorted(_ACCEPTANCE_LINES):
        terminalreporter.line(_ACCEPTANCE_LINES[num])
