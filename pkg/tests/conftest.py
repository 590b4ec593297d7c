import time

import numpy as np
import pytest

from vesselnet import compress as cp
from vesselnet import netcore as nc
from vesselnet.synthetic import synthetic_patches

CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line in CRITERIA:
        terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA.append(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture(scope="session")
def synthetic_run():
    """Baseline, FCL-quantized, pruned and fully quantized nets on generated patches."""
    t0 = time.perf_counter()
    train = synthetic_patches(20_000, seed=1)
    test = synthetic_patches(5_000, seed=2)
    val = synthetic_patches(2_000, seed=3)
    net = nc.reference_architecture(seed=0)
    nc.train_epochs(net, *train, epochs=8, learning_rate=0.05, batch_size=64,
                    rng=np.random.default_rng(0))
    quant_schedule = cp.CompressionSchedule(quant_rounds=3, tolerance=0.005)
    quant = cp.quantize_retrain(net, train, val, quant_schedule)
    pruned = cp.prune_retrain(quant.network, train, val,
                              cp.CompressionSchedule(prune_rounds=2, prune_k=1.0, tolerance=0.01))
    full = cp.quantize_retrain(net, train, val, quant_schedule, include_conv=True)
    return {
        "baseline": nc.accuracy(net, *test),
        "quantized": nc.accuracy(quant.network, *test),
        "pruned": nc.accuracy(pruned.network, *test),
        "full": nc.accuracy(full.network, *test),
        "removal": cp.conv_removal_fraction(pruned.network),
        "seconds": time.perf_counter() - t0,
        "networks": (net, quant.network, pruned.network, full.network),
    }
