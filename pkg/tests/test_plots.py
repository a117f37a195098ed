import os
import tempfile

from dpke.plots import per_class_ap, supervision_distribution, threshold_sweep
from tests.helpers import read_bytes


def test_threshold_sweep_draws_every_curve_deterministically():
    curves = {
        "full": [(0.7, (0.40, 0.02)), (0.5, (0.41, 0.01)), (0.6, (0.42, 0.02))],
        "baseline": [(0.5, (0.20, 0.05)), (0.6, (0.30, 0.03)), (0.7, (0.35, 0.02))],
    }
    with tempfile.TemporaryDirectory() as tmpdir:
        first = os.path.join(tmpdir, "a.svg")
        second = os.path.join(tmpdir, "b.svg")
        threshold_sweep(first, curves)
        threshold_sweep(second, curves)
        data = read_bytes(first)
        assert data.lstrip().startswith(b"<?xml")
        assert data == read_bytes(second)
        threshold_sweep(second, {"full": curves["full"]})
        assert read_bytes(second) != data


def test_bar_charts_write_svg():
    with tempfile.TemporaryDirectory() as tmpdir:
        bars = os.path.join(tmpdir, "bars.svg")
        per_class_ap(bars, ["cabinet", "table"], {"a": [0.1, 0.2], "c": [0.3, 0.1]})
        stacked = os.path.join(tmpdir, "stacked.svg")
        supervision_distribution(stacked, {"0.5": [0.25, 0.25, 0.25, 0.25],
                                           "0.6": [0.1, 0.2, 0.3, 0.4]})
        assert b"<svg" in read_bytes(bars)
        assert b"<svg" in read_bytes(stacked)
