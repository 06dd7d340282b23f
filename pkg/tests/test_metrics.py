import math

import numpy as np
import pytest

from robself.errors import ContractError
from robself.metrics import REPORT_HEADER, EvalReport, psnr, rmse


@pytest.fixture
def rng():
    return np.random.default_rng(3)


def test_rmse_zero_and_constant(rng):
    gt = rng.random((1, 6, 6))
    assert rmse(gt, gt) == 0.0
    assert rmse(gt + 0.25, gt, scale=4.0) == pytest.approx(1.0, abs=1e-12)


def test_rmse_fixture():
    pred = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    gt = np.array([[[1.5, 2.0], [2.0, 6.0]]])
    assert rmse(pred, gt) == pytest.approx(math.sqrt((0.25 + 0 + 1 + 4) / 4))


def test_rmse_symmetry_triangle_and_scale(rng):
    a, b, c = rng.random((3, 1, 5, 5))
    assert rmse(a, b) == rmse(b, a)
    assert rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-15
    assert rmse(a, b, 3.0) == pytest.approx(3.0 * rmse(a, b))


def test_rmse_shape_mismatch():
    with pytest.raises(ContractError):
        rmse(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


def test_psnr_values(rng):
    gt = np.zeros((1, 10, 10))
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0)
    assert psnr(gt, gt) == math.inf
    a, b = rng.random((2, 1, 4, 4))
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / np.mean((a - b) ** 2)))


def test_report_rows_and_aggregate(rng):
    rep = EvalReport()
    for i in range(3):
        gt = rng.random((1, 4, 4))
        rep.add(f"p{i}", gt + 0.01 * (i + 1), gt)
    agg = rep.aggregate()
    assert agg.rmse == pytest.approx(np.mean([r.rmse for r in rep.rows]))
    assert agg.pixels == 48
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(REPORT_HEADER)
    assert len(lines) == 5 and lines[-1].startswith("mean,")


def test_report_raw_units(rng):
    gt = rng.random((1, 4, 4)) * 1000 + 100
    row = EvalReport().add("d", gt + 10, gt, scale=0.1)
    assert row.rmse == pytest.approx(1.0)
    assert row.psnr == pytest.approx(10 * math.log10(1 / (10 / gt.max()) ** 2))


def test_report_empty():
    with pytest.raises(ContractError):
        EvalReport().aggregate()


def test_report_skips_missing_rows(rng):
    rep = EvalReport()
    gt = rng.random((1, 4, 4))
    rep.add("a", gt + 0.1, gt)
    rep.add_missing("b")
    assert rep.aggregate().rmse == pytest.approx(0.1)
    assert rep.to_csv().splitlines()[2] == "b,nan,nan,0"
