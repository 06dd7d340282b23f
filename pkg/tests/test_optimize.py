import numpy as np
import pytest

from robself import diffengine as de
from robself.data import ImagePair, MisalignSpec, broadcast, make_synthetic_pair, translation_homography
from robself.diffengine import Parameter
from robself.errors import ContractError, DivergenceError
from robself.model import ModelState, forward, preset
from robself.optimize import (
    TRACE_HEADER,
    AdamState,
    OptimTrace,
    adam_step,
    consistency_loss,
    lr_at,
    optimize_pair,
)


@pytest.fixture
def rng():
    return np.random.default_rng(5)


def smooth_pair(size=16, factor=2, spec=None, hmat=None):
    yy, xx = np.mgrid[0:size, 0:size] / size
    gray = (0.5 + 0.3 * np.sin(6 * xx) * np.cos(4 * yy))[None]
    rgb = np.concatenate([gray, 0.8 * gray + 0.1, 1 - gray])
    return make_synthetic_pair(gray, rgb, spec or MisalignSpec(0, 0, 0), factor, homography=hmat)


def tiny(**kw):
    kw.setdefault("channels_C", 4)
    kw.setdefault("iterations", 20)
    return preset("real-depth-x2", **kw)


# -- schedule -----------------------------------------------------------------------


def test_lr_schedule_examples():
    assert lr_at(0, 0.002, 0.9998, 5) == 0.002
    assert lr_at(4, 0.002, 0.9998, 5) == 0.002
    assert lr_at(5, 0.002, 0.9998, 5) == 0.002 * 0.9998
    assert abs(lr_at(1000, 0.002, 0.9998, 5) - 0.002 * 0.9998**200) < 1e-12
    assert lr_at(1000, 0.002, 0.9998, 5) == pytest.approx(1.9216e-3, abs=1e-7)


def test_lr_schedule_monotone():
    lrs = [lr_at(i, 0.002, 0.9998, 5) for i in range(200)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ContractError):
        lr_at(-1, 0.002, 0.9998, 5)


# -- loss -----------------------------------------------------------------------------


def test_loss_zero_on_broadcast(rng):
    lr = rng.random((1, 4, 4))
    pred = de.constant(broadcast(lr, 2))
    total, _, _ = consistency_loss(pred, pred, lr, 2)
    assert total.value == 0.0


def test_loss_trans_offset_by_one(rng):
    lr = rng.random((1, 4, 4))
    total, l_sr, l_t = consistency_loss(de.constant(broadcast(lr, 2)), de.constant(broadcast(lr, 2) + 1), lr, 2, 1.0)
    assert (float(total.value), float(l_sr.value), float(l_t.value)) == (1.0, 0.0, 1.0)


def test_loss_lambda_zero(rng):
    lr = rng.random((1, 4, 4))
    a, b = de.constant(rng.random((1, 8, 8))), de.constant(rng.random((1, 8, 8)))
    total, l_sr, _ = consistency_loss(a, b, lr, 2, 0.0)
    assert float(total.value) == float(l_sr.value)


def test_loss_symmetric_at_unit_lambda(rng):
    lr = rng.random((1, 4, 4))
    a, b = de.constant(rng.random((1, 8, 8))), de.constant(rng.random((1, 8, 8)))
    assert consistency_loss(a, b, lr, 2)[0].value == consistency_loss(b, a, lr, 2)[0].value


def test_loss_shape_mismatch(rng):
    with pytest.raises(ContractError):
        consistency_loss(de.constant(np.zeros((1, 8, 8))), None, np.zeros((1, 3, 3)), 2)


def test_loss_without_translation(rng):
    lr = rng.random((1, 4, 4))
    total, l_sr, l_t = consistency_loss(de.constant(rng.random((1, 8, 8))), None, lr, 2)
    assert l_t is None and total is l_sr


# -- Adam -------------------------------------------------------------------------------


def test_adam_zero_gradient():
    p = Parameter(np.array([1.0, -2.0]), "p")
    st = AdamState()
    adam_step(st, [p], {"p": np.zeros(2)}, 0.1)
    np.testing.assert_array_equal(p.value, [1.0, -2.0])
    assert st.step == 1 and not st.m["p"].any() and not st.v["p"].any()


def test_adam_first_steps_are_lr_sized():
    p = Parameter(np.array([0.0]), "p")
    st = AdamState()
    adam_step(st, [p], {"p": np.array([3.0])}, 0.01)
    assert p.value[0] == pytest.approx(-0.01, rel=1e-6)
    adam_step(st, [p], {"p": np.array([3.0])}, 0.01)
    assert p.value[0] == pytest.approx(-0.02, rel=1e-6)


def test_adam_moment_shapes(rng):
    p = Parameter(rng.normal(size=(2, 3)), "p")
    st = AdamState()
    adam_step(st, [p], {"p": rng.normal(size=(2, 3))}, 0.01)
    assert st.m["p"].shape == st.v["p"].shape == (2, 3)


def test_adam_deterministic(rng):
    g = rng.normal(size=(5,))
    outs = []
    for _ in range(2):
        p = Parameter(np.ones(5), "p")
        st = AdamState()
        for _ in range(3):
            adam_step(st, [p], {"p": g}, 0.01)
        outs.append(p.value.copy())
    np.testing.assert_array_equal(*outs)


def test_adam_nan_names_parameter():
    p = Parameter(np.ones(2), "head.sr.bias")
    with pytest.raises(DivergenceError, match="head.sr.bias"):
        adam_step(AdamState(), [p], {"head.sr.bias": np.array([1.0, np.nan])}, 0.01)


# -- optimize_pair ------------------------------------------------------------------------


def test_zero_iterations_returns_initial_forward():
    pair = smooth_pair()
    cfg = tiny(iterations=0)
    res = optimize_pair(pair, cfg)
    ref = forward(pair.source_lr, pair.guide_hr, ModelState(cfg))
    np.testing.assert_array_equal(res.sr, ref.sr.value)
    assert res.trace.records == []


def test_trace_structure():
    cfg = tiny(iterations=12)
    res = optimize_pair(smooth_pair(), cfg)
    assert len(res.trace.records) == 12
    np.testing.assert_array_equal(res.trace.column("lr"), [lr_at(i, 0.002, 0.9998, 5) for i in range(12)])
    text = res.trace.to_csv()
    assert text.splitlines()[0] == ",".join(TRACE_HEADER)
    assert len(text.splitlines()) == 13
    assert res.trace.final_large_fraction is not None


def test_optimize_deterministic():
    cfg = tiny(iterations=8, variant="De")
    a = optimize_pair(smooth_pair(), cfg)
    b = optimize_pair(smooth_pair(), cfg)
    np.testing.assert_array_equal(a.sr, b.sr)
    assert a.trace.to_csv(include_time=False) == b.trace.to_csv(include_time=False)


def test_loss_decreases():
    res = optimize_pair(smooth_pair(32), tiny(iterations=150, channels_C=8))
    total = res.trace.column("loss_total")
    assert total[-1] < 0.5 * total[0]


def test_raw_depth_is_rescaled():
    pair = smooth_pair()
    unit = ImagePair(pair.source_lr / pair.source_lr.max(), pair.guide_hr)
    scaled = ImagePair(pair.source_lr * 1000, pair.guide_hr, pair.gt_hr * 1000)
    a = optimize_pair(unit, tiny(iterations=3))
    b = optimize_pair(scaled, tiny(iterations=3))
    np.testing.assert_allclose(b.sr, 1000 * a.sr * pair.source_lr.max(), rtol=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_partial_trace():
    pair = smooth_pair()
    with pytest.raises(DivergenceError) as info:
        optimize_pair(pair, tiny(iterations=50, lr_init=1e200))
    assert isinstance(info.value.trace, OptimTrace)
    assert len(info.value.trace.records) >= 1


@pytest.mark.slow
def test_alignment_beats_bypass_on_translation():
    # 6 px is beyond what the guide path's 3x3 stack can absorb without a warp
    from natural_suite import crop, gray

    rgb = crop("astronaut", 100, 180, size=64)
    pair = make_synthetic_pair(gray(rgb), rgb, MisalignSpec(0, 0, 0), 2, homography=translation_homography(6, 0))
    full = optimize_pair(pair, tiny(iterations=300, channels_C=8))
    bypass = optimize_pair(pair, tiny(iterations=300, channels_C=8, bypass_alignment=True))
    assert full.trace.records[-1].loss_trans < bypass.trace.records[-1].loss_trans
