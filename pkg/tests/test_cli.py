import numpy as np
import pytest

from robself import cli
from robself.data import MisalignSpec, load_pair, make_synthetic_pair, read_pft, save_group, write_image
from robself.model import PRESETS, RobSelfConfig


def smooth(h, w, c):
    yy, xx = np.mgrid[0:h, 0:w]
    base = 0.5 + 0.3 * np.sin(xx / 3.0) * np.cos(yy / 4.0)
    return np.stack([base * (1 - 0.2 * k) for k in range(c)])


@pytest.fixture
def group(tmp_path):
    pair = make_synthetic_pair(smooth(16, 16, 1), smooth(16, 16, 3), MisalignSpec(1, 1, 0, seed=2), 2, name="g0")
    pair.modality = "depth"
    return save_group(tmp_path / "pairs" / "g0", pair, 2)


def fast(*extra):
    return ["--iters", "3", "--channels", "2", *extra]


def test_run_writes_outputs(group, tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.main(["run", "--preset", "real-depth-x2", "--pair", str(group), "--seed", "7", "--out", str(out),
                     *fast()])
    assert code == 0
    names = {p.name for p in out.iterdir()}
    assert {"sr.pft", "sr.png", "trans.pft", "trans.png", "aligned_guide.png", "importance.png", "trace.csv",
            "manifest.txt", "report.csv"} <= names
    assert read_pft(out / "sr.pft").shape == (1, 16, 16)
    assert (out / "trace.csv").read_text().startswith("iter,lr,loss_sr,loss_trans,loss_total,ms\n")
    assert "rmse=" in capsys.readouterr().out


def test_run_deterministic_and_manifest_replay(group, tmp_path):
    args = ["run", "--preset", "real-depth-x2", "--pair", str(group), "--seed", "7", *fast("--variant", "de")]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "sr.pft").read_bytes() == (tmp_path / "b" / "sr.pft").read_bytes()
    manifest = tmp_path / "a" / "manifest.txt"
    cfg = RobSelfConfig.load(manifest)
    assert (cfg.variant, cfg.seed, cfg.iterations, cfg.channels_C) == ("De", 7, 3, 2)
    assert cli.main(["run", "--config", str(manifest), "--pair", str(group), "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "sr.pft").read_bytes() == (tmp_path / "c" / "sr.pft").read_bytes()


def test_run_refuses_to_overwrite(group, tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    args = ["run", "--preset", "real-depth-x2", "--pair", str(group), "--out", str(out), *fast()]
    assert cli.main(args) == 2
    assert (out / "keep.txt").exists()
    assert cli.main(args + ["--force"]) == 0
    assert not (out / "keep.txt").exists()


def test_run_nir_preset_on_depth_pair(group, tmp_path):
    code = cli.main(["run", "--preset", "real-nir-x2", "--pair", str(group), "--out", str(tmp_path / "o"), *fast()])
    assert code == 3


def test_run_channel_mismatch(tmp_path):
    write_image(tmp_path / "s.png", smooth(8, 8, 3))
    write_image(tmp_path / "g.png", smooth(16, 16, 3))
    code = cli.main(["run", "--preset", "real-depth-x2", "--source", str(tmp_path / "s.png"),
                     "--guide", str(tmp_path / "g.png"), "--out", str(tmp_path / "o"), *fast()])
    assert code == 3


def test_run_missing_pair(tmp_path):
    assert cli.main(["run", "--preset", "real-depth-x2", "--pair", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "o"), *fast()]) == 3


def test_run_bad_arguments(tmp_path):
    with pytest.raises(SystemExit) as info:
        cli.main(["run", "--preset", "no-such-preset", "--out", str(tmp_path)])
    assert info.value.code == 2
    assert cli.main(["run", "--preset", "real-depth-x2", "--out", str(tmp_path / "o")]) == 2


def test_run_divergence_exit_code(group, tmp_path):
    cfg = tmp_path / "bad.txt"
    cfg.write_text("lr_init=1e200\n")
    with np.errstate(all="ignore"):
        code = cli.main(["run", "--preset", "real-depth-x2", "--config", str(cfg), "--pair", str(group),
                         "--out", str(tmp_path / "o"), "--iters", "50", "--channels", "2"])
    assert code == 4
    assert (tmp_path / "o" / "trace.csv").exists()


def test_run_center_crops_indivisible(tmp_path, caplog):
    pair = make_synthetic_pair(smooth(20, 28, 1), smooth(20, 28, 3), MisalignSpec(0, 0, 0), 2, name="odd")
    group = save_group(tmp_path / "odd", pair, 2)
    out = tmp_path / "o"
    assert cli.main(["run", "--preset", "real-depth-x2", "--pair", str(group), "--out", str(out), *fast()]) == 0
    assert read_pft(out / "sr.pft").shape == (1, 16, 24)
    assert "center-cropping" in caplog.text


def test_crop_keeps_lr_registration():
    pair = make_synthetic_pair(smooth(20, 28, 1), smooth(20, 28, 3), MisalignSpec(0, 0, 0), 2)
    cropped = cli._divisible_crop(pair, PRESETS["real-depth-x2"])
    from robself.data import degrade

    np.testing.assert_array_equal(degrade(cropped.gt_hr, 2), cropped.source_lr)


def test_bench_reports_in_order(tmp_path):
    root = tmp_path / "pairs"
    for i in (2, 0, 1):
        pair = make_synthetic_pair(smooth(16, 16, 1) * (0.5 + 0.1 * i), smooth(16, 16, 3),
                                   MisalignSpec(1, 1, 0, seed=i), 2, name=f"p{i}")
        save_group(root / f"p{i}", pair, 2)
    out = tmp_path / "bench"
    code = cli.main(["bench", "--preset", "real-depth-x2", "--pairs", str(root), "--out", str(out), "--jobs", "2",
                     *fast()])
    assert code == 0
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0] == "pair,rmse,psnr,pixels"
    assert [line.split(",")[0] for line in lines[1:]] == ["p0", "p1", "p2", "mean"]
    rmses = [float(line.split(",")[1]) for line in lines[1:]]
    assert rmses[3] == pytest.approx(np.mean(rmses[:3]))


def test_bench_ablate_all(tmp_path, group):
    out = tmp_path / "bench"
    code = cli.main(["bench", "--preset", "real-depth-x2", "--pairs", str(group.parent), "--out", str(out),
                     "--ablate", "all", *fast()])
    assert code == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == list(cli.ABLATIONS)


def test_bench_records_failures(tmp_path, group):
    broken = group.parent / "broken"
    broken.mkdir()
    out = tmp_path / "bench"
    assert cli.main(["bench", "--preset", "real-depth-x2", "--pairs", str(group.parent), "--out", str(out),
                     *fast()]) == 0
    text = (out / "report.csv").read_text()
    assert "broken,nan,nan,0" in text
    assert (out / "errors_none.txt").exists()


def test_bench_all_fail(tmp_path):
    root = tmp_path / "pairs"
    (root / "x").mkdir(parents=True)
    assert cli.main(["bench", "--preset", "real-depth-x2", "--pairs", str(root), "--out", str(tmp_path / "o"),
                     *fast()]) == 3


def synth_inputs(root):
    for i in range(2):
        d = root / f"img{i}"
        d.mkdir(parents=True)
        write_image(d / "source.png", smooth(16, 16, 1) * (0.9 - 0.1 * i))
        write_image(d / "guide.png", smooth(16, 16, 3))
    return root


def test_synth_reproducible_and_replayable(tmp_path):
    src = synth_inputs(tmp_path / "in")
    args = ["synth", "--input", str(src), "--trans", "3", "--rot", "2", "--persp", "0.02", "--factor", "2",
            "--seed", "1"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("img0", "img1"):
        a = tmp_path / "a" / name
        assert (a / "guide_x2.pft").read_bytes() == (tmp_path / "b" / name / "guide_x2.pft").read_bytes()
        pair = load_pair(a, "realmis", 2)
        from robself.data import read_image, warp_homography

        guide, _ = read_image(src / name / "guide.png")
        np.testing.assert_array_equal(warp_homography(guide, pair.homography), pair.guide_hr)


def test_synth_zero_spec(tmp_path):
    src = synth_inputs(tmp_path / "in")
    assert cli.main(["synth", "--input", str(src), "--trans", "0", "--rot", "0", "--persp", "0",
                     "--out", str(tmp_path / "o")]) == 0
    from robself.data import read_image

    guide, _ = read_image(src / "img0" / "guide.png")
    np.testing.assert_array_equal(load_pair(tmp_path / "o" / "img0", "realmis", 2).guide_hr, guide)


def test_synth_unreadable_input(tmp_path):
    assert cli.main(["synth", "--input", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3


def test_gradcheck_single_op(capsys):
    assert cli.main(["gradcheck", "--op", "grid_sample"]) == 0
    out = capsys.readouterr().out
    assert "grid_sample" in out and "model/" not in out


def test_gradcheck_unattainable_tolerance():
    assert cli.main(["gradcheck", "--op", "conv2d", "--tolerance", "1e-12"]) == 1


def test_gradcheck_unknown_op():
    assert cli.main(["gradcheck", "--op", "fft"]) == 2


def test_config_dump_preset_round_trip(capsys):
    assert cli.main(["config", "--dump-preset", "syn-depth-x8"]) == 0
    text = capsys.readouterr().out
    assert RobSelfConfig.from_text(text) == PRESETS["syn-depth-x8"]


def test_config_overrides(capsys):
    assert cli.main(["config", "--preset", "real-depth-x4", "--variant", "de", "--eta", "none", "--m", "9"]) == 0
    cfg = RobSelfConfig.from_text(capsys.readouterr().out)
    assert (cfg.variant, cfg.eta, cfg.kernel_m, cfg.level_i) == ("De", None, 9, 4)


def test_threads_env(monkeypatch, capsys):
    monkeypatch.setenv("ROBSELF_THREADS", "1")
    assert cli.main(["config", "--list"]) == 0
    monkeypatch.setenv("ROBSELF_THREADS", "zero")
    assert cli.main(["config", "--list"]) == 2
