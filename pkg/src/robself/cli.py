"""Command-line entry point: ``run``, ``bench``, ``synth``, ``gradcheck`` and ``config``.

Exit codes: 0 success, 1 gradient check failure, 2 bad arguments,
3 input contract violation, 4 divergence.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import diffengine as de
from .data import (
    ImagePair,
    MisalignSpec,
    find_image,
    load_pair,
    make_synthetic_pair,
    read_image,
    save_group,
    to_display,
    write_image,
    write_pft,
)
from .errors import ContractError, DivergenceError
from .metrics import EvalReport
from .model import PRESETS, RobSelfConfig
from .optimize import optimize_pair

log = logging.getLogger("robself")

EXIT_OK, EXIT_CHECK, EXIT_ARGS, EXIT_CONTRACT, EXIT_DIVERGED = 0, 1, 2, 3, 4

ABLATIONS = {
    "none": {},
    "no-translator": {"use_translator": False},
    "no-filter": {"use_filter": False},
    "no-translator-no-filter": {"use_translator": False, "use_filter": False},
}


class UsageError(Exception):
    """Arguments are individually valid but do not fit together."""


# ---------------------------------------------------------------------------
# configuration


def preset_modality(name: str | None) -> str | None:
    if not name:
        return None
    return "nir" if "nir" in name else "depth"


def resolve_config(args) -> tuple[RobSelfConfig, str]:
    """Preset, then config file, then explicit flags.  Returns the config and precision."""
    precision = None
    if args.preset:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; available: {', '.join(PRESETS)}")
        cfg = PRESETS[args.preset]
    else:
        cfg = RobSelfConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        text = path.read_text()
        cfg = RobSelfConfig.from_text(text, cfg)
        for raw in text.splitlines():
            key, _, value = raw.split("#", 1)[0].partition("=")
            if key.strip() == "precision":
                precision = value.strip()
    overrides = {}
    for flag, name in (("iters", "iterations"), ("level_i", "level_i"),
                       ("m", "kernel_m"), ("n", "kernel_n"), ("channels", "channels_C"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "variant", None):
        overrides["variant"] = {"re": "Re", "de": "De"}[args.variant.lower()]
    eta = getattr(args, "eta", None)
    if eta is not None:
        overrides["eta"] = None if eta.lower() == "none" else float(eta)
    cfg = cfg.replace(**overrides)
    precision = args.precision or precision or "f64"
    return cfg, precision


def _divisible_crop(pair: ImagePair, cfg: RobSelfConfig) -> ImagePair:
    """Center-crop so the guide is a multiple of ``2**level_i`` and of the SR factor."""
    f = cfg.sr_factor
    mult = math.lcm(cfg.multiple, f)
    _, big_h, big_w = pair.guide_hr.shape
    new_h, new_w = big_h - big_h % mult, big_w - big_w % mult
    if (new_h, new_w) == (big_h, big_w):
        return pair
    if new_h == 0 or new_w == 0:
        raise ContractError(f"{pair.name}: guide {big_h}x{big_w} is smaller than the required multiple {mult}")
    top = ((big_h - new_h) // 2) // f * f
    left = ((big_w - new_w) // 2) // f * f
    log.warning("%s: guide %dx%d is not divisible by %d; center-cropping to %dx%d",
                pair.name, big_h, big_w, mult, new_h, new_w)

    def crop(arr, s):
        if arr is None:
            return None
        return arr[:, top // s : (top + new_h) // s, left // s : (left + new_w) // s].copy()

    return ImagePair(crop(pair.source_lr, f), crop(pair.guide_hr, 1), crop(pair.gt_hr, 1), pair.value_scale,
                     pair.name, pair.modality, pair.homography, pair.meta)


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_modality(pair: ImagePair, cfg_preset: str | None):
    expected = preset_modality(cfg_preset)
    if expected and pair.modality and pair.modality != expected:
        raise ContractError(f"{pair.name}: preset {cfg_preset} expects a {expected} pair, got {pair.modality}")


def _load_for_run(args, cfg: RobSelfConfig) -> ImagePair:
    layout = args.layout or ("realmis" if args.pair else "flat")
    if layout == "realmis" and args.pair:
        pair = load_pair(args.pair, "realmis", cfg.sr_factor, phi=cfg.phi, psi=cfg.psi)
    elif layout == "flat" and args.source and args.guide:
        pair = load_pair(layout="flat", factor=cfg.sr_factor, source=args.source, guide=args.guide, gt=args.gt,
                         phi=cfg.phi, psi=cfg.psi)
    else:
        raise UsageError("give --pair DIR (realmis) or both --source and --guide (flat)")
    _check_modality(pair, args.preset)
    return _divisible_crop(pair, cfg)


# ---------------------------------------------------------------------------
# outputs


def _aligned_guide(guide: np.ndarray, field: np.ndarray | None, variant: str) -> np.ndarray:
    """The guide image resampled by the (tap-averaged) deformation field."""
    if field is None:
        return guide
    if variant == "De":
        field = np.stack([field[0::2].mean(axis=0), field[1::2].mean(axis=0)])
    with de.precision("f64"):
        return de.grid_sample(guide, field).value


def _write_prediction(out: Path, stem: str, arr: np.ndarray, raw_units: bool):
    write_pft(out / f"{stem}.pft", arr)
    if raw_units:
        write_image(out / f"{stem}.png", arr, bits=16)
    else:
        write_image(out / f"{stem}.png", np.clip(arr, 0.0, 1.0))


def write_manifest(path: Path, cfg: RobSelfConfig, preset: str | None, precision: str, inputs: dict,
                   started: str, finished: str):
    lines = [f"tool_version={__version__}", f"preset={preset or 'none'}", f"precision={precision}"]
    lines += [f"input.{k}={v}" for k, v in inputs.items()]
    lines += [f"started={started}", f"finished={finished}"]
    path.write_text("\n".join(lines) + "\n" + cfg.to_text())


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    cfg, precision = resolve_config(args)
    out = _prepare_out(args.out, args.force)
    pair = _load_for_run(args, cfg)
    started = _now()
    de.set_precision(precision)
    res = optimize_pair(pair, cfg, progress_every=args.progress)
    raw = bool(pair.source_lr.max() > 1.0)
    _write_prediction(out, "sr", res.sr, raw)
    if res.trans is not None:
        _write_prediction(out, "trans", res.trans, raw)
    d = res.diagnostics
    write_image(out / "aligned_guide.png", np.clip(_aligned_guide(pair.guide_hr, d.field, cfg.variant), 0, 1))
    if d.field is not None:
        write_pft(out / "field.pft", d.field)
    if d.m_imp is not None:
        write_image(out / "importance.png", to_display(d.m_imp)[None])
    (out / "trace.csv").write_text(res.trace.to_csv())
    if pair.gt_hr is not None:
        report = EvalReport()
        row = report.add(pair.name, res.sr, pair.gt_hr, pair.value_scale)
        (out / "report.csv").write_text(report.to_csv())
        print(f"{pair.name}: rmse={row.rmse:.6g} psnr={row.psnr:.3f} dB")
    inputs = {"pair": args.pair} if args.pair else {"source": args.source, "guide": args.guide, "gt": args.gt}
    write_manifest(out / "manifest.txt", cfg, args.preset, precision, inputs, started, _now())
    print(f"wrote {out}")
    return EXIT_OK


def _bench_worker(job):
    group, cfg, precision, preset_name, threads = job
    with threadpool_limits(limits=threads):
        de.set_precision(precision)
        try:
            pair = load_pair(group, "realmis", cfg.sr_factor, phi=cfg.phi, psi=cfg.psi)
            _check_modality(pair, preset_name)
            pair = _divisible_crop(pair, cfg)
            res = optimize_pair(pair, cfg)
        except (ContractError, FileNotFoundError, DivergenceError, OSError) as exc:
            return group.name, None, None, None, f"{type(exc).__name__}: {exc}"
    return group.name, res.sr, pair.gt_hr, pair.value_scale, None


def cmd_bench(args) -> int:
    cfg, precision = resolve_config(args)
    root = Path(args.pairs)
    if not root.is_dir():
        raise UsageError(f"pair directory not found: {root}")
    groups = sorted(p for p in root.iterdir() if p.is_dir())
    if not groups:
        raise ContractError(f"{root} contains no pair groups")
    out = _prepare_out(args.out, args.force)
    names = list(ABLATIONS) if args.ablate == "all" else [args.ablate]
    summary = []
    any_ok = False
    for ablation in names:
        acfg = cfg.replace(**ABLATIONS[ablation])
        jobs = [(g, acfg, precision, args.preset, _threads()) for g in groups]
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_bench_worker, jobs))
        else:
            results = [_bench_worker(j) for j in jobs]
        report = EvalReport()
        errors = []
        for name, sr, gt, scale, err in results:
            if err is not None:
                log.error("%s failed: %s", name, err)
                errors.append(f"{name}: {err}")
                report.add_missing(name)
                continue
            any_ok = True
            if gt is None:
                report.add_missing(name)
            else:
                report.add(name, sr, gt, scale)
        target = out / ("report.csv" if len(names) == 1 else f"report_{ablation}.csv")
        target.write_text(report.to_csv())
        if errors:
            (out / f"errors_{ablation}.txt").write_text("\n".join(errors) + "\n")
        if any(r.pixels for r in report.rows):
            agg = report.aggregate()
            summary.append((ablation, agg.rmse, agg.psnr))
            print(f"{ablation}: mean rmse={agg.rmse:.6g} psnr={agg.psnr:.3f} dB over {len(groups)} pairs")
    if len(names) > 1 and summary:
        text = "ablation,rmse,psnr\n" + "".join(f"{a},{r!r},{p!r}\n" for a, r, p in summary)
        (out / "ablation.csv").write_text(text)
    write_manifest(out / "manifest.txt", cfg, args.preset, precision, {"pairs": root}, "n/a", _now())
    return EXIT_OK if any_ok else EXIT_CONTRACT


def _synth_inputs(root: Path) -> list[tuple[str, Path, Path]]:
    dirs = [root] if find_image(root, "source", required=False) else sorted(p for p in root.iterdir() if p.is_dir())
    found = []
    for d in dirs:
        src = find_image(d, "source", required=False)
        gde = find_image(d, "guide", required=False)
        if src and gde:
            found.append((d.name, src, gde))
    if not found:
        raise ContractError(f"{root}: no source.*/guide.* pairs found")
    return found


def cmd_synth(args) -> int:
    root = Path(args.input)
    if not root.is_dir():
        raise ContractError(f"input directory not found: {root}")
    inputs = _synth_inputs(root)
    out = _prepare_out(args.out, args.force)
    for i, (name, src_path, guide_path) in enumerate(inputs):
        src, bits = read_image(src_path)
        guide, _ = read_image(guide_path)
        spec = MisalignSpec(args.trans, args.rot, args.persp, seed=args.seed + i)
        pair = make_synthetic_pair(src, guide, spec, args.factor, name=name)
        pair.modality = args.modality or ("depth" if bits == 16 else None)
        save_group(out / name, pair, args.factor)
        print(f"{name}: source {pair.source_lr.shape} guide {pair.guide_hr.shape}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import OPERATORS, run_suite

    requested = args.op or []
    unknown = [o for o in requested if o not in OPERATORS and o != "model"]
    if unknown:
        raise UsageError(f"unknown operator(s) {', '.join(unknown)}; choose from {', '.join(OPERATORS)}, model")
    models = not requested or "model" in requested
    ops = [o for o in requested if o != "model"] if requested else None

    def show(res):
        flag = "ok  " if res.passed else "FAIL"
        print(f"{flag} {res.name:<32s} max_rel_err={res.max_error:.3e}")
        if args.verbose or not res.passed:
            for line in res.report.lines():
                print("     " + line)

    results = run_suite(ops, models, args.tolerance, args.max_entries, args.seed or 0, show)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks below tolerance {args.tolerance:g}")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_config(args) -> int:
    if args.list:
        print("\n".join(PRESETS))
        return EXIT_OK
    if args.dump_preset:
        if args.dump_preset not in PRESETS:
            raise UsageError(f"unknown preset {args.dump_preset!r}; available: {', '.join(PRESETS)}")
        sys.stdout.write(PRESETS[args.dump_preset].to_text())
        return EXIT_OK
    cfg, precision = resolve_config(args)
    sys.stdout.write(f"precision={precision}\n" + cfg.to_text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _threads() -> int | None:
    value = os.environ.get("ROBSELF_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"ROBSELF_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"ROBSELF_THREADS must be a positive integer, got {value!r}")
    return n


def _common(p: argparse.ArgumentParser, out_required: bool = False):
    p.add_argument("--preset", choices=list(PRESETS), help="task preset")
    p.add_argument("--config", help="key=value config file (a manifest.txt also works)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--jobs", type=int, default=1, help="pairs optimized concurrently")
    p.add_argument("--precision", choices=["f32", "f64"], help="float precision (default f64)")


def _overrides(p: argparse.ArgumentParser):
    p.add_argument("--variant", type=str.lower, choices=["re", "de"])
    p.add_argument("--iters", type=int, help="optimization iterations")
    p.add_argument("--level-i", dest="level_i", type=int, help="misalignment estimator depth")
    p.add_argument("--eta", help="threshold scale, or 'none' to disable thresholding")
    p.add_argument("--m", type=int, help="large filter kernel size")
    p.add_argument("--n", type=int, help="small filter kernel size")
    p.add_argument("--channels", type=int, help="feature width C")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robself", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"robself {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="super-resolve one pair")
    _common(p, out_required=True)
    _overrides(p)
    p.add_argument("--pair", help="realmis group directory")
    p.add_argument("--layout", choices=["realmis", "flat"], help="input layout (inferred from the flags)")
    p.add_argument("--source", help="flat layout: LR source image")
    p.add_argument("--guide", help="flat layout: HR guide image")
    p.add_argument("--gt", help="flat layout: optional HR ground truth")
    p.add_argument("--progress", type=int, default=0, metavar="N", help="log the loss every N iterations")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="optimize and score every group in a directory")
    _common(p, out_required=True)
    _overrides(p)
    p.add_argument("--pairs", required=True, help="directory of realmis groups")
    p.add_argument("--ablate", choices=list(ABLATIONS) + ["all"], default="none",
                   help="switch off model parts; 'all' runs the four-way comparison")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="make misaligned synthetic groups from aligned HR pairs")
    _common(p, out_required=True)
    p.add_argument("--input", required=True, help="directory of aligned source.*/guide.* pairs")
    p.add_argument("--trans", type=float, default=8.0, help="translation range in pixels")
    p.add_argument("--rot", type=float, default=4.0, help="rotation range in degrees")
    p.add_argument("--persp", type=float, default=0.02, help="corner jitter relative to the short side")
    p.add_argument("--factor", type=int, default=2, choices=[2, 4, 8])
    p.add_argument("--modality", choices=["depth", "nir"], help="modality recorded in meta.txt")
    p.set_defaults(func=cmd_synth, seed=0)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--op", action="append", help="restrict to one operator (repeatable); 'model' for the model")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--max-entries", type=int, default=6, help="sampled entries per model parameter")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("config", help="print presets or the resolved configuration")
    _common(p)
    _overrides(p)
    p.add_argument("--dump-preset", metavar="NAME")
    p.add_argument("--list", action="store_true", help="list preset names")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "progress", 0):
        log.setLevel(logging.INFO)
        logging.getLogger("robself.optimize").setLevel(logging.INFO)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        threads = _threads()
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        print(f"robself: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except DivergenceError as exc:
        print(f"robself: diverged: {exc}", file=sys.stderr)
        if exc.trace is not None and getattr(args, "out", None):
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "trace.csv").write_text(exc.trace.to_csv())
        return EXIT_DIVERGED
    except (ContractError, FileNotFoundError) as exc:
        print(f"robself: input error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    finally:
        de.set_precision("f64")


if __name__ == "__main__":
    sys.exit(main())
