"""nurdstab command line: synth, train, stabilize, eval, calibrate."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from .correlation import CorrelationConfig
from .errors import CalibrationError, ConfigError, ContractViolation, MetricUnavailable, TrainingError
from .frames import FrameStream, ScanMode, wrap_warp
from .fusion import CnnEstimator, FusionConfig, Stabilizer, write_log
from .gs import measure_nurd_range
from .io import iter_stream_frames, read_manifest, read_stream, read_warps_csv, write_pgm, write_ppm, write_stream, \
    write_warps_csv
from .metrics import MetricsConfig, enface, metrics_report, nurd_mse, rgb_encode
from .nurdnet.serialize import load_model, save_model
from .nurdnet.train import TrainConfig, train
from .phantom import PhantomConfig, flat_target_stack, phantom_stream
from .sheath import ReferenceStack, SheathMask, calibrate_reference
from .synth import AUGMENTATIONS, SynthConfig, distort_sources, expand_range, load_dataset, relative_warp, \
    write_dataset

log = logging.getLogger("nurdstab")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ outputs
@contextlib.contextmanager
def staged_dir(target):
    """Build an output directory next to ``target``; move it into place only on success."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target) if target.is_dir() else target.unlink()
    os.replace(tmp, target)


@contextlib.contextmanager
def staged_file(target):
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, name = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    os.close(fd)
    tmp = Path(name)
    try:
        yield tmp
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    os.replace(tmp, target)


def _pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two integers 'a,b', got {text!r}")
    return a, b


# ---------------------------------------------------------------- commands
def cmd_synth(args) -> int:
    if not args.procedural and not args.inputs:
        raise UsageError("synth needs --procedural or --in <stream>")
    if args.procedural and args.inputs:
        raise UsageError("--procedural and --in are mutually exclusive")
    augment = tuple(a for a in (args.augment or "").split(",") if a)
    if args.procedural:
        pcfg = PhantomConfig(height=args.height, width=args.width,
                             scan_mode=ScanMode(args.scan_mode))
        seeds = np.random.SeedSequence(args.seed).spawn(args.sources)
        sources = [phantom_stream(args.frames, pcfg, rng=np.random.default_rng(s)) for s in seeds]
    else:
        sources = [read_stream(p) for p in args.inputs]
        if args.frames:
            sources = [FrameStream.from_array(s.volume()[: args.frames], s.scan_mode) for s in sources]
    if args.amplitude == "auto":
        lo, hi = 0, 0
        for s in sources:
            a, b = measure_nurd_range(s.frames)
            lo, hi = min(lo, a), max(hi, b)
        amplitude = expand_range((lo, hi))
        print(f"observed NURD range [{lo}, {hi}] A-lines -> amplitude {amplitude:g}")
    else:
        try:
            amplitude = float(args.amplitude)
        except ValueError:
            raise UsageError(f"--amplitude must be a number or 'auto', got {args.amplitude!r}")
    cfg = SynthConfig(amplitude=amplitude, smoothness=args.smoothness, drift_per_frame=args.drift,
                      augment=augment, seed=args.seed)
    cfg.validate()
    distorted = distort_sources(sources, cfg)
    with staged_dir(args.out) as tmp:
        if len(distorted) == 1:
            write_stream(tmp, distorted[0], extra_manifest={"synth": cfg.to_dict()})
        else:
            write_dataset(tmp, distorted, cfg)
    H = distorted[0].shape[0]
    # NURD part of each injected warp: remove the accumulated drift, compare on the circle
    nurd = np.concatenate([wrap_warp(np.stack(d.ground_truth_warps)
                                     - cfg.drift_per_frame * np.arange(len(d))[:, None], H) for d in distorted])
    total_drift = (len(distorted[0]) - 1) * cfg.drift_per_frame * 360.0 / H
    print(f"wrote {len(distorted)} stream(s) of {len(distorted[0])} frames to {args.out}")
    print(f"injected precession {total_drift:.2f} deg; NURD range [{nurd.min():.3f}, {nurd.max():.3f}] A-lines "
          f"(amplitude {amplitude:g})")
    return 0


def cmd_train(args) -> int:
    corr = CorrelationConfig()
    ds = load_dataset(args.inputs[0], corr)
    cfg = TrainConfig(alpha=args.alpha, learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                      seed=args.seed)
    cfg.validate()
    print(f"pairs: train {len(ds.train)}, validation {len(ds.validation)}, test {len(ds.test)}")

    def progress(epoch, tr, val):
        print(f"epoch {epoch}: train {tr:.5f} val {val:.5f}", flush=True)

    net, report = train(ds.train.maps, ds.train.targets, ds.validation.maps, ds.validation.targets, cfg,
                        progress=progress)
    out = Path(args.out)
    report_path = Path(args.log) if args.log else out.with_name(out.name + ".report.csv")
    with staged_file(out) as tmp_model, staged_file(report_path) as tmp_report:
        save_model(net, tmp_model)
        tmp_report.write_text(report.to_csv())
    print(f"best epoch {report.best_epoch}, val MSE {min(report.val_loss):.5f}; model -> {out}")
    return 0


def cmd_stabilize(args) -> int:
    src = Path(args.inputs[0])
    manifest = read_manifest(src)
    mode = ScanMode(manifest["scan_mode"])
    fcfg = FusionConfig(kp=args.kp, ki=args.ki, estimator=args.estimator,
                        overall_rotation_enabled=not args.no_overall, nurd_enabled=not args.no_nurd)
    fcfg.validate()
    estimator = None
    if fcfg.nurd_enabled and fcfg.estimator == "cnn":
        if not args.model:
            raise UsageError("--estimator cnn needs --model")
        if not Path(args.model).is_file():
            raise UsageError(f"model file {args.model} not found")
        estimator = CnnEstimator(load_model(args.model))
    reference = None
    if args.reference:
        ref = read_stream(args.reference)
        reference = ReferenceStack(ref.volume(), buffer_length=min(fcfg.buffer_length, len(ref)))
    elif mode is ScanMode.INTERNAL_PULLBACK and fcfg.overall_rotation_enabled:
        raise UsageError("internal pullback streams need --reference (a calibrated stack)")
    stab = Stabilizer(fcfg, estimator, reference, SheathMask(*args.mask), scan_mode=mode,
                      stream_length=manifest["frame_count"])
    t0 = time.perf_counter()
    frames, totals, results = [], [], []
    for res in stab.run_iter(iter_stream_frames(src)):
        frames.append(res.frame.astype(np.float32))
        totals.append(res.total_warp)
        results.append(res)
    elapsed = time.perf_counter() - t0
    out_stream = FrameStream.from_array(np.stack(frames), mode)
    with staged_dir(args.out) as tmp:
        write_stream(tmp, out_stream, bit_depth=manifest.get("bit_depth", 16),
                     extra_manifest={"stabilized": {"kp": fcfg.kp, "ki": fcfg.ki, "estimator": fcfg.estimator,
                                                    "overall": fcfg.overall_rotation_enabled,
                                                    "nurd": fcfg.nurd_enabled}})
        write_warps_csv(tmp / "correction.csv", totals)
        if args.log:
            write_log(tmp / "log.csv", results)
    if args.log:
        Path(args.log).parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(Path(args.out) / "log.csv", args.log)
    print(f"stabilized {len(frames)} frames at {len(frames) / max(elapsed, 1e-9):.1f} frames/s -> {args.out}")
    return 0


def _write_artifacts(out: Path, stream: FrameStream, prefix: str) -> None:
    ef = enface(stream)
    write_pgm(out / f"{prefix}enface.pgm", ef / max(ef.max(), 1e-12), 8)
    if len(stream) >= 3:
        write_ppm(out / f"{prefix}rgb_0000.ppm", rgb_encode(stream, 0))


def _correction_mse(stabilized_dir: Path, truth: FrameStream) -> float | None:
    corr_file = stabilized_dir / "correction.csv"
    if truth.ground_truth_warps is None or not corr_file.exists():
        return None
    est = read_warps_csv(corr_file)
    gt = truth.ground_truth_warps
    if len(est) != len(gt):
        raise UsageError("correction.csv and ground-truth warps differ in length")
    H = len(gt[0])
    want = np.stack([relative_warp(gt[0], w) for w in gt])
    # compare on the circle: only the wrapped difference is meaningful
    diff = wrap_warp(np.stack(est) - want, H)
    return nurd_mse(diff, np.zeros_like(diff))[0]


def cmd_eval(args) -> int:
    if not 1 <= len(args.inputs) <= 2:
        raise UsageError("eval takes one stream or two (distorted, stabilized)")
    streams = [read_stream(p) for p in args.inputs]
    if len(streams) == 2 and (streams[0].shape, len(streams[0])) != (streams[1].shape, len(streams[1])):
        raise UsageError(f"compared streams differ: {len(streams[0])} x {streams[0].shape} "
                         f"vs {len(streams[1])} x {streams[1].shape}")
    mcfg = MetricsConfig()
    reports = [metrics_report(s, mcfg) for s in streams]
    if len(streams) == 2:
        reports[1]["nurd_mse_deg2"] = _correction_mse(Path(args.inputs[1]), streams[0])
    with staged_dir(args.out) as tmp:
        if len(streams) == 1:
            result = reports[0]
            _write_artifacts(tmp, streams[0], "")
        else:
            result = dict(reports[1])
            result["baseline"] = reports[0]
            reduction = {}
            for key in ("sigma", "mpc_mean", "precession_deg", "local_fluct_mean_deg"):
                a, b = reports[0][key], reports[1][key]
                reduction[key] = None if a in (None, 0) or b is None else 100.0 * (a - b) / a
            result["reduction_percent"] = reduction
            _write_artifacts(tmp, streams[0], "input_")
            _write_artifacts(tmp, streams[1], "output_")
        (tmp / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    for key, v in result.items():
        if not isinstance(v, dict):
            print(f"{key}: {v}")
    if len(streams) == 2:
        for key, v in result["reduction_percent"].items():
            print(f"{key} reduction: " + ("n/a" if v is None else f"{v:.1f}%"))
    return 0


def cmd_calibrate(args) -> int:
    if args.procedural:
        rng = np.random.default_rng(args.seed)
        n = args.frames or 50
        rotations = np.round(rng.uniform(-args.spread / 2, args.spread / 2, n) * 512 / 360)
        raw = flat_target_stack(n, rotations, seed=args.seed)
        print(f"synthetic flat-target stack: {n} frames, injected rotations spanning "
              f"{np.ptp(rotations) * 360 / 512:.1f} deg")
    else:
        if not args.inputs:
            raise UsageError("calibrate needs --in <raw stack> or --procedural")
        raw = read_stream(args.inputs[0])
    stack, report = calibrate_reference(raw, SheathMask(*args.mask), tuple(args.surface_band))
    out_stream = FrameStream.from_array(stack.frames, ScanMode.INTERNAL_PULLBACK)
    with staged_dir(args.out) as tmp:
        write_stream(tmp, out_stream)
        (tmp / "calibration.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"rotational spread {report.residual_before_deg:.2f} deg -> {report.residual_after_deg:.2f} deg")
    return 0


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults; flags override it")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--in", dest="inputs", action="append", default=[], metavar="PATH")
    common.add_argument("--out", metavar="PATH")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nurdstab", description="NURD stabilization of polar image streams")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate distorted streams with ground truth")
    s.add_argument("--procedural", action="store_true", help="use procedural phantom sources")
    s.add_argument("--frames", type=int, default=500)
    s.add_argument("--sources", type=int, default=1, help=">= 3 writes a dataset with a 1:1:1 split")
    s.add_argument("--amplitude", default="4", help="NURD bound A in A-lines, or 'auto'")
    s.add_argument("--smoothness", type=float, default=16.0)
    s.add_argument("--drift", type=float, default=0.0, help="precession per frame, A-lines")
    s.add_argument("--augment", default="", help=f"comma list from {','.join(AUGMENTATIONS)}")
    s.add_argument("--height", type=int, default=512)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--scan-mode", default=ScanMode.ROBOTIC_OUTER_PULLBACK.value,
                   choices=[m.value for m in ScanMode])
    s.set_defaults(func=cmd_synth, need_out=True)

    t = sub.add_parser("train", parents=[common], help="train the NURD network on a synthetic dataset")
    t.add_argument("--alpha", type=float, default=0.2)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--log", help="training report CSV (default: <out>.report.csv)")
    t.set_defaults(func=cmd_train, need_out=True, need_in=True)

    st = sub.add_parser("stabilize", parents=[common], help="stabilize a stream")
    st.add_argument("--model")
    st.add_argument("--reference", help="calibrated reference stack (internal pullback)")
    st.add_argument("--estimator", choices=["cnn", "gs"], default="cnn")
    st.add_argument("--no-overall", action="store_true")
    st.add_argument("--no-nurd", action="store_true")
    st.add_argument("--kp", type=float, default=0.95)
    st.add_argument("--ki", type=float, default=0.02)
    st.add_argument("--log", help="per-frame CSV log")
    st.add_argument("--mask", type=_pair, default=(8, 40), help="sheath band r0,r1")
    st.set_defaults(func=cmd_stabilize, need_out=True, need_in=True)

    e = sub.add_parser("eval", parents=[common], help="metrics for one stream or a before/after pair")
    e.set_defaults(func=cmd_eval, need_out=True, need_in=True)

    c = sub.add_parser("calibrate", parents=[common], help="calibrate a flat-target reference stack")
    c.add_argument("--mask", type=_pair, default=(8, 40))
    c.add_argument("--surface-band", type=_pair, default=(48, 256))
    c.add_argument("--procedural", action="store_true", help="calibrate a synthetic flat-target stack")
    c.add_argument("--frames", type=int, default=0)
    c.add_argument("--spread", type=float, default=60.0, help="synthetic rotation spread, degrees")
    c.set_defaults(func=cmd_calibrate, need_out=True)
    return p


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(values, dict):
            parser.error("config file must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(values) - known
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    if getattr(args, "need_out", False) and not args.out:
        parser.error("--out is required")
    if getattr(args, "need_in", False) and not args.inputs:
        parser.error("--in is required")
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ContractViolation, CalibrationError, TrainingError, MetricUnavailable,
            FileNotFoundError) as exc:
        print(f"nurdstab {args.command}: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, (UsageError, ConfigError)) else 1


if __name__ == "__main__":
    sys.exit(main())
