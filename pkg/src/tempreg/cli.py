"""Command-line interface: ``tempreg {phantom,preprocess,register,evaluate}``.

Exit codes: 0 success, 2 usage, 3 input or file format, 4 numerical failure.
"""
import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time

from . import __version__, _kernels
from .errors import (DegenerateMetricError, FormatError, InvalidInputError, OptimizationError,
                     TempRegError)
from .evaluation import evaluate_series, write_report
from .image import resample, split_interleaved
from .io import load_image, load_labels, load_mask, save_image
from .phantom import MotionSpec, PhantomSpec, make_phantom
from .pipeline import PipelineConfig, SeriesAlignment, align_series
from .transforms import to_dict

log = logging.getLogger("tempreg")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Resolved configuration, hashed inputs, tool version and stage timings."""

    def __init__(self, command, config):
        self.command = command
        self.config = config
        self.inputs = []
        self.outputs = []
        self.timings = {}

    def add_inputs(self, paths):
        for p in paths:
            self.inputs.append({"path": str(p), "sha256": _sha256(p)})

    def add_output(self, path):
        self.outputs.append(str(path))

    @contextlib.contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 6)

    def to_dict(self):
        return {"tool": "tempreg", "version": __version__, "command": self.command,
                "config": self.config, "inputs": self.inputs, "outputs": self.outputs,
                "backend": _kernels.backend(), "timings": self.timings}

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise FormatError(path, f"cannot read: {exc}") from exc
    except ValueError as exc:
        raise FormatError(path, f"invalid JSON: {exc}") from exc


def _template_arg(s):
    if s == "middle":
        return s
    try:
        return int(s)
    except ValueError:
        raise argparse.ArgumentTypeError("--template takes an integer index or 'middle'")


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------

def cmd_phantom(args):
    conf = _load_json(args.config) if args.config else {}
    pspec = PhantomSpec.from_dict(conf.get("phantom", {}))
    mconf = dict(conf.get("motion", {}))
    for key, val in (("n_frames", args.frames), ("seed", args.seed), ("model", args.model),
                     ("rho", args.rho), ("rot_std_deg", args.rot_std), ("trans_std_mm", args.trans_std),
                     ("coeff_std_mm", args.coeff_std), ("max_displacement", args.max_displacement)):
        if val is not None:
            mconf[key] = val
    if args.drift is not None:
        mconf["drift"] = tuple(args.drift)
    if "drift" in mconf and mconf["drift"] is not None:
        mconf["drift"] = tuple(mconf["drift"])
    mspec = MotionSpec(**mconf)
    noise = conf.get("noise_std", 0.02) if args.noise is None else args.noise
    bias = conf.get("bias", 0.1) if args.bias is None else args.bias

    resolved = {"phantom": pspec.to_dict(), "motion": mspec.to_dict(), "noise_std": noise,
                "bias": bias}
    man = RunManifest("phantom", resolved)
    if args.config:
        man.add_inputs([args.config])
    os.makedirs(args.out, exist_ok=True)
    with man.stage("synthesize"):
        image, labels, rois, truth = make_phantom(pspec, mspec, noise_std=noise, bias=bias)
    ext = args.ext
    with man.stage("write"):
        def out(name, obj):
            path = os.path.join(args.out, name + ext)
            save_image(path, obj)
            man.add_output(path)

        out("template", image)
        out("template_labels", labels)
        for lab, roi in sorted(rois.items()):
            out(f"roi_{lab}", roi)
        for n, frame in enumerate(truth.series):
            out(f"frame_{n:04d}", frame)
            out(f"labels_{n:04d}", truth.frame_labels(n))
        truth_path = os.path.join(args.out, "truth.json")
        with open(truth_path, "w") as fh:
            json.dump({"template_index": truth.template_index, "model": mspec.model,
                       "frames": [{"index": n, "transform": to_dict(t)}
                                  for n, t in enumerate(truth.transforms)]}, fh, indent=1)
        man.add_output(truth_path)
    man.write(os.path.join(args.out, "manifest.json"))
    print(f"wrote {len(truth.series)} frames to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def cmd_preprocess(args):
    if not args.inputs:
        raise UsageError("preprocess needs at least one input volume")
    man = RunManifest("preprocess", {"inputs": list(args.inputs)})
    man.add_inputs(args.inputs)
    with man.stage("read"):
        series = [load_image(p) for p in args.inputs]
    with man.stage("split"):
        doubled = split_interleaved(series)
    os.makedirs(args.out_dir, exist_ok=True)
    with man.stage("write"):
        for n, vol in enumerate(doubled):
            path = os.path.join(args.out_dir, f"frame_{n:04d}{args.ext}")
            save_image(path, vol)
            man.add_output(path)
    man.write(os.path.join(args.out_dir, "manifest.json"))
    print(f"wrote {len(doubled)} volumes to {args.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------

def _pipeline_config(args):
    d = _load_json(args.config) if args.config else {}
    for key, val in (("mode", args.mode), ("model", args.model), ("lambda2", args.lambda2),
                     ("template_index", args.template), ("init", args.init)):
        if val is not None:
            d[key] = val
    if args.lambda1 is not None:
        vals = args.lambda1
        if len(vals) == 1:
            d["lambda1"] = d["lambda1_rot"] = d["lambda1_trans"] = vals[0]
        elif len(vals) == 2:
            d["lambda1_rot"], d["lambda1_trans"] = vals
        else:
            raise UsageError("--lambda1 takes one value or a (rotation, translation) pair")
    if args.lambda1_rot is not None:
        d["lambda1_rot"] = args.lambda1_rot
    if args.lambda1_trans is not None:
        d["lambda1_trans"] = args.lambda1_trans
    try:
        return PipelineConfig.from_dict(d)
    except (InvalidInputError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def cmd_register(args):
    cfg = _pipeline_config(args)
    if not args.series:
        raise UsageError("register needs the series volumes")
    if cfg.model == "rigid" and args.roi is None:
        raise UsageError("the rigid model needs --roi")
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be >= 1")
    n = len(args.series)
    resolved = cfg.resolved(n)
    man = RunManifest("register", {**resolved.to_dict(), "threads": args.threads})
    inputs = list(args.series) + ([args.roi] if args.roi else [])
    man.add_inputs(inputs)
    with man.stage("read"):
        series = [load_image(p) for p in args.series]
        roi = load_mask(args.roi) if args.roi else None

    def progress(i, t, rep):
        log.info("frame %d done", i)

    with man.stage("align"):
        try:
            al = align_series(series, roi, resolved, threads=args.threads, progress=progress)
        except (DegenerateMetricError, OptimizationError) as exc:
            raise NumericalFailure(str(exc)) from exc
    with man.stage("write"):
        al.save(args.out)
        man.add_output(args.out)
        if args.warped_dir:
            os.makedirs(args.warped_dir, exist_ok=True)
            tmpl = series[al.template_index]
            for i, t in enumerate(al.transforms):
                path = os.path.join(args.warped_dir, f"warped_{i:04d}.nii")
                save_image(path, resample(tmpl, t.map_points, series[i].grid))
                man.add_output(path)
    man.write(args.manifest or os.path.splitext(args.out)[0] + ".manifest.json")
    if al.failed:
        raise NumericalFailure(f"registration failed for frames {al.failed}; "
                               "their estimates were carried over from the neighbour")
    print(f"aligned {n} frames to template {al.template_index} ({cfg.mode}, {cfg.model})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _parse_refs(items):
    refs = {}
    for item in items:
        frame, sep, path = item.partition(":")
        if not sep:
            raise UsageError(f"--ref expects FRAME:PATH, got {item!r}")
        try:
            refs[int(frame)] = path
        except ValueError:
            raise UsageError(f"--ref frame index must be an integer, got {frame!r}") from None
    return refs


def cmd_evaluate(args):
    refs = _parse_refs(args.ref or [])
    if not refs:
        raise UsageError("evaluate needs at least one --ref FRAME:PATH")
    try:
        al = SeriesAlignment.load(args.alignment)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(args.alignment, f"cannot load alignment: {exc}") from exc
    missing = sorted(n for n in refs if not 0 <= n < len(al))
    if missing:
        raise InvalidInputError(f"alignment {args.alignment} has no transforms for frames {missing}")
    man = RunManifest("evaluate", {"alignment": args.alignment, "labels": args.labels,
                                   "refs": {str(k): v for k, v in sorted(refs.items())},
                                   "roi": args.roi})
    man.add_inputs([args.alignment, args.labels] + [refs[k] for k in sorted(refs)]
                   + ([args.roi] if args.roi else []))
    with man.stage("read"):
        labels = load_labels(args.labels)
        reference = {n: load_labels(p) for n, p in refs.items()}
        roi = load_mask(args.roi) if args.roi else None
    label_ids = args.label if args.label else None
    with man.stage("evaluate"):
        report = evaluate_series(labels, al.transforms, reference, roi=roi, mode=al.mode,
                                 label_ids=label_ids)
    write_report(report, args.out)
    man.add_output(args.out)
    man.write(os.path.splitext(args.out)[0] + ".manifest.json")
    for lab, s in report.summary()["dice"].items():
        print(f"label {lab}: mean dice {s['mean']:.4f} (std {s['std']:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="tempreg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tempreg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthesize a phantom series with ground truth")
    ph.add_argument("--out", required=True, help="output directory")
    ph.add_argument("--config", help="JSON with 'phantom', 'motion', 'noise_std', 'bias'")
    ph.add_argument("--frames", type=int)
    ph.add_argument("--seed", type=int)
    ph.add_argument("--model", choices=("rigid", "bspline"))
    ph.add_argument("--rho", type=float)
    ph.add_argument("--rot-std", type=float, help="degrees per frame")
    ph.add_argument("--trans-std", type=float, help="mm per frame")
    ph.add_argument("--coeff-std", type=float, help="mm per frame")
    ph.add_argument("--max-displacement", type=float, help="mm (B-Spline)")
    ph.add_argument("--drift", type=float, nargs=6, metavar=("RX", "RY", "RZ", "TX", "TY", "TZ"),
                    help="per-frame drift (degrees, mm)")
    ph.add_argument("--noise", type=float, help="noise std as a fraction of intensity range")
    ph.add_argument("--bias", type=float, help="bias field amplitude")
    ph.add_argument("--ext", default=".nii", choices=(".nii", ".nii.gz", ".raw"))
    ph.set_defaults(func=cmd_phantom)

    pp = sub.add_parser("preprocess", help="split interleaved volumes into odd/even frames")
    pp.add_argument("inputs", nargs="*")
    pp.add_argument("--out-dir", required=True)
    pp.add_argument("--ext", default=".nii", choices=(".nii", ".nii.gz", ".raw"))
    pp.set_defaults(func=cmd_preprocess)

    rg = sub.add_parser("register", help="align a series to its template frame")
    rg.add_argument("series", nargs="*", help="frame volumes in temporal order")
    rg.add_argument("--roi", help="template-space ROI mask")
    rg.add_argument("--out", required=True, help="alignment JSON")
    rg.add_argument("--manifest", help="manifest path (default: next to --out)")
    rg.add_argument("--config", help="JSON with PipelineConfig fields")
    rg.add_argument("--mode", choices=("temporal", "pairwise"))
    rg.add_argument("--model", choices=("rigid", "bspline"))
    rg.add_argument("--lambda1", type=float, nargs="+",
                    help="temporal weight; one value for all parameters or a rotation/translation pair")
    rg.add_argument("--lambda1-rot", type=float)
    rg.add_argument("--lambda1-trans", type=float)
    rg.add_argument("--lambda2", type=float)
    rg.add_argument("--template", type=_template_arg, help="template frame index or 'middle'")
    rg.add_argument("--init", choices=("previous", "identity"))
    rg.add_argument("--threads", type=int)
    rg.add_argument("--warped-dir", help="also write the template warped to every frame")
    rg.set_defaults(func=cmd_register)

    ev = sub.add_parser("evaluate", help="Dice and log-det statistics of an alignment")
    ev.add_argument("alignment")
    ev.add_argument("--labels", required=True, help="template label map")
    ev.add_argument("--ref", action="append", metavar="FRAME:PATH", help="reference labels of a frame")
    ev.add_argument("--roi", help="ROI for log-det statistics")
    ev.add_argument("--label", type=int, action="append", help="restrict to these labels")
    ev.add_argument("--out", required=True, help="CSV report")
    ev.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (FormatError, InvalidInputError, FileNotFoundError) as exc:
        print(f"tempreg: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalFailure as exc:
        print(f"tempreg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TempRegError as exc:
        print(f"tempreg: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
