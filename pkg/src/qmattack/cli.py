"""Command-line frontend.

Every run writes ``manifest.json`` into its output directory holding the
resolved arguments and SHA-256 digests of the files it produced;
``qmattack replay MANIFEST`` re-executes the run and compares digests.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import brightness_delta_curve, edge_mask, power_spectrum_1d, spectral_slope
from .attack import (AttackConfig, NormBall, NormKind, epsilon_for_psnr, fit_power_law, pgd_attack,
                     sweep_epsilon)
from .baseline import Method, baseline_sweep
from .checks import GRAD_TOL, gradcheck_csv, run_gradcheck, synthetic_source
from .errors import ConfigError, DatasetError, QMAttackError
from .fusion import DEFAULT_MODEL, fused_score, load_fusion_model, replace_clip
from .image import Dataset, load_dataset, load_image, write_pgm
from .metrics import extract_features, psnr
from .restore import RestoreConfig, StopMode, Target, compressed_proxy, init_noise, restore
from .svg import line_plot

log = logging.getLogger("qmattack")

EXIT_OK, EXIT_IO, EXIT_FORMAT, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3, 4, 5
# arguments that only steer where/how a run executes, not what it computes
NON_SEMANTIC = ("out", "jobs", "verbose", "func")


class UsageError(ConfigError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DatasetError(f"cannot create output directory {self.out}: {exc}") from exc
        self.files: dict[str, str] = {}
        self.summary: dict = {}

    def write(self, name: str, data) -> Path:
        payload = data.encode() if isinstance(data, str) else bytes(data)
        path = self.out / name
        path.write_bytes(payload)
        self.files[name] = hashlib.sha256(payload).hexdigest()
        return path

    def image(self, name: str, plane) -> None:
        self.write(name, write_pgm(plane))

    def plot(self, name: str, svg: str) -> None:
        if self.args.plots:
            self.write(name, svg)

    def finish(self) -> None:
        self.write("summary.json", json.dumps(_jsonable(self.summary), indent=2, sort_keys=True))
        config = {k: v for k, v in vars(self.args).items() if k not in NON_SEMANTIC}
        manifest = {
            "version": __version__,
            "command": self.args.command,
            "config": _jsonable(config),
            "outputs": dict(sorted(self.files.items())),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, Path):
        return str(x)
    return x


def _model(args):
    if not args.model:
        return DEFAULT_MODEL
    try:
        text = Path(args.model).read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read model {args.model}: {exc}") from exc
    return load_fusion_model(text)


def _image(path):
    try:
        return load_image(path)
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _inputs(args) -> Dataset:
    if getattr(args, "dataset", None):
        return load_dataset(args.dataset, args.glob)
    if getattr(args, "ref", None):
        return Dataset(((Path(args.ref).stem, _image(args.ref)),))
    raise UsageError("one of --ref / --dataset is required")


def _mapper(args):
    if args.jobs > 1:
        pool = ProcessPoolExecutor(max_workers=args.jobs)
        return pool, pool.map
    return None, map


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_score(args) -> int:
    run = Run(args)
    ref, dist = _image(args.ref), _image(args.dist)
    model = _model(args)
    feats = extract_features(ref, dist)
    unclipped = fused_score(feats, replace_clip(model, False))
    report = {
        "features": feats.as_dict(),
        "fused_unclipped": unclipped,
        "fused_clipped": min(max(unclipped, 0.0), 100.0),
        "psnr": psnr(ref, dist),
    }
    run.summary = report
    run.write("score.json", json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
    run.finish()
    print(json.dumps(_jsonable(report), sort_keys=True))
    return EXIT_OK


def _attack_job(job):
    ident, ref, model, ball, cfg, target = job
    if target is not None:
        m, n = ref.shape
        ball = NormBall(NormKind.L2, epsilon_for_psnr(target, m, n))
    delta, rep = pgd_attack(ref, model, ball, cfg)
    return ident, delta, rep, ball.epsilon


def cmd_attack(args) -> int:
    if (args.epsilon is None) == (args.target_psnr is None):
        raise UsageError("give exactly one of --epsilon / --target-psnr")
    if args.norm is None:
        args.norm = "l2" if args.target_psnr is not None else "linf"
    if args.target_psnr is not None and args.norm != "l2":
        raise UsageError("--target-psnr implies --norm l2")
    run = Run(args)
    data = _inputs(args)
    model = replace_clip(_model(args), False)
    cfg = AttackConfig(alpha=args.alpha, steps=args.steps, box_constrain=not args.no_box,
                       seed=args.seed, step_rule=args.step_rule)
    ball = NormBall(args.norm, args.epsilon) if args.epsilon is not None else None
    jobs = [(ident, ref, model, ball, cfg, args.target_psnr) for ident, ref in data]
    pool, mapper = _mapper(args)
    try:
        results = sorted(mapper(_attack_job, jobs), key=lambda r: r[0])
    finally:
        if pool:
            pool.shutdown()
    lines = ["image,epsilon,score_before,score_after,gain,psnr_after,final_norm"]
    refs = dict(data.entries)
    for ident, delta, rep, eps in results:
        lines.append(f"{ident},{eps!r},{rep.score_before!r},{rep.score_after!r},{rep.gain!r},"
                     f"{rep.psnr_after!r},{rep.final_norm!r}")
        run.image(f"{ident}_perturbed.pgm", refs[ident] + delta)
        run.image(f"{ident}_perturbation.pgm", delta + 127.5)
        trace = ["step,score"] + [f"{k + 1},{v!r}" for k, v in enumerate(rep.score_trace)]
        run.write(f"{ident}_trace.csv", "\n".join(trace) + "\n")
        run.plot(f"{ident}_trace.svg", line_plot({ident: (range(1, len(rep.score_trace) + 1),
                                                          rep.score_trace)},
                                                 "score trace", "step", "score"))
    run.write("report.csv", "\n".join(lines) + "\n")
    gains = [r[2].gain for r in results]
    run.summary = {"mean_gain": float(np.mean(gains)), "n_images": len(gains)}
    run.finish()
    print(f"mean gain {np.mean(gains):.4f} over {len(gains)} image(s)")
    return EXIT_OK


def cmd_restore(args) -> int:
    run = Run(args)
    ref = _image(args.ref)
    model = replace_clip(_model(args), False)
    cfg = RestoreConfig(target=args.target, lr=args.lr, stop_mode=args.stop_mode,
                        threshold=args.threshold, conv_tol=args.conv_tol,
                        conv_window=args.conv_window, max_steps=args.max_steps, seed=args.seed)
    if args.init == "noise":
        init = init_noise(ref.shape[0], ref.shape[1], args.seed)
    else:
        init = compressed_proxy(ref)
    out, trace = restore(ref, init, cfg, model)
    run.image("init.pgm", init)
    run.image("restored.pgm", out)
    run.write("trace.csv", trace.to_csv())
    run.plot("trace.svg", line_plot({args.target: (trace.steps, trace.scores)}, "restoration",
                                    "step", "score"))
    run.summary = {
        "final_score": trace.scores[-1],
        "steps": trace.steps[-1],
        "reached_threshold": trace.reached_threshold,
        "hit_max_steps": trace.hit_max_steps,
        "mse": float(np.mean((out - ref) ** 2)),
        "pearson": float(np.corrcoef(out.ravel(), ref.ravel())[0, 1]),
    }
    run.finish()
    print(f"{args.target}: score {trace.scores[-1]:.6f} after {trace.steps[-1]} steps")
    return EXIT_OK


def cmd_spectrum(args) -> int:
    run = Run(args)
    series, slopes = {}, {}
    for path in args.images:
        ident = Path(path).stem
        img = _image(path) - (127.5 if args.centered else 0.0)
        curve = power_spectrum_1d(img, args.patches, args.patch, args.seed)
        run.write(f"spectrum_{ident}.csv", curve.to_csv())
        series[ident] = (curve.freq, curve.power)
        try:
            slopes[ident] = spectral_slope(curve, (args.band_lo, args.band_hi))
        except ValueError as exc:
            log.warning("%s: %s", ident, exc)
            slopes[ident] = None
    run.plot("spectrum.svg", line_plot(series, "radial power spectrum", "cycles/pixel", "power",
                                       logx=True, logy=True))
    run.summary = {"slopes": slopes}
    run.finish()
    for k, v in slopes.items():
        print(f"{k}: slope {v}")
    return EXIT_OK


def cmd_curve(args) -> int:
    run = Run(args)
    ref, dist = _image(args.ref), _image(args.dist)
    delta = dist - ref
    if args.perturbation:
        delta = dist - 127.5
    mask = None if args.no_mask else edge_mask(ref, args.k)
    curve = brightness_delta_curve(ref, delta, mask)
    run.write("curve.csv", curve.to_csv())
    have = curve.present()
    run.plot("curve.svg", line_plot({"mean": (curve.intensity[have], curve.mean_delta[have]),
                                     "mean |delta|": (curve.intensity[have], curve.mean_abs_delta[have])},
                                    "perturbation vs intensity", "intensity", "delta"))
    slope = curve.slope() if have.sum() >= 2 else None
    run.summary = {"meanabs_slope": slope, "pixels": int(curve.count.sum())}
    run.finish()
    print(f"mean |delta| slope {slope}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    run = Run(args)
    data = _inputs(args)
    model = replace_clip(_model(args), False)
    cfg = AttackConfig(alpha=args.alpha, steps=args.steps, box_constrain=not args.no_box,
                       seed=args.seed, step_rule=args.step_rule)
    args.norm = args.norm or "linf"
    pool, mapper = _mapper(args)
    try:
        table = sweep_epsilon(data, model, args.norm, _floats(args.eps), cfg, map_fn=mapper)
    finally:
        if pool:
            pool.shutdown()
    run.write("gains.csv", table.to_csv())
    run.write("gains_long.csv", table.long_csv())
    run.plot("gains.svg", line_plot({"mean gain": (table.epsilons, table.mean_gain)},
                                    "gain vs radius", "epsilon", "gain", logx=True, logy=True))
    fit = None
    try:
        f = fit_power_law(table.epsilons, table.mean_gain)
        fit = {"exponent": f.exponent, "amplitude": f.amplitude, "r2": f.r2}
    except ValueError as exc:
        log.warning("power-law fit skipped: %s", exc)
    run.summary = {"power_law": fit}
    run.finish()
    print(table.to_csv(), end="")
    if fit:
        print(f"exponent {fit['exponent']:.4f} r2 {fit['r2']:.4f}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    run = Run(args)
    data = _inputs(args)
    model = replace_clip(_model(args), False)
    window = tuple(_floats(args.psnr_window)) if args.psnr_window else None
    if window is not None and len(window) != 2:
        raise UsageError("--psnr-window takes LO,HI")
    pool, mapper = _mapper(args)
    try:
        sweep = baseline_sweep(data, model, args.method, _floats(args.params), window, map_fn=mapper)
    finally:
        if pool:
            pool.shutdown()
    run.write("baseline.csv", sweep.to_csv())
    run.summary = {"flagged": [r.param for r in sweep.rows if not r.in_window]}
    run.finish()
    print(sweep.to_csv(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    run = Run(args)
    if args.dataset:
        sources = [img for _, img in load_dataset(args.dataset, args.glob)]
    else:
        sources = [synthetic_source(256, args.seed)]
    coords = None if args.coords <= 0 else args.coords
    rows = run_gradcheck(sources, args.pairs, coords, args.seed)
    run.write("gradcheck.csv", gradcheck_csv(rows))
    worst = {}
    for r in rows:
        worst[r.metric] = max(worst.get(r.metric, 0.0), r.max_rel_error)
    run.summary = {"max_rel_error": worst, "tolerance": GRAD_TOL}
    run.finish()
    for k, v in worst.items():
        print(f"{k:6s} {v:.3e} {'ok' if v < GRAD_TOL else 'FAIL'}")
    return EXIT_OK if all(r.ok for r in rows) else EXIT_NUMERIC


def cmd_replay(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {args.manifest}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"bad manifest {args.manifest}: {exc}") from exc
    config = dict(manifest["config"])
    out = args.out or str(Path(args.manifest).resolve().parent)
    ns = argparse.Namespace(**config, out=out, jobs=args.jobs, verbose=args.verbose)
    ns.func = COMMANDS[config["command"]]
    code = ns.func(ns)
    if code not in (EXIT_OK, EXIT_NUMERIC):
        return code
    fresh = json.loads((Path(out) / "manifest.json").read_text())["outputs"]
    diffs = [k for k in manifest["outputs"] if fresh.get(k) != manifest["outputs"][k]]
    if diffs:
        print("outputs differ from manifest: " + ", ".join(sorted(diffs)), file=sys.stderr)
        return EXIT_NUMERIC
    print(f"replay matches manifest ({len(fresh)} files)")
    return code


COMMANDS = {
    "score": cmd_score, "attack": cmd_attack, "restore": cmd_restore, "spectrum": cmd_spectrum,
    "curve": cmd_curve, "sweep": cmd_sweep, "baseline": cmd_baseline, "gradcheck": cmd_gradcheck,
}


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _common(p, out_required=True):
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", default=None, help="fusion model file (default weights if omitted)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--plots", action="store_true", help="also emit SVG plots")
    p.add_argument("-v", "--verbose", action="store_true")


def _inputs_args(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--ref", help="single reference image")
    g.add_argument("--dataset", help="directory of PGM/PPM references")
    p.add_argument("--glob", default="*.p[gp]m")


def _pgd_args(p):
    p.add_argument("--norm", choices=[k.value for k in NormKind], default=None,
                   help="default linf (l2 with --target-psnr)")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--no-box", action="store_true", help="allow pixels outside [0,255]")
    p.add_argument("--step-rule", choices=["normalized", "raw"], default="normalized")


def build_parser() -> Parser:
    parser = Parser(prog="qmattack", description="Differentiable quality-metric attacks and analysis.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("score", help="features and fused score of a pair")
    p.add_argument("ref")
    p.add_argument("dist")
    _common(p)

    p = sub.add_parser("attack", help="PGD perturbations")
    _inputs_args(p)
    _pgd_args(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--target-psnr", type=float)
    _common(p)

    p = sub.add_parser("restore", help="recover a reference by metric maximization")
    p.add_argument("ref")
    p.add_argument("--target", choices=[t.value for t in Target], default="fused")
    p.add_argument("--init", choices=["noise", "compressed"], default="noise")
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--stop-mode", choices=[s.value for s in StopMode], default="threshold")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--conv-tol", type=float, default=1e-4)
    p.add_argument("--conv-window", type=int, default=50)
    p.add_argument("--max-steps", type=int, default=5000)
    _common(p)

    p = sub.add_parser("spectrum", help="radially averaged power spectra")
    p.add_argument("images", nargs="+")
    p.add_argument("--patches", type=int, default=100)
    p.add_argument("--patch", type=int, default=256)
    p.add_argument("--band-lo", type=float, default=0.02)
    p.add_argument("--band-hi", type=float, default=0.4)
    p.add_argument("--centered", action="store_true",
                   help="inputs are perturbation images stored with a +127.5 offset")
    _common(p)

    p = sub.add_parser("curve", help="perturbation vs brightness curve")
    p.add_argument("ref")
    p.add_argument("dist", help="perturbed image (or perturbation image with --perturbation)")
    p.add_argument("--perturbation", action="store_true")
    p.add_argument("--k", type=float, default=1.0, help="edge threshold in units of std(ref)")
    p.add_argument("--no-mask", action="store_true")
    _common(p)

    p = sub.add_parser("sweep", help="gain vs radius sweep")
    _inputs_args(p)
    _pgd_args(p)
    p.add_argument("--eps", default="0.5,1,2,4")
    _common(p)

    p = sub.add_parser("baseline", help="classical enhancement sweep")
    _inputs_args(p)
    p.add_argument("--method", choices=[m.value for m in Method], default="unsharp")
    p.add_argument("--params", default="0.1,0.2,0.4,0.8,1.6")
    p.add_argument("--psnr-window", default=None, help="LO,HI dB; rows outside are flagged")
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference audit of metric gradients")
    p.add_argument("--dataset", default=None)
    p.add_argument("--glob", default="*.p[gp]m")
    p.add_argument("--pairs", type=int, default=5)
    p.add_argument("--coords", type=int, default=128, help="pixels per pair (<=0: all)")
    _common(p)

    p = sub.add_parser("replay", help="re-run a manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="directory for the re-run (default: manifest's)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


PATH_ARGS = ("ref", "dist", "dataset", "model")


def _absolute_paths(args) -> None:
    """Record inputs as absolute paths so manifests replay from any directory."""
    for name in PATH_ARGS:
        v = getattr(args, name, None)
        if v:
            setattr(args, name, str(Path(v).resolve()))
    if getattr(args, "images", None):
        args.images = [str(Path(v).resolve()) for v in args.images]


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "replay":
            return cmd_replay(args)
        _absolute_paths(args)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return COMMANDS[args.command](args)
    except QMAttackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
