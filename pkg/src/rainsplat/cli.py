"""``rainsplat`` command line.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical failure.
Every command that writes files also writes one JSON manifest (stable key
order) next to its primary output.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import (GridField, GridSpec, read_gaussians, read_grid, read_stations, write_gaussians,
                   write_grid, write_stations)
from .exceptions import DataError, NumericalError
from .fit import FitConfig, fit, init_gaussians
from .interp import (BarnesConfig, MQConfig, VariogramModel, barnes, default_width, fit_variogram, kriging,
                     mean_nn_distance, multiquadric)
from .sample import SamplingConfig, draw_points, read_points, sampling_distribution, write_points
from .splat import RenderConfig, render_selective
from .synth import SynthConfig, synth_scene, synth_stations
from .verify import eval_report, psd_radial

log = logging.getLogger("rainsplat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class StageError(Exception):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.cause = exc


# --------------------------------------------------------------------------
# argument helpers
# --------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _pair(text: str) -> tuple[float, float]:
    vals = _floats(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected lo,hi, got {text!r}")
    return vals[0], vals[1]


def _res_factor(text: str) -> float:
    t = text.strip().lower().rstrip("x")
    try:
        v = float(t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a factor such as 0.5x, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("resolution factor must be positive")
    return v


def _ints(text: str) -> list[int]:
    return [int(v) for v in _floats(text)]


def _add_common(p):
    p.add_argument("--threads", type=int, default=1, help="worker threads for rendering/interpolation")
    p.add_argument("--deterministic", action="store_true",
                   help="fixed accumulation order; manifests omit wall time so reruns are bitwise identical")
    p.add_argument("--format", choices=("binary", "ascii"), default="binary", help="output grid format")
    p.add_argument("--manifest", type=Path, help="manifest path (default: next to the main output)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_sampling(p):
    d = SamplingConfig()
    p.add_argument("--tau", type=float, default=d.tau, help="rain-support threshold (mm/h)")
    p.add_argument("--w-grad", type=float, default=d.w_grad)
    p.add_argument("--w-uniform", type=float, default=d.w_uniform)
    p.add_argument("--w-heavy", type=float, default=d.w_heavy)
    p.add_argument("--temperature", type=float, default=d.temperature)
    p.add_argument("--epsilon", type=float, default=d.epsilon)
    p.add_argument("--k-points", type=int, default=d.k_points)
    p.add_argument("--nms-radius", type=float, default=None, help="grid units (default 1.5 cells)")
    p.add_argument("--mask-heavy", action="store_true", help="restrict the heavy-rain term to the mask")
    p.add_argument("--seed", type=int, default=0)


def _add_fit(p):
    d = FitConfig()
    p.add_argument("--lambda-sigma", type=float, default=d.lambda_sigma)
    p.add_argument("--lambda-alpha", type=float, default=d.lambda_alpha)
    p.add_argument("--max-iters", type=int, default=d.max_iters)
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default=d.lr_schedule)
    p.add_argument("--grad-clip", type=float, default=d.grad_clip)
    p.add_argument("--init-sigma", type=float, default=None, help="grid units (default 3 cells)")
    p.add_argument("--tol-rel", type=float, default=d.tol_rel)
    p.add_argument("--freeze-anchor-all", action="store_true",
                   help="freeze center and shape of anchored Gaussians as well as amplitude")
    p.add_argument("--cutoff-k", type=float, default=RenderConfig().cutoff_k)


def _sampling_cfg(a) -> SamplingConfig:
    return SamplingConfig(tau=a.tau, w_grad=a.w_grad, w_uniform=a.w_uniform, w_heavy=a.w_heavy,
                          temperature=a.temperature, epsilon=a.epsilon, k_points=a.k_points,
                          nms_radius=a.nms_radius, seed=a.seed, mask_heavy=a.mask_heavy)


def _fit_cfg(a) -> FitConfig:
    return FitConfig(lambda_sigma=a.lambda_sigma, lambda_alpha=a.lambda_alpha, max_iters=a.max_iters,
                     learning_rate=a.learning_rate, lr_schedule=a.lr_schedule, grad_clip=a.grad_clip,
                     init_sigma=a.init_sigma, tol_rel=a.tol_rel, seed=getattr(a, "seed", 0),
                     freeze_anchor_all=a.freeze_anchor_all)


def _render_cfg(a) -> RenderConfig:
    return RenderConfig(cutoff_k=a.cutoff_k, deterministic=a.deterministic, threads=a.threads)


def _target_spec(a, like: GridField | None) -> GridSpec:
    if getattr(a, "rows", None):
        return GridSpec(a.origin_x, a.origin_y, a.cell_size, a.rows, a.cols or a.rows)
    if like is None:
        raise UsageError("give --like GRID or --rows/--cols")
    spec = like.spec
    factor = getattr(a, "out_res", None)
    return spec.refined(factor) if factor else spec


def _add_grid_target(p):
    p.add_argument("--like", type=Path, help="take the output grid from this grid file")
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--origin-x", type=float, default=0.0)
    p.add_argument("--origin-y", type=float, default=0.0)
    p.add_argument("--cell-size", type=float, default=1.0)
    p.add_argument("--out-res", type=_res_factor, help="cell size factor relative to --like, e.g. 0.5x")


def _write_field(field: GridField, path: Path, a):
    path.parent.mkdir(parents=True, exist_ok=True)
    write_grid(field, path, a.format)


def _manifest(a, command: str, inputs: dict, outputs: dict, started: float, default_path: Path | None):
    path = a.manifest or default_path
    if path is None:
        return
    # output locations are listed relative to the manifest, so a rerun into
    # another directory produces the same manifest bytes
    params = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(a).items())
              if k not in _NOT_PARAMS}
    doc = {
        "command": command,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": {k: _relative(v, path.parent) for k, v in outputs.items() if v is not None},
        "parameters": params,
        "seed": getattr(a, "seed", None),
        "tool_version": __version__,
        "wall_time_s": None if a.deterministic else round(time.perf_counter() - started, 6),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


_NOT_PARAMS = {"func", "manifest", "verbose", "out", "out_dir", "out_field", "out_scene",
               "out_stations", "loss_history", "plot"}


def _relative(p: Path, base: Path) -> str:
    try:
        return Path(p).resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(p)


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"not serializable: {type(v)}")


def _side(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(a) -> int:
    t0 = time.perf_counter()
    spec = GridSpec(a.origin_x, a.origin_y, a.cell_size, a.rows, a.cols or a.rows)
    cfg = SynthConfig(spec, a.n_blobs, a.amp_range, a.sigma_range, a.rho_range, a.background, a.seed)
    scene, field = synth_scene(cfg)
    _write_field(field, a.out_field, a)
    outputs = {"field": a.out_field}
    if a.out_scene:
        write_gaussians(scene, a.out_scene)
        outputs["scene"] = a.out_scene
    if a.out_stations:
        st = synth_stations(field, a.n_stations, a.noise_sd, a.missing_frac, a.seed, a.clustered)
        write_stations(st, a.out_stations)
        outputs["stations"] = a.out_stations
    _manifest(a, "synth", {}, outputs, t0, _side(a.out_field, ".manifest.json"))
    return EXIT_OK


def cmd_sample(a) -> int:
    t0 = time.perf_counter()
    field = read_grid(a.field)
    cfg = _sampling_cfg(a)
    pts = draw_points(sampling_distribution(field, cfg), field, cfg)
    write_points(pts, a.out)
    log.info("drew %d points%s", len(pts), " (truncated)" if pts.truncated else "")
    _manifest(a, "sample", {"field": a.field}, {"points": a.out}, t0, _side(a.out, ".manifest.json"))
    return EXIT_OK


def cmd_fit(a) -> int:
    t0 = time.perf_counter()
    target = read_grid(a.target)
    pts = read_points(a.points) if a.points else []
    stations = read_stations(a.stations) if a.stations else None
    fcfg = _fit_cfg(a)
    init = init_gaussians(pts, stations, fcfg, frame=target.spec)
    res = fit(init, target, fcfg, _render_cfg(a))
    write_gaussians(res.set, a.out_scene)
    outputs = {"scene": a.out_scene}
    if a.loss_history:
        res.write_history(a.loss_history)
        outputs["loss_history"] = a.loss_history
    log.info("fit %s after %d iterations, mse %.6g", res.stopped_reason, res.iterations, res.final_mse)
    _manifest(a, "fit", {"target": a.target, "points": a.points, "stations": a.stations}, outputs, t0,
              _side(a.out_scene, ".manifest.json"))
    return EXIT_NUMERIC if res.stopped_reason == "diverged" else EXIT_OK


def cmd_render(a) -> int:
    t0 = time.perf_counter()
    like = read_grid(a.like) if a.like else None
    spec = _target_spec(a, like)
    scene = read_gaussians(a.scene)
    field = render_selective(scene, spec, _render_cfg(a))
    _write_field(field, a.out, a)
    _manifest(a, "render", {"scene": a.scene, "like": a.like}, {"field": a.out}, t0,
              _side(a.out, ".manifest.json"))
    return EXIT_OK


def cmd_interp(a) -> int:
    t0 = time.perf_counter()
    like = read_grid(a.like, precip=False) if a.like else None
    spec = _target_spec(a, like)
    stations = read_stations(a.stations)
    if a.method == "barnes":
        sigma = a.sigma
        if sigma is None:
            X, _, _ = stations.ok_arrays()
            sigma = default_width(X, spec) if len(X) else 1.0
        field = barnes(stations, spec, BarnesConfig(sigma, a.passes, a.gamma_refine), threads=a.threads)
    elif a.method == "kriging":
        if a.sill is not None:
            model = VariogramModel(a.variogram, a.nugget, a.sill, a.range)
        else:
            model = fit_variogram(stations, a.n_bins, a.variogram) if len(stations.ok()) >= 3 else None
        field = kriging(stations, spec, model, threads=a.threads)
    else:
        c = a.c
        if c is None:
            X, _, _ = stations.ok_arrays()
            c = mean_nn_distance(X) if len(X) > 1 else 1.0
        field = multiquadric(stations, spec, MQConfig(c, a.smoothing, a.mq_constant), threads=a.threads)
    if a.clip_negative:
        field = field.with_values(np.maximum(field.values, 0.0), precip=True)
    _write_field(field, a.out, a)
    _manifest(a, "interp", {"stations": a.stations, "like": a.like}, {"field": a.out}, t0,
              _side(a.out, ".manifest.json"))
    return EXIT_OK


def cmd_eval(a) -> int:
    t0 = time.perf_counter()
    pred = read_grid(a.pred, precip=False)
    obs = read_grid(a.obs, precip=False)
    report = eval_report(pred, obs, a.thresholds, a.fss_window)
    text = report.to_json() if a.json else report.to_text()
    outputs = {}
    if a.out:
        a.out.parent.mkdir(parents=True, exist_ok=True)
        a.out.write_text(text)
        outputs["report"] = a.out
    else:
        sys.stdout.write(text)
    if a.plot:
        _plot_fields(pred, obs, a.plot)
        outputs["plot"] = a.plot
    default = _side(a.out, ".manifest.json") if a.out else (_side(a.plot, ".manifest.json") if a.plot else None)
    _manifest(a, "eval", {"pred": a.pred, "obs": a.obs}, outputs, t0, default)
    return EXIT_OK


def cmd_psd(a) -> int:
    t0 = time.perf_counter()
    field = read_grid(a.field, precip=False)
    spec = psd_radial(field, a.n_bins)
    lines = ["wavenumber,power,count"]
    lines += [f"{float(k)!r},{float(p)!r},{int(c)}" for k, p, c in zip(spec.wavenumber, spec.power, spec.counts)]
    text = f"# dc_power={float(spec.dc)!r}\n" + "\n".join(lines) + "\n"
    outputs = {}
    if a.out:
        a.out.parent.mkdir(parents=True, exist_ok=True)
        a.out.write_text(text)
        outputs["spectrum"] = a.out
    else:
        sys.stdout.write(text)
    if a.plot:
        _plot_spectrum(spec, a.plot)
        outputs["plot"] = a.plot
    default = _side(a.out, ".manifest.json") if a.out else (_side(a.plot, ".manifest.json") if a.plot else None)
    _manifest(a, "psd", {"field": a.field}, outputs, t0, default)
    return EXIT_OK


def cmd_pipeline(a) -> int:
    t0 = time.perf_counter()
    out = a.out_dir
    out.mkdir(parents=True, exist_ok=True)

    def stage(name, fn, *args, **kw):
        try:
            return fn(*args, **kw)
        except (DataError, NumericalError, OSError, ValueError) as exc:
            raise StageError(name, exc) from exc

    surrogate = stage("read", read_grid, a.surrogate)
    target = stage("read", read_grid, a.target) if a.target else surrogate
    stations = stage("read", read_stations, a.stations) if a.stations else None
    scfg = _sampling_cfg(a)
    prob = stage("sample", sampling_distribution, surrogate, scfg)
    points = stage("sample", draw_points, prob, surrogate, scfg)
    fcfg = _fit_cfg(a)
    init = stage("init", init_gaussians, points, stations, fcfg, target.spec)
    res = stage("fit", fit, init, target, fcfg, _render_cfg(a))
    if res.stopped_reason == "diverged":
        raise StageError("fit", NumericalError("optimization diverged"))
    spec = target.spec.refined(a.out_res) if a.out_res else target.spec
    field = stage("render", render_selective, res.set, spec, _render_cfg(a))

    paths = {"field": out / ("field.spf" if a.format == "binary" else "field.asc"),
             "scene": out / "scene.csv", "points": out / "points.csv", "loss_history": out / "loss.csv"}
    stage("write", _write_field, field, paths["field"], a)
    stage("write", write_gaussians, res.set, paths["scene"])
    stage("write", write_points, points, paths["points"])
    stage("write", res.write_history, paths["loss_history"])
    log.info("pipeline: %d Gaussians, fit %s at iter %d, output %dx%d", len(res.set),
             res.stopped_reason, res.iterations, spec.rows, spec.cols)
    _manifest(a, "pipeline", {"surrogate": a.surrogate, "target": a.target, "stations": a.stations},
              paths, t0, out / "manifest.json")
    return EXIT_OK


# --------------------------------------------------------------------------
# plotting
# --------------------------------------------------------------------------


def _plot_fields(pred: GridField, obs: GridField, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    vmax = float(np.nanmax([np.nanmax(pred.values), np.nanmax(obs.values), 1e-9]))
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), constrained_layout=True)
    for ax, f, title in zip(axes, (pred, obs), ("prediction", "observation")):
        im = ax.imshow(f.values, origin="lower", vmin=0, vmax=vmax, cmap="viridis")
        ax.set_title(title)
    fig.colorbar(im, ax=axes, label="mm/h")
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_spectrum(spec, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = np.isfinite(spec.power) & (spec.power > 0)
    fig, ax = plt.subplots(figsize=(5, 4), constrained_layout=True)
    ax.loglog(spec.wavenumber[ok], spec.power[ok], marker=".")
    ax.set_xlabel("wavenumber (cycles / grid unit)")
    ax.set_ylabel("power")
    fig.savefig(path, dpi=100)
    plt.close(fig)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rainsplat", description="Gaussian-splat precipitation field reconstruction")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic blob scene, field and stations")
    s.add_argument("--rows", type=int, default=64)
    s.add_argument("--cols", type=int)
    s.add_argument("--origin-x", type=float, default=0.0)
    s.add_argument("--origin-y", type=float, default=0.0)
    s.add_argument("--cell-size", type=float, default=1.0)
    s.add_argument("--n-blobs", type=int, default=10)
    s.add_argument("--amp-range", type=_pair, default=(2.0, 10.0))
    s.add_argument("--sigma-range", type=_pair, default=(1.5, 4.0))
    s.add_argument("--rho-range", type=_pair, default=(-0.6, 0.6))
    s.add_argument("--background", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-field", type=Path, required=True)
    s.add_argument("--out-scene", type=Path)
    s.add_argument("--out-stations", type=Path)
    s.add_argument("--n-stations", type=int, default=50)
    s.add_argument("--noise-sd", type=float, default=0.0)
    s.add_argument("--missing-frac", type=float, default=0.0)
    s.add_argument("--clustered", action="store_true")
    _add_common(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("sample", help="draw rainfall-aware proposal points from a field")
    s.add_argument("--field", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    _add_sampling(s)
    _add_common(s)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("fit", help="fit Gaussians to a target field")
    s.add_argument("--target", type=Path, required=True)
    s.add_argument("--points", type=Path)
    s.add_argument("--stations", type=Path)
    s.add_argument("--out-scene", type=Path, required=True)
    s.add_argument("--loss-history", type=Path)
    s.add_argument("--seed", type=int, default=0)
    _add_fit(s)
    _add_common(s)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("render", help="render a Gaussian scene on a grid")
    s.add_argument("--scene", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--cutoff-k", type=float, default=RenderConfig().cutoff_k)
    _add_grid_target(s)
    _add_common(s)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("interp", help="classical interpolation of station data")
    s.add_argument("--stations", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--method", choices=("barnes", "kriging", "mq"), default="barnes")
    s.add_argument("--sigma", type=float, help="Barnes kernel width (default: mean station spacing)")
    s.add_argument("--passes", type=int, default=1)
    s.add_argument("--gamma-refine", type=float, default=1.0)
    s.add_argument("--variogram", choices=("exponential", "spherical"), default="exponential")
    s.add_argument("--nugget", type=float, default=0.0)
    s.add_argument("--sill", type=float, help="fix the variogram instead of fitting it")
    s.add_argument("--range", type=float, default=1.0)
    s.add_argument("--n-bins", type=int, default=15)
    s.add_argument("--c", type=float, help="multiquadric shape (default: mean station spacing)")
    s.add_argument("--smoothing", type=float, default=0.0)
    s.add_argument("--mq-constant", action="store_true", help="add a constant term to the multiquadric basis")
    s.add_argument("--clip-negative", action="store_true", help="clamp negative estimates to 0")
    _add_grid_target(s)
    _add_common(s)
    s.set_defaults(func=cmd_interp)

    s = sub.add_parser("eval", help="verification scores of a prediction against observations")
    s.add_argument("--pred", type=Path, required=True)
    s.add_argument("--obs", type=Path, required=True)
    s.add_argument("--thresholds", type=_floats, default=[0.1, 1.0, 5.0, 10.0])
    s.add_argument("--fss-window", type=_ints, default=[5])
    s.add_argument("--json", action="store_true", help="JSON instead of a text table")
    s.add_argument("--out", type=Path)
    s.add_argument("--plot", type=Path, help="write a side-by-side PNG of both fields")
    _add_common(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("psd", help="radially averaged power spectrum of a field")
    s.add_argument("--field", type=Path, required=True)
    s.add_argument("--n-bins", type=int)
    s.add_argument("--out", type=Path)
    s.add_argument("--plot", type=Path)
    _add_common(s)
    s.set_defaults(func=cmd_psd)

    s = sub.add_parser("pipeline", help="sample -> init -> fit -> render")
    s.add_argument("--surrogate", type=Path, required=True, help="coarse field to sample points on")
    s.add_argument("--target", type=Path, help="field to fit against (default: the surrogate)")
    s.add_argument("--stations", type=Path, help="station CSV used as amplitude anchors")
    s.add_argument("--out-dir", type=Path, required=True)
    s.add_argument("--out-res", type=_res_factor, help="output cell size factor, e.g. 0.5x")
    _add_sampling(s)
    _add_fit(s)
    _add_common(s)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rainsplat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"rainsplat {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.cause, (NumericalError, ArithmeticError)) else EXIT_DATA
    except NumericalError as exc:
        print(f"rainsplat {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as exc:
        print(f"rainsplat {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
