"""Batch command-line surface.

Every command is a pure function of (inputs, flags, seed): re-running with
identical inputs produces byte-identical outputs. Exit codes: 0 success,
2 validation error, 3 infeasible grid, 4 internal invariant violation.
HRP values print as percentages (2 decimals); files always store raw ratios.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import autotune, hrpeval, perturb, quality, scorer, tensorstore
from .errors import HalluscopeError, InfeasibleGridError, ValidationError

EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_INTERNAL = 4


def _pct(x) -> str:
    return "undefined" if x is None else f"{100.0 * x:.2f}%"


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InfeasibleGridError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_INFEASIBLE)
        except (ValidationError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
        except HalluscopeError as exc:
            click.echo(f"internal error: {exc}", err=True)
            sys.exit(EXIT_INTERNAL)
    return wrapper


@click.group()
def main():
    """Hallucination monitoring toolkit: feature-based confidence scoring,
    self-tuning, and rejection-preference evaluation."""


threads_option = click.option(
    "--threads", type=int, default=None,
    help="Worker threads for grid evaluation (default: logical cores, "
    "or HALLUSCOPE_THREADS).",
)


def _load_grid(grid_path, dataset, variant, fusion):
    layers = dataset.layers()
    if grid_path:
        return autotune.Grid.from_json(grid_path, layers)
    return autotune.Grid.default(layers, variant=variant, fusion=fusion)


@main.command()
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(), help="Calibration dataset manifest.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--val-frac", type=float, default=0.25, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--grid", "grid_path", type=click.Path(), default=None,
              help="Grid-override JSON.")
@click.option("--variant", type=click.Choice(scorer.VARIANT_KINDS),
              default="knn", show_default=True)
@click.option("--fusion", type=click.Choice(scorer.FUSION_MODES),
              default="product", show_default=True)
@threads_option
@handle_errors
def calibrate(manifest_path, out_dir, val_frac, seed, grid_path, variant,
              fusion, threads):
    """Self-tune a monitor on a calibration dataset and persist it."""
    dataset = tensorstore.load_manifest(manifest_path)
    grid = _load_grid(grid_path, dataset, variant, fusion)
    result = autotune.self_tune(dataset, grid, val_fraction=val_frac,
                                seed=seed, threads=threads)
    monitor = autotune.fit_monitor(dataset, result.best, seed=seed)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scorer.save_monitor(monitor, out)
    autotune.write_trace_csv(result.trace, out / "trace.csv")
    autotune.write_tune_json(result, out / "tune.json")
    click.echo(f"tuned {grid.size()} cells ({len(result.skipped)} skipped); "
               f"best layer={result.best.layer} q={result.best.q} "
               f"{grid.param_name}={result.best.variant_params[grid.param_name]} "
               f"gamma={result.best.gamma}")
    click.echo(f"validation mean HRP: {_pct(result.best_mean_hrp)}")
    click.echo(f"monitor written to {out / 'monitor.json'}")


@main.command()
@click.option("--monitor", "monitor_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@handle_errors
def score(monitor_path, manifest_path, out_path):
    """Score a dataset with a fitted monitor -> sample_id,confidence CSV."""
    monitor = scorer.load_monitor(monitor_path)
    dataset = tensorstore.load_manifest(manifest_path)
    ids, conf = scorer.score_batch(dataset, monitor)
    hrpeval.write_scores_csv(ids, conf, out_path)
    click.echo(f"scored {len(ids)} samples -> {out_path}")


@main.command("eval")
@click.option("--scores", "scores_path", required=True, type=click.Path())
@click.option("--quality", "quality_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--curves", "curves_dir", type=click.Path(), default=None,
              help="Directory for per-metric rejection-curve CSVs.")
@handle_errors
def eval_cmd(scores_path, quality_path, out_path, curves_dir):
    """Evaluate a confidence CSV against a quality table (HRP report)."""
    table = tensorstore.read_quality_csv(quality_path)
    report = hrpeval.eval_external_scores(scores_path, table,
                                          monitor_id=str(scores_path))
    hrpeval.write_report_json(report, out_path)
    for name, m in report.per_metric.items():
        click.echo(f"{name}: HRP {_pct(m.hrp)}")
    click.echo(f"mean HRP: {_pct(report.mean_hrp)}")
    if curves_dir:
        ids, conf = hrpeval.read_scores_csv(scores_path)
        aligned = table.subset(ids)
        cdir = Path(curves_dir)
        cdir.mkdir(parents=True, exist_ok=True)
        for name in aligned.metric_names:
            curve = hrpeval.rejection_curve(conf, aligned.metrics[name])
            hrpeval.write_curves_csv(curve, cdir / f"curve_{name}.csv")


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--test-manifest", "test_path", required=True, type=click.Path())
@click.option("--factors", default="2,4,8,16,32", show_default=True,
              help="Comma-separated downsampling factors.")
@click.option("--repeats", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--grid", "grid_path", type=click.Path(), default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
@threads_option
@handle_errors
def sensitivity(manifest_path, test_path, factors, repeats, seed, grid_path,
                out_path, threads):
    """Calibration-size sensitivity sweep (mean +/- std HRP per factor)."""
    calib = tensorstore.load_manifest(manifest_path)
    test = tensorstore.load_manifest(test_path)
    try:
        factor_list = [int(tok) for tok in factors.split(",") if tok.strip()]
    except ValueError as exc:
        raise ValidationError(f"bad factor list {factors!r}") from exc
    grid = _load_grid(grid_path, calib, "knn", "product")
    rows = autotune.sensitivity_sweep(calib, test, factor_list,
                                      repeats=repeats, seed=seed, grid=grid,
                                      threads=threads)
    lines = ["factor,n_calib,mean_hrp,std_hrp,feasible,reason"]
    for r in rows:
        mh = "" if r.mean_hrp is None else tensorstore._fmt(r.mean_hrp)
        sh = "" if r.std_hrp is None else tensorstore._fmt(r.std_hrp)
        lines.append(f"{r.factor},{r.n_calib},{mh},{sh},"
                     f"{str(r.feasible).lower()},{r.reason}")
        shown = _pct(r.mean_hrp) if r.feasible else f"infeasible ({r.reason})"
        click.echo(f"factor {r.factor}: {shown}")
    Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@main.command()
@click.option("--table", "table_path", required=True, type=click.Path(),
              help="CSV of measures: header id,<measure...>, one row per model.")
@click.option("--k", type=int, default=5, show_default=True,
              help="Top-k for the overlap ratio.")
@click.option("--out", "out_path", required=True, type=click.Path())
@handle_errors
def correlate(table_path, k, out_path):
    """Pairwise Kendall tau and top-k overlap between measure columns."""
    text = Path(table_path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 3:
        raise ValidationError(f"{table_path}: need at least two data rows")
    header = lines[0].split(",")
    names = header[1:]
    rows = [ln.split(",") for ln in lines[1:]]
    if any(len(r) != len(header) for r in rows):
        raise ValidationError(f"{table_path}: ragged rows")
    cols = {name: np.array([float(r[j + 1]) for r in rows])
            for j, name in enumerate(names)}

    tau_matrix, p_matrix, overlap_matrix = {}, {}, {}
    for a in names:
        tau_matrix[a], p_matrix[a], overlap_matrix[a] = {}, {}, {}
        for b in names:
            res = quality.kendall_tau(cols[a], cols[b])
            tau_matrix[a][b] = res.tau
            p_matrix[a][b] = res.p_value
            overlap_matrix[a][b] = quality.top_k_overlap(
                cols[a], cols[b], min(k, len(rows)))
    doc = {"measures": names, "k": min(k, len(rows)), "tau": tau_matrix,
           "p_value": p_matrix, "top_k_overlap": overlap_matrix}
    Path(out_path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n",
                              encoding="utf-8")
    for a in names:
        click.echo(f"tau[{a},{a}] = {tau_matrix[a][a]:.4f}")


@main.command()
@click.option("--images", "images_path", required=True, type=click.Path(),
              help="FTB dump of shape (n, C, H, W).")
@click.option("--kind", required=True,
              type=click.Choice(perturb.CORRUPTION_KINDS))
@click.option("--param", "params", multiple=True,
              help="Override magnitudes, e.g. --param sigma=0.1.")
@click.option("--peak", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@handle_errors
def corrupt(images_path, kind, params, peak, seed, out_path):
    """Apply a tensor-space corruption to an image dump."""
    overrides = {}
    for tok in params:
        if "=" not in tok:
            raise ValidationError(f"bad --param {tok!r}, expected name=value")
        key, val = tok.split("=", 1)
        overrides[key] = float(val)
    spec = perturb.CorruptionSpec(kind=kind, params=overrides, seed=seed)
    images = tensorstore.read_array(images_path)
    if images.ndim != 4:
        raise ValidationError(f"{images_path}: expected rank 4, got {images.ndim}")
    out = perturb.corrupt(images, spec, peak=peak)
    tensorstore.write_array(out_path, out)
    click.echo(f"corrupted {images.shape[0]} images ({kind}) -> {out_path}")


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n-calib", type=int, default=1200, show_default=True)
@click.option("--n-test", type=int, default=400, show_default=True)
@click.option("--channels", type=int, default=24, show_default=True)
@click.option("--centers", type=int, default=3, show_default=True)
@click.option("--noise-scale", type=float, default=0.0, show_default=True)
@click.option("--steepness", type=float, default=3.0, show_default=True)
@click.option("--fn-signal/--no-fn-signal", default=False, show_default=True)
@click.option("--contamination", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def synth(out_dir, n_calib, n_test, channels, centers, noise_scale, steepness,
          fn_signal, contamination, seed):
    """Generate the planted-signal synthetic fixture tree."""
    spec = perturb.SyntheticSpec(
        n_calib=n_calib, n_test=n_test, channels=channels, n_centers=centers,
        noise_scale=noise_scale, steepness=steepness, fn_signal=fn_signal,
        contamination=contamination, seed=seed,
    )
    calib_path, test_path = perturb.gen_synthetic(spec, out_dir)
    click.echo(f"calib manifest: {calib_path}")
    click.echo(f"test manifest:  {test_path}")


@main.command()
@click.option("--outputs", "outputs_path", required=True, type=click.Path(),
              help="FTB dump of generated images (n, C, H, W).")
@click.option("--targets", "targets_path", required=True, type=click.Path())
@click.option("--ids", "ids_path", required=True, type=click.Path(),
              help="Text file with one sample ID per line, dump order.")
@click.option("--peak", type=float, default=1.0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@handle_errors
def metrics(outputs_path, targets_path, ids_path, peak, out_path):
    """Compute PSNR / MS-SSIM for aligned image dumps -> quality CSV."""
    outputs = tensorstore.read_array(outputs_path)
    targets = tensorstore.read_array(targets_path)
    ids = [ln.strip() for ln in
           Path(ids_path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if outputs.ndim != 4 or outputs.shape != targets.shape:
        raise ValidationError("image dumps must be aligned rank-4 tensors")
    if len(ids) != outputs.shape[0]:
        raise ValidationError(f"{len(ids)} IDs for {outputs.shape[0]} images")
    cols = quality.batch_metrics(outputs, targets, peak=peak)
    table = tensorstore.QualityTable(sample_ids=ids, metrics=cols)
    tensorstore.write_quality_csv(table, out_path)
    click.echo(f"quality table -> {out_path}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--monitor", "monitor_path", type=click.Path(), default=None,
              help="Monitor to preload into the service.")
@handle_errors
def serve(host, port, monitor_path):
    """Run the HTTP scoring service."""
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(monitor_path), host=host, port=port)


if __name__ == "__main__":
    main()
