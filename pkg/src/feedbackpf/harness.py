"""Config-driven experiments: one truth path, several filters, one metrics file."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, GridOptionsSpec, build_density_1d, expression_function, initial_grid
from .errors import GalerkinDegeneracyWarning, NumericalError
from .fpf import FpfOptions, make_gain_strategy, run_fpf
from .gain import (
    GalerkinBasis1D,
    KalmanGain,
    dns_gain_1d,
    galerkin_gain,
    poincare_diagnostic,
    weighted_l2_gain_error,
    weighted_laplacian_gap,
)
from .grid import GridDensity1D, kde_on_grid
from .reference import GaussianBelief, run_kalman_bucy, run_ks_grid, run_linearized_kalman_bucy
from .sde import TimeGrid, simulate_truth

FAILURE_MARKER = "FAILED"


@dataclass
class ExperimentResult:
    metrics: dict
    truth: object = None
    traces: dict = field(default_factory=dict)
    files: list = field(default_factory=list)


def _time_label(t):
    return f"{t:.6g}"


def _whitened_h(model):
    return lambda x: model.whiten(model.observation(x))


def build_truth(cfg: ExperimentConfig, model, seed):
    grid = TimeGrid(cfg.time.t0, cfg.time.dt, cfg.time.steps)
    x0 = None
    if cfg.model.kind == "bearing_only":
        x0 = np.asarray(cfg.model.initial_state, dtype=float)
    return simulate_truth(model, grid, seed, x0=x0)


def run_filter(spec, cfg, model, truth, seed):
    label = spec.label
    if spec.kind == "fpf":
        opts = {k: v for k, v in spec.options.items() if v is not None}
        clip = opts.pop("gain_clip", None)
        # each strategy only takes the options that concern it
        accepted = {"galerkin": ("n_cells", "width"), "dns_kde": ("grid_points", "width")}.get(spec.gain, ())
        opts = {k: v for k, v in opts.items() if k in accepted}
        strategy = make_gain_strategy(spec.gain, **opts)
        return run_fpf(model, strategy, truth, spec.N, seed,
                       FpfOptions(tag=label, snapshot_times=tuple(cfg.snapshot_times), gain_clip=clip), name=label)
    if spec.kind == "kalman_bucy":
        if cfg.model.kind == "bearing_only":
            sc = cfg.model.scenario()
            belief0 = GaussianBelief(sc.prior_mean, sc.prior_cov)
            return run_linearized_kalman_bucy(model, truth, sc.A, sc.jacobian, belief0, name=label)
        return run_kalman_bucy(model, truth, name=label)
    opts = GridOptionsSpec(**spec.options)
    density0 = initial_grid(model, opts)
    return run_ks_grid(model, truth, density0, substeps=opts.substeps,
                       snapshot_times=tuple(cfg.snapshot_times), name=label)


def _pick_reference(cfg, traces):
    if cfg.reference is not None:
        if cfg.reference not in traces:
            raise ValueError(f"reference filter {cfg.reference!r} not among {sorted(traces)}")
        return cfg.reference
    for kind in ("ks_grid", "kalman_bucy"):
        for label, tr in traces.items():
            if tr.kind == kind:
                return label
    return None


def compute_metrics(traces: dict, truth, reference=None, model=None, selections=("rmse", "moments", "l1", "gain", "poincare"),
                    position_index=None) -> dict:
    """Metrics comparing each trace to the truth path and to the reference trace.

    Keys: ``rmse_time_avg`` (Euclidean, per filter),
    ``rmse_components_time_avg``, ``moment_mean_err_max``/``_avg`` and
    ``moment_cov_err_max``/``_avg`` (against ``reference``),
    ``l1_terminal`` and ``gain_l2_err`` (scalar runs with a grid
    reference) and ``poincare``.
    """
    out = {"dz_sha256": {}, "reference": reference}
    digest = truth.dz_digest()
    for label, tr in traces.items():
        if len(tr.times) != len(truth.times) or not np.allclose(tr.times, truth.times, rtol=0, atol=1e-12):
            raise ValueError(f"trace {label!r} is not on the truth time grid")
        out["dz_sha256"][label] = digest
    if "rmse" in selections:
        out["rmse_time_avg"] = {}
        out["rmse_components_time_avg"] = {}
        if position_index is not None:
            out["rmse_position_time_avg"] = {}
        for label, tr in traces.items():
            err = tr.means - truth.states
            out["rmse_time_avg"][label] = float(np.mean(np.sqrt(np.sum(err ** 2, axis=1))))
            out["rmse_components_time_avg"][label] = [float(v) for v in np.mean(np.abs(err), axis=0)]
            if position_index is not None:
                pe = err[:, position_index]
                out["rmse_position_time_avg"][label] = float(np.mean(np.sqrt(np.sum(pe ** 2, axis=1))))
    ref = traces.get(reference) if reference is not None else None
    if ref is not None and "moments" in selections:
        for key in ("moment_mean_err_max", "moment_mean_err_avg", "moment_cov_err_max", "moment_cov_err_avg"):
            out[key] = {}
        for label, tr in traces.items():
            if label == reference:
                continue
            dm = np.sqrt(np.sum((tr.means - ref.means) ** 2, axis=1))
            dc = np.sqrt(np.sum((tr.covs - ref.covs) ** 2, axis=(1, 2)))
            out["moment_mean_err_max"][label] = float(dm.max())
            out["moment_mean_err_avg"][label] = float(dm.mean())
            out["moment_cov_err_max"][label] = float(dc.max())
            out["moment_cov_err_avg"][label] = float(dc.mean())
    final_density = ref.extra.get("final_density") if ref is not None else None
    if final_density is not None and model is not None:
        hw = _whitened_h(model)
        if "l1" in selections:
            out["l1_terminal"] = {}
            for label, tr in traces.items():
                if tr.kind != "fpf":
                    continue
                kde = kde_on_grid(tr.extra["final_states"][:, 0], final_density.nodes)
                kde = kde / (kde.sum() * final_density.dx)
                out["l1_terminal"][label] = float(np.sum(np.abs(kde - final_density.values)) * final_density.dx)
        dns = dns_gain_1d(final_density, hw) if ("gain" in selections or "poincare" in selections) else None
        if "gain" in selections:
            out["gain_l2_err"] = {}
            for label, tr in traces.items():
                gain = tr.extra.get("final_gain")
                if tr.kind == "fpf" and gain is not None:
                    out["gain_l2_err"][label] = weighted_l2_gain_error(gain, dns)
        if "poincare" in selections:
            lam = weighted_laplacian_gap(final_density)
            out["poincare"] = poincare_diagnostic(final_density, hw, dns, lam=lam).as_dict()
    elif ref is not None and ref.kind == "kalman_bucy" and model is not None and model.linear is not None \
            and "poincare" in selections:
        Hw = model.whiten(model.linear.H.T).T
        belief = GaussianBelief(ref.means[-1], ref.covs[-1])
        gain = KalmanGain(belief.cov @ Hw.T)
        out["poincare"] = poincare_diagnostic(belief, Hw, gain).as_dict()
    for label, tr in traces.items():
        if "degenerate_steps" in tr.extra:
            out.setdefault("galerkin_degenerate_steps", {})[label] = int(tr.extra["degenerate_steps"])
    _check_finite(out)
    return out


def _check_finite(obj, path="metrics"):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{path}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check_finite(v, f"{path}[{i}]")
    elif isinstance(obj, float) and not np.isfinite(obj):
        raise NumericalError(f"{path} is not finite")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _gain_profile(path, nodes, columns: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x"] + list(columns))
        for i, x in enumerate(nodes):
            w.writerow([repr(float(x))] + [repr(float(col[i])) for col in columns.values()])


def _fail(out_dir, exc, context):
    msg = f"{type(exc).__name__}: {exc}\n"
    if context:
        msg += "".join(f"{k}: {v}\n" for k, v in context.items())
    (out_dir / FAILURE_MARKER).write_text(msg)


def run_experiment(cfg: ExperimentConfig, out_dir=None, seed=None) -> ExperimentResult:
    """Simulate one truth path, run every configured filter on it and write outputs.

    Files: ``timeseries_<filter>.csv`` per filter, ``metrics.json``,
    ``gain_profile.csv`` for scalar runs with a grid reference and
    ``density_<t>.csv`` snapshots.  On failure the outputs written so far
    are kept and a ``FAILED`` marker describes the error.
    """
    out_dir = Path(out_dir if out_dir is not None else cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / FAILURE_MARKER
    if marker.exists():
        marker.unlink()
    seed = cfg.seed if seed is None else int(seed)
    context = {"stage": "model"}
    files = []
    try:
        model = cfg.model.build()
        context["stage"] = "truth"
        truth = build_truth(cfg, model, seed)
        digest = truth.dz_digest()
        truth_path = out_dir / "truth.csv"
        truth.to_csv(truth_path)
        files.append(truth_path)
        traces = {}
        for spec in cfg.filters:
            context = {"stage": "filter", "filter": spec.label}
            tr = run_filter(spec, cfg, model, truth, seed)
            traces[spec.label] = tr
            path = out_dir / f"timeseries_{spec.label}.csv"
            tr.to_csv(path, dz_digest=digest)
            files.append(path)
            if tr.kind == "ks_grid":
                n_grid = sum(f.kind == "ks_grid" for f in cfg.filters)
                for t, snap in sorted(tr.snapshots.items()):
                    stem = "density" if n_grid == 1 else f"density_{spec.label}"
                    path = out_dir / f"{stem}_{_time_label(t)}.csv"
                    snap.to_csv(path)
                    files.append(path)
            else:
                files += tr.snapshots_to_csv(
                    lambda t, lab=spec.label: out_dir / f"ensemble_{lab}_{_time_label(t)}.csv")
        context = {"stage": "metrics"}
        reference = _pick_reference(cfg, traces)
        pos = [0, 2] if cfg.model.kind == "bearing_only" else None
        metrics = compute_metrics(traces, truth, reference, model, tuple(cfg.metrics), position_index=pos)
        metrics["seed"] = seed
        metrics["dt"] = cfg.time.dt
        metrics["steps"] = cfg.time.steps
        ref = traces.get(reference)
        if ref is not None and "final_density" in ref.extra:
            dens = ref.extra["final_density"]
            cols = {"K_dns": dns_gain_1d(dens, _whitened_h(model)).K[:, 0]}
            for label, tr in traces.items():
                if tr.kind == "fpf" and tr.extra.get("final_gain") is not None:
                    cols[f"K_{label}"] = tr.extra["final_gain"].evaluate(dens.nodes[:, None])[:, 0, 0]
            _gain_profile(out_dir / "gain_profile.csv", dens.nodes, cols)
            files.append(out_dir / "gain_profile.csv")
        write_json(out_dir / "metrics.json", metrics)
        files.append(out_dir / "metrics.json")
    except Exception as exc:
        ctx = dict(context)
        if getattr(exc, "step", None) is not None:
            ctx["step"] = exc.step
        _fail(out_dir, exc, ctx)
        if isinstance(exc, NumericalError) and "filter" in context:
            exc.context = {**(exc.context or {}), **ctx}
        raise
    return ExperimentResult(metrics=metrics, truth=truth, traces=traces, files=files)


# ---------------------------------------------------------------------------
# static gain benchmark


def bench_density(spec) -> GridDensity1D:
    dist = build_density_1d(spec.density)
    if hasattr(dist, "support"):
        lo, hi = dist.support(spec.grid_radius)
    else:
        sd = float(np.sqrt(dist.cov[0, 0]))
        lo, hi = dist.mean[0] - spec.grid_radius * sd, dist.mean[0] + spec.grid_radius * sd
    return GridDensity1D.from_pdf(lambda x: dist.pdf(x), lo, hi, dx=spec.grid_dx)


def _particle_galerkin(basis, h, x):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", GalerkinDegeneracyWarning)
        gain = galerkin_gain(basis, h, particles=x)
    degenerate = [w.message for w in caught if issubclass(w.category, GalerkinDegeneracyWarning)]
    return gain, degenerate


def gain_bench(cfg: ExperimentConfig, out_dir=None, seed=None) -> ExperimentResult:
    """Fixed-density comparison of the direct solution with Galerkin gains.

    For every L in ``cells``: quadrature and particle assembly on L uniform
    cells of ``domain``.  The largest L is also assembled once more with the
    particles of its last cell removed to exercise the singular-matrix path.
    """
    spec = cfg.gain_bench
    out_dir = Path(out_dir if out_dir is not None else cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / FAILURE_MARKER
    if marker.exists():
        marker.unlink()
    seed = cfg.seed if seed is None else int(seed)
    try:
        dens = bench_density(spec)
        h = expression_function(spec.observation, "observation")
        dns = dns_gain_1d(dens, h)
        dist = build_density_1d(spec.density)
        x = np.asarray(dist.sample(seed, purpose="gain-bench", n=spec.particles))[:, 0]
        lo, hi = spec.domain
        metrics = {"seed": seed, "particles": spec.particles, "gain_l2_err": {}, "kappa": {}}
        cols = {"K_dns": dns.K[:, 0]}
        for L in spec.cells:
            basis = GalerkinBasis1D.uniform(lo, hi, L)
            quad = galerkin_gain(basis, h, density=dens)
            part, degenerate = _particle_galerkin(basis, h, x)
            metrics["gain_l2_err"][f"galerkin_quadrature_L{L}"] = weighted_l2_gain_error(quad, dns)
            metrics["gain_l2_err"][f"galerkin_particle_L{L}"] = weighted_l2_gain_error(part, dns)
            metrics["kappa"][f"quadrature_L{L}"] = [float(v) for v in quad.kappa[:, 0]]
            metrics["kappa"][f"particle_L{L}"] = [float(v) for v in part.kappa[:, 0]]
            metrics.setdefault("particle_degenerate", {})[f"L{L}"] = bool(degenerate)
            cols[f"K_quadrature_L{L}"] = quad.evaluate(dens.nodes[:, None])[:, 0, 0]
            cols[f"K_particle_L{L}"] = part.evaluate(dens.nodes[:, None])[:, 0, 0]
            quad.to_csv(out_dir / f"galerkin_quadrature_L{L}.csv")
        L = max(spec.cells)
        basis = GalerkinBasis1D.uniform(lo, hi, L)
        kept = x[~((x >= basis.nodes[-2]) & (x < basis.nodes[-1]))]
        gain, degenerate = _particle_galerkin(basis, h, kept)
        metrics["degenerate_path"] = {
            "L": L,
            "removed_particles": int(len(x) - len(kept)),
            "warning": bool(degenerate),
            "empty_cells": [int(c) for c in gain.empty_cells],
            "kappa_finite": bool(np.all(np.isfinite(gain.kappa))),
        }
        lam = spec.lam if spec.lam is not None else weighted_laplacian_gap(dens)
        metrics["poincare"] = poincare_diagnostic(dens, h, dns, lam=lam).as_dict()
        dns.to_csv(out_dir / "dns_solution.csv")
        _gain_profile(out_dir / "gain_profile.csv", dens.nodes, cols)
        _check_finite(metrics)
        write_json(out_dir / "metrics.json", metrics)
    except Exception as exc:
        _fail(out_dir, exc, {"stage": "gain-bench"})
        raise
    files = [out_dir / "metrics.json", out_dir / "gain_profile.csv", out_dir / "dns_solution.csv"]
    return ExperimentResult(metrics=metrics, files=files)
