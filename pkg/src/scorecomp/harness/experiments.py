"""The four experiment kinds, each writing its tables, maps and figures."""

from __future__ import annotations

import dataclasses
import logging
import time
from pathlib import Path

import numpy as np

from ..sampler import SamplerConfig, Trajectory, omega_trace, sample
from ..score_models import composed_target, merge_adapters, similarity_probe
from . import plotting
from .artifacts import Emitter, write_trajectory
from .config import ExperimentConfig, to_dict
from .metrics import moment_metrics
from .models import Testbed, build_testbed

log = logging.getLogger(__name__)

METRIC_HEADER = ("method", "seed", "mean_error", "cov_error")


class _Clock:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def run(self, label, fn, *args, **kwargs):
        start = time.perf_counter()
        out = fn(*args, **kwargs)
        self.timings[label] = round(time.perf_counter() - start, 6)
        return out


def _scfg(tb: Testbed, cfg: ExperimentConfig, seed: int, record: bool = False) -> SamplerConfig:
    return SamplerConfig(tb.schedule, cfg.sampler.mode, seed, record_weights=record)


def _summary(rows):
    """Per-method averages over seeds."""
    out = {}
    for method in dict.fromkeys(r[0] for r in rows):
        sel = [r for r in rows if r[0] == method]
        out[method] = {
            "mean_error": float(np.mean([r[2] for r in sel])),
            "cov_error": float(np.mean([r[3] for r in sel])),
            "seeds": len(sel),
        }
    return out


def _trace_outputs(em, clock, tb, cfg, adapters, guidance, label, jobs, method="gated"):
    """Weight trace and graymaps from a short recorded run on the first seed."""
    if not cfg.sampler.record_weights:
        return None
    o = cfg.experiment.outputs
    traj = clock.run(f"{label}/trace", sample, tb.base, adapters, cfg.experiment.condition,
                     guidance, _scfg(tb, cfg, cfg.sampler.seeds[0], record=True),
                     o.trace_trajectories, method=method, jobs=jobs)
    names = [a.name for a in adapters]
    write_trajectory(em, f"{label}/", traj, names, map_stride=o.map_stride,
                     map_trajectory=o.map_trajectory, save_latents=0)
    if o.figures:
        steps = [rec.t for rec in traj.steps]
        fig = plotting.trace_figure(steps, omega_trace(traj), names)
        em.write_figure(f"{label}/omega_trace.png", fig)
        plotting.close(fig)
    return traj


def _sample_methods(clock, tb, cfg, methods, jobs):
    """``methods`` maps a label to (base, adapters, guidance, method)."""
    c = cfg.experiment.condition
    n = cfg.sampler.trajectories
    runs: dict[tuple[str, int], Trajectory] = {}
    for seed in cfg.sampler.seeds:
        for label, (base, adapters, guidance, method) in methods.items():
            log.info("sampling %s seed=%d n=%d", label, seed, n)
            runs[label, seed] = clock.run(
                f"{label}/seed{seed}", sample, base, adapters, c, guidance,
                _scfg(tb, cfg, seed), n, method=method, jobs=jobs)
    return runs


def _score_runs(runs, target, c):
    rows = []
    for (label, seed), traj in runs.items():
        err = moment_metrics(traj.final, target, c)
        rows.append((label, seed, err.mean_error, err.cov_error))
    return rows


def _write_latents(em, runs, cfg):
    keep = cfg.experiment.outputs.save_latents
    first = cfg.sampler.seeds[0]
    for (label, seed), traj in runs.items():
        if seed == first and keep > 0:
            write_trajectory(em, f"{label}/", traj, [], save_latents=keep)


def _error_figure(em, summary, title, rel="errors.png"):
    if not summary:
        return
    fig = plotting.bar_figure(list(summary), [v["mean_error"] for v in summary.values()],
                              "relative mean error", title)
    em.write_figure(rel, fig)
    plotting.close(fig)


def compose_run(cfg, em, clock, jobs=1):
    tb = build_testbed(cfg)
    c = cfg.experiment.condition
    adapters = tb.select(cfg.experiment.relevant or None)
    target = composed_target(tb.base, adapters, c)
    g = cfg.guidance
    methods = {"gated": (tb.base, adapters, g, "gated"),
               "naive": (tb.base, adapters, g, "naive")}
    runs = _sample_methods(clock, tb, cfg, methods, jobs)
    rows = _score_runs(runs, target, c)
    em.write_csv("metrics.csv", METRIC_HEADER, rows)
    _write_latents(em, runs, cfg)
    _trace_outputs(em, clock, tb, cfg, adapters, g, "gated", jobs)
    summary = _summary(rows)
    if cfg.experiment.outputs.figures:
        _error_figure(em, summary, "Composition vs naive averaging")
    return {"summary": summary}


def similarity_run(cfg, em, clock, jobs=1):
    tb = build_testbed(cfg)
    adapters = tb.select()
    conditions = cfg.experiment.probe_conditions or tuple(c.name for c in cfg.models.conditions)
    t = cfg.experiment.probe_step or max(1, cfg.sampler.steps // 2)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    z = rng.standard_normal((cfg.experiment.probe_samples, *tb.base.shape))
    res = clock.run("probe", similarity_probe, tb.base, adapters, conditions, z, t)
    names = [a.name for a in adapters]
    rows = [(names[i], c, str(bool(res.in_distribution[i, j])).lower(), res.cond_similarity[i, j])
            for i in range(len(names)) for j, c in enumerate(conditions)]
    em.write_csv("similarity.csv", ("adapter", "condition", "in_distribution", "similarity"), rows)
    em.write_csv("unconditional.csv", ("adapter", "similarity"),
                 [(n, res.uncond_similarity[i]) for i, n in enumerate(names)])
    per_adapter = {}
    for i, n in enumerate(names):
        inside = res.in_distribution[i]
        per_adapter[n] = {
            "in_distribution": float(res.cond_similarity[i, inside].mean()) if inside.any() else None,
            "out_of_distribution": float(res.cond_similarity[i, ~inside].mean())
            if (~inside).any() else None,
            "unconditional": float(res.uncond_similarity[i]),
        }
    if cfg.experiment.outputs.figures and adapters:
        fig = plotting.heatmap_figure(res.cond_similarity, names, list(conditions),
                                      f"Cosine similarity to base (t={t})")
        em.write_figure("similarity.png", fig)
        plotting.close(fig)
    return {"probe_step": t, "samples": int(z.shape[0]), "adapters": per_adapter}


def _sweep_cells(cfg):
    g = cfg.guidance
    sw = cfg.experiment.sweep
    cells = []
    for name in sw.ablations:
        if name == "full":
            cells.append(("full", g))
        elif name == "no_tokenization":
            cells.append(("no_tokenization", dataclasses.replace(g, global_mode=True)))
        elif name == "constant_tau":
            cells.append(("constant_tau", dataclasses.replace(g, tau_rule="constant",
                                                              tau_constant=1.0)))
        elif name == "no_recentering":
            cells.append(("no_recentering", dataclasses.replace(g, recenter_lambda=1.0)))
    for d in sw.patch_sizes:
        cells.append((f"patch_{d}", dataclasses.replace(g, patch_size=d)))
    for lam in sw.recenter_lambdas:
        cells.append((f"lambda_{lam:g}", dataclasses.replace(g, recenter_lambda=lam)))
    for k in sw.top_ks:
        cells.append((f"topk_{k}", dataclasses.replace(g, top_k=k)))
    return cells


def sweep_run(cfg, em, clock, jobs=1):
    tb = build_testbed(cfg)
    c = cfg.experiment.condition
    adapters = tb.select(cfg.experiment.relevant or None)
    target = composed_target(tb.base, adapters, c)
    header = ("cell", "patch_size", "global_mode", "tau_rule", "recenter_lambda", "top_k",
              "seed", "mean_error", "cov_error")
    rows = []
    cache = {}
    for label, g in _sweep_cells(cfg):
        effective = dataclasses.replace(g, recenter_lambda=1.0) if g.global_mode else g
        for seed in cfg.sampler.seeds:
            key = (effective, seed)
            if key not in cache:
                traj = clock.run(f"{label}/seed{seed}", sample, tb.base, adapters, c, g,
                                 _scfg(tb, cfg, seed), cfg.sampler.trajectories, jobs=jobs)
                cache[key] = moment_metrics(traj.final, target, c)
            err = cache[key]
            rows.append((label, "-" if g.global_mode else g.patch_size,
                         str(g.global_mode).lower(), g.tau_rule,
                         effective.recenter_lambda, "-" if g.top_k is None else g.top_k,
                         seed, err.mean_error, err.cov_error))
    em.write_csv("sweep.csv", header, rows)
    summary = {}
    for r in rows:
        summary.setdefault(r[0], []).append(r[7])
    summary = {k: {"mean_error": float(np.mean(v))} for k, v in summary.items()}
    if cfg.experiment.outputs.figures:
        _error_figure(em, summary, "Ablation sweep", "sweep.png")
    return {"cells": len(summary), "rows": len(rows), "summary": summary}


def dynamic_run(cfg, em, clock, jobs=1):
    tb = build_testbed(cfg)
    c = cfg.experiment.condition
    pool = tb.select()
    relevant = tb.select(cfg.experiment.relevant)
    target = composed_target(tb.base, relevant, c)
    g = cfg.guidance
    k = g.top_k if g.top_k is not None else len(relevant)
    topk = dataclasses.replace(g, top_k=k)
    dense = dataclasses.replace(g, top_k=None)
    methods = {
        "gated_topk": (tb.base, pool, topk, "gated"),
        "gated_all": (tb.base, pool, dense, "gated"),
        "naive": (tb.base, pool, dense, "naive"),
        "merge": (merge_adapters(tb.base, pool), [], dense, "base"),
        "static": (tb.base, relevant, dense, "gated"),
    }
    runs = _sample_methods(clock, tb, cfg, methods, jobs)
    rows = _score_runs(runs, target, c)
    em.write_csv("metrics.csv", METRIC_HEADER, rows)
    _write_latents(em, runs, cfg)
    _trace_outputs(em, clock, tb, cfg, pool, topk, "gated_topk", jobs)
    summary = _summary(rows)
    if cfg.experiment.outputs.figures:
        _error_figure(em, summary, f"Dynamic selection ({len(pool)} adapters loaded, k={k})")
    return {"pool_size": len(pool), "top_k": k, "summary": summary}


RUNNERS = {
    "compose-run": compose_run,
    "similarity-probe": similarity_run,
    "ablation-sweep": sweep_run,
    "dynamic-select": dynamic_run,
}


def run_experiment(cfg: ExperimentConfig, out_dir, jobs: int = 1) -> dict:
    """Run ``cfg`` and write every artifact plus the manifest into ``out_dir``."""
    em = Emitter(Path(out_dir))
    clock = _Clock()
    metrics = clock.run("total", RUNNERS[cfg.kind], cfg, em, clock, jobs)
    echo = to_dict(cfg.replace(output_dir=None))
    return em.finalize(cfg.kind, echo, metrics, clock.timings)
