"""End-to-end orchestration: simulate, build graphs, synchronise, register, evaluate.

Every stage is a pure function of its inputs and the :class:`PipelineConfig`;
the CLI wraps these with file handoff.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import sim
from .config import PipelineConfig, canonical_json
from .geometry import TriMesh
from .icfp import DynamicGraph, build_dynamic_graph, knn_edges
from .registration import DimensionVariation, dimension_variation, foot_dimensions, register_template
from .sync import (FrameMapping, HierarchyResult, SyncError, dense_positions, exhaustive_cloud_sync,
                   exhaustive_pair_sync, hierarchical_sync, kfold_cpgd_eval, learned_pair_sync, merge_at_timestamp,
                   percent_improvement, stage_windows)
from .training import LossCurve, train

log = logging.getLogger(__name__)

METRICS_VERSION = 1


def seeds_for(cfg: PipelineConfig) -> dict:
    """Independent per-stage seeds derived from the master seed."""
    names = ("graph", "train", "sync")
    states = np.random.SeedSequence(cfg.seed).generate_state(len(names))
    return dict(zip(names, (int(s) for s in states)))


def make_shape(cfg: PipelineConfig) -> sim.DeformingShape:
    return sim.DeformingShape(length_variation=cfg.sim.length_variation, width_variation=cfg.sim.width_variation)


def simulate(cfg: PipelineConfig):
    s = cfg.sim
    cams = sim.default_cameras(s.n_cameras, delay_per_frame=s.delay_per_frame, jitter=s.jitter, fps=s.fps)
    return sim.simulate_session(make_shape(cfg), cams, s.duration, s.noise_sigma, s.n_points, cfg.seed)


def build_graphs(frames: dict, cfg: PipelineConfig) -> dict:
    rng = np.random.default_rng(seeds_for(cfg)["graph"])
    graphs = {}
    for cam in sorted(frames):
        g = build_dynamic_graph(frames[cam], cfg.graph.icfp, cfg.graph.knn)
        if cfg.graph.max_nodes and g.node_count > cfg.graph.max_nodes:
            keep = np.sort(rng.choice(g.node_count, cfg.graph.max_nodes, replace=False))
            sub = g.positions[keep]
            g = DynamicGraph(sub, g.valid_frames, knn_edges(sub[:, 0], cfg.graph.knn), g.camera_id, g.timestamps)
        graphs[cam] = g
    return graphs


def n_reference_frames(frames: dict) -> int:
    return len(frames[min(frames)])


def train_base_model(graphs: dict, cfg: PipelineConfig, truth_offsets: dict | None = None, log_fn=None):
    """Train the first-stage model on the pair (camera 1, camera 2)."""
    cams = sorted(graphs)
    if len(cams) < 2:
        raise SyncError("training needs at least two cameras")
    seed = seeds_for(cfg)["train"]
    first = graphs[cams[0]]
    n_ref = int(max(first.valid_frames)) + 1
    ref = DynamicGraph(dense_positions(first, n_ref), tuple(range(n_ref)), first.edges, first.camera_id)
    truth = None if truth_offsets is None else truth_offsets.get(cams[1])
    data = stage_windows(ref, graphs[cams[1]], cfg.labeling, cfg.sync, cfg.train.batch_size, seed, truth)
    return train(data, replace(cfg.train, seed=seed), cfg.model, log=log_fn)


def synchronise(graphs: dict, cfg: PipelineConfig, base_model=None, truth_offsets=None, log_fn=None,
                n_reference: int | None = None) -> HierarchyResult:
    pair = learned_pair_sync(cfg.sync, cfg.labeling, cfg.train, cfg.model, seeds_for(cfg)["sync"],
                             base_model, truth_offsets, log_fn)
    return hierarchical_sync(graphs, pair, n_reference)


def exhaustive_mappings(frames: dict, cfg: PipelineConfig, n_reference: int | None = None) -> dict:
    """Cloud-based exhaustive CPGD baseline (see :func:`exhaustive_cloud_sync`)."""
    return exhaustive_cloud_sync(frames, cfg.labeling, n_reference, cfg.sync.tau)


def exhaustive_graph_mappings(graphs: dict, cfg: PipelineConfig, n_reference: int | None = None) -> dict:
    """Exhaustive search on the dynamic-graph node sets instead of the clouds."""
    res = hierarchical_sync(graphs, exhaustive_pair_sync(cfg.labeling, cfg.sync.tau), n_reference)
    return res.mappings


def raw_mappings(frames: dict, n_reference: int) -> dict:
    return {c: FrameMapping.identity(c, len(frames[c]), n_reference) for c in sorted(frames)}


def merged_sequence(frames: dict, mappings: dict) -> list:
    """Merged cloud per reference frame (``None`` where no camera covers it)."""
    n_ref = next(iter(mappings.values())).n_reference
    out = []
    for r in range(n_ref):
        try:
            out.append(merge_at_timestamp(frames, mappings, r))
        except SyncError:
            out.append(None)
    return out


@dataclass
class RegisteredSequence:
    frames: list  # reference frame index per entry
    results: list  # RegistrationResult per entry
    dimensions: list  # FootDimensions per entry

    def variation(self) -> DimensionVariation:
        return dimension_variation(self.dimensions)

    def dimension_rows(self) -> list:
        return [(f, d.length, d.width, d.ball_width) for f, d in zip(self.frames, self.dimensions)]


def register_sequence(clouds: list, template: TriMesh, cfg: PipelineConfig, stride: int = 1) -> RegisteredSequence:
    frames, results, dims = [], [], []
    for r in range(0, len(clouds), stride):
        c = clouds[r]
        if c is None or len(c) == 0:
            continue
        res = register_template(template, c, cfg.registration)
        frames.append(r)
        results.append(res)
        dims.append(foot_dimensions(res.mesh))
    return RegisteredSequence(frames, results, dims)


def accuracy(mappings: dict, truth) -> dict:
    out = {}
    for cam, m in mappings.items():
        ref = np.asarray(truth.reference_frame[cam])
        n = min(len(ref), len(m))
        out[cam] = float(np.mean(ref[:n] == m.reference[:n]))
    return out


def metrics_report(frames: dict, methods: dict, cfg: PipelineConfig, truth=None) -> dict:
    """k-fold CPGD for every method plus offset accuracy when truth is known.

    ``methods`` maps a method name to its camera -> FrameMapping dict and
    must include ``"raw"``.
    """
    if "raw" not in methods:
        raise ValueError("the raw baseline is required")
    reports = {name: kfold_cpgd_eval(frames, maps, cfg.eval_min_cameras) for name, maps in methods.items()}
    raw = reports["raw"].rmse
    doc = {"format": "gaitsync.metrics", "version": METRICS_VERSION, "config_hash": cfg.hash(),
           "rmse_raw": _r(raw), "methods": {}}
    for name in sorted(methods):
        rep = reports[name]
        entry = {"rmse": _r(rep.rmse), "pi": _r(percent_improvement(raw, rep.rmse)) if raw > 0 else 0.0,
                 "cells": rep.n_cells, "skipped": rep.n_skipped,
                 "per_camera": {str(c): _r(v) for c, v in sorted(rep.per_camera.items())}}
        if truth is not None:
            acc = accuracy(methods[name], truth)
            non_ref = [v for c, v in acc.items() if c != min(acc)]
            entry["accuracy"] = _r(float(np.mean(non_ref)) if non_ref else 1.0)
            entry["accuracy_per_camera"] = {str(c): _r(v) for c, v in sorted(acc.items())}
        doc["methods"][name] = entry
    return doc


def _r(x: float) -> float:
    # fixed precision keeps reports stable across platforms with different last-bit rounding
    return float(f"{x:.9g}")


def metrics_csv(doc: dict) -> str:
    lines = ["method,rmse,pi,accuracy"]
    for name, e in doc["methods"].items():
        lines.append(f"{name},{e['rmse']!r},{e['pi']!r},{e.get('accuracy', '')!r}".replace("''", ""))
    return "\n".join(lines) + "\n"


def metrics_json(doc: dict) -> str:
    return canonical_json(doc) + "\n"


@dataclass
class PipelineResult:
    config: PipelineConfig
    truth: object
    graphs: dict
    hierarchy: HierarchyResult
    base_curve: LossCurve
    mappings: dict  # method -> camera -> FrameMapping
    metrics: dict
    registered: RegisteredSequence | None = None
    timings: dict = field(default_factory=dict)


def run_pipeline(cfg: PipelineConfig, register: bool = True, register_stride: int = 1, log_fn=None) -> PipelineResult:
    t = {}
    t0 = time.perf_counter()
    frames, truth = simulate(cfg)
    t["simulate"] = time.perf_counter() - t0
    n_ref = n_reference_frames(frames)
    t0 = time.perf_counter()
    graphs = build_graphs(frames, cfg)
    t["graph"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    model, curve = train_base_model(graphs, cfg, log_fn=log_fn)
    hier = synchronise(graphs, cfg, model, n_reference=n_ref)
    t["sync"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    methods = {"raw": raw_mappings(frames, n_ref), "learned": hier.mappings,
               "exhaustive": exhaustive_mappings(frames, cfg, n_ref)}
    t["baselines"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    metrics = metrics_report(frames, methods, cfg, truth)
    t["eval"] = time.perf_counter() - t0
    reg = None
    if register:
        t0 = time.perf_counter()
        clouds = merged_sequence(frames, hier.mappings)
        reg = register_sequence(clouds, sim.template_mesh(make_shape(cfg)), cfg, register_stride)
        t["register"] = time.perf_counter() - t0
    return PipelineResult(cfg, truth, graphs, hier, curve, methods, metrics, reg, t)
