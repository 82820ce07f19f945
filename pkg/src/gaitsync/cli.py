"""Command-line entry point: ``gaitsync <command> ...``.

Commands hand data over through directories.  Each output directory holds a
``manifest.json`` naming its artifact kind and format version, the effective
configuration and its hash; downstream commands check the kind and version
and inherit the configuration unless ``--config`` is given.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from . import sim
from .config import ConfigError, PipelineConfig, canonical_json, config_from_dict, load_config
from .geometry import Frame
from .icfp import DynamicGraph
from .meshio import load_cloud, load_mesh, save_cloud, save_mesh
from .sync import FrameMapping
from .training import load_checkpoint, save_checkpoint

log = logging.getLogger("gaitsync")

ARTIFACT_VERSION = 1


class ArtifactError(RuntimeError):
    pass


# -- artifacts ---------------------------------------------------------------------

def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(out: Path, kind: str, cfg: PipelineConfig, **extra) -> None:
    doc = {"format": f"gaitsync.{kind}", "version": ARTIFACT_VERSION, "config_hash": cfg.hash(),
           "config": cfg.to_dict(), **extra}
    write_json(out / "manifest.json", doc)


def read_manifest(directory, kind: str) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise ArtifactError(f"{directory}: missing manifest.json (expected a {kind} artifact)")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != f"gaitsync.{kind}":
        raise ArtifactError(f"{directory}: is a {doc.get('format')!r} artifact, expected 'gaitsync.{kind}'")
    if doc.get("version") != ARTIFACT_VERSION:
        raise ArtifactError(f"{directory}: version mismatch: artifact has version {doc.get('version')!r}, "
                            f"this tool reads version {ARTIFACT_VERSION}")
    return doc


def resolve_config(args, upstream: dict | None = None) -> PipelineConfig:
    if args.config:
        cfg = load_config(args.config)
    elif upstream is not None:
        cfg = config_from_dict(upstream["config"])
    else:
        cfg = PipelineConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg


def save_session(out: Path, frames: dict, truth, cfg: PipelineConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for cam in sorted(frames):
        d = out / f"cam{cam}"
        d.mkdir(exist_ok=True)
        for f in frames[cam]:
            save_cloud(d / f"frame{f.frame_index}.ply", f.cloud)
    write_json(out / "truth.json", {"format": "gaitsync.truth", "version": ARTIFACT_VERSION, **truth.to_dict()})
    write_manifest(out, "session", cfg, cameras=sorted(frames),
                   frames={str(c): len(frames[c]) for c in sorted(frames)}, fps=cfg.sim.fps)


def load_session(directory):
    doc = read_manifest(directory, "session")
    d = Path(directory)
    fps = float(doc["fps"])
    frames = {}
    for cam in doc["cameras"]:
        n = int(doc["frames"][str(cam)])
        frames[int(cam)] = [Frame(int(cam), k, k / fps, load_cloud(d / f"cam{cam}" / f"frame{k}.ply"))
                            for k in range(n)]
    truth = None
    tpath = d / "truth.json"
    if tpath.is_file():
        truth = sim.CaptureTruth.from_dict(json.loads(tpath.read_text(encoding="utf-8")))
    return frames, truth, doc


def load_graphs(directory):
    doc = read_manifest(directory, "graphs")
    d = Path(directory)
    graphs = {int(c): DynamicGraph.from_dict(json.loads((d / f"cam{c}.json").read_text(encoding="utf-8")))
              for c in doc["cameras"]}
    return graphs, doc


def load_mappings(directory: Path, method: str) -> dict:
    d = Path(directory) / "mappings" / method
    if not d.is_dir():
        raise ArtifactError(f"{directory}: no mappings for method {method!r}")
    maps = {}
    for p in sorted(d.glob("cam*.json")):
        m = FrameMapping.from_dict(json.loads(p.read_text(encoding="utf-8")))
        maps[m.camera_id] = m
    return maps


def save_mappings(out: Path, method: str, mappings: dict) -> None:
    d = out / "mappings" / method
    d.mkdir(parents=True, exist_ok=True)
    for cam, m in sorted(mappings.items()):
        doc = m.to_dict()
        doc["method"] = method
        write_json(d / f"cam{cam}.json", doc)


# -- commands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    frames, truth = pl.simulate(cfg)
    save_session(Path(args.out), frames, truth, cfg)
    log.info("session with %d cameras written to %s", len(frames), args.out)
    return 0


def cmd_graph(args) -> int:
    frames, _, sdoc = load_session(args.session)
    cfg = resolve_config(args, sdoc)
    graphs = pl.build_graphs(frames, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cam, g in graphs.items():
        (out / f"cam{cam}.json").write_text(canonical_json(g.to_dict()) + "\n", encoding="utf-8")
    write_manifest(out, "graphs", cfg, cameras=sorted(graphs), n_reference=pl.n_reference_frames(frames),
                   nodes={str(c): g.node_count for c, g in graphs.items()})
    return 0


def cmd_train(args) -> int:
    graphs, gdoc = load_graphs(args.graphs)
    cfg = resolve_config(args, gdoc)
    model, curve = pl.train_base_model(graphs, cfg, log_fn=_epoch_logger("train"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.gsm", model, {"config_hash": cfg.hash(), "T": cfg.labeling.T, "C": cfg.labeling.C})
    (out / "loss.csv").write_text(curve.to_csv(), encoding="utf-8")
    write_manifest(out, "model", cfg)
    return 0


def cmd_sync(args) -> int:
    graphs, gdoc = load_graphs(args.graphs)
    frames, _, _ = load_session(args.session)
    mdoc = read_manifest(args.model, "model")
    cfg = resolve_config(args, mdoc)
    model, extra = load_checkpoint(Path(args.model) / "model.gsm")
    if extra.get("C") != cfg.labeling.C or extra.get("T") != cfg.labeling.T:
        raise ArtifactError(f"model was trained for T={extra.get('T')}, C={extra.get('C')}; "
                            f"config asks for T={cfg.labeling.T}, C={cfg.labeling.C}")
    n_ref = int(gdoc["n_reference"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hier = pl.synchronise(graphs, cfg, model, n_reference=n_ref, log_fn=_stage_logger())
    save_mappings(out, "learned", hier.mappings)
    for k, st in enumerate(hier.stages):
        if st.loss_curve is not None:
            (out / f"stage{k + 1}_loss.csv").write_text(st.loss_curve.to_csv(), encoding="utf-8")
    methods = ["learned"]
    for b in args.baseline or []:
        maps = pl.raw_mappings(frames, n_ref) if b == "raw" else pl.exhaustive_mappings(frames, cfg, n_ref)
        save_mappings(out, b, maps)
        methods.append(b)
    merged = out / "merged"
    merged.mkdir(exist_ok=True)
    covered = []
    for r, cloud in enumerate(pl.merged_sequence(frames, hier.mappings)):
        if cloud is not None:
            save_cloud(merged / f"frame{r}.ply", cloud)
            covered.append(r)
    write_manifest(out, "sync", cfg, methods=methods, n_reference=n_ref, merged_frames=covered,
                   stages=[{"reference": "".join(map(str, s.reference_cameras)), "camera": s.camera_id}
                           for s in hier.stages])
    return 0


def cmd_register(args) -> int:
    sdoc = read_manifest(args.synced, "sync")
    cfg = resolve_config(args, sdoc)
    template = load_mesh(args.template) if args.template else sim.template_mesh(pl.make_shape(cfg))
    merged = Path(args.synced) / "merged"
    n_ref = int(sdoc["n_reference"])
    clouds = [None] * n_ref
    for r in sdoc["merged_frames"]:
        clouds[r] = load_cloud(merged / f"frame{r}.ply")
    seq = pl.register_sequence(clouds, template, cfg, args.stride)
    out = Path(args.out)
    (out / "mesh").mkdir(parents=True, exist_ok=True)
    ext = args.format
    for r, res in zip(seq.frames, seq.results):
        save_mesh(out / "mesh" / f"frame{r:04d}.{ext}", res.mesh)
    rows = ["frame,L_f,W_f,BW_f"] + [f"{f},{L!r},{W!r},{B!r}" for f, L, W, B in seq.dimension_rows()]
    (out / "dimensions.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    report = {"frames": seq.frames, "residual_rms": [r.residual for r in seq.results],
              "converged": [bool(r.converged) for r in seq.results],
              "measurement": "axis-aligned extents; ball band 60-75% of length (stand-in definition)"}
    if len(seq.dimensions) >= 2:
        v = seq.variation()
        report["variation"] = {"delta_length": v.delta_length, "delta_width": v.delta_width,
                               "delta_ball_width": v.delta_ball_width, "mean_length": v.mean_length,
                               "relative_to_length": v.relative_to_length()}
    write_json(out / "dimensions.json", {"config_hash": cfg.hash(), **report})
    write_manifest(out, "registration", cfg, frames=seq.frames, mesh_format=ext)
    return 0


def cmd_eval(args) -> int:
    frames, truth, _ = load_session(args.session)
    sdoc = read_manifest(args.synced, "sync")
    cfg = resolve_config(args, sdoc)
    n_ref = int(sdoc["n_reference"])
    methods = {"raw": pl.raw_mappings(frames, n_ref)}
    for m in sdoc["methods"]:
        if m != "raw":
            methods[m] = load_mappings(Path(args.synced), m)
    doc = pl.metrics_report(frames, methods, cfg, truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(pl.metrics_json(doc), encoding="utf-8")
    (out / "metrics.csv").write_text(pl.metrics_csv(doc), encoding="utf-8")
    print(pl.metrics_csv(doc), end="")
    return 0


def cmd_export(args) -> int:
    out = Path(args.out)
    if args.what == "template":
        cfg = resolve_config(args)
        save_mesh(out, sim.template_mesh(pl.make_shape(cfg)))
    elif args.what == "session":
        cfg = resolve_config(args)
        frames, truth = pl.simulate(cfg)
        save_session(out, frames, truth, cfg)
    else:
        cfg = resolve_config(args)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def _epoch_logger(tag):
    return lambda e, v: log.info("%s epoch %d total %.4f", tag, e, v["total"])


def _stage_logger():
    return lambda s, e, v: log.info("stage %d epoch %d total %.4f", s + 1, e, v["total"])


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaitsync", description="Synchronise multi-camera 4D captures and "
                                "register a template to the merged scans.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_required=False):
        sp.add_argument("--config", help="JSON config file (defaults, or the upstream artifact's config)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
        if seed_required:
            sp.add_argument("--seed", type=int, required=True)
        return sp

    sp = common(sub.add_parser("synth", help="simulate a capture session"), seed_required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("graph", help="build per-camera dynamic graphs"))
    sp.add_argument("--session", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_graph)

    sp = common(sub.add_parser("train", help="train the first-stage sync model"), seed_required=True)
    sp.add_argument("--graphs", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("sync", help="hierarchical synchronisation and merging"))
    sp.add_argument("--graphs", required=True)
    sp.add_argument("--session", required=True)
    sp.add_argument("--model", required=True, help="directory written by 'train'")
    sp.add_argument("--baseline", action="append", choices=["raw", "exhaustive"])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sync)

    sp = common(sub.add_parser("register", help="register the template to every merged cloud"))
    sp.add_argument("--synced", required=True, help="directory written by 'sync'")
    sp.add_argument("--template", help="PLY/OBJ template (default: the simulator's rest shape)")
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--format", choices=["obj", "ply"], default="obj")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_register)

    sp = common(sub.add_parser("eval", help="k-fold CPGD metrics for every synced method"))
    sp.add_argument("--session", required=True)
    sp.add_argument("--synced", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("export", help="write the template mesh, a session or the effective config"))
    sp.add_argument("what", choices=["template", "session", "config"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ArtifactError, ValueError, RuntimeError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
