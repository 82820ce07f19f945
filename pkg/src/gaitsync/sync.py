"""Hierarchical frame synchronisation against camera 1's timeline.

Class labels are integer frame offsets: class ``c`` of an
:class:`OffsetLabeling` with ``C`` classes means "this source frame shows the
instant of reference frame ``k + offsets[c]``".

Network input for a (reference, other) pair is a joint node set: ``n`` nodes
drawn from the reference graph at reference frame ``t`` and ``n`` nodes drawn
from the other graph at its frame ``t`` (see :class:`PairSampler`).  The other
side gets a constant type offset so the embedding can tell the sides apart.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.isotonic import IsotonicRegression

from . import geometry as gm
from .adgc import GraphStructure, ModelDims, SyncModel, predict_proba
from .icfp import DynamicGraph, knn_edges
from .training import LossCurve, TrainConfig, WindowGroup, train

log = logging.getLogger(__name__)


class SyncError(RuntimeError):
    pass


@dataclass(frozen=True)
class OffsetLabeling:
    T: int = 40
    C: int = 7

    def __post_init__(self):
        if self.C < 1 or self.C % 2 == 0:
            raise ValueError("C must be odd so that a zero-offset bin exists")
        if self.T < 1:
            raise ValueError("T must be positive")

    @property
    def offsets(self) -> np.ndarray:
        h = self.C // 2
        return np.arange(-h, h + 1)

    def class_of(self, offset) -> np.ndarray:
        """Class index of integer offsets, clipped into the bin range."""
        h = self.C // 2
        return np.clip(np.asarray(offset, dtype=int), -h, h) + h


# -- frame mappings ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FrameMapping:
    """``reference[k]`` is the reference frame assigned to source frame ``k``."""

    camera_id: int
    reference: np.ndarray
    n_reference: int
    method: str = "learned"

    def __post_init__(self):
        r = np.asarray(self.reference, dtype=np.int64).ravel()
        if len(r) and (r.min() < 0 or r.max() >= self.n_reference):
            raise ValueError("reference index outside the reference timeline")
        if np.any(np.diff(r) < 0):
            raise ValueError("frame mapping is not monotone")
        r.setflags(write=False)
        object.__setattr__(self, "reference", r)

    def __len__(self):
        return len(self.reference)

    @property
    def assignments(self) -> list:
        return [(k, int(r)) for k, r in enumerate(self.reference)]

    @property
    def offsets(self) -> np.ndarray:
        return self.reference - np.arange(len(self.reference))

    def sources_at(self, r: int) -> np.ndarray:
        return np.flatnonzero(self.reference == r)

    def accuracy(self, truth_reference) -> float:
        t = np.asarray(truth_reference, dtype=np.int64)
        if t.shape != self.reference.shape:
            raise ValueError("truth length does not match the mapping")
        return float(np.mean(t == self.reference))

    @classmethod
    def identity(cls, camera_id: int, n_source: int, n_reference: int, method: str = "raw") -> FrameMapping:
        return cls(camera_id, np.minimum(np.arange(n_source), n_reference - 1), n_reference, method)

    def to_dict(self) -> dict:
        return {"format": "gaitsync.frame_mapping", "version": 1, "camera_id": self.camera_id,
                "method": self.method, "n_reference": self.n_reference,
                "assignments": [list(a) for a in self.assignments]}

    @classmethod
    def from_dict(cls, d: dict) -> FrameMapping:
        if d.get("format") != "gaitsync.frame_mapping" or d.get("version") != 1:
            raise ValueError("not a version-1 frame mapping document")
        pairs = sorted((int(k), int(r)) for k, r in d["assignments"])
        if [k for k, _ in pairs] != list(range(len(pairs))):
            raise ValueError("assignments must cover source frames 0..n-1 exactly once")
        return cls(int(d["camera_id"]), np.array([r for _, r in pairs], dtype=np.int64),
                   int(d["n_reference"]), d.get("method", "learned"))


def isotonic_projection(reference_estimate, n_reference: int, weights=None) -> np.ndarray:
    """Closest non-decreasing sequence (pool adjacent violators), rounded and clipped."""
    y = np.asarray(reference_estimate, dtype=float)
    if len(y) == 0:
        return np.zeros(0, dtype=np.int64)
    fit = IsotonicRegression(increasing=True).fit_transform(np.arange(len(y)), y, sample_weight=weights)
    # rounding and clipping are both monotone, so the result stays sorted
    return np.clip(np.floor(fit + 0.5), 0, n_reference - 1).astype(np.int64)


# -- pair features -----------------------------------------------------------------

@dataclass(frozen=True)
class PairSampler:
    """How joint node sets are drawn, connected and normalised for the network.

    Both sides are expressed relative to the reference side's mean
    trajectory, so a time shift of the other side shows up directly in its
    node coordinates instead of being hidden under the shared rigid motion.
    """

    nodes_per_side: int = 12
    connectivity: str = "full"  # "full" or "knn"
    knn: int = 4
    scale: float = 20.0
    other_gain: float = 3.0
    type_offset: tuple = (0.0, 0.0, 3.0)

    def __post_init__(self):
        if self.nodes_per_side < 1:
            raise ValueError("nodes_per_side must be positive")
        if self.connectivity not in ("full", "knn"):
            raise ValueError("connectivity must be 'full' or 'knn'")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def normalise(self, ref_traj, oth_traj) -> np.ndarray:
        """``(n, T, 3)`` trajectories of each side -> ``(T, 2n, 3)`` network input."""
        R = np.array(ref_traj, dtype=float)
        O = np.array(oth_traj, dtype=float)
        O -= R.mean(axis=0, keepdims=True)
        R -= R.mean(axis=1, keepdims=True)
        O -= O.mean(axis=1, keepdims=True)
        O = O * self.other_gain + np.asarray(self.type_offset) * self.scale
        return np.concatenate([R, O], axis=0).transpose(1, 0, 2) / self.scale

    def structure(self, ref_mean, oth_mean) -> GraphStructure:
        pos = np.concatenate([ref_mean, oth_mean], axis=0)
        n = len(pos)
        if self.connectivity == "full":
            A = np.ones((n, n)) - np.eye(n)
        else:
            A = np.zeros((n, n))
            e = knn_edges(pos, self.knn)
            if len(e):
                A[e[:, 0], e[:, 1]] = A[e[:, 1], e[:, 0]] = 1.0
        return GraphStructure.from_graph(A, pos, 3)


def dense_positions(graph: DynamicGraph, n_frames: int | None = None) -> np.ndarray:
    """Node positions on every frame index ``0..n_frames-1``; gaps take the nearest retained frame."""
    vf = np.asarray(graph.valid_frames)
    n = int(vf.max()) + 1 if n_frames is None else n_frames
    col = np.abs(np.arange(n)[:, None] - vf[None, :]).argmin(axis=1)
    return graph.positions[:, col]


def _choose(rng, n_total: int, n: int) -> np.ndarray:
    return rng.choice(n_total, size=n, replace=n_total < n)


def _at_fractional(P, o):
    """Positions ``(n, len(o), 3)`` linearly interpolated at fractional frame indices ``o``."""
    lo = np.floor(o).astype(int)
    hi = np.minimum(lo + 1, P.shape[1] - 1)
    w = (o - lo)[None, :, None]
    return (1.0 - w) * P[:, lo] + w * P[:, hi]


def self_shift_windows(positions, labeling: OffsetLabeling, sampler: PairSampler, rng,
                       n_groups: int, per_group: int = 8, max_drift: float = 0.1) -> list:
    """Supervision from a single graph: two spatial halves, one shifted by a known offset.

    Each window pairs nodes from one side of a random plane (shown at frame
    ``t``) with nodes from the other side shown at the fractional frame
    ``t + s(t)``, interpolated linearly.  Half the windows use a constant
    shift, the rest a shift drifting by up to ``max_drift`` frames per frame,
    mimicking clock drift.  Step labels are ``s(t)`` rounded to a bin.
    """
    P = np.asarray(positions, dtype=float)
    F = P.shape[1]
    T = labeling.T
    if F < T:
        raise SyncError(f"graph covers {F} frames, fewer than the window length {T}")
    h = labeling.C // 2
    mean = P.mean(axis=1)
    groups = []
    while len(groups) < n_groups:
        normal = rng.normal(size=3)
        side = (mean - mean.mean(axis=0)) @ normal > 0
        a, b = np.flatnonzero(side), np.flatnonzero(~side)
        if len(a) < 2 or len(b) < 2:
            continue
        if rng.random() < 0.5:
            a, b = b, a
        ai = a[_choose(rng, len(a), sampler.nodes_per_side)]
        bi = b[_choose(rng, len(b), sampler.nodes_per_side)]
        structure = sampler.structure(mean[ai], mean[bi])
        Xs, Ys = [], []
        for _ in range(per_group):
            s0 = rng.uniform(-h - 0.5, h + 0.5)
            rate = rng.uniform(-max_drift, max_drift) if rng.random() < 0.5 else 0.0
            t0 = int(rng.integers(0, F - T + 1))
            t = np.arange(t0, t0 + T)
            o = np.clip(t + s0 + rate * (t - t0), 0, F - 1)
            Xs.append(sampler.normalise(P[ai][:, t], _at_fractional(P[bi], o)))
            Ys.append(labeling.class_of(np.clip(np.rint(o - t), -h, h).astype(int)))
        groups.append(WindowGroup(structure, np.stack(Xs), np.stack(Ys)))
    return groups


def _trimmed_sym_cpgd(a, b, tau: float, tree_a=None, tree_b=None) -> float:
    tree_a = tree_a or cKDTree(a)
    tree_b = tree_b or cKDTree(b)
    da, _ = tree_b.query(a)
    db, _ = tree_a.query(b)
    return 0.5 * (np.minimum(da, tau).mean() + np.minimum(db, tau).mean())


def offset_costs(ref_pos, oth_pos, labeling: OffsetLabeling, tau: float = 6.0, half_window: int = 2) -> np.ndarray:
    """``(F_other, C)`` trimmed symmetric CPGD between node sets for every candidate offset.

    Costs are averaged over ``+-half_window`` neighbouring frames; offsets that
    leave the reference timeline cost ``inf``.
    """
    R = np.asarray(ref_pos, dtype=float)
    O = np.asarray(oth_pos, dtype=float)
    Fr, Fo = R.shape[1], O.shape[1]
    trees_r = [cKDTree(R[:, r]) for r in range(Fr)]
    raw = np.full((Fo, labeling.C), np.inf)
    for k in range(Fo):
        tree_o = cKDTree(O[:, k])
        for c, d in enumerate(labeling.offsets):
            r = k + d
            if 0 <= r < Fr:
                raw[k, c] = _trimmed_sym_cpgd(O[:, k], R[:, r], tau, tree_o, trees_r[r])
    return _window_average(raw, half_window)


def _window_average(raw, half_window: int) -> np.ndarray:
    F = len(raw)
    out = np.empty_like(raw)
    for k in range(F):
        lo, hi = max(0, k - half_window), min(F, k + half_window + 1)
        block = raw[lo:hi]
        with np.errstate(invalid="ignore"):
            out[k] = np.where(np.isinf(block).any(axis=0), np.inf, block.mean(axis=0))
        # near the ends a candidate may be out of range for a neighbour only
        bad = np.isinf(out[k]) & np.isfinite(raw[k])
        out[k, bad] = raw[k, bad]
    return out


def pair_windows(ref_pos, oth_pos, offsets_per_frame, labeling: OffsetLabeling, sampler: PairSampler,
                 rng, n_groups: int, per_group: int = 8, shift_augment: bool = True) -> list:
    """Windows from a real (reference, other) pair with known per-frame offsets.

    With ``shift_augment`` windows are augmented with whole-sequence index
    shifts ``s`` so every class occurs: step ``t`` shows other frame
    ``t + s``, labelled ``offset[t + s] + s``.
    """
    R = np.asarray(ref_pos, dtype=float)
    O = np.asarray(oth_pos, dtype=float)
    off = np.asarray(offsets_per_frame, dtype=int)
    Fo = O.shape[1]
    T = labeling.T
    if Fo < T or R.shape[1] < T:
        raise SyncError("insufficient overlap for a training window")
    h = labeling.C // 2
    groups = []
    for _ in range(n_groups):
        ri = _choose(rng, R.shape[0], sampler.nodes_per_side)
        oi = _choose(rng, O.shape[0], sampler.nodes_per_side)
        structure = sampler.structure(R[ri].mean(axis=1), O[oi].mean(axis=1))
        Xs, Ys = [], []
        for _ in range(per_group):
            s = int(rng.integers(-h, h + 1)) if shift_augment else 0
            t0 = int(rng.integers(0, Fo - T + 1))
            t = np.arange(t0, t0 + T)
            o = np.clip(t + s, 0, Fo - 1)
            rr = np.clip(t, 0, R.shape[1] - 1)
            Xs.append(sampler.normalise(R[ri][:, rr], O[oi][:, o]))
            Ys.append(labeling.class_of(o + off[o] - t))
        groups.append(WindowGroup(structure, np.stack(Xs), np.stack(Ys)))
    return groups


def make_training_windows(ref_graph: DynamicGraph, other_graph: DynamicGraph, labeling: OffsetLabeling,
                          truth=None, *, source: str | None = None, sampler: PairSampler | None = None,
                          n_groups: int = 24, per_group: int = 8, seed: int = 0, n_reference: int | None = None,
                          tau: float = 6.0, shift_augment: bool = True) -> list:
    """Labelled training windows for one synchronisation stage.

    ``source`` picks the supervision:

    * ``"truth"``: per-frame true offsets of ``other_graph`` (``truth``, required);
    * ``"pseudo"``: offsets minimising trimmed symmetric CPGD between the node sets;
    * ``"self"``: known shifts between halves of each graph (no pair labels needed).

    Defaults to ``"truth"`` when ``truth`` is given, else ``"pseudo"``.
    """
    sampler = sampler or PairSampler()
    source = source or ("truth" if truth is not None else "pseudo")
    rng = np.random.default_rng(seed)
    R = dense_positions(ref_graph, n_reference)
    O = dense_positions(other_graph)
    if min(R.shape[1], O.shape[1]) < labeling.T:
        raise SyncError(f"insufficient overlap: need {labeling.T} frames, have "
                        f"{R.shape[1]} (reference) and {O.shape[1]} (other)")
    if source == "self":
        half = n_groups // 2
        return (self_shift_windows(R, labeling, sampler, rng, n_groups - half, per_group)
                + self_shift_windows(O, labeling, sampler, rng, half, per_group))
    if source == "truth":
        if truth is None:
            raise ValueError("truth offsets required for source='truth'")
        off = np.asarray(truth, dtype=int)
        if len(off) != O.shape[1]:
            raise ValueError("truth must give one offset per frame of the other graph")
    elif source == "pseudo":
        off = labeling.offsets[np.argmin(offset_costs(R, O, labeling, tau), axis=1)]
    else:
        raise ValueError(f"unknown label source {source!r}")
    return pair_windows(R, O, off, labeling, sampler, rng, n_groups, per_group, shift_augment)


# -- synchronisation ---------------------------------------------------------------

def frame_probabilities(model: SyncModel, ref_pos, oth_pos, labeling: OffsetLabeling,
                        sampler: PairSampler, rng, repeats: int = 4) -> np.ndarray:
    """Per-frame class probabilities for the other sequence, ``(F_other, C)``.

    Every length-``T`` window is scored; a frame's probabilities average all
    windows and node draws covering it.
    """
    R = np.asarray(ref_pos, dtype=float)
    O = np.asarray(oth_pos, dtype=float)
    Fo, T = O.shape[1], labeling.T
    if Fo < T:
        raise SyncError(f"other sequence has {Fo} frames, fewer than the window length {T}")
    rr = np.clip(np.arange(Fo), 0, R.shape[1] - 1)
    starts = np.arange(0, Fo - T + 1)
    acc = np.zeros((Fo, labeling.C))
    cnt = np.zeros(Fo)
    for _ in range(repeats):
        ri = _choose(rng, R.shape[0], sampler.nodes_per_side)
        oi = _choose(rng, O.shape[0], sampler.nodes_per_side)
        structure = sampler.structure(R[ri].mean(axis=1), O[oi].mean(axis=1))
        X = np.stack([sampler.normalise(R[ri][:, rr[s:s + T]], O[oi][:, s:s + T]) for s in starts])
        P = predict_proba(model, X, structure)
        for s, p in zip(starts, P):
            acc[s:s + T] += p
            cnt[s:s + T] += 1
    return acc / cnt[:, None]


def _check_model(model: SyncModel, labeling: OffsetLabeling):
    if model.dims.n_classes != labeling.C:
        raise SyncError(f"model has {model.dims.n_classes} classes but the labeling has {labeling.C}")


def mapping_from_probabilities(probs, labeling: OffsetLabeling, camera_id: int, n_reference: int,
                               method: str) -> FrameMapping:
    est = np.arange(len(probs)) + labeling.offsets[np.argmax(probs, axis=1)]
    return FrameMapping(camera_id, isotonic_projection(est, n_reference), n_reference, method)


def pairwise_sync(ref: DynamicGraph, other: DynamicGraph, model: SyncModel, labeling: OffsetLabeling,
                  sampler: PairSampler | None = None, *, n_reference: int | None = None,
                  repeats: int = 4, seed: int = 0) -> FrameMapping:
    """Map every frame of ``other`` onto the reference timeline with a trained model."""
    _check_model(model, labeling)
    sampler = sampler or PairSampler()
    R = dense_positions(ref, n_reference)
    O = dense_positions(other)
    probs = frame_probabilities(model, R, O, labeling, sampler, np.random.default_rng(seed), repeats)
    return mapping_from_probabilities(probs, labeling, other.camera_id, R.shape[1], "learned")


def baseline_exhaustive(ref: DynamicGraph, other: DynamicGraph, labeling: OffsetLabeling | None = None, *,
                        n_reference: int | None = None, tau: float = 6.0, half_window: int = 2) -> FrameMapping:
    """Per-frame argmin of windowed trimmed symmetric CPGD over the offset bins."""
    labeling = labeling or OffsetLabeling()
    R = dense_positions(ref, n_reference)
    O = dense_positions(other)
    costs = offset_costs(R, O, labeling, tau, half_window)
    est = np.arange(O.shape[1]) + labeling.offsets[np.argmin(costs, axis=1)]
    return FrameMapping(other.camera_id, isotonic_projection(est, R.shape[1]), R.shape[1], "exhaustive")


def merge_graphs(ref: DynamicGraph, other: DynamicGraph, mapping: FrameMapping,
                 n_reference: int | None = None) -> DynamicGraph:
    """Union of reference nodes and the other graph's nodes re-timed onto the reference timeline."""
    R = dense_positions(ref, n_reference)
    O = dense_positions(other, len(mapping))
    n_ref = R.shape[1]
    ref_of = mapping.reference.astype(float)
    # for each reference frame, the source frame mapped there (earliest), else the nearest mapped one
    src = np.abs(ref_of[None, :] - np.arange(n_ref)[:, None]).argmin(axis=1)
    merged = np.concatenate([R, O[:, src]], axis=0)
    n0 = R.shape[0]
    edges = np.concatenate([ref.edges, other.edges + n0]) if len(other.edges) else ref.edges
    return DynamicGraph(merged, tuple(range(n_ref)), edges, ref.camera_id)


@dataclass
class StageResult:
    reference_cameras: tuple
    camera_id: int
    mapping: FrameMapping
    loss_curve: LossCurve | None = None


@dataclass
class HierarchyResult:
    mappings: dict  # camera id -> FrameMapping (reference camera included as identity)
    stages: list
    merged: DynamicGraph
    models: list = field(default_factory=list)


def hierarchical_sync(graphs: dict, pair_sync, n_reference: int | None = None) -> HierarchyResult:
    """Fold cameras in id order: 2 onto 1, 3 onto "12", and so on.

    ``pair_sync(stage, merged_graph, other_graph)`` returns
    ``(FrameMapping, model_or_None, loss_curve_or_None)``; it is called once per stage.
    """
    cams = sorted(graphs)
    if len(cams) < 2:
        raise SyncError("hierarchical synchronisation needs at least two cameras")
    first = graphs[cams[0]]
    n_ref = n_reference or int(max(first.valid_frames)) + 1
    merged = DynamicGraph(dense_positions(first, n_ref), tuple(range(n_ref)), first.edges, first.camera_id)
    mappings = {cams[0]: FrameMapping.identity(cams[0], n_ref, n_ref, "reference")}
    stages, models = [], []
    done = (cams[0],)
    for stage, cam in enumerate(cams[1:]):
        other = graphs[cam]
        try:
            mapping, model, curve = pair_sync(stage, merged, other)
        except Exception as exc:
            raise SyncError(f"synchronising camera {cam} onto {''.join(map(str, done))} failed: {exc}") from exc
        mappings[cam] = mapping
        stages.append(StageResult(done, cam, mapping, curve))
        models.append(model)
        merged = merge_graphs(merged, other, mapping, n_ref)
        done = done + (cam,)
    return HierarchyResult(mappings, stages, merged, models)


@dataclass(frozen=True)
class SyncSettings:
    """How the learned hierarchy is trained and queried."""

    label_source: str = "self"
    retrain_per_stage: bool = True
    finetune_epochs: int = 2
    groups_per_epoch: int = 40
    repeats: int = 8
    tau: float = 6.0
    sampler: PairSampler = PairSampler()

    def __post_init__(self):
        if self.label_source not in ("self", "truth", "pseudo"):
            raise ValueError("label_source must be 'self', 'truth' or 'pseudo'")
        if self.finetune_epochs < 0 or self.groups_per_epoch < 1 or self.repeats < 1:
            raise ValueError("epoch, group and repeat counts must be positive")


def stage_windows(merged: DynamicGraph, other: DynamicGraph, labeling: OffsetLabeling, settings: SyncSettings,
                  batch_size: int, seed: int, truth=None) -> list:
    return make_training_windows(merged, other, labeling, truth, source=settings.label_source,
                                 sampler=settings.sampler, n_groups=settings.groups_per_epoch,
                                 per_group=batch_size, seed=seed, n_reference=merged.n_frames, tau=settings.tau)


def learned_pair_sync(settings: SyncSettings, labeling: OffsetLabeling, train_config: TrainConfig,
                      dims: ModelDims, seed: int, base_model: SyncModel | None = None,
                      truth_offsets: dict | None = None, log_fn=None):
    """Build the ``pair_sync`` callable for :func:`hierarchical_sync`.

    Stage 0 uses ``base_model`` when given, else trains one for
    ``train_config.epochs``.  Later stages either reuse the current model or,
    with ``retrain_per_stage``, continue training it for ``finetune_epochs``
    on windows drawn from their own pair.
    """
    state = {"model": base_model}
    stage_seeds = np.random.SeedSequence(seed).generate_state(64)

    def pair_sync(stage: int, merged: DynamicGraph, other: DynamicGraph):
        stage_seed = int(stage_seeds[stage % len(stage_seeds)])
        model = state["model"]
        curve = None
        epochs = train_config.epochs if model is None else settings.finetune_epochs
        if model is None or (settings.retrain_per_stage and stage > 0 and epochs > 0):
            truth = None if truth_offsets is None else truth_offsets.get(other.camera_id)
            data = stage_windows(merged, other, labeling, settings, train_config.batch_size, stage_seed, truth)
            tc = TrainConfig(**{**asdict(train_config), "epochs": epochs, "seed": stage_seed})
            cb = (lambda e, v: log_fn(stage, e, v)) if log_fn else None
            model, curve = train(data, tc, dims, model=None if model is None else model.copy(), log=cb)
            state["model"] = model
        mapping = pairwise_sync(merged, other, model, labeling, settings.sampler,
                                n_reference=merged.n_frames, repeats=settings.repeats, seed=stage_seed)
        return mapping, model, curve

    return pair_sync


def exhaustive_pair_sync(labeling: OffsetLabeling, tau: float = 6.0):
    def pair_sync(stage: int, merged: DynamicGraph, other: DynamicGraph):
        return baseline_exhaustive(merged, other, labeling, n_reference=merged.n_frames, tau=tau), None, None
    return pair_sync


# -- merging and evaluation ----------------------------------------------------------

def frame_at(frames, mapping: FrameMapping, r: int):
    """The camera's frame assigned to reference frame ``r`` (earliest), or ``None``."""
    src = mapping.sources_at(r)
    return frames[int(src[0])] if len(src) else None


def merge_at_timestamp(frames: dict, mappings: dict, r: int) -> gm.PointCloud:
    """Concatenate every camera's cloud assigned to reference frame ``r``."""
    if not mappings:
        raise SyncError("no mappings")
    n_ref = next(iter(mappings.values())).n_reference
    if not 0 <= r < n_ref:
        raise SyncError(f"reference frame {r} outside the timeline 0..{n_ref - 1}")
    parts = []
    for cam in sorted(mappings):
        f = frame_at(frames[cam], mappings[cam], r)
        if f is not None:
            parts.append(f.cloud.points)
    if not parts:
        raise SyncError(f"no camera covers reference frame {r}")
    return gm.PointCloud(np.concatenate(parts, axis=0))


def exhaustive_cloud_sync(frames: dict, labeling: OffsetLabeling | None = None, n_reference: int | None = None,
                          tau: float = 6.0, half_window: int = 2) -> dict:
    """Hierarchical exhaustive search on the raw clouds.

    Cameras are folded in id order; for each frame of the next camera and each
    candidate offset the cost is the trimmed directional CPGD from its cloud
    to the clouds already merged at that reference frame, averaged over
    ``+-half_window`` frames.  Argmin per frame, then isotonic projection.
    """
    labeling = labeling or OffsetLabeling()
    cams = sorted(frames)
    n_ref = n_reference or len(frames[cams[0]])
    maps = {cams[0]: FrameMapping.identity(cams[0], len(frames[cams[0]]), n_ref, "reference")}
    for cam in cams[1:]:
        trees = []
        for r in range(n_ref):
            try:
                trees.append(cKDTree(merge_at_timestamp(frames, maps, r).points))
            except SyncError:
                trees.append(None)
        seq = frames[cam]
        raw = np.full((len(seq), labeling.C), np.inf)
        for k, f in enumerate(seq):
            pts = f.cloud.points
            for c, d in enumerate(labeling.offsets):
                r = k + d
                if 0 <= r < n_ref and trees[r] is not None and len(pts):
                    dist, _ = trees[r].query(pts)
                    raw[k, c] = np.minimum(dist, tau).mean()
        cost = _window_average(raw, half_window)
        if np.isinf(cost).all(axis=1).any():
            raise SyncError(f"camera {cam} has frames with no candidate offset")
        est = np.arange(len(seq)) + labeling.offsets[np.argmin(cost, axis=1)]
        maps[cam] = FrameMapping(cam, isotonic_projection(est, n_ref), n_ref, "exhaustive")
    return maps


@dataclass
class KFoldReport:
    rmse: float
    per_camera: dict
    n_cells: int
    n_skipped: int


def kfold_cpgd_eval(frames: dict, mappings: dict, min_cameras: int = 3) -> KFoldReport:
    """Leave-one-camera-out CPGD over every reference frame.

    Cell ``(i, j)`` is the directional CPGD from camera ``j``'s cloud at
    reference frame ``i`` to the union of the other cameras' clouds there.
    Frames where fewer than ``min_cameras`` cameras are present are skipped
    (their cells counted in ``n_skipped``).
    """
    cams = sorted(mappings)
    n_ref = mappings[cams[0]].n_reference
    vals = {c: [] for c in cams}
    skipped = 0
    for i in range(n_ref):
        present = {c: frame_at(frames[c], mappings[c], i) for c in cams}
        present = {c: f for c, f in present.items() if f is not None and len(f.cloud)}
        if len(present) < min_cameras:
            skipped += len(cams)
            continue
        skipped += len(cams) - len(present)
        for c, f in present.items():
            others = np.concatenate([g.cloud.points for o, g in present.items() if o != c], axis=0)
            vals[c].append(gm.cpgd(f.cloud.points, others))
    allv = [v for c in cams for v in vals[c]]
    if not allv:
        raise SyncError("no evaluable cells")
    per = {c: gm.rmse(vals[c]) for c in cams if vals[c]}
    return KFoldReport(gm.rmse(allv), per, len(allv), skipped)


def percent_improvement(rmse_raw: float, rmse_method: float) -> float:
    return 100.0 * (rmse_raw - rmse_method) / rmse_raw
