"""Adam training loop, loss curves and the binary model checkpoint."""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .adgc import GraphStructure, ModelDims, SyncModel, composite_loss, forward

CHECKPOINT_MAGIC = b"GSYNCMDL"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    T: int = 40
    lambda_bar: float = 0.01
    beta_bar: float = 0.001
    lr: float = 0.0005
    lr_decay: float = 0.1
    lr_decay_every: int = 15
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    C: int = 7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("T", "epochs", "batch_size", "C", "lr_decay_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lambda_bar", "beta_bar", "lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def lr_at(self, epoch: int) -> float:
        """Step schedule: ``lr * lr_decay ** (epoch // lr_decay_every)`` (epochs count from 0)."""
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass
class WindowGroup:
    """Windows that share one graph structure.

    ``coords`` is ``(S, T, N, 3)`` and ``labels`` holds per-step class indices ``(S, T)``.
    """

    structure: GraphStructure
    coords: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.coords.ndim != 4 or self.coords.shape[-1] != 3:
            raise ValueError("coords must be (S, T, N, 3)")
        if self.labels.shape != self.coords.shape[:2]:
            raise ValueError("labels must be (S, T)")
        if self.coords.shape[2] != self.structure.node_count:
            raise ValueError("node count does not match structure")


@dataclass
class LossCurve:
    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "total", "ce_g", "ce_l", "reg1", "reg2")

    def append(self, epoch: int, terms: dict):
        self.rows.append((epoch, terms["total"], terms["ce_g"], terms["ce_l"],
                          terms["reg_attention"], terms["reg_sparsity"]))

    @property
    def total(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.COLUMNS) + "\n")
        for r in self.rows:
            buf.write(f"{r[0]}," + ",".join(repr(float(v)) for v in r[1:]) + "\n")
        return buf.getvalue()


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v.value) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.value) for k, v in params.items()}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if lr:
                p.value = p.value - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def one_hot(labels, C: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label outside 0..{C - 1}")
    return np.eye(C)[labels]


def loss_and_grad(model: SyncModel, group: WindowGroup, idx, config: TrainConfig):
    """Forward + backward on ``group`` samples ``idx``; returns the loss terms."""
    model.zero_grad()
    with ag.Tape() as tape:
        res = forward(model, group.coords[idx], group.structure)
        terms = composite_loss(res.logits_g, res.logits_l, one_hot(group.labels[idx], config.C),
                               res.alphas, config.lambda_bar, config.beta_bar)
    vals = terms.values()
    bad = [k for k, v in vals.items() if not np.isfinite(v)]
    if bad:
        raise TrainingError(f"non-finite loss term(s): {', '.join(bad)}")
    tape.backward(terms.total)
    return vals


def train(dataset, config: TrainConfig, dims: ModelDims | None = None, model: SyncModel | None = None,
          log=None):
    """Train on a list of :class:`WindowGroup`; returns ``(model, LossCurve)``.

    Each epoch visits every window once, in minibatches drawn within a group.
    The per-epoch curve row is the sample-weighted mean of the batch losses.
    """
    groups = list(dataset)
    if not groups or all(len(g.coords) == 0 for g in groups):
        raise ValueError("empty dataset")
    for g in groups:
        if g.coords.shape[1] != config.T:
            raise ValueError(f"window length {g.coords.shape[1]} != T={config.T}")
    dims = dims or ModelDims(n_classes=config.C)
    if dims.n_classes != config.C:
        raise ValueError("model class count does not match config.C")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = SyncModel(dims, seed=int(rng.integers(2**31)))
    opt = Adam(model.params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    curve = LossCurve()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        batches = []
        for gi, g in enumerate(groups):
            perm = rng.permutation(len(g.coords))
            batches += [(gi, perm[i:i + config.batch_size]) for i in range(0, len(perm), config.batch_size)]
        order = rng.permutation(len(batches))
        acc = {}
        n = 0
        for bi in order:
            gi, idx = batches[bi]
            vals = loss_and_grad(model, groups[gi], idx, config)
            opt.step(lr)
            for k, v in vals.items():
                acc[k] = acc.get(k, 0.0) + v * len(idx)
            n += len(idx)
        terms = {k: v / n for k, v in acc.items()}
        curve.append(epoch, terms)
        if log is not None:
            log(epoch, terms)
    return model, curve


# -- checkpoint ------------------------------------------------------------------

def save_checkpoint(path, model: SyncModel, extra: dict | None = None) -> None:
    """Layout: magic, u32 version, u32 header length, JSON header (dims + shape
    table), little-endian float32 payload in shape-table order, u32 CRC32 of
    everything before it."""
    names = list(model.params)
    header = {"dims": asdict(model.dims),
              "shapes": [[k, list(model.params[k].shape)] for k in names],
              "extra": extra or {}}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    body = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hb)) + hb
    body += b"".join(np.asarray(model.params[k].value, dtype="<f4").tobytes() for k in names)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path):
    """Return ``(model, extra)``; raises :class:`CheckpointError` on any corruption."""
    data = open(path, "rb").read()
    if len(data) < len(CHECKPOINT_MAGIC) + 12 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a model checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", body, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off += 8
    header = json.loads(body[off:off + hlen].decode("utf-8"))
    off += hlen
    params = {}
    for name, shape in header["shapes"]:
        count = int(np.prod(shape))
        if off + 4 * count > len(body):
            raise CheckpointError("truncated payload")
        params[name] = np.frombuffer(body, "<f4", count, off).astype(float).reshape(shape)
        off += 4 * count
    if off != len(body):
        raise CheckpointError("trailing bytes after payload")
    return SyncModel(ModelDims(**header["dims"]), params=params), header.get("extra", {})
