"""A small per-label-frame MLP trained with the SELD losses.

Each label frame sees a stack of feature frames centred on its pooling
window (stride 5), so 250 feature frames give 50 outputs. Hidden layers use
a leaky ReLU, which keeps units alive under the L1 losses; the output head follows the chosen output format (linear 156 for
multi-ACCDDOA, tanh 39 + ReLU 13 for multi-task).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment, codec
from .codec import MtTensor, OUTPUT_SPECS
from .core import ClipSpec, NUM_CLASSES, NUM_TRACKS
from .features import SPECS, FeatureConfig, FeatureTensor, extract
from .losses import LossKind, ShapeMismatch, adpit_loss, mt_loss

CKPT_MAGIC = b"S3DC"
CKPT_VERSION = 1

# Reference backbone; not built here, kept for provenance of the shapes above.
REFERENCE_BACKBONE = {
    "conv_blocks": 3,
    "conv_filters": 128,
    "time_pool_first_block": 5,
    "bigru_layers": 2,
    "mha_layers": 2,
    "mha_heads": 8,
    "branch_fc": 128,
}


class ConfigError(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass
class ModelConfig:
    fmt: str = "foa"
    method: str = "multi-accddoa"
    context: int = 2
    hidden: tuple = (256, 256)
    leak: float = 0.01  # negative slope of the hidden leaky ReLU; 0 gives plain ReLU
    head_scale: float = 1.0  # multiplies the output-layer init bound
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 250
    patience: int = 75
    batch_size: int = 256
    loss: str = "mse"  # multi-ACCDDOA base loss
    dist_loss: str = "mse"  # multi-task distance branch loss
    dist_weight: float = 1.0
    weight_decay: float = 0.0  # decoupled, weights only; 0 gives plain Adam
    augment: bool = False  # random FOA rotation per batch

    def validate(self):
        if self.fmt not in SPECS:
            raise ConfigError(f"unknown format {self.fmt!r}")
        if self.method not in OUTPUT_SPECS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.method == "multi-accddoa" and LossKind(self.loss).relative:
            raise ConfigError("multi-ACCDDOA is trained with MSE or MAE only")
        LossKind(self.dist_loss)
        if self.head_scale <= 0:
            raise ConfigError("head_scale must be positive")
        if not 0 <= self.leak < 1:
            raise ConfigError("leak must be in [0, 1)")
        if self.context < 0 or not self.hidden or any(h <= 0 for h in self.hidden):
            raise ConfigError("bad context or hidden sizes")
        if self.augment and self.fmt != "foa":
            raise ConfigError("rotation augmentation is defined for FOA only")
        if self.max_epochs < 1 or self.patience < 0 or self.batch_size < 1:
            raise ConfigError("bad training schedule")

    @property
    def feature_spec(self):
        return SPECS[self.fmt]

    @property
    def output_spec(self):
        return OUTPUT_SPECS[self.method]

    @property
    def input_dim(self):
        s = self.feature_spec
        return (2 * self.context + 1) * s.CH * s.F

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kw = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        defaults = cls()
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            k, _, v = line.partition("=")
            k, v = k.strip(), v.strip()
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            d = getattr(defaults, k)
            if isinstance(d, tuple):
                kw[k] = tuple(int(x) for x in v.split(",") if x.strip())
            elif isinstance(d, bool):
                kw[k] = v.lower() in ("1", "true", "yes")
            else:
                kw[k] = type(d)(v)
        return cls(**kw)

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


@dataclass
class Model:
    cfg: ModelConfig
    params: dict

    @property
    def n_layers(self):
        return len(self.cfg.hidden)

    def astype(self, dtype):
        return Model(self.cfg, {k: v.astype(dtype) for k, v in self.params.items()})


def _head_names(cfg):
    return ["head"] if cfg.method == "multi-accddoa" else ["head_doa", "head_dist"]


def init_model(cfg: ModelConfig) -> Model:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = {
        "norm_mean": np.zeros(cfg.input_dim, dtype=np.float32),
        "norm_std": np.ones(cfg.input_dim, dtype=np.float32),
    }
    fan_in = cfg.input_dim
    for i, h in enumerate(cfg.hidden):
        bound = np.sqrt(6.0 / fan_in)
        params[f"W{i}"] = rng.uniform(-bound, bound, (fan_in, h)).astype(np.float32)
        params[f"b{i}"] = np.zeros(h, dtype=np.float32)
        fan_in = h
    for name, width in zip(_head_names(cfg), cfg.output_spec.Oq):
        bound = cfg.head_scale * np.sqrt(3.0 / fan_in)
        params[f"{name}_W"] = rng.uniform(-bound, bound, (fan_in, width)).astype(np.float32)
        params[f"{name}_b"] = np.zeros(width, dtype=np.float32)
    return Model(cfg, params)


TRAINABLE_SKIP = ("norm_mean", "norm_std")


def trainable(params):
    return {k: v for k, v in params.items() if k not in TRAINABLE_SKIP}


def context_rows(features, cfg: ModelConfig, clip: ClipSpec = ClipSpec()) -> np.ndarray:
    """Label-frame rows of stacked feature frames: (Tl, input_dim)."""
    data = features.data if isinstance(features, FeatureTensor) else np.asarray(features)
    spec = cfg.feature_spec
    if data.shape != spec.shape:
        raise ShapeMismatch(f"features {data.shape} do not match {spec.shape}")
    pool, k = clip.pool, cfg.context
    T = data.shape[1]
    Tl = T // pool
    padded = np.pad(data, ((0, 0), (k + pool, k + pool), (0, 0)))
    centres = np.arange(Tl) * pool + pool // 2 + k + pool
    idx = centres[:, None] + np.arange(-k, k + 1)[None, :]
    # (CH, Tl, 2k+1, F) -> (Tl, 2k+1, CH, F)
    rows = np.transpose(padded[:, idx, :], (1, 2, 0, 3))
    return np.ascontiguousarray(rows.reshape(Tl, -1), dtype=data.dtype)


def forward_rows(model: Model, X, cache=False):
    """Head outputs for input rows X (B x input_dim); list of arrays, one per head."""
    p, cfg = model.params, model.cfg
    h = (X - p["norm_mean"]) / p["norm_std"]
    acts = [h]
    for i in range(model.n_layers):
        z = h @ p[f"W{i}"] + p[f"b{i}"]
        h = np.where(z > 0, z, cfg.leak * z).astype(z.dtype, copy=False)
        acts.append(h)
    outs = []
    for name, act in zip(_head_names(cfg), cfg.output_spec.activations):
        z = h @ p[f"{name}_W"] + p[f"{name}_b"]
        if act == "tanh":
            z = np.tanh(z)
        elif act == "relu":
            z = np.maximum(z, 0)
        outs.append(z)
    return (outs, acts) if cache else outs


def forward(model: Model, features, clip: ClipSpec = ClipSpec()):
    """Per-label-frame outputs for one clip.

    multi-ACCDDOA: array (Tl, 156); multi-task: tuple ((Tl, 39), (Tl, 13)).
    """
    outs = forward_rows(model, context_rows(features, model.cfg, clip))
    return outs[0] if len(outs) == 1 else tuple(outs)


@dataclass
class FrameData:
    """Training rows and targets for a set of clips.

    ``targets`` is ``(B, N, C, 4)`` padded ADPIT slots for multi-ACCDDOA, or
    ``((B, 3, C), (B, C))`` for multi-task.
    """
    X: np.ndarray
    targets: object

    def __len__(self):
        return len(self.X)

    def subset(self, idx):
        if isinstance(self.targets, tuple):
            t = tuple(a[idx] for a in self.targets)
        else:
            t = self.targets[idx]
        return FrameData(self.X[idx], t)


def clip_targets(events, cfg: ModelConfig, n_frames: int):
    if cfg.method == "multi-accddoa":
        arr = codec.adpit_target_array(events, n_frames)
        return np.transpose(arr, (2, 0, 1, 3))
    mt = codec.encode_mt(events, n_frames)
    return np.transpose(mt.accdoa, (2, 0, 1)), mt.dist.T.copy()


def build_frame_data(clips, cfg: ModelConfig, clip: ClipSpec = ClipSpec()) -> FrameData:
    """``clips`` is an iterable of ``(FeatureTensor, events)``."""
    xs, ts = [], []
    for feats, events in clips:
        x = context_rows(feats, cfg, clip)
        xs.append(x)
        ts.append(clip_targets(events, cfg, len(x)))
    if not xs:
        raise EmptyDataset("no clips")
    X = np.concatenate(xs).astype(np.float32)
    if cfg.method == "multi-accddoa":
        return FrameData(X, np.concatenate(ts).astype(np.float32))
    return FrameData(X, (np.concatenate([t[0] for t in ts]).astype(np.float32),
                         np.concatenate([t[1] for t in ts]).astype(np.float32)))


def _loss_on_outputs(cfg: ModelConfig, outs, targets):
    """Loss value and gradients w.r.t. each head output."""
    if cfg.method == "multi-accddoa":
        B = outs[0].shape[0]
        pred = codec.frames_to_raw(outs[0])
        tgt = np.transpose(targets, (1, 2, 0, 3))
        res = adpit_loss(pred, tgt, cfg.loss, cfg.dist_weight)
        return res.value, [codec.raw_to_frames(res.grad).reshape(B, -1)]
    a_out, d_out = outs
    B = a_out.shape[0]
    pred = MtTensor(np.transpose(a_out.reshape(B, 3, NUM_CLASSES), (1, 2, 0)), d_out.T)
    tgt = MtTensor(np.transpose(targets[0], (1, 2, 0)), targets[1].T)
    res = mt_loss(pred, tgt, cfg.dist_loss)
    g_a = np.transpose(res.grad.accdoa, (2, 0, 1)).reshape(B, -1)
    return res.value, [g_a, res.grad.dist.T]


def loss_and_grads(model: Model, batch: FrameData):
    """Loss on ``batch`` and exact gradients for every trainable parameter."""
    if len(batch) == 0:
        raise EmptyDataset("empty batch")
    cfg, p = model.cfg, model.params
    outs, acts = forward_rows(model, batch.X, cache=True)
    value, gouts = _loss_on_outputs(cfg, outs, batch.targets)
    grads = {}
    h = acts[-1]
    gh = np.zeros_like(h)
    for name, act, out, g in zip(_head_names(cfg), cfg.output_spec.activations, outs, gouts):
        if act == "tanh":
            g = g * (1.0 - out * out)
        elif act == "relu":
            g = g * (out > 0)
        g = g.astype(h.dtype, copy=False)
        grads[f"{name}_W"] = h.T @ g
        grads[f"{name}_b"] = g.sum(axis=0)
        gh += g @ p[f"{name}_W"].T
    for i in reversed(range(model.n_layers)):
        gz = gh * np.where(acts[i + 1] > 0, 1.0, cfg.leak).astype(gh.dtype, copy=False)
        grads[f"W{i}"] = acts[i].T @ gz
        grads[f"b{i}"] = gz.sum(axis=0)
        if i:
            gh = gz @ p[f"W{i}"].T
    return value, grads


def batch_loss(model: Model, data: FrameData, batch_size=4096) -> float:
    """Frame-weighted mean loss over ``data`` evaluated in chunks."""
    total, n = 0.0, len(data)
    for s in range(0, n, batch_size):
        part = data.subset(slice(s, s + batch_size))
        outs = forward_rows(model, part.X)
        v, _ = _loss_on_outputs(model.cfg, outs, part.targets)
        total += v * len(part)
    return total / n


def adam_init(params):
    return {"t": 0, "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adam_step(params, grads, state, cfg: ModelConfig):
    """Bias-corrected Adam update, in place. Returns ``(params, state)``."""
    state["t"] += 1
    t = state["t"]
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ShapeMismatch(f"{k}: param {params[k].shape} vs grad {g.shape}")
        m, v = state["m"][k], state["v"][k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and params[k].ndim > 1:
            step = step + cfg.lr * cfg.weight_decay * params[k]
        params[k] -= step.astype(params[k].dtype)
    return params, state


def fit_normalization(model: Model, X):
    if model.cfg.augment:
        mean, std = augment.rotation_moments(X, model.cfg.feature_spec.F)
    else:
        mean, std = X.mean(axis=0), X.std(axis=0)
    model.params["norm_mean"] = mean.astype(np.float32)
    model.params["norm_std"] = np.where(std > 1e-6, std, 1.0).astype(np.float32)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    epoch: int
    best_val_loss: float
    rng_state: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def config_hash(self):
        return self.config.hash()

    def model(self) -> Model:
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})


def train(model: Model, train_set: FrameData, val_set: FrameData, log_path=None,
          normalize=True, verbose=False) -> Checkpoint:
    """Adam with early stopping on validation loss; returns the best checkpoint.

    Training stops once the validation loss has failed to improve for more
    than ``patience`` consecutive epochs, or at ``max_epochs``.
    """
    cfg = model.cfg
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyDataset("train and validation sets must be non-empty")
    if normalize:
        fit_normalization(model, train_set.X)
    rng = np.random.default_rng([cfg.seed, 7])
    rotations = augment.foa_rotations()
    params = model.params
    state = adam_init(trainable(params))
    best = Checkpoint(cfg, {k: v.copy() for k, v in params.items()}, 0, float("inf"))
    history = []
    stale = 0
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        if log:
            log.write("epoch,train_loss,val_loss\n")
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(train_set))
            tl = 0.0
            for s in range(0, len(order), cfg.batch_size):
                batch = train_set.subset(order[s:s + cfg.batch_size])
                if cfg.augment:
                    m = rotations[rng.integers(len(rotations))]
                    batch = FrameData(augment.rotate_rows(batch.X, m, cfg.feature_spec.F),
                                      augment.rotate_targets(batch.targets, m))
                v, g = loss_and_grads(model, batch)
                adam_step(params, g, state, cfg)
                tl += v * len(batch)
            tl /= len(train_set)
            vl = batch_loss(model, val_set)
            history.append((epoch, tl, vl))
            if log:
                log.write(f"{epoch},{tl:.8g},{vl:.8g}\n")
                log.flush()
            if verbose:
                print(f"epoch {epoch} train {tl:.5f} val {vl:.5f}")
            if vl < best.best_val_loss:
                best = Checkpoint(cfg, {k: v.copy() for k, v in params.items()}, epoch, vl)
                stale = 0
            else:
                stale += 1
                if stale > cfg.patience:
                    break
    finally:
        if log:
            log.close()
    best.rng_state = rng.bit_generator.state
    best.history = history
    return best


def save_checkpoint(ckpt: Checkpoint, path):
    header = {
        "config": ckpt.config.to_text(),
        "config_hash": ckpt.config_hash,
        "epoch": ckpt.epoch,
        "best_val_loss": ckpt.best_val_loss,
        "rng_state": ckpt.rng_state,
    }
    hb = json.dumps(header, sort_keys=True, default=int).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), ckpt.config_hash.encode("ascii"),
             struct.pack("<I", len(hb)), hb, struct.pack("<I", len(ckpt.params))]
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError("not an S3DC checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    chash = buf[8:72].decode("ascii")
    off = 72
    (hl,) = struct.unpack_from("<I", buf, off)
    header = json.loads(buf[off + 4:off + 4 + hl])
    off += 4 + hl
    cfg = ModelConfig.from_text(header["config"])
    if cfg.hash() != chash:
        raise ValueError("config hash mismatch")
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<I", buf, off)
        name = buf[off + 4:off + 4 + nl].decode("utf-8")
        off += 4 + nl
        (nd,) = struct.unpack_from("<I", buf, off)
        shape = struct.unpack_from(f"<{nd}I", buf, off + 4)
        off += 4 + 4 * nd
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(buf, "<f4", size, off).reshape(shape).astype(np.float32)
        off += 4 * size
    return Checkpoint(cfg, params, header["epoch"], header["best_val_loss"], header["rng_state"])


def predict_to_events(model: Model, audio, fmt=None, threshold=codec.ACTIVITY_THRESHOLD,
                      merge_angle=codec.MERGE_ANGLE, feature_cfg: FeatureConfig = FeatureConfig()):
    fmt = fmt or model.cfg.fmt
    if fmt != model.cfg.fmt:
        raise ConfigError(f"model expects {model.cfg.fmt} audio, got {fmt}")
    feats = audio if isinstance(audio, FeatureTensor) else extract(audio, fmt, feature_cfg)
    out = forward(model, feats, feature_cfg.clip)
    if model.cfg.method == "multi-accddoa":
        raw = codec.frames_to_raw(np.asarray(out, dtype=np.float64), NUM_TRACKS)
        return codec.decode_multi_accddoa(raw, threshold, merge_angle)
    mt = MtTensor.from_frames(np.asarray(out[0], np.float64), np.asarray(out[1], np.float64))
    return codec.decode_mt(mt.accdoa, mt.dist, threshold)
