"""Optimization driver: alternating-phase pretraining, finetuning,
checkpointing, and determinism controls.

Epochs alternate between updating the encoder+heads (prototype dictionary
frozen) and updating the prototype dictionary (everything else frozen).
All randomness flows from a single seed through named SeedSequence streams,
so identical (seed, config, corpus) reruns are bit-identical.
"""

from __future__ import annotations

import copy
import logging
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AutodiffError, Tensor
from .data import TimeSeriesRecord, sample_view_pair, zscore_normalize
from .losses import LossWeights, finetune_loss, pretrain_loss, recon_loss
from .model import CapeModel, ModelConfig

log = logging.getLogger(__name__)

PHASE_ENCODER = "encoder"
PHASE_PROTOTYPES = "prototypes"

# stream tags for SeedSequence derivation
_S_BATCH, _S_MASK, _S_VIEW, _S_VALMASK = 1, 2, 3, 4


class CheckpointError(IOError):
    pass


class AdamW:
    """Adaptive moments with decoupled weight decay; per-parameter step
    counts so bias correction survives the alternation."""

    def __init__(self, lr: float = 1e-5, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray],
             active: list[str], clip_norm: float | None = 1.0) -> None:
        if clip_norm is not None:
            sq = sum(float(np.sum(grads[n] ** 2)) for n in active)
            norm = np.sqrt(sq)
            scale = clip_norm / norm if norm > clip_norm else 1.0
        else:
            scale = 1.0
        for name in active:
            g = grads[name] * scale
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            m_hat = self.m[name] / (1 - self.b1 ** t)
            v_hat = self.v[name] / (1 - self.b2 ** t)
            p = params[name]
            new = p.data - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                      + self.weight_decay * p.data)
            params[name] = Tensor(new, requires_grad=True)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-5
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    stride: int = 2
    mask_ratio: float = 0.3
    splits: tuple[float, float, float] = (0.6, 0.1, 0.3)
    finetune_epochs: int = 5
    finetune_lr: float = 1e-3
    lambda_finetune: float = 1e-3


@dataclass
class TrainState:
    model: CapeModel
    weights: LossWeights
    optimizer: AdamW
    train_config: TrainConfig
    seed: int
    epoch: int = 0
    step: int = 0
    phase: str = PHASE_ENCODER
    history: dict[str, list[float]] = field(default_factory=dict)
    norm_registry: dict[str, tuple[float, float]] = field(default_factory=dict)
    best_val: float = float("inf")
    best_params: dict[str, np.ndarray] | None = None
    ngm_skips: int = 0

    def snapshot_params(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.model.params.items()}

    def restore_params(self, snap: dict[str, np.ndarray]) -> None:
        for n, values in snap.items():
            self.model.params[n] = Tensor(values.copy(), requires_grad=True)

    def use_best(self) -> None:
        if self.best_params is not None:
            self.restore_params(self.best_params)


def phase_for_epoch(epoch: int) -> str:
    return PHASE_ENCODER if epoch % 2 == 0 else PHASE_PROTOTYPES


def active_params(model: CapeModel, phase: str) -> list[str]:
    if phase == PHASE_PROTOTYPES:
        return model.prototype_param_names()
    return model.encoder_param_names()


# ---------------------------------------------------------------------------
# data preparation shared by both phases

@dataclass
class PreparedCorpus:
    records: list[TimeSeriesRecord]           # normalized
    train_windows: list[np.ndarray]           # length-T arrays (pretrain)
    val_windows: list[np.ndarray]
    view_series: list[np.ndarray]             # train-region series for crops
    norm_registry: dict[str, tuple[float, float]]


def _registry_key(rec: TimeSeriesRecord) -> str:
    return f"{rec.disease_id}/{rec.region_id}"


def prepare_corpus(records: list[TimeSeriesRecord], model_cfg: ModelConfig,
                   train_cfg: TrainConfig) -> PreparedCorpus:
    """Normalize on train-split stats and slice pretraining windows."""
    T = model_cfg.T
    stride = train_cfg.stride
    f_train, f_val, _ = train_cfg.splits
    normed, train_w, val_w, views, registry = [], [], [], [], {}
    for rec in records:
        n = len(rec)
        n_train = int(round(f_train * n))
        n_val = int(round(f_val * n))
        rec_n = zscore_normalize(rec, train_frac=f_train)
        normed.append(rec_n)
        registry[_registry_key(rec_n)] = rec_n.norm_state
        train_vals = rec_n.values[:n_train]
        val_vals = rec_n.values[n_train:n_train + n_val]
        for off in range(0, len(train_vals) - T + 1, stride):
            train_w.append(train_vals[off:off + T])
        # validation windows may reach back into the train region so short
        # val splits still yield full-length inputs
        val_region = rec_n.values[max(0, n_train - T + 1):n_train + n_val]
        for off in range(0, len(val_region) - T + 1, stride):
            val_w.append(val_region[off:off + T])
        if len(train_vals) >= int(1.5 * T):
            views.append(train_vals)
    if not train_w:
        raise ValueError("corpus yields no training windows; series too short")
    return PreparedCorpus(records=normed, train_windows=train_w,
                          val_windows=val_w, view_series=views,
                          norm_registry=registry)


def _view_batch(prepared: PreparedCorpus, model_cfg: ModelConfig,
                batch_size: int, rng: np.random.Generator):
    """One contrastive batch: crops from `batch_size` series sharing a common
    overlap width, so patch indices align across the batch."""
    T, p, C = model_cfg.T, model_cfg.patch_len, model_cfg.C
    pool = prepared.view_series
    idx = rng.integers(0, len(pool), size=batch_size)
    min_overlap = 1
    for i in idx:
        max_start_p = (len(pool[i]) - T) // p
        min_overlap = max(min_overlap, int(np.ceil(0.25 * C)), C - max_start_p)
    n_overlap = int(rng.integers(min_overlap, C + 1))
    va = np.empty((batch_size, T))
    vb = np.empty((batch_size, T))
    oa = np.empty((batch_size, n_overlap), dtype=int)
    ob = np.empty((batch_size, n_overlap), dtype=int)
    for row, i in enumerate(idx):
        vp = sample_view_pair(pool[i], T, p, rng, overlap_patches=n_overlap)
        va[row], vb[row] = vp.view_a, vp.view_b
        oa[row], ob[row] = vp.omega_a, vp.omega_b
    return va, vb, oa, ob


def _mask_batch(B: int, C: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    n_mask = max(1, int(np.floor(ratio * C + 0.5)))
    mask = np.zeros((B, C), dtype=bool)
    for b in range(B):
        mask[b, rng.choice(C, size=n_mask, replace=False)] = True
    return mask


def masked_recon_mse(model: CapeModel, windows: list[np.ndarray],
                     mask_ratio: float, seed: int,
                     batch_size: int = 64) -> float:
    """Deterministic validation metric: fixed per-window masks regardless of
    epoch, so values are comparable across training."""
    if not windows:
        return float("nan")
    C = model.config.C
    total, count = 0.0, 0
    for lo in range(0, len(windows), batch_size):
        chunk = windows[lo:lo + batch_size]
        x = np.stack(chunk)
        mask = np.zeros((len(chunk), C), dtype=bool)
        for row in range(len(chunk)):
            rng = np.random.default_rng(np.random.SeedSequence(
                (seed, _S_VALMASK, lo + row)))
            n_mask = max(1, int(np.floor(mask_ratio * C + 0.5)))
            mask[row, rng.choice(C, size=n_mask, replace=False)] = True
        out = model.forward(x, mode="pretrain", mask=mask)
        total += float(recon_loss(out.reconstruction, x).data) * len(chunk)
        count += len(chunk)
    return total / count


# ---------------------------------------------------------------------------
# pretraining

def pretrain(records: list[TimeSeriesRecord], model_cfg: ModelConfig,
             train_cfg: TrainConfig, weights: LossWeights,
             seed: int = 0) -> TrainState:
    """Alternating-phase self-supervised pretraining over a corpus.

    Even epochs update encoder+heads with the prototype dictionary frozen;
    odd epochs update only the dictionary. The best-validation parameter set
    is retained; a non-finite loss aborts back to it.
    """
    prepared = prepare_corpus(records, model_cfg, train_cfg)
    model = CapeModel(model_cfg, seed=seed)
    optimizer = AdamW(lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    state = TrainState(model=model, weights=weights, optimizer=optimizer,
                       train_config=train_cfg, seed=seed,
                       norm_registry=prepared.norm_registry)
    state.history = {"train_loss": [], "val_loss": [], "recon": [],
                     "contrastive": [], "align": []}

    windows = prepared.train_windows
    B = min(train_cfg.batch_size, len(windows))
    batch_rng = np.random.default_rng(np.random.SeedSequence((seed, _S_BATCH)))
    mask_rng = np.random.default_rng(np.random.SeedSequence((seed, _S_MASK)))
    view_rng = np.random.default_rng(np.random.SeedSequence((seed, _S_VIEW)))

    val0 = masked_recon_mse(model, prepared.val_windows,
                            train_cfg.mask_ratio, seed)
    state.best_val = val0
    state.best_params = state.snapshot_params()
    state.history["val_init"] = [val0]
    log.info("pretrain: %d train windows, %d val windows, initial val MSE %.4f",
             len(windows), len(prepared.val_windows), val0)

    for epoch in range(train_cfg.epochs):
        state.epoch = epoch
        state.phase = phase_for_epoch(epoch)
        active = active_params(model, state.phase)
        order = batch_rng.permutation(len(windows))
        epoch_stats: dict[str, float] = {}
        n_batches = 0
        try:
            for lo in range(0, len(order) - B + 1, B):
                x = np.stack([windows[i] for i in order[lo:lo + B]])
                mask = _mask_batch(B, model_cfg.C, train_cfg.mask_ratio, mask_rng)
                va, vb, oa, ob = _view_batch(prepared, model_cfg, B, view_rng)
                parts = pretrain_loss(model, x, mask, va, vb, oa, ob, weights)
                grads = ad.backward(parts.total,
                                    list(model.params.values()))
                named = {n: grads[t] for n, t in model.params.items()}
                optimizer.step(model.params, named, active, train_cfg.clip_norm)
                state.step += 1
                if parts.ngm_skipped:
                    state.ngm_skips += 1
                n_batches += 1
                for key in ("recon", "contrastive", "align"):
                    epoch_stats[key] = epoch_stats.get(key, 0.0) + parts.value(key)
                epoch_stats["total"] = epoch_stats.get("total", 0.0) + \
                    float(parts.total.data)
        except (AutodiffError, ArithmeticError) as exc:
            log.error("training diverged at epoch %d (%s); restoring best "
                      "checkpoint", epoch, exc)
            state.use_best()
            return state

        val = masked_recon_mse(model, prepared.val_windows,
                               train_cfg.mask_ratio, seed)
        denom = max(n_batches, 1)
        state.history["train_loss"].append(epoch_stats.get("total", 0.0) / denom)
        state.history["val_loss"].append(val)
        for key in ("recon", "contrastive", "align"):
            state.history[key].append(epoch_stats.get(key, 0.0) / denom)
        if val < state.best_val:
            state.best_val = val
            state.best_params = state.snapshot_params()
        log.info("epoch %3d [%s] train %.4f val %.4f", epoch, state.phase,
                 state.history["train_loss"][-1], val)
    state.epoch = train_cfg.epochs
    return state


# ---------------------------------------------------------------------------
# finetuning

def finetune(state: TrainState, records: list[TimeSeriesRecord], horizon: int,
             lam: float | None = None, seed: int = 0,
             epochs: int | None = None) -> TrainState:
    """Few-epoch supervised finetune with the disease's own plausible
    reproduction-number range, keeping the alternating phases. The input
    state's model is left untouched (a clone is trained)."""
    model = state.model.clone()
    cfg = model.config
    train_cfg = state.train_config
    epochs = train_cfg.finetune_epochs if epochs is None else epochs
    lam = train_cfg.lambda_finetune if lam is None else lam

    r0_lo = min(rec.r0_range[0] for rec in records)
    r0_hi = max(rec.r0_range[1] for rec in records)
    weights = replace(state.weights, lambda_align=lam, r0_range=(r0_lo, r0_hi))

    if f"forecast{horizon}.W" not in model.params:
        log.warning("no head for horizon %d; initializing from the "
                    "reconstruction head", horizon)
    model.init_forecast_head_from_recon(horizon)

    f_train, f_val, _ = train_cfg.splits
    xs_train, ys_train, xs_val, ys_val = [], [], [], []
    registry = {}
    for rec in records:
        n = len(rec)
        n_train = int(round(f_train * n))
        n_val = int(round(f_val * n))
        rec_n = zscore_normalize(rec, train_frac=f_train)
        registry[_registry_key(rec_n)] = rec_n.norm_state
        vals = rec_n.values
        for off in range(0, n_train - cfg.T - horizon + 1, train_cfg.stride):
            xs_train.append(vals[off:off + cfg.T])
            ys_train.append(vals[off + cfg.T:off + cfg.T + horizon])
        lo = max(0, n_train - cfg.T - horizon + 1)
        for off in range(lo, n_train + n_val - cfg.T - horizon + 1,
                         train_cfg.stride):
            xs_val.append(vals[off:off + cfg.T])
            ys_val.append(vals[off + cfg.T:off + cfg.T + horizon])
    if not xs_train:
        raise ValueError("no finetune windows; series too short for T+h")

    new_state = TrainState(model=model, weights=weights,
                           optimizer=AdamW(lr=train_cfg.finetune_lr,
                                           weight_decay=train_cfg.weight_decay),
                           train_config=train_cfg, seed=seed,
                           norm_registry={**state.norm_registry, **registry},
                           history={"train_loss": [], "val_loss": []})
    B = min(train_cfg.batch_size, len(xs_train))
    batch_rng = np.random.default_rng(np.random.SeedSequence((seed, _S_BATCH, 7)))

    def val_mse() -> float:
        if not xs_val:
            return float("nan")
        out = model.forward(np.stack(xs_val), mode="forecast", horizon=horizon)
        return float(np.mean((out.forecast.data - np.stack(ys_val)) ** 2))

    new_state.best_val = val_mse()
    new_state.best_params = new_state.snapshot_params()
    for epoch in range(epochs):
        new_state.epoch = epoch
        new_state.phase = phase_for_epoch(epoch)
        active = active_params(model, new_state.phase)
        order = batch_rng.permutation(len(xs_train))
        total, n_batches = 0.0, 0
        try:
            for lo in range(0, len(order) - B + 1, B):
                x = np.stack([xs_train[i] for i in order[lo:lo + B]])
                y = np.stack([ys_train[i] for i in order[lo:lo + B]])
                parts = finetune_loss(model, x, y, weights, horizon)
                grads = ad.backward(parts.total, list(model.params.values()))
                named = {n: grads[t] for n, t in model.params.items()}
                new_state.optimizer.step(model.params, named, active,
                                         train_cfg.clip_norm)
                new_state.step += 1
                if parts.ngm_skipped:
                    new_state.ngm_skips += 1
                total += float(parts.total.data)
                n_batches += 1
        except (AutodiffError, ArithmeticError) as exc:
            log.error("finetune diverged at epoch %d (%s); restoring best",
                      epoch, exc)
            new_state.use_best()
            return new_state
        val = val_mse()
        new_state.history["train_loss"].append(total / max(n_batches, 1))
        new_state.history["val_loss"].append(val)
        if val < new_state.best_val:
            new_state.best_val = val
            new_state.best_params = new_state.snapshot_params()
        log.info("finetune epoch %d [%s] train %.4f val %.4f", epoch,
                 new_state.phase, total / max(n_batches, 1), val)
    new_state.use_best()
    return new_state


# ---------------------------------------------------------------------------
# checkpoint format: little-endian binary with magic, version, config block,
# named parameter records, trailing CRC32

MAGIC = b"CAPE"
VERSION = 1
_DTYPE_TAGS = {"<f8": b"f8", "<i8": b"i8"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _config_block(state: TrainState) -> bytes:
    lines = [f"{k}={v}" for k, v in sorted(state.model.config.to_dict().items())]
    lines.append(f"meta.epoch={state.epoch}")
    lines.append(f"meta.step={state.step}")
    lines.append(f"meta.seed={state.seed}")
    lines.append(f"meta.best_val={state.best_val!r}")
    lines.append(f"meta.ngm_skips={state.ngm_skips}")
    return "\n".join(lines).encode("utf-8")


def _record_bytes(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<")
    arr = arr.astype(dt, copy=False)
    tag = _DTYPE_TAGS[dt.str]
    name_b = name.encode("utf-8")
    out = struct.pack("<H", len(name_b)) + name_b + tag
    out += struct.pack("<B", arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    out += arr.tobytes()
    return out


def save_checkpoint(state: TrainState, path) -> None:
    """Serialize config, parameters, normalization registry, and loss
    history; the whole payload is covered by a trailing CRC32."""
    records: list[tuple[str, np.ndarray]] = []
    for name, tensor in state.model.params.items():
        records.append((f"param/{name}", tensor.data))
    for key, (mean, std) in sorted(state.norm_registry.items()):
        records.append((f"norm/{key}", np.array([mean, std])))
    for key, series in sorted(state.history.items()):
        records.append((f"history/{key}", np.array(series, dtype=float)))

    payload = MAGIC + struct.pack("<I", VERSION)
    cfg = _config_block(state)
    payload += struct.pack("<I", len(cfg)) + cfg
    payload += struct.pack("<I", len(records))
    for name, arr in records:
        payload += _record_bytes(name, arr)
    payload += struct.pack("<I", zlib.crc32(payload))
    with open(path, "wb") as fh:
        fh.write(payload)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> TrainState:
    """Rebuild a TrainState from disk; rejects bad magic, version skew,
    truncation, CRC mismatch, and configs that disagree with expect_config."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise CheckpointError("checkpoint truncated")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) != crc_stored:
        raise CheckpointError("checkpoint CRC mismatch (corrupt or truncated)")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {VERSION}")
    cfg_bytes = r.take(r.u32()).decode("utf-8")
    kv = dict(line.split("=", 1) for line in cfg_bytes.splitlines() if line)
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    model_cfg = ModelConfig.from_dict({k: v for k, v in kv.items()
                                       if not k.startswith("meta.")})
    if expect_config is not None and model_cfg != expect_config:
        raise CheckpointError(
            f"checkpoint config {model_cfg.to_dict()} does not match the "
            f"expected {expect_config.to_dict()}")

    n_records = r.u32()
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        name_len = struct.unpack("<H", r.take(2))[0]
        name = r.take(name_len).decode("utf-8")
        tag = r.take(2)
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag!r}")
        ndim = struct.unpack("<B", r.take(1))[0]
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        dt = np.dtype(_TAG_DTYPES[tag])
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)
        arrays[name] = arr.astype(float)

    seed = int(meta.get("seed", 0))
    model = CapeModel(model_cfg, seed=seed)
    for name in list(model.params):
        key = f"param/{name}"
        if key in arrays:
            model.params[name] = Tensor(arrays.pop(key), requires_grad=True)
    # heads created after pretraining (extra horizons) are restored too
    for key in sorted(k for k in arrays if k.startswith("param/")):
        name = key[len("param/"):]
        model.params[name] = Tensor(arrays.pop(key), requires_grad=True)

    state = TrainState(model=model, weights=LossWeights(),
                       optimizer=AdamW(), train_config=TrainConfig(),
                       seed=seed,
                       epoch=int(meta.get("epoch", 0)),
                       step=int(meta.get("step", 0)),
                       best_val=float(meta.get("best_val", "inf")),
                       ngm_skips=int(meta.get("ngm_skips", 0)))
    state.norm_registry = {k[len("norm/"):]: (float(v[0]), float(v[1]))
                           for k, v in arrays.items() if k.startswith("norm/")}
    state.history = {k[len("history/"):]: list(v)
                     for k, v in arrays.items() if k.startswith("history/")}
    return state
