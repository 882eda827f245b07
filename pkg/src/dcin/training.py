"""Training loop, ranking metrics, checkpoints, and the comparison suite."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import core as F
from .baselines import MODEL_KINDS, build_model
from .core import GradTape
from .data import SessionStore
from .model import DCIN, AblationFlags, CtrModel, ModelDims, nll_loss
from .optim import Adam
from .schema import FeatureSchema, SessionBatch

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "dcin-ckpt/v1"
PAPER_LR = 1e-4
PAPER_BATCH_SIZE = 3000
# Desk-scale defaults for the synthetic suite. The published rate is tuned for
# a billion samples; at ~10^5 samples it leaves every model underfit.
DESK_LR = 1e-3
DESK_EPOCHS = 1


class TrainingAborted(RuntimeError):
    pass


class UndefinedMetricError(ValueError):
    pass


class KindError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: str = "dcin"
    flags: AblationFlags = AblationFlags()
    dims: ModelDims = ModelDims()
    lr: float = PAPER_LR
    batch_size: int = 256
    epochs: int = 1
    seed: int = 0
    eval_batch_size: int = 512

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        """Optimizer settings as reported for the industrial runs."""
        return cls(lr=PAPER_LR, batch_size=PAPER_BATCH_SIZE, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = self.dims.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["flags"] = AblationFlags(**d["flags"])
        d["dims"] = ModelDims.from_dict(d["dims"])
        return cls(**d)


# --------------------------------------------------------------------------
# metrics


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Normalised Mann-Whitney U; tied scores earn half credit."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    order = np.argsort(s, kind="mergesort")
    ranked = s[order]
    # average 1-based ranks over tie groups
    starts = np.flatnonzero(np.r_[True, ranked[1:] != ranked[:-1]])
    ends = np.r_[starts[1:], ranked.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty_like(s)
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def logloss(scores: Sequence[float], labels: Sequence[int]) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), 1e-12, 1 - 1e-12)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def rela_impr(auc_measured: float, auc_base: float) -> float:
    """Relative AUC lift over a base model, in percent."""
    if auc_base == 0.5:
        raise ZeroDivisionError("RelaImpr is undefined for a base AUC of exactly 0.5")
    return ((auc_measured - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


# --------------------------------------------------------------------------
# training


def predict_store(model: CtrModel, store: SessionStore, batch_size: int = 512) -> np.ndarray:
    if len(store) == 0:
        return np.empty(0)
    return np.concatenate([model.predict_batch(b) for b in store.batches(batch_size)])


def evaluate(model: CtrModel, store: SessionStore, batch_size: int = 512) -> dict:
    p = predict_store(model, store, batch_size)
    return {"auc": auc(p, store.label), "logloss": logloss(p, store.label)}


def train_step(model: CtrModel, opt: Adam, batch: SessionBatch) -> tuple[float, float]:
    """One Adam step on ``batch``; returns (loss, max |grad|)."""
    with GradTape() as tape:
        loss = nll_loss(model.forward(batch), batch.label)
    grads = tape.backward(loss)
    named = {t.name: g for t, g in grads.items()}
    gmax = max((float(np.abs(g).max()) for g in named.values()), default=0.0)
    opt.step(named)
    return loss.item(), gmax


def train(config: TrainConfig, train_store: SessionStore, test_store: SessionStore | None = None,
          model: CtrModel | None = None) -> tuple[CtrModel, list[dict]]:
    """Minimise mean NLL with Adam; deterministic given ``config.seed``.

    Returns the trained model and one log record per epoch.
    """
    if len(train_store) == 0:
        raise ValueError("training set is empty")
    if model is None:
        model = build_model(config.model, train_store.schema, config.dims, config.flags, config.seed)
    opt = Adam(model.params, lr=config.lr)
    order_rng = np.random.default_rng([config.seed, 0xBA7C])
    history = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        losses, weights = [], []
        for bi, batch in enumerate(train_store.batches(config.batch_size, order_rng)):
            loss, gmax = train_step(model, opt, batch)
            if not math.isfinite(loss):
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch}, batch {bi} (max |grad| {gmax:.3g})")
            losses.append(loss)
            weights.append(len(batch))
        rec = {"epoch": epoch, "train_loss": float(np.average(losses, weights=weights)),
               "seconds": time.perf_counter() - t0}
        if test_store is not None and len(test_store):
            rec.update({f"test_{k}": v for k, v in evaluate(model, test_store, config.eval_batch_size).items()})
        log.info("epoch %d: %s", epoch, rec)
        history.append(rec)
    return model, history


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: CtrModel
    train_config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    _memo: tuple = field(default=(), init=False, repr=False, compare=False)

    @property
    def kind(self) -> str:
        return self.model.kind

    def digest(self) -> str:
        """Parameter hash, recomputed only when some parameter array was rebound.

        Training rebinds arrays on every step; code that edits ``t.data`` in
        place must call :func:`params_digest` directly.
        """
        arrays = [t.data for _, t in sorted(self.model.params.items())]
        if self._memo and len(self._memo[0]) == len(arrays) and all(
                a is b for a, b in zip(self._memo[0], arrays)):
            return self._memo[1]
        d = params_digest(self.model)
        self._memo = (arrays, d)
        return d


def params_digest(model: CtrModel) -> str:
    """Content hash over every parameter tensor and the model config."""
    h = hashlib.sha256()
    h.update(json.dumps(model.config(), sort_keys=True).encode())
    for name in sorted(model.params):
        t = model.params[name]
        h.update(name.encode())
        h.update(np.asarray(t.shape, np.int64).tobytes())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write schema line, JSON header line, then raw little-endian float64 tensors."""
    model = ckpt.model
    names = sorted(model.params)
    offset = 0
    tensors = []
    for n in names:
        t = model.params[n]
        tensors.append({"name": n, "shape": list(t.shape), "offset": offset})
        offset += t.size * 8
    header = {
        "model": model.config(),
        "train_config": ckpt.train_config,
        "extra": ckpt.extra,
        "digest": params_digest(model),
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write((CHECKPOINT_SCHEMA + "\n").encode())
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())
    return header["digest"]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        first = fh.readline().decode().rstrip("\n")
        if first != CHECKPOINT_SCHEMA:
            raise ValueError(f"{path}: not a {CHECKPOINT_SCHEMA} file")
        header = json.loads(fh.readline().decode())
        body = fh.read()
    cfg = header["model"]
    model = build_model(cfg["kind"], FeatureSchema(**cfg["schema"]), ModelDims.from_dict(cfg["dims"]),
                        AblationFlags(**cfg["flags"]), cfg["seed"])
    for spec in header["tensors"]:
        t = model.params.get(spec["name"])
        if t is None:
            raise ValueError(f"{path}: unexpected tensor {spec['name']!r}")
        shape = tuple(spec["shape"])
        if shape != t.shape:
            raise ValueError(f"{path}: tensor {spec['name']!r} has shape {shape}, model expects {t.shape}")
        n = int(np.prod(shape)) * 8
        t.data = np.frombuffer(body, dtype="<f8", count=n // 8, offset=spec["offset"]).astype(np.float64).reshape(shape)
    if params_digest(model) != header["digest"]:
        raise ValueError(f"{path}: digest mismatch, file is corrupt")
    return Checkpoint(model, header.get("train_config", {}), header.get("extra", {}))


# --------------------------------------------------------------------------
# experiment suite


@dataclass(frozen=True)
class Variant:
    name: str
    kind: str
    flags: AblationFlags = AblationFlags()


SUITE_VARIANTS = (
    Variant("base", "base"),
    Variant("din", "din"),
    Variant("dcin", "dcin"),
    Variant("dcin-no-position", "dcin", AblationFlags(use_position=False)),
    Variant("dcin-no-fcfm", "dcin", AblationFlags(use_fcfm=False)),
)


def run_experiment_suite(train_store: SessionStore, test_store: SessionStore, seeds: Sequence[int],
                         base_config: TrainConfig = TrainConfig(),
                         variants: Sequence[Variant] = SUITE_VARIANTS, on_trained=None) -> dict:
    """Train every variant for every seed and summarise test AUC.

    Returns ``{"runs": [...], "summary": [...]}``; each run row carries
    model, seed, auc, logloss, rela_impr (vs the base variant of the same
    seed). Nothing is asserted here. ``on_trained(variant, seed, model)`` is
    called after each training, for callers that want to keep models.
    """
    if len(seeds) < 2:
        raise ValueError("the suite needs at least two seeds")
    runs = []
    for seed in seeds:
        base_auc = None
        for v in variants:
            cfg = replace(base_config, model=v.kind, flags=v.flags, seed=seed)
            model, _ = train(cfg, train_store)
            m = evaluate(model, test_store, cfg.eval_batch_size)
            if on_trained is not None:
                on_trained(v, seed, model)
            if v.name == variants[0].name:
                base_auc = m["auc"]
            runs.append({"model": v.name, "seed": seed, "auc": m["auc"], "logloss": m["logloss"],
                         "rela_impr": rela_impr(m["auc"], base_auc) if base_auc not in (None, 0.5) else float("nan")})
            log.info("suite seed=%s %s auc=%.5f", seed, v.name, m["auc"])
    summary = []
    base_mean = float(np.mean([r["auc"] for r in runs if r["model"] == variants[0].name]))
    for v in variants:
        a = np.array([r["auc"] for r in runs if r["model"] == v.name])
        summary.append({"model": v.name, "auc_mean": float(a.mean()), "auc_std": float(a.std(ddof=1)),
                        "rela_impr_mean": rela_impr(float(a.mean()), base_mean) if base_mean != 0.5 else float("nan"),
                        "n_seeds": int(a.size)})
    return {"runs": runs, "summary": summary}


def write_metrics_csv(rows: Iterable[dict], path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "seed", "auc", "logloss", "rela_impr"])
        for r in rows:
            w.writerow([r["model"], r["seed"], repr(r["auc"]), repr(r["logloss"]), repr(r["rela_impr"])])


# --------------------------------------------------------------------------
# interest export


def dump_interests(ckpt: Checkpoint, batch: SessionBatch, out_path=None) -> list[dict]:
    """Per (session, click): interest vector, PCAM weights, IMM weight.

    The IMM weight is computed against each session's own target item.
    """
    if not isinstance(ckpt.model, DCIN):
        raise KindError(f"interest export needs a dcin checkpoint, got {ckpt.kind!r}")
    ex = ckpt.model.explain(batch)
    records = []
    for b in range(len(batch)):
        sid = int(batch.session_id[b]) if batch.session_id is not None else b
        for i in range(batch.n_clicks):
            records.append({
                "session_id": sid,
                "click_index": i,
                "click_item": int(batch.click_item[b, i]),
                "target_item": int(batch.target_item[b]),
                "interest": ex["interests"][b, i].tolist(),
                "pcam_weights": ex["pcam_weights"][b, i].tolist(),
                "imm_weight": float(ex["imm_weights"][b, i]),
            })
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write("dcin-interests/v1\n")
            for r in records:
                fh.write(json.dumps(r) + "\n")
    return records


def click_representations(model: CtrModel, batch: SessionBatch) -> np.ndarray:
    """Per-click vectors fed to interest matching, shape (B, N, d_I)."""
    beh = batch.behaviors()
    out = model.interests(beh)
    return (out[0] if isinstance(out, tuple) else out).data
