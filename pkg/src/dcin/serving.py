"""Two-stage scoring with precomputed context-aware interests.

Aggregation over display windows and fusion never look at the target item,
so a user's interest matrix can be computed once, stored, and reused for
every candidate. Scoring a candidate then costs one interest-matching pass
and the prediction head.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import core as F
from .core import ContractError, FlopCounter
from .model import DCIN
from .schema import Behaviors, ClickContextBlock, FeatureSchema, ItemRef, SessionBatch, ValidationError
from .training import Checkpoint, KindError

CACHE_SCHEMA = "dcin-cache/v1"
EQUIVALENCE_TOL = 1e-9


class StaleCacheError(RuntimeError):
    """The cache was built under different parameters than the checkpoint."""


@dataclass(frozen=True)
class InterestCache:
    user_id: int
    interests: np.ndarray  # (N, d_I)
    digest: str

    @property
    def n_clicks(self) -> int:
        return self.interests.shape[0]


def _dcin(ckpt: Checkpoint) -> DCIN:
    if not isinstance(ckpt.model, DCIN):
        raise KindError(f"serving needs a dcin checkpoint, got {ckpt.kind!r}")
    return ckpt.model


def _as_behaviors(behaviors, user_id: int | None) -> Behaviors:
    if isinstance(behaviors, Behaviors):
        if len(behaviors) != 1:
            raise ValidationError(f"expected behaviors of one user, got {len(behaviors)}")
        return behaviors
    blocks = list(behaviors)
    if not blocks or not all(isinstance(b, ClickContextBlock) for b in blocks):
        raise ValidationError("behaviors must be a non-empty list of ClickContextBlock")
    return Behaviors.from_blocks(0 if user_id is None else user_id, blocks)


def precompute_interests(ckpt: Checkpoint, behaviors: Behaviors | Sequence[ClickContextBlock],
                         user_id: int | None = None) -> InterestCache:
    """Run context aggregation and fusion for one user's click blocks."""
    model = _dcin(ckpt)
    beh = _as_behaviors(behaviors, user_id)
    _check_behaviors(beh, model)
    I, _ = model.interests(beh)
    uid = int(beh.user[0]) if user_id is None else int(user_id)
    data = np.array(I.data[0])
    data.setflags(write=False)
    return InterestCache(uid, data, ckpt.digest())


def _check_behaviors(beh: Behaviors, model: DCIN) -> None:
    s = model.schema
    for what, arr, hi in (("click item_id", beh.click_item, s.num_items),
                          ("display item_id", beh.disp_item, s.num_items),
                          ("click category", beh.click_cat, s.num_categories),
                          ("display category", beh.disp_cat, s.num_categories),
                          ("click position", beh.click_pos, s.p_max + 1),
                          ("display position", beh.disp_pos, s.p_max + 1),
                          ("user_id", beh.user, s.num_users)):
        if arr.size and (arr.min() < 0 or arr.max() >= hi):
            raise ValidationError(f"behaviors do not match the checkpoint schema: {what} outside [0, {hi})")
    if np.abs(beh.rel_pos).max() > s.rel_range:
        raise ValidationError("behaviors do not match the checkpoint schema: relative position out of range")


def _check_fresh(ckpt: Checkpoint, cache: InterestCache) -> None:
    if cache.digest != ckpt.digest():
        raise StaleCacheError(
            f"cache for user {cache.user_id} was built under {cache.digest[:12]}, "
            f"checkpoint is {ckpt.digest()[:12]}")


def score_candidates(ckpt: Checkpoint, cache: InterestCache, target_items, target_cats,
                     return_weights: bool = False):
    """Scores of K candidates against one cached user; optionally IMM weights (K, N)."""
    model = _dcin(ckpt)
    _check_fresh(ckpt, cache)
    items = np.atleast_1d(np.asarray(target_items))
    cats = np.atleast_1d(np.asarray(target_cats))
    K = len(items)
    if K == 0:
        raise ContractError("no candidates to score")
    I = F.Tensor(np.broadcast_to(cache.interests, (K, *cache.interests.shape)))
    users = np.full(K, cache.user_id)
    p, w = model.score_interests(I, users, items, cats, return_weights=True)
    return (p.data, w.data) if return_weights else p.data


def score_with_cache(ckpt: Checkpoint, cache: InterestCache, target: ItemRef) -> float:
    return float(score_candidates(ckpt, cache, [target.item_id], [target.category])[0])


# --------------------------------------------------------------------------
# cache files


def write_cache(cache: InterestCache, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CACHE_SCHEMA + "\n")
        rec = {"user_id": cache.user_id, "digest": cache.digest, "n": cache.n_clicks,
               "dim": int(cache.interests.shape[1]), "interests": cache.interests.tolist()}
        fh.write(json.dumps(rec) + "\n")


def read_cache(path) -> InterestCache:
    with open(path, encoding="utf-8") as fh:
        if fh.readline().rstrip("\n") != CACHE_SCHEMA:
            raise ValidationError(f"{path}: not a {CACHE_SCHEMA} file")
        rec = json.loads(fh.readline())
    data = np.asarray(rec["interests"], dtype=np.float64).reshape(rec["n"], rec["dim"])
    data.setflags(write=False)
    return InterestCache(int(rec["user_id"]), data, rec["digest"])


# --------------------------------------------------------------------------
# cost accounting


def _repeat_user(beh: Behaviors, K: int, target_items, target_cats) -> SessionBatch:
    rep = lambda a: np.repeat(a, K, axis=0)  # noqa: E731
    return SessionBatch(
        user=rep(beh.user), click_item=rep(beh.click_item), click_cat=rep(beh.click_cat),
        click_pos=rep(beh.click_pos), disp_item=rep(beh.disp_item), disp_cat=rep(beh.disp_cat),
        disp_pos=rep(beh.disp_pos), target_item=np.asarray(target_items),
        target_cat=np.asarray(target_cats), label=np.zeros(K, np.int64),
    )


def full_path_scores(ckpt: Checkpoint, beh: Behaviors, target_items, target_cats) -> np.ndarray:
    """K independent full forwards, one per candidate."""
    model = _dcin(ckpt)
    K = len(target_items)
    if K == 0:
        raise ContractError("no candidates to score")
    return model.predict_batch(_repeat_user(beh, K, target_items, target_cats))


def path_flops(ckpt: Checkpoint, beh: Behaviors, target_items, target_cats) -> dict:
    """Arithmetic cost of scoring K candidates along each path."""
    K = len(target_items)
    with FlopCounter() as full:
        full_path_scores(ckpt, beh, target_items, target_cats)
    with FlopCounter() as pre:
        cache = precompute_interests(ckpt, beh)
    with FlopCounter() as cached:
        score_candidates(ckpt, cache, target_items, target_cats)
    return {"full": full.flops, "precompute": pre.flops, "cached": cached.flops,
            "full_per_candidate": full.flops / K, "cached_per_candidate": cached.flops / K}


# --------------------------------------------------------------------------
# latency benchmark


def random_behaviors(schema: FeatureSchema, n_users: int, n_clicks: int = 50, window: int = 20,
                     seed: int = 0) -> Behaviors:
    """Well-formed behaviors with uniformly drawn ids; clicks sit inside pages of 2M slots."""
    if window > schema.rel_range:
        raise ValidationError(f"window {window} exceeds the schema's relative range {schema.rel_range}")
    rng = np.random.default_rng(seed)
    shape = (n_users, n_clicks)
    click_pos = rng.integers(0, 2 * window, size=shape)
    start = np.clip(click_pos - (window - 1) // 2, 0, window)
    disp_pos = start[..., None] + np.arange(window)
    disp_item = rng.integers(0, schema.num_items, size=(*shape, window))
    disp_cat = rng.integers(0, schema.num_categories, size=(*shape, window))
    at = (click_pos - start)[..., None]
    click_item = np.take_along_axis(disp_item, at, -1)[..., 0]
    click_cat = np.take_along_axis(disp_cat, at, -1)[..., 0]
    return Behaviors(np.arange(n_users) % schema.num_users, click_item, click_cat, click_pos,
                     disp_item, disp_cat, disp_pos)


@dataclass
class LatencyReport:
    k: int
    n_clicks: int
    window: int
    repetitions: int
    warmup: int
    requests_per_cache: int
    full_ms: dict = field(default_factory=dict)
    cached_ms: dict = field(default_factory=dict)
    precompute_ms: float = 0.0
    speedup: float = 0.0
    max_abs_diff: float | None = None

    def rows(self) -> list[dict]:
        return [{"path": name, "k": self.k, "n": self.n_clicks, "m": self.window, **ms}
                for name, ms in (("full", self.full_ms), ("cached", self.cached_ms))]

    def write_csv(self, path) -> None:
        rows = self.rows()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)

    def to_dict(self) -> dict:
        return asdict(self)


def _percentiles(samples: Sequence[float]) -> dict:
    a = np.asarray(samples) * 1e3
    return {"p50": float(np.percentile(a, 50)), "p95": float(np.percentile(a, 95)),
            "p99": float(np.percentile(a, 99)), "mean": float(a.mean())}


def bench_latency(ckpt: Checkpoint, users: Sequence[Behaviors], k: int = 100, repetitions: int = 1000,
                  warmup: int = 100, requests_per_cache: int = 10, seed: int = 0,
                  verify: bool = False) -> LatencyReport:
    """Wall time per request of K full forwards vs K cached scores.

    Each cached request is charged the candidate scoring plus the user's
    precompute time divided by ``requests_per_cache``.
    """
    if k <= 0:
        raise ContractError("k must be >= 1")
    model = _dcin(ckpt)
    if not users:
        raise ContractError("need at least one user to benchmark")
    rng = np.random.default_rng(seed)
    s = model.schema
    caches, pre_times = [], []
    for beh in users:
        t0 = time.perf_counter()
        caches.append(precompute_interests(ckpt, beh))
        pre_times.append(time.perf_counter() - t0)
    full_t, cached_t = [], []
    max_diff = 0.0
    for rep in range(warmup + repetitions):
        u = rep % len(users)
        items = rng.integers(0, s.num_items, size=k)
        cats = rng.integers(0, s.num_categories, size=k)
        t0 = time.perf_counter()
        pf = full_path_scores(ckpt, users[u], items, cats)
        t1 = time.perf_counter()
        pc = score_candidates(ckpt, caches[u], items, cats)
        t2 = time.perf_counter()
        if rep >= warmup:
            full_t.append(t1 - t0)
            cached_t.append(t2 - t1 + pre_times[u] / requests_per_cache)
            if verify:
                max_diff = max(max_diff, float(np.abs(pf - pc).max()))
    full_ms, cached_ms = _percentiles(full_t), _percentiles(cached_t)
    beh = users[0]
    return LatencyReport(
        k=k, n_clicks=beh.click_item.shape[1], window=beh.disp_item.shape[2],
        repetitions=repetitions, warmup=warmup, requests_per_cache=requests_per_cache,
        full_ms=full_ms, cached_ms=cached_ms, precompute_ms=float(np.median(pre_times) * 1e3),
        speedup=full_ms["p50"] / cached_ms["p50"], max_abs_diff=max_diff if verify else None,
    )
