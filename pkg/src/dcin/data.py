"""Synthetic sessions from a click model that depends on context and position.

Each user has a hidden unit-norm affinity over categories. Users browse
pages of ``page_size`` items; page composition mixes the user's favourite
categories with random ones at a rate that drifts from page to page, so some
screens are full of items the user likes and some are not. An item is clicked with probability

    sigmoid(a * affinity(item) - beta * rank - gamma * mean_affinity(rest of page) + offset)

where ``offset`` is calibrated to hit the configured base rate. The gamma
term makes a click on a competitive screen a stronger interest signal than a
click on a dull one, which a click-only model cannot see.

Sessions are stored compactly: a table of click blocks plus, per session,
the indices of its N blocks. :class:`SessionStore` materialises
:class:`~dcin.schema.SessionBatch` arrays on demand.
"""

from __future__ import annotations

import gzip
import io
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Sequence

import numpy as np

from .schema import (Behaviors, FeatureSchema, ItemRef, PositionedItem, Session, SessionBatch,
                     ValidationError, batch_from_sessions, validate_session)

DATASET_SCHEMA = "dcin-dataset/v1"
MANIFEST_SCHEMA = "dcin-manifest/v1"
DRIFT_PERSISTENCE = 0.8


@dataclass(frozen=True)
class SyntheticConfig:
    num_users: int = 2500
    num_items: int = 200
    num_categories: int = 20
    n_clicks: int = 50
    window: int = 20
    page_size: int = 40
    affinity_scale: float = 8.0
    position_bias: float = 0.1
    context_strength: float = 16.0
    label_noise: float = 0.0
    logit_noise: float = 0.0
    base_rate: float = 0.15
    favorites: int = 3
    page_jitter: float = 0.1
    rate_drift: float = 0.15
    quality_strength: float = 0.0
    quality_bar: float = 1.0
    page_tilt: float = 0.0
    position_spread: float = 1.0
    warmup_pages: int = 12
    sample_pages: int = 12
    test_pages: int = 2
    sessions_per_page: int = 4
    seed: int = 0

    def validate(self) -> None:
        counts = ("num_users", "num_items", "num_categories", "n_clicks", "window",
                  "page_size", "favorites", "sample_pages", "sessions_per_page")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.page_size < self.window:
            raise ValidationError(f"page_size ({self.page_size}) must be >= window ({self.window})")
        if self.favorites > self.num_categories:
            raise ValidationError("favorites cannot exceed num_categories")
        if self.num_items < self.num_categories:
            raise ValidationError("num_items must be >= num_categories so every category has an item")
        if self.sessions_per_page > self.page_size:
            raise ValidationError("sessions_per_page cannot exceed page_size")
        if not 0 <= self.test_pages < self.sample_pages:
            raise ValidationError("test_pages must be in [0, sample_pages)")
        if self.position_bias < 0:
            raise ValidationError("position_bias must be >= 0")
        if not 0.0 < self.base_rate < 1.0:
            raise ValidationError("base_rate must be in (0, 1)")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValidationError("label_noise must be in [0, 0.5)")
        if self.warmup_pages < 0 or self.logit_noise < 0 or self.page_jitter < 0:
            raise ValidationError("warmup_pages, logit_noise and page_jitter must be >= 0")
        for name in ("rate_drift", "quality_strength", "page_tilt"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if not 0.0 <= self.position_spread <= 1.0:
            raise ValidationError("position_spread must be in [0, 1]")

    def schema(self) -> FeatureSchema:
        return FeatureSchema(num_items=self.num_items, num_categories=self.num_categories,
                             num_users=self.num_users, rel_range=self.window,
                             p_max=max(1023, self.page_size - 1))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class UserProfile:
    user_id: int
    affinity: np.ndarray
    favorites: np.ndarray
    personalization: float = 0.5
    position_scale: float = 1.0
    quality_taste: float = 0.0
    quality_tilt: float = 0.0


# --------------------------------------------------------------------------
# click model


def ground_truth_logit(affinity_item, position, context_affinity, config: SyntheticConfig,
                       offset: float = 0.0, position_scale: float = 1.0, quality=0.0):
    """``quality`` is the user's taste times the item's quality, already scaled."""
    return (config.affinity_scale * np.asarray(affinity_item)
            - config.position_bias * position_scale * np.asarray(position)
            - config.context_strength * np.asarray(context_affinity)
            + np.asarray(quality)
            + offset)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def ground_truth_ctr(profile: UserProfile, item: ItemRef, page_items: Sequence[ItemRef],
                     position: int, config: SyntheticConfig, offset: float = 0.0,
                     noise: float = 0.0, item_quality: float = 0.0) -> float:
    """True click probability of ``item`` shown at slot ``position`` of a page.

    ``page_items`` is the full page, including the item itself at
    ``position``; the context term averages affinity over the other slots.
    """
    if not 0 <= position < len(page_items):
        raise ValidationError(f"position {position} outside page of {len(page_items)} items")
    aff = profile.affinity
    others = [aff[it.category] for k, it in enumerate(page_items) if k != position]
    ctx = float(np.mean(others)) if others else 0.0
    q = config.quality_strength * profile.quality_taste * (item_quality - config.quality_bar)
    z = ground_truth_logit(aff[item.category], position, ctx, config, offset, profile.position_scale, q) + noise
    return float(_sigmoid(z))


def page_ctr(affinity: np.ndarray, page_cats: np.ndarray, config: SyntheticConfig,
             offset: float, position_scale: float = 1.0, quality=0.0) -> np.ndarray:
    """Vectorised click probabilities for pages of shape (..., page_size)."""
    a = affinity[page_cats]
    n = page_cats.shape[-1]
    ctx = (a.sum(axis=-1, keepdims=True) - a) / max(n - 1, 1)
    ranks = np.arange(n)
    return _sigmoid(ground_truth_logit(a, ranks, ctx, config, offset, position_scale, quality))


def page_ctr_without_context(affinity: np.ndarray, cats: np.ndarray, ranks: np.ndarray,
                             mean_context: float, config: SyntheticConfig, offset: float,
                             position_scale: float = 1.0, quality=0.0) -> np.ndarray:
    """Click probability with the page context replaced by a user-level constant."""
    return _sigmoid(ground_truth_logit(affinity[cats], ranks, mean_context, config, offset,
                                       position_scale, quality))


# --------------------------------------------------------------------------
# window selection


def window_start(click_index, page_len: int, M: int):
    """First page slot of the M-slot window that keeps the click centred.

    The click sits at window index (M - 1) // 2 unless the page boundary
    forces the window to shift.
    """
    if page_len < M:
        raise ValidationError(f"page of {page_len} items is shorter than window {M}")
    return np.clip(np.asarray(click_index) - (M - 1) // 2, 0, page_len - M)


def select_display_window(page: Sequence[PositionedItem], click_index: int, M: int) -> list[PositionedItem]:
    start = int(window_start(click_index, len(page), M))
    return list(page[start:start + M])


# --------------------------------------------------------------------------
# generation


def make_catalogue(config: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """Category of every item; each category owns at least one item."""
    cats = np.arange(config.num_items) % config.num_categories
    rng.shuffle(cats)
    return cats


class Catalogue:
    """Item categories, per-category item pools, and a standard-normal quality per item."""

    def __init__(self, config: SyntheticConfig, rng: np.random.Generator):
        self.category = make_catalogue(config, rng)
        self.quality = rng.standard_normal(config.num_items)
        pools = [np.flatnonzero(self.category == c) for c in range(config.num_categories)]
        self.pool_size = np.array([len(p) for p in pools])
        self.pools = np.zeros((len(pools), self.pool_size.max()), np.int64)
        for c, pool in enumerate(pools):
            self.pools[c, :len(pool)] = pool

    def pick(self, cats: np.ndarray, tilt: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One item per slot from the slot's category, tilted towards quality by ``tilt``.

        ``tilt`` broadcasts against ``cats``; zero tilt is a uniform pick.
        """
        pools = self.pools[cats]
        valid = np.arange(pools.shape[-1]) < self.pool_size[cats][..., None]
        gumbel = -np.log(-np.log(rng.random(pools.shape)))
        score = np.where(valid, np.asarray(tilt)[..., None] * self.quality[pools] + gumbel, -np.inf)
        return np.take_along_axis(pools, score.argmax(-1)[..., None], -1)[..., 0]


def make_profile(user_id: int, config: SyntheticConfig, rng: np.random.Generator) -> UserProfile:
    C = config.num_categories
    g = np.abs(rng.normal(0.0, 0.1, size=C))
    fav = rng.choice(C, size=config.favorites, replace=False)
    g[fav] = rng.uniform(0.5, 1.0, size=config.favorites)
    rate = float(rng.uniform(0.0, 1.0))
    scale = 1.0 + config.position_spread * float(rng.uniform(-1.0, 1.0))
    taste = float(rng.uniform(0.0, 1.0))
    tilt = float(rng.standard_normal())
    return UserProfile(user_id, g / np.linalg.norm(g), np.sort(fav), rate, scale, taste, tilt)


def drift_path(n_pages: int, step: float, rng: np.random.Generator) -> np.ndarray:
    """Mean-reverting AR(1) walk of the personalization rate, one value per page."""
    path = np.zeros(n_pages)
    if step == 0.0:
        return path
    eps = step * rng.standard_normal(n_pages)
    level = eps[0] / np.sqrt(1.0 - DRIFT_PERSISTENCE ** 2)
    for k in range(n_pages):
        if k:
            level = DRIFT_PERSISTENCE * level + eps[k]
        path[k] = level
    return path


def sample_pages(profile: UserProfile, n_pages: int, config: SyntheticConfig,
                 catalogue: Catalogue, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Item ids and categories of ``n_pages`` pages, shape (n_pages, page_size)."""
    P, C = config.page_size, config.num_categories
    rate = profile.personalization + drift_path(n_pages, config.rate_drift, rng)[:, None]
    rate = rate + config.page_jitter * rng.standard_normal((n_pages, 1))
    personal = rng.random((n_pages, P)) < rate
    w = profile.affinity[profile.favorites]
    fav_pick = profile.favorites[rng.choice(len(w), size=(n_pages, P), p=w / w.sum())]
    rand_pick = rng.integers(0, C, size=(n_pages, P))
    cats = np.where(personal, fav_pick, rand_pick)
    tilt = config.page_tilt * (profile.quality_tilt + rng.standard_normal((n_pages, 1)))
    return catalogue.pick(cats, tilt, rng), cats


def simulate_pages(profile: UserProfile, n_pages: int, config: SyntheticConfig, catalogue: Catalogue,
                   offset: float, rng: np.random.Generator):
    """Pages of one user in time order with the click probability of every slot."""
    items, cats = sample_pages(profile, n_pages, config, catalogue, rng)
    taste = profile.quality_taste + drift_path(n_pages, config.rate_drift, rng)
    quality = config.quality_strength * taste[:, None] * (catalogue.quality[items] - config.quality_bar)
    return items, cats, quality, page_ctr(profile.affinity, cats, config, offset,
                                          profile.position_scale, quality)


def calibrate_offset(config: SyntheticConfig, n_users: int = 300, n_pages: int = 20) -> float:
    """Logit offset placing the mean click probability at ``config.base_rate``."""
    rng = np.random.default_rng([config.seed, 0xCA1])
    catalogue = Catalogue(config, rng)
    probes = []
    for u in range(n_users):
        prof = make_profile(u, config, rng)
        _, cats, quality, _ = simulate_pages(prof, n_pages, config, catalogue, 0.0, rng)
        probes.append((prof.affinity, cats, prof.position_scale, quality))

    def mean_ctr(offset):
        return np.mean([page_ctr(a, c, config, offset, k, q).mean() for a, c, k, q in probes])

    lo, hi = -50.0, 50.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if mean_ctr(mid) < config.base_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class SessionStore:
    """Sessions as indices into a shared table of click blocks."""

    schema: FeatureSchema
    block_click: np.ndarray      # (nb, 3): item, category, position
    block_disp_item: np.ndarray  # (nb, M)
    block_disp_cat: np.ndarray
    block_disp_pos: np.ndarray
    user: np.ndarray             # (S,)
    block_idx: np.ndarray        # (S, N)
    target_item: np.ndarray
    target_cat: np.ndarray
    label: np.ndarray
    session_id: np.ndarray
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.user)

    @property
    def n_clicks(self) -> int:
        return self.block_idx.shape[1]

    @property
    def window(self) -> int:
        return self.block_disp_item.shape[1]

    def batch(self, rows) -> SessionBatch:
        """Sessions ``rows`` with their distinct click blocks stored once."""
        rows = np.asarray(rows)
        bi = self.block_idx[rows]
        uniq, inv = np.unique(bi, return_inverse=True)
        bc = self.block_click[uniq]
        blocks = Behaviors(
            user=np.zeros(len(uniq), np.int64),
            click_item=bc[:, None, 0], click_cat=bc[:, None, 1], click_pos=bc[:, None, 2],
            disp_item=self.block_disp_item[uniq][:, None], disp_cat=self.block_disp_cat[uniq][:, None],
            disp_pos=self.block_disp_pos[uniq][:, None],
        )
        full = self.block_click[bi]
        return SessionBatch(
            user=self.user[rows],
            click_item=full[..., 0], click_cat=full[..., 1], click_pos=full[..., 2],
            target_item=self.target_item[rows], target_cat=self.target_cat[rows],
            label=self.label[rows], session_id=self.session_id[rows],
            block_index=inv.reshape(bi.shape), blocks=blocks,
        )

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[SessionBatch]:
        """Batches in stored order, or shuffled when ``rng`` is given.

        Shuffling permutes groups of sessions with identical histories (the
        targets of one page) and keeps each group adjacent, so its click
        blocks are computed once per batch. Permuting whole users instead
        would be cheaper, but batches would then hold only a handful of users
        and every model trains markedly worse.
        """
        if rng is None or len(self) == 0:
            order = np.arange(len(self))
        else:
            _, group = np.unique(self.block_idx, axis=0, return_inverse=True)
            group = group.reshape(-1)
            rank = rng.permutation(group.max() + 1)
            order = np.argsort(rank[group], kind="stable")
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])

    def sessions(self) -> list[Session]:
        return self.batch(np.arange(len(self))).sessions() if len(self) else []

    def subset(self, rows) -> "SessionStore":
        rows = np.asarray(rows)
        extras = {k: v[rows] for k, v in self.extras.items() if isinstance(v, np.ndarray) and len(v) == len(self)}
        return SessionStore(self.schema, self.block_click, self.block_disp_item, self.block_disp_cat,
                            self.block_disp_pos, self.user[rows], self.block_idx[rows],
                            self.target_item[rows], self.target_cat[rows], self.label[rows],
                            self.session_id[rows], extras)

    @classmethod
    def from_batch(cls, schema: FeatureSchema, batch: SessionBatch) -> "SessionStore":
        B, N, M = batch.disp_item.shape
        sid = batch.session_id if batch.session_id is not None else np.arange(B)
        return cls(
            schema,
            np.stack([batch.click_item, batch.click_cat, batch.click_pos], -1).reshape(B * N, 3),
            batch.disp_item.reshape(B * N, M), batch.disp_cat.reshape(B * N, M),
            batch.disp_pos.reshape(B * N, M),
            batch.user.copy(), np.arange(B * N).reshape(B, N),
            batch.target_item.copy(), batch.target_cat.copy(), batch.label.copy(), sid.copy(),
        )


@dataclass
class DatasetSplit:
    train: SessionStore
    test: SessionStore
    manifest: dict
    profiles: list[UserProfile] = field(default_factory=list, repr=False)
    train_path: str | None = None
    test_path: str | None = None
    manifest_path: str | None = None


def _user_log(profile, config, catalogue, rng, offset):
    """Simulate one user's pages; returns page arrays and click flags."""
    n_pages = config.warmup_pages + config.sample_pages
    items, cats, quality, p = simulate_pages(profile, n_pages, config, catalogue, offset, rng)
    if config.logit_noise > 0:
        z = np.log(p) - np.log1p(-p) + rng.normal(0.0, config.logit_noise, size=p.shape)
        p = _sigmoid(z)
    clicks = rng.random(p.shape) < p
    if config.label_noise > 0:
        clicks ^= rng.random(p.shape) < config.label_noise
    return items, cats, quality, p, clicks


def generate_dataset(config: SyntheticConfig, out_dir: str | os.PathLike | None = None,
                     compress: bool = False) -> DatasetSplit:
    """Simulate browsing for every user and cut sessions from the log.

    Behaviors of a session are the user's last N clicks on pages strictly
    before the page holding the target impression. The last ``test_pages``
    sampled pages of every user form the test split. Users with fewer than N
    earlier clicks are front-padded by repeating their earliest block.
    """
    config.validate()
    schema = config.schema()
    offset = calibrate_offset(config)
    rng = np.random.default_rng(config.seed)
    catalogue = Catalogue(config, rng)
    N, M, P = config.n_clicks, config.window, config.page_size

    blk_click, blk_di, blk_dc, blk_dp = [], [], [], []
    rows = {"train": [], "test": []}
    n_blocks = 0
    pad_sessions = pad_blocks = dropped = 0
    profiles = []
    for u in range(config.num_users):
        prof = make_profile(u, config, rng)
        profiles.append(prof)
        items, cats, quality, probs, clicks = _user_log(prof, config, catalogue, rng, offset)
        pg, slot = np.nonzero(clicks)  # row-major: time order
        starts = window_start(slot, P, M)
        win = starts[:, None] + np.arange(M)
        blk_click.append(np.stack([items[pg, slot], cats[pg, slot], slot], -1))
        blk_di.append(items[pg[:, None], win])
        blk_dc.append(cats[pg[:, None], win])
        blk_dp.append(win)
        first_click_on_page = np.searchsorted(pg, np.arange(items.shape[0]))
        mean_ctx = _mean_context(prof.affinity, cats)
        for k in range(config.sample_pages):
            page = config.warmup_pages + k
            n_before = int(first_click_on_page[page])
            split = "test" if k >= config.sample_pages - config.test_pages else "train"
            targets = rng.choice(P, size=config.sessions_per_page, replace=False)
            if n_before == 0:
                dropped += len(targets)
                continue
            idx = np.arange(n_before - N, n_before)
            if n_before < N:
                pad_sessions += len(targets)
                pad_blocks += (N - n_before) * len(targets)
                idx = np.maximum(idx, 0)
            for t in targets:
                rows[split].append((u, n_blocks + idx, items[page, t], cats[page, t],
                                    int(clicks[page, t]), probs[page, t], t,
                                    page_ctr_without_context(prof.affinity, cats[page, t], t, mean_ctx,
                                                             config, offset, prof.position_scale,
                                                             quality[page, t])))
        n_blocks += len(pg)

    block_click = np.concatenate(blk_click).astype(np.int64)
    block_di = np.concatenate(blk_di).astype(np.int64)
    block_dc = np.concatenate(blk_dc).astype(np.int64)
    block_dp = np.concatenate(blk_dp).astype(np.int64)

    def store(rs, first_id):
        n = len(rs)
        st = SessionStore(
            schema, block_click, block_di, block_dc, block_dp,
            user=np.array([r[0] for r in rs], np.int64),
            block_idx=np.array([r[1] for r in rs], np.int64).reshape(n, N),
            target_item=np.array([r[2] for r in rs], np.int64),
            target_cat=np.array([r[3] for r in rs], np.int64),
            label=np.array([r[4] for r in rs], np.int64),
            session_id=np.arange(first_id, first_id + n, dtype=np.int64),
        )
        st.extras = {
            "true_ctr": np.array([r[5] for r in rs], np.float64),
            "target_rank": np.array([r[6] for r in rs], np.int64),
            "ctr_without_context": np.array([r[7] for r in rs], np.float64),
        }
        return st

    train = store(rows["train"], 0)
    test = store(rows["test"], len(rows["train"]))
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "config": config.to_dict(),
        "seed": config.seed,
        "feature_schema": schema.to_dict(),
        "logit_offset": offset,
        "counts": {
            "train_sessions": len(train),
            "test_sessions": len(test),
            "click_blocks": int(len(block_click)),
            "train_positive_rate": float(train.label.mean()) if len(train) else None,
            "test_positive_rate": float(test.label.mean()) if len(test) else None,
        },
        "padding": {"padded_sessions": pad_sessions, "padded_blocks": pad_blocks,
                    "dropped_sessions_without_history": dropped},
    }
    split = DatasetSplit(train, test, manifest, profiles)
    if out_dir is not None:
        write_split(split, out_dir, compress=compress)
    return split


def _mean_context(affinity: np.ndarray, cats: np.ndarray) -> float:
    a = affinity[cats]
    return float(a.mean())


# --------------------------------------------------------------------------
# file I/O


def _open(path, mode: str):
    path = os.fspath(path)
    if path.endswith(".gz"):
        # fixed mtime keeps compressed output byte-identical across runs
        raw = open(path, mode.replace("t", "") + "b") if "w" in mode else open(path, "rb")
        gz = gzip.GzipFile(fileobj=raw, mode="wb" if "w" in mode else "rb", mtime=0)
        return _Closing(io.TextIOWrapper(gz, encoding="utf-8", newline="\n"), raw)
    return open(path, mode, encoding="utf-8", newline="\n")


class _Closing:
    def __init__(self, wrapper, raw):
        self.wrapper, self.raw = wrapper, raw

    def __enter__(self):
        return self.wrapper

    def __exit__(self, *exc):
        self.wrapper.close()
        self.raw.close()


def session_to_record(s: Session) -> dict:
    return {
        "session_id": s.session_id,
        "user_id": s.user_id,
        "blocks": [
            {
                "click": {"item_id": b.click.item.item_id, "category": b.click.item.category,
                          "pos": b.click.abs_position},
                "displays": [{"item_id": d.item.item_id, "category": d.item.category,
                              "pos": d.abs_position} for d in b.displays],
            }
            for b in s.blocks
        ],
        "target": {"item_id": s.target.item_id, "category": s.target.category},
        "label": s.label,
    }


def record_to_session(rec: dict) -> Session:
    from .schema import ClickContextBlock

    def pi(d):
        return PositionedItem(ItemRef(int(d["item_id"]), int(d["category"])), int(d["pos"]))

    blocks = tuple(ClickContextBlock(pi(b["click"]), tuple(pi(d) for d in b["displays"]))
                   for b in rec["blocks"])
    t = rec["target"]
    return Session(int(rec["user_id"]), blocks, ItemRef(int(t["item_id"]), int(t["category"])),
                   int(rec["label"]), rec.get("session_id"))


def write_sessions(store_or_sessions, path, chunk: int = 512) -> int:
    """Write sessions one JSON record per line after the schema line."""
    n = 0
    with _open(path, "wt") as fh:
        fh.write(DATASET_SCHEMA + "\n")
        if isinstance(store_or_sessions, SessionStore):
            st = store_or_sessions
            chunks = (st.batch(np.arange(i, min(i + chunk, len(st)))).sessions()
                      for i in range(0, len(st), chunk))
        else:
            chunks = [list(store_or_sessions)]
        for sessions in chunks:
            for s in sessions:
                fh.write(json.dumps(session_to_record(s), separators=(",", ":")) + "\n")
                n += 1
    return n


def read_sessions(path, schema: FeatureSchema | None = None) -> Iterator[Session]:
    with _open(path, "rt") as fh:
        header = fh.readline().rstrip("\n")
        if header == "":
            return
        if header != DATASET_SCHEMA:
            raise ValidationError(f"{path}: line 1: expected schema {DATASET_SCHEMA!r}, got {header[:40]!r}")
        n = m = None
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                s = record_to_session(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}: line {lineno}: cannot parse session ({exc})") from None
            if n is None:
                n, m = len(s.blocks), len(s.blocks[0].displays) if s.blocks else 0
            validate_session(s, schema, n_clicks=n, window=m)
            yield s


def load_batches(path, batch_size: int, schema: FeatureSchema | None = None) -> Iterator[SessionBatch]:
    """Stream a dataset file as batches in file order; the last may be partial."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    buf: list[Session] = []
    for s in read_sessions(path, schema):
        buf.append(s)
        if len(buf) == batch_size:
            yield batch_from_sessions(buf)
            buf = []
    if buf:
        yield batch_from_sessions(buf)


def _dedup(store: SessionStore) -> SessionStore:
    """Store each distinct click block once and re-point the sessions at it."""
    table = np.concatenate([store.block_click, store.block_disp_item, store.block_disp_cat,
                            store.block_disp_pos], axis=1)
    uniq, inv = np.unique(table, axis=0, return_inverse=True)
    M = store.window
    return SessionStore(store.schema, uniq[:, :3], uniq[:, 3:3 + M], uniq[:, 3 + M:3 + 2 * M],
                        uniq[:, 3 + 2 * M:], store.user, inv.reshape(-1)[store.block_idx],
                        store.target_item, store.target_cat, store.label, store.session_id)


def load_store(path, schema: FeatureSchema, batch_size: int = 1024) -> SessionStore:
    """Read a dataset file into memory, sharing click blocks that repeat across sessions."""
    parts = [_dedup(SessionStore.from_batch(schema, b)) for b in load_batches(path, batch_size, schema)]
    if not parts:
        raise ValidationError(f"{path}: no sessions")
    if len(parts) == 1:
        return parts[0]
    offs = np.cumsum([0] + [len(p.block_click) for p in parts[:-1]])
    return _dedup(SessionStore(
        schema,
        np.concatenate([p.block_click for p in parts]),
        np.concatenate([p.block_disp_item for p in parts]),
        np.concatenate([p.block_disp_cat for p in parts]),
        np.concatenate([p.block_disp_pos for p in parts]),
        np.concatenate([p.user for p in parts]),
        np.concatenate([p.block_idx + o for p, o in zip(parts, offs)]),
        np.concatenate([p.target_item for p in parts]),
        np.concatenate([p.target_cat for p in parts]),
        np.concatenate([p.label for p in parts]),
        np.concatenate([p.session_id for p in parts]),
    ))


def write_split(split: DatasetSplit, out_dir, compress: bool = False) -> DatasetSplit:
    os.makedirs(out_dir, exist_ok=True)
    ext = ".jsonl.gz" if compress else ".jsonl"
    split.train_path = os.path.join(out_dir, "train" + ext)
    split.test_path = os.path.join(out_dir, "test" + ext)
    split.manifest_path = os.path.join(out_dir, "manifest.json")
    write_sessions(split.train, split.train_path)
    write_sessions(split.test, split.test_path)
    manifest = dict(split.manifest)
    manifest["files"] = {"train": os.path.basename(split.train_path),
                         "test": os.path.basename(split.test_path)}
    with open(split.manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return split


def read_manifest(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        m = json.load(fh)
    if m.get("schema") != MANIFEST_SCHEMA:
        raise ValidationError(f"{path}: not a {MANIFEST_SCHEMA} manifest")
    return m
