"""Feature schema, behavior records, and their batched array form."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np


class ValidationError(ValueError):
    """A record violates one of its structural invariants."""


@dataclass(frozen=True)
class FeatureSchema:
    num_items: int
    num_categories: int
    num_users: int
    embed_dim: int = 16
    p_max: int = 1023
    rel_range: int = 20

    def __post_init__(self):
        for name in ("num_items", "num_categories", "num_users", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.p_max < 0 or self.rel_range < 0:
            raise ValidationError("p_max and rel_range must be non-negative")

    @property
    def item_dim(self) -> int:
        """Width of an item embedding (item id + category)."""
        return 2 * self.embed_dim

    def x_dim(self, use_position: bool = True) -> int:
        """Width of the position-augmented item representation."""
        return self.item_dim + (self.embed_dim if use_position else 0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ItemRef:
    item_id: int
    category: int


@dataclass(frozen=True)
class PositionedItem:
    item: ItemRef
    abs_position: int


@dataclass(frozen=True)
class ClickContextBlock:
    """One click together with the display items shown around it."""

    click: PositionedItem
    displays: tuple[PositionedItem, ...]

    @property
    def rel_positions(self) -> tuple[int, ...]:
        p = self.click.abs_position
        return tuple(p - d.abs_position for d in self.displays)


@dataclass(frozen=True)
class Session:
    user_id: int
    blocks: tuple[ClickContextBlock, ...]
    target: ItemRef
    label: int
    session_id: int | None = field(default=None, compare=False)


def validate_session(s: Session, schema: FeatureSchema | None = None,
                     n_clicks: int | None = None, window: int | None = None) -> None:
    """Raise :class:`ValidationError` naming the first violated invariant."""
    sid = s.session_id if s.session_id is not None else "?"
    if not s.blocks:
        raise ValidationError(f"session {sid}: no click blocks")
    if n_clicks is not None and len(s.blocks) != n_clicks:
        raise ValidationError(f"session {sid}: expected {n_clicks} blocks, got {len(s.blocks)}")
    m = len(s.blocks[0].displays)
    if m == 0:
        raise ValidationError(f"session {sid}: empty display window")
    if window is not None and m != window:
        raise ValidationError(f"session {sid}: expected {window} displays per click, got {m}")
    if s.label not in (0, 1):
        raise ValidationError(f"session {sid}: label must be 0 or 1, got {s.label}")
    for i, b in enumerate(s.blocks):
        if len(b.displays) != m:
            raise ValidationError(f"session {sid}: block {i} has {len(b.displays)} displays, expected {m}")
    if schema is None:
        return
    items = [s.target] + [pi.item for b in s.blocks for pi in (b.click, *b.displays)]
    for it in items:
        if not 0 <= it.item_id < schema.num_items:
            raise ValidationError(f"session {sid}: item_id {it.item_id} outside vocabulary")
        if not 0 <= it.category < schema.num_categories:
            raise ValidationError(f"session {sid}: category {it.category} outside vocabulary")
    if not 0 <= s.user_id < schema.num_users:
        raise ValidationError(f"session {sid}: user_id {s.user_id} outside vocabulary")
    for i, b in enumerate(s.blocks):
        for pi in (b.click, *b.displays):
            if not 0 <= pi.abs_position <= schema.p_max:
                raise ValidationError(f"session {sid}: block {i} position {pi.abs_position} outside [0, {schema.p_max}]")
        for r in b.rel_positions:
            if abs(r) > schema.rel_range:
                raise ValidationError(f"session {sid}: block {i} relative position {r} exceeds range {schema.rel_range}")


@dataclass
class Behaviors:
    """Click blocks of one or more users, without any target item."""

    user: np.ndarray
    click_item: np.ndarray
    click_cat: np.ndarray
    click_pos: np.ndarray
    disp_item: np.ndarray
    disp_cat: np.ndarray
    disp_pos: np.ndarray

    def __len__(self) -> int:
        return len(self.user)

    @property
    def rel_pos(self) -> np.ndarray:
        return self.click_pos[:, :, None] - self.disp_pos

    def take(self, rows) -> "Behaviors":
        rows = np.atleast_1d(np.asarray(rows))
        return Behaviors(*(getattr(self, f.name)[rows] for f in fields(self)))

    @classmethod
    def from_blocks(cls, user_id: int, blocks: Sequence[ClickContextBlock]) -> "Behaviors":
        s = Session(user_id, tuple(blocks), ItemRef(0, 0), 0)
        return batch_from_sessions([s]).behaviors()


class SessionBatch:
    """Sessions stacked into integer arrays.

    Shapes: ``user`` (B,), ``click_*`` (B, N), ``disp_*`` (B, N, M),
    ``target_*`` (B,), ``label`` (B,).

    A batch may instead carry its distinct click blocks once, as
    ``blocks`` (a :class:`Behaviors` of shape (nb, 1, M)) plus
    ``block_index`` (B, N) into them. Models then compute per-block work
    once; the ``disp_*`` arrays are materialised only on access.
    """

    _fields = ("user", "click_item", "click_cat", "click_pos", "disp_item", "disp_cat",
               "disp_pos", "target_item", "target_cat", "label", "session_id")

    def __init__(self, user, click_item, click_cat, click_pos, disp_item=None, disp_cat=None,
                 disp_pos=None, target_item=None, target_cat=None, label=None, session_id=None,
                 block_index=None, blocks: Behaviors | None = None):
        self.user = np.asarray(user)
        self.click_item = np.asarray(click_item)
        self.click_cat = np.asarray(click_cat)
        self.click_pos = np.asarray(click_pos)
        if disp_item is None and blocks is None:
            raise ValidationError("batch needs display arrays or distinct blocks")
        self._disp = None if disp_item is None else (np.asarray(disp_item), np.asarray(disp_cat),
                                                     np.asarray(disp_pos))
        self.target_item = np.asarray(target_item)
        self.target_cat = np.asarray(target_cat)
        self.label = np.asarray(label)
        self.session_id = None if session_id is None else np.asarray(session_id)
        self.block_index = block_index
        self.blocks = blocks

    def _materialise(self):
        if self._disp is None:
            b, ix = self.blocks, self.block_index
            self._disp = (b.disp_item[:, 0][ix], b.disp_cat[:, 0][ix], b.disp_pos[:, 0][ix])
        return self._disp

    @property
    def disp_item(self) -> np.ndarray:
        return self._materialise()[0]

    @property
    def disp_cat(self) -> np.ndarray:
        return self._materialise()[1]

    @property
    def disp_pos(self) -> np.ndarray:
        return self._materialise()[2]

    def __len__(self) -> int:
        return len(self.user)

    @property
    def n_clicks(self) -> int:
        return self.click_item.shape[1]

    @property
    def window(self) -> int:
        return self.disp_item.shape[2] if self.blocks is None else self.blocks.disp_item.shape[2]

    @property
    def rel_pos(self) -> np.ndarray:
        return self.click_pos[:, :, None] - self.disp_pos

    def behaviors(self) -> Behaviors:
        return Behaviors(self.user, self.click_item, self.click_cat, self.click_pos,
                         self.disp_item, self.disp_cat, self.disp_pos)

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in self._fields}

    def take(self, rows) -> "SessionBatch":
        rows = np.asarray(rows)
        return SessionBatch(**{k: (None if v is None else v[rows]) for k, v in self.arrays().items()})

    def with_targets(self, target_item, target_cat) -> "SessionBatch":
        """Copy of the batch with the target columns replaced (blocks are shared)."""
        out = SessionBatch(self.user, self.click_item, self.click_cat, self.click_pos,
                           *(self._disp or (None, None, None)),
                           target_item=np.asarray(target_item), target_cat=np.asarray(target_cat),
                           label=self.label, session_id=self.session_id,
                           block_index=self.block_index, blocks=self.blocks)
        return out

    def validate(self, schema: FeatureSchema) -> None:
        checks = [
            ("user", self.user, schema.num_users),
            ("click item_id", self.click_item, schema.num_items),
            ("display item_id", self.disp_item, schema.num_items),
            ("target item_id", self.target_item, schema.num_items),
            ("click category", self.click_cat, schema.num_categories),
            ("display category", self.disp_cat, schema.num_categories),
            ("target category", self.target_cat, schema.num_categories),
            ("click position", self.click_pos, schema.p_max + 1),
            ("display position", self.disp_pos, schema.p_max + 1),
        ]
        for what, arr, hi in checks:
            if arr.size and (arr.min() < 0 or arr.max() >= hi):
                row = int(np.argwhere((arr < 0) | (arr >= hi))[0][0])
                raise ValidationError(f"session row {row}: {what} outside [0, {hi})")
        rel = np.abs(self.rel_pos)
        if rel.size and rel.max() > schema.rel_range:
            row = int(np.argwhere(rel > schema.rel_range)[0][0])
            raise ValidationError(f"session row {row}: relative position exceeds range {schema.rel_range}")
        if self.n_clicks < 1 or self.window < 1:
            raise ValidationError("batch needs N >= 1 clicks and M >= 1 displays")

    def sessions(self) -> list[Session]:
        out = []
        di, dc, dp = self.disp_item, self.disp_cat, self.disp_pos
        for b in range(len(self)):
            blocks = []
            for i in range(self.n_clicks):
                click = PositionedItem(ItemRef(int(self.click_item[b, i]), int(self.click_cat[b, i])),
                                       int(self.click_pos[b, i]))
                displays = tuple(
                    PositionedItem(ItemRef(int(di[b, i, j]), int(dc[b, i, j])), int(dp[b, i, j]))
                    for j in range(di.shape[2])
                )
                blocks.append(ClickContextBlock(click, displays))
            sid = None if self.session_id is None else int(self.session_id[b])
            out.append(Session(int(self.user[b]), tuple(blocks),
                               ItemRef(int(self.target_item[b]), int(self.target_cat[b])),
                               int(self.label[b]), sid))
        return out


def batch_from_sessions(sessions: Sequence[Session]) -> SessionBatch:
    if not sessions:
        raise ValidationError("cannot build a batch from zero sessions")
    n = len(sessions[0].blocks)
    m = len(sessions[0].blocks[0].displays)
    for s in sessions:
        validate_session(s, n_clicks=n, window=m)
    B = len(sessions)
    ci = np.empty((B, n), np.int64)
    cc = np.empty((B, n), np.int64)
    cp = np.empty((B, n), np.int64)
    di = np.empty((B, n, m), np.int64)
    dc = np.empty((B, n, m), np.int64)
    dp = np.empty((B, n, m), np.int64)
    for b, s in enumerate(sessions):
        for i, blk in enumerate(s.blocks):
            ci[b, i] = blk.click.item.item_id
            cc[b, i] = blk.click.item.category
            cp[b, i] = blk.click.abs_position
            di[b, i] = [d.item.item_id for d in blk.displays]
            dc[b, i] = [d.item.category for d in blk.displays]
            dp[b, i] = [d.abs_position for d in blk.displays]
    sid = [s.session_id for s in sessions]
    return SessionBatch(
        user=np.array([s.user_id for s in sessions], np.int64),
        click_item=ci, click_cat=cc, click_pos=cp,
        disp_item=di, disp_cat=dc, disp_pos=dp,
        target_item=np.array([s.target.item_id for s in sessions], np.int64),
        target_cat=np.array([s.target.category for s in sessions], np.int64),
        label=np.array([s.label for s in sessions], np.int64),
        session_id=None if any(x is None for x in sid) else np.array(sid, np.int64),
    )


def concat_batches(batches: Iterable[SessionBatch]) -> SessionBatch:
    batches = list(batches)
    kw = {}
    for k in SessionBatch._fields:
        vals = [getattr(b, k) for b in batches]
        kw[k] = None if any(v is None for v in vals) else np.concatenate(vals)
    return SessionBatch(**kw)
