"""Embedding tables for item ids, categories, users, and positions."""

from __future__ import annotations

import zlib

import numpy as np

from . import core as F
from .core import Tensor
from .schema import FeatureSchema, ItemRef, PositionedItem

INIT_SCALE = 0.05


class EmbeddingLookupError(IndexError):
    def __init__(self, field: str, index: int, size: int):
        super().__init__(f"{field} index {index} outside vocabulary of size {size}")
        self.field = field
        self.index = index


def table_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per (model seed, parameter name)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def uniform_table(seed: int, name: str, rows: int, cols: int, scale: float = INIT_SCALE) -> Tensor:
    data = table_rng(seed, name).uniform(-scale, scale, size=(rows, cols))
    return Tensor(data, requires_grad=True, name=name)


class EmbeddingTables:
    """All lookup tables of one model.

    The relative-position table is one column wide: each offset maps to a
    scalar bias. It starts at zero.
    """

    def __init__(self, schema: FeatureSchema, seed: int = 0, prefix: str = "emb"):
        d = schema.embed_dim
        self.schema = schema
        self.item = uniform_table(seed, f"{prefix}.item", schema.num_items, d)
        self.category = uniform_table(seed, f"{prefix}.category", schema.num_categories, d)
        self.position = uniform_table(seed, f"{prefix}.position", schema.p_max + 1, d)
        self.relpos = Tensor(np.zeros((2 * schema.rel_range + 1, 1)), requires_grad=True,
                             name=f"{prefix}.relpos")
        self.user = uniform_table(seed, f"{prefix}.user", schema.num_users, d)

    def tensors(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.item, self.category, self.position, self.relpos, self.user)}

    def _check(self, field: str, idx, size: int) -> np.ndarray:
        idx = np.asarray(idx)
        if idx.size:
            bad = (idx < 0) | (idx >= size)
            if bad.any():
                raise EmbeddingLookupError(field, int(idx[bad].flat[0]), size)
        return idx

    def lookup_item(self, item_ids, categories) -> Tensor:
        """Item-id embedding concatenated with category embedding."""
        s = self.schema
        ids = self._check("item_id", item_ids, s.num_items)
        cats = self._check("category", categories, s.num_categories)
        return F.concat([F.gather(self.item, ids), F.gather(self.category, cats)], axis=-1)

    def lookup_position(self, positions) -> Tensor:
        pos = self._check("abs_position", positions, self.schema.p_max + 1)
        return F.gather(self.position, pos)

    def lookup_x(self, item_ids, categories, positions, use_position: bool = True) -> Tensor:
        e = self.lookup_item(item_ids, categories)
        if not use_position:
            return e
        return F.concat([e, self.lookup_position(positions)], axis=-1)

    def lookup_rel(self, offsets) -> Tensor:
        R = self.schema.rel_range
        r = np.asarray(offsets)
        if r.size and np.abs(r).max() > R:
            bad = int(r[np.abs(r) > R].flat[0])
            raise EmbeddingLookupError("rel_position", bad, 2 * R + 1)
        return F.reshape(F.gather(self.relpos, r + R), r.shape)

    def lookup_user(self, users) -> Tensor:
        u = self._check("user_id", users, self.schema.num_users)
        return F.gather(self.user, u)


def embed_item(tables: EmbeddingTables, item: ItemRef) -> Tensor:
    return tables.lookup_item(item.item_id, item.category)


def build_x(tables: EmbeddingTables, pi: PositionedItem, use_position: bool = True) -> Tensor:
    return tables.lookup_x(pi.item.item_id, pi.item.category, pi.abs_position, use_position)


def embed_rel_position(tables: EmbeddingTables, r: int) -> Tensor:
    return tables.lookup_rel(r)
