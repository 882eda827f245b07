"""DCIN forward graph: context aggregation, fusion, interest matching, head.

Batched methods take integer arrays with leading (B, N[, M]) axes and return
:class:`~dcin.core.Tensor` values, so the same code serves training (under a
tape) and inference. The module-level functions at the bottom operate on
single records and wrap the batched path.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import core as F
from .core import ContractError, DimensionError, Tensor
from .embedding import EmbeddingTables, table_rng
from .schema import (Behaviors, ClickContextBlock, FeatureSchema, ItemRef,
                     Session, SessionBatch, batch_from_sessions, validate_session)

NLL_EPS = 1e-12


@dataclass(frozen=True)
class AblationFlags:
    use_position: bool = True
    use_fcfm: bool = True


@dataclass(frozen=True)
class ModelDims:
    att_dim: int = 16
    fcfm_hidden: tuple[int, ...] = (64, 16)
    head_hidden: tuple[int, ...] = (1024, 512, 128)

    @property
    def interest_dim(self) -> int:
        return self.fcfm_hidden[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDims":
        return cls(d["att_dim"], tuple(d["fcfm_hidden"]), tuple(d["head_hidden"]))


def dense(seed: int, name: str, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = table_rng(seed, name).uniform(-limit, limit, size=(fan_in, fan_out))
    return Tensor(w, requires_grad=True, name=name)


def zeros(name: str, *shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class CtrModel:
    """Shared pieces: embedding tables, target projection, prediction head."""

    kind = "abstract"

    def __init__(self, schema: FeatureSchema, dims: ModelDims = ModelDims(),
                 flags: AblationFlags = AblationFlags(), seed: int = 0):
        self.schema = schema
        self.dims = dims
        self.flags = flags
        self.seed = seed
        self.tables = EmbeddingTables(schema, seed)
        self.params: dict[str, Tensor] = dict(self.tables.tensors())
        self._add(dense(seed, "target.W_T", schema.item_dim, dims.interest_dim))
        self._head_layers: list[tuple[Tensor, Tensor]] = []

    def _add(self, t: Tensor) -> Tensor:
        self.params[t.name] = t
        return t

    def _build_head(self, in_dim: int) -> None:
        sizes = [in_dim, *self.dims.head_hidden, 1]
        for k in range(len(sizes) - 1):
            W = self._add(dense(self.seed, f"head.W{k}", sizes[k], sizes[k + 1]))
            b = self._add(zeros(f"head.b{k}", sizes[k + 1]))
            self._head_layers.append((W, b))

    def head_logit(self, features: Tensor) -> Tensor:
        h = features
        last = len(self._head_layers) - 1
        for k, (W, b) in enumerate(self._head_layers):
            h = F.linear(h, W, b)
            if k < last:
                h = F.relu(h)
        return F.reshape(h, h.shape[:-1])

    def target_embedding(self, target_item, target_cat) -> Tensor:
        return F.linear(self.tables.lookup_item(target_item, target_cat), self.params["target.W_T"])

    def click_x(self, beh: Behaviors) -> Tensor:
        return self.tables.lookup_x(beh.click_item, beh.click_cat, beh.click_pos,
                                    self.flags.use_position)

    def forward(self, batch: SessionBatch) -> Tensor:
        raise NotImplementedError

    def predict_batch(self, batch: SessionBatch) -> np.ndarray:
        return self.forward(batch).data

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "schema": self.schema.to_dict(),
            "dims": self.dims.to_dict(),
            "flags": asdict(self.flags),
            "seed": self.seed,
        }


def imm_weights(interests: Tensor, e_t: Tensor) -> Tensor:
    """Softmax over clicks of the target-interest dot products."""
    if interests.shape[-2] == 0:
        raise ContractError("interest matching needs at least one interest")
    return F.softmax(F.matvec(interests, e_t), axis=-1)


def imm_aggregate(interests: Tensor, e_t: Tensor) -> tuple[Tensor, Tensor]:
    w = imm_weights(interests, e_t)
    return F.weighted_sum(w, interests), w


class DCIN(CtrModel):
    kind = "dcin"

    def __init__(self, schema: FeatureSchema, dims: ModelDims = ModelDims(),
                 flags: AblationFlags = AblationFlags(), seed: int = 0):
        super().__init__(schema, dims, flags, seed)
        dx = schema.x_dim(flags.use_position)
        self.x_dim = dx
        self._add(dense(seed, "pcam.W_Q", dx, dims.att_dim))
        self._add(dense(seed, "pcam.W_K", dx, dims.att_dim))
        self._add(dense(seed, "pcam.W_V", dx, dx))
        if flags.use_fcfm:
            sizes = [4 * dx, *dims.fcfm_hidden]
            for k in range(len(sizes) - 1):
                self._add(dense(seed, f"fcfm.W{k}", sizes[k], sizes[k + 1]))
                self._add(zeros(f"fcfm.b{k}", sizes[k + 1]))
        else:
            self._add(dense(seed, "nofcfm.P", dx, dims.interest_dim))
        self._build_head(2 * dims.interest_dim + schema.embed_dim)

    # -- PCAM -----------------------------------------------------------

    def _display_fields(self, beh: Behaviors) -> list[Tensor]:
        t = self.tables
        fields = [F.gather(t.item, beh.disp_item), F.gather(t.category, beh.disp_cat)]
        if self.flags.use_position:
            fields.append(t.lookup_position(beh.disp_pos))
        return fields

    def pcam(self, beh: Behaviors, x_c: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Relevance scores, attention weights, and context vectors.

        W_K and W_V are linear, so they are applied to the click-side query
        and to the attention-pooled display vector rather than to each of the
        M display items. Per-field display embeddings are never concatenated
        into one (B, N, M, d_x) array.
        """
        p = self.params
        d = self.schema.embed_dim
        fields = self._display_fields(beh)
        q = F.linear(x_c, p["pcam.W_Q"])
        u = F.linear(q, F.transpose(p["pcam.W_K"]))
        u_parts = F.split(u, [d] * len(fields))
        alpha = None
        for e, uf in zip(fields, u_parts):
            s = F.matvec(e, uf)
            alpha = s if alpha is None else F.add(alpha, s)
        if self.flags.use_position:
            alpha = F.add(alpha, self.tables.lookup_rel(beh.rel_pos))
        mu = F.softmax(alpha, axis=-1)
        pooled = F.concat([F.weighted_sum(mu, e) for e in fields], axis=-1)
        v = F.linear(pooled, p["pcam.W_V"])
        return alpha, mu, v

    # -- FCFM -----------------------------------------------------------

    def fcfm(self, x_c: Tensor, v: Tensor) -> Tensor:
        if x_c.shape != v.shape:
            raise DimensionError(f"fusion inputs differ in shape: {x_c.shape} vs {v.shape}")
        p = self.params
        if not self.flags.use_fcfm:
            return F.linear(v, p["nofcfm.P"])
        h = F.concat([x_c, v, F.sub(x_c, v), F.mul(x_c, v)], axis=-1)
        for k in range(len(self.dims.fcfm_hidden)):
            h = F.relu(F.linear(h, p[f"fcfm.W{k}"], p[f"fcfm.b{k}"]))
        return h

    # -- full graph -----------------------------------------------------

    def interests(self, beh: Behaviors) -> tuple[Tensor, Tensor]:
        """Context-aware interests (B, N, d_I) and PCAM weights (B, N, M).

        Takes no target: everything here can be computed ahead of scoring.
        """
        if beh.disp_item.shape[-1] == 0:
            raise ContractError("display window is empty")
        x_c = self.click_x(beh)
        _, mu, v = self.pcam(beh, x_c)
        return self.fcfm(x_c, v), mu

    def score_interests(self, interests: Tensor, user, target_item, target_cat,
                        return_weights: bool = False):
        e_t = self.target_embedding(target_item, target_cat)
        U, w = imm_aggregate(interests, e_t)
        feats = F.concat([U, e_t, self.tables.lookup_user(user)], axis=-1)
        p = F.sigmoid(self.head_logit(feats))
        return (p, w) if return_weights else p

    def batch_interests(self, batch: SessionBatch) -> tuple[Tensor, Tensor]:
        """Interests of every (session, click), computed once per distinct block."""
        if batch.blocks is None:
            return self.interests(batch.behaviors())
        I, mu = self.interests(batch.blocks)
        nb = I.shape[0]
        I = F.gather(F.reshape(I, (nb, I.shape[-1])), batch.block_index)
        mu = mu.data[:, 0][batch.block_index]
        return I, F.Tensor(mu)

    def forward(self, batch: SessionBatch) -> Tensor:
        I, _ = self.batch_interests(batch)
        return self.score_interests(I, batch.user, batch.target_item, batch.target_cat)

    def explain(self, batch: SessionBatch) -> dict[str, np.ndarray]:
        """Interests, PCAM weights, IMM weights, and scores for inspection."""
        I, mu = self.batch_interests(batch)
        p, w = self.score_interests(I, batch.user, batch.target_item, batch.target_cat,
                                    return_weights=True)
        return {"interests": I.data, "pcam_weights": mu.data, "imm_weights": w.data, "score": p.data}


def nll_loss(p, y) -> Tensor:
    """Mean negative log-likelihood of binary labels; log arguments clamped."""
    p = F.as_tensor(p)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.shape:
        raise DimensionError(f"labels shape {y.shape} does not match predictions {p.shape}")
    pos = F.log(F.clip(p, NLL_EPS, 1.0))
    neg = F.log(F.clip(F.sub(1.0, p), NLL_EPS, 1.0))
    ll = F.add(F.mul(pos, y), F.mul(neg, 1.0 - y))
    return F.mul(F.mean(ll), -1.0)


# -- single-record wrappers ----------------------------------------------


def _one_block(block: ClickContextBlock) -> Behaviors:
    return Behaviors.from_blocks(0, [block])


def pcam_scores(model: DCIN, block: ClickContextBlock) -> np.ndarray:
    """Relevance scores of the M display items of one click."""
    beh = _one_block(block)
    alpha, _, _ = model.pcam(beh, model.click_x(beh))
    return alpha.data[0, 0]


def pcam_aggregate(model: DCIN, block: ClickContextBlock) -> np.ndarray:
    """Context vector of one click."""
    if not block.displays:
        raise ContractError("display window is empty")
    beh = _one_block(block)
    _, _, v = model.pcam(beh, model.click_x(beh))
    return v.data[0, 0]


def fcfm_fuse(model: DCIN, x_c, v) -> np.ndarray:
    x_c, v = F.as_tensor(x_c), F.as_tensor(v)
    if x_c.ndim != 1 or x_c.shape[0] != model.x_dim:
        raise DimensionError(f"click vector shape {x_c.shape}, expected ({model.x_dim},)")
    return model.fcfm(x_c, v).data


def imm_match(interests, e_t) -> tuple[np.ndarray, np.ndarray]:
    """Target-weighted user representation and the per-interest weights."""
    interests = F.as_tensor(np.atleast_2d(np.asarray(interests, dtype=np.float64)))
    if interests.shape[0] == 0:
        raise ContractError("interest matching needs at least one interest")
    U, w = imm_aggregate(interests, F.as_tensor(e_t))
    return U.data, w.data


def predict(model: CtrModel, session: Session) -> float:
    validate_session(session, model.schema)
    return float(model.predict_batch(batch_from_sessions([session]))[0])


def session_interests(model: DCIN, session: Session) -> np.ndarray:
    beh = Behaviors.from_blocks(session.user_id, session.blocks)
    return model.interests(beh)[0].data[0]


def target_vector(model: CtrModel, item: ItemRef) -> np.ndarray:
    return model.target_embedding(item.item_id, item.category).data
