"""Comparison models: click-only target attention (DIN) and a pooled base model."""

from __future__ import annotations

import numpy as np

from . import core as F
from .core import Tensor
from .model import AblationFlags, CtrModel, DCIN, ModelDims, dense, imm_aggregate
from .schema import Behaviors, FeatureSchema, SessionBatch


class DIN(CtrModel):
    """Target attention over click representations; display items are never read."""

    kind = "din"

    def __init__(self, schema: FeatureSchema, dims: ModelDims = ModelDims(),
                 flags: AblationFlags = AblationFlags(), seed: int = 0):
        super().__init__(schema, dims, flags, seed)
        self._add(dense(seed, "din.W_I", schema.x_dim(flags.use_position), dims.interest_dim))
        self._build_head(2 * dims.interest_dim + schema.embed_dim)

    def interests(self, beh: Behaviors) -> Tensor:
        return F.linear(self.click_x(beh), self.params["din.W_I"])

    def score_interests(self, interests: Tensor, user, target_item, target_cat,
                        return_weights: bool = False):
        e_t = self.target_embedding(target_item, target_cat)
        U, w = imm_aggregate(interests, e_t)
        feats = F.concat([U, e_t, self.tables.lookup_user(user)], axis=-1)
        p = F.sigmoid(self.head_logit(feats))
        return (p, w) if return_weights else p

    def forward(self, batch: SessionBatch) -> Tensor:
        return self.score_interests(self.interests(batch.behaviors()), batch.user,
                                    batch.target_item, batch.target_cat)

    def explain(self, batch: SessionBatch) -> dict[str, np.ndarray]:
        I = self.interests(batch.behaviors())
        p, w = self.score_interests(I, batch.user, batch.target_item, batch.target_cat,
                                    return_weights=True)
        return {"interests": I.data, "imm_weights": w.data, "score": p.data}


class BaseModel(CtrModel):
    """Mean of click item embeddings, target, and user into the MLP head."""

    kind = "base"

    def __init__(self, schema: FeatureSchema, dims: ModelDims = ModelDims(),
                 flags: AblationFlags = AblationFlags(), seed: int = 0):
        super().__init__(schema, dims, flags, seed)
        self._build_head(schema.item_dim + dims.interest_dim + schema.embed_dim)

    def forward(self, batch: SessionBatch) -> Tensor:
        clicks = self.tables.lookup_item(batch.click_item, batch.click_cat)
        pooled = F.mean(clicks, axis=1)
        e_t = self.target_embedding(batch.target_item, batch.target_cat)
        feats = F.concat([pooled, e_t, self.tables.lookup_user(batch.user)], axis=-1)
        return F.sigmoid(self.head_logit(feats))


MODEL_KINDS = {"dcin": DCIN, "din": DIN, "base": BaseModel}


def din_forward(model: DIN, batch: SessionBatch) -> np.ndarray:
    return model.predict_batch(batch)


def base_forward(model: BaseModel, batch: SessionBatch) -> np.ndarray:
    return model.predict_batch(batch)


def build_model(kind: str, schema: FeatureSchema, dims: ModelDims = ModelDims(),
                flags: AblationFlags = AblationFlags(), seed: int = 0) -> CtrModel:
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}") from None
    return cls(schema, dims, flags, seed)
