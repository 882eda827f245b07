import numpy as np

from dcin.schema import ClickContextBlock, FeatureSchema, ItemRef, PositionedItem, Session


def toy_schema(embed_dim=4, rel_range=6, p_max=31, **kw) -> FeatureSchema:
    vocab = {"num_items": 9, "num_categories": 4, "num_users": 3}
    vocab.update(kw)
    return FeatureSchema(embed_dim=embed_dim, rel_range=rel_range, p_max=p_max, **vocab)


def random_block(rng, schema: FeatureSchema, M: int, page: int | None = None) -> ClickContextBlock:
    """A click at a random slot of a page, with the M-slot window around it."""
    page = page or max(2 * M, M + 1)
    page = min(page, schema.p_max + 1)
    click_slot = int(rng.integers(0, page))
    start = int(np.clip(click_slot - (M - 1) // 2, 0, page - M))
    displays = []
    for q in range(start, start + M):
        it = ItemRef(int(rng.integers(schema.num_items)), int(rng.integers(schema.num_categories)))
        displays.append(PositionedItem(it, q))
    click = displays[click_slot - start]
    return ClickContextBlock(click, tuple(displays))


def random_session(rng, schema: FeatureSchema, N: int, M: int, session_id=None) -> Session:
    blocks = tuple(random_block(rng, schema, M) for _ in range(N))
    target = ItemRef(int(rng.integers(schema.num_items)), int(rng.integers(schema.num_categories)))
    return Session(int(rng.integers(schema.num_users)), blocks, target, int(rng.integers(2)), session_id)


def randomize_params(model, rng, scale=0.5):
    """Move every parameter away from its init, relative-position table included."""
    for t in model.params.values():
        t.data = rng.normal(0.0, scale, size=t.shape)
    return model
