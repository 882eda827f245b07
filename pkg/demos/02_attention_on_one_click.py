# %% [markdown]
# One click and the 20 items shown around it. PCAM scores every display item
# against the click, pools them into a context vector, and FCFM fuses click
# and context into an interest vector.

# %%
import numpy as np

from dcin.model import DCIN, fcfm_fuse, pcam_aggregate, pcam_scores
from dcin.schema import ClickContextBlock, FeatureSchema, ItemRef, PositionedItem

schema = FeatureSchema(num_items=100, num_categories=10, num_users=1)
model = DCIN(schema, seed=0)
rng = np.random.default_rng(1)

# %%
# a page slot 25..44 with the click at slot 34 (window index 9)
shown = [PositionedItem(ItemRef(int(rng.integers(100)), int(rng.integers(10))), q) for q in range(25, 45)]
block = ClickContextBlock(shown[9], tuple(shown))
print("relative positions:", block.rel_positions)

# %%
alpha = pcam_scores(model, block)
mu = np.exp(alpha - alpha.max())
mu /= mu.sum()
print("attention weights sum to", mu.sum())
print("heaviest display slots:", np.argsort(mu)[::-1][:5])

# %%
v = pcam_aggregate(model, block)
from dcin.embedding import build_x  # noqa: E402

x_c = build_x(model.tables, block.click).data
I = fcfm_fuse(model, x_c, v)
print("x_c", x_c.shape, "v", v.shape, "interest", I.shape)

# %%
# same click, different neighbours: the interest moves
other = [PositionedItem(ItemRef(int(rng.integers(100)), int(rng.integers(10))), d.abs_position) for d in shown]
other[9] = shown[9]
I2 = fcfm_fuse(model, x_c, pcam_aggregate(model, ClickContextBlock(shown[9], tuple(other))))
print("distance between the two interests:", np.linalg.norm(I - I2))
