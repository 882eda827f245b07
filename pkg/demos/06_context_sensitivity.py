# %% [markdown]
# Does a trained DCIN read the display window? Hold one click fixed, swap the
# window around it, and watch two things: the click's interest vector, and
# how much weight interest matching gives that click for a related target.
# DIN never reads the window, so its click vector cannot move at all.

# %%
from dataclasses import replace

import numpy as np

from dcin.data import SyntheticConfig, generate_dataset
from dcin.schema import Behaviors, ClickContextBlock, ItemRef, PositionedItem, Session, batch_from_sessions
from dcin.training import DESK_LR, TrainConfig, train

split = generate_dataset(SyntheticConfig(num_users=600, seed=0))
cfg = TrainConfig(lr=DESK_LR, epochs=2, seed=1)
dcin, _ = train(replace(cfg, model="dcin"), split.train)
din, _ = train(replace(cfg, model="din"), split.train)

# %%
st = split.train
cat_of = np.full(st.schema.num_items, -1)
cat_of[st.block_disp_item.ravel()] = st.block_disp_cat.ravel()
cat_of[st.block_click[:, 0]] = st.block_click[:, 1]
rng = np.random.default_rng(0)

session = split.test.batch([0]).sessions()[0]
last = session.blocks[-1]
slots = [d.abs_position for d in last.displays]


def window(items):
    return tuple(PositionedItem(ItemRef(int(i), int(cat_of[i])), p) for i, p in zip(items, slots))


# %%
# the same click under 50 random windows; one user whose clicks are the copies
blocks = [ClickContextBlock(last.click, window(rng.choice(len(cat_of), len(slots), replace=False)))
          for _ in range(50)]
beh = Behaviors.from_blocks(0, blocks)
I_dcin = dcin.interests(beh)[0].data[0]
I_din = din.interests(beh).data[0]
for name, I in (("dcin", I_dcin), ("din", I_din)):
    d = np.sqrt(((I[:, None] - I[None]) ** 2).sum(-1))
    print(f"{name}: mean pairwise distance {d.sum() / (50 * 49):.2e}, vector norm {np.linalg.norm(I, axis=1).mean():.3f}")

# %%
# same-category window vs unrelated window, target from the click's category
c = last.click.item.category
same_pool = np.flatnonzero(cat_of == c)
other_pool = np.flatnonzero((cat_of != c) & (cat_of >= 0))
target = ItemRef(int(rng.choice(same_pool)), c)
for label, pool in (("same-category", same_pool), ("unrelated", other_pool)):
    s = Session(session.user_id, (*session.blocks[:-1], ClickContextBlock(last.click, window(rng.choice(pool, len(slots))))),
                target, 0)
    ex = dcin.explain(batch_from_sessions([s]))
    print(f"{label:14s} window: IMM weight of the click {ex['imm_weights'][0, -1]:.6f} "
          f"(uniform would be {1 / len(s.blocks):.6f}), score {ex['score'][0]:.4f}")

# %% [markdown]
# At desk scale the window moves the interest vector but interest matching
# stays close to uniform over the 50 clicks, so the weight barely changes with
# the window. The acceptance suite measures this over 100 sessions.
