# %% [markdown]
# The synthetic log. Users browse pages; a click depends on the item's
# category, its rank, and how attractive the rest of the page is. The
# generator also keeps the true click probability for every target, so the
# best achievable AUC is known.

# %%
import numpy as np

from dcin.data import SyntheticConfig, generate_dataset
from dcin.training import auc

cfg = SyntheticConfig(num_users=300, seed=0)
split = generate_dataset(cfg)
print(split.manifest["counts"])

# %%
test = split.test
print("positive rate", test.label.mean())
print("oracle AUC with page context   ", auc(test.extras["true_ctr"], test.label))
print("oracle AUC ignoring the context", auc(test.extras["ctr_without_context"], test.label))

# %%
# one session: 50 click blocks of 20 display items each
b = test.batch(np.arange(1))
print("clicks", b.click_item.shape, "displays", b.disp_item.shape)
print("click slots of the last 5 blocks", b.click_pos[0, -5:])
print("window starts", b.disp_pos[0, -5:, 0])

# %%
# files round-trip; gzip keeps them small
import tempfile  # noqa: E402

from dcin.data import load_store  # noqa: E402

with tempfile.TemporaryDirectory() as d:
    s = generate_dataset(SyntheticConfig(num_users=30, seed=0), d, compress=True)
    back = load_store(s.test_path, s.test.schema)
    print("sessions read back:", len(back), "labels equal:", np.array_equal(back.label, s.test.label))
