# %% [markdown]
# Interests do not depend on the candidate, so they can be computed once per
# user and reused. Scoring K candidates then costs only the matching step and
# the head.

# %%
import numpy as np

from dcin.data import SyntheticConfig
from dcin.model import DCIN
from dcin.serving import bench_latency, full_path_scores, path_flops, precompute_interests, random_behaviors, score_candidates
from dcin.training import Checkpoint

schema = SyntheticConfig().schema()
ckpt = Checkpoint(DCIN(schema, seed=0))
user = random_behaviors(schema, 1, n_clicks=50, window=20, seed=0)

# %%
rng = np.random.default_rng(0)
items, cats = rng.integers(0, schema.num_items, 100), rng.integers(0, schema.num_categories, 100)
cache = precompute_interests(ckpt, user)
cached = score_candidates(ckpt, cache, items, cats)
full = full_path_scores(ckpt, user, items, cats)
print("cache", cache.interests.shape, "max |cached - full|", np.abs(cached - full).max())

# %%
# arithmetic per candidate: the cached path does not see M at all
for m in (5, 10, 20):
    f = path_flops(ckpt, random_behaviors(schema, 1, 50, m), items, cats)
    print(f"M={m:2d}  full/cand {f['full_per_candidate']:>10.0f}  cached/cand {f['cached_per_candidate']:>8.0f}")

# %%
users = [random_behaviors(schema, 1, 50, 20, seed=s) for s in range(5)]
rep = bench_latency(ckpt, users, k=100, repetitions=50, warmup=5)
print(f"p50 full {rep.full_ms['p50']:.2f} ms, cached {rep.cached_ms['p50']:.2f} ms, {rep.speedup:.1f}x")
