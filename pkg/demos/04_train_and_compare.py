# %% [markdown]
# Train the base model, DIN and DCIN on the same data and compare test AUC.
# RelaImpr is measured against the base model. This is a quick, small run;
# the acceptance suite uses the full default corpus and five seeds.

# %%
from dataclasses import replace

from dcin.data import SyntheticConfig, generate_dataset
from dcin.training import DESK_LR, TrainConfig, rela_impr, train

split = generate_dataset(SyntheticConfig(num_users=200, sessions_per_page=8, seed=0))
cfg = TrainConfig(lr=DESK_LR, epochs=2, seed=1)

# %%
results = {}
for kind in ("base", "din", "dcin"):
    model, history = train(replace(cfg, model=kind), split.train, split.test)
    results[kind] = history[-1]["test_auc"]
    print(kind, [round(h["test_auc"], 4) for h in history], f"{sum(h['seconds'] for h in history):.0f}s")

# %%
for kind, a in results.items():
    print(f"{kind:5s} auc {a:.4f}  RelaImpr {rela_impr(a, results['base']):6.2f}%")
