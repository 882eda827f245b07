import numpy as np
import pytest

from dcin.baselines import build_model
from dcin.model import ModelDims
from dcin.core import ContractError
from dcin.schema import (ClickContextBlock, FeatureSchema, ItemRef, PositionedItem,
                         ValidationError)
from dcin.serving import (EQUIVALENCE_TOL, StaleCacheError, bench_latency, full_path_scores, path_flops,
                          precompute_interests, random_behaviors, read_cache, score_candidates,
                          score_with_cache, write_cache)
from dcin.training import Checkpoint, KindError

from .helpers import randomize_params

SCHEMA = FeatureSchema(num_items=50, num_categories=7, num_users=5, embed_dim=4, rel_range=8, p_max=31)
DIMS = ModelDims(att_dim=4, fcfm_hidden=(8, 4), head_hidden=(16, 8))


@pytest.fixture
def ckpt():
    model = randomize_params(build_model("dcin", SCHEMA, DIMS, seed=3), np.random.default_rng(0), 0.3)
    return Checkpoint(model)


def one_user(n=6, m=4, seed=0):
    return random_behaviors(SCHEMA, 1, n_clicks=n, window=m, seed=seed)


def test_random_behaviors_are_well_formed():
    beh = random_behaviors(SCHEMA, 3, n_clicks=5, window=6, seed=1)
    assert beh.disp_item.shape == (3, 5, 6)
    at = beh.click_pos[..., None] == beh.disp_pos
    assert np.all(at.sum(-1) == 1)
    assert np.array_equal(beh.disp_item[at].reshape(3, 5), beh.click_item)
    assert np.abs(beh.rel_pos).max() <= SCHEMA.rel_range


def test_random_behaviors_window_too_wide():
    with pytest.raises(ValidationError):
        random_behaviors(SCHEMA, 1, window=SCHEMA.rel_range + 1)


@pytest.mark.parametrize("seed", range(5))
def test_cached_scores_match_full_forward(ckpt, seed):
    rng = np.random.default_rng(seed)
    beh = one_user(seed=seed)
    items, cats = rng.integers(0, 50, 30), rng.integers(0, 7, 30)
    cache = precompute_interests(ckpt, beh)
    a = score_candidates(ckpt, cache, items, cats)
    b = full_path_scores(ckpt, beh, items, cats)
    assert np.abs(a - b).max() <= EQUIVALENCE_TOL


def test_single_target_helper(ckpt):
    beh = one_user()
    cache = precompute_interests(ckpt, beh)
    p = score_with_cache(ckpt, cache, ItemRef(4, 2))
    assert abs(p - full_path_scores(ckpt, beh, [4], [2])[0]) <= EQUIVALENCE_TOL


def test_cache_from_block_list(ckpt):
    beh = one_user()
    blocks = [ClickContextBlock(PositionedItem(ItemRef(int(beh.click_item[0, j]), int(beh.click_cat[0, j])),
                                               int(beh.click_pos[0, j])),
                                tuple(PositionedItem(ItemRef(int(i), int(c)), int(p)) for i, c, p in
                                      zip(beh.disp_item[0, j], beh.disp_cat[0, j], beh.disp_pos[0, j])))
              for j in range(beh.click_item.shape[1])]
    a = precompute_interests(ckpt, blocks, user_id=int(beh.user[0])).interests
    assert np.array_equal(a, precompute_interests(ckpt, beh).interests)


def test_cache_is_read_only(ckpt):
    cache = precompute_interests(ckpt, one_user())
    with pytest.raises(ValueError):
        cache.interests[0, 0] = 1.0


def test_stale_cache_rejected(ckpt):
    cache = precompute_interests(ckpt, one_user())
    p = ckpt.model.params["head.W0"]
    p.data = p.data + 1e-3
    with pytest.raises(StaleCacheError):
        score_candidates(ckpt, cache, [1], [1])


def test_cache_file_round_trip(tmp_path, ckpt):
    cache = precompute_interests(ckpt, one_user())
    write_cache(cache, tmp_path / "c.json")
    back = read_cache(tmp_path / "c.json")
    assert back.user_id == cache.user_id and back.digest == cache.digest
    assert np.array_equal(back.interests, cache.interests)


def test_bad_cache_file(tmp_path):
    (tmp_path / "c.json").write_text("nope\n")
    with pytest.raises(ValidationError):
        read_cache(tmp_path / "c.json")


def test_rejects_non_dcin():
    din = Checkpoint(build_model("din", SCHEMA, DIMS))
    with pytest.raises(KindError):
        precompute_interests(din, one_user())


def test_rejects_behaviors_outside_schema(ckpt):
    beh = one_user()
    beh.disp_item[0, 0, 0] = SCHEMA.num_items
    with pytest.raises(ValidationError, match="display item_id"):
        precompute_interests(ckpt, beh)


def test_needs_one_user_and_candidates(ckpt):
    with pytest.raises(ValidationError):
        precompute_interests(ckpt, random_behaviors(SCHEMA, 2, 3, 4))
    cache = precompute_interests(ckpt, one_user())
    with pytest.raises(ContractError):
        score_candidates(ckpt, cache, [], [])


def test_cached_cost_per_candidate_does_not_grow_with_window(ckpt):
    rng = np.random.default_rng(0)
    items, cats = rng.integers(0, 50, 20), rng.integers(0, 7, 20)
    costs = {m: path_flops(ckpt, one_user(n=6, m=m), items, cats) for m in (2, 4, 8)}
    assert costs[2]["cached"] == costs[4]["cached"] == costs[8]["cached"]
    full = [costs[m]["full"] for m in (2, 4, 8)]
    # full path is affine in M: equal increments for equal steps
    assert full[0] < full[1] < full[2]
    assert full[2] - full[1] == 2 * (full[1] - full[0])
    assert costs[8]["precompute"] > costs[2]["precompute"]


def test_bench_reports_percentiles(ckpt):
    users = [one_user(seed=s) for s in range(2)]
    rep = bench_latency(ckpt, users, k=10, repetitions=5, warmup=1, verify=True)
    assert set(rep.full_ms) == {"p50", "p95", "p99", "mean"}
    assert rep.max_abs_diff <= EQUIVALENCE_TOL
    assert rep.speedup > 0 and (rep.n_clicks, rep.window) == (6, 4)
    assert [r["path"] for r in rep.rows()] == ["full", "cached"]


def test_bench_contract(ckpt):
    with pytest.raises(ContractError):
        bench_latency(ckpt, [one_user()], k=0)
    with pytest.raises(ContractError):
        bench_latency(ckpt, [], k=5)
