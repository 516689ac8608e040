import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgmoe.cleans import clean_image
from mgmoe.cluster import ClusterConfig, build_tree
from mgmoe.experts import (MIN_MEMBERS, ExpertConfig, ExpertModel, ExpertRegistry, apply_expert,
                           fit_expert, is_val_id, split_val, train_registry)
from mgmoe.imagecore import psnr
from mgmoe.tinynn import ConvNet

FAST = ExpertConfig(steps=300, child_steps=100, lr=3e-3, batch=4, patch=16, eval_every=50,
                    channels=[3, 8, 3])


def crops(n, size=24, seed=0):
    return [clean_image(seed + i, size=size) for i in range(n)]


def test_identity_at_initialization():
    net = ConvNet((3, 16, 16, 3), seed=0, zero_last=True)
    x = crops(1)[0]
    assert np.array_equal(apply_expert(net, x), x)


def test_identity_task_keeps_identity():
    pairs = [(c, c) for c in crops(12)]
    m = fit_expert(pairs[:10], FAST)
    assert m.best_step == 0
    assert m.final_l1 == 0.0
    assert min(psnr(apply_expert(m, x), y) for x, y in pairs[10:]) >= 40.0


def test_bias_task_learned():
    pairs = [(np.clip(c - 0.1, 0, 1), c) for c in crops(24, size=32)]
    m = fit_expert(pairs[:20], ExpertConfig(steps=400, lr=3e-3, patch=32))
    assert m.best_step > 0
    # identity baseline l1 is about 0.1
    held = np.mean([np.abs(apply_expert(m, x) - y).mean() for x, y in pairs[20:]])
    assert held < 0.01


def noise_patches(n, sigma, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n // 5):
        c = clean_image(1000 + i, 64)
        for _ in range(5):
            y, x = rng.integers(0, 33, 2)
            p = c[y:y + 32, x:x + 32]
            out.append((np.clip(p + rng.normal(0, sigma, p.shape), 0, 1), p))
    return out


@pytest.fixture(scope="module")
def denoiser():
    pairs = noise_patches(220, 15 / 255)
    return fit_expert(pairs[:200], ExpertConfig(steps=2000, patch=32)), pairs[200:]


def test_denoiser_gain_on_held_out(denoiser):
    m, held = denoiser
    gain = np.mean([psnr(apply_expert(m, x), y) - psnr(x, y) for x, y in held])
    assert gain >= 3.0


def test_denoiser_near_noop_on_clean(denoiser):
    m, held = denoiser
    assert np.mean([psnr(apply_expert(m, y), y) for _, y in held]) >= 30.0
    x = held[0][0]
    assert np.array_equal(apply_expert(m, x), apply_expert(m, x))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.1, 20.0))
def test_output_stays_in_unit_range(seed, gain):
    net = ConvNet((3, 8, 3), seed=seed)
    for w in net.W:
        w *= gain
    x = np.random.default_rng(seed).random((10, 12, 3))
    out = apply_expert(net, x)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_fit_is_deterministic():
    pairs = [(0.9 * c, c) for c in crops(9)]
    a = fit_expert(pairs, FAST, steps=60)
    b = fit_expert(pairs, FAST, steps=60)
    for p, q in zip(a.net.params(), b.net.params()):
        assert np.array_equal(p, q)


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_expert([], FAST)
    with pytest.raises(ValueError):
        fit_expert([(c, c) for c in crops(MIN_MEMBERS - 1)], FAST)


def test_apply_expert_batch_and_clip():
    net = ConvNet((3, 3), init="zeros")
    net.b[0][:] = 0.6
    x = np.stack(crops(2))
    out = apply_expert(ExpertModel((0, 0), net), x)
    assert out.shape == x.shape
    assert out.max() <= 1.0 and out.min() >= 0.6 - 1e-6


def test_split_val():
    m = split_val(50, 0.1, 3)
    assert m.sum() == 5 and np.array_equal(m, split_val(50, 0.1, 3))
    assert split_val(3, 0.1, 0).sum() == 1


def test_is_val_id_rate():
    ids = [f"train-in-{i:05d}" for i in range(4000)]
    rate = np.mean([is_val_id(i, 0) for i in ids])
    assert abs(rate - 0.1) < 0.02
    assert [is_val_id(i, 0) for i in ids[:50]] == [is_val_id(i, 0) for i in ids[:50]]


def small_corpus():
    """Two degradation groups (dim vs bright) with a DR that separates them."""
    corpus, drs = {}, {}
    for i, c in enumerate(crops(40, size=20)):
        dim = i % 2 == 0
        x = 0.5 * c if dim else np.clip(c + 0.2, 0, 1)
        iid = f"img{i:03d}"
        corpus[iid] = (x, c)
        drs[iid] = np.array([0.0 if dim else 10.0, float(i % 4 < 2), 0.01 * i])
    return corpus, drs


def ancestors(tree, lv, ix):
    out = [(lv, ix)]
    while lv > 0:
        ix = tree.levels[lv][ix].parent
        lv -= 1
        out.append((lv, ix))
    return out


def test_registry_covers_tree_and_round_trips(tmp_path):
    corpus, drs = small_corpus()
    tree = build_tree(drs, ClusterConfig([1, 2, 4]))
    reg = train_registry(tree, corpus, FAST, cache_dir=tmp_path / "cache")
    for lv, nodes in enumerate(tree.levels):
        for node in nodes:
            key = reg.resolve((lv, node.index))
            assert key in reg.experts
            assert key in ancestors(tree, lv, node.index)
    reg.save(tmp_path / "reg")
    back = ExpertRegistry.load(tmp_path / "reg")
    assert back.tree_checksum == tree.checksum()
    assert back.aliases == reg.aliases
    for k, m in reg.experts.items():
        for p, q in zip(m.net.params(), back.experts[k].net.params()):
            assert np.array_equal(p, q)


def test_children_beat_root_on_their_members():
    corpus, drs = small_corpus()
    tree = build_tree(drs, ClusterConfig([1, 2]))
    reg = train_registry(tree, corpus, FAST)
    own_experts = [n for n in tree.levels[1] if reg.resolve((1, n.index)) != (0, 0)]
    assert own_experts
    for node in own_experts:
        ids = node.members
        root = np.mean([psnr(apply_expert(reg.get((0, 0)), corpus[i][0]), corpus[i][1]) for i in ids])
        own = np.mean([psnr(apply_expert(reg.get((1, node.index)), corpus[i][0]), corpus[i][1])
                       for i in ids])
        assert own > root


def test_small_nodes_alias_parent():
    corpus, drs = small_corpus()
    # one outlier forms a singleton cluster at the finest level
    drs["img000"] = np.array([100.0, 0.0, 0.0])
    tree = build_tree(drs, ClusterConfig([1, 3]))
    reg = train_registry(tree, corpus, FAST)
    small = [n.index for n in tree.levels[1] if len(n.members) < MIN_MEMBERS]
    assert small
    for ix in small:
        assert reg.aliases[(1, ix)] == (0, 0)
        assert reg.get((1, ix)) is reg.get((0, 0))


def test_cache_reuses_identical_experts(tmp_path):
    corpus, drs = small_corpus()
    tree = build_tree(drs, ClusterConfig([1, 2]))
    a = train_registry(tree, corpus, FAST, cache_dir=tmp_path)
    n_files = len(list(tmp_path.glob("*.json")))
    b = train_registry(tree, corpus, FAST, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("*.json"))) == n_files
    for k in a.experts:
        for p, q in zip(a.experts[k].net.params(), b.experts[k].net.params()):
            assert np.array_equal(p, q)


def test_missing_members_rejected():
    corpus, drs = small_corpus()
    tree = build_tree(drs, ClusterConfig([1, 2]))
    corpus.pop("img001")
    with pytest.raises(KeyError):
        train_registry(tree, corpus, FAST)


def affine_corpus(per=16, size=16):
    """8 groups: 4 coarse transforms, each at 2 severities, DR = (transform, severity)."""
    corpus, drs = {}, {}
    ops = [lambda c, s: c * s, lambda c, s: np.clip(c + s, 0, 1),
           lambda c, s: 0.5 + (c - 0.5) * s, lambda c, s: c[..., ::-1] * s]
    sev = [(0.4, 0.7), (0.15, 0.3), (0.3, 0.6), (0.5, 0.8)]
    n = 0
    for g, op in enumerate(ops):
        for j, s in enumerate(sev[g]):
            for i in range(per):
                c = clean_image(n, size)
                iid = f"g{g}s{j}_{i:03d}"
                corpus[iid] = (op(c, s), c)
                dr = np.zeros(6)
                dr[g] = 10.0
                dr[4 + j] = 3.0
                drs[iid] = dr + 0.1 * np.random.default_rng(n).standard_normal(6)
                n += 1
    return corpus, drs


def test_degenerate_tree_has_one_expert():
    corpus, drs = affine_corpus(per=4)
    reg = train_registry(build_tree(drs, ClusterConfig([1])), corpus, FAST)
    assert list(reg.experts) == [(0, 0)] and not reg.aliases


def test_balanced_tree_has_thirteen_experts():
    corpus, drs = affine_corpus()
    tree = build_tree(drs, ClusterConfig([1, 4, 8]))
    assert sorted(len(n.members) for n in tree.levels[2]) == [16] * 8
    reg = train_registry(tree, corpus, FAST)
    assert len(reg) == 13 and not reg.aliases
