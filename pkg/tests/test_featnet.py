import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgereg import autodiff as ad
from edgereg import featnet as fn
from edgereg.autodiff import Graph, Tensor, check_gradients
from edgereg.errors import ContractError


def params(D=8, seed=0, widths=(8, 8), channels=(4, 6)):
    return fn.init_featnet_params(np.random.default_rng(seed), D, channels, widths)


# ---------------------------------------------------------------- image branch

def test_grid_shape():
    p = fn.init_featnet_params(np.random.default_rng(0), 32)
    grid = fn.extract_image_features(np.random.default_rng(1).random((64, 64)), p)
    assert grid.features.shape == (8, 8, 32)
    grid = fn.extract_image_features(np.random.default_rng(1).random((20, 30)), p)
    assert (grid.gh, grid.gw) == (3, 4)


def test_zero_image_zero_bias_gives_zero_grid():
    p = params()
    for k, t in p.items():
        if k.startswith("img.") and k.endswith(".b"):
            t.data[:] = 0
    grid = fn.extract_image_features(np.zeros((16, 16)), p)
    assert np.all(grid.features.data == 0)


def test_small_image_rejected():
    with pytest.raises(ContractError):
        fn.extract_image_features(np.zeros((7, 20)), params())


def test_image_branch_gradcheck():
    p = params(D=4)
    img = np.random.default_rng(2).random((16, 16))
    g = Graph(lambda params: ad.sum(fn.extract_image_features(img, params).features),
              {k: v for k, v in p.items() if k.startswith("img.")})
    assert check_gradients(g, max_entries=12) < 1e-4


def test_bilinear_examples():
    grid = fn.ImageFeatureGrid(Tensor(np.full((3, 4, 5), 2.5)))
    out = fn.sample_bilinear(grid, np.array([[0, 0], [13, 7], [31, 23]]))
    np.testing.assert_allclose(out.data, 2.5)
    vals = np.random.default_rng(0).normal(size=(3, 4, 2))
    grid = fn.ImageFeatureGrid(Tensor(vals))
    np.testing.assert_allclose(fn.sample_bilinear(grid, np.array([[8, 16]])).data[0], vals[2, 1])
    g2 = fn.ImageFeatureGrid(Tensor(np.array([[0.0, 1.0], [2.0, 3.0]])[:, :, None]))
    assert fn.sample_bilinear(g2, np.array([[4, 4]])).data[0, 0] == pytest.approx(1.5)


def test_bilinear_permutation_locality():
    rng = np.random.default_rng(3)
    grid = fn.ImageFeatureGrid(Tensor(rng.normal(size=(4, 6, 3))))
    px = rng.integers(0, 40, size=(20, 2))
    perm = rng.permutation(20)
    a = fn.sample_bilinear(grid, px).data
    b = fn.sample_bilinear(grid, px[perm]).data
    np.testing.assert_array_equal(a[perm], b)


# ---------------------------------------------------------------- FPS

def test_fps_collinear():
    pts = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
    assert set(fn.farthest_point_sample(pts, 2, first=0)) == {0, 9}
    np.testing.assert_array_equal(np.sort(fn.farthest_point_sample(pts, 10, first=3)), np.arange(10))
    with pytest.raises(ContractError):
        fn.farthest_point_sample(pts, 11)


def brute_fps(pts, count, first):
    chosen = [first]
    while len(chosen) < count:
        d = np.min(np.linalg.norm(pts[:, None] - pts[chosen][None], axis=2), axis=1)
        chosen.append(int(np.argmax(d)))
    return chosen


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(0, 10_000))
def test_fps_matches_bruteforce_and_greedy_invariant(m, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(m, 3))
    count = int(rng.integers(1, m + 1))
    sel = fn.farthest_point_sample(pts, count, np.random.default_rng(seed))
    assert list(sel) == brute_fps(pts, count, int(np.random.default_rng(seed).integers(m)))
    if count < m:
        chosen = pts[sel]
        pair = np.linalg.norm(chosen[:, None] - chosen[None], axis=2)
        min_pair = np.min(pair[np.triu_indices(count, 1)]) if count > 1 else np.inf
        rest = np.delete(pts, sel, axis=0)
        cover = np.max(np.min(np.linalg.norm(rest[:, None] - chosen[None], axis=2), axis=1))
        assert min_pair >= cover - 1e-12


def test_fps_deterministic():
    pts = np.random.default_rng(0).normal(size=(100, 3))
    a = fn.farthest_point_sample(pts, 10, np.random.default_rng(5))
    b = fn.farthest_point_sample(pts, 10, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- set abstraction

def sa_params(c_in, width=6, seed=0):
    return ad.mlp_params(np.random.default_rng(seed), "sa", [3 + c_in, width, width])


def test_sa_singleton():
    p = sa_params(2)
    pos = np.array([[1.0, 2.0, 3.0]])
    feats = Tensor(np.array([[0.3, -0.7]]))
    out = fn.set_abstraction(pos, feats, pos, 1.0, 4, p, "sa")
    ref = ad.mlp(Tensor(np.array([[0, 0, 0, 0.3, -0.7]])), p, "sa", 2, final_relu=True).data
    np.testing.assert_allclose(out.features.data, ref)


def test_sa_translation_invariance_and_duplicates():
    rng = np.random.default_rng(1)
    p = sa_params(1)
    pos = rng.uniform(-3, 3, size=(40, 3))
    feats = rng.random((40, 1))
    centers = pos[:8]
    a = fn.set_abstraction(pos, Tensor(feats), centers, 2.0, 8, p, "sa").features.data
    shift = np.array([100.0, -50.0, 7.0])
    b = fn.set_abstraction(pos + shift, Tensor(feats), centers + shift, 2.0, 8, p, "sa").features.data
    np.testing.assert_allclose(a, b, atol=1e-9)
    # a duplicated neighbour never changes a max-pooled output
    nbr = fn.ball_neighbors(pos, centers, 2.0, 40)
    j = int(nbr[0, 1])
    pos2 = np.vstack([pos, pos[j:j + 1]])
    feats2 = np.vstack([feats, feats[j:j + 1]])
    c = fn.set_abstraction(pos2, Tensor(feats2), centers[:1], 2.0, 41, p, "sa").features.data
    d = fn.set_abstraction(pos, Tensor(feats), centers[:1], 2.0, 40, p, "sa").features.data
    np.testing.assert_allclose(c, d, atol=1e-12)


def test_ball_neighbors_self_first_and_radius():
    rng = np.random.default_rng(2)
    pos = rng.normal(size=(30, 3))
    nbr = fn.ball_neighbors(pos, pos[:5], 0.8, 6)
    np.testing.assert_array_equal(nbr[:, 0], np.arange(5))
    d = np.linalg.norm(pos[nbr] - pos[:5, None], axis=2)
    assert np.all(d <= 0.8 + 1e-12)
    for row in d:
        real = row[: np.count_nonzero(row > 0) + 1]  # padding repeats the centre itself
        assert np.all(np.diff(real) >= -1e-12)


# ---------------------------------------------------------------- propagation

def fp_params(c_in, D=5, seed=0):
    return ad.mlp_params(np.random.default_rng(seed), "fp", [c_in + 4, D])


def test_fp_coincident_source_dominates_and_constant_field():
    rng = np.random.default_rng(3)
    src_pos = rng.normal(size=(6, 3))
    src_feat = rng.normal(size=(6, 4))
    idx, w = fn.interpolation_weights(src_pos[2:3] + 1e-9, src_pos)
    assert idx[0, 0] == 2 and w[0, 0] > 1 - 1e-6
    const = fn.PointFeatureSet(src_pos, Tensor(np.tile([1.0, -2.0, 0.5, 3.0], (6, 1))))
    tgt = rng.normal(size=(10, 3))
    idx, w = fn.interpolation_weights(tgt, src_pos)
    interp = np.sum(const.features.data[idx] * w[:, :, None], axis=1)
    np.testing.assert_allclose(interp, np.tile([1.0, -2.0, 0.5, 3.0], (10, 1)), atol=1e-12)
    with pytest.raises(ContractError):
        fn.feature_propagation(tgt, np.zeros((10, 4)), fn.PointFeatureSet(np.empty((0, 3)), Tensor(np.empty((0, 4)))),
                               fp_params(4), "fp")


def test_fp_gradcheck():
    rng = np.random.default_rng(4)
    src = fn.PointFeatureSet(rng.normal(size=(7, 3)), Tensor(rng.normal(size=(7, 3)), requires_grad=True))
    tgt = np.column_stack([rng.normal(size=(5, 3)), rng.random(5)])
    p = fp_params(3)
    p["src"] = src.features
    g = Graph(lambda params: ad.sum(ad.mul(fn.feature_propagation(tgt[:, :3], tgt, fn.PointFeatureSet(src.positions, params["src"]), params, "fp"), 0.7)), p)
    assert check_gradients(g) < 1e-4


def test_point_branch_permutation_invariance():
    rng = np.random.default_rng(5)
    p = params(D=6)
    cloud = np.column_stack([rng.uniform(-10, 10, size=(200, 3)), rng.random(200)])
    edges = cloud[rng.choice(200, 15, replace=False)]
    perm = rng.permutation(200)
    first = 17

    def run(c, f):
        pos = c[:, :3]
        c0 = fn.farthest_point_sample(pos, 40, first=f)
        l1 = fn.set_abstraction(pos, Tensor(c[:, 3:4]), pos[c0], 3.0, 8, p, "pt.sa0")
        c1 = fn.farthest_point_sample(l1.positions, 10, first=0)
        l2 = fn.set_abstraction(l1.positions, l1.features, l1.positions[c1], 8.0, 8, p, "pt.sa1")
        up = fn.feature_propagation(l1.positions, l1.features, l2, p, "pt.fp0", final_relu=True)
        return fn.feature_propagation(edges[:, :3], edges, fn.PointFeatureSet(l1.positions, up), p, "pt.fp1").data

    a = run(cloud, first)
    b = run(cloud[perm], int(np.flatnonzero(perm == first)[0]))
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_point_features_shape_and_determinism():
    rng = np.random.default_rng(6)
    p = params(D=8)
    cloud = np.column_stack([rng.uniform(-10, 10, size=(300, 3)), rng.random(300)])
    edges = cloud[:20]
    a = fn.extract_point_features(cloud, edges, p, (64, 16), (2.0, 6.0), 8, np.random.default_rng(1)).data
    b = fn.extract_point_features(cloud, edges, p, (64, 16), (2.0, 6.0), 8, np.random.default_rng(1)).data
    assert a.shape == (20, 8)
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- positional embedding

def test_positional_embedding():
    p = params(D=8)
    for k in p:
        if k.startswith("pos2d."):
            p[k].data[:] = 0
    px = np.array([[0, 0], [10, 5], [10, 5]])
    norm = fn.normalize_pixels(px, 21, 11)
    np.testing.assert_allclose(norm[1], [0.0, 0.0])
    np.testing.assert_allclose(norm[0], [-1.0, -1.0])
    assert np.all(fn.positional_embedding(norm, p, "pos2d").data == 0)
    emb = fn.positional_embedding(fn.normalize_points(np.array([[1, 2, 3, 0.5], [1, 2, 3, 0.5], [4, 5, 6, 0.1]])), p, "pos3d").data
    np.testing.assert_array_equal(emb[0], emb[1])
    assert np.linalg.norm(emb[0] - emb[2]) > 0
    np.testing.assert_allclose(fn.normalize_points(np.array([[100, -50, 0, 0.3]])), [[1, -0.5, 0, 0.3]])


def test_param_name_prefixes():
    p = params()
    assert all(k.split(".")[0] in ("img", "pt", "pos2d", "pos3d") for k in p)
