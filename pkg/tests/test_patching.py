import numpy as np
import pytest

from packedar.patching import (
    Geometry,
    cluster_priority_permutation,
    clusterize,
    image_to_clusters,
    patchify,
    unclusterize,
    unpatchify,
)


def brute_force_patches(image, patch_size):
    # direct nested-loop extraction, the oracle for patchify
    h, w, c = image.shape
    gh, gw = h // patch_size, w // patch_size
    out = np.zeros((gh * gw, patch_size * patch_size * c), dtype=image.dtype)
    for pi in range(gh):
        for pj in range(gw):
            vec = []
            for y in range(patch_size):
                for x in range(patch_size):
                    for ch in range(c):
                        vec.append(image[pi * patch_size + y, pj * patch_size + x, ch])
            out[pi * gw + pj] = vec
    return out


def brute_force_order(grid_h, grid_w, side):
    order = []
    for cr in range(grid_h // side):
        for cc in range(grid_w // side):
            for pr in range(side):
                for pc in range(side):
                    order.append((cr * side + pr) * grid_w + (cc * side + pc))
    return np.array(order)


def test_patchify_matches_index_oracle():
    img = (np.arange(32 * 32, dtype=np.float32).reshape(32, 32, 1)) / (32 * 32)
    grid = patchify(img, 16)
    assert grid.patches.shape == (4, 256)
    np.testing.assert_array_equal(grid.patches, brute_force_patches(img, 16))


def test_patchify_random_images_against_oracle():
    rng = np.random.default_rng(11)
    for _ in range(5):
        c = int(rng.integers(1, 4))
        p = int(rng.choice([2, 4]))
        h = p * int(rng.integers(1, 5))
        w = p * int(rng.integers(1, 5))
        img = rng.random((h, w, c)).astype(np.float32)
        grid = patchify(img, p)
        np.testing.assert_array_equal(grid.patches, brute_force_patches(img, p))


def test_patchify_full_scale_shape():
    img = np.zeros((192, 192, 3), dtype=np.float32)
    grid = patchify(img, 16)
    assert (grid.grid_h, grid.grid_w) == (12, 12)
    assert grid.patches.shape == (144, 768)


def test_patchify_single_patch_zero_image():
    grid = patchify(np.zeros((16, 16, 1), dtype=np.float32), 16)
    assert grid.patches.shape == (1, 256)
    assert not grid.patches.any()


def test_patchify_rejects_bad_dims():
    with pytest.raises(ValueError, match="height"):
        patchify(np.zeros((15, 16, 1), dtype=np.float32), 4)
    with pytest.raises(ValueError, match="width"):
        patchify(np.zeros((16, 15, 1), dtype=np.float32), 4)


def test_unpatchify_inverts_patchify():
    rng = np.random.default_rng(3)
    img = rng.random((24, 16, 3)).astype(np.float32)
    np.testing.assert_array_equal(unpatchify(patchify(img, 4)), img)


def test_pixels_partition():
    # every pixel appears exactly once across all patch vectors
    img = np.arange(8 * 8 * 2, dtype=np.float32).reshape(8, 8, 2)
    grid = patchify(img, 2)
    assert sorted(grid.patches.reshape(-1).tolist()) == sorted(img.reshape(-1).tolist())


def test_cluster_priority_permutation_matches_loop_oracle():
    for gh, gw, side in [(4, 4, 4), (8, 8, 4), (12, 12, 4), (4, 8, 2), (6, 6, 3)]:
        got = cluster_priority_permutation(gh, gw, side)
        np.testing.assert_array_equal(got, brute_force_order(gh, gw, side))


def test_single_cluster_permutation_is_identity():
    np.testing.assert_array_equal(
        cluster_priority_permutation(4, 4, 4), np.arange(16)
    )


def test_cluster_counts_at_full_scale():
    grid = patchify(np.zeros((192, 192, 3), dtype=np.float32), 16)
    seq = clusterize(grid, 4)
    assert seq.clusters.shape == (9, 16, 768)


def test_8x8_grid_cluster1_starts_at_patch4():
    grid = patchify(np.zeros((16, 16, 1), dtype=np.float32), 2)
    assert (grid.grid_h, grid.grid_w) == (8, 8)
    seq = clusterize(grid, 4)
    assert seq.clusters.shape[0] == 4
    assert seq.order[16] == 4  # token 0 of cluster 1


def test_clusterize_rejects_nondivisible_grid():
    grid = patchify(np.zeros((12, 12, 1), dtype=np.float32), 2)  # 6x6 patches
    with pytest.raises(ValueError):
        clusterize(grid, 4)


def test_round_trip_bit_identical():
    rng = np.random.default_rng(7)
    for side in (1, 2, 4):
        img = rng.random((16, 16, 3)).astype(np.float32)
        grid = patchify(img, 2)
        seq = clusterize(grid, side)
        back = unclusterize(seq)
        np.testing.assert_array_equal(back.patches, grid.patches)
        np.testing.assert_array_equal(unpatchify(back), img)


def test_permutation_is_content_independent():
    rng = np.random.default_rng(9)
    a = image_to_clusters(rng.random((16, 16, 3)).astype(np.float32),
                          Geometry(16, 4, 2))
    b = image_to_clusters(rng.random((16, 16, 3)).astype(np.float32),
                          Geometry(16, 4, 2))
    np.testing.assert_array_equal(a.order, b.order)


def test_geometry_validation_and_derived_sizes():
    g = Geometry(image_size=192, patch_size=16, cluster_side=4, channels=3)
    assert g.grid_side == 12
    assert g.num_clusters == 9
    assert g.tokens_per_cluster == 16
    assert g.pixel_tokens_per_image == 144
    assert g.patch_dim == 768
    with pytest.raises(ValueError):
        Geometry(image_size=16, patch_size=5, cluster_side=2)
    with pytest.raises(ValueError):
        Geometry(image_size=16, patch_size=4, cluster_side=3)
