import numpy as np
import pytest

from packedar.patching import Geometry, image_to_clusters
from packedar.separator import (
    SEPARATOR_SLOT,
    SeparatorSpec,
    layout_plan,
    load_packed,
    make_separator,
    pack,
    position_ids,
    save_packed,
    separator_pattern,
)


def make_images(n, geom, seed=0):
    rng = np.random.default_rng(seed)
    return [
        image_to_clusters(
            rng.random((geom.image_size, geom.image_size, geom.channels)).astype(np.float32),
            geom,
        )
        for _ in range(n)
    ]


# --- separator construction -------------------------------------------------

def test_identity_side4_diagonal_rows():
    sep = make_separator(SeparatorSpec("identity", 4, 8))
    assert sep.shape == (16, 8)
    ones_rows = [i for i in range(16) if sep[i].any()]
    assert ones_rows == [0, 5, 10, 15]
    for i in range(16):
        expect = 1.0 if i in (0, 5, 10, 15) else 0.0
        assert np.all(sep[i] == expect)


def test_zeros_degenerate_cluster():
    sep = make_separator(SeparatorSpec("zeros", 1, 4))
    assert sep.shape == (1, 4)
    assert not sep.any()


def test_ones_sum():
    sep = make_separator(SeparatorSpec("ones", 2, 3))
    assert sep.shape == (4, 3)
    assert sep.sum() == 12


def test_embeddings_repeats_vector_and_requires_it():
    vec = np.arange(5, dtype=np.float32)
    sep = make_separator(SeparatorSpec("embeddings", 2, 5), embedding=vec)
    assert sep.shape == (4, 5)
    for row in sep:
        np.testing.assert_array_equal(row, vec)
    with pytest.raises(ValueError):
        make_separator(SeparatorSpec("embeddings", 2, 5))
    with pytest.raises(ValueError):
        make_separator(SeparatorSpec("embeddings", 2, 5), embedding=np.zeros(3))


def test_constant_kinds_are_binary_valued():
    for kind in ("zeros", "ones", "identity"):
        sep = make_separator(SeparatorSpec(kind, 3, 6))
        assert set(np.unique(sep)) <= {0.0, 1.0}


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        SeparatorSpec("stripes", 2, 4)


def test_pattern_matches_vectors():
    for kind in ("zeros", "ones", "identity"):
        spec = SeparatorSpec(kind, 4, 3)
        pat = separator_pattern(kind, 4)
        sep = make_separator(spec)
        np.testing.assert_array_equal(sep, pat[:, None] * np.ones((16, 3), np.float32))
    # the learnable variant renders as zeros
    assert not separator_pattern("embeddings", 4).any()


# --- layouts -----------------------------------------------------------------

def test_layout_sc_l9():
    plan = layout_plan("sc", 9)
    assert len(plan) == 10
    assert plan[0] is SEPARATOR_SLOT
    assert plan[1:] == list(range(9))


def test_layout_cs_single_cluster():
    assert layout_plan("cs", 1) == [0, SEPARATOR_SLOT]


def test_layout_scs_groups_of_three():
    plan = layout_plan("scs", 9, 3)
    want = [None, 0, 1, 2, None, 3, 4, 5, None, 6, 7, 8]
    assert plan == want


def test_layout_csc_groups():
    assert layout_plan("csc", 4, 2) == [0, 1, None, 2, 3, None]


def test_layout_rejects_bad_group():
    with pytest.raises(ValueError):
        layout_plan("scs", 9, 4)
    with pytest.raises(ValueError):
        layout_plan("csc", 9, 2)
    with pytest.raises(ValueError):
        layout_plan("ring", 4, 2)


# --- packing -----------------------------------------------------------------

def test_pack_full_scale_token_counts():
    geom = Geometry(192, 16, 4)
    spec = SeparatorSpec("identity", 4, 8)
    images = make_images(8, geom)
    packed = pack(images, spec, "sc")
    assert packed.num_tokens == 8 * (144 + 16) == 1280
    single = pack(images[:1], spec, "sc")
    assert single.num_tokens == 160
    assert bool(single.is_separator[:16].all())
    assert not single.is_separator[16:].any()


def test_pack_hand_enumerated_micro():
    geom = Geometry(1, 1, 1, channels=1)
    spec = SeparatorSpec("zeros", 1, 4)
    packed = pack(make_images(2, geom), spec, "sc")
    assert packed.num_tokens == 4
    np.testing.assert_array_equal(packed.cluster_index, [0, 1, 2, 3])
    np.testing.assert_array_equal(packed.image_index, [0, 0, 1, 1])
    np.testing.assert_array_equal(packed.is_separator, [True, False, True, False])


def test_token_count_matches_slot_enumeration():
    # brute-force oracle: walk the per-image slot list and count side^2 each
    for layout in ("sc", "cs", "scs", "csc"):
        for n in (1, 2, 3):
            for geom in (Geometry(8, 2, 2, channels=1), Geometry(16, 4, 2)):
                l = geom.num_clusters
                side = geom.cluster_side
                if layout in ("scs", "csc") and l % side != 0:
                    continue
                expected = 0
                for _ in range(n):
                    for _slot in layout_plan(layout, l, side):
                        expected += side * side
                spec = SeparatorSpec("identity", side, 8)
                packed = pack(make_images(n, geom), spec, layout)
                assert packed.num_tokens == expected
                assert np.all(np.diff(packed.cluster_index) >= 0)


def test_pack_rejects_heterogeneous_geometry():
    a = make_images(1, Geometry(8, 2, 2, channels=1))[0]
    b = make_images(1, Geometry(16, 4, 2, channels=1))[0]
    with pytest.raises(ValueError, match="geometry"):
        pack([a, b], SeparatorSpec("zeros", 2, 4), "sc")


def test_pack_rejects_side_mismatch_and_bad_counts():
    geom = Geometry(8, 2, 2, channels=1)
    images = make_images(1, geom)
    with pytest.raises(ValueError):
        pack(images, SeparatorSpec("zeros", 4, 4), "sc")
    with pytest.raises(ValueError):
        pack([], SeparatorSpec("zeros", 2, 4), "sc")
    with pytest.raises(ValueError):
        pack(images * 17, SeparatorSpec("zeros", 2, 4), "sc")


def test_pack_is_content_equivariant():
    geom = Geometry(8, 2, 2, channels=1)
    spec = SeparatorSpec("identity", 2, 4)
    images = make_images(2, geom, seed=5)
    ab = pack(images, spec, "sc")
    ba = pack(images[::-1], spec, "sc")
    per = ab.num_tokens // 2
    np.testing.assert_array_equal(ab.pixel_values[:per], ba.pixel_values[per:])
    np.testing.assert_array_equal(ab.pixel_values[per:], ba.pixel_values[:per])
    for field in ("image_index", "cluster_index", "within_cluster_index",
                  "is_separator", "position_ids"):
        np.testing.assert_array_equal(getattr(ab, field), getattr(ba, field))


# --- position ids -------------------------------------------------------------

def oracle_position_ids(packed):
    # independent walk following the stated rule
    ids = []
    per_image = {}
    for t in range(packed.num_tokens):
        img = int(packed.image_index[t])
        if img not in per_image:
            per_image[img] = {"next": 0, "sep_ids": {}}
        st = per_image[img]
        g = int(packed.cluster_index[t])
        if packed.is_separator[t]:
            if g not in st["sep_ids"]:
                st["sep_ids"][g] = st["next"]
                st["next"] += 1
            ids.append(st["sep_ids"][g])
        else:
            ids.append(st["next"])
            st["next"] += 1
    return np.array(ids)


def test_position_ids_full_scale_sc():
    geom = Geometry(192, 16, 4)
    packed = pack(make_images(1, geom), SeparatorSpec("identity", 4, 8), "sc")
    assert np.all(packed.position_ids[:16] == 0)
    np.testing.assert_array_equal(packed.position_ids[16:], np.arange(1, 145))


def test_position_ids_restart_per_image():
    geom = Geometry(8, 2, 2, channels=1)
    packed = pack(make_images(2, geom), SeparatorSpec("identity", 2, 4), "sc")
    per = packed.num_tokens // 2
    np.testing.assert_array_equal(
        packed.position_ids[:per], packed.position_ids[per:]
    )


def test_position_ids_minimal_and_oracle():
    geom = Geometry(1, 1, 1, channels=1)
    packed = pack(make_images(1, geom), SeparatorSpec("zeros", 1, 4), "sc")
    np.testing.assert_array_equal(packed.position_ids, [0, 1])
    for layout in ("sc", "cs", "scs", "csc"):
        geom = Geometry(8, 2, 2, channels=1)
        packed = pack(make_images(2, geom), SeparatorSpec("ones", 2, 4), layout)
        np.testing.assert_array_equal(packed.position_ids, oracle_position_ids(packed))


def test_position_ids_global_mode():
    geom = Geometry(8, 2, 2, channels=1)
    packed = pack(
        make_images(2, geom), SeparatorSpec("identity", 2, 4), "sc",
        per_image_positions=False,
    )
    ids = position_ids(packed, per_image=False)
    per = packed.num_tokens // 2
    # global ids keep counting into the second image
    assert ids[per] == ids[per - 1] + 1
    np.testing.assert_array_equal(packed.position_ids, ids)


# --- dump format ---------------------------------------------------------------

def test_dump_round_trip(tmp_path):
    geom = Geometry(8, 2, 2, channels=1)
    packed = pack(make_images(2, geom, seed=9), SeparatorSpec("identity", 2, 6), "scs")
    path = tmp_path / "p.bin"
    save_packed(path, packed)
    back = load_packed(path)
    assert back.layout == packed.layout
    assert back.spec == packed.spec
    assert back.num_images == packed.num_images
    assert back.num_pixel_clusters == packed.num_pixel_clusters
    np.testing.assert_array_equal(back.pixel_values, packed.pixel_values)
    np.testing.assert_array_equal(back.separator_template, packed.separator_template)
    for field in ("image_index", "cluster_index", "within_cluster_index",
                  "is_separator", "position_ids"):
        np.testing.assert_array_equal(getattr(back, field), getattr(packed, field))
    # second save is byte-identical
    save_packed(tmp_path / "q.bin", back)
    assert (tmp_path / "q.bin").read_bytes() == path.read_bytes()


def test_dump_rejects_corruption(tmp_path):
    geom = Geometry(8, 2, 2, channels=1)
    packed = pack(make_images(1, geom), SeparatorSpec("zeros", 2, 4), "sc")
    path = tmp_path / "p.bin"
    save_packed(path, packed)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "bad.bin").write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_packed(tmp_path / "bad.bin")
