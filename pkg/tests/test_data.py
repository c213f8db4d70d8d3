import struct

import numpy as np
import pytest

from xferlab.data import (CLUTTER_MARKS, ConsistencyError, DataFormatError, DomainSpec,
                          attach_explanations, gen_domain, gen_mixture, load_idx,
                          region_patches)
from xferlab.model import ConfigurationError
from xferlab.storage import load_dataset, save_dataset


def spec(**kw):
    base = dict(name="d", family="strokes", classes=(0, 1, 2), k=3, texture="stripes", seed=5)
    base.update(kw)
    return DomainSpec(**base)


def test_deterministic():
    a_tr, a_te = gen_domain(spec(), 12, 4)
    b_tr, b_te = gen_domain(spec(), 12, 4)
    for a, b in ((a_tr, b_tr), (a_te, b_te)):
        np.testing.assert_array_equal(a.pixels(), b.pixels())
        np.testing.assert_array_equal(a.labels(), b.labels())
        assert [im.id for im in a.images] == [im.id for im in b.images]


def test_pixels_and_labels_in_range():
    tr, _ = gen_domain(spec(texture="blobs-clutter", noise=0.3), 20, 2)
    x = tr.pixels()
    assert x.shape == (20, 3, 16, 16)
    assert x.min() >= 0.0 and x.max() <= 1.0
    assert set(tr.labels()) <= {0, 1, 2}


def test_planted_size_is_k_and_inside_family_region():
    for fam in ("strokes", "blobs", "lattice", "specks"):
        tr, te = gen_domain(spec(family=fam, k=4), 10, 5)
        region = set(region_patches(fam, 4).tolist())
        for im in tr.images + te.images:
            assert len(im.planted) == 4
            assert len(set(im.planted)) == 4
            assert set(im.planted) <= region


def test_family_regions_are_halves():
    top, bottom = region_patches("strokes", 4), region_patches("blobs", 4)
    assert top.size == bottom.size == 8
    assert not set(top) & set(bottom)


def test_seed_changes_give_disjoint_ids():
    a, _ = gen_domain(spec(seed=1), 8, 2)
    b, _ = gen_domain(spec(seed=2), 8, 2)
    assert not {im.id for im in a.images} & {im.id for im in b.images}


def test_train_test_ids_disjoint():
    tr, te = gen_domain(spec(), 8, 8)
    assert not {im.id for im in tr.images} & {im.id for im in te.images}


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        spec(k=9)  # a family half holds 8 patches at grid 4
    with pytest.raises(ConfigurationError):
        spec(k=0)
    with pytest.raises(ConfigurationError):
        spec(classes=(0,))
    with pytest.raises(ConfigurationError):
        spec(family="waves")
    with pytest.raises(ConfigurationError):
        spec(texture="plaid")
    with pytest.raises(ConfigurationError):
        gen_domain(spec(), 0, 3)


def test_clutter_marks_land_outside_planted_patches():
    clean, _ = gen_domain(spec(texture="grain", noise=0.0), 6, 1)
    busy, _ = gen_domain(spec(texture="blobs-clutter", noise=0.0), 6, 1)
    for a, b in zip(clean.images, busy.images):
        assert a.id == b.id and a.planted == b.planted
        diff = np.abs(a.pixels - b.pixels).reshape(3, 4, 4, 4, 4).sum(axis=(0, 2, 4)).reshape(-1)
        changed = set(np.flatnonzero(diff > 0).tolist())
        assert len(changed) == CLUTTER_MARKS
        assert not changed & set(a.planted)


def test_mixture_uses_union_label_space():
    mix = gen_mixture([spec(name="a", family="strokes"), spec(name="b", family="blobs")], 6)
    assert mix.class_names == ("strokes-0", "strokes-1", "strokes-2", "blobs-0", "blobs-1", "blobs-2")
    assert len(mix) == 12
    assert set(mix.labels()) <= set(range(6))


# IDX -------------------------------------------------------------------------

def write_idx(tmp_path, n=10, h=28, w=28, images=None, img_magic=0x803, lab_magic=0x801,
              n_labels=None, truncate=0):
    imgs = images if images is not None else np.arange(n * h * w, dtype=np.uint64).astype(np.uint8)
    ip, lp = tmp_path / "images.idx", tmp_path / "labels.idx"
    payload = np.asarray(imgs, dtype=np.uint8).tobytes()
    ip.write_bytes(struct.pack(">IIII", img_magic, n, h, w) + payload[:len(payload) - truncate])
    nl = n if n_labels is None else n_labels
    lp.write_bytes(struct.pack(">II", lab_magic, nl) + bytes(i % 10 for i in range(nl)))
    return ip, lp


def test_idx_count_10(tmp_path):
    ds = load_idx(*write_idx(tmp_path))
    assert len(ds) == 10
    np.testing.assert_array_equal(ds.labels(), np.arange(10))
    assert ds.pixels().shape == (10, 3, 16, 16)
    assert ds.pixels().min() >= 0.0 and ds.pixels().max() <= 1.0


def test_idx_all_zero(tmp_path):
    ds = load_idx(*write_idx(tmp_path, n=3, images=np.zeros(3 * 28 * 28)))
    np.testing.assert_array_equal(ds.pixels(), 0.0)


def test_idx_nearest_neighbour_scaling(tmp_path):
    img = np.zeros((1, 2, 2), dtype=np.uint8)
    img[0, 0, 1] = 255
    ds = load_idx(*write_idx(tmp_path, n=1, h=2, w=2, images=img), image_size=4, patch_size=2)
    expected = np.zeros((4, 4))
    expected[:2, 2:] = 1.0
    np.testing.assert_array_equal(ds.images[0].pixels[0], expected)


def test_idx_truncated_payload(tmp_path):
    with pytest.raises(DataFormatError):
        load_idx(*write_idx(tmp_path, truncate=5))


def test_idx_bad_magic(tmp_path):
    with pytest.raises(DataFormatError):
        load_idx(*write_idx(tmp_path, img_magic=0x801))
    with pytest.raises(DataFormatError):
        load_idx(*write_idx(tmp_path, lab_magic=0x803))


def test_idx_count_mismatch(tmp_path):
    with pytest.raises(ConsistencyError):
        load_idx(*write_idx(tmp_path, n_labels=9))


# explanation attachment --------------------------------------------------------

def test_attach_skips_failures_and_records_provenance():
    tr, _ = gen_domain(spec(), 6, 1)
    bad = tr.images[2].id

    def explain(px, label, seed):
        if px is tr.images[2].pixels:
            raise RuntimeError("boom")
        return np.full(16, float(label))

    out = attach_explanations(tr, explain, {"kind": "test"}, seed=3)
    assert bad not in out.phi
    assert len(out.phi) == 5
    assert out.provenance["kind"] == "test" and out.provenance["explained"] == "5"
    phi, mask = out.phi_matrix()
    assert not mask[2] and mask.sum() == 5
    for i, im in enumerate(out.images):
        if mask[i]:
            np.testing.assert_array_equal(phi[i], im.label)


def test_attach_rejects_non_finite():
    tr, _ = gen_domain(spec(), 3, 1)
    out = attach_explanations(tr, lambda px, y, s: np.full(16, np.nan), {})
    assert out.phi == {}


def test_attach_order_independent():
    tr, _ = gen_domain(spec(), 6, 1)

    def explain(px, label, seed):
        return np.random.default_rng(seed).normal(size=16)

    a = attach_explanations(tr, explain, {}, seed=9)
    b = attach_explanations(tr, explain, {}, seed=9,
                            parallel_map=lambda f, xs: reversed([f(x) for x in xs]))
    for k in a.phi:
        np.testing.assert_array_equal(a.phi[k], b.phi[k])


def test_planted_metadata_does_not_reach_phi():
    tr, _ = gen_domain(spec(), 4, 1)

    def explain(px, label, seed):
        return px.reshape(3, 4, 4, 4, 4).sum(axis=(0, 2, 4)).reshape(-1)

    a = attach_explanations(tr, explain, {})
    stripped = tr.__class__(tr.split, [type(im)(im.pixels, im.label, im.id) for im in tr.images],
                            tr.class_names, tr.num_patches, tr.domain)
    b = attach_explanations(stripped, explain, {})
    for k in a.phi:
        np.testing.assert_array_equal(a.phi[k], b.phi[k])


def test_dataset_round_trip_bit_exact(tmp_path):
    tr, _ = gen_domain(spec(), 5, 1)
    rng = np.random.default_rng(0)
    ds = attach_explanations(tr, lambda px, y, s: rng.normal(size=16),
                             {"kind": "kernel", "P": "500", "theta": "abc123"}, fraction=0.6)
    path = save_dataset(tmp_path / "d.sevd", ds)
    back = load_dataset(path)
    assert back.provenance == ds.provenance
    assert back.class_names == ds.class_names and back.domain == ds.domain
    assert [im.id for im in back.images] == [im.id for im in ds.images]
    assert [im.planted for im in back.images] == [im.planted for im in ds.images]
    np.testing.assert_array_equal(back.pixels(), ds.pixels())
    assert back.phi.keys() == ds.phi.keys()
    for k in ds.phi:
        assert back.phi[k].tobytes() == ds.phi[k].tobytes()
