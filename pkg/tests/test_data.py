import struct
import zlib

import numpy as np
import pytest
from conftest import tiny_federation
from scipy.optimize import linprog

from fedbprompt.codec import FormatError
from fedbprompt.data import (
    ClientDataset,
    DomainSpec,
    Geometry,
    decode_dataset,
    encode_dataset,
    load_dataset,
    make_federation,
    random_identity,
    render,
    save_dataset,
)

FLAT = DomainSpec("flat", background=(0.5, 0.5, 0.5), texture_amp=0.0, texture_freq=1.0, clutter=0)


def ident(seed=0, i=1):
    return random_identity(i, np.random.default_rng(seed))


def body_mask(g: Geometry, shift=0):
    m = np.zeros((g.image_h, g.image_w), dtype=bool)
    top = g.body_top + shift * g.patch
    c0, c1 = g.body_cols
    m[max(top, 0):min(top + g.body_h, g.image_h), c0:c1] = True
    return m


def in_hull(points, x):
    k = len(points)
    res = linprog(np.zeros(k), A_eq=np.vstack([np.asarray(points).T, np.ones(k)]), b_eq=np.r_[x, 1.0],
                  bounds=[(0, None)] * k, method="highs")
    return res.status == 0


def test_flat_render_body_occupies_band_rows():
    g = Geometry()
    img = render(ident(), FLAT, np.random.default_rng(0), g, shift=0, cropped=False)
    assert img.shape == (3, 32, 16)
    differs = np.any(img != 0.5, axis=0)
    assert np.array_equal(differs, differs & body_mask(g))
    # each band spans its own rows and every body row is painted
    assert np.all(differs.any(axis=1) == body_mask(g).any(axis=1))


def test_shift_displaces_body_by_whole_patch_rows():
    g = Geometry()
    rng = np.random.default_rng(1)
    a = render(ident(), FLAT, rng, g, shift=0, cropped=False)
    b = render(ident(), FLAT, rng, g, shift=2, cropped=False)
    top, h, dp = g.body_top, g.body_h, 2 * g.patch
    visible = min(h, g.image_h - top - dp)
    assert np.array_equal(b[:, top + dp: top + dp + visible], a[:, top: top + visible])
    assert np.all(b[:, :top + dp] == 0.5)


def test_same_identity_flat_domain_renders_identically():
    g = Geometry()
    imgs = [render(ident(), FLAT, np.random.default_rng(s), g, shift=0, cropped=False) for s in (1, 2)]
    assert np.array_equal(*imgs)


def test_same_identity_two_domains_differ():
    other = DomainSpec("other", background=(0.2, 0.7, 0.3), texture_amp=0.1, texture_freq=2.0, noise=0.05)
    a = render(ident(), FLAT, np.random.default_rng(0), shift=0, cropped=False)
    b = render(ident(), other, np.random.default_rng(0), shift=0, cropped=False)
    assert not np.array_equal(a, b)


def test_render_range_and_visibility_error():
    noisy = DomainSpec("n", (0.9, 0.9, 0.9), 0.3, 2.0, clutter=3, noise=0.5)
    img = render(ident(), noisy, np.random.default_rng(0))
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert np.array_equal(img, img.astype(np.float32))
    with pytest.raises(ValueError):
        render(ident(), FLAT, np.random.default_rng(0), shift=4, cropped=False)


def test_shift_limits_keep_two_thirds_visible():
    for g in (Geometry(), Geometry(16, 8, 4), Geometry(64, 32, 8)):
        lo, hi = g.shift_limits()
        assert g.visible_fraction(lo, True) >= 2 / 3 - 1e-12 and g.visible_fraction(hi, True) >= 2 / 3 - 1e-12
        assert g.visible_fraction(hi + 1, True) < 2 / 3 - 1e-12


def test_federation_layout_and_disjoint_identities():
    fed = make_federation(3, 20, 16, seed=0)
    assert len(fed.sources) == 3 and len(fed.domains) == 4
    pools = []
    for d in fed.domains:
        train, test = set(d.train.labels.tolist()), set(d.query.labels.tolist())
        assert len(train) == 20 and len(d.train) == 20 * 16
        assert test <= set(d.gallery.labels.tolist()) and not train & test
        pools.append(train | set(d.gallery.labels.tolist()))
    for i in range(4):
        for j in range(i + 1, 4):
            assert not pools[i] & pools[j]


def test_every_train_identity_fills_pk_batches():
    fed = tiny_federation()
    for d in fed.sources:
        _, counts = np.unique(d.train.labels, return_counts=True)
        assert counts.min() >= 4


def test_same_seed_gives_byte_identical_datasets():
    a, b = tiny_federation(seed=5), tiny_federation(seed=5)
    for da, db in zip(a.domains, b.domains):
        for split in ("train", "query", "gallery"):
            assert encode_dataset(getattr(da, split)) == encode_dataset(getattr(db, split))
    c = tiny_federation(seed=6)
    assert encode_dataset(c.sources[0].train) != encode_dataset(a.sources[0].train)


@pytest.mark.parametrize("seed", range(5))
def test_target_background_outside_source_hull(seed):
    fed = make_federation(3, 1, 3, seed=seed)
    sources = [d.spec.background_params() for d in fed.sources]
    assert not in_hull(sources, fed.target.spec.background_params())
    assert in_hull(sources, np.mean(sources, axis=0))  # oracle sanity


def test_fbds_round_trip(tmp_path):
    ds = tiny_federation().sources[1].query
    ds.fingerprint = "abc123"
    save_dataset(ds, tmp_path / "q.fbds")
    back = load_dataset(tmp_path / "q.fbds", fingerprint="abc123")
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    assert back.split == "query" and back.domain == ds.domain
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "q.fbds", fingerprint="other")


def test_fbds_random_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 6))
        images = rng.uniform(0, 1, (n, 3, 4, 4)).astype(np.float32).astype(np.float64)
        ds = ClientDataset(FLAT, images, rng.integers(0, 2**31, n), "gallery")
        back = decode_dataset(encode_dataset(ds))
        assert np.array_equal(back.images, images) and np.array_equal(back.labels, ds.labels)


def test_fbds_empty_dataset():
    ds = ClientDataset(FLAT, np.zeros((0, 3, 32, 16)), np.zeros(0, dtype=np.int64))
    back = decode_dataset(encode_dataset(ds))
    assert len(back) == 0 and back.images.shape == (0, 3, 32, 16)


def test_fbds_version_and_corruption_errors():
    blob = encode_dataset(ClientDataset(FLAT, np.zeros((1, 3, 4, 4)), np.array([7])))
    body = bytearray(blob[:-4])
    body[4:6] = struct.pack("<H", 2)
    with pytest.raises(FormatError, match="version"):
        decode_dataset(bytes(body) + struct.pack("<I", zlib.crc32(body)))
    bad = bytearray(blob)
    bad[-10] ^= 1
    with pytest.raises(FormatError):
        decode_dataset(bytes(bad))
    with pytest.raises(FormatError):
        decode_dataset(b"FBPR" + blob[4:])
