"""Synthetic multi-domain pedestrian images.

Each identity is a body of three stacked bands (upper / mid / lower) with a
two-tone stripe pattern per band. Domains differ in background colour and
texture, clutter, colour cast, vertical shift (a viewpoint stand-in), bottom
cropping and pixel noise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .codec import FormatError, Reader, encode_entry, strip_crc, with_crc

DATASET_MAGIC = b"FBDS"
DATASET_VERSION = 1
SPLITS = ("train", "query", "gallery")


@dataclass(frozen=True)
class Identity:
    id: int
    parts: np.ndarray  # (3, 6): per band, primary RGB then secondary RGB

    def __post_init__(self):
        if np.shape(self.parts) != (3, 6):
            raise ValueError("identity parts must be a (3, 6) array")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    background: tuple[float, float, float]
    texture_amp: float
    texture_freq: float
    clutter: int = 2
    clutter_palette: tuple[tuple[float, float, float], ...] = ()
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    shift_low: int = 0
    shift_high: int = 0
    crop_prob: float = 0.0
    noise: float = 0.0

    def background_params(self) -> np.ndarray:
        """The vector used to audit target-vs-source background novelty."""
        return np.array([*self.background, self.texture_amp, self.texture_freq])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["background"] = tuple(d["background"])
        d["tint"] = tuple(d["tint"])
        d["clutter_palette"] = tuple(tuple(c) for c in d.get("clutter_palette", ()))
        return cls(**d)


@dataclass(frozen=True)
class Geometry:
    image_h: int = 32
    image_w: int = 16
    patch: int = 4
    channels: int = 3

    @property
    def body_top(self) -> int:
        return self.image_h // 8

    @property
    def body_h(self) -> int:
        return 3 * self.image_h // 4

    @property
    def body_cols(self) -> tuple[int, int]:
        return self.image_w // 4, 3 * self.image_w // 4

    def band_rows(self, shift: int = 0) -> list[tuple[int, int]]:
        top = self.body_top + shift * self.patch
        band = self.body_h // 3
        return [(top + i * band, top + (i + 1) * band) for i in range(3)]

    def visible_fraction(self, shift: int, cropped: bool) -> float:
        top = self.body_top + shift * self.patch
        bottom = self.image_h - (self.patch if cropped else 0)
        seen = max(0, min(top + self.body_h, bottom) - max(top, 0))
        return seen / self.body_h

    def shift_limits(self) -> tuple[int, int]:
        """Widest shift range (patch rows) that keeps 2/3 of the body visible even when cropped."""
        rows = self.image_h // self.patch
        ok = [s for s in range(-rows, rows + 1) if self.visible_fraction(s, True) >= 2.0 / 3.0 - 1e-12]
        if not ok:
            raise ValueError(f"geometry {self.image_h}x{self.image_w}/{self.patch} cannot keep 2/3 of the body visible")
        return min(ok), max(ok)

    def clamp(self, spec: "DomainSpec") -> "DomainSpec":
        lo, hi = self.shift_limits()
        low = min(max(spec.shift_low, lo), hi)
        return replace(spec, shift_low=low, shift_high=max(low, min(spec.shift_high, hi)))


@dataclass
class ClientDataset:
    domain: DomainSpec
    images: np.ndarray  # (B, C, H, W) float64, every value float32-representable
    labels: np.ndarray  # (B,) int64 global identity ids
    split: str = "train"
    fingerprint: str = ""

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def identities(self) -> list[int]:
        return sorted(set(self.labels.tolist()))


@dataclass
class DomainData:
    spec: DomainSpec
    train: ClientDataset
    query: ClientDataset
    gallery: ClientDataset


@dataclass
class Federation:
    sources: list[DomainData]
    target: DomainData
    geometry: Geometry = field(default_factory=Geometry)

    @property
    def domains(self) -> list[DomainData]:
        return [*self.sources, self.target]


def clothing_palette(seed: int, size: int = 8) -> np.ndarray:
    """Shared colour palette for clothing and background clutter."""
    return np.random.default_rng([seed, 0xC0]).uniform(0.05, 0.95, size=(size, 3))


def random_identity(ident: int, rng: np.random.Generator, palette: np.ndarray | None = None) -> Identity:
    """Each band picks two palette colours plus a small jitter, so identities share colours."""
    if palette is None:
        return Identity(ident, rng.uniform(0.0, 1.0, size=(3, 6)))
    picks = rng.integers(0, len(palette), size=(3, 2))
    parts = palette[picks].reshape(3, 6) + rng.uniform(-0.05, 0.05, size=(3, 6))
    return Identity(ident, np.clip(parts, 0.0, 1.0))


def render(
    identity: Identity,
    domain: DomainSpec,
    rng: np.random.Generator,
    geometry: Geometry = Geometry(),
    shift: int | None = None,
    cropped: bool | None = None,
) -> np.ndarray:
    """One (C, H, W) image in [0, 1]. ``shift`` is in patch rows (positive = down)."""
    g = geometry
    h, w = g.image_h, g.image_w
    if shift is None:
        shift = int(rng.integers(domain.shift_low, domain.shift_high + 1))
    if cropped is None:
        cropped = bool(rng.random() < domain.crop_prob)
    if g.visible_fraction(shift, cropped) < 2.0 / 3.0 - 1e-12:
        raise ValueError(f"shift {shift} (cropped={cropped}) hides more than a third of the body")

    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * domain.texture_freq * (rows + 0.5 * cols) / h + phase)
    img = np.empty((g.channels, h, w))
    for c in range(g.channels):
        img[c] = domain.background[c % 3] + domain.texture_amp * wave
    for _ in range(domain.clutter):
        r0, c0 = int(rng.integers(0, h - 4)), int(rng.integers(0, w - 2))
        rh, cw = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        if domain.clutter_palette:
            colour = np.asarray(domain.clutter_palette[int(rng.integers(len(domain.clutter_palette)))])
        else:
            colour = rng.uniform(0, 1, size=3)
        for c in range(g.channels):
            img[c, r0:r0 + rh, c0:c0 + cw] = colour[c % 3]

    c_lo, c_hi = g.body_cols
    for (r_lo, r_hi), sig in zip(g.band_rows(shift), identity.parts):
        lo, hi = max(r_lo, 0), min(r_hi, h)
        if lo >= hi:
            continue
        stripe = ((np.arange(lo, hi) - r_lo) // 2) % 2  # 2-px stripes anchored to the band
        for c in range(g.channels):
            band = np.where(stripe[:, None] == 0, sig[c % 3], sig[3 + c % 3])
            img[c, lo:hi, c_lo:c_hi] = band

    if cropped:
        keep = h - g.patch
        for c in range(g.channels):
            img[c, keep:, :] = domain.background[c % 3]
    img *= np.asarray(domain.tint)[np.arange(g.channels) % 3][:, None, None]
    if domain.noise > 0:
        img += rng.normal(0.0, domain.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img.astype(np.float32).astype(np.float64)


def _palette_subset(rng, palette, k=4):
    return tuple(tuple(float(v) for v in palette[i]) for i in rng.choice(len(palette), size=k, replace=False))


def _source_domain(rng: np.random.Generator, idx: int, palette: np.ndarray) -> DomainSpec:
    return DomainSpec(
        name=f"source{idx}",
        background=tuple(float(v) for v in rng.uniform(0.1, 0.9, size=3)),
        texture_amp=float(rng.uniform(0.05, 0.2)),
        texture_freq=float(rng.uniform(1.0, 3.0)),
        clutter=int(rng.integers(2, 5)),
        clutter_palette=_palette_subset(rng, palette),
        tint=tuple(float(v) for v in rng.uniform(0.8, 1.2, size=3)),
        shift_low=-1,
        shift_high=int(rng.integers(1, 3)),
        crop_prob=float(rng.uniform(0.0, 0.3)),
        noise=float(rng.uniform(0.03, 0.08)),
    )


def _target_domain(rng: np.random.Generator, palette: np.ndarray) -> DomainSpec:
    # texture amplitude and frequency sit above every source range, so the
    # background parameters fall outside the sources' convex hull.
    return DomainSpec(
        name="target",
        background=tuple(float(v) for v in rng.uniform(0.1, 0.9, size=3)),
        texture_amp=float(rng.uniform(0.25, 0.3)),
        texture_freq=float(rng.uniform(3.5, 4.0)),
        clutter=int(rng.integers(3, 5)),
        clutter_palette=_palette_subset(rng, palette),
        tint=tuple(float(v) for v in rng.uniform(0.8, 1.2, size=3)),
        shift_low=-1,
        shift_high=2,
        crop_prob=0.3,
        noise=0.06,
    )


def _render_split(idents, domain, rng, geometry, count, split, fingerprint):
    images, labels = [], []
    for ident in idents:
        for _ in range(count):
            images.append(render(ident, domain, rng, geometry))
            labels.append(ident.id)
    shape = (0, geometry.channels, geometry.image_h, geometry.image_w)
    arr = np.stack(images) if images else np.zeros(shape)
    return ClientDataset(domain, arr, np.asarray(labels, dtype=np.int64), split, fingerprint)


def _make_domain(spec, first_id, ids, imgs_per_id, query_per_id, rng, geometry, fingerprint, palette):
    train_ids = [random_identity(first_id + i, rng, palette) for i in range(ids)]
    test_ids = [random_identity(first_id + ids + i, rng, palette) for i in range(ids)]
    train = _render_split(train_ids, spec, rng, geometry, imgs_per_id, "train", fingerprint)
    query = _render_split(test_ids, spec, rng, geometry, query_per_id, "query", fingerprint)
    gallery = _render_split(test_ids, spec, rng, geometry, imgs_per_id - query_per_id, "gallery", fingerprint)
    return DomainData(spec, train, query, gallery)


def make_federation(
    num_domains: int = 3,
    ids_per_domain: int = 20,
    imgs_per_id: int = 16,
    seed: int = 0,
    geometry: Geometry = Geometry(),
    query_per_id: int = 2,
    fingerprint: str = "",
) -> Federation:
    """``num_domains`` source domains plus one held-out target domain.

    Every domain gets ``ids_per_domain`` training identities and as many
    disjoint test identities (split into query / gallery). Identity ids are
    globally unique.
    """
    if min(num_domains, ids_per_domain) < 1:
        raise ValueError("num_domains and ids_per_domain must be positive")
    if imgs_per_id <= query_per_id or query_per_id < 1:
        raise ValueError("need at least one query and one gallery image per identity")
    rng = np.random.default_rng(seed)
    palette = clothing_palette(seed)
    specs = [_source_domain(rng, i, palette) for i in range(num_domains)] + [_target_domain(rng, palette)]
    specs = [geometry.clamp(s) for s in specs]
    domains = []
    for k, spec in enumerate(specs):
        drng = np.random.default_rng([seed, k + 1])
        first = 2 * k * ids_per_domain
        domains.append(
            _make_domain(spec, first, ids_per_domain, imgs_per_id, query_per_id, drng, geometry, fingerprint, palette)
        )
    return Federation(domains[:-1], domains[-1], geometry)


# ---------------------------------------------------------------------------
# FBDS files
# ---------------------------------------------------------------------------


def encode_dataset(ds: ClientDataset) -> bytes:
    meta = {
        "domain": ds.domain.to_dict(),
        "image_shape": list(ds.images.shape[1:]),
        "fingerprint": ds.fingerprint,
    }
    raw_meta = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = bytearray(DATASET_MAGIC)
    body += struct.pack("<HB", DATASET_VERSION, SPLITS.index(ds.split))
    body += struct.pack("<I", len(raw_meta)) + raw_meta
    if len(ds):
        body += struct.pack("<I", 1) + encode_entry("images", ds.images)
    else:
        body += struct.pack("<I", 0)
    body += struct.pack("<I", len(ds)) + np.asarray(ds.labels, dtype="<u4").tobytes()
    return with_crc(bytes(body))


def decode_dataset(blob: bytes) -> ClientDataset:
    if blob[:4] != DATASET_MAGIC:
        raise FormatError("not an FBDS file")
    r = Reader(strip_crc(blob))
    r.take(4)
    version, split = r.unpack("<HB")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported FBDS version {version}")
    if split >= len(SPLITS):
        raise FormatError(f"bad split code {split}")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (entries,) = r.unpack("<I")
    images = np.zeros((0, *meta["image_shape"]))
    for _ in range(entries):
        name, values = r.entry()
        if name != "images":
            raise FormatError(f"unexpected entry {name!r}")
        images = values
    (count,) = r.unpack("<I")
    labels = np.frombuffer(r.take(4 * count), dtype="<u4").astype(np.int64)
    if not r.done():
        raise FormatError("trailing bytes")
    return ClientDataset(DomainSpec.from_dict(meta["domain"]), images, labels, SPLITS[split], meta["fingerprint"])


def save_dataset(ds: ClientDataset, path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path, fingerprint: str | None = None) -> ClientDataset:
    ds = decode_dataset(Path(path).read_bytes())
    if fingerprint is not None and ds.fingerprint != fingerprint:
        raise FormatError(f"{path}: fingerprint {ds.fingerprint!r} does not match {fingerprint!r}")
    return ds
