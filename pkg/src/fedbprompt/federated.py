"""Federated training loop with full-parameter and prompt-only (PFTS) modes.

Every broadcast and upload goes through the FBPR wire format, so clients only
ever see float32-quantised parameters and byte counts are measured, not
estimated.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .codec import FormatError, Reader, encode_entry, entry_nbytes, strip_crc, with_crc
from .data import ClientDataset
from .losses import DEFAULT_MARGIN, reid_loss
from .model import ModelConfig, PromptViT, backbone_shapes, init_prompts, is_prompt, prompt_shapes
from .numerics import Tensor

log = logging.getLogger(__name__)

PAYLOAD_MAGIC = b"FBPR"
PAYLOAD_VERSION = 1
MODES = ("full", "pfts")
HEADER_BYTES = 4 + 2 + 1 + 4
CRC_BYTES = 4


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 10
    local_epochs: int = 1
    lr: float = 0.05
    mode: str = "full"
    seed: int = 0
    ids_per_batch: int = 4
    instances_per_id: int = 4
    margin: float = DEFAULT_MARGIN
    workers: int = 1
    shared_client_rng: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.rounds < 1 or self.local_epochs < 1:
            raise ValueError("rounds and local_epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.ids_per_batch < 2 or self.instances_per_id < 2:
            raise ValueError("batches need >= 2 identities with >= 2 instances each")


# ---------------------------------------------------------------------------
# payloads
# ---------------------------------------------------------------------------


@dataclass
class Payload:
    mode: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def roster(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, tuple(self.tensors[k].shape)) for k in self.names()]

    @property
    def nbytes(self) -> int:
        return payload_nbytes(self.roster())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Payload) or self.mode != other.mode or self.roster() != other.roster():
            return False
        return all(
            np.asarray(self.tensors[k], np.float64).tobytes() == np.asarray(other.tensors[k], np.float64).tobytes()
            for k in self.names()
        )

    @classmethod
    def quantized(cls, mode: str, arrays: dict[str, np.ndarray]) -> "Payload":
        return cls(mode, {k: np.asarray(v, np.float32).astype(np.float64) for k, v in arrays.items()})


def payload_nbytes(roster: Sequence[tuple[str, tuple[int, ...]]]) -> int:
    return HEADER_BYTES + sum(entry_nbytes(n, s) for n, s in roster) + CRC_BYTES


def encode_payload(p: Payload) -> bytes:
    body = bytearray(PAYLOAD_MAGIC)
    body += struct.pack("<HBI", PAYLOAD_VERSION, MODES.index(p.mode), len(p.tensors))
    for name in p.names():
        body += encode_entry(name, p.tensors[name])
    return with_crc(bytes(body))


def decode_payload(blob: bytes) -> Payload:
    if blob[:4] != PAYLOAD_MAGIC:
        raise FormatError("not an FBPR message")
    r = Reader(strip_crc(blob))
    r.take(4)
    version, mode, count = r.unpack("<HBI")
    if version != PAYLOAD_VERSION:
        raise FormatError(f"unsupported FBPR version {version}")
    if mode >= len(MODES):
        raise FormatError(f"bad mode code {mode}")
    tensors = dict(r.entry() for _ in range(count))
    if not r.done():
        raise FormatError("trailing bytes")
    return Payload(MODES[mode], tensors)


def checksum(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k], np.float64).tobytes())
    return h.hexdigest()[:16]


def expected_roster(config: ModelConfig, mode: str) -> list[tuple[str, tuple[int, ...]]]:
    shapes = dict(prompt_shapes(config))
    if mode == "full":
        shapes.update(backbone_shapes(config))
    return sorted(shapes.items())


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def aggregation_weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes):
        raise ValueError("dataset sizes must be non-negative")
    total = sum(sizes)
    if total == 0:
        raise ValueError("total dataset size is zero")
    return np.array([s / total for s in sizes])


def aggregate(payloads: Sequence[Payload], sizes: Sequence[int]) -> Payload:
    """Size-weighted elementwise mean of client payloads."""
    if not payloads or len(payloads) != len(sizes):
        raise ValueError("need one size per payload")
    roster = payloads[0].roster()
    mode = payloads[0].mode
    for p in payloads[1:]:
        if p.roster() != roster or p.mode != mode:
            raise ValueError("payload rosters differ")
    weights = aggregation_weights(sizes)
    out = {}
    for name, _ in roster:
        acc = weights[0] * payloads[0].tensors[name]
        for w, p in zip(weights[1:], payloads[1:]):
            acc = acc + w * p.tensors[name]
        out[name] = acc
    return Payload(mode, out)


# ---------------------------------------------------------------------------
# clients
# ---------------------------------------------------------------------------


def pk_batches(labels: np.ndarray, ids_per_batch: int, per_id: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of P x K batches covering each identity's images in chunks of K."""
    chunks: dict[int, list[np.ndarray]] = {}
    for ident in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == ident))
        groups = [idx[i:i + per_id] for i in range(0, len(idx) - per_id + 1, per_id)]
        if groups:
            chunks[int(ident)] = groups
    batches = []
    while len(chunks) >= ids_per_batch:
        pick = rng.choice(sorted(chunks), size=ids_per_batch, replace=False)
        batch = []
        for ident in pick:
            batch.append(chunks[int(ident)].pop())
            if not chunks[int(ident)]:
                del chunks[int(ident)]
        batches.append(np.concatenate(batch))
    return batches


def client_seed(fed: FedConfig, k: int, t: int) -> list[int]:
    return [fed.seed, 0 if fed.shared_client_rng else k, t]


def init_head(d: int, classes: int, seed: Sequence[int]) -> np.ndarray:
    return np.random.default_rng([*seed, 7]).normal(0.0, 0.01, size=(d, classes))


@dataclass
class ClientResult:
    payload: Payload
    head: np.ndarray
    losses: list[float]
    backbone_checksum: str


def client_update(
    k: int,
    received: Payload,
    dataset: ClientDataset,
    config: ModelConfig,
    fed: FedConfig,
    t: int = 0,
    backbone: dict[str, np.ndarray] | None = None,
    head: np.ndarray | None = None,
) -> ClientResult:
    """Local SGD for ``fed.local_epochs`` epochs starting from ``received``.

    In pfts mode only the prompts and the client's own classifier head move;
    ``backbone`` is used as-is and never written to.
    """
    if received.mode != fed.mode:
        raise ValueError(f"payload mode {received.mode!r} does not match client mode {fed.mode!r}")
    if received.roster() != expected_roster(config, fed.mode):
        raise ValueError(f"payload roster does not match {fed.mode} mode for this model config")
    arrays = {k_: v.copy() for k_, v in received.tensors.items()}
    if fed.mode == "pfts":
        if backbone is None:
            raise ValueError("pfts client update needs the frozen backbone")
        arrays.update({k_: v.copy() for k_, v in backbone.items()})
    model = PromptViT.from_arrays(config, arrays)
    model.set_trainable(model.prompt_names() if fed.mode == "pfts" else list(model.params))

    ids, local = np.unique(dataset.labels, return_inverse=True)
    seed = client_seed(fed, k, t)
    if head is None:
        head = init_head(config.d, len(ids), seed)
    if head.shape != (config.d, len(ids)):
        raise ValueError("classifier head does not match the client's label space")
    head_t = Tensor(head.copy(), requires_grad=True, name="classifier")
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(fed.local_epochs):
        batches = pk_batches(local, fed.ids_per_batch, fed.instances_per_id, rng)
        if not batches:
            raise ValueError(f"client {k} cannot fill a single {fed.ids_per_batch}x{fed.instances_per_id} batch")
        for batch in batches:
            feat, pre = model.forward(dataset.images[batch])
            loss = reid_loss(feat, pre @ head_t, local[batch], fed.margin)
            grads = nx.backward(loss)
            for p, g in grads.items():
                p.data -= fed.lr * g
            losses.append(loss.item())
    names = model.prompt_names() if fed.mode == "pfts" else sorted(model.params)
    return ClientResult(
        payload=Payload(fed.mode, model.arrays(names)),
        head=head_t.data,
        losses=losses,
        backbone_checksum=checksum(model.arrays(model.backbone_names())),
    )


# ---------------------------------------------------------------------------
# server
# ---------------------------------------------------------------------------


@dataclass
class FedRound:
    round: int
    weights: list[float]
    client_losses: list[float]
    uplink_bytes: list[int]
    downlink_bytes: list[int]
    broadcast_names: list[str]
    upload_names: list[list[str]]
    backbone_checksums: list[str]
    global_checksum: str

    def rows(self) -> list[dict]:
        return [
            {
                "round": self.round,
                "client": k,
                "weight": self.weights[k],
                "loss": self.client_losses[k],
                "uplink_bytes": self.uplink_bytes[k],
                "downlink_bytes": self.downlink_bytes[k],
                "backbone_checksum": self.backbone_checksums[k],
                "global_checksum": self.global_checksum,
            }
            for k in range(len(self.weights))
        ]


def run_federation(
    fed: FedConfig,
    config: ModelConfig,
    datasets: Sequence[ClientDataset],
    pretrained: dict[str, np.ndarray] | None = None,
    on_round: Callable[[int, PromptViT], None] | None = None,
    client_heads: dict[int, np.ndarray] | None = None,
) -> tuple[PromptViT, list[FedRound]]:
    """Server loop: broadcast, local updates, size-weighted aggregation, T times.

    ``pretrained`` supplies the backbone. It is required in pfts mode (where
    prompts are freshly initialised and the backbone stays frozen) and optional
    in full mode. ``client_heads`` is client-local classifier state keyed by
    client index; it is read at the start and updated in place.
    """
    if not datasets:
        raise ValueError("need at least one client")
    if fed.mode == "pfts" and pretrained is None:
        raise ValueError("pfts mode needs a pretrained backbone checkpoint")
    init = PromptViT.init(config, fed.seed)
    arrays = init.arrays()
    if pretrained is not None:
        expected = backbone_shapes(config)
        backbone_in = {k: v for k, v in pretrained.items() if not is_prompt(k)}
        if {k: tuple(v.shape) for k, v in backbone_in.items()} != expected:
            raise ValueError("pretrained checkpoint does not match the model config backbone")
        arrays.update(backbone_in)
        arrays.update(init_prompts(config, np.random.default_rng([fed.seed, 1])))
    frozen = None
    if fed.mode == "pfts":
        frozen = Payload.quantized("pfts", {k: v for k, v in arrays.items() if not is_prompt(k)}).tensors
        global_p = Payload.quantized("pfts", {k: v for k, v in arrays.items() if is_prompt(k)})
    else:
        global_p = Payload.quantized("full", arrays)

    sizes = [len(ds) for ds in datasets]
    weights = aggregation_weights(sizes)
    heads = client_heads if client_heads is not None else {}
    rounds: list[FedRound] = []
    pool = ThreadPoolExecutor(fed.workers) if fed.workers > 1 else None
    try:
        for t in range(fed.rounds):
            blob = encode_payload(global_p)

            def work(k: int) -> ClientResult:
                return client_update(k, decode_payload(blob), datasets[k], config, fed, t, frozen, heads.get(k))

            ks = range(len(datasets))
            results = list(pool.map(work, ks)) if pool else [work(k) for k in ks]
            uploads = [encode_payload(r.payload) for r in results]
            received = [decode_payload(u) for u in uploads]
            for k, r in enumerate(results):
                heads[k] = r.head
            global_p = aggregate(received, sizes)
            rounds.append(
                FedRound(
                    round=t,
                    weights=weights.tolist(),
                    client_losses=[float(np.mean(r.losses)) for r in results],
                    uplink_bytes=[len(u) for u in uploads],
                    downlink_bytes=[len(blob)] * len(datasets),
                    broadcast_names=decode_payload(blob).names(),
                    upload_names=[p.names() for p in received],
                    backbone_checksums=[r.backbone_checksum for r in results],
                    global_checksum=checksum(global_p.tensors),
                )
            )
            log.info("round %d: mean loss %.4f", t, np.mean(rounds[-1].client_losses))
            if on_round is not None:
                on_round(t, _assemble(config, global_p, frozen))
    finally:
        if pool:
            pool.shutdown()

    return _assemble(config, global_p, frozen), rounds


def _assemble(config: ModelConfig, global_p: Payload, frozen: dict[str, np.ndarray] | None) -> PromptViT:
    arrays = decode_payload(encode_payload(global_p)).tensors
    if frozen is not None:
        arrays.update(frozen)
    return PromptViT.from_arrays(config, arrays)
