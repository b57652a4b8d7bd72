"""Retrieval metrics (mAP, CMC) and the two evaluation protocols."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import ClientDataset, DomainData, Federation
from .model import PromptViT, extract_feature

REPORT_COLUMNS = ("protocol", "fold", "mode", "mAP", "rank1", "rank5", "round", "uplink_bytes")


def average_precision(relevant: Sequence[bool]) -> float:
    """Mean of precision@k over the ranks k holding a relevant item."""
    rel = np.asarray(relevant, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        raise ValueError("no relevant items")
    precisions = np.arange(1, hits.size + 1) / (hits + 1)
    return float(precisions.mean())


@dataclass
class RetrievalReport:
    mAP: float
    cmc: list[float]
    valid_queries: int
    skipped_queries: int
    protocol: str = ""
    fold: str = ""
    mode: str = ""
    round: int = 0
    uplink_bytes: int = 0
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def rank(self, k: int) -> float:
        return self.cmc[min(k, len(self.cmc)) - 1]

    def row(self) -> dict:
        return {
            "protocol": self.protocol,
            "fold": self.fold,
            "mode": self.mode,
            "mAP": self.mAP,
            "rank1": self.rank(1),
            "rank5": self.rank(5),
            "round": self.round,
            "uplink_bytes": self.uplink_bytes,
        }


def rank_gallery(qf: np.ndarray, gf: np.ndarray) -> np.ndarray:
    """Gallery indices per query, most similar first; ties keep gallery order."""
    sim = qf @ gf.T
    return np.argsort(-sim, axis=1, kind="stable")


def evaluate_features(
    qf: np.ndarray, ql: np.ndarray, gf: np.ndarray, gl: np.ndarray, max_rank: int = 20
) -> RetrievalReport:
    if len(gl) == 0:
        raise ValueError("empty gallery")
    order = rank_gallery(np.asarray(qf), np.asarray(gf))
    ql, gl = np.asarray(ql), np.asarray(gl)
    max_rank = min(max_rank, len(gl))
    aps, cmc, skipped = [], np.zeros(max_rank), 0
    for i in range(len(ql)):
        rel = gl[order[i]] == ql[i]
        if not rel.any():
            skipped += 1
            continue
        aps.append(average_precision(rel))
        first = int(np.argmax(rel))
        if first < max_rank:
            cmc[first:] += 1
    valid = len(aps)
    if valid == 0:
        return RetrievalReport(0.0, [0.0] * max_rank, 0, skipped)
    return RetrievalReport(float(np.mean(aps)), (cmc / valid).tolist(), valid, skipped)


def extract_features(model: PromptViT, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    if len(images) == 0:
        return np.zeros((0, model.config.d))
    return np.concatenate([extract_feature(model, images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def evaluate(model: PromptViT, query: ClientDataset, gallery: ClientDataset) -> RetrievalReport:
    return evaluate_features(
        extract_features(model, query.images), query.labels, extract_features(model, gallery.images), gallery.labels
    )


def protocol_1_folds(federation: Federation) -> list[tuple[int, list[DomainData], DomainData]]:
    """Leave-one-domain-out: (held-out index, training domains, held-out domain)."""
    domains = federation.domains
    return [(j, [d for i, d in enumerate(domains) if i != j], domains[j]) for j in range(len(domains))]


def run_protocol_1(models: Mapping[int, PromptViT], federation: Federation, mode: str = "") -> list[RetrievalReport]:
    """Evaluate each fold's model on the domain that fold held out."""
    reports = []
    for j, _, held_out in protocol_1_folds(federation):
        if j not in models:
            raise KeyError(f"missing model for fold {j}")
        rep = evaluate(models[j], held_out.query, held_out.gallery)
        rep.protocol, rep.fold, rep.mode = "1", held_out.spec.name, mode
        reports.append(rep)
    return reports


def run_protocol_2(model: PromptViT, sources: Sequence[DomainData], mode: str = "") -> list[RetrievalReport]:
    """One global model, evaluated on every source domain's own test split."""
    reports = []
    for dom in sources:
        rep = evaluate(model, dom.query, dom.gallery)
        rep.protocol, rep.fold, rep.mode = "2", dom.spec.name, mode
        reports.append(rep)
    return reports


def write_reports(reports: Sequence[RetrievalReport], json_path, csv_path) -> None:
    Path(json_path).write_text(json.dumps([asdict(r) for r in reports], indent=2, sort_keys=True))
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
