"""Seeded synthetic experiments: prompt-group ablation and prompt-only fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .data import Federation, Geometry, make_federation
from .evaluation import evaluate
from .federated import FedConfig, run_federation
from .model import ModelConfig, PromptViT

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "holistic", "part", "bapm")

# shared by every variant; nothing here is tuned per variant
DEFAULT_FED = FedConfig(rounds=12, lr=0.05)
DEFAULT_PFTS_ROUNDS = 5


def variant_config(config: ModelConfig, variant: str) -> ModelConfig:
    if variant == "baseline":
        return replace(config, prompts_per_part=0, prompts_full=0)
    if variant == "holistic":
        return replace(config, prompts_per_part=0)
    if variant == "part":
        return replace(config, prompts_full=0)
    if variant == "bapm":
        return config
    raise ValueError(f"unknown variant {variant!r}")


@dataclass(frozen=True)
class DataConfig:
    num_domains: int = 3
    ids_per_domain: int = 20
    imgs_per_id: int = 16
    query_per_id: int = 2

    def build(self, model: ModelConfig, seed: int, fingerprint: str = "") -> Federation:
        geometry = Geometry(model.image_h, model.image_w, model.patch, model.channels)
        return make_federation(
            self.num_domains, self.ids_per_domain, self.imgs_per_id, seed, geometry, self.query_per_id, fingerprint
        )


@dataclass
class ExperimentResult:
    seed: int
    variant: str
    mAP: float
    rank1: float
    rank5: float


def train_full(federation: Federation, config: ModelConfig, fed: FedConfig, heads: dict | None = None) -> PromptViT:
    datasets = [d.train for d in federation.sources]
    model, _ = run_federation(replace(fed, mode="full"), config, datasets, client_heads=heads)
    return model


def target_result(model: PromptViT, federation: Federation, seed: int, variant: str) -> ExperimentResult:
    rep = evaluate(model, federation.target.query, federation.target.gallery)
    return ExperimentResult(seed, variant, rep.mAP, rep.rank(1), rep.rank(5))


def run_seed(
    data: DataConfig,
    config: ModelConfig,
    fed: FedConfig,
    seed: int,
    variants=VARIANTS,
    pfts_rounds: int | None = None,
    pfts_lr: float | None = None,
) -> list[ExperimentResult]:
    """Train every variant in full mode on one seeded federation and score the target.

    With ``pfts_rounds`` set, the baseline model also seeds a prompt-only run
    (full BAPM prompts, frozen backbone), reported as variant ``"pfts"``. The
    clients keep the classifier heads they trained during the baseline run.
    """
    federation = data.build(config, seed)
    fed = replace(fed, seed=seed)
    results = []
    baseline = None
    baseline_heads: dict = {}
    for variant in variants:
        heads = baseline_heads if variant == "baseline" else None
        model = train_full(federation, variant_config(config, variant), fed, heads)
        results.append(target_result(model, federation, seed, variant))
        log.info("seed %d %s: mAP %.4f", seed, variant, results[-1].mAP)
        if variant == "baseline":
            baseline = model
    if pfts_rounds:
        if baseline is None:
            raise ValueError("pfts needs the baseline variant")
        pf = replace(fed, mode="pfts", rounds=pfts_rounds, lr=pfts_lr or fed.lr)
        model, _ = run_federation(
            pf,
            config,
            [d.train for d in federation.sources],
            pretrained=baseline.arrays(),
            client_heads=baseline_heads,
        )
        results.append(target_result(model, federation, seed, "pfts"))
        log.info("seed %d pfts: mAP %.4f", seed, results[-1].mAP)
    return results


def summarize(results: list[ExperimentResult]) -> list[dict]:
    rows = []
    for variant in dict.fromkeys(r.variant for r in results):
        sel = [r for r in results if r.variant == variant]
        maps = np.array([r.mAP for r in sel])
        r1 = np.array([r.rank1 for r in sel])
        rows.append(
            {
                "variant": variant,
                "seeds": len(sel),
                "mAP_mean": float(maps.mean()),
                "mAP_std": float(maps.std()),
                "rank1_mean": float(r1.mean()),
                "rank1_std": float(r1.std()),
            }
        )
    return rows
