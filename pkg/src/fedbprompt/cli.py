"""Command-line entry point: generate, train, eval, ablate.

Exit codes: 0 ok, 2 config/usage error, 3 I/O or format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .codec import FormatError
from .data import SPLITS, DomainData, load_dataset, save_dataset
from .evaluation import RetrievalReport, evaluate, write_reports
from .experiments import DEFAULT_FED, DEFAULT_PFTS_ROUNDS, VARIANTS, DataConfig, run_seed, summarize
from .federated import FedConfig, Payload, decode_payload, encode_payload, run_federation
from .model import ConfigError, ModelConfig, PromptViT, backbone_shapes, count_params, is_prompt
from .numerics import NumericError

log = logging.getLogger("fedbprompt")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
OUT_ENV = "FEDBPROMPT_OUT"
# FedConfig fields that come from flags, not from the JSON document
_FED_FLAG_FIELDS = {"mode", "seed"}
MIN_ABLATION_SEEDS = 5


@dataclass(frozen=True)
class AblateConfig:
    seeds: int = 5
    pfts_rounds: int = DEFAULT_PFTS_ROUNDS
    pfts_lr: float | None = None

    def __post_init__(self):
        if self.seeds < MIN_ABLATION_SEEDS or self.pfts_rounds < 0:
            raise ConfigError(f"ablate.seeds must be >= {MIN_ABLATION_SEEDS} and ablate.pfts_rounds >= 0")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    fed: FedConfig = DEFAULT_FED
    data: DataConfig = field(default_factory=DataConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    seed: int = 0
    out: str = "runs"

    def fingerprint(self) -> str:
        """Hash of everything that determines the generated datasets."""
        m = self.model
        doc = {
            "geometry": [m.image_h, m.image_w, m.patch, m.channels],
            "data": asdict(self.data),
            "seed": self.seed,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        fed = {k: v for k, v in asdict(self.fed).items() if k not in _FED_FLAG_FIELDS}
        return {
            "model": self.model.to_dict(),
            "fed": fed,
            "data": asdict(self.data),
            "ablate": asdict(self.ablate),
            "seed": self.seed,
            "out": self.out,
        }


def _section(cls, doc, name, base=None, skip=()):
    if not isinstance(doc, dict):
        raise ConfigError(f"{name} must be an object")
    known = {f.name for f in fields(cls)} - set(skip)
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {', '.join(unknown)}")
    try:
        return replace(base, **doc) if base is not None else cls(**doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e


def parse_config(doc: dict) -> RunConfig:
    """Validate a JSON config document. Every key is optional; unknown keys are errors."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    base = RunConfig()
    cfg = RunConfig(
        model=_section(ModelConfig, doc.get("model", {}), "model"),
        fed=_section(FedConfig, doc.get("fed", {}), "fed", base.fed, _FED_FLAG_FIELDS),
        data=_section(DataConfig, doc.get("data", {}), "data"),
        ablate=_section(AblateConfig, doc.get("ablate", {}), "ablate"),
        seed=doc.get("seed", base.seed),
        out=doc.get("out", base.out),
    )
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    d = cfg.data
    if min(d.num_domains, d.ids_per_domain) < 1 or d.imgs_per_id <= d.query_per_id or d.query_per_id < 1:
        raise ConfigError("data: need >= 1 domain and identity, and >= 1 query and gallery image per identity")
    return cfg


def load_config(args) -> RunConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON ({e})") from e
    cfg = parse_config(doc)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = args.out or os.environ.get(OUT_ENV) or cfg.out
    return replace(cfg, out=out)


# ---------------------------------------------------------------------------
# artifact layout
# ---------------------------------------------------------------------------


def domain_names(cfg: RunConfig) -> list[str]:
    return [f"source{k}" for k in range(cfg.data.num_domains)] + ["target"]


def dataset_path(out: Path, domain: str, split: str) -> Path:
    return out / "data" / f"{domain}.{split}.fbds"


def load_domains(cfg: RunConfig) -> list[DomainData]:
    out, fp = Path(cfg.out), cfg.fingerprint()
    domains = []
    for name in domain_names(cfg):
        split = {s: load_dataset(dataset_path(out, name, s), fp) for s in SPLITS}
        domains.append(DomainData(split["train"].domain, split["train"], split["query"], split["gallery"]))
    return domains


def save_checkpoint(path: Path, model: PromptViT, mode: str, meta: dict) -> None:
    path.write_bytes(encode_payload(Payload.quantized(mode, model.arrays())))
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path, fingerprint: str) -> tuple[PromptViT, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("fingerprint") != fingerprint:
        raise FormatError(f"{path}: fingerprint {meta.get('fingerprint')!r} does not match config {fingerprint!r}")
    payload = decode_payload(path.read_bytes())
    config = _section(ModelConfig, meta["model"], f"{path} model")
    try:
        model = PromptViT.from_arrays(config, payload.tensors)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    return model, meta


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, args) -> int:
    fed = cfg.data.build(cfg.model, cfg.seed, cfg.fingerprint())
    out = Path(cfg.out)
    (out / "data").mkdir(parents=True, exist_ok=True)
    manifest = {"fingerprint": cfg.fingerprint(), "seed": cfg.seed, "domains": {}}
    for name, dom in zip(domain_names(cfg), fed.domains):
        for split in SPLITS:
            save_dataset(getattr(dom, split), dataset_path(out, name, split))
        counts = {s: len(getattr(dom, s)) for s in SPLITS}
        ids = len(dom.train.identities()) + len(dom.query.identities())
        manifest["domains"][name] = {"identities": ids, "images": counts}
        print(f"{name}: {ids} identities, " + ", ".join(f"{counts[s]} {s}" for s in SPLITS))
    (out / "data" / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    if args.mode == "pfts" and not args.pretrained:
        raise ConfigError("--mode pfts requires --pretrained")
    if args.mode == "pfts" and args.no_prompts:
        raise ConfigError("--no-prompts leaves nothing to train in pfts mode")
    domains = load_domains(cfg)
    holdout = args.holdout if args.holdout is not None else len(domains) - 1
    if not 0 <= holdout < len(domains):
        raise ConfigError(f"--holdout must be in [0, {len(domains) - 1}]")
    train_sets = [d.train for i, d in enumerate(domains) if i != holdout]
    model_cfg = cfg.model.without_prompts() if args.no_prompts else cfg.model
    fed = replace(cfg.fed, mode=args.mode, seed=cfg.seed)

    pretrained = None
    if args.pretrained:
        base, _ = load_checkpoint(args.pretrained, cfg.fingerprint())
        pretrained = {k: v for k, v in base.arrays().items() if not is_prompt(k)}
        if {k: v.shape for k, v in pretrained.items()} != backbone_shapes(model_cfg):
            raise ConfigError(f"{args.pretrained}: backbone does not match the model config")

    model, rounds = run_federation(fed, model_cfg, train_sets, pretrained=pretrained)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"model_{args.mode}_fold{holdout}"
    meta = {
        "fingerprint": cfg.fingerprint(),
        "mode": args.mode,
        "holdout": holdout,
        "model": model_cfg.to_dict(),
        "rounds": len(rounds),
        "uplink_bytes": rounds[-1].uplink_bytes[0],
        "params": dict(zip(("full", "prompts"), count_params(model_cfg))),
    }
    save_checkpoint(out / f"{stem}.fbpr", model, args.mode, meta)
    _write_table(out / f"{stem}.rounds.csv", [row for r in rounds for row in r.rows()])
    print(f"wrote {out / stem}.fbpr after {len(rounds)} rounds, uplink {meta['uplink_bytes']} bytes/client/round")
    return EXIT_OK


def _tag(rep: RetrievalReport, protocol: str, fold: str, meta: dict) -> RetrievalReport:
    rep.protocol, rep.fold, rep.mode = protocol, fold, meta["mode"]
    rep.round, rep.uplink_bytes, rep.fingerprint = meta["rounds"], meta["uplink_bytes"], meta["fingerprint"]
    return rep


def cmd_eval(cfg: RunConfig, args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs at least one --checkpoint")
    domains = load_domains(cfg)
    names = domain_names(cfg)
    reports = []
    if args.protocol == "2":
        if len(args.checkpoint) != 1:
            raise ConfigError("protocol 2 evaluates exactly one checkpoint")
        model, meta = load_checkpoint(args.checkpoint[0], cfg.fingerprint())
        for i, dom in enumerate(domains):
            if i != meta["holdout"]:
                reports.append(_tag(evaluate(model, dom.query, dom.gallery), "2", names[i], meta))
    else:
        for path in args.checkpoint:
            model, meta = load_checkpoint(path, cfg.fingerprint())
            dom = domains[meta["holdout"]]
            reports.append(_tag(evaluate(model, dom.query, dom.gallery), "1", names[meta["holdout"]], meta))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"report_protocol{args.protocol}"
    write_reports(reports, f"{stem}.json", f"{stem}.csv")
    for r in reports:
        print(f"protocol {r.protocol} {r.fold:>8s} {r.mode:>4s}  mAP {r.mAP:.4f}  rank1 {r.rank(1):.4f}")
    return EXIT_OK


def _write_table(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _print_row(row: dict) -> None:
    print(
        f"{row['variant']:>9s}  mAP {row['mAP_mean']:.4f} ± {row['mAP_std']:.4f}"
        f"  rank1 {row['rank1_mean']:.4f} ± {row['rank1_std']:.4f}  (seeds={row['seeds']})"
    )


def cmd_ablate(cfg: RunConfig, args) -> int:
    ab = cfg.ablate
    results = []
    for s in range(cfg.seed, cfg.seed + ab.seeds):
        results += run_seed(cfg.data, cfg.model, cfg.fed, s, VARIANTS, ab.pfts_rounds or None, ab.pfts_lr)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation_runs.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["seed", "variant", "mAP", "rank1", "rank5"])
        w.writeheader()
        w.writerows(asdict(r) for r in results)
    table = summarize([r for r in results if r.variant in VARIANTS])
    _write_table(out / "ablation.csv", table)
    for row in table:
        _print_row(row)
    if ab.pfts_rounds:
        pfts = summarize([r for r in results if r.variant in ("baseline", "pfts")])
        _write_table(out / "pfts.csv", pfts)
        _print_row(pfts[-1])
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help=f"output directory (else ${OUT_ENV}, else config 'out')")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fedbprompt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write synthetic FBDS datasets")
    t = sub.add_parser("train", parents=[common], help="run a federation and save an FBPR checkpoint")
    t.add_argument("--mode", choices=("full", "pfts"), default="full")
    t.add_argument("--pretrained", help="prompt-free checkpoint to start from (required for pfts)")
    t.add_argument("--no-prompts", action="store_true", help="train the prompt-free baseline")
    t.add_argument("--holdout", type=int, help="domain index left out of training (default: the target)")
    e = sub.add_parser("eval", parents=[common], help="evaluate checkpoints under protocol 1 or 2")
    e.add_argument("--protocol", choices=("1", "2"), default="2")
    e.add_argument("--checkpoint", action="append", default=[], help="FBPR checkpoint (repeatable)")
    sub.add_parser("ablate", parents=[common], help="prompt-group ablation over several seeds")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, KeyError, json.JSONDecodeError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
