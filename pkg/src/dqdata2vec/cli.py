"""Command-line entry point.

Subcommands::

    dqdata2vec gen-data  --config cfg.json --out DIR [--seed N]
    dqdata2vec pretrain  --config cfg.json --out DIR [--seed N] [--data DIR] [--regime deep]
    dqdata2vec finetune  --config cfg.json --out DIR [--seed N] [--data DIR] [--checkpoint DIR]
    dqdata2vec analyze   --checkpoint DIR --out DIR [--data DIR]
    dqdata2vec ablate    --ablation S1..S7 --config cfg.json --out DIR [--seed N]

Every command writes ``run_config.json`` into its output directory; passing
that file back through ``--config`` replays the run.

Exit codes: 0 success, 2 usage, 3 configuration, 4 codeword collapse,
5 loss explosion, 6 data, 7 checkpoint.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .analysis import (
    collect_counts,
    conditional_report,
    nmi,
    per_language_metrics,
    purity,
    shuffled_matrix,
    write_metrics,
)
from .backbone import ModelConfig
from .errors import (
    CheckpointError,
    CollapseError,
    ConfigError,
    DataError,
    LossExplosionError,
    RegimeError,
)
from .model import QuantizerConfig
from .objectives import LossWeights
from .synthdata import CorpusSpec, generate_corpus, load_corpus, load_corpus_spec, save_corpus
from .trainer import (
    FinetuneConfig,
    TrainConfig,
    build_model,
    finetune,
    load_checkpoint,
    model_from_checkpoint,
    pretrain,
)

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
SECTIONS = {
    "corpus": CorpusSpec,
    "model": ModelConfig,
    "quantizer": QuantizerConfig,
    "weights": LossWeights,
    "train": TrainConfig,
    "finetune": FinetuneConfig,
}

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_COLLAPSE, EXIT_EXPLOSION, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4, 5, 6, 7

ABLATION_IDS = ("S1", "S2", "S3", "S4", "S5", "S6", "S7")
# Runs expected to fail are capped so they always terminate.
ABLATION_UPDATE_BUDGET = 1500


def default_config() -> dict:
    cfg = {"version": CONFIG_VERSION, "seed": 0}
    for name, cls in SECTIONS.items():
        cfg[name] = cls().to_dict()
    return cfg


def merge_config(base: dict, override: dict) -> dict:
    """Section-wise overlay of ``override`` onto ``base``; unknown keys are rejected."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key in ("version", "seed", "command", "ablation"):
            out[key] = value
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            unknown = set(value) - set(out[key])
            if unknown:
                raise ConfigError(f"unknown keys in section {key!r}: {sorted(unknown)}")
            out[key].update(value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return out


def load_config(path=None) -> dict:
    cfg = default_config()
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    version = user.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version {version} is not supported (expected {CONFIG_VERSION})")
    return merge_config(cfg, user)


def standard_preset(regime: str) -> dict:
    """Deltas of the standard layout per regime; deep adds a CNN block to both adapters."""
    if regime == "shallow":
        return {"train": {"regime": "shallow"}, "quantizer": {"extra_block": "none"}}
    if regime == "deep":
        return {"train": {"regime": "deep"},
                "quantizer": {"extra_block": "cnn", "extra_levels": ["utterance", "frame"]}}
    raise ConfigError(f"unknown regime {regime!r}")


def ablation_preset(ablation_id: str) -> dict:
    """Config deltas of one comparison/ablation row (S1..S7)."""
    presets = {
        # gumbel-softmax quantizer on the frame level only
        "S1": {"train": {"regime": "shallow"},
               "quantizer": {"use_lqt": False, "use_pqt": True, "pqt_type": "gumbel", "extra_block": "none"}},
        # a single codebook group
        "S2": {"train": {"regime": "shallow"}, "quantizer": {"groups": 1, "extra_block": "none"}},
        # L2 normalisation of the frame-level input
        "S3": {"train": {"regime": "shallow"},
               "quantizer": {"use_lqt": False, "use_pqt": True, "pqt_norm": "l2", "extra_block": "none"}},
        # instance normalisation (over time, then pooled) of the utterance-level input
        "S4": {"train": {"regime": "shallow"},
               "quantizer": {"use_lqt": True, "use_pqt": False, "lqt_norm": "instance", "extra_block": "none"}},
        # Transformer block in the frame-level adapter
        "S5": {"train": {"regime": "shallow"},
               "quantizer": {"use_lqt": False, "use_pqt": True, "extra_block": "transformer",
                             "extra_levels": ["frame"], "allow_unstable": True}},
        # CNN block in the frame-level adapter
        "S6": {"train": {"regime": "shallow"},
               "quantizer": {"use_lqt": False, "use_pqt": True, "extra_block": "cnn",
                             "extra_levels": ["frame"], "allow_unstable": True}},
        # deep regime without the adapter CNN block
        "S7": {"train": {"regime": "deep"}, "quantizer": {"extra_block": "none"}},
    }
    if ablation_id not in presets:
        raise ConfigError(f"unknown ablation {ablation_id!r}; choose from {', '.join(ABLATION_IDS)}")
    return presets[ablation_id]


def apply_ablation(cfg: dict, ablation_id: str) -> dict:
    out = merge_config(cfg, ablation_preset(ablation_id))
    out["ablation"] = ablation_id
    if ablation_id in ("S5", "S6"):
        out["train"]["total_updates"] = min(out["train"]["total_updates"], ABLATION_UPDATE_BUDGET)
    return out


def apply_seed(cfg: dict, seed) -> dict:
    out = copy.deepcopy(cfg)
    if seed is not None:
        out["seed"] = int(seed)
    out["train"]["seed"] = out["seed"]
    out["finetune"]["seed"] = out["seed"]
    return out


def sections(cfg: dict):
    """Typed config objects, validated."""
    objs = {name: cls.from_dict(cfg[name]) for name, cls in SECTIONS.items()}
    objs["corpus"].validate()
    objs["model"].validate()
    objs["weights"].validate()
    objs["train"].validate()
    objs["finetune"].validate()
    objs["quantizer"].validate(objs["train"].regime)
    return objs


def model_config_dict(cfg: dict, corpus_spec: CorpusSpec) -> dict:
    """The architecture description stored with checkpoints."""
    model = dict(cfg["model"])
    model["feature_dim"] = corpus_spec.feature_dim
    return {
        "model": model,
        "quantizer": cfg["quantizer"],
        "num_languages": corpus_spec.num_languages,
        "num_phonemes": corpus_spec.num_phonemes,
        "regime": cfg["train"]["regime"],
    }


def write_run_config(cfg: dict, out_dir: Path, command: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    record = dict(cfg)
    record["command"] = command
    (out_dir / "run_config.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def obtain_corpus(cfg: dict, data_dir=None):
    """Load a saved corpus, or regenerate the configured one."""
    if data_dir is not None:
        spec = load_corpus_spec(data_dir) or CorpusSpec.from_dict(cfg["corpus"])
        return load_corpus(data_dir), spec
    spec = CorpusSpec.from_dict(cfg["corpus"])
    return generate_corpus(spec), spec


# analysis -----------------------------------------------------------------

def analyze_model(model, corpus, out_dir: Path, shuffle_seed=0, render=True) -> dict:
    """Conditional tables (TSV + PNG), metrics with shuffled-label baselines."""
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {}
    for level, quantizer in (("language", model.lqt), ("phoneme", model.pqt)):
        if quantizer is None:
            continue
        matrix = collect_counts(model, corpus, level)
        report = conditional_report(matrix, out_dir / f"{level}_conditional.tsv")
        shuffled = shuffled_matrix(matrix, seed=shuffle_seed)
        entry = report.to_dict()
        entry["shuffled_nmi"] = nmi(shuffled.counts)
        entry["shuffled_purity"] = purity(shuffled.counts)
        record[level] = entry
        if render:
            from .plotting import render_conditional

            render_conditional(matrix, out_dir / f"{level}_conditional.png",
                               title=f"{level}: NMI={report.nmi:.3f} ACN={report.acn}")
    if model.pqt is not None and len({u.language_id for u in corpus}) > 1:
        record["phoneme_per_language"] = {
            str(k): {"purity": v.purity, "nmi": v.nmi} for k, v in per_language_metrics(model, corpus).items()
        }
    write_metrics(out_dir / "metrics.json", record)
    return record


# commands -----------------------------------------------------------------

def cmd_gen_data(args, cfg):
    if args.seed is not None:
        cfg["corpus"]["seed"] = int(args.seed)
    spec = CorpusSpec.from_dict(cfg["corpus"])
    spec.validate()
    out = Path(args.out)
    write_run_config(cfg, out, "gen-data")
    corpus = generate_corpus(spec)
    save_corpus(corpus, out / "corpus", spec)
    print(f"wrote {len(corpus)} utterances to {out / 'corpus'}")


def _pretrain(cfg, out: Path, data_dir=None):
    objs = sections(cfg)
    corpus, spec = obtain_corpus(cfg, data_dir)
    arch = model_config_dict(cfg, spec)
    model = build_model(arch, seed=cfg["seed"])
    state = pretrain(model, corpus, objs["train"], objs["weights"], out_dir=out)
    return model, corpus, state


def cmd_pretrain(args, cfg):
    if args.regime is not None:
        cfg = merge_config(cfg, standard_preset(args.regime))
    out = Path(args.out)
    write_run_config(cfg, out, "pretrain")
    _, _, state = _pretrain(cfg, out, args.data)
    last = state["history"][-1] if state["history"] else {}
    print(f"pretrained {state['step']} updates; final loss {last.get('total', float('nan')):.4f}")


def cmd_finetune(args, cfg):
    out = Path(args.out)
    write_run_config(cfg, out, "finetune")
    objs = sections(cfg)
    corpus, spec = obtain_corpus(cfg, args.data)
    state = load_checkpoint(args.checkpoint) if args.checkpoint else None
    _, report = finetune(state, corpus, objs["finetune"], model_config=model_config_dict(cfg, spec))
    record = {"token_error_rate": report["token_error_rate"], "init": "pretrained" if state else "random",
              "train_utterances": report["train_utterances"], "eval_utterances": report["eval_utterances"],
              "unit": objs["finetune"].unit}
    write_metrics(out / "finetune_metrics.json", record)
    print(f"token error rate {report['token_error_rate']:.4f} ({record['init']} init)")


def cmd_analyze(args, cfg):
    if not args.checkpoint:
        raise ConfigError("analyze needs --checkpoint")
    state = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(state)
    if args.data is not None:
        corpus = load_corpus(args.data)
    else:
        corpus = generate_corpus(CorpusSpec.from_dict(cfg["corpus"]))
    out = Path(args.out)
    write_run_config(cfg, out, "analyze")
    record = analyze_model(model, corpus, out)
    _print_metrics(record)


def cmd_ablate(args, cfg):
    if not args.ablation:
        raise ConfigError("ablate needs --ablation")
    cfg = apply_ablation(cfg, args.ablation)
    out = Path(args.out)
    write_run_config(cfg, out, "ablate")
    try:
        model, corpus, _ = _pretrain(cfg, out, args.data)
    except CollapseError as exc:
        write_metrics(out / "failure.json", {"ablation": args.ablation, "kind": exc.kind,
                                              "step": exc.step, "message": str(exc)})
        raise
    record = analyze_model(model, corpus, out / "analysis")
    record["ablation"] = args.ablation
    write_metrics(out / "metrics.json", record)
    _print_metrics(record)


def _print_metrics(record):
    for level in ("language", "phoneme"):
        if level in record:
            r = record[level]
            tag = "L" if level == "language" else "P"
            print(f"{tag}P={r['purity']:.4f} {tag}NMI={r['nmi']:.4f} ACN={r['acn']} AGN={r['agn']} "
                  f"shuffled {tag}NMI={r['shuffled_nmi']:.4f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dqdata2vec", description="Decoupled-quantizer data2vec toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config (missing keys take defaults)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the run seed (corpus seed for gen-data)")
        p.add_argument("--data", help="corpus directory written by gen-data")
        if name in ("finetune", "analyze"):
            p.add_argument("--checkpoint", help="checkpoint directory")
        if name == "pretrain":
            p.add_argument("--regime", choices=("shallow", "deep"), help="apply the standard regime layout")
        if name == "ablate":
            p.add_argument("--ablation", required=True, choices=ABLATION_IDS)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        cfg = apply_seed(cfg, None if args.command == "gen-data" else args.seed)
        COMMANDS[args.command](args, cfg)
    except LossExplosionError as exc:
        print(f"error: loss explosion: {exc}", file=sys.stderr)
        return EXIT_EXPLOSION
    except CollapseError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return EXIT_COLLAPSE
    except CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, RegimeError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TypeError as exc:
        # dataclass construction with wrongly typed or misspelled fields
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
