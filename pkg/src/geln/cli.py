"""Command-line front end: ``geln {synth,cm,train,eval,pipeline,repeat}``.

Settings are layered: preset < ``--config`` file < explicit flags. The config
file uses INI sections named after modules (``[trainer]``, ``[models]``,
``[dataset]``, ``[ensemble]``); unknown sections or keys are rejected.

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .cooccur import correlation_from_dataset, save_cm_csv
from .dataset import SPC_SCHEMA, Dataset, SynthConfig, load_manifest, save_manifest, synth_generate
from .models import FusionModel, GraphModel, ModelConfig, load_embedding_csv
from .trainer import TrainConfig, evaluate, param_counts, run_repeats, train_models, write_jsonl

log = logging.getLogger("geln")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
CM_MODES = {"raw": "raw_conditional", "row-stochastic": "row_stochastic"}

_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name != "model"}
_MODEL_KEYS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
_SYNTH_KEYS = {"n_train", "n_val", "n_test", "correlation_strength", "noise_scale", "clinical_dim", "dermoscopy_dim"}
_CONFIG_SECTIONS = {
    "trainer": set(_TRAIN_KEYS) - {"grid_step"},
    "models": set(_MODEL_KEYS),
    "dataset": _SYNTH_KEYS,
    "ensemble": {"grid_step"},
}


class ConfigError(ValueError):
    pass


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def read_config(path) -> dict[str, dict[str, str]]:
    """Parse a sectioned ``key = value`` file and reject anything unknown."""
    parser = configparser.ConfigParser(interpolation=None)
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    out = {}
    for section in parser.sections():
        if section not in _CONFIG_SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in _CONFIG_SECTIONS[section]:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
        out[section] = dict(parser.items(section))
    return out


def build_train_config(args, file_cfg: dict) -> TrainConfig:
    base = TrainConfig.preset(args.preset or "desk")
    train_over, model_over = {}, {}
    defaults = dataclasses.asdict(base)
    for key, value in file_cfg.get("trainer", {}).items():
        train_over[key] = _coerce(value, defaults[key])
    for key, value in file_cfg.get("ensemble", {}).items():
        train_over[key] = _coerce(value, defaults[key])
    for key, value in file_cfg.get("models", {}).items():
        model_over[key] = _coerce(value, defaults["model"][key])
    for flag, key in (("seed", "seed"), ("variant", "variant"), ("grid_step", "grid_step")):
        if getattr(args, flag, None) is not None:
            train_over[key] = getattr(args, flag)
    if getattr(args, "cm_mode", None) is not None:
        train_over["cm_mode"] = CM_MODES[args.cm_mode]
    model = dataclasses.replace(base.model, **model_over)
    return dataclasses.replace(base, model=model, **train_over)


def _announce(path: Path) -> Path:
    print(f"wrote {path}")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args, file_cfg):
    over = {k: _coerce(v, 0.0 if k in ("correlation_strength", "noise_scale") else 0)
            for k, v in file_cfg.get("dataset", {}).items()}
    for key in ("n_train", "n_val", "n_test", "correlation_strength", "noise_scale", "clinical_dim", "dermoscopy_dim"):
        if getattr(args, key) is not None:
            over[key] = getattr(args, key)
    defaults = SynthConfig()
    dims = {
        "clinical": over.pop("clinical_dim", defaults.feature_dims["clinical"]),
        "dermoscopy": over.pop("dermoscopy_dim", defaults.feature_dims["dermoscopy"]),
    }
    config = SynthConfig(schema=SPC_SCHEMA, feature_dims=dims, seed=args.seed if args.seed is not None else 0, **over)
    dataset = synth_generate(config)
    _announce(save_manifest(dataset, _out_dir(args) / "manifest.json"))


def cmd_cm(args, file_cfg):
    dataset = load_manifest(args.manifest)
    mode = CM_MODES[args.cm_mode or "raw"]
    cm = correlation_from_dataset(dataset, mode)
    _announce(save_cm_csv(cm.CM, dataset.schema.class_keys, _out_dir(args) / "cm.csv"))


def _train_and_save(dataset: Dataset, config: TrainConfig, out: Path, embedding_path=None):
    if embedding_path is not None:
        emb = load_embedding_csv(embedding_path, dataset.schema.class_keys)
        if emb.shape[1] != config.model.embed_dim:
            config = dataclasses.replace(config, model=dataclasses.replace(config.model, embed_dim=emb.shape[1]))
    else:
        emb = None
    fusion, graph, encoder, cm, logs = train_models(dataset, config, embedding=emb)
    _announce(save_cm_csv(cm.CM, dataset.schema.class_keys, out / "cm.csv"))
    _announce(save_checkpoint(fusion.state_dict(), out / "fusion.ckpt"))
    _announce(save_checkpoint(graph.state_dict(), out / "graph.ckpt"))
    if config.variant == "unfreeze":
        _announce(save_checkpoint(encoder.state_dict(), out / "graph_encoder.ckpt"))
    _announce(write_jsonl(logs["fusion"]["epochs"], out / "fusion_log.jsonl"))
    _announce(write_jsonl(logs["graph"]["epochs"], out / "graph_log.jsonl"))
    meta = {
        "config": config.to_dict(),
        "feature_dims": dict(dataset.feature_dims),
        "param_counts": param_counts(fusion, graph, encoder, config.variant),
    }
    path = out / "train_config.json"
    path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    _announce(path)
    return fusion, graph, encoder, config


def load_trained(ckpt_dir, dataset: Dataset):
    """Rebuild ``(fusion, graph, encoder, config)`` from a ``train`` output directory."""
    ckpt_dir = Path(ckpt_dir)
    meta = json.loads((ckpt_dir / "train_config.json").read_text(encoding="utf-8"))
    config = TrainConfig.from_dict(meta["config"])
    if meta["feature_dims"] != dict(dataset.feature_dims):
        raise ConfigError(f"checkpoint feature_dims {meta['feature_dims']} differ from the manifest's")
    rng = np.random.default_rng(0)
    fusion = FusionModel(dataset.schema, dataset.feature_dims, config.model, rng)
    fusion.load_state_dict(load_checkpoint(ckpt_dir / "fusion.ckpt"))
    graph_state = load_checkpoint(ckpt_dir / "graph.ckpt")
    graph = GraphModel(dataset.schema, graph_state["CM"], config.model, rng)
    graph.load_state_dict(graph_state)
    if config.variant == "unfreeze":
        encoder = FusionModel(dataset.schema, dataset.feature_dims, config.model, rng)
        encoder.load_state_dict(load_checkpoint(ckpt_dir / "graph_encoder.ckpt"))
    else:
        encoder = fusion
    for m in (fusion, graph, encoder):
        m.eval()
    return fusion, graph, encoder, config


def _write_reports(weights, reports, out: Path):
    for name, report in reports.items():
        _announce(report.save(out / f"report_{name}.json"))
    path = out / "weights.json"
    path.write_text(json.dumps({k: w.to_dict() for k, w in weights.items()}, indent=2) + "\n", encoding="utf-8")
    _announce(path)


def cmd_train(args, file_cfg):
    dataset = load_manifest(args.manifest)
    _train_and_save(dataset, build_train_config(args, file_cfg), _out_dir(args), args.embedding)


def cmd_eval(args, file_cfg):
    dataset = load_manifest(args.manifest)
    fusion, graph, encoder, config = load_trained(args.checkpoints, dataset)
    step = args.grid_step if args.grid_step is not None else config.grid_step
    weights, reports = evaluate(fusion, graph, encoder, dataset, step)
    _write_reports(weights, reports, _out_dir(args))


def cmd_pipeline(args, file_cfg):
    dataset = load_manifest(args.manifest)
    out = _out_dir(args)
    fusion, graph, encoder, config = _train_and_save(dataset, build_train_config(args, file_cfg), out, args.embedding)
    weights, reports = evaluate(fusion, graph, encoder, dataset, config.grid_step)
    _write_reports(weights, reports, out)


def format_table(summary: dict) -> str:
    labels = {"fusion": "Fusion model", "graph": "Graph model", "geln": "GELN (weighted)",
              "geln_mean_average": "GELN (mean average)"}
    lines = [f"variant={summary['variant']} repeats={summary['repeats']}", f"{'Model':<22}Mean AUC"]
    for key, label in labels.items():
        row = summary["table"][key]
        lines.append(f"{label:<22}{row['mean'] * 100:.2f} +/- {row['std'] * 100:.2f}")
    return "\n".join(lines)


def cmd_repeat(args, file_cfg):
    dataset = load_manifest(args.manifest)
    config = build_train_config(args, file_cfg)
    emb = load_embedding_csv(args.embedding, dataset.schema.class_keys) if args.embedding else None
    if emb is not None and emb.shape[1] != config.model.embed_dim:
        config = dataclasses.replace(config, model=dataclasses.replace(config.model, embed_dim=emb.shape[1]))
    summary = run_repeats(dataset, config, args.repeats, emb)
    out = _out_dir(args)
    path = out / "repeat_table.json"
    path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(format_table(summary))
    _announce(path)


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geln", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        if manifest:
            p.add_argument("--manifest", required=True, help="input JSON manifest (required)")
        p.add_argument("--out", required=True, help="output directory; every artifact goes here (required)")
        p.add_argument("--config", default=None, help="sectioned key = value config file (default: none)")
        p.add_argument("--seed", type=int, default=None, help="root seed (default: 0)")

    def training(p):
        p.add_argument("--preset", choices=["desk", "paper"], default=None,
                       help="desk: 60 epochs, lr 3e-4, SWA last 10; paper: 250 epochs, lr 3e-5, SWA last 50 "
                            "(default: desk)")
        p.add_argument("--variant", choices=["freeze", "unfreeze"], default=None,
                       help="graph-stage variant (default: unfreeze)")
        p.add_argument("--cm-mode", choices=sorted(CM_MODES), default=None,
                       help="correlation matrix normalisation (default: raw)")
        p.add_argument("--grid-step", type=float, default=None, help="weight-search grid step (default: 0.05)")
        p.add_argument("--embedding", default=None,
                       help="label embedding CSV, one row per category/class (default: seeded random)")

    p = sub.add_parser("synth", help="generate a synthetic manifest")
    common(p, manifest=False)
    p.add_argument("--n-train", type=int, default=None, help="train cases (default: 600)")
    p.add_argument("--n-val", type=int, default=None, help="validation cases (default: 200)")
    p.add_argument("--n-test", type=int, default=None, help="test cases (default: 200)")
    p.add_argument("--correlation-strength", type=float, default=None, help="label dependence in [0, 1] (default: 0.8)")
    p.add_argument("--noise-scale", type=float, default=None, help="feature noise scale (default: 3.0)")
    p.add_argument("--clinical-dim", type=int, default=None, help="clinical feature width (default: 64)")
    p.add_argument("--dermoscopy-dim", type=int, default=None, help="dermoscopy feature width (default: 64)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cm", help="correlation matrix CSV from train+val label co-occurrence")
    common(p)
    p.add_argument("--cm-mode", choices=sorted(CM_MODES), default=None,
                   help="correlation matrix normalisation (default: raw)")
    p.set_defaults(func=cmd_cm)

    p = sub.add_parser("train", help="train the fusion and graph models, write checkpoints and logs")
    common(p)
    training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="search ensemble weights on val and report on test")
    common(p)
    p.add_argument("--checkpoints", required=True, help="directory written by `train` (required)")
    p.add_argument("--grid-step", type=float, default=None, help="weight-search grid step (default: as trained)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="train, search weights and report in one run")
    common(p)
    training(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("repeat", help="repeat the pipeline over seeds and tabulate mean +/- std")
    common(p)
    training(p)
    p.add_argument("--repeats", type=int, default=1, help="number of seeded runs (default: 1)")
    p.set_defaults(func=cmd_repeat)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        file_cfg = read_config(args.config) if args.config else {}
        if args.command == "repeat" and args.repeats < 1:
            raise ConfigError("--repeats must be at least 1")
        args.func(args, file_cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
