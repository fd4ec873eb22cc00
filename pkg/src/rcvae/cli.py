"""Command-line entry point: ``rcvae <command> --config run.json [overrides]``.

Every command reads one JSON config (flags win over file values), writes its
outputs into ``<output_dir>/<name>/`` and echoes the effective config there
as ``config.json``. Exit codes: 0 success, 2 config/data error, 3 missing
upstream artifact, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio, embedviz, evalab, hpo
from .dataio import TYPE_COLUMNS, TYPES, PackedDataset, ScalerParams, SplitSpec
from .errors import FormatError, NumericError, RcvaeError
from .labels import LabelKey
from .model import RcvaeConfig, generate
from .numcore import Rng
from .trainer import TrainConfig, fit_final, load_checkpoint, save_checkpoint

log = logging.getLogger("rcvae")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = ("preprocess", "hpo", "train", "generate", "evaluate", "ablate", "analyze")

DEFAULT_CONFIG = {
    "name": "default",
    "output_dir": "run",
    "seed": 0,
    "data": {
        "source": "synthetic",
        "csv": None,
        "metadata": None,
        "n_batteries": 8,
        "eol_range": [300, 1500],
        "n_points": 200,
    },
    "n_cycles": 20,
    "H": 16,
    "W": 16,
    "match_weight": 0.5,
    "model": {"embed_dim": 16, "latent_dim": 8, "hidden": 64, "enc_layers": 4, "dec_layers": 4},
    "train": {"max_epochs": 300, "patience": 100, "batch_size": 32, "lr": 1e-3,
              "final_fit": "holdout", "use_hpo": True},
    "hpo": {"budget": 10, "trial_epochs": 50, "method": "gp"},
    "ablate": {"mode": "skip"},
    "analyze": {"k": 6, "perplexity": 30.0, "iterations": 1000, "svg": True},
}


class MissingArtifact(RcvaeError):
    pass


class ConfigError(RcvaeError, ValueError):
    pass


# Config ------------------------------------------------------------------

def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be an object")
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def _set_path(cfg: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    try:
        node[keys[-1]] = json.loads(raw)
    except json.JSONDecodeError:
        node[keys[-1]] = raw


def validate_config(cfg: dict) -> None:
    data = cfg["data"]
    if data["source"] not in ("synthetic", "csv"):
        raise ConfigError(f"data.source must be 'synthetic' or 'csv', got {data['source']!r}")
    if data["source"] == "csv":
        for key in ("csv", "metadata"):
            if not data[key] or not Path(data[key]).is_file():
                raise ConfigError(f"data.{key} file not found: {data[key]!r}")
    for key in ("n_cycles", "H", "W"):
        if not isinstance(cfg[key], int) or cfg[key] < 1:
            raise ConfigError(f"{key} must be a positive integer")
    if not 0.0 <= float(cfg["match_weight"]) <= 1.0:
        raise ConfigError("match_weight must lie in [0, 1]")
    if cfg["train"]["final_fit"] not in ("holdout", "fixed"):
        raise ConfigError("train.final_fit must be 'holdout' or 'fixed'")
    if cfg["ablate"]["mode"] not in ("skip", "retrain"):
        raise ConfigError("ablate.mode must be 'skip' or 'retrain'")


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = _merge(cfg, user)
    for flag, key in (("seed", "seed"), ("name", "name"), ("output_dir", "output_dir"),
                      ("n_cycles", "n_cycles"), ("match_weight", "match_weight")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "epochs", None) is not None:
        cfg["train"]["max_epochs"] = args.epochs
    if getattr(args, "budget", None) is not None:
        cfg["hpo"]["budget"] = args.budget
    for item in getattr(args, "set", None) or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(cfg, key.strip(), raw)
    validate_config(cfg)
    return cfg


def run_dir(cfg: dict) -> Path:
    return Path(cfg["output_dir"]) / cfg["name"]


def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingArtifact(f"missing artifact {path}; run the upstream command first")
    return path


def _model_config(cfg: dict, d_x: int, hp: dict | None = None) -> tuple:
    m, t = cfg["model"], cfg["train"]
    hidden = int(hp["h"]) if hp else m["hidden"]
    mcfg = RcvaeConfig(d_x=d_x, embed_dim=int(hp["D"]) if hp else m["embed_dim"],
                       latent_dim=min(int(hp["J"]), hidden) if hp else m["latent_dim"],
                       hidden=hidden, enc_layers=m["enc_layers"], dec_layers=m["dec_layers"])
    tcfg = TrainConfig(max_epochs=t["max_epochs"], patience=t["patience"],
                       batch_size=int(hp["K"]) if hp else t["batch_size"],
                       lr=float(hp["eta"]) if hp else t["lr"], seed=cfg["seed"],
                       match_weight=cfg["match_weight"])
    return mcfg, tcfg


# Dataset archive ---------------------------------------------------------

_SPLITS = ("train", "val", "test")


def write_dataset(prep: dataio.PreparedData, path: Path) -> None:
    """Sequence of ``.npy`` records: H, W, scaler, then (X, labels, ids) per split."""
    with open(path, "wb") as fh:
        np.save(fh, np.array([prep.train.H, prep.train.W], dtype=np.int64), allow_pickle=False)
        np.save(fh, np.stack([prep.scaler.mins, prep.scaler.maxs]), allow_pickle=False)
        for name in _SPLITS:
            ds = getattr(prep, name)
            np.save(fh, ds.X, allow_pickle=False)
            np.save(fh, np.array([str(k) for k in ds.labels], dtype=str), allow_pickle=False)
            np.save(fh, np.array(ds.battery_ids, dtype=str), allow_pickle=False)


def read_dataset(path: Path) -> tuple:
    """Returns ``({"train": ds, "val": ds, "test": ds}, scaler)``."""
    _require(path)
    try:
        with open(path, "rb") as fh:
            H, W = (int(v) for v in np.load(fh, allow_pickle=False))
            mm = np.load(fh, allow_pickle=False)
            sets = {}
            for name in _SPLITS:
                X = np.load(fh, allow_pickle=False)
                labels = [LabelKey.parse(s) for s in np.load(fh, allow_pickle=False)]
                ids = [str(s) for s in np.load(fh, allow_pickle=False)]
                sets[name] = PackedDataset(X.reshape(len(labels), -1), labels, ids, H, W)
    except (ValueError, EOFError, OSError) as exc:
        raise FormatError(f"{path}: unreadable dataset archive ({exc})") from exc
    return sets, ScalerParams(mm[0], mm[1])


def _records(cfg: dict) -> list:
    data = cfg["data"]
    if data["source"] == "csv":
        return dataio.load_csv(data["csv"], data["metadata"])
    return dataio.synth_generate(Rng(cfg["seed"]).spawn("data"), data["n_batteries"], cfg["n_cycles"],
                                 tuple(data["eol_range"]), data["n_points"])


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# Commands ----------------------------------------------------------------

def cmd_preprocess(cfg: dict, out: Path) -> None:
    records = _records(cfg)
    prep = dataio.prepare(records, SplitSpec(seed=cfg["seed"], n_cycles=cfg["n_cycles"]), cfg["H"], cfg["W"])
    write_dataset(prep, out / "dataset.bin")
    _write_rows(out / "manifest.csv", ("index", "battery_id", "eol", "ecl", "split"),
                [(i, b, k.eol, k.ecl, s) for i, (b, k, s) in enumerate(prep.assignment)])
    _write_rows(out / "scaler.csv", ("type", "min", "max"),
                [(t, repr(float(lo)), repr(float(hi)))
                 for t, lo, hi in zip(TYPES, prep.scaler.mins, prep.scaler.maxs)])
    log.info("preprocessed %d samples: %d train / %d val / %d test", len(prep.assignment),
             len(prep.train), len(prep.val), len(prep.test))


def cmd_hpo(cfg: dict, out: Path) -> None:
    sets, _ = read_dataset(out / "dataset.bin")
    h = cfg["hpo"]
    result = hpo.run_hpo(sets["train"], sets["val"], budget=h["budget"], rng=Rng(cfg["seed"]).spawn("hpo"),
                         base_model={**cfg["model"], "match_weight": cfg["match_weight"]},
                         trial_epochs=h["trial_epochs"], method=h["method"])
    hpo.write_trial_log(result.trials, out / "hpo_trials.csv")
    (out / "best_hparams.json").write_text(json.dumps({"best": result.best, "val_mae": result.best_value},
                                                      indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("best hyperparameters %s (validation MAE %.6g)", result.best, result.best_value)


def cmd_train(cfg: dict, out: Path) -> None:
    sets, scaler = read_dataset(out / "dataset.bin")
    hp = None
    best_path = out / "best_hparams.json"
    if cfg["train"]["use_hpo"] and best_path.is_file():
        hp = json.loads(best_path.read_text(encoding="utf-8"))["best"]
        log.info("using searched hyperparameters %s", hp)
    mcfg, tcfg = _model_config(cfg, sets["train"].d_x, hp)
    ckpt, state = fit_final(sets["train"], sets["val"], mcfg, tcfg, scaler, mode=cfg["train"]["final_fit"])
    save_checkpoint(ckpt, out / "checkpoint.rcva")
    log.info("trained %d epochs; best epoch %d with validation MAE %.6g", state.epoch, state.best_epoch,
             state.best_val)


def cmd_generate(cfg: dict, out: Path, eol: int, ecl: int, count: int) -> None:
    ckpt = load_checkpoint(_require(out / "checkpoint.rcva"))
    query = LabelKey(eol, ecl)
    feats, used = generate(ckpt.params, ckpt.vocab, query, count, Rng(cfg["seed"]).spawn("generate"),
                           cfg["match_weight"])
    if used != query:
        log.info("condition %s not seen in training; matched to %s", query, used)
    phys = dataio.scale_invert(ckpt.scaler, dataio.unpack_array(feats, ckpt.H, ckpt.W))
    rows = [(s, t, *(repr(float(phys[s, i, t])) for i in range(len(TYPES))))
            for s in range(count) for t in range(phys.shape[2])]
    _write_rows(out / "generated.csv", ("sample", "t_index") + TYPE_COLUMNS, rows)


def cmd_evaluate(cfg: dict, out: Path) -> None:
    ckpt = load_checkpoint(_require(out / "checkpoint.rcva"))
    sets, _ = read_dataset(out / "dataset.bin")
    rep = evalab.report(ckpt, sets["test"], weight=cfg["match_weight"])
    for query, used in rep.matched:
        log.info("test label %s matched to training label %s", query, used)
    evalab.write_report_csv([rep], out / "metrics.csv")
    log.info("test MAE %.6g, RMSE %.6g", rep.mae_total, rep.rmse_total)


def cmd_ablate(cfg: dict, out: Path) -> None:
    ckpt = load_checkpoint(_require(out / "checkpoint.rcva"))
    sets, _ = read_dataset(out / "dataset.bin")
    mode = cfg["ablate"]["mode"]
    kwargs = {"weight": cfg["match_weight"]}
    if mode == "retrain":
        _, tcfg = _model_config(cfg, sets["train"].d_x)
        kwargs.update(train_set=sets["train"], val_set=sets["val"], train_config=tcfg)
    reports = evalab.ablation_sweep(ckpt, sets["test"], mode, **kwargs)
    evalab.write_report_csv(reports, out / "ablation.csv")


def cmd_analyze(cfg: dict, out: Path) -> None:
    ckpt = load_checkpoint(_require(out / "checkpoint.rcva"))
    a = cfg["analyze"]
    labels = [ckpt.vocab.key(i) for i in range(len(ckpt.vocab))]
    tcfg = embedviz.TsneConfig(perplexity=a["perplexity"], iterations=a["iterations"], seed=cfg["seed"])
    emb, km, notes = embedviz.analyze(ckpt.params.embedding.weight, labels, a["k"], cfg["match_weight"], tcfg)
    embedviz.write_points_csv(labels, emb.points, km.labels, out / "embedding_points.csv")
    embedviz.write_annotations_csv(notes, out / "annotations.csv")
    if a["svg"]:
        embedviz.write_svg(emb.points, km.labels, notes, out / "embedding.svg")


# Entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (data, split, training)")
    common.add_argument("--workers", type=int, default=1, help="worker processes (>= 1)")
    common.add_argument("--name", help="run name (directory under output_dir)")
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("--n-cycles", dest="n_cycles", type=int)
    common.add_argument("--match-weight", dest="match_weight", type=float)
    common.add_argument("--epochs", type=int, help="override train.max_epochs")
    common.add_argument("--budget", type=int, help="override hpo.budget")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config entry by dotted path, e.g. model.hidden=128")

    parser = argparse.ArgumentParser(prog="rcvae", description="Conditional VAE for battery charging curves")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "generate":
            p.add_argument("--eol", type=int, required=True)
            p.add_argument("--ecl", type=int, required=True)
            p.add_argument("--count", type=int, default=5)
    return parser


def _setup_logging(out: Path) -> list:
    root = logging.getLogger("rcvae")
    root.setLevel(logging.INFO)
    handlers = [logging.FileHandler(out / "log.txt", encoding="utf-8"), logging.StreamHandler(sys.stderr)]
    handlers[0].setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    handlers[1].setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    for h in handlers:
        root.addHandler(h)
    return handlers


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args)
    except RcvaeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    handlers = _setup_logging(out)
    root = logging.getLogger("rcvae")
    try:
        log.info("rcvae %s (run dir %s)", args.command, out)
        if args.command == "generate":
            if args.count < 1:
                raise ConfigError("--count must be >= 1")
            cmd_generate(cfg, out, args.eol, args.ecl, args.count)
        else:
            globals()[f"cmd_{args.command}"](cfg, out)
        return EXIT_OK
    except MissingArtifact as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (RcvaeError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    finally:
        for h in handlers:
            root.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
