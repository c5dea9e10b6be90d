"""Command-line entry point: ``mdsupcon <command> ...``.

Exit codes: 0 success, 1 validation error (bad flags, config or inputs),
2 runtime failure. Errors are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

from . import evalsuite, verify
from .augment import canonical_strategy
from .data import gen_synthetic_multidomain, read_bank, write_bank
from .errors import MdsupconError, ValidationError
from .models import EncoderConfig
from .trainer import TrainConfig, load_checkpoint, pretrain

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved_config.ini"


# -- config files --------------------------------------------------------------

def _tuple_of(kind):
    def parse(text: str) -> tuple:
        text = text.strip()
        if text.lower() in ("", "none"):
            return ()
        return tuple(kind(v) for v in text.replace(",", " ").split())
    return parse


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMA = {
    "data": {
        "bank": str, "classes": int, "domains": int, "per": int,
        "seed": int, "test_fraction": float, "size": int,
    },
    "model": {
        "arch": str, "widths": _tuple_of(int), "feature_dim": int,
        "head_dim": int, "projection_head": str,
    },
    "optimizer": {"lr": float, "momentum": float, "weight_decay": float, "batch_size": int},
    "schedule": {"epochs": int, "warmup_epochs": int, "decay_epochs": _tuple_of(int), "decay_rate": float},
    "augment": {"strategy": str, "jitter_p": float},
    "loss": {"type": str, "temperature": float},
    "run": {"seed": int, "checkpoint_every": int},
    "eval": {
        "epochs": int, "runs": int, "metric": str, "seed": int, "sweep": _bool,
        "learning_rates": _tuple_of(float), "batch_sizes": _tuple_of(int),
        "lr": float, "batch_size": int,
    },
}

# keys that only make sense for the contrastive objective
SUPCON_ONLY = {("loss", "temperature"), ("model", "head_dim")}


def load_config(path) -> dict:
    """Parse a ``key = value`` file into ``{section: {key: value}}``; unknown keys are rejected."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ValidationError(f"{path}: {exc}") from None
    out: dict = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ValidationError(f"{path}: unknown section [{section}]; expected one of {sorted(SCHEMA)}")
        out[section] = {}
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ValidationError(f"{path}: unknown key {key!r} in [{section}]")
            try:
                out[section][key] = SCHEMA[section][key](raw)
            except ValueError as exc:
                raise ValidationError(f"{path}: bad value for {section}.{key}: {exc}") from None
    if "bank" in out.get("data", {}):
        bank = Path(out["data"]["bank"])
        out["data"]["bank"] = str(bank if bank.is_absolute() else (path.parent / bank).resolve())
    return out


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value) if value else "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config(config: dict, path) -> None:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    for section, values in config.items():
        parser[section] = {k: _render(v) for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def _get(config: dict, section: str, key: str, default=None):
    return config.get(section, {}).get(key, default)


def _existing_file(path, what: str) -> Path:
    if path is None:
        raise ValidationError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {p}")
    return p


# -- resolution ----------------------------------------------------------------

def resolve_pretrain(config: dict, loss: str | None = None, bank: str | None = None) -> dict:
    """Fill every pretraining setting, using the loss-specific recipe defaults."""
    loss = (loss or _get(config, "loss", "type", "supcon")).lower()
    if loss not in ("supcon", "ce"):
        raise ValidationError(f"loss must be 'supcon' or 'ce', got {loss!r}")
    supcon = loss == "supcon"
    head = _get(config, "model", "projection_head")
    if head is not None and head not in ("mlp", "none"):
        raise ValidationError(f"model.projection_head must be 'mlp' or 'none', got {head!r}")
    if not supcon:
        for section, key in SUPCON_ONLY:
            if _get(config, section, key) is not None:
                logger.info("ignoring %s.%s: not used by cross-entropy pretraining", section, key)
    base = TrainConfig.supcon() if supcon else TrainConfig.cross_entropy()
    enc = EncoderConfig()
    bank_path = bank or _get(config, "data", "bank")
    resolved = {
        "data": {"bank": str(Path(bank_path).resolve()) if bank_path else ""},
        "model": {
            "arch": _get(config, "model", "arch", enc.arch),
            "widths": tuple(_get(config, "model", "widths", enc.widths)),
            "feature_dim": _get(config, "model", "feature_dim", enc.feature_dim),
        },
        "optimizer": {
            "lr": _get(config, "optimizer", "lr", base.lr),
            "momentum": _get(config, "optimizer", "momentum", base.momentum),
            "weight_decay": _get(config, "optimizer", "weight_decay", base.weight_decay),
            "batch_size": _get(config, "optimizer", "batch_size", base.batch_size),
        },
        "schedule": {
            "epochs": _get(config, "schedule", "epochs", base.epochs),
            "warmup_epochs": _get(config, "schedule", "warmup_epochs", base.warmup_epochs),
            "decay_epochs": tuple(_get(config, "schedule", "decay_epochs", base.decay_epochs)),
            "decay_rate": _get(config, "schedule", "decay_rate", base.decay_rate),
        },
        "augment": {
            "strategy": canonical_strategy(_get(config, "augment", "strategy", base.augmentation)),
            "jitter_p": _get(config, "augment", "jitter_p", base.jitter_p),
        },
        "loss": {"type": loss},
        "run": {
            "seed": _get(config, "run", "seed", base.seed),
            "checkpoint_every": _get(config, "run", "checkpoint_every", base.checkpoint_every),
        },
    }
    if supcon:
        resolved["model"]["head_dim"] = _get(config, "model", "head_dim", enc.head_dim)
        resolved["model"]["projection_head"] = "mlp"
        resolved["loss"]["temperature"] = float(_get(config, "loss", "temperature", base.temperature))
    else:
        resolved["model"]["projection_head"] = "none"
    if "eval" in config:
        resolved["eval"] = dict(config["eval"])
    return resolved


def build_pretrain(resolved: dict) -> tuple:
    """``(TrainConfig, EncoderConfig)`` from a resolved pretraining config."""
    m, o, s, a, r = (resolved[k] for k in ("model", "optimizer", "schedule", "augment", "run"))
    supcon = resolved["loss"]["type"] == "supcon"
    enc_kw = dict(arch=m["arch"], widths=m["widths"], feature_dim=m["feature_dim"])
    if supcon:
        enc_kw["head_dim"] = m["head_dim"]
    try:
        enc = EncoderConfig(**enc_kw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad model config: {exc}") from None
    factory = TrainConfig.supcon if supcon else TrainConfig.cross_entropy
    train_kw = dict(
        batch_size=o["batch_size"], epochs=s["epochs"], augmentation=a["strategy"], seed=r["seed"],
        lr=o["lr"], momentum=o["momentum"], weight_decay=o["weight_decay"],
        warmup_epochs=s["warmup_epochs"], decay_epochs=s["decay_epochs"], decay_rate=s["decay_rate"],
        checkpoint_every=r["checkpoint_every"], jitter_p=a["jitter_p"],
    )
    if supcon:
        train_kw["temperature"] = resolved["loss"]["temperature"]
    return factory(**train_kw), enc


def resolve_eval(config: dict, args=None) -> dict:
    """Linear-evaluation settings: flags override the [eval] section, which overrides defaults."""
    grid = evalsuite.SweepGrid()
    probe = TrainConfig.linear()
    defaults = {
        "epochs": probe.epochs, "runs": 5, "metric": "top1", "seed": 0, "sweep": False,
        "learning_rates": grid.learning_rates, "batch_sizes": grid.batch_sizes,
        "lr": probe.lr, "batch_size": probe.batch_size,
    }
    out = {k: _get(config, "eval", k, v) for k, v in defaults.items()}
    if args is not None:
        for key in ("epochs", "runs", "metric", "seed", "lr", "batch_size"):
            if getattr(args, key, None) is not None:
                out[key] = getattr(args, key)
        if getattr(args, "sweep", False):
            out["sweep"] = True
    if out["metric"] not in evalsuite.METRICS:
        raise ValidationError(f"unknown metric {out['metric']!r}; choose from {evalsuite.METRICS}")
    if out["runs"] < 1 or out["epochs"] < 1:
        raise ValidationError("runs and epochs must be positive")
    return out


def _eval_call(resolved_eval: dict) -> dict:
    e = resolved_eval
    return dict(
        metric=e["metric"],
        grid=evalsuite.SweepGrid(tuple(e["learning_rates"]), tuple(e["batch_sizes"])),
        seed=e["seed"], runs=e["runs"], epochs=e["epochs"],
        fixed=None if e["sweep"] else (e["lr"], e["batch_size"]),
    )


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    config = load_config(args.config) if args.config else {}
    d = dict(config.get("data", {}))
    for key in ("classes", "domains", "per", "seed", "test_fraction", "size"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    missing = [k for k in ("classes", "domains", "per", "seed") if k not in d]
    if missing:
        raise ValidationError(f"gen-data needs {', '.join('--' + k for k in missing)}")
    d.setdefault("test_fraction", 0.0)
    d.setdefault("size", 32)
    d.pop("bank", None)
    bank = gen_synthetic_multidomain(d["classes"], d["domains"], d["per"], d["seed"], d["test_fraction"], d["size"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bank(bank, out)
    write_config({"data": d}, out.with_name(out.name + ".ini"))
    print(f"wrote {len(bank.classes)} records to {out}")
    return 0


def cmd_pretrain(args) -> int:
    config = load_config(args.config) if args.config else {}
    resolved = resolve_pretrain(config, args.loss, args.bank)
    train_cfg, enc_cfg = build_pretrain(resolved)
    bank = read_bank(_existing_file(resolved["data"]["bank"] or None, "bank file"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(resolved, out / RESOLVED_CONFIG)
    _, history = pretrain(bank, train_cfg, enc_cfg, out_dir=out)
    print(f"{resolved['loss']['type']} pretraining: {len(history)} epochs, final loss {history[-1]['mean_loss']:.4f}")
    print(f"checkpoint: {out / 'checkpoint.sckp'}")
    return 0


def cmd_linear_eval(args) -> int:
    config = load_config(args.config) if args.config else {}
    e = resolve_eval(config, args)
    bundle = load_checkpoint(_existing_file(args.checkpoint, "checkpoint"))
    bank_path = _existing_file(args.bank, "bank file")
    bank = read_bank(bank_path)
    if bank.image_shape != (bundle.config.image_size, bundle.config.image_size, bundle.config.in_channels):
        raise ValidationError(f"bank images {bank.image_shape} do not fit the checkpoint's encoder")
    dataset = args.dataset or bank_path.stem
    model = args.model or bundle.metadata.get("loss", "model")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config({"eval": e}, out / RESOLVED_CONFIG)
    result = evalsuite.evaluate_bank(bundle, bank, **_eval_call(e))
    report = evalsuite.RunReport()
    row = report.add(dataset, model, e["metric"], result)
    evalsuite.write_report(report, out / "report.csv")
    if result.trace:
        evalsuite.write_trace(result.trace, out / "sweep_trace.csv")
    std = "" if row.std is None else f" +/- {row.std:.4f}"
    print(f"{dataset} {model} {e['metric']}: {row.mean:.4f}{std} (lr {row.lr:g}, batch {row.batch})")
    return 0


def _knob_value(knob: str, text: str):
    if knob == "temperature":
        try:
            value = float(text)
        except ValueError:
            raise ValidationError(f"temperature must be a number, got {text!r}") from None
        if not value > 0:
            raise ValidationError("temperature must be positive")
        return value
    if knob == "augmentation":
        return canonical_strategy(text)
    if text not in evalsuite.ENCODER_GRID:
        raise ValidationError(f"encoder must be one of {evalsuite.ENCODER_GRID}")
    return text


def _eval_bank_arg(text: str) -> tuple:
    path, _, metric = text.partition(":")
    return Path(path), metric or None


def cmd_ablate(args) -> int:
    knob = args.knob
    if knob not in evalsuite.KNOB_DEFAULTS:
        raise ValidationError(f"unknown knob {knob!r}; choose from {tuple(evalsuite.KNOB_DEFAULTS)}")
    raw = args.values.split(",") if args.values else [str(v) for v in evalsuite.KNOB_DEFAULTS[knob]]
    values = [_knob_value(knob, v.strip()) for v in raw if v.strip()]
    config = load_config(args.config) if args.config else {}
    base = resolve_pretrain(config, "supcon", args.bank)
    e = resolve_eval(config, args)
    if not args.eval_bank:
        raise ValidationError("ablate needs at least one --eval-bank")
    eval_banks = {}
    for text in args.eval_bank:
        path, metric = _eval_bank_arg(text)
        eval_banks[path.stem] = (read_bank(_existing_file(path, "eval bank")), metric or e["metric"])
    source = read_bank(_existing_file(base["data"]["bank"] or None, "bank file"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(dict(base, eval=e), out / RESOLVED_CONFIG)

    def pretrain_fn(knob, value):
        cfg = {k: dict(v) for k, v in base.items()}
        if knob == "temperature":
            cfg["loss"]["temperature"] = value
        elif knob == "augmentation":
            cfg["augment"]["strategy"] = value
        else:
            cfg["model"]["arch"] = value
        run_dir = out / f"{knob}={value}"
        run_dir.mkdir(parents=True, exist_ok=True)
        write_config(cfg, run_dir / RESOLVED_CONFIG)
        train_cfg, enc_cfg = build_pretrain(cfg)
        bundle, _ = pretrain(source, train_cfg, enc_cfg, out_dir=run_dir)
        return bundle

    call = _eval_call(e)
    report = evalsuite.ablate(
        pretrain_fn, knob, values, eval_banks, call["grid"], call["seed"], call["runs"], call["epochs"], call["fixed"]
    )
    for row in report.rows:
        print(f"{row.dataset} {row.model}: {row.mean:.4f}")
    evalsuite.write_report(report, out / "report.csv")
    return 0


def cmd_verify(args) -> int:
    names = args.suite or list(verify.SUITES)
    for name in names:
        if name not in verify.SUITES:
            raise ValidationError(f"unknown suite {name!r}; choose from {tuple(verify.SUITES)}")
    return 0 if verify.run_suites(names, args.inject) else 1


# -- parser --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mdsupcon", description="Supervised contrastive pretraining on multi-domain image banks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic multi-domain bank")
    g.add_argument("--classes", type=int)
    g.add_argument("--domains", type=int)
    g.add_argument("--per", type=int, help="records per class per domain")
    g.add_argument("--seed", type=int)
    g.add_argument("--test-fraction", type=float)
    g.add_argument("--size", type=int)
    g.add_argument("--config")
    g.add_argument("--out", required=True, help="bank file to write")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="SupCon or cross-entropy pretraining")
    t.add_argument("--config")
    t.add_argument("--loss", choices=("supcon", "ce"))
    t.add_argument("--bank", help="overrides data.bank")
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(func=cmd_pretrain)

    def eval_flags(q):
        q.add_argument("--sweep", action="store_true", help="grid-search lr and batch size on train/val")
        q.add_argument("--runs", type=int)
        q.add_argument("--epochs", type=int)
        q.add_argument("--metric", choices=evalsuite.METRICS)
        q.add_argument("--seed", type=int)
        q.add_argument("--lr", type=float, help="fixed probe lr when not sweeping")
        q.add_argument("--batch-size", type=int, help="fixed probe batch size when not sweeping")

    e = sub.add_parser("linear-eval", help="frozen-encoder linear evaluation")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--bank", required=True)
    e.add_argument("--config")
    e.add_argument("--dataset", help="report name (default: bank file stem)")
    e.add_argument("--model", help="report name (default: the checkpoint's loss)")
    e.add_argument("--out", required=True, help="run directory")
    eval_flags(e)
    e.set_defaults(func=cmd_linear_eval)

    a = sub.add_parser("ablate", help="pretrain once per knob value and evaluate each")
    a.add_argument("--knob", required=True, help="temperature, augmentation or encoder")
    a.add_argument("--values", help="comma-separated (default: the standard grid for the knob)")
    a.add_argument("--config")
    a.add_argument("--bank", help="overrides data.bank")
    a.add_argument("--eval-bank", action="append", help="PATH[:METRIC], repeatable")
    a.add_argument("--out", required=True, help="run directory")
    eval_flags(a)
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("verify", help="run the self-check suites")
    v.add_argument("--suite", action="append", help=f"one of {', '.join(verify.SUITES)} (repeatable)")
    v.add_argument("--inject", choices=tuple(verify.MUTANTS), help="swap in a known-wrong loss")
    v.set_defaults(func=cmd_verify)
    return p


def _fail(exc: BaseException, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        return _fail(exc, 1)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        return _fail(exc, 1)
    except (MdsupconError, OSError, RuntimeError) as exc:
        return _fail(exc, 2)


if __name__ == "__main__":
    sys.exit(main())
