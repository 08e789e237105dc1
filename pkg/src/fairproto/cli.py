"""Command-line surface: synth, train, eval, ablate, report.

Every flag mirrors a config-file key one-to-one (``--mini-epochs`` is
``mini_epochs``); explicit flags override file values which override the
built-in defaults, and each run writes a ``*.config.txt`` echo of the
resolved values next to its primary output. Exit codes are stable: 0 ok,
2 usage, 3 data/capacity, 4 numeric.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from . import checkpoint as ckpt
from .errors import (
    CapacityError,
    CorruptionError,
    FormatError,
    NumericError,
    ShapeError,
    SinkError,
    ValidationError,
)
from .evaluator import render_table, run_protocol
from .store import (
    load_manifest_file,
    save_manifest_file,
    synthesize_clusters,
    vit_only_view,
)
from .trainer import EpisodeConfig, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DATA_ERRORS = (FormatError, CorruptionError, ValidationError, CapacityError,
                ShapeError, SinkError)


class UsageError(Exception):
    pass


# (name, type, default, help) tables; None default means the flag is required.
_SYNTH_FLAGS = [
    ("classes", int, 7, "number of classes (>= 2)"),
    ("per_class", int, 60, "samples per class (>= 2)"),
    ("dim", int, 32, "total feature dimension"),
    ("sep", float, 10.0, "minimum distance between cluster centers, in stddevs"),
    ("seed", int, 0, "random seed"),
    ("dim_vit", int, 0, "width of the first feature block (0: all of --dim)"),
    ("dim_resnet", int, 0, "width of the second feature block"),
    ("informative", str, "all", "which block carries class signal: all|vit|resnet"),
    ("support_per_class", int, 5, "support records reserved per class"),
    ("out", str, None, "output manifest path"),
    ("vit_only_out", str, "", "also write a copy with the second block stripped"),
]

_TRAIN_FLAGS = [
    ("manifest", str, None, "input manifest path"),
    ("out_checkpoint", str, "checkpoint.fphd", "output checkpoint path"),
    ("history", str, "history.csv", "output per-step history CSV"),
    ("k_min", int, 5, "minimum classes per episode"),
    ("k_max", int, 8, "maximum classes per episode"),
    ("n_min", int, 1, "minimum shots per class"),
    ("n_max", int, 5, "maximum shots per class"),
    ("q_train", int, 5, "queries per class per episode"),
    ("episodes", int, 250, "training episodes"),
    ("mini_epochs", int, 25, "gradient updates per episode"),
    ("objective", str, "prototypical_ce",
     "prototypical_ce | pairwise_bce | sum_both"),
    ("patience", int, 20, "early-stop patience, in episodes"),
    ("min_delta", float, 1e-4, "minimum validation improvement"),
    ("lr_max", float, 1e-4, "peak learning rate"),
    ("lr_min", float, 1e-6, "final learning rate"),
    ("clip_norm", float, 1.0, "global gradient-norm clip"),
    ("l2", float, 1e-4, "weight penalty coefficient"),
    ("hidden", int, 512, "hidden layer width"),
    ("out_dim", int, 256, "embedding width"),
    ("dropout", float, 0.20, "dropout rate"),
    ("val_episodes", int, 10, "validation episodes per check"),
    ("seed", int, 0, "random seed"),
]

_EVAL_FLAGS = [
    ("manifest", str, None, "input manifest path"),
    ("checkpoint", str, None, "trained head checkpoint path"),
    ("out_dir", str, None, "directory for table.txt, metrics.csv, tarfar.csv"),
    ("shots", str, "1,3,5", "comma-separated increasing shot counts"),
    ("assignments", int, 5, "assignments per trial"),
    ("trials", int, 10, "independent trials"),
    ("queries", int, 10, "static queries per class"),
    ("categories", str, "auto", "auto | class | comma list of race,gender,age_group"),
    ("ablation", str, "full", "full | vit_only (zero the second feature block)"),
    ("seed", int, 0, "random seed"),
]

_ABLATE_FLAGS = [
    ("manifest_full", str, None, "fused-feature manifest"),
    ("checkpoint_full", str, None, "checkpoint trained on the fused manifest"),
    ("manifest_vit", str, None, "first-block-only manifest"),
    ("checkpoint_vit", str, None, "checkpoint trained on the first-block manifest"),
    ("out", str, None, "output comparison CSV"),
    ("shots", str, "1,3,5", "comma-separated increasing shot counts"),
    ("assignments", int, 5, "assignments per trial"),
    ("trials", int, 10, "independent trials"),
    ("queries", int, 10, "static queries per class"),
    ("seed", int, 0, "random seed"),
]

_REPORT_FLAGS = [
    ("metrics_csv", str, None, "metrics CSV produced by eval"),
    ("out", str, None, "output table path"),
]

_FLAG_TABLES = {"synth": _SYNTH_FLAGS, "train": _TRAIN_FLAGS, "eval": _EVAL_FLAGS,
                "ablate": _ABLATE_FLAGS, "report": _REPORT_FLAGS}


def _add_flags(parser: argparse.ArgumentParser, table) -> None:
    parser.add_argument("--config", default=None, metavar="FILE",
                        help="key = value config file; flags override it")
    for name, typ, default, help_text in table:
        flag = "--" + name.replace("_", "-")
        suffix = "required" if default is None else f"default: {default}"
        parser.add_argument(flag, type=typ, default=argparse.SUPPRESS,
                            help=f"{help_text} ({suffix})")


def _read_config_file(path: str) -> dict[str, str]:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected 'key = value'")
                key, value = line.split("=", 1)
                values[key.strip().replace("-", "_")] = value.strip()
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    return values


def _resolve(args: argparse.Namespace, table) -> dict:
    file_values = _read_config_file(args.config) if args.config else {}
    unknown = set(file_values) - {name for name, *_ in table}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for name, typ, default, _ in table:
        if hasattr(args, name):
            resolved[name] = getattr(args, name)
        elif name in file_values:
            try:
                resolved[name] = typ(file_values[name])
            except ValueError:
                raise UsageError(f"config key {name}: cannot parse "
                                 f"{file_values[name]!r} as {typ.__name__}")
        elif default is None:
            raise UsageError(f"missing required flag --{name.replace('_', '-')}")
        else:
            resolved[name] = default
    return resolved


def _write_config_echo(path: str, command: str, resolved: dict) -> None:
    lines = [f"command = {command}"]
    lines += [f"{key} = {resolved[key]}" for key in sorted(resolved)]
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _parse_shots(raw: str) -> list[int]:
    try:
        shots = [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"cannot parse shot list {raw!r}")
    if not shots or any(b <= a for a, b in zip(shots, shots[1:])) or shots[0] < 1:
        raise UsageError(f"shots must be strictly increasing positive ints, got {raw!r}")
    return shots


def _require_file(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _parse_categories(raw: str):
    if raw == "auto":
        return None
    return [c.strip() for c in raw.split(",") if c.strip()]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict) -> int:
    if cfg["classes"] < 2:
        raise UsageError(f"--classes must be >= 2, got {cfg['classes']}")
    if cfg["per_class"] < 2:
        raise UsageError(f"--per-class must be >= 2, got {cfg['per_class']}")
    if cfg["sep"] < 0:
        raise UsageError("--sep must be >= 0")
    kwargs = {}
    if cfg["dim_vit"] or cfg["dim_resnet"]:
        kwargs["dim_vit"] = cfg["dim_vit"]
        kwargs["dim_resnet"] = cfg["dim_resnet"]
    manifest = synthesize_clusters(cfg["classes"], cfg["per_class"], cfg["dim"],
                                   cfg["sep"], cfg["seed"],
                                   informative=cfg["informative"],
                                   support_per_class=cfg["support_per_class"],
                                   **kwargs)
    save_manifest_file(manifest, cfg["out"])
    if cfg["vit_only_out"]:
        save_manifest_file(vit_only_view(manifest), cfg["vit_only_out"])
    _write_config_echo(cfg["out"] + ".config.txt", "synth", cfg)
    counts = {}
    for rec in manifest.records:
        counts[rec.split.name.lower()] = counts.get(rec.split.name.lower(), 0) + 1
    print(f"wrote {cfg['out']}: {len(manifest.class_table)} classes, "
          f"{len(manifest.records)} records "
          f"({', '.join(f'{k}={v}' for k, v in sorted(counts.items()))})")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    manifest = load_manifest_file(_require_file(cfg["manifest"], "manifest"))
    config = EpisodeConfig(
        k_min=cfg["k_min"], k_max=cfg["k_max"], n_min=cfg["n_min"], n_max=cfg["n_max"],
        q_train=cfg["q_train"], episodes=cfg["episodes"], mini_epochs=cfg["mini_epochs"],
        objective=cfg["objective"], patience=cfg["patience"], min_delta=cfg["min_delta"],
        seed=cfg["seed"], lr_max=cfg["lr_max"], lr_min=cfg["lr_min"],
        clip_norm=cfg["clip_norm"], l2=cfg["l2"], hidden=cfg["hidden"],
        out_dim=cfg["out_dim"], dropout=cfg["dropout"], val_episodes=cfg["val_episodes"])
    params, history = train(manifest, config)
    ckpt.save_head_file(params, cfg["out_checkpoint"])
    history.to_csv(cfg["history"])
    _write_config_echo(cfg["out_checkpoint"] + ".config.txt", "train", cfg)
    final_train = history.final_train_loss
    final_val = history.val_losses[-1][1] if history.val_losses else float("nan")
    print(f"{history.stop_reason} after {len(history.val_losses)} episodes "
          f"({len(history.steps)} steps); final train loss {final_train:.6f}, "
          f"final val loss {final_val:.6f}, best val loss {history.best_val_loss:.6f} "
          f"at episode {history.best_episode}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    manifest = load_manifest_file(_require_file(cfg["manifest"], "manifest"))
    params, _ = ckpt.load_head_file(_require_file(cfg["checkpoint"], "checkpoint"))
    ckpt.expect_dim(params, manifest.dim_total)
    report = run_protocol(manifest, params, _parse_shots(cfg["shots"]),
                          cfg["assignments"], cfg["trials"], cfg["queries"],
                          cfg["seed"], ablation=cfg["ablation"],
                          categories=_parse_categories(cfg["categories"]))
    os.makedirs(cfg["out_dir"], exist_ok=True)
    _atomic_write_text(os.path.join(cfg["out_dir"], "table.txt"), report.to_table())
    _atomic_write_text(os.path.join(cfg["out_dir"], "metrics.csv"), report.to_metrics_csv())
    _atomic_write_text(os.path.join(cfg["out_dir"], "tarfar.csv"), report.to_tarfar_csv())
    _write_config_echo(os.path.join(cfg["out_dir"], "config.txt"), "eval", cfg)
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_ablate(cfg: dict) -> int:
    shots = _parse_shots(cfg["shots"])
    reports = {}
    for mode, man_key, ckpt_key in (("full", "manifest_full", "checkpoint_full"),
                                    ("vit_only", "manifest_vit", "checkpoint_vit")):
        manifest = load_manifest_file(_require_file(cfg[man_key], man_key))
        params, _ = ckpt.load_head_file(_require_file(cfg[ckpt_key], ckpt_key))
        ckpt.expect_dim(params, manifest.dim_total)
        reports[mode] = run_protocol(manifest, params, shots, cfg["assignments"],
                                     cfg["trials"], cfg["queries"], cfg["seed"])
    categories = reports["full"].categories
    if categories != reports["vit_only"].categories:
        raise ValidationError(f"category mismatch: {categories} vs "
                              f"{reports['vit_only'].categories}")
    import io as _io
    buf = _io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["category", "shot", "accuracy_full", "accuracy_vit_only"])
    for category in categories:
        for shot in shots:
            writer.writerow([category, shot,
                             repr(reports["full"].accuracy(category, shot)),
                             repr(reports["vit_only"].accuracy(category, shot))])
    _atomic_write_text(cfg["out"], buf.getvalue())
    _write_config_echo(cfg["out"] + ".config.txt", "ablate", cfg)
    print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    path = _require_file(cfg["metrics_csv"], "metrics CSV")
    entries = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"category", "backbone", "shot", "metric", "mean", "std"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise FormatError(f"{path}: expected columns {sorted(expected)}, "
                              f"got {reader.fieldnames}")
        for row in reader:
            entries.append((row["category"], row["backbone"], int(row["shot"]),
                            row["metric"], float(row["mean"]), float(row["std"])))
    table = render_table(entries)
    _atomic_write_text(cfg["out"], table)
    _write_config_echo(cfg["out"] + ".config.txt", "report", cfg)
    print(table, end="")
    return EXIT_OK


_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
             "ablate": cmd_ablate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairproto",
        description="Few-shot prototypical training and demographic evaluation "
                    "over embedding manifests.")
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "synth": "generate a synthetic Gaussian-cluster manifest",
        "train": "episodic meta-training of the projection head",
        "eval": "run the nested-shot protocol and write report artifacts",
        "ablate": "compare fused features against the first block alone",
        "report": "re-render a metrics CSV as a table",
    }
    for name, table in _FLAG_TABLES.items():
        p = sub.add_parser(name, help=descriptions[name], description=descriptions[name])
        _add_flags(p, table)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args, _FLAG_TABLES[args.command])
        return _COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entrypoint() -> None:
    sys.exit(main())
