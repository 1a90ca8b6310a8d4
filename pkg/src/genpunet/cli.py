"""Command-line entry point: ``genpunet <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import math
import os
import sys
import typing
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .data import DatasetError, SyntheticParams, generate_synthetic, load_dataset, save_dataset, split_dataset
from .evaluation import (
    CASE_COLUMNS,
    GedReport,
    PairedMetricTable,
    UndefinedTestError,
    case_rng,
    evaluate_model,
    read_case_csv,
    summarize,
    wilcoxon_signed_rank,
    write_case_csv,
)
from .hpo import BUDGET_RANGE, SearchSpace, run_search
from .model import ArchConfig, Variant, build_variant, forward_sample
from .training import CheckpointError, TrainConfig, TrainingError, load_checkpoint, train, write_history_csv

logger = logging.getLogger("genpunet")

VARIANT_CHOICES = ["aa", "fc", "mix-aa", "mix-fc"]
SPLIT_KEYS = {"split_seed": int, "train_ratio": float, "validation_ratio": float, "test_ratio": float}
CONFIG_RECORD = "effective_config.json"


class CliError(Exception):
    """A user-facing failure reported as a one-line diagnostic."""


# -- config files -------------------------------------------------------------------

def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` text, one parameter per line; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key in values:
            raise CliError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def _convert(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        if raw.lower() in ("", "none", "null"):
            return None
        hint = next(h for h in typing.get_args(hint) if h is not type(None))
    if hint in (tuple, "tuple"):
        return tuple(int(v) for v in raw.replace("x", ",").split(",") if v.strip())
    if hint is Variant:
        return Variant.parse(raw)
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def _field_hints(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def build_configs(values: dict[str, str], variant: Optional[str] = None,
                  seed: Optional[int] = None) -> tuple[ArchConfig, TrainConfig, dict]:
    """Split flat key/values into ArchConfig, TrainConfig and split settings.

    Command-line ``variant``/``seed`` override the file.  Unknown keys are errors.
    """
    arch_hints, train_hints = _field_hints(ArchConfig), _field_hints(TrainConfig)
    arch_kw, train_kw, split = {}, {}, {}
    for key, raw in values.items():
        try:
            if key in arch_hints:
                arch_kw[key] = _convert(raw, arch_hints[key], key)
            elif key in train_hints:
                train_kw[key] = _convert(raw, train_hints[key], key)
            elif key in SPLIT_KEYS:
                split[key] = SPLIT_KEYS[key](raw)
            else:
                raise CliError(f"unknown config key {key!r}")
        except ValueError as exc:
            raise CliError(f"bad value for {key!r}: {exc}") from None
    if variant is not None:
        arch_kw["variant"] = Variant.parse(variant)
    if seed is not None:
        train_kw["seed"] = seed
    arch_kw.setdefault("latent_dim", 2)
    try:
        arch, tcfg = ArchConfig(**arch_kw), TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from None
    split = {"split_seed": 0, "train_ratio": 0.6, "validation_ratio": 0.2, "test_ratio": 0.2, **split}
    return arch, tcfg, split


def _jsonable(value):
    if isinstance(value, Variant):
        return value.value
    if dataclasses.is_dataclass(value):
        return _jsonable(dataclasses.asdict(value))
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def write_config_record(out_dir: Path, command: str, args: argparse.Namespace, resolved: dict) -> Path:
    """Machine-readable record of every flag (defaults included) and the resolved settings."""
    flags = {k: v for k, v in vars(args).items() if k not in ("handler",)}
    record = {"command": command, "version": __version__, "flags": _jsonable(flags),
              "resolved": _jsonable(resolved)}
    path = out_dir / CONFIG_RECORD
    path.write_text(json.dumps(record, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


# -- helpers --------------------------------------------------------------------------

def _out_dir(args) -> Path:
    if args.out is None:
        raise CliError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cases(path):
    if path is None:
        raise CliError("--data is required")
    try:
        return load_dataset(path)
    except DatasetError as exc:
        raise CliError(str(exc)) from None


def _split(cases, split: dict):
    ratios = (split["train_ratio"], split["validation_ratio"], split["test_ratio"])
    try:
        return split_dataset(cases, ratios, split["split_seed"])
    except DatasetError as exc:
        raise CliError(str(exc)) from None


def _select_part(cases, part: str, split_seed: int):
    if part == "all":
        return list(cases)
    return split_dataset(cases, seed=split_seed).select(cases, part)


def _load_model(path, expected=None):
    if path is None:
        raise CliError("--checkpoint is required")
    try:
        return load_checkpoint(path, expected)
    except CheckpointError as exc:
        raise CliError(str(exc)) from None


def _threads() -> int:
    raw = os.environ.get("GENPUNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"GENPUNET_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise CliError("GENPUNET_THREADS must be >= 1")
    return n


# -- synth ----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = _out_dir(args)
    values = parse_config_file(args.config) if args.config else {}
    hints = _field_hints(SyntheticParams)
    kw, corpus = {}, {"n_cases": 500, "image_size": 32, "n_annotators": 4}
    for key, raw in values.items():
        try:
            if key in corpus:
                corpus[key] = int(raw)
            elif key in ("presence_prob", "thresholds"):
                kw[key] = tuple(float(v) for v in raw.split(","))
            elif key == "radius_range":
                kw[key] = tuple(float(v) for v in raw.split(","))
            elif key in hints:
                kw[key] = _convert(raw, hints[key], key)
            else:
                raise CliError(f"unknown config key {key!r}")
        except ValueError as exc:
            raise CliError(f"bad value for {key!r}: {exc}") from None
    if args.ambiguous_fraction is not None:
        kw["ambiguous_fraction"] = args.ambiguous_fraction
    if args.n_cases is not None:
        corpus["n_cases"] = args.n_cases
    params = SyntheticParams(**kw)
    try:
        cases = generate_synthetic(corpus["n_cases"], corpus["image_size"], corpus["n_annotators"], params,
                                   seed=args.seed)
    except DatasetError as exc:
        raise CliError(str(exc)) from None
    manifest = save_dataset(cases, out)
    write_config_record(out, "synth", args, {"corpus": corpus, "params": params})
    print(f"wrote {len(cases)} cases to {manifest}")
    return 0


# -- train ----------------------------------------------------------------------------

def cmd_train(args) -> int:
    out = _out_dir(args)
    values = parse_config_file(args.config) if args.config else {}
    arch, tcfg, split = build_configs(values, args.variant, args.seed)
    cases = _load_cases(args.data)
    sp = _split(cases, split)
    if arch.image_size != cases[0].image.shape:
        arch = dataclasses.replace(arch, image_size=cases[0].image.shape)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    write_config_record(out, "train", args, {"arch": arch, "train": tcfg, "split": split, "checkpoint": ckpt})
    model = build_variant(arch, seed=tcfg.seed)
    try:
        result = train(model, sp.select(cases, "train"), sp.select(cases, "validation"), tcfg,
                       checkpoint_path=ckpt)
    except TrainingError as exc:
        raise CliError(str(exc)) from None
    write_history_csv(result.history, out / "history.csv")
    print(f"best epoch {result.best_epoch} (val loss {result.state.best_val_loss:.6f}); "
          f"stopped after {result.stop_epoch}; checkpoint {ckpt}")
    return 0


# -- eval -----------------------------------------------------------------------------

def cmd_eval(args) -> int:
    out = _out_dir(args)
    model, _ = _load_model(args.checkpoint)
    cases = _select_part(_load_cases(args.data), args.part, args.split_seed)
    if not cases:
        raise CliError(f"no cases in partition {args.part!r}")
    if any(c.n_annotators < 2 for c in cases):
        raise CliError("evaluation needs at least two reference masks per case")
    write_config_record(out, "eval", args, {"arch": model.config, "n_cases": len(cases)})
    report = evaluate_model(model, cases, args.samples, seed=args.seed)
    write_case_csv(report, out / "cases.csv")
    (out / "summary.txt").write_text(report.format_summary() + "\n", encoding="utf-8")
    print(report.format_summary())
    return 0


# -- sample ---------------------------------------------------------------------------

def tile_panels(image: np.ndarray, references: np.ndarray, samples: np.ndarray) -> list[list[np.ndarray]]:
    """Rows of panels: image and references first, then the samples wrapped to the same width."""
    width = 1 + len(references)
    rows = [[image] + list(references)]
    sample_list = list(samples)
    for start in range(0, len(sample_list), width):
        rows.append(sample_list[start:start + width])
    return rows


def render_tile(rows: list[list[np.ndarray]], gap: int = 1) -> np.ndarray:
    """Assemble panels (values in [0, 1]) into one 8-bit grid with grey gaps."""
    h, w = rows[0][0].shape
    ncols = max(len(r) for r in rows)
    tile = np.full((len(rows) * (h + gap) - gap, ncols * (w + gap) - gap), 128, dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, panel in enumerate(row):
            y, x = i * (h + gap), j * (w + gap)
            tile[y:y + h, x:x + w] = np.round(np.clip(panel, 0, 1) * 255).astype(np.uint8)
    return tile


def write_pgm(path, tile: np.ndarray, comments: Sequence[str] = ()) -> None:
    """Plain-text (P2) greyscale image."""
    lines = ["P2", *(f"# {c}" for c in comments), f"{tile.shape[1]} {tile.shape[0]}", "255"]
    lines += [" ".join(map(str, row)) for row in tile]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def cmd_sample(args) -> int:
    out = _out_dir(args)
    model, _ = _load_model(args.checkpoint)
    cases = _load_cases(args.data)
    by_id = {c.case_id: c for c in cases}
    case = by_id.get(args.case) if args.case else cases[0]
    if case is None:
        raise CliError(f"case {args.case!r} not in dataset")
    write_config_record(out, "sample", args, {"case_id": case.case_id, "arch": model.config})
    result = forward_sample(model, case.image[None, None], args.samples, [case_rng(args.seed, case.case_id)])
    samples = result.masks[:, 0].astype(np.float32)
    rows = tile_panels(case.image, case.masks.astype(np.float32), samples)
    comments = [f"case {case.case_id}",
                f"panels image=1 references={case.n_annotators} samples={args.samples}",
                "row 1: image then references; following rows: samples"]
    path = out / f"{case.case_id}_tile.pgm"
    write_pgm(path, render_tile(rows), comments)
    with open(out / f"{case.case_id}_samples.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "foreground_pixels", "component"])
        comps = result.component_index
        for k in range(args.samples):
            writer.writerow([k, int(samples[k].sum()), "" if comps is None else int(comps[k, 0])])
    print(f"wrote {path}")
    return 0


# -- search ---------------------------------------------------------------------------

def cmd_search(args) -> int:
    out = _out_dir(args)
    values = parse_config_file(args.config) if args.config else {}
    budget = args.budget if args.budget is not None else BUDGET_RANGE[0]
    try:
        space = SearchSpace(budget=budget)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    # Searched keys come from the space; the file only fixes the rest.
    values = {k: v for k, v in values.items()
              if k not in ("latent_dim", "beta", "mixture_components", "temperature", "variant")}
    arch, tcfg, split = build_configs(values, "aa", None)
    cases = _load_cases(args.data)
    sp = _split(cases, split)
    arch = dataclasses.replace(arch, image_size=cases[0].image.shape)
    workers = _threads()
    write_config_record(out, "search", args, {"space": space, "base_arch": arch, "base_train": tcfg,
                                              "split": split, "workers": workers})
    try:
        result = run_search(space, args.variant or "aa", sp.select(cases, "train"), sp.select(cases, "validation"),
                            out, budget=budget, seed=args.seed, base_arch=arch, base_train=tcfg, workers=workers)
    except RuntimeError as exc:
        raise CliError(str(exc)) from None
    b = result.best
    print(f"best {b.run_id}: val loss {b.best_val_loss:.6f} latent_dim={b.arch['latent_dim']} "
          f"beta={b.train['beta']} components={b.arch['mixture_components']} "
          f"temperature={b.arch['temperature']}")
    return 0


# -- compare / report -------------------------------------------------------------------

def _read_reports(paths: Sequence[str], names: Optional[Sequence[str]] = None) -> dict[str, GedReport]:
    if names is not None and len(names) != len(paths):
        raise CliError("--names needs one name per CSV")
    reports = {}
    for i, p in enumerate(paths):
        name = names[i] if names else Path(p).stem if Path(p).stem != "cases" else Path(p).parent.name
        if name in reports:
            name = f"{name}_{i}"
        try:
            reports[name] = read_case_csv(p)
        except OSError as exc:
            raise CliError(f"cannot read {p}: {exc.strerror}") from None
        except (ValueError, IndexError) as exc:
            raise CliError(f"{p}: {exc}") from None
    return reports


def _paired(reports) -> PairedMetricTable:
    try:
        return PairedMetricTable.from_reports(reports)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def cmd_compare(args) -> int:
    out = _out_dir(args)
    reports = _read_reports([args.first, args.second], args.names)
    table = _paired(reports)
    write_config_record(out, "compare", args, {"models": list(reports), "n_cases": len(table.case_ids)})
    table.write_csv(out / "paired.csv")
    a, b = table.columns.values()
    try:
        res = wilcoxon_signed_rank(a, b)
    except UndefinedTestError as exc:
        raise CliError(str(exc)) from None
    verdict = "significant" if res.significant else "not significant"
    line = (f"Wilcoxon signed-rank ({res.method}, n={res.n}): statistic {res.statistic:g}, "
            f"p = {res.p_value:.6g} -> {verdict} at 0.05")
    (out / "verdict.txt").write_text(line + "\n", encoding="utf-8")
    print(line)
    return 0


def letter_value_levels(n: int) -> list[tuple[float, float]]:
    """(lower, upper) quantile pairs: median, fourths, eighths, ... down to a depth set by ``n``."""
    depth = max(2, int(math.floor(math.log2(n))) - 3) if n > 0 else 2
    levels = [(0.5, 0.5)]
    for k in range(2, depth + 1):
        q = 2.0 ** -(k - 1) / 2
        levels.append((q, 1 - q))
    return levels


def emit_report(csv_paths: Sequence[str], out_dir, names: Optional[Sequence[str]] = None) -> dict:
    """Summary statistics, pairwise Wilcoxon tests and letter-value quantiles for a set of eval CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = _read_reports(csv_paths, names)
    table = _paired(reports)
    terms = CASE_COLUMNS[1:]

    summary = {m: {t: summarize(rep.column(t)) for t in terms} for m, rep in reports.items()}
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "term", "mean", "std_population", "n_cases"])
        for m, per in summary.items():
            for t, s in per.items():
                writer.writerow([m, t, repr(s.mean), repr(s.std), len(reports[m].entries)])

    pairs = []
    for a, b in itertools.combinations(table.columns, 2):
        try:
            res = wilcoxon_signed_rank(table.columns[a], table.columns[b])
            pairs.append([a, b, res.n, repr(res.statistic), repr(res.p_value),
                          "yes" if res.significant else "no", res.method])
        except UndefinedTestError:
            pairs.append([a, b, 0, "undefined", "undefined", "undefined", "all differences zero"])
    with open(out / "pairwise.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_a", "model_b", "n_nonzero", "statistic", "p_value", "significant_0.05", "method"])
        writer.writerows(pairs)

    with open(out / "quantiles.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "level", "lower_q", "upper_q", "lower_value", "upper_value"])
        for m, col in table.columns.items():
            for level, (lo, hi) in enumerate(letter_value_levels(len(col)), 1):
                lv, hv = np.quantile(col, [lo, hi])
                writer.writerow([m, level, repr(lo), repr(hi), repr(float(lv)), repr(float(hv))])

    width = max(len(m) for m in summary)
    lines = ["GED report: mean ± std over cases (std is the population std, divide by n)", ""]
    lines.append(f"{'model':<{width}}  " + "  ".join(f"{t:>22}" for t in terms))
    for m, per in summary.items():
        lines.append(f"{m:<{width}}  " + "  ".join(f"{str(per[t]):>22}" for t in terms))
    lines += ["", "pairwise Wilcoxon signed-rank tests on ged_squared"]
    for a, b, _, _, p, sig, _ in pairs:
        lines.append(f"  {a} vs {b}: p = {p} ({'significant' if sig == 'yes' else sig if sig == 'undefined' else 'not significant'})")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"summary": summary, "pairwise": pairs}


def cmd_report(args) -> int:
    out = _out_dir(args)
    write_config_record(out, "report", args, {})
    emit_report(args.csvs, out, args.names)
    print((out / "report.txt").read_text(encoding="utf-8"), end="")
    return 0


# -- parser -----------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="genpunet", description="Probabilistic segmentation with flexible latent distributions.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, handler, help_, *flags):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(handler=handler)
        common = {
            "config": dict(help="flat key = value config file"),
            "data": dict(help="dataset manifest"),
            "checkpoint": dict(help="model checkpoint path"),
            "out": dict(help="output directory"),
            "seed": dict(type=int, default=0, help="random seed (default 0)"),
            "samples": dict(type=int, default=16, help="prediction samples per case (default 16)"),
            "variant": dict(choices=VARIANT_CHOICES, help="latent distribution family (default: config file, else aa)"),
            "budget": dict(type=int, help=f"number of search instances, {BUDGET_RANGE[0]}-{BUDGET_RANGE[1]}"),
        }
        for flag in flags:
            p.add_argument(f"--{flag}", **common[flag])
        return p

    p = add("synth", cmd_synth, "generate a synthetic multi-annotator corpus", "config", "out", "seed")
    p.add_argument("--n-cases", type=int, help="number of cases (default 500)")
    p.add_argument("--ambiguous-fraction", type=float, help="share of cases where some annotators draw nothing")

    p = add("train", cmd_train, "train one model", "config", "data", "checkpoint", "out", "variant")
    p.add_argument("--seed", type=int, default=None, help="overrides the config file's seed")

    p = add("eval", cmd_eval, "per-case GED on a dataset partition", "data", "checkpoint", "out", "seed", "samples")
    p.add_argument("--part", choices=["test", "validation", "train", "all"], default="test")
    p.add_argument("--split-seed", type=int, default=0)

    p = add("sample", cmd_sample, "tile of prediction samples next to the references",
            "data", "checkpoint", "out", "seed", "samples")
    p.add_argument("--case", help="case id (default: first case)")

    add("search", cmd_search, "hyperparameter search", "config", "data", "out", "seed", "variant", "budget")

    p = add("compare", cmd_compare, "Wilcoxon test between two eval CSVs", "out")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--names", nargs=2)

    p = add("report", cmd_report, "summary, pairwise tests and letter-value quantiles", "out")
    p.add_argument("csvs", nargs="+")
    p.add_argument("--names", nargs="+")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "handler", None) is None:
            raise CliError("missing subcommand (synth, train, eval, sample, search, compare, report)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.handler(args)
    except CliError as exc:
        print(f"genpunet: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"genpunet: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
