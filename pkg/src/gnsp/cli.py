"""Experiment commands: run, eval, selftest, plot, export-embeddings.

Configuration is flat INI (sections of key = value); unknown sections or
keys are rejected so typos cannot silently fall back to defaults. Every run
echoes its fully-resolved configuration to <out>/effective_config, and
re-running from that file reproduces the outputs byte for byte. Data files
never contain timestamps or machine identifiers.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .encoder import forward
from .metrics import (
    accuracy_matrix_csv,
    gap_csv,
    recall_csv,
    retrieval_recall_at_k,
    summary_csv,
    evaluate_accuracy,
)
from .projection import spectrum_rows
from .selftest import run_selftest
from .svg import render_lines
from .tasks import ReferenceSet, TaskDataset, make_reference_set, make_task
from .trainer import (
    Method,
    TrainerConfig,
    TrainingError,
    make_default_dual_encoder,
    pretrain_dual_encoder,
    run_sequence,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    """Invalid run configuration; the message names the key (or line)."""


@dataclass
class RunConfig:
    """Fully-resolved experiment configuration (defaults documented inline)."""

    # [model]
    image_dims: tuple[int, ...] = (32, 64, 64, 16)
    text_dims: tuple[int, ...] = (16, 64, 16)
    temperature: float = 0.07
    pretrain_iterations: int = 3000
    pretrain_learning_rate: float = 0.2
    # [trainer]
    iterations_per_task: int = 500
    batch_size: int = 64
    learning_rate: float = 0.05
    rho: float = 0.15
    lambda_cd: float = 1.0
    beta_map: float = 0.75
    method: str = "GNSP_FULL"
    include_reference_gram: bool = False
    seed: int = 0
    capture_cap: int = 10000
    optimizer: str = "sgd"
    cd_temperature: float | None = None
    map_temperature: float | None = None
    # [tasks]
    task_count: int = 6
    classes_per_task: int = 4
    samples_per_class: int = 150
    d_image_in: int = 32
    d_text_in: int = 16
    separations: tuple[float, ...] = (12.0, 4.2, 4.2, 4.2, 4.2, 4.2)
    task_seed_base: int = 101
    # [reference]
    reference_seed: int = 900
    reference_size: int = 1000
    # [probes]
    heldout_seed: int = 901
    heldout_size: int = 2000
    include_reference_probe: bool = True
    # [output]
    emit_spectra: bool = True
    emit_embeddings: bool = False
    emit_plots: bool = False
    recall_ks: tuple[int, ...] = (1, 5, 10)

    def validate(self) -> "RunConfig":
        if len(self.image_dims) < 2 or len(self.text_dims) < 2:
            raise ConfigError("image_dims and text_dims need at least two entries")
        if self.image_dims[-1] != self.text_dims[-1]:
            raise ConfigError(
                f"embedding dims differ: image_dims ends {self.image_dims[-1]}, "
                f"text_dims ends {self.text_dims[-1]}"
            )
        if self.image_dims[0] != self.d_image_in:
            raise ConfigError(
                f"image_dims starts {self.image_dims[0]} but d_image_in = {self.d_image_in}"
            )
        if self.text_dims[0] != self.d_text_in:
            raise ConfigError(
                f"text_dims starts {self.text_dims[0]} but d_text_in = {self.d_text_in}"
            )
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.pretrain_iterations < 0 or self.pretrain_learning_rate <= 0:
            raise ConfigError("pretrain_iterations must be >= 0 and pretrain_learning_rate > 0")
        if self.task_count < 1:
            raise ConfigError(f"task_count must be >= 1, got {self.task_count}")
        if len(self.separations) not in (1, self.task_count):
            raise ConfigError(
                f"separations needs 1 or task_count={self.task_count} entries, "
                f"got {len(self.separations)}"
            )
        if any(s <= 0 for s in self.separations):
            raise ConfigError("separations must be positive")
        if self.method not in Method.__members__:
            raise ConfigError(
                f"method must be one of {sorted(Method.__members__)}, got {self.method!r}"
            )
        try:
            self.trainer_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.reference_size < 1 or self.heldout_size < 1:
            raise ConfigError("reference_size and heldout_size must be >= 1")
        if any(k < 1 for k in self.recall_ks):
            raise ConfigError("recall_ks must be >= 1")
        return self

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(
            iterations_per_task=self.iterations_per_task,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            rho=self.rho,
            lambda_cd=self.lambda_cd,
            beta_map=self.beta_map,
            method=Method[self.method],
            include_reference_gram=self.include_reference_gram,
            seed=self.seed,
            capture_cap=self.capture_cap,
            optimizer=self.optimizer,
            cd_temperature=self.cd_temperature,
            map_temperature=self.map_temperature,
        ).validate()

    def task_separation(self, index: int) -> float:
        if len(self.separations) == 1:
            return self.separations[0]
        return self.separations[index]


_SCHEMA: dict[str, dict[str, str]] = {
    "model": {
        "image_dims": "image_dims",
        "text_dims": "text_dims",
        "temperature": "temperature",
        "pretrain_iterations": "pretrain_iterations",
        "pretrain_learning_rate": "pretrain_learning_rate",
    },
    "trainer": {
        "iterations_per_task": "iterations_per_task",
        "batch_size": "batch_size",
        "learning_rate": "learning_rate",
        "rho": "rho",
        "lambda_cd": "lambda_cd",
        "beta_map": "beta_map",
        "method": "method",
        "include_reference_gram": "include_reference_gram",
        "seed": "seed",
        "capture_cap": "capture_cap",
        "optimizer": "optimizer",
        "cd_temperature": "cd_temperature",
        "map_temperature": "map_temperature",
    },
    "tasks": {
        "count": "task_count",
        "classes_per_task": "classes_per_task",
        "samples_per_class": "samples_per_class",
        "d_image_in": "d_image_in",
        "d_text_in": "d_text_in",
        "separations": "separations",
        "seed_base": "task_seed_base",
    },
    "reference": {"seed": "reference_seed", "size": "reference_size"},
    "probes": {
        "heldout_seed": "heldout_seed",
        "heldout_size": "heldout_size",
        "include_reference": "include_reference_probe",
    },
    "output": {
        "emit_spectra": "emit_spectra",
        "emit_embeddings": "emit_embeddings",
        "emit_plots": "emit_plots",
        "recall_ks": "recall_ks",
    },
}

_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_value(attr: str, raw: str, current):
    raw = raw.strip()
    if attr in ("cd_temperature", "map_temperature"):
        return None if raw == "" else float(raw)
    if isinstance(current, bool):
        if raw.lower() not in _BOOL_VALUES:
            raise ConfigError(f"{attr}: expected a boolean, got {raw!r}")
        return _BOOL_VALUES[raw.lower()]
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        items = [p.strip() for p in raw.split(",") if p.strip() != ""]
        if not items:
            raise ConfigError(f"{attr}: expected a comma-separated list, got {raw!r}")
        kind = float if attr == "separations" else int
        return tuple(kind(p) for p in items)
    return raw


def parse_run_config(path) -> RunConfig:
    """Load an INI config, rejecting unknown sections/keys, onto defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            attr = _SCHEMA[section][key]
            try:
                value = _parse_value(attr, raw, getattr(cfg, attr))
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: {exc}") from exc
            setattr(cfg, attr, value)
    return cfg.validate()


def _format_value(attr: str, value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def effective_config_text(cfg: RunConfig) -> str:
    """INI text with every key resolved; parsing it back yields cfg."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, attr in keys.items():
            lines.append(f"{key} = {_format_value(attr, getattr(cfg, attr))}")
        lines.append("")
    return "\n".join(lines)


def build_tasks(cfg: RunConfig) -> list[tuple[TaskDataset, TaskDataset]]:
    return [
        make_task(
            seed=cfg.task_seed_base + i,
            n_classes=cfg.classes_per_task,
            n_per_class=cfg.samples_per_class,
            d_image_in=cfg.d_image_in,
            d_text_in=cfg.d_text_in,
            separation=cfg.task_separation(i),
            name=f"task{i + 1}",
        )
        for i in range(cfg.task_count)
    ]


def build_reference(cfg: RunConfig) -> ReferenceSet:
    return make_reference_set(cfg.reference_seed, cfg.reference_size, cfg.d_image_in, cfg.d_text_in)


def build_probes(cfg: RunConfig, reference: ReferenceSet) -> list[tuple[str, ReferenceSet]]:
    probes = []
    if cfg.include_reference_probe:
        probes.append(("reference", reference))
    probes.append(
        ("heldout", make_reference_set(cfg.heldout_seed, cfg.heldout_size, cfg.d_image_in, cfg.d_text_in))
    )
    return probes


def build_encoder(cfg: RunConfig, reference: ReferenceSet):
    encoder = make_default_dual_encoder(
        cfg.d_image_in,
        cfg.d_text_in,
        cfg.seed,
        image_hidden=tuple(cfg.image_dims[1:-1]),
        text_hidden=tuple(cfg.text_dims[1:-1]),
        embed_dim=cfg.image_dims[-1],
        temperature=cfg.temperature,
    )
    if cfg.pretrain_iterations > 0:
        pretrain_dual_encoder(
            encoder,
            reference,
            cfg.pretrain_iterations,
            batch_size=cfg.batch_size,
            learning_rate=cfg.pretrain_learning_rate,
            seed=cfg.seed,
        )
    return encoder


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def spectra_csv(rows) -> str:
    lines = ["layer,index,eigenvalue,selected"]
    for layer, index, value, selected in rows:
        lines.append(f"{layer},{index},{value!r},{selected}")
    return "\n".join(lines) + "\n"


def embeddings_csv(model, probe: ReferenceSet) -> str:
    img, _ = forward(model.image_encoder, probe.images)
    txt, _ = forward(model.text_encoder, probe.texts)
    dim = img.shape[1]
    lines = ["kind,index," + ",".join(f"e_{j}" for j in range(dim))]
    for kind, emb in (("image", img), ("text", txt)):
        for i in range(emb.shape[0]):
            lines.append(f"{kind},{i}," + ",".join(repr(float(v)) for v in emb[i]))
    return "\n".join(lines) + "\n"


def cmd_run(config_path, out_dir, seed: int | None = None) -> int:
    try:
        cfg = parse_run_config(config_path)
        if seed is not None:
            cfg.seed = seed
            cfg.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    phase = "setup"
    try:
        task_pairs = build_tasks(cfg)
        reference = build_reference(cfg)
        probes = build_probes(cfg, reference)
        encoder = build_encoder(cfg, reference)
        phase = "training"
        state, matrix, gaps = run_sequence(
            task_pairs, reference, cfg.trainer_config(), probes=probes, encoder=encoder
        )
        phase = "outputs"
        _write(out / "accuracy_matrix.csv", accuracy_matrix_csv(matrix))
        _write(out / "summary.csv", summary_csv(matrix))
        _write(out / "gap.csv", gap_csv(gaps))
        heldout = dict(probes)["heldout"]
        ks = [k for k in cfg.recall_ks if k <= len(heldout)]
        recalls = [(k, retrieval_recall_at_k(state.model, heldout, k)) for k in ks]
        _write(out / "recall.csv", recall_csv(recalls))
        if cfg.emit_spectra:
            _write(out / "spectra.csv", spectra_csv(spectrum_rows(state.gram, cfg.rho)))
        if cfg.emit_embeddings:
            _write(out / "embeddings.csv", embeddings_csv(state.model, heldout))
        save_checkpoint(state, out / "checkpoint.gnsp")
        _write(out / "effective_config", effective_config_text(cfg))
        if cfg.emit_plots:
            code = cmd_plot(out / "gap.csv", out / "gap.svg")
            if code != EXIT_OK:
                return code
            if cfg.emit_spectra:
                code = cmd_plot(out / "spectra.csv", out / "spectra.svg", log_y=True)
                if code != EXIT_OK:
                    return code
    except (TrainingError, CheckpointError, ValueError, OSError) as exc:
        print(f"runtime failure during {phase}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_eval(checkpoint_path, config_path) -> int:
    try:
        cfg = parse_run_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        state = load_checkpoint(checkpoint_path)
        task_pairs = build_tasks(cfg)
        print("task,accuracy")
        for _, test in task_pairs:
            print(f"{test.name},{evaluate_accuracy(state.model, test)!r}")
    except (CheckpointError, ValueError, OSError) as exc:
        print(f"runtime failure during eval: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_export_embeddings(checkpoint_path, probe_name: str, out_path, config_path=None) -> int:
    try:
        cfg = parse_run_config(config_path) if config_path is not None else RunConfig().validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        state = load_checkpoint(checkpoint_path)
        reference = build_reference(cfg)
        sources: dict[str, ReferenceSet] = {name: probe for name, probe in build_probes(cfg, reference)}
        sources.setdefault("reference", reference)
        if probe_name in sources:
            probe = sources[probe_name]
        else:
            by_name = {test.name: (train, test) for train, test in build_tasks(cfg)}
            if probe_name not in by_name:
                print(
                    f"config error: unknown probe {probe_name!r}; "
                    f"expected one of {sorted(sources) + sorted(by_name)}",
                    file=sys.stderr,
                )
                return EXIT_CONFIG
            _, test = by_name[probe_name]
            probe = ReferenceSet(images=test.images, texts=test.class_prototypes[test.labels])
        _write(Path(out_path), embeddings_csv(state.model, probe))
    except (CheckpointError, ValueError, OSError) as exc:
        print(f"runtime failure during export: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _read_plot_series(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]
    except OSError as exc:
        raise ConfigError(f"cannot read csv: {exc}") from exc
    lines = [line for line in lines if line.strip() != ""]
    if len(lines) < 2:
        raise ConfigError("csv has no data rows")
    header = [h.strip() for h in lines[0].split(",")]
    series: dict[str, list[tuple[float, float]]] = {}

    def add(name, x, y):
        series.setdefault(name, []).append((x, y))

    if header == ["checkpoint", "probe", "gap"]:
        x_label, y_label = "checkpoint", "gap"
        for row_no, line in enumerate(lines[1:], start=2):
            parts = line.split(",")
            if len(parts) != 3:
                raise ConfigError(f"row {row_no}: expected 3 fields, got {len(parts)}")
            try:
                add(parts[1], float(parts[0]), float(parts[2]))
            except ValueError as exc:
                raise ConfigError(f"row {row_no}: {exc}") from exc
    elif header == ["layer", "index", "eigenvalue", "selected"]:
        x_label, y_label = "index", "eigenvalue"
        for row_no, line in enumerate(lines[1:], start=2):
            parts = line.split(",")
            if len(parts) != 4:
                raise ConfigError(f"row {row_no}: expected 4 fields, got {len(parts)}")
            try:
                add(f"layer{int(parts[0])}", float(parts[1]), float(parts[2]))
            except ValueError as exc:
                raise ConfigError(f"row {row_no}: {exc}") from exc
    elif len(header) == 2:
        x_label, y_label = header
        for row_no, line in enumerate(lines[1:], start=2):
            parts = line.split(",")
            if len(parts) != 2:
                raise ConfigError(f"row {row_no}: expected 2 fields, got {len(parts)}")
            try:
                add(header[1], float(parts[0]), float(parts[1]))
            except ValueError as exc:
                raise ConfigError(f"row {row_no}: {exc}") from exc
    else:
        raise ConfigError(f"unsupported csv header: {header}")
    return series, x_label, y_label


def cmd_plot(csv_path, out_svg, log_y: bool = False) -> int:
    try:
        series, x_label, y_label = _read_plot_series(csv_path)
        if log_y:
            series = {
                name: [(x, float(np.log10(y))) for x, y in pts if y > 0]
                for name, pts in series.items()
            }
            series = {name: pts for name, pts in series.items() if pts}
            if not series:
                raise ConfigError("no positive values to plot on a log scale")
            y_label = f"log10 {y_label}"
        svg = render_lines(series, x_label=x_label, y_label=y_label)
    except ConfigError as exc:
        print(f"plot input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _write(Path(out_svg), svg)
    except OSError as exc:
        print(f"runtime failure during plot: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gnsp",
        description="Continual-learning experiments with gradient null-space projection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a configured task sequence")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=None)

    sub.add_parser("selftest", help="run the built-in invariant suite").add_argument(
        "--perturb-projector", action="store_true", help=argparse.SUPPRESS
    )

    p_plot = sub.add_parser("plot", help="render a CSV as an SVG line chart")
    p_plot.add_argument("--in", dest="csv_in", required=True)
    p_plot.add_argument("--out", required=True)
    p_plot.add_argument("--log-y", action="store_true")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on configured tasks")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)

    p_exp = sub.add_parser("export-embeddings", help="dump raw probe embeddings to CSV")
    p_exp.add_argument("--checkpoint", required=True)
    p_exp.add_argument("--probe", required=True)
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--config", default=None)

    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.out, seed=args.seed)
    if args.command == "selftest":
        return run_selftest(perturb="projector" if args.perturb_projector else None)
    if args.command == "plot":
        return cmd_plot(args.csv_in, args.out, log_y=args.log_y)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.config)
    if args.command == "export-embeddings":
        return cmd_export_embeddings(args.checkpoint, args.probe, args.out, args.config)
    parser.error(f"unknown command {args.command!r}")
    return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
