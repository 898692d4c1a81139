"""Pipeline configuration: a flat INI file with one section per stage.

Example::

    [run]
    seed = 20339
    output = out

    [paths]
    messages = data/messages.jsonl
    edges = data/edges.csv
    embeddings = data/embeddings.gsem
    scores = data/scores.csv

    [gat]
    heads = 4
    epochs = 200
    l2_penalty = 0.08

    [split]
    train_school = Dartmouth
    gat_train_nonneg = 601
    gat_train_neg = 94
    test_per_class = 25
    stack_per_class = 25

    [glmm]
    quad_nodes = 1
    labels_from = stacked

Command-line flags override config keys.  All randomness flows from the
single ``[run] seed``.
"""

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import School, SplitSpec
from .errors import InputError
from .gat import GatConfig

LABEL_SOURCES = ("stacked", "gat", "baseline")


@dataclass
class PipelineConfig:
    seed: int = 0
    output: Path = Path("out")
    messages: Path | None = None
    edges: Path | None = None
    embeddings: Path | None = None
    scores: Path | None = None
    gat: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)
    quad_nodes: int = 1
    labels_from: str = "stacked"

    def gat_config(self, d_in):
        known = {"heads", "d_head", "leaky_slope", "class_weight", "l2_penalty",
                 "learning_rate", "epochs", "activation"}
        unknown = set(self.gat) - known
        if unknown:
            raise InputError(f"unknown [gat] keys: {sorted(unknown)}")
        return GatConfig(d_in=d_in, seed=self.seed, **self.gat)

    def split_spec(self):
        known = {"train_school", "gat_train_nonneg", "gat_train_neg",
                 "test_per_class", "stack_per_class"}
        unknown = set(self.split) - known
        if unknown:
            raise InputError(f"unknown [split] keys: {sorted(unknown)}")
        kwargs = dict(self.split)
        if "train_school" in kwargs:
            kwargs["train_school"] = School.from_token(kwargs["train_school"])
        return SplitSpec.paper_default(self.seed, **kwargs)

    def require_paths(self, *names):
        for name in names:
            path = getattr(self, name)
            if path is None:
                raise InputError(f"config is missing [paths] {name}")
            if not Path(path).exists():
                raise InputError(f"{name} path does not exist: {path}")


def _get_typed(section, key, cast, errors):
    raw = section[key]
    try:
        return cast(raw)
    except ValueError:
        errors.append(f"[{section.name}] {key}: cannot parse {raw!r}")
        return None


def load_config(path):
    """Parse and validate a pipeline INI file."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise InputError(f"{path}: {exc}") from None

    cfg = PipelineConfig()
    errors = []
    if parser.has_section("run"):
        run = parser["run"]
        if "seed" in run:
            cfg.seed = _get_typed(run, "seed", int, errors) or cfg.seed
        if "output" in run:
            cfg.output = Path(run["output"])
    if parser.has_section("paths"):
        for key in ("messages", "edges", "embeddings", "scores"):
            if key in parser["paths"]:
                setattr(cfg, key, Path(parser["paths"][key]))
        if "output" in parser["paths"]:
            cfg.output = Path(parser["paths"]["output"])
    if parser.has_section("gat"):
        section = parser["gat"]
        for key in section:
            if key in ("heads", "d_head", "epochs"):
                cfg.gat[key] = _get_typed(section, key, int, errors)
            elif key in ("leaky_slope", "class_weight", "l2_penalty", "learning_rate"):
                cfg.gat[key] = _get_typed(section, key, float, errors)
            elif key == "activation":
                cfg.gat[key] = section[key].strip()
            else:
                errors.append(f"[gat] unknown key {key!r}")
    if parser.has_section("split"):
        section = parser["split"]
        for key in section:
            if key in ("gat_train_nonneg", "gat_train_neg", "test_per_class",
                       "stack_per_class"):
                cfg.split[key] = _get_typed(section, key, int, errors)
            elif key == "train_school":
                cfg.split[key] = section[key].strip()
            else:
                errors.append(f"[split] unknown key {key!r}")
    if parser.has_section("glmm"):
        section = parser["glmm"]
        if "quad_nodes" in section:
            cfg.quad_nodes = _get_typed(section, "quad_nodes", int, errors) or 1
        if "labels_from" in section:
            cfg.labels_from = section["labels_from"].strip()
            if cfg.labels_from not in LABEL_SOURCES:
                errors.append(f"[glmm] labels_from must be one of {LABEL_SOURCES}")
    if errors:
        raise InputError(f"{path}: " + "; ".join(errors))
    return cfg
