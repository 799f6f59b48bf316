"""Command-line experiments: ``cmfcold split|train|evaluate|predict``.

Settings come from a flat ``key = value`` config file (see
:class:`ExperimentConfig`); command-line flags override it. Every random
choice draws from a named substream of the single ``seed``.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import sys
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import serialization
from .cmf import CmfHyperparams, FactorPartition, als_fit, lbfgs_fit
from .data import CONTINUOUS, SideInfoMatrix, id_sort_key
from .evaluation import MostPopularScorer, rank_order, random_baseline, run_scenarios
from .offsets import OffsetsModel, offsets_fit, offsets_predict_new_user, offsets_two_stage_fit
from .optimizer import NonFiniteObjectiveError, SolverConfig, Termination
from .pipeline import (SplitSpec, four_way_split, load_long_attributes, load_ratings,
                       load_wide_attributes, parse_schema, pca_reduce, prepare_training,
                       read_manifest, read_split, write_split)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 2, 3, 4

MODEL_KINDS = ("mf", "cmf", "offsets", "offsets-two-stage")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class SolverFailure(Exception):
    pass


@dataclass
class ExperimentConfig:
    # data
    ratings: Optional[str] = None
    ratings_sep: str = "::"
    user_attributes: Optional[str] = None
    user_attr_sep: str = "::"
    user_schema: str = "user:id,gender:categorical,age:categorical,occupation:categorical,zip:ignore"
    user_attr_header: bool = False
    item_attributes: Optional[str] = None
    item_attr_format: str = "long"
    item_attr_sep: str = ","
    item_schema: Optional[str] = None
    item_attr_header: bool = True
    pca_components: int = 50
    pca_fit: str = "all"
    side_scope: str = "all"
    # split
    fraction_new_users: float = 0.25
    fraction_new_items: float = 0.25
    fraction_warm_test: float = 0.15
    min_test_ratings: int = 5
    # model
    model: str = "cmf"
    name: Optional[str] = None
    method: str = "lbfgs"
    sweeps: int = 10
    k: int = 40
    k_attr: int = 0
    k_shared: Optional[int] = None
    k_main: int = 0
    lambda_: float = 1e-4
    lambda_A: Optional[float] = None
    lambda_B: Optional[float] = None
    lambda_C: Optional[float] = None
    lambda_D: Optional[float] = None
    lambda_m: Optional[float] = None
    lambda_n: Optional[float] = None
    lambda_offsets: Optional[float] = None
    w_x: float = 1.0
    w_u: float = 1.0
    w_i: float = 1.0
    sigmoid: bool = True
    # solver
    max_iterations: int = 800
    memory_pairs: int = 10
    gradient_tolerance: float = 1e-5
    relative_objective_tolerance: float = 1e-9
    # evaluation
    ndcg_k: int = 5
    clip: Optional[str] = None
    # run
    seed: int = 1
    output_dir: str = "runs"
    threads: Optional[int] = None
    deterministic: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        choices = {"model": MODEL_KINDS, "method": ("lbfgs", "als"),
                   "item_attr_format": ("long", "wide"), "pca_fit": ("all", "train"),
                   "side_scope": ("all", "train")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}; got {getattr(self, key)!r}")
        if self.k < 1 or self.pca_components < 0 or self.ndcg_k < 1 or self.sweeps < 1:
            raise ConfigError("k, ndcg_k and sweeps must be >= 1 and pca_components >= 0")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")
        self.clip_range()
        self.partition()

    def partition(self) -> FactorPartition:
        shared = self.k - self.k_attr - self.k_main if self.k_shared is None else self.k_shared
        try:
            return FactorPartition(self.k_attr, shared, self.k_main)
        except ValueError as exc:
            raise ConfigError(f"factor partition: {exc}") from None

    def clip_range(self):
        if self.clip is None:
            return None
        try:
            lo, hi = (float(v) for v in self.clip.split(","))
        except ValueError:
            raise ConfigError(f"clip must look like '1,5'; got {self.clip!r}") from None
        return lo, hi

    def hyperparams(self) -> CmfHyperparams:
        overrides = {f"lambda_{c}": getattr(self, f"lambda_{c}") for c in "ABCDmn"}
        try:
            return CmfHyperparams(self.lambda_, self.w_x, self.w_u, self.w_i, self.partition(),
                                  self.sigmoid, **overrides)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def solver(self) -> SolverConfig:
        try:
            return SolverConfig(self.memory_pairs, self.max_iterations, self.gradient_tolerance,
                                self.relative_objective_tolerance)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def split_spec(self) -> SplitSpec:
        try:
            return SplitSpec(self.fraction_new_users, self.fraction_new_items,
                             self.min_test_ratings, substream_seed(self.seed, "split"),
                             self.fraction_warm_test)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def model_name(self) -> str:
        return self.name or self.model

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


# config file keys use "lambda" for the Python-safe field name "lambda_"
_KEY_ALIASES = {"lambda": "lambda_"}
_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _convert(type_name: str, name: str, text: str):
    text = text.strip()
    optional = type_name.startswith("Optional[")
    base = type_name[9:-1] if optional else type_name
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if base == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot read {text!r} as {base}") from None
    return "\t" if text == "\\t" else text


def config_from_mapping(values: dict, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    current = dataclasses.asdict(base) if base is not None else {}
    for key, raw in values.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        current[name] = _convert(_FIELDS[name].type, key, raw) if isinstance(raw, str) else raw
    return ExperimentConfig(**current)


def parse_config(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return config_from_mapping(values, base)


def serialize_config(cfg: ExperimentConfig) -> str:
    inverse = {v: k for k, v in _KEY_ALIASES.items()}
    lines = []
    for name in _FIELDS:
        value = getattr(cfg, name)
        if value is None:
            text = "none"
        elif isinstance(value, float):
            text = repr(value)
        elif value == "\t":
            text = "\\t"
        else:
            text = str(value)
        lines.append(f"{inverse.get(name, name)} = {text}")
    return "\n".join(lines) + "\n"


def substream_seed(seed: int, name: str) -> int:
    """Independent 32-bit seed for the component ``name`` (split, init, baseline)."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# data helpers


def _existing(path: Optional[str], key: str) -> Path:
    if path is None:
        raise ConfigError(f"config key {key!r} is not set")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{key} file not found: {p}")
    return p


def load_user_side(cfg: ExperimentConfig) -> Optional[SideInfoMatrix]:
    if cfg.user_attributes is None:
        return None
    path = _existing(cfg.user_attributes, "user_attributes")
    return load_wide_attributes(path, cfg.user_attr_sep, parse_schema(cfg.user_schema),
                                header=cfg.user_attr_header)


def load_item_side(cfg: ExperimentConfig, train_items=None) -> Optional[SideInfoMatrix]:
    if cfg.item_attributes is None:
        return None
    path = _existing(cfg.item_attributes, "item_attributes")
    if cfg.item_attr_format == "long":
        side = load_long_attributes(path, sep=cfg.item_attr_sep, header=cfg.item_attr_header)
    else:
        if cfg.item_schema is None:
            raise ConfigError("item_schema is required for wide item attributes")
        side = load_wide_attributes(path, cfg.item_attr_sep, parse_schema(cfg.item_schema),
                                    header=cfg.item_attr_header)
    if 0 < cfg.pca_components < side.n_cols and np.all(side.column_kinds == CONTINUOUS):
        side = _reduce(side, cfg, train_items)
    return side


def _reduce(side: SideInfoMatrix, cfg: ExperimentConfig, train_items) -> SideInfoMatrix:
    if cfg.pca_fit == "all" or train_items is None:
        return pca_reduce(side, cfg.pca_components)[0]
    fit_rows = side.row_present & np.isin(side.row_ids, np.asarray(train_items, dtype=str))
    fit_on = SideInfoMatrix(side.values, side.column_kinds, fit_rows, side.row_ids, side.column_names)
    _, transform = pca_reduce(fit_on, cfg.pca_components)
    reduced = np.zeros((side.n_rows, cfg.pca_components))
    rows = np.flatnonzero(side.row_present)
    reduced[rows] = transform.transform(side.values[rows])
    return SideInfoMatrix(reduced, CONTINUOUS, side.row_present, side.row_ids,
                          [f"pc{j + 1}" for j in range(cfg.pca_components)])


def _split_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out / "split"


def _train_items(cfg: ExperimentConfig):
    path = _split_dir(cfg) / "train.tsv"
    return read_manifest(path).item_ids if path.exists() else None


def _load_split(cfg: ExperimentConfig):
    try:
        return read_split(_split_dir(cfg))
    except FileNotFoundError as exc:
        raise DataError(f"{exc}; run the split command first") from None


# ---------------------------------------------------------------------------
# commands


def cmd_split(cfg: ExperimentConfig) -> dict:
    path = _existing(cfg.ratings, "ratings")
    ratings = load_ratings(path, cfg.ratings_sep)
    item_side = load_item_side(cfg) if cfg.item_attributes is not None else None
    if item_side is None:
        if cfg.fraction_new_items > 0:
            raise ConfigError("fraction_new_items > 0 needs item attributes (config key 'item_attributes')")
        available = np.zeros(ratings.n_items, dtype=bool)
    else:
        _, available = item_side.rows_for(ratings.item_ids)
    split = four_way_split(ratings, available, cfg.split_spec())
    paths = write_split(split, _split_dir(cfg))
    (cfg.out / "config.txt").write_text(serialize_config(cfg))
    for name, n_r, n_u, n_i in split.summary():
        print(f"{name:<15} {n_r:>9} ratings {n_u:>6} users {n_i:>6} items")
    return paths


def _side_for_model(cfg: ExperimentConfig, train):
    if cfg.model == "mf":
        return None, None
    return load_user_side(cfg), load_item_side(cfg, train.item_ids)


def fit_model(cfg: ExperimentConfig, X, U, I, callback=None):
    init = substream_seed(cfg.seed, "init")
    if cfg.model in ("mf", "cmf"):
        hyper = cfg.hyperparams()
        if cfg.model == "mf":
            hyper = dataclasses.replace(hyper, w_u=0.0, w_i=0.0, partition=FactorPartition(0, cfg.k, 0))
            U = I = None
        if cfg.method == "als":
            if hyper.use_sigmoid and any(s is not None and s.binary_mask.any() for s in (U, I)):
                raise ConfigError("method = als needs sigmoid = false when binary attributes are used")
            return als_fit(X, U, I, hyper, sweeps=cfg.sweeps, init_seed=init, callback=callback)
        return lbfgs_fit(X, U, I, hyper, cfg.solver(), init_seed=init, callback=callback)
    if cfg.model == "offsets":
        return offsets_fit(X, U, I, cfg.lambda_, cfg.k, cfg.solver(), init, cfg.lambda_offsets,
                           callback=callback)
    return offsets_two_stage_fit(X, U, I, cfg.lambda_, cfg.k, cfg.solver(), init)


def cmd_train(cfg: ExperimentConfig) -> Path:
    split = _load_split(cfg)
    U_raw, I_raw = _side_for_model(cfg, split.train)
    X, U, I = prepare_training(split.train, U_raw, I_raw, cfg.side_scope)
    models_dir = cfg.out / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    log_path = models_dir / f"{cfg.model_name}.log"
    with open(log_path, "w") as log:
        log.write(f"# model={cfg.model} method={cfg.method} k={cfg.k} lambda={cfg.lambda_!r} "
                  f"w_x={cfg.w_x!r} w_u={cfg.w_u!r} w_i={cfg.w_i!r} "
                  f"max_iterations={cfg.max_iterations} seed={cfg.seed}\n")
        log.write(f"# users={X.n_users} items={X.n_items} ratings={X.nnz} "
                  f"user_attrs={0 if U is None else U.n_cols} item_attrs={0 if I is None else I.n_cols}\n")
        log.write("iteration\tobjective\n")
        start = time.perf_counter()
        try:
            model = fit_model(cfg, X, U, I)
        except (NonFiniteObjectiveError, np.linalg.LinAlgError) as exc:
            log.write(f"# failed: {exc}\n")
            raise SolverFailure(str(exc)) from None
        for it, value in enumerate(model.trace):
            log.write(f"{it}\t{value!r}\n")
        log.write(f"# termination={model.termination} seconds={time.perf_counter() - start:.3f}\n")
    if model.termination == Termination.NON_FINITE.value:
        raise SolverFailure(f"objective became non-finite; see {log_path}")
    path = serialization.save_model(model, models_dir / f"{cfg.model_name}.npz")
    print(f"saved {path} (objective {model.trace[0]:.6g} -> {model.trace[-1]:.6g}, "
          f"{model.termination})")
    return path


def build_scorers(cfg: ExperimentConfig, model_paths: List[Path], split):
    """Baselines first, then one scorer per model file, keyed by report label."""
    scorers = {"Most-popular": MostPopularScorer(split.train),
               "Random": random_baseline(substream_seed(cfg.seed, "baseline"))}
    if not model_paths:
        return scorers
    tests = split.test_sets()
    if tests["new-users"].nnz or tests["new-both"].nnz:
        if cfg.user_attributes is None:
            raise ConfigError("new-user scenarios need user attributes; set 'user_attributes'")
    if tests["new-items"].nnz or tests["new-both"].nnz:
        if cfg.item_attributes is None:
            raise ConfigError("new-item scenarios need item attributes; set 'item_attributes'")
    U = load_user_side(cfg)
    I = load_item_side(cfg, split.train.item_ids)
    for path in model_paths:
        model = _load_model(path)
        scorers[path.stem] = model.scorer(U, I)
    return scorers


def _load_model(path):
    try:
        return serialization.load_model(path)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None


def cmd_evaluate(cfg: ExperimentConfig, model_paths: Optional[List[str]] = None) -> list:
    split = _load_split(cfg)
    if model_paths is None:
        paths = sorted((cfg.out / "models").glob("*.npz"))
    else:
        paths = [_existing(p, "model") for p in model_paths]
    scorers = build_scorers(cfg, paths, split)
    reports = run_scenarios(scorers, split, cfg.ndcg_k, cfg.clip_range())
    out = cfg.out / "reports"
    out.mkdir(parents=True, exist_ok=True)
    tables = []
    for report in reports:
        (out / f"{report.scenario}.tsv").write_text(report.to_delimited())
        tables.append(report.to_table())
    (out / "report.txt").write_text("\n".join(tables))
    print("\n".join(tables), end="")
    return reports


def _read_vector(path) -> np.ndarray:
    p = _existing(path, "attribute vector")
    try:
        return np.array(p.read_text().replace(",", " ").split(), dtype=np.float64)
    except ValueError:
        raise DataError(f"{p}: attribute vector must be numbers") from None


NEW_LABEL = "<attributes>"


def _side_with_vector(side, vector, n_cols, what):
    if vector is None:
        return side
    if vector.shape[0] != n_cols:
        raise DataError(f"{what} attribute vector has {vector.shape[0]} values; model expects {n_cols}")
    return SideInfoMatrix(vector[None, :], CONTINUOUS, row_ids=[NEW_LABEL])


def cmd_predict(cfg: ExperimentConfig, model_path, user=None, item=None, user_attrs=None,
                item_attrs=None, top_n=None, timings=False, stream=None) -> list:
    """Score one (user, item) pair, or rank all model items for one user."""
    stream = stream or sys.stdout
    model = _load_model(_existing(model_path, "model"))
    if (user is None) == (user_attrs is None):
        raise ConfigError("give exactly one of --user or --user-attrs")
    if item is not None and item_attrs is not None:
        raise ConfigError("give at most one of --item or --item-attrs")
    u_vec = None if user_attrs is None else _read_vector(user_attrs)
    i_vec = None if item_attrs is None else _read_vector(item_attrs)
    user_label = NEW_LABEL if u_vec is not None else str(user)
    U = _side_with_vector(None, u_vec, model.C.shape[0], "user")
    I = _side_with_vector(None, i_vec, model.D.shape[0], "item")
    known_user = user_label in set(model.user_ids.tolist())
    if U is None and not known_user:
        U = load_user_side(cfg)
        if U is None or U.row(user_label) is None:
            raise DataError(f"unknown user {user_label!r} and no attributes for it")
    if item is not None and item not in set(model.item_ids.tolist()) and I is None:
        I = load_item_side(cfg, _train_items(cfg))
        if I is None or I.row(str(item)) is None:
            raise DataError(f"unknown item {item!r} and no attributes for it")

    start = time.perf_counter()
    if item is not None or i_vec is not None:
        item_labels = np.array([NEW_LABEL if i_vec is not None else str(item)])
    else:
        item_labels = np.array(sorted(model.item_ids.tolist(), key=id_sort_key))
    if isinstance(model, OffsetsModel) and not known_user and item is None and i_vec is None:
        attrs = U.row(user_label)
        ids = model.item_ids.tolist()
        by_id = sorted(range(len(ids)), key=lambda j: id_sort_key(ids[j]))
        scores = offsets_predict_new_user(attrs, model, item_subset=by_id)
        path = "vector-matrix product, no linear solve"
    else:
        scores = model.scorer(U, I)(np.full(item_labels.shape[0], user_label), item_labels)
        path = "fitted factors" if known_user else (
            "vector-matrix product, no linear solve" if isinstance(model, OffsetsModel)
            else "fold-in solve")
    elapsed = time.perf_counter() - start
    if np.isnan(scores).any():
        raise DataError("some requested pairs cannot be scored by this model")
    order = rank_order(scores)
    if top_n is not None:
        order = order[:top_n]
    rows = [(item_labels[j], float(scores[j])) for j in order]
    for label, score in rows:
        stream.write(f"{label}\t{score!r}\n")
    if timings:
        sys.stderr.write(f"scored {item_labels.shape[0]} items in {elapsed * 1e3:.3f} ms ({path})\n")
    return rows


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap on BLAS/worker threads")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for bit-exact reruns")
    common.add_argument("--output-dir")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cmfcold", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("split", parents=[common], help="write train/test manifests")
    p.add_argument("--ratings")
    p = sub.add_parser("train", parents=[common], help="fit one model")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--name")
    p = sub.add_parser("evaluate", parents=[common], help="score models on every scenario")
    p.add_argument("models", nargs="*", help="model files (default: all under output-dir/models)")
    p = sub.add_parser("predict", parents=[common], help="score or rank items for one user")
    p.add_argument("model_file")
    p.add_argument("--user")
    p.add_argument("--user-attrs", help="file holding the user's attribute vector")
    p.add_argument("--item")
    p.add_argument("--item-attrs", help="file holding the item's attribute vector")
    p.add_argument("--top-n", type=int)
    p.add_argument("--timings", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = parse_config(path.read_text(), cfg)
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    for flag, key in (("seed", "seed"), ("threads", "threads"), ("output_dir", "output_dir"),
                      ("ratings", "ratings"), ("model", "model"), ("name", "name")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if args.deterministic:
        overrides["deterministic"] = True
    return config_from_mapping(overrides, cfg)


def _thread_limit(cfg: ExperimentConfig):
    limit = 1 if cfg.deterministic else cfg.threads
    if limit is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with _thread_limit(cfg):
            if args.command == "split":
                cmd_split(cfg)
            elif args.command == "train":
                cmd_train(cfg)
            elif args.command == "evaluate":
                cmd_evaluate(cfg, args.models or None)
            else:
                cmd_predict(cfg, args.model_file, args.user, args.item, args.user_attrs,
                            args.item_attrs, args.top_n, args.timings)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
