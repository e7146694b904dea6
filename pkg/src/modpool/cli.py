"""Command-line entry point: ``modpool <subcommand>``.

Exit codes: 0 success, 1 verification or training failure, 2 usage or
configuration error, 3 malformed input file.
"""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import gradsuite
from .data import (
    CapacityError,
    ClassSplit,
    DomainDataset,
    FormatError,
    IncompatibleDomainsError,
    SyntheticDomainSpec,
    TooFewClassesError,
    aggregate_classes,
    gen_synthetic_domain,
    read_dataset,
    sample_episode,
    split_classes,
    write_dataset,
)
from .evaluate import (
    DEFAULT_EPISODES,
    DEFAULT_QUERIES,
    DEFAULT_SHOT,
    DEFAULT_WAY,
    FT_ITERATIONS,
    FT_LR,
    METHODS,
    ConfigurationError,
    IndependentPool,
    ProtocolViolation,
    contribution_report,
    evaluate,
    format_contributions,
    format_report,
)
from .pool import KINDS, IDENTITY, BackboneSpec, ModelPool
from .tensor import DimensionError
from .train import (
    DivergenceError,
    TrainConfig,
    train_base,
    train_independent,
    train_modulator,
    train_selector,
    validation_episodes,
)

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_FORMAT = 0, 1, 2, 3
MANIFEST = "manifest.txt"


class UsageError(Exception):
    """Bad flags, configuration or input for a command (exit code 2)."""


class PipelineOrderError(UsageError):
    pass


class VerificationFailure(Exception):
    """A check ran to completion and reported failure (exit code 1)."""


# ---------------------------------------------------------------------------
# domain spec files


SPEC_KEYS = {"name", "feature_dim", "class_count", "examples_per_class", "cluster_spread",
             "transform", "params", "seed", "split"}
_REQUIRED_SPEC_KEYS = {"name", "feature_dim", "class_count", "examples_per_class", "cluster_spread",
                       "transform"}


class SpecParseError(UsageError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _check_name(name: str) -> str:
    if not name or any(c in name for c in ",= \t/\\") or name.startswith("."):
        raise ValueError(f"domain name {name!r} must be non-empty without commas, '=', slashes or spaces")
    return name


def _spec_from_block(fields_: dict[str, tuple[int, str]], start: int) -> SyntheticDomainSpec:
    missing = sorted(_REQUIRED_SPEC_KEYS - fields_.keys())
    if missing:
        raise SpecParseError(start, f"domain block lacks {', '.join(missing)}")

    def get(key, conv, default=None):
        if key not in fields_:
            return default
        line, text = fields_[key]
        try:
            return conv(text)
        except ValueError as exc:
            raise SpecParseError(line, f"bad value for {key}: {exc}") from None

    spread = get("cluster_spread", _floats)
    spec = SyntheticDomainSpec(
        name=get("name", _check_name),
        feature_dim=get("feature_dim", int),
        class_count=get("class_count", int),
        examples_per_class=get("examples_per_class", int),
        cluster_spread=spread[0] if len(spread) == 1 else spread,
        transform=get("transform", str.strip),
        transform_params=get("params", _floats, ()),
        seed=get("seed", int, 0),
        split=get("split", _ints),
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise SpecParseError(start, str(exc)) from None
    return spec


def parse_domain_specs(text: str) -> list[SyntheticDomainSpec]:
    """Parse ``[domain]`` blocks of ``key = value`` lines (``#`` starts a comment)."""
    specs, block, start = [], None, 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[domain]":
            if block is not None:
                specs.append(_spec_from_block(block, start))
            block, start = {}, lineno
            continue
        if block is None:
            raise SpecParseError(lineno, "expected a [domain] header before any settings")
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise SpecParseError(lineno, f"expected key = value, got {line!r}")
        if key not in SPEC_KEYS:
            raise SpecParseError(lineno, f"unknown key {key!r}")
        if key in block:
            raise SpecParseError(lineno, f"duplicate key {key!r}")
        block[key] = (lineno, value.strip())
    if block is not None:
        specs.append(_spec_from_block(block, start))
    if not specs:
        raise SpecParseError(max(1, len(text.splitlines())), "no [domain] blocks found")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise SpecParseError(start, f"duplicate domain names in {names}")
    return specs


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# data directories


@dataclass(frozen=True)
class DataEntry:
    name: str
    file: str
    sha256: str
    seed: int
    split: tuple[int, int, int]


def _format_manifest(entries: Sequence[DataEntry]) -> str:
    lines = ["# name file sha256 split-seed split-sizes\n"]
    for e in entries:
        lines.append(f"name={e.name} file={e.file} sha256={e.sha256} seed={e.seed} "
                     f"split={','.join(str(s) for s in e.split)}\n")
    return "".join(lines)


def _parse_manifest(text: str) -> list[DataEntry]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            kv = dict(tok.split("=", 1) for tok in line.split())
            split = _ints(kv["split"])
            if len(split) != 3:
                raise ValueError("split needs three sizes")
            out.append(DataEntry(kv["name"], kv["file"], kv["sha256"], int(kv["seed"]), split))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{MANIFEST} line {lineno}: {exc}") from None
    return out


@dataclass
class DataDir:
    datasets: list[DomainDataset]
    splits: list[ClassSplit]
    digest: str

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.datasets]

    def select(self, names: Sequence[str]) -> tuple[list[DomainDataset], list[ClassSplit]]:
        index = {n: i for i, n in enumerate(self.names)}
        unknown = [n for n in names if n not in index]
        if unknown:
            raise UsageError(f"domains {unknown} not in the data directory (has {self.names})")
        return [self.datasets[index[n]] for n in names], [self.splits[index[n]] for n in names]


def load_data_dir(path) -> DataDir:
    path = Path(path)
    manifest = path / MANIFEST
    if not manifest.is_file():
        raise UsageError(f"{path} has no {MANIFEST}; create it with gen-data")
    raw = manifest.read_bytes()
    datasets, splits = [], []
    for e in _parse_manifest(raw.decode("utf-8")):
        buf = (path / e.file).read_bytes()
        if ckpt.digest(buf) != e.sha256:
            raise FormatError(f"{e.file} does not match its manifest digest")
        ds = read_dataset(path / e.file)
        if ds.name != e.name:
            raise FormatError(f"{e.file} holds domain {ds.name!r}, manifest says {e.name!r}")
        datasets.append(ds)
        splits.append(split_classes(ds.class_count, e.seed, e.split))
    if not datasets:
        raise FormatError(f"{manifest} lists no domains")
    return DataDir(datasets, splits, ckpt.digest(raw))


# ---------------------------------------------------------------------------
# run configuration

_STAGE_FIELDS = ("lr", "batch_size", "steps", "eval_every", "patience", "val_episodes", "way", "shot", "query")
STAGES = ("base", "modulators", "selector", "independent")

# the shipped defaults reproduce the synthetic benchmark's calibrated run
_STAGE_DEFAULTS = {
    "base": dict(steps=1500, eval_every=25, patience=8),
    "modulators": dict(steps=1500, eval_every=25, patience=8),
    "selector": dict(steps=1500, eval_every=100, patience=5),
    "independent": dict(steps=1500, eval_every=25, patience=8),
}


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _names(text: str) -> tuple[str, ...]:
    return tuple(_check_name(v.strip()) for v in text.split(",") if v.strip())


@dataclass
class RunConfig:
    data_dir: Path
    out_dir: Path = Path(".")
    seed: int = 0
    sources: tuple[str, ...] = ()
    holdout: str = ""
    layer_widths: tuple[int, ...] = (128, 64)
    normalize: bool = False
    modulator_kind: str = "adapter"
    selector_hidden: int = 128
    stages: dict[str, TrainConfig] | None = None

    def stage(self, name: str) -> TrainConfig:
        return self.stages[name]

    def backbone(self, input_dim: int) -> BackboneSpec:
        return BackboneSpec(input_dim, self.layer_widths, self.normalize)

    def resolve_sources(self, available: Sequence[str]) -> list[str]:
        if self.sources:
            names = list(self.sources)
        else:
            names = [n for n in available if n != self.holdout]
        if self.holdout and self.holdout in names:
            raise ProtocolViolation(f"held-out domain {self.holdout!r} is listed among the sources {names}")
        if not names:
            raise UsageError("no source domains left to train on")
        return names


_TOP_KEYS: dict[str, Callable[[str], object]] = {
    "data_dir": Path, "out_dir": Path, "seed": int, "sources": _names, "holdout": str.strip,
    "layer_widths": _ints, "normalize": _bool, "modulator_kind": str.strip, "selector_hidden": int,
}


def config_keys() -> list[str]:
    keys = list(_TOP_KEYS)
    keys += [f"{stage}.{f}" for stage in STAGES for f in _STAGE_FIELDS]
    return keys


def parse_config(text: str, overrides: Sequence[str] = (), base_dir: Path = Path(".")) -> RunConfig:
    """Flat ``key = value`` file; ``overrides`` are ``key=value`` strings applied last."""
    values: dict[str, tuple[str, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"config line {lineno}: expected key = value, got {line!r}")
        values[key.strip()] = (value.strip(), f"config line {lineno}")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = (value.strip(), f"--set {item}")
    known = set(config_keys())
    unknown = sorted(k for k in values if k not in known)
    if unknown:
        raise UsageError(f"unknown configuration keys: {', '.join(unknown)}")
    if "data_dir" not in values:
        raise UsageError("configuration must set data_dir")

    top, stage_values = {}, {s: dict(_STAGE_DEFAULTS[s]) for s in STAGES}
    for key, (value, where) in values.items():
        try:
            if key in _TOP_KEYS:
                top[key] = _TOP_KEYS[key](value)
            else:
                stage, name = key.split(".", 1)
                kind = {f.name: f.type for f in fields(TrainConfig)}[name]
                stage_values[stage][name] = float(value) if kind == "float" else int(value)
        except ValueError as exc:
            raise UsageError(f"{where}: bad value for {key}: {exc}") from None
    # paths from the file are relative to it; --set paths to the working directory
    for key in ("data_dir", "out_dir"):
        if key in top and not top[key].is_absolute() and values[key][1].startswith("config"):
            top[key] = base_dir / top[key]
    cfg = RunConfig(**top)
    if cfg.modulator_kind not in KINDS or cfg.modulator_kind == IDENTITY:
        raise UsageError(f"modulator_kind must be one of adapter, channel; got {cfg.modulator_kind!r}")
    for key in ("data_dir", "out_dir"):
        if not getattr(cfg, key).is_dir():
            raise UsageError(f"{key} {getattr(cfg, key)} does not exist")
    try:
        cfg.stages = {s: TrainConfig(**v) for s, v in stage_values.items()}
        BackboneSpec(1, cfg.layer_widths, cfg.normalize)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg.selector_hidden < 1:
        raise UsageError("selector_hidden must be positive")
    return cfg


def load_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    return parse_config(path.read_text("utf-8"), overrides, path.parent)


# ---------------------------------------------------------------------------
# training commands

# stage tags keep per-stage random streams independent of each other
_SEED_TAGS = {"base": 1, "modulators": 2, "selector": 3, "independent": 4}


def _stage_cfg(cfg: RunConfig, stage: str, slot: int = 0) -> TrainConfig:
    return replace(cfg.stage(stage), seed=derive_seed(cfg.seed, _SEED_TAGS[stage], slot))


def _log_sink(stream) -> Callable[[str, int, float, float], None]:
    def log(stage, step, loss, metric):
        stream.write(f"{stage}\t{step}\t{loss:.6f}\t{metric:.6f}\n")
        stream.flush()
    return log


def _base_meta(cfg: RunConfig, data: DataDir, sources: Sequence[str], spec: BackboneSpec) -> dict[str, str]:
    return {
        "stage": "base",
        "seed": str(cfg.seed),
        "sources": ",".join(sources),
        "domains": "",
        "modulator_kind": cfg.modulator_kind,
        "data_digest": data.digest,
        "holdout": cfg.holdout,
        **ckpt.spec_meta(spec),
    }


def _output(cfg: RunConfig, given, stage: str) -> Path:
    path = Path(given) if given else cfg.out_dir / f"{stage}.pool"
    if not path.parent.is_dir():
        raise UsageError(f"output directory {path.parent} does not exist")
    return path


def _input(cfg: RunConfig, given, stage: str) -> Path:
    path = Path(given) if given else cfg.out_dir / f"{stage}.pool"
    if not path.is_file():
        raise UsageError(f"input checkpoint {path} does not exist")
    return path


def _require_stage(meta: dict[str, str], needed: str, command: str) -> None:
    have = meta.get("stage", "?")
    if have != needed:
        raise PipelineOrderError(
            f"{command} needs a checkpoint from stage '{needed}', got stage '{have}'")


def _check_consistent(meta: dict[str, str], cfg: RunConfig, data: DataDir, sources: Sequence[str]) -> None:
    if meta.get("data_digest") != data.digest:
        raise UsageError("checkpoint was trained on a different data directory (data digest differs)")
    if ckpt.split_list(meta.get("sources", "")) != list(sources):
        raise UsageError(f"checkpoint sources {meta.get('sources')} differ from configured {','.join(sources)}")
    if meta.get("modulator_kind") != cfg.modulator_kind:
        raise UsageError(f"checkpoint modulator kind {meta.get('modulator_kind')} differs from configured "
                         f"{cfg.modulator_kind}")


def cmd_train_base(args, out=sys.stdout, err=sys.stderr) -> int:
    cfg = load_config(args.config, args.set)
    data = load_data_dir(cfg.data_dir)
    sources = cfg.resolve_sources(data.names)
    datasets, splits = data.select(sources)
    spec = cfg.backbone(datasets[0].feature_dim)
    stage_cfg = _stage_cfg(cfg, "base")
    val = validation_episodes(datasets, splits, stage_cfg, np.random.default_rng(derive_seed(stage_cfg.seed, 0)))
    theta = train_base(aggregate_classes(datasets, splits), spec, stage_cfg, val, _log_sink(err))
    pool = ModelPool(spec, theta, cfg.modulator_kind)
    path = _output(cfg, args.out, "base")
    ckpt.save(path, _base_meta(cfg, data, sources, spec), ckpt.pool_tensors(pool))
    out.write(f"wrote {path} (stage base, sources {','.join(sources)})\n")
    return EXIT_OK


def cmd_train_modulators(args, out=sys.stdout, err=sys.stderr) -> int:
    cfg = load_config(args.config, args.set)
    meta, tensors = ckpt.load(_input(cfg, args.input, "base"))
    _require_stage(meta, "base", "train-modulators")
    data = load_data_dir(cfg.data_dir)
    sources = cfg.resolve_sources(data.names)
    _check_consistent(meta, cfg, data, sources)
    datasets, splits = data.select(sources)
    base, _ = ckpt.pool_from(meta, tensors)
    pool = ModelPool.create(base.spec, base.theta, cfg.modulator_kind, sources)
    for slot, (ds, sp) in enumerate(zip(datasets, splits), start=1):
        train_modulator(ds, sp, pool, slot, _stage_cfg(cfg, "modulators", slot), _log_sink(err))
    path = _output(cfg, args.out, "modulators")
    ckpt.save(path, {**meta, "stage": "modulators", "domains": ",".join(sources)}, ckpt.pool_tensors(pool))
    out.write(f"wrote {path} (stage modulators, {len(sources)} modulators)\n")
    return EXIT_OK


def cmd_train_selector(args, out=sys.stdout, err=sys.stderr) -> int:
    cfg = load_config(args.config, args.set)
    meta, tensors = ckpt.load(_input(cfg, args.input, "modulators"))
    _require_stage(meta, "modulators", "train-selector")
    data = load_data_dir(cfg.data_dir)
    sources = cfg.resolve_sources(data.names)
    _check_consistent(meta, cfg, data, sources)
    datasets, splits = data.select(sources)
    pool, _ = ckpt.pool_from(meta, tensors)
    phi = train_selector(datasets, splits, pool, _stage_cfg(cfg, "selector"), cfg.selector_hidden,
                         _log_sink(err))
    path = _output(cfg, args.out, "selector")
    ckpt.save(path, {**meta, "stage": "selector", "selector_hidden": str(cfg.selector_hidden)},
              ckpt.pool_tensors(pool, phi))
    out.write(f"wrote {path} (stage selector)\n")
    return EXIT_OK


def cmd_train_independent(args, out=sys.stdout, err=sys.stderr) -> int:
    cfg = load_config(args.config, args.set)
    data = load_data_dir(cfg.data_dir)
    sources = cfg.resolve_sources(data.names)
    datasets, splits = data.select(sources)
    spec = cfg.backbone(datasets[0].feature_dim)
    tensors = {}
    for i, (ds, sp) in enumerate(zip(datasets, splits)):
        theta = train_independent(ds, sp, spec, _stage_cfg(cfg, "independent", i), _log_sink(err))
        tensors.update({f"member{i}/{k}": v for k, v in theta.items()})
    meta = {**_base_meta(cfg, data, sources, spec), "stage": ckpt.INDEPENDENT, "domains": ",".join(sources)}
    path = _output(cfg, args.out, ckpt.INDEPENDENT)
    ckpt.save(path, meta, tensors)
    out.write(f"wrote {path} (independent models for {','.join(sources)})\n")
    return EXIT_OK


def independent_from(meta: dict[str, str], tensors: dict[str, np.ndarray]) -> IndependentPool:
    spec = ckpt.spec_from_meta(meta)
    domains = ckpt.split_list(meta.get("domains", ""))
    members = []
    for i in range(len(domains)):
        prefix = f"member{i}/"
        members.append({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    return IndependentPool(spec, members, domains)


# ---------------------------------------------------------------------------
# evaluation commands


@dataclass
class _Loaded:
    pool: ModelPool | None
    phi: dict | None
    ipool: IndependentPool | None
    sources: list[str]
    extra: dict[str, str]


def _load_models(method: str, checkpoint, independent) -> _Loaded:
    extra: dict[str, str] = {}
    pool = phi = ipool = None
    sources: list[str] = []
    if method == "simple_avg":
        if not independent:
            raise UsageError("method simple_avg needs --independent (an independent-models checkpoint)")
        buf = Path(independent).read_bytes()
        meta, tensors = ckpt.decode(buf)
        _require_stage(meta, ckpt.INDEPENDENT, "simple_avg")
        ipool = independent_from(meta, tensors)
        sources = ckpt.split_list(meta.get("sources", ""))
        extra["independent_digest"] = ckpt.digest(buf)
        extra["data_digest"] = meta.get("data_digest", "")
        return _Loaded(None, None, ipool, sources, extra)
    if not checkpoint:
        raise UsageError(f"method {method} needs --checkpoint")
    buf = Path(checkpoint).read_bytes()
    meta, tensors = ckpt.decode(buf)
    stage = meta.get("stage")
    needed = {"dos": "selector", "doa": "modulators"}.get(method, "base")
    order = list(ckpt.STAGES)
    if stage not in order or order.index(stage) < order.index(needed):
        raise PipelineOrderError(
            f"method {method} needs a checkpoint from stage '{needed}' (run train-{needed}), "
            f"got stage '{stage}'")
    pool, phi = ckpt.pool_from(meta, tensors)
    sources = ckpt.split_list(meta.get("sources", ""))
    extra["checkpoint_digest"] = ckpt.digest(buf)
    extra["data_digest"] = meta.get("data_digest", "")
    return _Loaded(pool, phi, None, sources, extra)


def _targets(data: DataDir, loaded: _Loaded, holdout: str | None):
    if holdout:
        if holdout in loaded.sources:
            raise ProtocolViolation(
                f"held-out domain {holdout!r} is among the checkpoint's training sources {loaded.sources}")
        return data.select([holdout])
    return data.select(loaded.sources)


def _eval_settings(args) -> dict:
    return dict(episodes=args.episodes, way=args.way, shot=args.shot, query=args.query, seed=args.seed)


def cmd_eval(args, out=sys.stdout, err=sys.stderr) -> int:
    loaded = _load_models(args.method, args.checkpoint, args.independent)
    data = load_data_dir(args.data)
    datasets, splits = _targets(data, loaded, args.holdout)
    report = evaluate(args.method, datasets, splits, pool=loaded.pool, phi=loaded.phi, ipool=loaded.ipool,
                      further_adapt=args.further_adapt, holdout=args.holdout or None,
                      sources=loaded.sources, ft_iterations=args.ft_iterations, ft_lr=args.ft_lr,
                      **_eval_settings(args))
    extra = {**loaded.extra, "eval_data_digest": data.digest,
             "max_prob_row_error": f"{report.max_row_error:.3e}"}
    if args.out:
        Path(args.out).write_text(format_report(report, extra), "utf-8")
    for name, (m, ci, n) in report.by_domain().items():
        out.write(f"{args.method} {name}: {100 * m:.2f} +- {100 * ci:.2f} ({n} episodes)\n")
    out.write(f"{args.method} overall: {100 * report.mean:.2f} +- {100 * report.ci95:.2f} "
              f"({report.episodes} episodes)\n")
    if args.method == "dos":
        out.write(f"chosen model counts: {report.chosen_frequencies(loaded.pool.size)}\n")
    return EXIT_OK


def cmd_contributions(args, out=sys.stdout, err=sys.stderr) -> int:
    if bool(args.checkpoint) == bool(args.independent):
        raise UsageError("contributions needs exactly one of --checkpoint or --independent")
    method = "doa" if args.checkpoint else "simple_avg"
    loaded = _load_models(method, args.checkpoint, args.independent)
    data = load_data_dir(args.data)
    datasets, splits = _targets(data, loaded, args.holdout)
    episodes, names = [], []
    for s in np.random.SeedSequence(args.seed).spawn(args.episodes):
        rng = np.random.default_rng(s)
        k = int(rng.integers(len(datasets)))
        episodes.append(sample_episode(datasets[k], splits[k].test, args.way, args.shot, args.query, rng))
        names.append(datasets[k].name)
    table = contribution_report(episodes, pool=loaded.pool, ipool=loaded.ipool)
    text = format_contributions(table)
    if args.out:
        Path(args.out).write_text(text, "utf-8")
    else:
        out.write(text)
    top = table.argmax(axis=1)
    out.write(f"top contributor per episode: {' '.join(str(int(t)) for t in top)}\n")
    return EXIT_OK


def cmd_gradcheck(args, out=sys.stdout, err=sys.stderr) -> int:
    start = time.perf_counter()
    results = gradsuite.run(args.seed)
    width = max(len(r.op) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        out.write(f"{r.op:<{width}}  max_rel_err={r.error:.3e}  tol={r.tolerance:.0e}  {status}\n")
    failed = [r.op for r in results if not r.passed]
    out.write(f"{len(results)} checks, {len(failed)} failed, {time.perf_counter() - start:.1f}s\n")
    if failed:
        raise VerificationFailure(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


def cmd_gen_data(args, out=sys.stdout, err=sys.stderr) -> int:
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise UsageError(f"spec file {spec_path} does not exist")
    specs = parse_domain_specs(spec_path.read_text("utf-8"))
    out_dir = Path(args.out)
    if not out_dir.is_dir():
        raise UsageError(f"output directory {out_dir} does not exist")
    entries = []
    for spec in specs:
        seeded = replace(spec, seed=derive_seed(spec.seed, args.seed))
        ds = gen_synthetic_domain(seeded)
        fname = f"{spec.name}.fsds"
        write_dataset(ds, out_dir / fname)
        split = split_classes(ds.class_count, seeded.seed, spec.split)
        sizes = (len(split.train), len(split.val), len(split.test))
        entries.append(DataEntry(spec.name, fname, ckpt.digest((out_dir / fname).read_bytes()), seeded.seed, sizes))
        out.write(f"{fname}: {ds.class_count} classes, split {sizes[0]}/{sizes[1]}/{sizes[2]}\n")
    (out_dir / MANIFEST).write_text(_format_manifest(entries), "utf-8")
    out.write(f"wrote {len(entries)} domains and {MANIFEST} to {out_dir}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modpool", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic domains from a spec file")
    p.add_argument("spec", help="domain spec file ([domain] blocks of key = value lines)")
    p.add_argument("--out", required=True, help="existing output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    def train_parser(name, func, help_, takes_input):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="key = value run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration value (repeatable)")
        if takes_input:
            p.add_argument("--in", dest="input", help="checkpoint from the previous stage")
        p.add_argument("--out", help="output checkpoint (default: <out_dir>/<stage>.pool)")
        p.set_defaults(func=func)

    train_parser("train-base", cmd_train_base, "step 1: pretrain the shared base network", False)
    train_parser("train-modulators", cmd_train_modulators, "step 2: one modulator per source domain", True)
    train_parser("train-selector", cmd_train_selector, "step 3: fit the selection network", True)
    train_parser("train-independent", cmd_train_independent,
                 "train one standalone network per source domain (Simple-Avg baseline)", False)

    def episode_flags(p, episodes, query):
        p.add_argument("--data", required=True, help="data directory written by gen-data")
        p.add_argument("--checkpoint", help="shared-base pool checkpoint")
        p.add_argument("--independent", help="independent-models checkpoint")
        p.add_argument("--episodes", type=int, default=episodes)
        p.add_argument("--way", type=int, default=DEFAULT_WAY)
        p.add_argument("--shot", type=int, default=DEFAULT_SHOT)
        p.add_argument("--query", type=int, default=query)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--holdout", help="unseen-domain protocol: score only this domain")
        p.add_argument("--out", help="output file")

    p = sub.add_parser("eval", help="score an inference method on test episodes")
    p.add_argument("--method", required=True, choices=METHODS)
    episode_flags(p, DEFAULT_EPISODES, DEFAULT_QUERIES)
    p.add_argument("--further-adapt", action="store_true",
                   help="refine a linear head on each episode's support set")
    p.add_argument("--ft-iterations", type=int, default=FT_ITERATIONS)
    p.add_argument("--ft-lr", type=float, default=FT_LR)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("contributions", help="per-model correct counts on averaging-method episodes")
    episode_flags(p, 40, 50)
    p.set_defaults(func=cmd_contributions)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _validate_episode_flags(args) -> None:
    for name in ("episodes", "way", "shot", "query"):
        if hasattr(args, name) and getattr(args, name) < 1:
            raise UsageError(f"--{name} must be positive")


def main(argv: Sequence[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        _validate_episode_flags(args)
        return args.func(args, out=out, err=err)
    except VerificationFailure as exc:
        err.write(f"error: {exc}\n")
        return EXIT_VERIFY
    except DivergenceError as exc:
        err.write(f"error: training diverged: {exc}\n")
        return EXIT_VERIFY
    except FormatError as exc:
        err.write(f"error: {exc}\n")
        return EXIT_FORMAT
    except (UsageError, ProtocolViolation, ConfigurationError, CapacityError, TooFewClassesError,
            IncompatibleDomainsError, DimensionError) as exc:
        err.write(f"error: {exc}\n")
        return EXIT_USAGE
    except OSError as exc:
        err.write(f"error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
