"""Experiment configuration: a YAML document with one section per concern.

Parsing validates every field and reports problems with the offending key
path and, when known, the source line. ``to_dict`` emits the canonical form;
``parse_config(to_dict(cfg))`` reproduces ``cfg`` exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from ..composer import GuidanceConfig
from ..errors import ConfigError, ScoreCompError

KINDS = ("compose-run", "similarity-probe", "ablation-sweep", "dynamic-select")
ABLATIONS = ("full", "no_tokenization", "constant_tau", "no_recentering")


@dataclass(frozen=True)
class Region:
    rows: tuple[int, int]
    cols: tuple[int, int]
    channels: tuple[int, int] | None = None
    value: float = 1.0


@dataclass(frozen=True)
class LatentSpec:
    height: int = 8
    width: int = 8
    channels: int = 4


@dataclass(frozen=True)
class ConditionSpec:
    name: str
    variance: float = 1.0
    weight: float = 1.0
    fill: float = 0.0
    regions: tuple[Region, ...] = ()
    embedding: tuple[float, ...] | None = None


@dataclass(frozen=True)
class AdapterSpec:
    name: str
    trained_conditions: tuple[str, ...]
    region: Region
    site: str = "mean"
    shift: float = 1.0
    strength: float = 0.8
    rank: int = 1
    ood_decay: float = 0.0
    uncond_gate: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class ModelsSpec:
    conditions: tuple[ConditionSpec, ...]
    adapters: tuple[AdapterSpec, ...] = ()
    embedding_overlap: float = 0.0


@dataclass(frozen=True)
class SamplerSpec:
    steps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    mode: str = "deterministic"
    trajectories: int = 1000
    seeds: tuple[int, ...] = (0,)
    record_weights: bool = True


@dataclass(frozen=True)
class SweepSpec:
    patch_sizes: tuple[int, ...] = (2, 4, 8, 16)
    ablations: tuple[str, ...] = ABLATIONS
    recenter_lambdas: tuple[float, ...] = ()
    top_ks: tuple[int, ...] = ()


@dataclass(frozen=True)
class OutputSpec:
    map_stride: int = 10
    map_trajectory: int = 0
    save_latents: int = 16
    trace_trajectories: int = 64
    figures: bool = True


@dataclass(frozen=True)
class ExperimentSpec:
    condition: str | None = None
    relevant: tuple[str, ...] = ()
    probe_step: int | None = None
    probe_samples: int = 100
    probe_conditions: tuple[str, ...] = ()
    sweep: SweepSpec = SweepSpec()
    outputs: OutputSpec = OutputSpec()


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    latent: LatentSpec
    models: ModelsSpec
    guidance: GuidanceConfig = GuidanceConfig()
    sampler: SamplerSpec = SamplerSpec()
    experiment: ExperimentSpec = ExperimentSpec()
    seed: int = 0
    output_dir: str | None = None

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# -- parsing -----------------------------------------------------------------


class _Lines:
    """Source line lookup for key paths of a YAML document."""

    def __init__(self, text: str | None):
        self.lines: dict[tuple, int] = {}
        if text:
            try:
                node = yaml.compose(text, Loader=yaml.SafeLoader)
            except yaml.YAMLError:
                node = None
            if node is not None:
                self._walk(node, ())

    def _walk(self, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                self._walk(v, path + (k.value,))
                self.lines[path + (k.value,)] = k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, path + (i,))

    def get(self, path) -> int | None:
        path = tuple(path)
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path[:-1]
        return self.lines.get(())


class _Reader:
    def __init__(self, source: str | None, lines: _Lines):
        self.source = source
        self.lines = lines

    def fail(self, path, message):
        dotted = ".".join(str(p) for p in path) or "<root>"
        raise ConfigError(f"{dotted}: {message}", self.source, self.lines.get(path))

    def section(self, data, path, allowed) -> dict:
        if data is None:
            return {}
        if not isinstance(data, dict):
            self.fail(path, "expected a mapping")
        for k in data:
            if k not in allowed:
                self.fail(path + (k,), f"unknown key (allowed: {', '.join(sorted(allowed))})")
        return data

    def num(self, data, key, path, default, *, kind=float, lo=None, hi=None, lo_open=False,
            optional=False):
        value = data.get(key, default)
        if value is None:
            if optional:
                return None
            self.fail(path + (key,), "is required")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path + (key,), f"expected a number, got {value!r}")
        if kind is int:
            # ints stay exact; floats only when integral (1e3 -> 1000)
            if isinstance(value, float) and not value.is_integer():
                self.fail(path + (key,), f"expected an integer, got {value!r}")
            value = int(value)
        else:
            value = float(value)
        if lo is not None and (value < lo or (lo_open and value == lo)):
            self.fail(path + (key,), f"must be {'>' if lo_open else '>='} {lo}, got {value}")
        if hi is not None and value > hi:
            self.fail(path + (key,), f"must be <= {hi}, got {value}")
        return value

    def text(self, data, key, path, default=None, choices=None, optional=False):
        value = data.get(key, default)
        if value is None:
            if optional:
                return None
            self.fail(path + (key,), "is required")
        if not isinstance(value, str):
            self.fail(path + (key,), f"expected a string, got {value!r}")
        if choices and value not in choices:
            self.fail(path + (key,), f"must be one of {', '.join(choices)}; got {value!r}")
        return value

    def flag(self, data, key, path, default):
        value = data.get(key, default)
        if not isinstance(value, bool):
            self.fail(path + (key,), f"expected true/false, got {value!r}")
        return value

    def seq(self, data, key, path, default=()):
        value = data.get(key, default)
        if value is None:
            return ()
        if not isinstance(value, (list, tuple)):
            self.fail(path + (key,), "expected a list")
        return tuple(value)

    def span(self, value, path):
        if (not isinstance(value, (list, tuple)) or len(value) != 2
                or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
            self.fail(path, f"expected [start, stop] integers, got {value!r}")
        if not 0 <= value[0] < value[1]:
            self.fail(path, f"need 0 <= start < stop, got {list(value)}")
        return (int(value[0]), int(value[1]))


def _region(r: _Reader, data, path) -> Region:
    data = r.section(data, path, {"rows", "cols", "channels", "value"})
    for key in ("rows", "cols"):
        if key not in data:
            r.fail(path + (key,), "is required")
    channels = data.get("channels")
    return Region(
        rows=r.span(data["rows"], path + ("rows",)),
        cols=r.span(data["cols"], path + ("cols",)),
        channels=None if channels is None else r.span(channels, path + ("channels",)),
        value=r.num(data, "value", path, 1.0),
    )


def _check_region(r: _Reader, region: Region, latent: LatentSpec, path):
    if region.rows[1] > latent.height or region.cols[1] > latent.width:
        r.fail(path, f"region exceeds the {latent.height}x{latent.width} latent")
    if region.channels is not None and region.channels[1] > latent.channels:
        r.fail(path, f"region channels exceed {latent.channels}")


def _guidance(r: _Reader, data, path) -> GuidanceConfig:
    names = {f.name for f in dataclasses.fields(GuidanceConfig)}
    data = r.section(data, path, names)
    d = GuidanceConfig()
    weights = data.get("naive_weights", None)
    if weights is not None:
        weights = tuple(r.num({"w": w}, "w", path + ("naive_weights", i), None)
                        for i, w in enumerate(r.seq(data, "naive_weights", path)))
    kwargs = dict(
        guidance_scale=r.num(data, "guidance_scale", path, d.guidance_scale, lo=1.0),
        recenter_lambda=r.num(data, "recenter_lambda", path, d.recenter_lambda, lo=0.0, hi=1.0),
        patch_size=r.num(data, "patch_size", path, d.patch_size, kind=int, lo=1),
        tau_rule=r.text(data, "tau_rule", path, d.tau_rule, ("adaptive", "constant")),
        tau_constant=r.num(data, "tau_constant", path, d.tau_constant, lo=0.0, lo_open=True),
        temperature_floor=r.num(data, "temperature_floor", path, d.temperature_floor,
                                lo=0.0, lo_open=True),
        top_k=r.num(data, "top_k", path, None, kind=int, lo=1, optional=True),
        topk_scope=r.text(data, "topk_scope", path, d.topk_scope, ("patch", "image")),
        global_mode=r.flag(data, "global_mode", path, d.global_mode),
        naive_weights=weights,
    )
    try:
        return GuidanceConfig(**kwargs)
    except ScoreCompError as exc:
        r.fail(path, str(exc))


def config_from_dict(data: Any, source: str | None = None, text: str | None = None) -> ExperimentConfig:
    r = _Reader(source, _Lines(text))
    top = r.section(data, (), {"kind", "seed", "output_dir", "latent", "models", "guidance",
                                 "sampler", "experiment"})
    kind = r.text(top, "kind", (), choices=KINDS)
    seed = r.num(top, "seed", (), 0, kind=int, lo=0, hi=2**64 - 1)
    output_dir = top.get("output_dir")
    if output_dir is not None and not isinstance(output_dir, str):
        r.fail(("output_dir",), "expected a string")

    lat = r.section(top.get("latent"), ("latent",), {"height", "width", "channels"})
    latent = LatentSpec(
        height=r.num(lat, "height", ("latent",), 8, kind=int, lo=1),
        width=r.num(lat, "width", ("latent",), 8, kind=int, lo=1),
        channels=r.num(lat, "channels", ("latent",), 4, kind=int, lo=1),
    )

    mpath = ("models",)
    m = r.section(top.get("models"), mpath, {"conditions", "adapters", "embedding_overlap"})
    raw_conditions = r.seq(m, "conditions", mpath)
    if not raw_conditions:
        r.fail(mpath + ("conditions",), "at least one condition is required")
    conditions = []
    for i, c in enumerate(raw_conditions):
        p = mpath + ("conditions", i)
        c = r.section(c, p, {"name", "variance", "weight", "fill", "regions", "embedding"})
        regions = tuple(_region(r, reg, p + ("regions", j))
                        for j, reg in enumerate(r.seq(c, "regions", p)))
        for j, reg in enumerate(regions):
            _check_region(r, reg, latent, p + ("regions", j))
        emb = c.get("embedding")
        if emb is not None:
            emb = tuple(r.num({"e": e}, "e", p + ("embedding", k), None)
                        for k, e in enumerate(r.seq(c, "embedding", p)))
        conditions.append(ConditionSpec(
            name=str(r.text(c, "name", p)),
            variance=r.num(c, "variance", p, 1.0, lo=0.0, lo_open=True),
            weight=r.num(c, "weight", p, 1.0, lo=0.0),
            fill=r.num(c, "fill", p, 0.0),
            regions=regions,
            embedding=emb,
        ))
    names = [c.name for c in conditions]
    if len(set(names)) != len(names):
        r.fail(mpath + ("conditions",), "condition names must be unique")
    embs = [c.embedding for c in conditions]
    if any(e is not None for e in embs) and (
            any(e is None for e in embs) or len({len(e) for e in embs}) != 1):
        r.fail(mpath + ("conditions",), "embeddings must be given for all conditions with one length")

    adapters = []
    for i, a in enumerate(r.seq(m, "adapters", mpath)):
        p = mpath + ("adapters", i)
        a = r.section(a, p, {f.name for f in dataclasses.fields(AdapterSpec)})
        trained = tuple(str(x) for x in r.seq(a, "trained_conditions", p))
        for j, c in enumerate(trained):
            if c not in names:
                r.fail(p + ("trained_conditions", j), f"unknown condition {c!r}")
        if "region" not in a:
            r.fail(p + ("region",), "is required")
        region = _region(r, a["region"], p + ("region",))
        _check_region(r, region, latent, p + ("region",))
        site = r.text(a, "site", p, "mean", ("mean", "latent"))
        rank = r.num(a, "rank", p, 1, kind=int, lo=1)
        if site == "mean" and rank != 1:
            r.fail(p + ("rank",), "mean-site adapters are rank 1")
        if site == "mean" and not trained:
            r.fail(p + ("trained_conditions",), "mean-site adapters need a trained condition")
        adapters.append(AdapterSpec(
            name=r.text(a, "name", p),
            trained_conditions=trained,
            region=region,
            site=site,
            shift=r.num(a, "shift", p, 1.0),
            strength=r.num(a, "strength", p, 0.8, lo=0.0, hi=1.0),
            rank=rank,
            ood_decay=r.num(a, "ood_decay", p, 0.0, lo=0.0, hi=1.0),
            uncond_gate=r.num(a, "uncond_gate", p, 1.0, lo=0.0, hi=1.0),
            seed=r.num(a, "seed", p, 0, kind=int, lo=0),
        ))
    anames = [a.name for a in adapters]
    if len(set(anames)) != len(anames):
        r.fail(mpath + ("adapters",), "adapter names must be unique")
    models = ModelsSpec(tuple(conditions), tuple(adapters),
                        r.num(m, "embedding_overlap", mpath, 0.0, lo=0.0))

    guidance = _guidance(r, top.get("guidance"), ("guidance",))
    if guidance.top_k is not None and guidance.top_k > max(len(adapters), 1):
        r.fail(("guidance", "top_k"), f"top_k={guidance.top_k} exceeds {len(adapters)} adapters")
    if not guidance.global_mode:
        d = guidance.patch_size
        if latent.height % d or latent.width % d:
            r.fail(("guidance", "patch_size"),
                   f"{d} does not divide the {latent.height}x{latent.width} latent")

    sp = ("sampler",)
    s = r.section(top.get("sampler"), sp, {f.name for f in dataclasses.fields(SamplerSpec)})
    seeds = tuple(r.num({"s": x}, "s", sp + ("seeds", i), None, kind=int, lo=0, hi=2**64 - 1)
                  for i, x in enumerate(r.seq(s, "seeds", sp, (0,))))
    if not seeds:
        r.fail(sp + ("seeds",), "at least one seed is required")
    sampler = SamplerSpec(
        steps=r.num(s, "steps", sp, 100, kind=int, lo=1),
        beta_start=r.num(s, "beta_start", sp, 1e-3, lo=0.0, lo_open=True),
        beta_end=r.num(s, "beta_end", sp, 0.2, lo=0.0, lo_open=True),
        mode=r.text(s, "mode", sp, "deterministic", ("deterministic", "ancestral")),
        trajectories=r.num(s, "trajectories", sp, 1000, kind=int, lo=2),
        seeds=seeds,
        record_weights=r.flag(s, "record_weights", sp, True),
    )
    if not sampler.beta_start <= sampler.beta_end < 1.0:
        r.fail(sp + ("beta_end",), "need beta_start <= beta_end < 1")

    ep = ("experiment",)
    e = r.section(top.get("experiment"), ep, {f.name for f in dataclasses.fields(ExperimentSpec)})
    cond = r.text(e, "condition", ep, optional=True)
    if cond is not None and cond not in names:
        r.fail(ep + ("condition",), f"unknown condition {cond!r}")
    if kind in ("compose-run", "ablation-sweep", "dynamic-select") and cond is None:
        r.fail(ep + ("condition",), f"required for {kind}")
    relevant = tuple(str(x) for x in r.seq(e, "relevant", ep))
    for j, a in enumerate(relevant):
        if a not in anames:
            r.fail(ep + ("relevant", j), f"unknown adapter {a!r}")
    probe_conditions = tuple(str(x) for x in r.seq(e, "probe_conditions", ep))
    for j, c in enumerate(probe_conditions):
        if c not in names:
            r.fail(ep + ("probe_conditions", j), f"unknown condition {c!r}")
    swp = ep + ("sweep",)
    sw = r.section(e.get("sweep"), swp, {f.name for f in dataclasses.fields(SweepSpec)})
    sweep = SweepSpec(
        patch_sizes=tuple(r.num({"d": x}, "d", swp + ("patch_sizes", i), None, kind=int, lo=1)
                          for i, x in enumerate(r.seq(sw, "patch_sizes", swp, (2, 4, 8, 16)))),
        ablations=tuple(r.text({"a": x}, "a", swp + ("ablations", i), choices=ABLATIONS)
                        for i, x in enumerate(r.seq(sw, "ablations", swp, ABLATIONS))),
        recenter_lambdas=tuple(
            r.num({"l": x}, "l", swp + ("recenter_lambdas", i), None, lo=0.0, hi=1.0)
            for i, x in enumerate(r.seq(sw, "recenter_lambdas", swp))),
        top_ks=tuple(r.num({"k": x}, "k", swp + ("top_ks", i), None, kind=int, lo=1,
                           hi=max(len(adapters), 1))
                     for i, x in enumerate(r.seq(sw, "top_ks", swp))),
    )
    for i, dsz in enumerate(sweep.patch_sizes if kind == "ablation-sweep" else ()):
        if latent.height % dsz or latent.width % dsz:
            r.fail(swp + ("patch_sizes", i), f"{dsz} does not divide the latent")
    op = ep + ("outputs",)
    o = r.section(e.get("outputs"), op, {f.name for f in dataclasses.fields(OutputSpec)})
    outputs = OutputSpec(
        map_stride=r.num(o, "map_stride", op, 10, kind=int, lo=0),
        map_trajectory=r.num(o, "map_trajectory", op, 0, kind=int, lo=0),
        save_latents=r.num(o, "save_latents", op, 16, kind=int, lo=0),
        trace_trajectories=r.num(o, "trace_trajectories", op, 64, kind=int, lo=1),
        figures=r.flag(o, "figures", op, True),
    )
    probe_step = r.num(e, "probe_step", ep, None, kind=int, lo=1, hi=sampler.steps, optional=True)
    experiment = ExperimentSpec(
        condition=cond,
        relevant=relevant,
        probe_step=probe_step,
        probe_samples=r.num(e, "probe_samples", ep, 100, kind=int, lo=1),
        probe_conditions=probe_conditions,
        sweep=sweep,
        outputs=outputs,
    )
    if kind == "dynamic-select" and not relevant:
        r.fail(ep + ("relevant",), "dynamic-select needs the relevant adapter subset")
    if kind != "similarity-probe" and not adapters:
        r.fail(mpath + ("adapters",), f"{kind} needs at least one adapter")
    return ExperimentConfig(kind, latent, models, guidance, sampler, experiment, seed, output_dir)


def parse_config(text: str, source: str | None = None) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", source, line) from None
    return config_from_dict(data, source, text)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


# -- serialisation -------------------------------------------------------------


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def to_dict(cfg: ExperimentConfig) -> dict:
    out = _plain(cfg)
    order = ["kind", "seed", "output_dir", "latent", "models", "guidance", "sampler", "experiment"]
    return {k: out[k] for k in order}


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)
