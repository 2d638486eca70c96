"""JSON experiment configuration, setting presets and validation."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

from .continual import ALGORITHMS, RunConfig
from .data import TaskSequence, UnitTask
from .embed import EmbedConfig, ProbeConfig


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


# Per-setting architecture and per-algorithm schedules. VCL runs full batch.
PRESETS = {
    "mnist-256x2": {"hidden": (256, 256), "si_epochs": 10, "vcl_epochs": 120, "coreset_size": 40},
    "mnist-50": {"hidden": (50,), "si_epochs": 10, "vcl_epochs": 50, "coreset_size": 40},
    "mnist-20": {"hidden": (20,), "si_epochs": 5, "vcl_epochs": 20, "coreset_size": 20},
}
SETTINGS = tuple(PRESETS) + ("custom",)
PLAN_KINDS = ("random", "permutations", "explicit", "greedy")
AGGREGATIONS = ("seed_mean", "per_seed")
INPUT_WIDTH = 784

_ALGO_KEYS = {"epochs", "batch_size", "learning_rate", "c", "xi", "clamp", "mc_train", "mc_eval",
              "coreset_size", "init_log_std", "prior_std", "reparam"}
_TOP_KEYS = {"data", "setting", "hidden", "algorithms", "plans", "seeds", "hyperparameters", "probe",
             "embed", "out_dir", "jobs", "aggregate", "divergence_threshold"}
_DATA_KEYS = {"mnist_dir", "cap_per_label", "test_cap_per_label", "seed"}
_PROBE_KEYS = {"hidden", "epochs", "batch_size", "learning_rate", "cap_per_label", "seed"}
_EMBED_KEYS = {"l2", "max_newton_steps", "tol", "trivial_size"}
_PLAN_KEYS = {
    "random": {"kind", "name", "n", "k", "seed", "algorithms"},
    "permutations": {"kind", "name", "base", "n", "seed", "algorithms"},
    "explicit": {"kind", "name", "sequences", "algorithms"},
    "greedy": {"kind", "name", "start", "k", "directions", "algorithms"},
}


@dataclass(frozen=True)
class PlanSpec:
    kind: str
    name: str
    algorithms: tuple[str, ...]
    n: int = 0
    k: int = 5
    seed: int = 0
    base: tuple[UnitTask, ...] = ()
    sequences: tuple[TaskSequence, ...] = ()
    start: UnitTask | None = None
    directions: tuple[str, ...] = ("highest", "lowest")


@dataclass(frozen=True)
class ExperimentConfig:
    mnist_dir: str
    setting: str
    layer_sizes: tuple[int, ...]
    algorithms: tuple[str, ...]
    plans: tuple[PlanSpec, ...]
    seeds: tuple[int, ...]
    run_configs: dict = field(default_factory=dict)
    probe: ProbeConfig = ProbeConfig()
    probe_seed: int = 0
    embed: EmbedConfig = EmbedConfig()
    cap_per_label: int | None = 2000
    test_cap_per_label: int | None = None
    data_seed: int = 0
    out_dir: str = "out"
    jobs: int = 1
    aggregate: str = "seed_mean"
    divergence_threshold: float = 0.1

    def run_config(self, algorithm: str) -> RunConfig:
        return self.run_configs[algorithm]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        data = {f: getattr(self, f) for f in self.__dataclass_fields__}
        data.update(kw)
        return ExperimentConfig(**data)

    def to_json(self) -> dict:
        """A canonical, JSON-serializable view (used for manifests and cache keys)."""
        return {
            "mnist_dir": self.mnist_dir, "setting": self.setting, "layer_sizes": list(self.layer_sizes),
            "algorithms": list(self.algorithms),
            "plans": [_plan_json(p) for p in self.plans],
            "seeds": list(self.seeds),
            "run_configs": {a: asdict(c) for a, c in sorted(self.run_configs.items())},
            "probe": asdict(self.probe), "probe_seed": self.probe_seed, "embed": asdict(self.embed),
            "cap_per_label": self.cap_per_label, "test_cap_per_label": self.test_cap_per_label,
            "data_seed": self.data_seed, "aggregate": self.aggregate,
            "divergence_threshold": self.divergence_threshold,
        }


def _plan_json(p: PlanSpec) -> dict:
    out = {"kind": p.kind, "name": p.name, "algorithms": list(p.algorithms)}
    if p.kind == "random":
        out.update(n=p.n, k=p.k, seed=p.seed)
    elif p.kind == "permutations":
        out.update(n=p.n, seed=p.seed, base=[t.name for t in p.base])
    elif p.kind == "explicit":
        out.update(sequences=[str(s) for s in p.sequences])
    else:
        out.update(start=p.start.name, k=p.k, directions=list(p.directions))
    return out


def _reject_unknown(section: dict, allowed: set, where: str):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing required key '{key}' in {where}")
    return section[key]


def _int(value, name: str, minimum: int | None = None, allow_none: bool = False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"'{name}' must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"'{name}' must be >= {minimum}, got {value}")
    return value


def _float(value, name: str, positive: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"'{name}' must be a number, got {value!r}")
    if positive and not value > 0:
        raise ConfigError(f"'{name}' must be positive, got {value}")
    return float(value)


def _task(text, name: str) -> UnitTask:
    try:
        return UnitTask.parse(text)
    except (ValueError, AttributeError) as exc:
        raise ConfigError(f"'{name}': {exc}") from None


def _algorithms(value, name: str) -> tuple[str, ...]:
    if not isinstance(value, list) or not value:
        raise ConfigError(f"'{name}' must be a non-empty list")
    for a in value:
        if a not in ALGORITHMS:
            raise ConfigError(f"'{name}': unknown algorithm {a!r} (choose from {', '.join(ALGORITHMS)})")
    if len(set(value)) != len(value):
        raise ConfigError(f"'{name}' lists an algorithm twice")
    return tuple(value)


def _run_configs(setting_defaults: dict, layer_sizes, algorithms, overrides: dict) -> dict:
    _reject_unknown(overrides, set(ALGORITHMS), "hyperparameters")
    out = {}
    for algo in ALGORITHMS:
        ov = overrides.get(algo, {})
        if not isinstance(ov, dict):
            raise ConfigError(f"hyperparameters.{algo} must be an object")
        _reject_unknown(ov, _ALGO_KEYS, f"hyperparameters.{algo}")
        vcl_like = algo in ("vcl", "coreset_vcl")
        kw = {
            "layer_sizes": tuple(layer_sizes),
            "epochs": setting_defaults["vcl_epochs"] if vcl_like else setting_defaults["si_epochs"],
            "batch_size": None if vcl_like else 64,
            "coreset_size": setting_defaults["coreset_size"] if algo == "coreset_vcl" else 0,
        }
        if algo == "finetune":
            kw["si_c"] = 0.0
        rename = {"c": "si_c", "xi": "si_xi", "clamp": "si_clamp"}
        for key, value in ov.items():
            if key in ("epochs", "mc_train", "mc_eval", "coreset_size"):
                value = _int(value, f"hyperparameters.{algo}.{key}", minimum=0 if key != "mc_train" else 1)
            elif key == "batch_size":
                value = _int(value, f"hyperparameters.{algo}.batch_size", minimum=1, allow_none=True)
            elif key in ("learning_rate", "xi", "prior_std"):
                value = _float(value, f"hyperparameters.{algo}.{key}", positive=True)
            elif key in ("c", "init_log_std"):
                value = _float(value, f"hyperparameters.{algo}.{key}")
            kw[rename.get(key, key)] = value
        if algo == "coreset_vcl" and kw["coreset_size"] == 0 and algo in algorithms:
            raise ConfigError("coreset_vcl needs a positive coreset_size")
        try:
            out[algo] = RunConfig(**kw)
        except ValueError as exc:
            raise ConfigError(f"hyperparameters.{algo}: {exc}") from None
    return out


def _plan(raw: dict, index: int, default_algorithms) -> PlanSpec:
    where = f"plans[{index}]"
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    kind = _require(raw, "kind", where)
    if kind not in PLAN_KINDS:
        raise ConfigError(f"{where}.kind must be one of {', '.join(PLAN_KINDS)}")
    _reject_unknown(raw, _PLAN_KEYS[kind], where)
    name = raw.get("name", kind)
    algorithms = _algorithms(raw["algorithms"], f"{where}.algorithms") if "algorithms" in raw else default_algorithms
    if kind == "random":
        n = _int(_require(raw, "n", where), f"{where}.n", 1)
        k = _int(raw.get("k", 5), f"{where}.k", 1)
        if k > 45:
            raise ConfigError(f"{where}.k cannot exceed the 45 unit tasks")
        return PlanSpec(kind, name, algorithms, n=n, k=k, seed=_int(raw.get("seed", 0), f"{where}.seed", 0))
    if kind == "permutations":
        base = tuple(_task(t, f"{where}.base") for t in _require(raw, "base", where))
        if len(set(base)) != len(base) or not base:
            raise ConfigError(f"{where}.base must list distinct tasks")
        n = _int(_require(raw, "n", where), f"{where}.n", 1)
        total = 1
        for i in range(2, len(base) + 1):
            total *= i
        if n > total:
            raise ConfigError(f"{where}.n = {n} exceeds the {total} orderings of the base set")
        return PlanSpec(kind, name, algorithms, n=n, k=len(base), seed=_int(raw.get("seed", 0), f"{where}.seed", 0),
                        base=base)
    if kind == "explicit":
        seqs = _require(raw, "sequences", where)
        if not isinstance(seqs, list) or not seqs:
            raise ConfigError(f"{where}.sequences must be a non-empty list")
        try:
            parsed = tuple(TaskSequence.parse("|".join(s) if isinstance(s, list) else s) for s in seqs)
        except (ValueError, AttributeError, TypeError) as exc:
            raise ConfigError(f"{where}.sequences: {exc}") from None
        return PlanSpec(kind, name, algorithms, sequences=parsed)
    start = _task(raw.get("start", "0/1"), f"{where}.start")
    directions = tuple(raw.get("directions", ["highest", "lowest"]))
    if not directions or any(d not in ("highest", "lowest") for d in directions):
        raise ConfigError(f"{where}.directions must be drawn from 'highest' and 'lowest'")
    k = _int(raw.get("k", 5), f"{where}.k", 1)
    return PlanSpec(kind, name, algorithms, k=k, start=start, directions=directions)


def parse_config(raw: dict, base_dir: str = ".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("the configuration must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "the configuration")
    data = _require(raw, "data", "the configuration")
    if not isinstance(data, dict):
        raise ConfigError("'data' must be an object")
    _reject_unknown(data, _DATA_KEYS, "data")
    mnist_dir = _require(data, "mnist_dir", "data")
    if not isinstance(mnist_dir, str) or not mnist_dir:
        raise ConfigError("'data.mnist_dir' must be a non-empty path")
    mnist_dir = os.path.expandvars(os.path.expanduser(mnist_dir))
    if "$" in mnist_dir:
        raise ConfigError(f"'data.mnist_dir' references an unset environment variable: {mnist_dir}")
    if not os.path.isabs(mnist_dir):
        mnist_dir = os.path.normpath(os.path.join(base_dir, mnist_dir))

    setting = raw.get("setting", "mnist-20")
    if setting not in SETTINGS:
        raise ConfigError(f"'setting' must be one of {', '.join(SETTINGS)}, got {setting!r}")
    if setting == "custom":
        hidden = _require(raw, "hidden", "the configuration (setting 'custom')")
        if not isinstance(hidden, list) or not hidden:
            raise ConfigError("'hidden' must be a non-empty list of widths")
        hidden = tuple(_int(h, "hidden", 1) for h in hidden)
        defaults = {"hidden": hidden, "si_epochs": 5, "vcl_epochs": 20, "coreset_size": 20}
    else:
        if "hidden" in raw:
            raise ConfigError(f"'hidden' is only allowed with setting 'custom' ({setting} fixes the architecture)")
        defaults = PRESETS[setting]
    layer_sizes = (INPUT_WIDTH, *defaults["hidden"])

    algorithms = _algorithms(raw.get("algorithms", ["si", "vcl", "coreset_vcl"]), "algorithms")
    plans_raw = raw.get("plans", [{"kind": "random", "n": 120, "k": 5}])
    if not isinstance(plans_raw, list) or not plans_raw:
        raise ConfigError("'plans' must be a non-empty list")
    plans = tuple(_plan(p, i, algorithms) for i, p in enumerate(plans_raw))
    names = [p.name for p in plans]
    if len(set(names)) != len(names):
        raise ConfigError("plan names must be unique")
    for p in plans:
        extra = set(p.algorithms) - set(algorithms)
        if extra:
            raise ConfigError(f"plan '{p.name}' uses algorithms not listed at the top level: {sorted(extra)}")

    seeds = raw.get("seeds", list(range(10)))
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("'seeds' must be a non-empty list")
    seeds = tuple(_int(s, "seeds", 0) for s in seeds)
    if len(set(seeds)) != len(seeds):
        raise ConfigError("'seeds' must be distinct")

    hyper = raw.get("hyperparameters", {})
    if not isinstance(hyper, dict):
        raise ConfigError("'hyperparameters' must be an object")
    run_configs = _run_configs(defaults, layer_sizes, algorithms, hyper)

    probe_raw = raw.get("probe", {})
    _reject_unknown(probe_raw, _PROBE_KEYS, "probe")
    probe_kw = {k: v for k, v in probe_raw.items() if k != "seed"}
    if "hidden" in probe_kw:
        probe_kw["hidden"] = tuple(_int(h, "probe.hidden", 1) for h in probe_kw["hidden"])
    for key in ("epochs", "batch_size"):
        if key in probe_kw:
            probe_kw[key] = _int(probe_kw[key], f"probe.{key}", 1)
    if "cap_per_label" in probe_kw:
        probe_kw["cap_per_label"] = _int(probe_kw["cap_per_label"], "probe.cap_per_label", 1, allow_none=True)
    if "learning_rate" in probe_kw:
        probe_kw["learning_rate"] = _float(probe_kw["learning_rate"], "probe.learning_rate", positive=True)

    embed_raw = raw.get("embed", {})
    _reject_unknown(embed_raw, _EMBED_KEYS, "embed")
    embed_kw = dict(embed_raw)
    if "l2" in embed_kw:
        embed_kw["l2"] = _float(embed_kw["l2"], "embed.l2", positive=True)
    if "trivial_size" in embed_kw:
        embed_kw["trivial_size"] = _int(embed_kw["trivial_size"], "embed.trivial_size", 1)

    aggregate = raw.get("aggregate", "seed_mean")
    if aggregate not in AGGREGATIONS:
        raise ConfigError(f"'aggregate' must be one of {', '.join(AGGREGATIONS)}")
    threshold = _float(raw.get("divergence_threshold", 0.1), "divergence_threshold")
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError("'divergence_threshold' must lie in [0, 1]")
    out_dir = raw.get("out_dir", "out")
    if not os.path.isabs(out_dir):
        out_dir = os.path.normpath(os.path.join(base_dir, out_dir))

    return ExperimentConfig(
        mnist_dir=mnist_dir, setting=setting, layer_sizes=layer_sizes, algorithms=algorithms, plans=plans,
        seeds=seeds, run_configs=run_configs, probe=ProbeConfig(**probe_kw),
        probe_seed=_int(probe_raw.get("seed", 0), "probe.seed", 0), embed=EmbedConfig(**embed_kw),
        cap_per_label=_int(data.get("cap_per_label", 2000), "data.cap_per_label", 1, allow_none=True),
        test_cap_per_label=_int(data.get("test_cap_per_label"), "data.test_cap_per_label", 1, allow_none=True),
        data_seed=_int(data.get("seed", 0), "data.seed", 0), out_dir=out_dir,
        jobs=_int(raw.get("jobs", 1), "jobs", 1), aggregate=aggregate, divergence_threshold=threshold,
    )


def load_config(path) -> ExperimentConfig:
    """Read and validate a JSON config; relative paths resolve against the file's directory."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw, os.path.dirname(os.path.abspath(path)))
