"""TOML run configuration: parsing with strict keys, defaults, and builders."""

import copy
import dataclasses
import hashlib
import json
import sys

import numpy as np
import tomli_w

from . import benchmarks
from .certificate import CertificateConstants
from .cegis import TrainingConfig
from .errors import ConfigurationError
from .synthesis import LossWeights
from .verification import GridSpec, VerifyConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

AUTO = "auto"

ENV_PARAMS = {
    "linear": benchmarks.LinearParams,
    "platoon": benchmarks.PlatoonParams,
    "drone": benchmarks.DroneParams,
    "microgrid": benchmarks.MicrogridParams,
}
ENV_EXTRAS = {"microgrid": {"adjacency": None}}

# rho and c default to the fixed hyperparameters of the benchmark runs;
# "auto" selects the closed forms.
TABLES = {
    "constants": dict(
        {f.name: f.default for f in dataclasses.fields(CertificateConstants)},
        R=0.15, c=1.01, rho_override=0.95,
    ),
    "weights": {f.name: f.default for f in dataclasses.fields(LossWeights)},
    "training": {f.name: f.default for f in dataclasses.fields(TrainingConfig)},
    "reach": {"samples": 4096, "eta": 0.05, "T_R_override": AUTO},
    "grids": dict(
        {f.name: f.default for f in dataclasses.fields(GridSpec)},
        delta_classk=AUTO, origin_radius=0.05, lipschitz="norm-product",
    ),
    "networks": {"v_hidden": [64, 64, 64], "pi_hidden": [64, 64, 64], "controller": "neural", "share": True},
    "scalability": {"reduction": True, "rounds": 1},
    "evaluation": {"horizon": 500},
    "delays": {"edges": []},
}
TOP_LEVEL = {"env": None, "seed": 0}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration; ``data`` is plain TOML-serializable data."""

    data: dict

    @property
    def env(self):
        return self.data["env"]

    @property
    def seed(self):
        return self.data["seed"]

    def table(self, name):
        return self.data[name]

    def with_seed(self, seed):
        d = copy.deepcopy(self.data)
        d["seed"] = int(seed)
        return RunConfig(d)

    def to_toml(self):
        return tomli_w.dumps(_strip_none(self.data))

    def digest(self):
        text = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.digest() == other.digest()

    def __hash__(self):
        return hash(self.digest())


def _plain(v):
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    return d


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _check_keys(table, allowed, where):
    for key in table:
        if key not in allowed:
            name = f"{where}.{key}" if where else key
            raise ConfigurationError(f"unknown key '{name}'")


def _system_defaults(env):
    if env not in ENV_PARAMS:
        raise ConfigurationError(f"unknown env {env!r}; choose from {sorted(ENV_PARAMS)}")
    params = ENV_PARAMS[env]()
    out = {f.name: _plain(getattr(params, f.name)) for f in dataclasses.fields(params)}
    out.update(ENV_EXTRAS.get(env, {}))
    return out


def resolve(raw):
    """Validate a parsed TOML mapping and fill every default."""
    if "env" not in raw:
        raise ConfigurationError("missing required key 'env'")
    _check_keys(raw, set(TOP_LEVEL) | set(TABLES) | {"system"}, "")
    env = raw["env"]
    data = {"env": env, "seed": int(raw.get("seed", 0))}
    sys_defaults = _system_defaults(env)
    sys_table = raw.get("system", {})
    _check_keys(sys_table, sys_defaults, "system")
    merged = dict(sys_defaults)
    merged.update(sys_table)
    if env == "drone" and "offsets" not in sys_table and "n_followers" in sys_table:
        merged["offsets"] = _plain(benchmarks.DroneParams(n_followers=merged["n_followers"]).offsets)
    data["system"] = merged
    for name, defaults in TABLES.items():
        table = raw.get(name, {})
        if not isinstance(table, dict):
            raise ConfigurationError(f"'{name}' must be a table")
        _check_keys(table, defaults, name)
        merged = copy.deepcopy(defaults)
        merged.update(table)
        data[name] = {k: _plain(v) for k, v in merged.items()}
    cfg = RunConfig(data)
    # construct once so value errors surface at load time
    build_constants(cfg)
    build_verify(cfg)
    build_training(cfg)
    return cfg


def loads(text, source="<string>"):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"{source}: {e}") from None
    try:
        return resolve(raw)
    except ConfigurationError as e:
        raise ConfigurationError(f"{source}: {e}") from None
    except TypeError as e:
        raise ConfigurationError(f"{source}: bad value type ({e})") from None


def load(path):
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read(), str(path))


# ---------------------------------------------------------------- builders

def _auto(v):
    return None if v == AUTO else v


def build_constants(cfg):
    t = cfg.table("constants")
    names = [f.name for f in dataclasses.fields(CertificateConstants)]
    return CertificateConstants(**{k: float(t[k]) for k in names})


def build_weights(cfg):
    return LossWeights(**{k: float(v) for k, v in cfg.table("weights").items()})


def build_training(cfg):
    t = cfg.table("training")
    return TrainingConfig(**t)


def build_grids(cfg):
    g = cfg.table("grids")
    names = [f.name for f in dataclasses.fields(GridSpec)]
    kw = {k: _auto(g[k]) for k in names}
    kw["point_cap"] = int(kw["point_cap"])
    kw["cex_cap"] = int(kw["cex_cap"])
    return GridSpec(**kw)


def build_verify(cfg):
    c, r, g = cfg.table("constants"), cfg.table("reach"), cfg.table("grids")
    tr = _auto(r["T_R_override"])
    if g["lipschitz"] not in ("norm-product", "tight"):
        raise ConfigurationError(f"unknown lipschitz method {g['lipschitz']!r}")
    return VerifyConfig(R=float(c["R"]), c=_auto(c["c"]), rho_override=_auto(c["rho_override"]),
                        T_R_override=None if tr is None else int(tr), samples=int(r["samples"]),
                        eta=float(r["eta"]), origin_radius=float(g["origin_radius"]),
                        reduction=bool(cfg.table("scalability")["reduction"]), seed=cfg.seed,
                        grids=build_grids(cfg), lipschitz=g["lipschitz"])


def refinement_rounds(cfg):
    r = cfg.table("scalability")["rounds"]
    return None if r == "fixpoint" else int(r)


def delay_matrix(cfg, system):
    edges = cfg.table("delays")["edges"]
    if not edges:
        return None
    tau = np.array(system.delays, dtype=np.int64)
    for e in edges:
        if len(e) != 3:
            raise ConfigurationError("delay edges are [i, j, delay] triples")
        i, j, d = (int(x) for x in e)
        if not system.graph.adjacency[i, j]:
            raise ConfigurationError(f"delay given for missing edge ({i}, {j})")
        tau[i, j] = d
    return tau


def build_environment(cfg):
    env_name = cfg.env
    sys_table = dict(cfg.table("system"))
    extras = {k: sys_table.pop(k) for k in ENV_EXTRAS.get(env_name, {})}
    params = ENV_PARAMS[env_name](**{k: _tuplify(v) for k, v in sys_table.items()})
    if env_name == "linear":
        env = benchmarks.make_linear(params)
    elif env_name == "platoon":
        env = benchmarks.make_platoon(params)
    elif env_name == "drone":
        env = benchmarks.make_drone(params)
    else:
        adj = extras.get("adjacency")
        env = benchmarks.make_microgrid(params, adjacency=None if adj is None else np.asarray(adj))
    tau = delay_matrix(cfg, env.system)
    if tau is not None:
        env = benchmarks.with_delays(env, tau)
    return env
