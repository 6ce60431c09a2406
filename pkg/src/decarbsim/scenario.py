"""Scenario matrix, replication runs, costing, scorecards and exports."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .demand import FUELS, MIXES, assign_fuel_and_class, generate_vehicles, get_mix, load_od
from .dynamics import SimConfig, World, run_until_empty
from .ecodriving import EcoParams
from .emissions import default_emission_path, load_emission_config, wtw_totals
from .network import CHANNELS, load_network
from .routing import CostWeights, StrategyRouter

log = logging.getLogger(__name__)

# (cav_mpr, routing) cells; UE only without CAVs
CELLS = ((0.0, "UE"), (0.5, "M"), (0.5, "A"), (1.0, "M"), (1.0, "A"))
ECO = ("NED", "ED")


class ConfigError(ValueError):
    pass


class CostError(ValueError):
    pass


# -- configuration -------------------------------------------------------------

DEFAULT_CONFIG: dict = {
    "network": None,  # directory with nodes.csv/links.csv; None = bundled 10x10 grid
    "od": None,  # od.csv; None = the network directory's od.csv
    "emissions": None,  # emissions.json; None = bundled synthetic table
    "mixes": list(MIXES),
    "replications": 5,
    "base_seed": 0,
    "output_dir": "results",
    "demand": {"total": 2500, "window_s": 900, "heavy_share": 0.05, "av_share": 0.0},
    "routing": {"beta_t": 30.0 / 3600.0, "beta_ghg": 5e-5, "beta_nox": 5e-3,
                "w_t": 1.0, "w_ghg": 1.0, "w_nox": 1.0, "normalize": True},
    "sim": {"node_cap": 1, "interval_s": 60, "max_t": 7200, "stall_s": 600,
            "per_lane_density": True, "er_per_vehicle": True},
    "eco": {"a_eco": 1.3, "b_eco": 1.5, "lookahead": True, "mode": "coast"},
    "predictor": {
        "model": {"epochs": 4},  # PredictorConfig overrides
        "warmup": [
            {"mix": "I100", "cav_mpr": 1.0, "routing": "M"},
            {"mix": "I50B50", "cav_mpr": 0.5, "routing": "M"},
            {"mix": "B100", "cav_mpr": 0.0, "routing": "UE"},
            {"mix": "I100", "cav_mpr": 0.0, "routing": "UE"},
        ],
        "warmup_seed": 1000,
        "checkpoint_dir": None,  # None = <output_dir>/predictor
    },
    "costs": {
        "ghg_per_km": {"ICEV": 0.50, "HEV": 0.30, "BEV": 0.08, "EFUEL": 0.40},
        "nox_per_km": {"ICEV": 0.12, "HEV": 0.07, "BEV": 0.01, "EFUEL": 0.12},
        "fuel_per_km": {"ICEV": 0.14, "HEV": 0.12, "BEV": 0.10, "EFUEL": 0.16},
        "om_per_km": {"ICEV": 0.08, "HEV": 0.06, "BEV": 0.05, "EFUEL": 0.08},
        "vehicle_price": {"ICEV": 38000.0, "HEV": 48000.0, "BEV": 60000.0, "EFUEL": 38000.0},
        "lifetime_km": 200000.0,
        "travel_time_per_km": 0.32,
    },
}

_OPEN_KEYS = {"predictor.model"}  # validated by PredictorConfig itself


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        name = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config field {name!r}")
        if isinstance(base[k], dict) and name not in _OPEN_KEYS:
            if not isinstance(v, dict):
                raise ConfigError(f"config field {name!r} must be an object")
            out[k] = _merge(base[k], v, name + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _num(d: dict, key: str, lo: float | None = None, hi: float | None = None, integer: bool = False):
    v = d
    for part in key.split("."):
        v = v[part]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not float(v).is_integer()):
        raise ConfigError(f"config field {key!r} must be {'an integer' if integer else 'a number'}")
    if (lo is not None and v < lo) or (hi is not None and v > hi):
        raise ConfigError(f"config field {key!r} out of range: {v}")


@dataclass
class ScenarioConfig:
    data: dict
    base_dir: Path = field(default_factory=Path.cwd)
    source_bytes: bytes = b""

    def __getitem__(self, key):
        return self.data[key]

    def path(self, key: str) -> Path | None:
        v = self.data[key]
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    def network_dir(self) -> Path:
        p = self.path("network")
        return p if p is not None else Path(str(_bundled("grid10")))

    def od_path(self) -> Path:
        p = self.path("od")
        return p if p is not None else self.network_dir() / "od.csv"

    def emissions_path(self) -> Path:
        p = self.path("emissions")
        return p if p is not None else default_emission_path()

    def output_dir(self, override: str | os.PathLike | None = None) -> Path:
        if override is not None:
            return Path(override)
        env = os.environ.get("DECARBSIM_OUT")
        if env:
            return Path(env)
        p = Path(self.data["output_dir"])
        return p if p.is_absolute() else self.base_dir / p

    def digest(self) -> str:
        """Hash of the effective configuration (defaults filled in)."""
        return hashlib.sha256(json.dumps(self.data, sort_keys=True).encode("utf-8")).hexdigest()

    def source_digest(self) -> str:
        """Hash of the config file bytes as given (changes with any byte)."""
        return hashlib.sha256(self.source_bytes).hexdigest()

    def weights(self) -> CostWeights:
        r = self.data["routing"]
        return CostWeights(r["beta_t"], r["beta_ghg"], r["beta_nox"], r["w_t"], r["w_ghg"], r["w_nox"])

    def sim_config(self, seed: int, eco_driving: bool) -> SimConfig:
        s, e = self.data["sim"], self.data["eco"]
        return SimConfig(interval_s=int(s["interval_s"]), node_cap=int(s["node_cap"]), max_t=int(s["max_t"]),
                         stall_s=int(s["stall_s"]), per_lane_density=bool(s["per_lane_density"]),
                         er_per_vehicle=bool(s["er_per_vehicle"]), eco_driving=eco_driving,
                         eco=EcoParams(e["a_eco"], e["b_eco"], bool(e["lookahead"]), e["mode"]), seed=seed)


def _bundled(name: str):
    from importlib import resources

    return resources.files("decarbsim") / "data" / name


def validate_config(data: dict) -> None:
    mixes = data["mixes"]
    if not isinstance(mixes, list) or not mixes:
        raise ConfigError("config field 'mixes' must be a non-empty list")
    names = []
    for m in mixes:
        try:
            names.append(get_mix(m).name)
        except ValueError as exc:
            raise ConfigError(f"config field 'mixes': {exc}") from None
    dup = sorted({n for n in names if names.count(n) > 1})
    if dup:
        raise ConfigError(f"config field 'mixes' has duplicates: {', '.join(dup)}")
    _num(data, "replications", 1, integer=True)
    _num(data, "base_seed", 0, integer=True)
    _num(data, "demand.total", 0, integer=True)
    _num(data, "demand.window_s", 1)
    _num(data, "demand.heavy_share", 0, 1)
    _num(data, "demand.av_share", 0, 0.5)
    for k in ("beta_t", "beta_ghg", "beta_nox", "w_t", "w_ghg", "w_nox"):
        _num(data, f"routing.{k}", 0)
    for k in ("node_cap", "interval_s", "max_t", "stall_s"):
        _num(data, f"sim.{k}", 1, integer=True)
    _num(data, "eco.a_eco", 1e-9)
    _num(data, "eco.b_eco", 1e-9)
    if data["eco"]["mode"] not in ("coast", "decel"):
        raise ConfigError("config field 'eco.mode' must be 'coast' or 'decel'")
    c = data["costs"]
    for table in ("ghg_per_km", "nox_per_km", "fuel_per_km", "om_per_km", "vehicle_price"):
        missing = set(FUELS) - set(c[table])
        if missing:
            raise ConfigError(f"config field 'costs.{table}' lacks {', '.join(sorted(missing))}")
        for f in FUELS:
            _num(c[table], f, 0)
    _num(data, "costs.lifetime_km", 1e-9)
    _num(data, "costs.travel_time_per_km", 0)
    for i, w in enumerate(data["predictor"]["warmup"]):
        if set(w) != {"mix", "cav_mpr", "routing"} or w["routing"] not in ("UE", "M", "A"):
            raise ConfigError(f"config field 'predictor.warmup[{i}]' needs mix, cav_mpr and routing UE/M/A")
    from .predictor import PredictorConfig

    try:
        PredictorConfig(**data["predictor"]["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config field 'predictor.model': {exc}") from None


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None) -> ScenarioConfig:
    """Read a JSON scenario config, fill defaults and validate.

    Relative paths inside the file resolve against the file's directory.
    """
    raw, base, src = {}, Path.cwd(), b""
    if path is not None:
        path = Path(path)
        src = path.read_bytes()
        try:
            raw = json.loads(src.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        base = path.resolve().parent
    data = _merge(DEFAULT_CONFIG, raw)
    if overrides:
        data = _merge(data, overrides)
    validate_config(data)
    return ScenarioConfig(data, base, src)


# -- scenarios -------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    cav_mpr: float
    routing: str
    eco_driving: str
    mix: str
    replications: int = 5
    base_seed: int = 0

    def __post_init__(self):
        if (self.cav_mpr, self.routing) not in CELLS:
            raise ValueError(f"invalid (cav_mpr, routing) cell ({self.cav_mpr}, {self.routing})")
        if self.eco_driving not in ECO:
            raise ValueError(f"eco_driving must be ED or NED, got {self.eco_driving!r}")
        get_mix(self.mix)

    @property
    def key(self) -> tuple:
        return (self.mix, self.cav_mpr, self.routing, self.eco_driving)

    @property
    def id(self) -> str:
        return hashlib.sha1(repr(self.key).encode("utf-8")).hexdigest()[:10]

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + r for r in range(self.replications)]

    @property
    def label(self) -> str:
        return f"{self.mix}/{int(round(self.cav_mpr * 100))}%/{self.routing}/{self.eco_driving}"

    def attr(self, name: str):
        return {"mix": self.mix, "cav_mpr": self.cav_mpr, "routing": self.routing, "eco": self.eco_driving,
                "eco_driving": self.eco_driving, "id": self.id}[name]


def enumerate_scenarios(config: ScenarioConfig | dict | None = None) -> list[Scenario]:
    """Every (mix, CAV cell, ED/NED) combination in a fixed order: 5 x 2 x |mixes|."""
    if config is None:
        config = load_config()
    data = config.data if isinstance(config, ScenarioConfig) else _merge(DEFAULT_CONFIG, config)
    validate_config(data)
    out = []
    for m in data["mixes"]:
        name = get_mix(m).name
        for mpr, routing in CELLS:
            for eco in ECO:
                out.append(Scenario(mpr, routing, eco, name, int(data["replications"]), int(data["base_seed"])))
    return out


def parse_filter(expr: str) -> tuple[str, set[str]]:
    """``key=value[,value...]`` with key in mix, cav_mpr, routing, eco, id."""
    if "=" not in expr:
        raise ConfigError(f"filter {expr!r} is not key=value")
    key, val = expr.split("=", 1)
    key = key.strip()
    if key not in ("mix", "cav_mpr", "routing", "eco", "eco_driving", "id"):
        raise ConfigError(f"unknown filter key {key!r}")
    return key, {v.strip() for v in val.split(",") if v.strip()}


def filter_scenarios(scenarios: list[Scenario], filters: list[str]) -> list[Scenario]:
    parsed = [parse_filter(f) for f in filters or []]

    def match(s: Scenario) -> bool:
        for key, vals in parsed:
            v = s.attr(key)
            if key == "cav_mpr":
                if not any(math.isclose(v, float(x)) or math.isclose(v * 100, float(x)) for x in vals):
                    return False
            elif str(v) not in vals:
                return False
        return True

    return [s for s in scenarios if match(s)]


# -- replications ------------------------------------------------------------------

METRICS = (
    "tailpipe_ghg_kg", "upstream_ghg_kg", "wtw_ghg_kg", "tailpipe_nox_kg", "upstream_nox_kg", "wtw_nox_kg",
    "energy_kwh", "mean_tt_min", "mean_dist_km", "completion_s", "fleet_km", "total_tt_h", "braking_energy_mj",
    "reroutes", "emergencies", "forecast_fallbacks", "conservation_rel_err", "count_violations",
)


@dataclass
class ReplicationResult:
    seed: int
    gridlock: bool
    metrics: dict
    message: str = ""


@dataclass
class ScenarioResult:
    scenario: Scenario
    replications: list[ReplicationResult]
    mean: dict
    status: str  # "ok", "gridlock" (some replications excluded) or "failed"

    @property
    def n_ok(self) -> int:
        return sum(not r.gridlock for r in self.replications)

    @property
    def n_gridlocked(self) -> int:
        return sum(r.gridlock for r in self.replications)


def _rel_err(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return float(abs(a - b) / scale) if scale > 0 else 0.0


class Workspace:
    """Loaded inputs shared by every replication of a run."""

    def __init__(self, config: ScenarioConfig, models: dict | None = None):
        self.config = config
        self.graph = load_network(config.network_dir())
        self.od = load_od(config.od_path())
        self.emissions = load_emission_config(config.emissions_path())
        self.models = models or {}
        self._demand: dict[int, list] = {}

    def vehicles(self, scenario: Scenario, seed: int):
        d = self.config["demand"]
        if seed not in self._demand:
            self._demand[seed] = generate_vehicles(self.od, int(d["total"]), float(d["window_s"]), seed, self.graph)
        return assign_fuel_and_class(self._demand[seed], get_mix(scenario.mix), scenario.cav_mpr, seed=seed,
                                     av_share=float(d["av_share"]), heavy_share=float(d["heavy_share"]))

    def make_world(self, scenario: Scenario, seed: int) -> World:
        from .predictor import Forecaster

        cfg = self.config
        forecaster = Forecaster(self.models) if scenario.routing == "A" and self.models else None
        router = StrategyRouter(scenario.routing, cfg.weights(), bool(cfg["routing"]["normalize"]), forecaster)
        return World(self.graph, self.vehicles(scenario, seed), self.emissions,
                     cfg.sim_config(seed, scenario.eco_driving == "ED"), router)

    def run_replication(self, scenario: Scenario, seed: int) -> ReplicationResult:
        w = self.make_world(scenario, seed)
        res = run_until_empty(w)
        done = w.arr_time >= 0
        tot = wtw_totals(w.ghg, w.nox, w.energy, w.fuels, self.emissions)
        link_sum = w.link_em_total.sum(axis=0)
        tt = (w.arr_time - w.dep_time)[done]
        m = dict(tot)
        m.update(
            energy_kwh=float(w.energy.sum()),
            mean_tt_min=float(tt.mean() / 60.0) if len(tt) else float("nan"),
            mean_dist_km=float(w.odo[done].mean() / 1000.0) if done.any() else float("nan"),
            completion_s=float(res.completion_time),
            fleet_km=float(w.odo.sum() / 1000.0),
            total_tt_h=float(tt.sum() / 3600.0),
            braking_energy_mj=float(w.brake_energy.sum() / 1e6),
            reroutes=float(w.reroutes),
            emergencies=float(w.emergencies),
            forecast_fallbacks=float(w.router.fallbacks),
            conservation_rel_err=max(_rel_err(link_sum[0], float(w.ghg.sum())),
                                     _rel_err(link_sum[1], float(w.nox.sum()))),
            count_violations=float(w.count_violations),
        )
        msg = str(res.gridlock) if res.gridlock else ""
        return ReplicationResult(seed, res.gridlock is not None, m, msg)

    def history_run(self, mix: str, cav_mpr: float, routing: str, seed: int):
        """One NED replication for predictor warm-up; returns its StateHistory."""
        sc = Scenario(cav_mpr, routing, "NED", mix, 1, seed)
        w = self.make_world(sc, seed)
        run_until_empty(w)
        return w.history


def aggregate(scenario: Scenario, reps: list[ReplicationResult]) -> ScenarioResult:
    """Mean over ungridlocked replications; gridlocked ones are excluded with a warning."""
    ok = [r for r in reps if not r.gridlock]
    for r in reps:
        if r.gridlock:
            warnings.warn(f"{scenario.label} seed {r.seed}: {r.message}; replication excluded", stacklevel=2)
    if ok:
        mean = {k: float(np.mean([r.metrics[k] for r in ok])) for k in METRICS}
        mean["conservation_rel_err"] = max(r.metrics["conservation_rel_err"] for r in ok)
        mean["count_violations"] = float(sum(r.metrics["count_violations"] for r in reps))
    else:
        mean = {k: float("nan") for k in METRICS}
    status = "ok" if len(ok) == len(reps) else "gridlock"
    return ScenarioResult(scenario, reps, mean, status)


def run_scenario(scenario: Scenario, workspace: Workspace) -> ScenarioResult:
    """All replications of one scenario, seeds base_seed .. base_seed + replications - 1."""
    return aggregate(scenario, [workspace.run_replication(scenario, s) for s in scenario.seeds])


# worker-process state for parallel runs
_WS: Workspace | None = None


def _init_worker(config: ScenarioConfig, models: dict):
    global _WS
    _WS = Workspace(config, models)


def _work(item):
    k, scenario, seed = item
    try:
        return k, _WS.run_replication(scenario, seed), None
    except Exception as exc:  # reported per scenario by the caller
        return k, None, f"{type(exc).__name__}: {exc}"


def run_scenarios(scenarios: list[Scenario], workspace: Workspace, jobs: int = 1, on_result=None) -> list:
    """Run every replication, optionally in ``jobs`` worker processes.

    Results come back in scenario order whatever the scheduling, so output
    does not depend on ``jobs``. A scenario whose replication raised gets
    status "failed"; ``on_result(index, ScenarioResult)`` fires as soon as
    a scenario is complete.
    """
    items = [(k, s, seed) for k, s in enumerate(scenarios) for seed in s.seeds]
    reps: dict[int, list] = {k: [] for k in range(len(scenarios))}
    errors: dict[int, str] = {}
    results: list[ScenarioResult | None] = [None] * len(scenarios)

    def collect(k, rep, err):
        if err is not None:
            errors.setdefault(k, err)
        reps[k].append(rep)
        if len(reps[k]) == scenarios[k].replications:
            sc = scenarios[k]
            if k in errors:
                r = ScenarioResult(sc, [x for x in reps[k] if x is not None], {m: float("nan") for m in METRICS},
                                   "failed")
                log.error("%s failed: %s", sc.label, errors[k])
            else:
                r = aggregate(sc, sorted(reps[k], key=lambda x: x.seed))
            results[k] = r
            if on_result is not None:
                on_result(k, r)

    if jobs <= 1:
        global _WS
        _WS = workspace
        for it in items:
            collect(*_work(it))
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=(workspace.config, workspace.models)) as pool:
            for out in pool.map(_work, items, chunksize=1):
                collect(*out)
    return results


# -- predictor warm-up -----------------------------------------------------------------


def predictor_key(config: ScenarioConfig) -> str:
    """Identity of the warm-up training: inputs, simulation settings and model config."""
    h = hashlib.sha256()
    for p in (config.network_dir() / "nodes.csv", config.network_dir() / "links.csv", config.od_path(),
              config.emissions_path()):
        h.update(Path(p).read_bytes())
    keep = {k: config.data[k] for k in ("demand", "routing", "sim", "predictor")}
    keep["predictor"] = {k: v for k, v in keep["predictor"].items() if k != "checkpoint_dir"}
    h.update(json.dumps(keep, sort_keys=True).encode("utf-8"))
    return h.hexdigest()


def checkpoint_dir(config: ScenarioConfig, out_dir: Path | None = None) -> Path:
    p = config["predictor"]["checkpoint_dir"]
    if p is not None:
        p = Path(p)
        return p if p.is_absolute() else config.base_dir / p
    return (out_dir or config.output_dir()) / "predictor"


def warmup_histories(workspace: Workspace) -> list:
    pc = workspace.config["predictor"]
    return [workspace.history_run(get_mix(w["mix"]).name, float(w["cav_mpr"]), w["routing"], pc["warmup_seed"] + k)
            for k, w in enumerate(pc["warmup"])]


def train_channel(histories: list, channel: str, cfg, max_steps: int | None = None):
    """Fit one channel model on windows from every warm-up history."""
    from .predictor import ChannelModel, SeriesDataset, train, windows_from_history

    parts = [windows_from_history(h.matrix(channel), cfg.window, h._default(channel)) for h in histories]
    ds = SeriesDataset(np.concatenate([p.inputs for p in parts]), np.concatenate([p.targets for p in parts]),
                       np.concatenate([p.times for p in parts]))
    res = train(ds, cfg, max_steps=max_steps)
    metrics = {"train_rmse": res.train_rmse, "test_rmse": res.test_rmse, "persistence_rmse": res.persistence_rmse,
               "samples": len(ds), "steps": res.steps, "loss_history": res.loss_history}
    return ChannelModel(channel, res.params, cfg, res.normalizer, metrics)


def prepare_predictor(config: ScenarioConfig, workspace: Workspace | None = None, out_dir: Path | None = None,
                      channels=CHANNELS, force: bool = False) -> dict:
    """Load cached channel models or train them from warm-up simulations.

    The cache lives in the checkpoint directory together with the key of
    the inputs it was trained on; any change to those inputs retrains.
    """
    from dataclasses import replace

    from .predictor import PredictorConfig, load_checkpoint, save_checkpoint

    d = checkpoint_dir(config, out_dir)
    key = predictor_key(config)
    meta_path = d / "warmup.json"
    if not force and meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            if meta.get("key") == key and all((d / f"{ch}.npz").exists() for ch in channels):
                return {ch: load_checkpoint(d / f"{ch}.npz") for ch in channels}
        except (ValueError, OSError) as exc:
            log.warning("ignoring predictor cache in %s: %s", d, exc)
    workspace = workspace or Workspace(config)
    base = PredictorConfig(**config["predictor"]["model"])
    log.info("training predictor from %d warm-up runs", len(config["predictor"]["warmup"]))
    histories = warmup_histories(workspace)
    d.mkdir(parents=True, exist_ok=True)
    models, report = {}, {}
    for k, ch in enumerate(channels):
        m = train_channel(histories, ch, replace(base, seed=base.seed + k))
        save_checkpoint(m, d / f"{ch}.npz")
        models[ch] = m
        report[ch] = {x: m.metrics[x] for x in ("train_rmse", "test_rmse", "persistence_rmse", "samples")}
        log.info("%s: train RMSE %.4g, test RMSE %.4g, persistence %.4g", ch, m.metrics["train_rmse"],
                 m.metrics["test_rmse"], m.metrics["persistence_rmse"])
    tmp = meta_path.with_suffix(".tmp")
    tmp.write_text(json.dumps({"key": key, "metrics": report}, indent=1, sort_keys=True), encoding="utf-8")
    tmp.replace(meta_path)
    return models


# -- costs and scores --------------------------------------------------------------------


@dataclass(frozen=True)
class CostBreakdown:
    """Per-km costs in CAD."""

    ghg_emission: float
    nox_emission: float
    travel_time: float
    fuel: float
    om: float
    vehicle_capital: float

    def __post_init__(self):
        for k, v in self.as_dict().items():
            if not v >= 0:
                raise CostError(f"cost component {k} must be >= 0, got {v}")

    def as_dict(self) -> dict:
        return {"ghg_emission": self.ghg_emission, "nox_emission": self.nox_emission,
                "travel_time": self.travel_time, "fuel": self.fuel, "om": self.om,
                "vehicle_capital": self.vehicle_capital}

    @property
    def emission(self) -> float:
        return self.ghg_emission + self.nox_emission

    @property
    def other(self) -> float:
        return self.travel_time + self.fuel + self.om + self.vehicle_capital


def blend(per_fuel: dict, mix) -> float:
    """Share-weighted mean of a per-fuel value."""
    return float(sum(share * float(per_fuel[f]) for f, share in get_mix(mix).shares().items() if share))


def monetize(result: ScenarioResult | dict, costs: dict, mix, weights: CostWeights | None = None,
             basis: str = "simulated") -> CostBreakdown:
    """Per-km cost breakdown for one scenario.

    ``simulated`` prices the run's own WTW emissions and travel time with
    the betas and divides by fleet-km; ``default`` uses the per-km defaults
    per fuel blended by mix shares. Fuel, O&M and capital (price over
    lifetime km) are per-km defaults in both.
    """
    mean = result.mean if isinstance(result, ScenarioResult) else result
    fuel = blend(costs["fuel_per_km"], mix)
    om = blend(costs["om_per_km"], mix)
    capital = blend({f: p / float(costs["lifetime_km"]) for f, p in costs["vehicle_price"].items()}, mix)
    if basis == "default":
        return CostBreakdown(blend(costs["ghg_per_km"], mix), blend(costs["nox_per_km"], mix),
                             float(costs["travel_time_per_km"]), fuel, om, capital)
    if basis != "simulated":
        raise ValueError(f"unknown cost basis {basis!r}")
    km = float(mean["fleet_km"])
    if not km > 0:
        raise CostError("fleet-km is zero; per-km costs are undefined")
    w = weights or CostWeights()
    return CostBreakdown(mean["wtw_ghg_kg"] * 1000.0 * w.beta_ghg / km, mean["wtw_nox_kg"] * 1000.0 * w.beta_nox / km,
                         mean["total_tt_h"] * 3600.0 * w.beta_t / km, fuel, om, capital)


def score_column(costs) -> np.ndarray:
    """50 x (cheapest / cost): the cheapest option scores 50."""
    c = np.asarray(costs, dtype=np.float64)
    if c.size == 0:
        return c
    if not np.all(c > 0):
        raise CostError("scores need strictly positive costs")
    return 50.0 * (c.min() / c)  # the minimum maps to exactly 50


@dataclass
class ScoreCard:
    mixes: list
    emission_cost: np.ndarray
    other_cost: np.ndarray
    emission_score: np.ndarray
    other_score: np.ndarray

    def best(self, column: str) -> list:
        s = self.emission_score if column == "emission" else self.other_score
        return [m for m, v in zip(self.mixes, s) if v == 50.0]


def score(breakdowns: dict) -> ScoreCard:
    """Separate emission and non-emission scores for ``{mix: CostBreakdown}``."""
    mixes = list(breakdowns)
    e = np.array([breakdowns[m].emission for m in mixes])
    o = np.array([breakdowns[m].other for m in mixes])
    return ScoreCard(mixes, e, o, score_column(e), score_column(o))


# -- feature importance -----------------------------------------------------------------

FEATURES = ("share_ICEV", "share_HEV", "share_BEV", "share_EFUEL", "cav_mpr", "routing_M", "routing_A",
            "eco_driving")


@dataclass
class FeatureImportance:
    features: list
    coefficients: np.ndarray  # standardized; 0 for dropped columns
    importances: np.ndarray  # |coef| / sum |coef|
    dropped: list
    degenerate: bool = False

    def ranked(self) -> list[tuple[str, float, float]]:
        """(feature, importance, cumulative) in decreasing importance, ties by feature order."""
        order = sorted(range(len(self.features)), key=lambda i: (-self.importances[i], i))
        cum = np.cumsum(self.importances[order])
        return [(self.features[i], float(self.importances[i]), float(c)) for i, c in zip(order, cum)]


def scenario_features(s: Scenario) -> list[float]:
    sh = get_mix(s.mix).shares()
    return [sh["ICEV"], sh["HEV"], sh["BEV"], sh["EFUEL"], s.cav_mpr, float(s.routing == "M"),
            float(s.routing == "A"), float(s.eco_driving == "ED")]


def feature_importance(X, y, features=FEATURES, tol: float = 1e-9) -> FeatureImportance:
    """Standardized least squares; importance is |coef| normalized to sum 1.

    Columns that are (numerically) linear combinations of earlier ones are
    dropped with a warning and get importance 0. A constant target yields
    all-zero importances flagged as degenerate.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    features = list(features)
    if X.ndim != 2 or X.shape[1] != len(features) or X.shape[0] != len(y):
        raise ValueError("X must be (samples, features) matching y and the feature names")
    for j, f in enumerate(features):
        if len(np.unique(X[:, j])) < 2:
            raise ValueError(f"feature {f!r} needs at least two distinct values")
    Z = (X - X.mean(axis=0)) / X.std(axis=0)
    keep, basis = [], np.zeros((len(y), 0))
    for j in range(Z.shape[1]):
        col = Z[:, j]
        resid = col - basis @ (basis.T @ col) if basis.shape[1] else col
        if np.linalg.norm(resid) > 1e-8 * np.linalg.norm(col):
            keep.append(j)
            basis = np.column_stack([basis, resid / np.linalg.norm(resid)])
    dropped = [features[j] for j in range(len(features)) if j not in keep]
    if dropped:
        warnings.warn(f"aliased feature columns dropped: {', '.join(dropped)}", stacklevel=2)
    coef = np.zeros(len(features))
    ys = y.std()
    if ys <= tol * max(1.0, abs(y.mean())):
        return FeatureImportance(features, coef, np.zeros(len(features)), dropped, degenerate=True)
    sol, *_ = np.linalg.lstsq(Z[:, keep], (y - y.mean()) / ys, rcond=None)
    coef[keep] = sol
    total = np.abs(coef).sum()
    imp = np.abs(coef) / total if total > 0 else np.zeros(len(features))
    return FeatureImportance(features, coef, imp, dropped, degenerate=bool(total == 0))


# -- export ------------------------------------------------------------------------------

SCENARIO_COLS = ("scenario_id", "mix", "cav_mpr", "routing", "eco")
COST_COLS = ("ghg_emission", "nox_emission", "travel_time", "fuel", "om", "vehicle_capital")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)  # numpy scalars would otherwise repr as np.float64(...)
        return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else repr(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _scenario_row(s: Scenario) -> list:
    return [s.id, s.mix, s.cav_mpr, s.routing, s.eco_driving]


def _write_csv(path: Path, header, rows) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    tmp.replace(path)


def cost_rows(results: list[ScenarioResult], config: ScenarioConfig) -> list[list]:
    """One row per (scenario, basis) with scores taken across mixes within each cell."""
    costs, weights = config["costs"], config.weights()
    groups: dict[tuple, list] = {}
    for r in results:
        if r.status == "failed" or r.n_ok == 0:
            continue
        for basis in ("simulated", "default"):
            try:
                b = monetize(r, costs, r.scenario.mix, weights, basis)
            except CostError as exc:
                log.warning("%s: %s", r.scenario.label, exc)
                continue
            groups.setdefault((r.scenario.cav_mpr, r.scenario.routing, r.scenario.eco_driving, basis), []).append((r, b))
    rows = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2], k[3])):
        items = groups[key]
        es = score_column([b.emission for _, b in items]) if all(b.emission > 0 for _, b in items) else \
            np.full(len(items), np.nan)
        os_ = score_column([b.other for _, b in items]) if all(b.other > 0 for _, b in items) else \
            np.full(len(items), np.nan)
        for (r, b), e, o in zip(items, es, os_):
            rows.append(_scenario_row(r.scenario) + [key[3]] + [b.as_dict()[c] for c in COST_COLS]
                        + [b.emission, b.other, float(e), float(o)])
    rows.sort(key=lambda row: (row[5], row[2], row[3], row[4], row[1]))
    return rows


def importance_from_results(results: list[ScenarioResult], config: ScenarioConfig) -> FeatureImportance:
    ok = [r for r in results if r.status != "failed" and r.n_ok > 0]
    X = np.array([scenario_features(r.scenario) for r in ok]) if ok else np.zeros((0, len(FEATURES)))
    y = np.array([monetize(r, config["costs"], r.scenario.mix, config.weights()).emission for r in ok])
    return feature_importance(X, y)


def export(results: list[ScenarioResult], out_dir: str | os.PathLike, config: ScenarioConfig | None = None,
           charts: bool = True) -> dict:
    """Write results.csv, replications.csv, costs.csv, pareto.csv and SVG charts."""
    config = config or load_config()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = [r for r in results if r is not None]
    paths = {}

    header = list(SCENARIO_COLS) + ["status", "replications_ok", "replications_gridlocked"] + list(METRICS)
    rows = [_scenario_row(r.scenario) + [r.status, r.n_ok, r.n_gridlocked] + [r.mean[m] for m in METRICS]
            for r in results]
    paths["results"] = out / "results.csv"
    _write_csv(paths["results"], header, rows)

    rows = [_scenario_row(r.scenario) + [rep.seed, int(rep.gridlock)] + [rep.metrics[m] for m in METRICS]
            for r in results for rep in r.replications]
    paths["replications"] = out / "replications.csv"
    _write_csv(paths["replications"], list(SCENARIO_COLS) + ["seed", "gridlock"] + list(METRICS), rows)

    crow = cost_rows(results, config)
    paths["costs"] = out / "costs.csv"
    _write_csv(paths["costs"], list(SCENARIO_COLS) + ["basis"] + list(COST_COLS)
               + ["emission_total", "other_total", "emission_score", "other_score"], crow)

    fi = None
    try:
        fi = importance_from_results(results, config)
        prow = [[f, i, c, float(fi.coefficients[fi.features.index(f)]), int(f in fi.dropped), int(fi.degenerate)]
                for f, i, c in fi.ranked()]
    except (ValueError, CostError) as exc:
        log.warning("feature importance skipped: %s", exc)
        prow = []
    paths["pareto"] = out / "pareto.csv"
    _write_csv(paths["pareto"], ["feature", "importance", "cumulative", "coefficient", "dropped", "degenerate"], prow)

    if charts and results:
        from .plots import render_charts

        paths.update(render_charts(results, crow, fi, out))
    return paths


__all__ = [
    "CELLS", "DEFAULT_CONFIG", "ECO", "FEATURES", "METRICS", "ConfigError", "CostBreakdown", "CostError",
    "FeatureImportance", "ReplicationResult", "Scenario", "ScenarioConfig", "ScenarioResult", "ScoreCard",
    "Workspace", "aggregate", "blend", "checkpoint_dir", "cost_rows", "enumerate_scenarios", "export",
    "feature_importance", "filter_scenarios", "load_config", "monetize", "parse_filter", "predictor_key",
    "prepare_predictor", "run_scenario", "run_scenarios", "score", "score_column", "train_channel",
    "validate_config",
]
