"""Experiment harness: data collection, training, evaluation and comparison.

Every stage reads a resolved configuration (defaults, then an optional YAML
file, then command-line overrides), writes that configuration next to its
outputs, and emits only plain files (JSON lines, CSV, JSON, text) from which
every reported aggregate can be recomputed.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import jax
import jax.numpy as jnp
import numpy as np
import yaml
from scipy import stats

from metaadapt import adaptation as ad
from metaadapt import dynamics as dyn
from metaadapt import meta
from metaadapt import network as nn
from metaadapt import sim
from metaadapt import terrain as tr
from metaadapt.checkpoint import load_checkpoint, save_checkpoint
from metaadapt.mppi import CostConfig, MppiConfig, MppiController, rollover_penalty

log = logging.getLogger(__name__)

CONFIGURATIONS = ("baseline", "sliding-lsq", "adaptation", "meta-adaptation")

# Exit codes of the command-line interface.
EXIT_OK = 0
EXIT_FAILURE = 1  # unexpected internal error
EXIT_USAGE = 2  # bad arguments or configuration values
EXIT_MISSING_INPUT = 3  # checkpoint, dataset, map or report not found
EXIT_INVALID_DATA = 4  # inputs exist but are unusable (empty dataset, mismatched reports)
EXIT_OUTPUT = 5  # writing results failed


class ExperimentError(Exception):
    exit_code = EXIT_FAILURE


class ConfigError(ExperimentError):
    exit_code = EXIT_USAGE


class MissingInputError(ExperimentError):
    exit_code = EXIT_MISSING_INPUT


class InvalidDataError(ExperimentError):
    exit_code = EXIT_INVALID_DATA


class OutputError(ExperimentError):
    exit_code = EXIT_OUTPUT


# --- configuration ----------------------------------------------------------------

DEFAULTS: dict = {
    "seed": 0,
    "episodes": 5,
    "map_categories": list(tr.CATEGORIES),
    "configurations": list(CONFIGURATIONS),
    "maps": {"seed": 100, "size": 200.0, "cell_size": 0.5},
    "course": {"scale": 40.0, "waypoints": 8},
    "episode": {"max_time": 60.0, "waypoint_radius": 4.0, "start_speed": 3.0},
    "collect": {"runs": 24, "duration": 60.0, "seed": 1000, "map_seed": 10_000},
    "network": {"n_hidden": 32, "n_in": 32, "n_w": 8, "output_scale": 300.0},
    "train": {
        "tau": 1000, "horizon": 250, "stride": 250, "batch_size": 16,
        "pretrain_epochs": 150, "meta_epochs": 15,
        "lr_net": 1e-3, "lr_last_layer": 0.2, "lr_psi": 3e-3, "lr_filter": 1e-2,
        "beta": 0.995, "loss_ceiling": 1e4, "validation_every": 8,
    },
    "filter": {"h": 10},
    "lsq": {"window": 25, "ridge": 1.0},
    "mppi": {"num_samples": 64, "horizon": 150, "temperature": 20.0,
             "noise_std": [0.3, 0.2, 0.35], "smoothing": 0.9},
    # correlated steering noise lets short sample sets explore sustained turns
    "cost": {"speed_limit": 7.0},
    "prediction": {"horizon": 5.0, "every": 1.0},
    "bootstrap": {"resamples": 10_000, "level": 0.95},
    "full_scale": {"episodes": 25, "mppi": {"num_samples": 128, "horizon": 250}},
    "save_episode_logs": False,
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_path(cfg: dict, dotted: str, value) -> None:
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


@dataclass
class RunConfig:
    """Resolved experiment configuration (a validated view over a plain dict)."""

    data: dict

    @classmethod
    def resolve(cls, path: str | Path | None = None, overrides: dict | None = None,
                full_scale: bool = False) -> "RunConfig":
        cfg = copy.deepcopy(DEFAULTS)
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise MissingInputError(f"config file not found: {path}")
            try:
                loaded = yaml.safe_load(path.read_text()) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            cfg = deep_merge(cfg, loaded)
        if full_scale:
            cfg = deep_merge(cfg, cfg.get("full_scale", {}))
        for k, v in (overrides or {}).items():
            set_path(cfg, k, v)
        out = cls(cfg)
        out.validate()
        return out

    def validate(self) -> None:
        d = self.data
        bad = [c for c in d["configurations"] if c not in CONFIGURATIONS]
        if bad:
            raise ConfigError(f"unknown configurations {bad}; choose from {list(CONFIGURATIONS)}")
        bad = [c for c in d["map_categories"] if c not in tr.CATEGORIES]
        if bad:
            raise ConfigError(f"unknown map categories {bad}; choose from {list(tr.CATEGORIES)}")
        if int(d["episodes"]) < 0 or int(d["collect"]["runs"]) < 0:
            raise ConfigError("episode and run counts must be non-negative")
        try:
            self.mppi.validate()
            self.cost.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 < d["bootstrap"]["level"] < 1 or d["bootstrap"]["resamples"] < 1:
            raise ConfigError("bootstrap level must lie in (0, 1) with >= 1 resample")

    def __getitem__(self, key):
        return self.data[key]

    @property
    def mppi(self) -> MppiConfig:
        return MppiConfig(**self.data["mppi"])

    @property
    def cost(self) -> CostConfig:
        return CostConfig(**self.data["cost"])

    @property
    def limits(self) -> sim.EpisodeLimits:
        e = self.data["episode"]
        return sim.EpisodeLimits(max_time=float(e["max_time"]), waypoint_radius=float(e["waypoint_radius"]),
                                 control_hz=self.mppi.control_hz, adapt_every=int(self.data["filter"]["h"]),
                                 r_limit=self.cost.r_limit)

    def episode_seeds(self, category: str) -> list[int]:
        """Distinct per episode and category; shared across configurations (paired runs)."""
        k = tr.CATEGORIES.index(category)
        return [int(self.data["seed"]) * 100_003 + 1000 * k + e for e in range(int(self.data["episodes"]))]

    def write(self, out_dir: Path) -> Path:
        return _write_text(Path(out_dir) / "resolved_config.yaml", yaml.safe_dump(self.data, sort_keys=True))


def _write_text(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


# --- maps ---------------------------------------------------------------------------


def evaluation_map(cfg: RunConfig, category: str, maps_dir: Path | None = None) -> tr.TerrainMap:
    """The category's map from ``maps_dir`` (written by :func:`gen_maps`), else generated from the config."""
    if maps_dir is not None:
        path = Path(maps_dir) / category
        if not path.with_suffix(".json").exists():
            raise MissingInputError(f"map not found: {path.with_suffix('.json')}")
        return tr.TerrainMap.load(path)
    m = cfg["maps"]
    course = course_waypoints(cfg)
    return tr.generate_map(category, int(m["seed"]) + tr.CATEGORIES.index(category), float(m["size"]),
                           float(m["cell_size"]), keep_clear=course)


def course_waypoints(cfg: RunConfig) -> np.ndarray:
    c = cfg["course"]
    size = float(cfg["maps"]["size"])
    return tr.figure_eight(center=(size / 2, size / 2), scale=float(c["scale"]), n=int(c["waypoints"]))


def gen_maps(cfg: RunConfig, out: Path) -> list[Path]:
    out = Path(out)
    cfg.write(out)
    paths = []
    for cat in cfg["map_categories"]:
        tmap = evaluation_map(cfg, cat)
        json_path, _ = tmap.save(out / cat)
        slope = tmap.slope_deg()
        log.info("%s: max slope %.1f deg, obstacle cells %d", cat, slope.max(), int(tmap.obstacle.sum()))
        paths.append(json_path)
    return paths


def start_state(waypoints: np.ndarray, speed: float, params: sim.SimParams) -> sim.SimState:
    heading = math.atan2(waypoints[0, 1] - waypoints[-1, 1], waypoints[0, 0] - waypoints[-1, 0])
    return sim.initial_state(waypoints[-1, 0], waypoints[-1, 1], heading, speed, params)


# --- collection ------------------------------------------------------------------------


def load_runs(data_dir: str | Path) -> list[sim.EpisodeLog]:
    data_dir = Path(data_dir)
    run_dir = data_dir / "runs"
    if not run_dir.is_dir():
        raise MissingInputError(f"no dataset at {data_dir} (expected a runs/ directory)")
    return [sim.EpisodeLog.read(p.with_suffix("")) for p in sorted(run_dir.glob("run_*.jsonl"))]


def dataset_statistics(logs: Sequence[sim.EpisodeLog]) -> dict:
    """Summary of measured data: sizes and forward-velocity / yaw-rate statistics."""
    if not logs:
        return {"runs": 0, "steps": 0, "duration_s": 0.0}
    vx = np.concatenate([lg.x_meas[:, dyn.VX] for lg in logs])
    r = np.concatenate([lg.x_meas[:, dyn.YAW_RATE] for lg in logs])
    return {
        "runs": len(logs),
        "steps": int(vx.size),
        "duration_s": float(vx.size * dyn.DT),
        "vx_mean": float(np.mean(vx)),
        "vx_median": float(np.median(vx)),
        "vx_max": float(np.max(vx)),
        "yaw_rate_abs_mean": float(np.mean(np.abs(r))),
        "yaw_rate_abs_max": float(np.max(np.abs(r))),
    }


def format_statistics(st: dict) -> str:
    rows = [("runs", f"{st['runs']}"), ("steps", f"{st['steps']}"), ("duration [s]", f"{st['duration_s']:.1f}")]
    if st["runs"]:
        rows += [
            ("forward velocity mean [m/s]", f"{st['vx_mean']:.3f}"),
            ("forward velocity median [m/s]", f"{st['vx_median']:.3f}"),
            ("forward velocity max [m/s]", f"{st['vx_max']:.3f}"),
            ("|yaw rate| mean [rad/s]", f"{st['yaw_rate_abs_mean']:.3f}"),
            ("|yaw rate| max [rad/s]", f"{st['yaw_rate_abs_max']:.3f}"),
        ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(["Dataset statistics", "-" * (width + 12)] + [f"{k:<{width}}  {v:>10}" for k, v in rows])


def collect(cfg: RunConfig, out: Path) -> dict:
    """Drive randomized data-generation worlds and write one log per run."""
    out = Path(out)
    cfg.write(out)
    c = cfg["collect"]
    n_runs = int(c["runs"])
    if n_runs == 0:
        log.warning("collect: run count is 0, writing an empty dataset")
    (out / "runs").mkdir(parents=True, exist_ok=True)
    logs = []
    n_theta = int(cfg["network"]["n_w"]) + nn.N_OUT
    for i in range(n_runs):
        seed = int(c["seed"]) + i
        rng = np.random.default_rng(seed)
        category = tr.CATEGORIES[i % len(tr.CATEGORIES)]
        tmap = tr.generate_map(category, int(c["map_seed"]) + seed, float(cfg["maps"]["size"]),
                               float(cfg["maps"]["cell_size"]))
        params = sim.randomize_params(sim.DATA_GEN_PARAMS, rng)
        size = float(cfg["maps"]["size"])
        center = rng.uniform(0.4 * size, 0.6 * size, size=2)
        loop = tr.figure_eight(center=tuple(center), scale=rng.uniform(30.0, 55.0), n=10)
        if rng.random() < 0.5:
            loop = loop[::-1]
        waypoints = np.concatenate([loop] * 4)
        driver = sim.PurePursuit(params=params, target_speed=float(rng.uniform(3.0, 7.0)))
        episode = sim.run_episode(
            tmap, driver, sim.FrozenTheta(n_theta), waypoints,
            sim.EpisodeLimits(max_time=float(c["duration"])),
            start=start_state(waypoints, float(cfg["episode"]["start_speed"]), params),
            params=params, seed=seed,
        )
        episode.meta.update({"category": category, "run": i, "seed": seed})
        try:
            episode.write(out / "runs" / f"run_{i:03d}")
        except OSError as exc:
            raise OutputError(f"cannot write run log under {out / 'runs'}: {exc}") from exc
        logs.append(episode)
        log.info("collect: run %d/%d (%s) done", i + 1, n_runs, category)
    st = dataset_statistics(logs)
    _write_text(out / "dataset_stats.json", json.dumps(st, indent=2))
    return st


# --- training -------------------------------------------------------------------------------


def to_run_logs(logs: Sequence[sim.EpisodeLog]) -> list[meta.RunLog]:
    return [meta.RunLog(lg.t, lg.x_meas, lg.u, lg.y, f"run{k}") for k, lg in enumerate(logs)]


def input_mask() -> np.ndarray:
    """Drop global position and heading from the network input."""
    mask = np.ones(nn.N_ETA)
    mask[[dyn.X, dyn.Y, dyn.YAW]] = 0.0
    return mask


def fit_initial_model(runs: Sequence[meta.RunLog], cfg: RunConfig) -> meta.Model:
    net_cfg = cfg["network"]
    psi = dyn.ParametricParams()
    net = nn.init_network(jax.random.PRNGKey(int(cfg["seed"])), int(net_cfg["n_hidden"]), int(net_cfg["n_in"]),
                          int(net_cfg["n_w"]), output_scale=float(net_cfg["output_scale"]))
    x = np.concatenate([r.x for r in runs])
    u = np.concatenate([r.u for r in runs])
    y = np.concatenate([r.y for r in runs])
    forces = jax.vmap(lambda a, b: dyn.tire_forces(a, b, psi))(jnp.asarray(x), jnp.asarray(u))
    etas = np.concatenate([x, u, y, np.asarray(forces)], axis=1)
    net = nn.with_normalizer(net, etas, input_mask())
    return meta.Model(net, psi, ad.default_filter_params(net, h=int(cfg["filter"]["h"])))


def _train_config(cfg: RunConfig, meta_phase: bool) -> meta.MetaTrainConfig:
    t = cfg["train"]
    epochs = int(t["meta_epochs"]) if meta_phase else int(t["pretrain_epochs"])
    return meta.MetaTrainConfig(
        tau=int(t["tau"]), horizon=int(t["horizon"]), batch_size=int(t["batch_size"]), epochs=epochs,
        pretrain_epochs=0 if meta_phase else epochs, stride=int(t["stride"]),
        lr_net=float(t["lr_net"]), lr_last_layer=float(t["lr_last_layer"]), lr_psi=float(t["lr_psi"]),
        lr_filter=float(t["lr_filter"]), beta=float(t["beta"]), h=int(cfg["filter"]["h"]),
        loss_ceiling=float(t["loss_ceiling"]), seed=int(cfg["seed"]), meta=meta_phase,
    )


def train(cfg: RunConfig, data_dir: Path, out: Path) -> dict:
    """Train the baseline (no adaptation) and then meta-train from it.

    Writes ``baseline.npz`` and ``meta.npz``; the baseline checkpoint carries
    the hand-tuned filter used by the ``adaptation`` configuration.
    """
    out = Path(out)
    cfg.write(out)
    logs = load_runs(data_dir)
    if not logs:
        raise InvalidDataError(f"dataset at {data_dir} contains no runs")
    runs = to_run_logs(logs)
    every = int(cfg["train"]["validation_every"])
    val_runs = [r for k, r in enumerate(runs) if every > 0 and k % every == every - 1]
    train_runs = [r for r in runs if all(r is not v for v in val_runs)]
    t = cfg["train"]
    tau, horizon, stride = int(t["tau"]), int(t["horizon"]), int(t["stride"])
    segments = meta.slice_dataset(train_runs, tau, horizon, stride)
    val_segments = meta.slice_dataset(val_runs, tau, horizon, stride) if val_runs else []
    if not segments:
        raise InvalidDataError("no training segment fits in the recorded runs")
    model0 = fit_initial_model(train_runs, cfg)

    t0 = time.perf_counter()
    baseline, hist_b = meta.train(segments, model0, _train_config(cfg, meta_phase=False))
    t_base = time.perf_counter() - t0
    save_checkpoint(out / "baseline.npz", baseline, {"phase": "baseline"})
    hist_b.write_csv(out / "history_baseline.csv")

    t0 = time.perf_counter()
    metamodel, hist_m = meta.train(segments, baseline, _train_config(cfg, meta_phase=True))
    t_meta = time.perf_counter() - t0
    save_checkpoint(out / "meta.npz", metamodel, {"phase": "meta"})
    hist_m.write_csv(out / "history_meta.csv")

    summary = {
        "train_segments": len(segments),
        "validation_segments": len(val_segments),
        "baseline_seconds": t_base,
        "meta_seconds": t_meta,
    }
    if val_segments:
        summary["validation_loss"] = {
            "baseline": float(np.mean(meta.evaluate_loss(val_segments, baseline, tau, horizon, adapt=False))),
            "adaptation": float(np.mean(meta.evaluate_loss(val_segments, baseline, tau, horizon, adapt=True))),
            "meta-adaptation": float(np.mean(meta.evaluate_loss(val_segments, metamodel, tau, horizon, adapt=True))),
        }
    _write_text(out / "train_summary.json", json.dumps(summary, indent=2))
    return summary


# --- evaluation metrics ------------------------------------------------------------------------


@jax.jit
def _predict_endpoints(x0s, controls, terrains, thetas, net, psi):
    return jax.vmap(lambda x0, us, ys, th: dyn.rollout(x0, us, ys, net, th, psi)[-1])(x0s, controls, terrains, thetas)


def prediction_errors(episode: sim.EpisodeLog, model: meta.Model, horizon_s: float = 5.0,
                      every_s: float = 1.0, max_starts: int | None = None) -> np.ndarray:
    """Endpoint distance of open-loop predictions started every ``every_s`` seconds.

    Each prediction starts from the measured state, replays the logged
    controls and terrain, and uses the ``theta`` that was live at its start;
    it is compared with the realized (true) position ``horizon_s`` later.
    """
    n_h = int(round(horizon_s / dyn.DT))
    n_every = int(round(every_s / dyn.DT))
    starts = np.arange(0, len(episode) - n_h, n_every)
    if starts.size == 0:
        return np.zeros(0)
    count = starts.size
    pad = max_starts if max_starts is not None and max_starts >= count else count
    idx = np.concatenate([starts, np.full(pad - count, starts[-1])])
    win = idx[:, None] + np.arange(n_h)[None]
    end = np.asarray(_predict_endpoints(
        jnp.asarray(episode.x_meas[idx]), jnp.asarray(episode.u[win]), jnp.asarray(episode.y[win]),
        jnp.asarray(episode.theta[idx]), model.net, model.psi,
    ))[:count]
    truth = episode.x_true[starts + n_h]
    err = np.hypot(end[:, dyn.X] - truth[:, dyn.X], end[:, dyn.Y] - truth[:, dyn.Y])
    return np.where(np.isfinite(err), err, np.nan)


def true_min_loading(episode: sim.EpisodeLog, params: sim.SimParams) -> np.ndarray:
    return np.array([
        min(sim.lateral_loading(x[dyn.VX], x[dyn.YAW_RATE], y[dyn.ROLL], params))
        for x, y in zip(episode.x_true, episode.y)
    ])


def rollover_metrics(min_loading: np.ndarray, cc: CostConfig, dt: float = dyn.DT) -> dict:
    """Crossings below ``r_limit``, time spent below it, and mean rollover cost."""
    below = np.asarray(min_loading) < cc.r_limit
    crossings = int(np.sum(below[1:] & ~below[:-1]) + (below[0] if below.size else 0))
    cost = rollover_penalty(np.asarray(min_loading), cc, xp=np)
    return {
        "crossings": crossings,
        "exceed_time": float(np.sum(below) * dt),
        "rollover_cost": float(np.mean(cost)) if below.size else 0.0,
    }


METRICS = ("completion_time", "average_speed", "prediction_error", "crossings", "exceed_time", "rollover_cost")
LOWER_IS_BETTER = {"completion_time": True, "average_speed": False, "prediction_error": True,
                   "crossings": True, "exceed_time": True, "rollover_cost": True}


def episode_metrics(episode: sim.EpisodeLog, model: meta.Model, cfg: RunConfig,
                    params: sim.SimParams = sim.DEPLOY_PARAMS) -> dict:
    p = cfg["prediction"]
    max_starts = int(cfg["episode"]["max_time"] / float(p["every"])) + 1
    errors = prediction_errors(episode, model, float(p["horizon"]), float(p["every"]), max_starts)
    finite = errors[np.isfinite(errors)]
    speed = np.hypot(episode.x_true[:, dyn.VX], episode.x_true[:, dyn.VY])
    return {
        "completed": bool(episode.completed),
        "completion_time": float(episode.completion_time),
        "average_speed": float(speed.mean()) if speed.size else 0.0,
        "prediction_error": float(finite.mean()) if finite.size else float("nan"),
        "prediction_count": int(errors.size),
        "prediction_diverged": int(errors.size - finite.size),
        **rollover_metrics(true_min_loading(episode, params), cfg.cost),
    }


def bootstrap_ci(values: Sequence[float], resamples: int = 10_000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean (degenerate for < 2 values)."""
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size < 2 or np.all(v == v[0]):
        return float(v.mean()), float(v.mean())
    res = stats.bootstrap((v,), np.mean, n_resamples=resamples, confidence_level=level,
                          method="percentile", random_state=np.random.default_rng(seed), vectorized=True)
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


def aggregate(rows: Sequence[dict], resamples: int = 10_000, level: float = 0.95, seed: int = 0) -> list[dict]:
    """Per (configuration, category) means with bootstrap intervals."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["configuration"], r["category"]), []).append(r)
    out = []
    for (conf, cat), grp in groups.items():
        agg = {"configuration": conf, "category": cat, "episodes": len(grp),
               "completed": int(sum(r["completed"] for r in grp)), "bootstrap_seed": seed}
        for m in METRICS:
            vals = np.array([r[m] for r in grp], dtype=float)
            fin = vals[np.isfinite(vals)]
            agg[m] = float(fin.mean()) if fin.size else float("nan")
            agg[f"{m}_ci"] = list(bootstrap_ci(vals, resamples, level, seed))
        out.append(agg)
    return out


ROW_FIELDS = ("configuration", "category", "episode", "seed", "completed", "completion_time", "average_speed",
              "prediction_error", "prediction_count", "prediction_diverged", "crossings", "exceed_time",
              "rollover_cost")


def read_metrics_csv(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open() as fh:
        for rec in csv.DictReader(fh):
            row = dict(rec)
            for k in ("episode", "seed", "prediction_count", "prediction_diverged", "crossings"):
                row[k] = int(row[k])
            for k in ("completion_time", "average_speed", "prediction_error", "exceed_time", "rollover_cost"):
                row[k] = float(row[k])
            row["completed"] = row["completed"] == "True"
            rows.append(row)
    return rows


def format_report(aggs: Sequence[dict], title: str = "Evaluation") -> str:
    lines = [title, ""]
    header = f"{'configuration':<16} " + " ".join(f"{m:>24}" for m in METRICS)
    for cat in dict.fromkeys(a["category"] for a in aggs):
        lines += [f"[{cat}]", header]
        for a in (a for a in aggs if a["category"] == cat):
            cells = []
            for m in METRICS:
                lo, hi = a[f"{m}_ci"]
                cells.append(f"{a[m]:8.3f} [{lo:6.2f},{hi:6.2f}]")
            lines.append(f"{a['configuration']:<16} " + " ".join(f"{c:>24}" for c in cells))
        lines.append("")
    return "\n".join(lines)


def make_adapter(configuration: str, model: meta.Model, cfg: RunConfig):
    if configuration == "baseline":
        return sim.FrozenTheta(model.net.n_theta)
    if configuration == "sliding-lsq":
        lsq = cfg["lsq"]
        return ad.SlidingLSQAdapter(model.net, model.psi, h=int(cfg["filter"]["h"]), window=int(lsq["window"]),
                                    ridge=float(lsq["ridge"]))
    fp = model.fp
    fp = ad.FilterParams(fp.p0, fp.q, fp.r, fp.eps, 1.0, int(cfg["filter"]["h"]))
    return ad.OnlineAdapter(model.net, model.psi, fp)


def load_models(checkpoint: str | Path, configurations: Sequence[str]) -> dict[str, meta.Model]:
    checkpoint = Path(checkpoint)
    needed = {"meta.npz" if c == "meta-adaptation" else "baseline.npz" for c in configurations}
    models = {}
    for name in sorted(needed):
        path = checkpoint / name if checkpoint.is_dir() else checkpoint
        if not path.exists():
            raise MissingInputError(f"checkpoint not found: {path}")
        models[name] = load_checkpoint(path)[0]
    return {c: models["meta.npz" if c == "meta-adaptation" else "baseline.npz"] for c in configurations}


def evaluate(cfg: RunConfig, checkpoint: str | Path, out: Path, maps_dir: Path | None = None,
             progress=None) -> dict:
    """Run every (category, configuration, episode) and write the metrics files."""
    out = Path(out)
    cfg.write(out)
    models = load_models(checkpoint, cfg["configurations"])
    waypoints = course_waypoints(cfg)
    limits = cfg.limits
    rows, plot_traj, plot_theta = [], [], []
    for cat in cfg["map_categories"]:
        tmap = evaluation_map(cfg, cat, maps_dir)
        start = start_state(waypoints, float(cfg["episode"]["start_speed"]), sim.DEPLOY_PARAMS)
        for conf in cfg["configurations"]:
            model = models[conf]
            controller = MppiController(model.net, model.psi, cfg.mppi, cfg.cost)
            for e, seed in enumerate(cfg.episode_seeds(cat)):
                t0 = time.perf_counter()
                adapter = make_adapter(conf, model, cfg)
                episode = sim.run_episode(tmap, controller, adapter, waypoints, limits, start,
                                          sim.DEPLOY_PARAMS, seed)
                row = {"configuration": conf, "category": cat, "episode": e, "seed": seed,
                       **episode_metrics(episode, model, cfg)}
                rows.append(row)
                if cfg["save_episode_logs"]:
                    episode.write(out / "episodes" / f"{conf}_{cat}_{e:02d}")
                for k in range(0, len(episode), 5):
                    x = episode.x_true[k]
                    plot_traj.append((conf, cat, e, f"{episode.t[k]:.2f}", f"{x[dyn.X]:.3f}", f"{x[dyn.Y]:.3f}"))
                    plot_theta.append((conf, cat, e, f"{episode.t[k]:.2f}",
                                       f"{float(np.linalg.norm(episode.theta[k])):.6g}"))
                log.info("evaluate %s/%s episode %d: %.1fs wall, pred err %.2f m", cat, conf, e,
                         time.perf_counter() - t0, row["prediction_error"])
                if progress is not None:
                    progress(row)

    b = cfg["bootstrap"]
    aggs = aggregate(rows, int(b["resamples"]), float(b["level"]), int(cfg["seed"]))
    _write_csv(out / "metrics.csv", ROW_FIELDS, ([r[k] for k in ROW_FIELDS] for r in rows))
    report = {"episodes": rows, "aggregates": aggs, "bootstrap": b, "map_categories": cfg["map_categories"]}
    _write_text(out / "metrics.json", json.dumps(report, indent=2))
    _write_text(out / "report.txt", format_report(aggs))
    _write_csv(out / "plotdata" / "trajectories.csv", ("configuration", "category", "episode", "t", "x", "y"),
               plot_traj)
    _write_csv(out / "plotdata" / "theta_norm.csv", ("configuration", "category", "episode", "t", "theta_norm"),
               plot_theta)
    return report


# --- comparison --------------------------------------------------------------------------------------


def load_report(path: str | Path) -> dict:
    path = Path(path)
    f = path / "metrics.json" if path.is_dir() else path
    if not f.exists():
        raise MissingInputError(f"report not found: {f}")
    return json.loads(f.read_text())


def compare(report_paths: Sequence[str | Path], out: Path, labels: Sequence[str] | None = None) -> list[dict]:
    """Side-by-side table per category with deltas to the first report and best flags."""
    if len(report_paths) < 2:
        raise ConfigError("compare needs at least two reports")
    labels = list(labels) if labels else [Path(p).name or f"report{k}" for k, p in enumerate(report_paths)]
    if len(set(labels)) != len(labels):
        labels = [f"{lab}#{k}" for k, lab in enumerate(labels)]
    reports = [load_report(p) for p in report_paths]
    cats = [sorted({a["category"] for a in r["aggregates"]}) for r in reports]
    if any(c != cats[0] for c in cats):
        detail = "; ".join(f"{lab}: {c}" for lab, c in zip(labels, cats))
        raise InvalidDataError(f"map categories differ between reports: {detail}")

    table = []
    for cat in cats[0]:
        rows = [dict(report=lab, **a) for lab, r in zip(labels, reports) for a in r["aggregates"]
                if a["category"] == cat]
        # Deltas are taken against the same configuration in the first report.
        refs = {}
        for r in rows:
            refs.setdefault(r["configuration"], r)
        for m in METRICS:
            vals = np.array([r[m] for r in rows], dtype=float)
            best = np.nanmin(vals) if LOWER_IS_BETTER[m] else np.nanmax(vals)
            for r in rows:
                r[f"{m}_delta"] = r[m] - refs[r["configuration"]][m]
                r[f"{m}_best"] = bool(r[m] == best)
        table.extend(rows)

    out = Path(out)
    header = ["category", "report", "configuration"]
    for m in METRICS:
        header += [m, f"{m}_ci_low", f"{m}_ci_high", f"{m}_delta", f"{m}_best"]
    _write_csv(out / "comparison.csv", header, (
        [r["category"], r["report"], r["configuration"]]
        + [v for m in METRICS for v in (r[m], r[f"{m}_ci"][0], r[f"{m}_ci"][1], r[f"{m}_delta"], r[f"{m}_best"])]
        for r in table
    ))
    _write_text(out / "comparison.json", json.dumps(table, indent=2))
    lines = ["Comparison (* marks the best value per column)", ""]
    for cat in cats[0]:
        lines.append(f"[{cat}]")
        lines.append(f"{'report':<20} {'configuration':<16} " + " ".join(f"{m:>18}" for m in METRICS))
        for r in (r for r in table if r["category"] == cat):
            cells = [f"{r[m]:9.3f}{'*' if r[f'{m}_best'] else ' '} ({r[f'{m}_delta']:+.2f})" for m in METRICS]
            lines.append(f"{r['report']:<20} {r['configuration']:<16} " + " ".join(f"{c:>18}" for c in cells))
        lines.append("")
    _write_text(out / "comparison.txt", "\n".join(lines))

    for name in ("trajectories.csv", "theta_norm.csv"):
        merged = []
        head = None
        for lab, p in zip(labels, report_paths):
            src = (Path(p) if Path(p).is_dir() else Path(p).parent) / "plotdata" / name
            if not src.exists():
                continue
            with src.open() as fh:
                rdr = csv.reader(fh)
                h = next(rdr)
                head = ["report", *h]
                merged.extend([lab, *row] for row in rdr)
        if head is not None:
            _write_csv(out / "plotdata" / name, head, merged)
    return table
