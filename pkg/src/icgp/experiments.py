"""End-to-end experiment pipeline: collect, train, infer, evaluate.

Stages write their artifacts into one output directory and record SHA-256
digests in ``manifest.json``. A stage whose inputs and outputs match the
manifest is skipped, so rerunning a finished pipeline rewrites nothing.
Wall-clock timings go to ``timings.json``, the only artifact that is not
reproducible byte for byte.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dataset import (INFERENCE_NS, ContextParams, GameFamily, algorithm_rng,
                      collect_pretraining, derive_seed, read_jsonl, run_context, write_jsonl)
from .equilibrium import marginals, ne_gap, running_average_curve
from .pretrain import (LossReport, TrainConfig, infer_play, load_checkpoint, save_checkpoint,
                       train)
from .v_learning import output_marginal_curve

TRAIN_NS = 3
STAGES = ("collect", "train", "infer", "eval")
CSV_HEADER = ["series", "episode", "mean_gap", "stderr"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "decentralized"
    A: int = 5
    B: int = 5
    S: int = 1
    H: int = 1
    G: int = 3000
    n_pretrain: tuple = (10, 20)
    inference_games: int = 10
    seed: int = 0
    train_seeds: tuple = (0, 1)
    context: str = ""
    c_vi: float = 1.0
    c_v: float = 1.0
    delta: Optional[float] = None
    n_mwu: Optional[int] = None
    eta: Optional[float] = None
    epochs: int = 100
    batch_size: int = 32
    lr: float = 5e-4
    optimizer: str = "adaptive"
    layers: int = 2
    heads: int = 4
    hidden: int = 32
    scratch: int = 8
    window: Optional[int] = None
    prompt_window: Optional[int] = None
    round2: bool = False
    final_frac: float = 0.1

    def __post_init__(self):
        if self.mode not in ("decentralized", "centralized"):
            raise ConfigError(f"mode must be decentralized or centralized, got {self.mode!r}")
        if min(self.A, self.B, self.S, self.H, self.G, self.inference_games) < 1:
            raise ConfigError("dimensions and game counts must be positive")
        if not self.n_pretrain or min(self.n_pretrain) < 1:
            raise ConfigError("n_pretrain must list positive counts")
        if not self.train_seeds:
            raise ConfigError("train_seeds must not be empty")
        ctx = self.context_tag
        if self.mode == "centralized" and ctx != "vi_ulcb":
            raise ConfigError("centralized mode uses the vi_ulcb context algorithm")
        if self.mode == "decentralized" and ctx not in ("exp3", "v_learning"):
            raise ConfigError("decentralized mode uses exp3 or v_learning")
        if ctx == "exp3" and (self.H != 1 or self.S != 1):
            raise ConfigError("exp3 needs a matrix game (H = S = 1)")
        if not 0 < self.final_frac <= 1:
            raise ConfigError("final_frac must lie in (0, 1]")
        self.train_config(0)  # validates training fields

    @property
    def context_tag(self) -> str:
        if self.context:
            return self.context
        if self.mode == "centralized":
            return "vi_ulcb"
        return "exp3" if self.H == 1 and self.S == 1 else "v_learning"

    @property
    def family(self) -> GameFamily:
        return GameFamily(self.A, self.B, self.S, self.H, self.G)

    @property
    def context_params(self) -> ContextParams:
        return ContextParams(self.c_vi, self.c_v, self.delta, self.n_mwu, self.eta)

    @property
    def roles(self) -> tuple[str, ...]:
        return ("centralized",) if self.mode == "centralized" else ("decentralized_max",
                                                                    "decentralized_min")

    def train_config(self, seed: int) -> TrainConfig:
        try:
            return TrainConfig(self.epochs, self.batch_size, self.lr, self.optimizer, seed,
                               "softmax", self.layers, self.heads, self.hidden, self.scratch,
                               self.window)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def canonical(self) -> str:
        d = dataclasses.asdict(self)
        d["context"] = self.context_tag
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _parse_value(raw: str, ftype: str, key: str):
    raw = raw.strip()
    try:
        if ftype.startswith("Optional"):
            if raw.lower() in ("", "none", "null"):
                return None
            ftype = ftype[len("Optional["):-1]
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "tuple":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config(text: str, **overrides) -> ExperimentConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    types = {f.name: str(f.type) for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (x.strip() for x in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(raw, types[key], key)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), **overrides)


# --- manifest ----------------------------------------------------------------------------------

def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Manifest:
    def __init__(self, out: Path, cfg: ExperimentConfig):
        self.out, self.cfg = out, cfg
        self.path = out / "manifest.json"
        self.data = {"config": json.loads(cfg.canonical()), "config_sha256": cfg.digest(),
                     "stages": {}}
        if self.path.exists():
            old = json.loads(self.path.read_text())
            if old.get("config_sha256") == cfg.digest():
                self.data["stages"] = old.get("stages", {})

    def stage_key(self, stage: str, inputs: list[str]) -> str:
        h = hashlib.sha256(self.data["config_sha256"].encode() + stage.encode())
        for name in inputs:
            h.update(name.encode() + _sha(self.out / name).encode())
        return h.hexdigest()

    def is_done(self, stage: str, key: str) -> bool:
        rec = self.data["stages"].get(stage)
        if not rec or rec.get("key") != key:
            return False
        for name, digest in rec["artifacts"].items():
            p = self.out / name
            if not p.exists() or _sha(p) != digest:
                return False
        return True

    def mark(self, stage: str, key: str, artifacts: list[str], extra: Optional[dict] = None):
        rec = {"key": key, "done": True, "artifacts": {n: _sha(self.out / n) for n in artifacts}}
        if extra:
            rec.update(extra)
        self.data["stages"][stage] = rec
        self.write()

    def write(self):
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def artifacts(self, stage: str) -> list[str]:
        return list(self.data["stages"].get(stage, {}).get("artifacts", {}))


# --- helpers ---------------------------------------------------------------------------------

def _workers() -> int:
    try:
        return max(1, int(os.environ.get("ICGP_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn: Callable, jobs: list) -> list:
    """Run jobs in a worker pool (``ICGP_THREADS``) and return results in job order."""
    n = _workers()
    if n == 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(n, len(jobs))) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def ckpt_name(n: int, train_seed: int, role: str) -> str:
    suffix = {"centralized": "joint", "decentralized_max": "max", "decentralized_min": "min"}[role]
    return f"ckpt-N{n}-seed{train_seed}-{suffix}.bin"


def inference_games(cfg: ExperimentConfig):
    seeds = [derive_seed(cfg.seed, INFERENCE_NS, i) for i in range(cfg.inference_games)]
    return seeds, [cfg.family.sample(s) for s in seeds]


def _timings(out: Path, stage: str, seconds: float) -> None:
    p = out / "timings.json"
    data = json.loads(p.read_text()) if p.exists() else {}
    data[stage] = round(seconds, 3)
    p.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# --- gap curves --------------------------------------------------------------------------------

def matrix_gap_curve(R: np.ndarray, pol_max: np.ndarray, pol_min: np.ndarray) -> np.ndarray:
    """Running-average matrix NE gap at every round; policies are ``(T, A)`` and ``(T, B)``."""
    mu_bar = running_average_curve(pol_max)
    nu_bar = running_average_curve(pol_min)
    return np.max(nu_bar @ R.T, axis=1) - np.min(mu_bar @ R, axis=1)


def episode_tables(policies: np.ndarray, H: int) -> np.ndarray:
    """Reshape per-step ``(T, S, K...)`` policies into per-episode ``(G, H, S, K...)`` tables."""
    T = policies.shape[0]
    return policies.reshape((T // H, H) + policies.shape[1:])


def decentralized_gap_curve(game, pol_max: np.ndarray, pol_min: np.ndarray) -> np.ndarray:
    """Running-average policies per (h, s) scored by the exact NE gap."""
    H = game.H
    if H == 1 and game.S == 1:
        return matrix_gap_curve(game.reward[0, 0], pol_max[:, 0], pol_min[:, 0])
    mu = running_average_curve(episode_tables(pol_max, H))
    nu = running_average_curve(episode_tables(pol_min, H))
    return np.array([ne_gap(game, m, v) for m, v in zip(mu, nu)])


def centralized_gap_curve(game, joint_tables: np.ndarray) -> np.ndarray:
    """Per-episode NE gap of the marginals of ``(G, H, S, A, B)`` joint tables."""
    out = np.empty(joint_tables.shape[0])
    for g, table in enumerate(joint_tables):
        mu, nu = marginals(table)
        out[g] = ne_gap(game, mu, nu)
    return out


def baseline_gaps(cfg: ExperimentConfig, game_seed: int, game) -> np.ndarray:
    fam, tag = cfg.family, cfg.context_tag
    run = run_context(game, game_seed, tag, fam, cfg.context_params, algorithm_rng(game_seed),
                      keep_policies=True)
    if tag == "vi_ulcb":
        return centralized_gap_curve(game, run.policies["joint"])
    if tag == "exp3":
        return decentralized_gap_curve(game, run.policies["max"], run.policies["min"])
    mx, mn = run.context.players
    mu = output_marginal_curve(mx.history, fam.G, cfg.A)
    nu = output_marginal_curve(mn.history, fam.G, cfg.B)
    return np.array([ne_gap(game, m, v) for m, v in zip(mu, nu)])


def transformer_gaps(cfg: ExperimentConfig, ckpts: list[str], game_seeds: list[int], n: int,
                     train_seed: int) -> np.ndarray:
    params = [load_checkpoint(p) for p in ckpts]
    games = [cfg.family.sample(s) for s in game_seeds]
    rngs = [np.random.default_rng([s, n, train_seed]) for s in game_seeds]
    if cfg.mode == "centralized":
        res = infer_play(games, cfg.G, rngs, params_joint=params[0], window=cfg.prompt_window)
        return np.stack([centralized_gap_curve(g, episode_tables(res.policies["joint"][k], cfg.H))
                         for k, g in enumerate(games)])
    res = infer_play(games, cfg.G, rngs, params_max=params[0], params_min=params[1],
                     window=cfg.prompt_window)
    return np.stack([decentralized_gap_curve(g, res.policies["max"][k], res.policies["min"][k])
                     for k, g in enumerate(games)])


# --- stages ----------------------------------------------------------------------------------

def stage_collect(cfg: ExperimentConfig, out: Path, man: Manifest) -> None:
    key = man.stage_key("collect", [])
    if man.is_done("collect", key):
        return
    t0 = time.perf_counter()
    records = collect_pretraining(cfg.family, cfg.context_tag, max(cfg.n_pretrain), cfg.seed,
                                  cfg.context_params)
    write_jsonl(records, out / "dataset.jsonl", round2=cfg.round2)
    man.mark("collect", key, ["dataset.jsonl"], {"records": len(records)})
    _timings(out, "collect", time.perf_counter() - t0)


def _train_job(cfg: ExperimentConfig, dataset: str, n: int, train_seed: int, role_idx: int,
               path: str) -> str:
    records = read_jsonl(dataset)[:n]
    role = cfg.roles[role_idx]
    seed = derive_seed(train_seed, TRAIN_NS, role_idx) % (2 ** 63)
    params, report = train(cfg.train_config(seed), records, role, G=cfg.G)
    save_checkpoint(params, path)
    return report.to_csv()


def stage_train(cfg: ExperimentConfig, out: Path, man: Manifest) -> None:
    key = man.stage_key("train", ["dataset.jsonl"])
    if man.is_done("train", key):
        return
    t0 = time.perf_counter()
    jobs, names = [], []
    for n in cfg.n_pretrain:
        for ts in cfg.train_seeds:
            for ri, role in enumerate(cfg.roles):
                name = ckpt_name(n, ts, role)
                names.append((n, ts, role, name))
                jobs.append((cfg, str(out / "dataset.jsonl"), n, ts, ri, str(out / name)))
    logs = _map(_train_job, jobs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["N", "train_seed", "role", "epoch", "mean_nll"])
    for (n, ts, role, _), log in zip(names, logs):
        for row in list(csv.reader(io.StringIO(log)))[1:]:
            w.writerow([n, ts, role, row[0], row[1]])
    (out / "training-log.csv").write_text(buf.getvalue())
    window = cfg.window if cfg.window is not None else 2 * cfg.G * cfg.H
    man.mark("train", key, [x[3] for x in names] + ["training-log.csv"],
             {"truncation_window_tokens": min(window, 2 * cfg.G * cfg.H)})
    _timings(out, "train", time.perf_counter() - t0)


def series_labels(cfg: ExperimentConfig) -> list[str]:
    return [f"context-{cfg.context_tag}"] + [f"transformer-N{n}" for n in cfg.n_pretrain]


def _gap_file(label: str, train_seed: Optional[int] = None) -> str:
    return f"gaps-{label}.npy" if train_seed is None else f"gaps-{label}-seed{train_seed}.npy"


def _baseline_job(cfg, game_seed):
    return baseline_gaps(cfg, game_seed, cfg.family.sample(game_seed))


def stage_infer(cfg: ExperimentConfig, out: Path, man: Manifest, force: bool = False) -> None:
    ckpts = [ckpt_name(n, ts, r) for n in cfg.n_pretrain for ts in cfg.train_seeds
             for r in cfg.roles]
    missing = [c for c in ckpts if not (out / c).exists()]
    if missing:
        raise FileNotFoundError(f"missing checkpoint(s): {', '.join(missing)}")
    key = man.stage_key("infer", ckpts)
    if not force and man.is_done("infer", key):
        return
    t0 = time.perf_counter()
    seeds, _ = inference_games(cfg)
    base = np.stack(_map(_baseline_job, [(cfg, s) for s in seeds]))
    files = [_gap_file(series_labels(cfg)[0])]
    np.save(out / files[0], base)
    jobs, targets = [], []
    for n in cfg.n_pretrain:
        for ts in cfg.train_seeds:
            paths = [str(out / ckpt_name(n, ts, r)) for r in cfg.roles]
            jobs.append((cfg, paths, seeds, n, ts))
            targets.append(_gap_file(f"transformer-N{n}", ts))
    for name, gaps in zip(targets, _map(transformer_gaps, jobs)):
        np.save(out / name, gaps)
        files.append(name)
    prompt = cfg.prompt_window or cfg.window or 2 * cfg.G * cfg.H
    man.mark("infer", key, files, {"prompt_window_tokens": min(prompt, 2 * cfg.G * cfg.H)})
    _timings(out, "infer", time.perf_counter() - t0)


def gather_series(cfg: ExperimentConfig, out: Path) -> dict[str, np.ndarray]:
    """Per-series gap matrices ``(runs, G)``: games for the baseline, seeds x games otherwise."""
    labels = series_labels(cfg)
    series = {labels[0]: np.load(out / _gap_file(labels[0]))}
    for n, label in zip(cfg.n_pretrain, labels[1:]):
        series[label] = np.concatenate([np.load(out / _gap_file(label, ts))
                                        for ts in cfg.train_seeds])
    return series


def curves_csv(series: dict[str, np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for label, gaps in series.items():
        gaps = np.maximum(gaps, 0.0)
        mean = gaps.mean(axis=0)
        se = gaps.std(axis=0, ddof=1) / np.sqrt(gaps.shape[0]) if gaps.shape[0] > 1 \
            else np.zeros_like(mean)
        for g in range(gaps.shape[1]):
            w.writerow([label, g + 1, f"{mean[g]:.10g}", f"{se[g]:.10g}"])
    return buf.getvalue()


def read_curves(path) -> dict[str, dict[str, np.ndarray]]:
    out: dict[str, dict[str, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header")
        for label, ep, mean, se in reader:
            d = out.setdefault(label, {"episode": [], "mean_gap": [], "stderr": []})
            d["episode"].append(int(ep))
            d["mean_gap"].append(float(mean))
            d["stderr"].append(float(se))
    return {k: {c: np.asarray(v) for c, v in d.items()} for k, d in out.items()}


def stage_eval(cfg: ExperimentConfig, out: Path, man: Manifest) -> None:
    inputs = man.artifacts("infer")
    if not inputs:
        raise FileNotFoundError("no inference results; run the infer stage first")
    key = man.stage_key("eval", inputs)
    if man.is_done("eval", key):
        return
    series = gather_series(cfg, out)
    (out / "curves.csv").write_text(curves_csv(series))
    means = {k: np.maximum(v, 0).mean(axis=0) for k, v in series.items()}
    title = f"{cfg.mode} NE gap, {cfg.A}x{cfg.B}, S={cfg.S}, H={cfg.H}, G={cfg.G}"
    (out / "curves.svg").write_text(svg_polylines(means, title))
    man.mark("eval", key, ["curves.csv", "curves.svg"], {"summary": summarize(cfg, series)})


def summarize(cfg: ExperimentConfig, series: dict[str, np.ndarray]) -> dict:
    k = max(1, int(round(cfg.final_frac * cfg.G)))
    out = {}
    for label, gaps in series.items():
        mean = np.maximum(gaps, 0).mean(axis=0)
        out[label] = {"first_window_mean": float(np.round(mean[:k].mean(), 12)),
                      "final_window_mean": float(np.round(mean[-k:].mean(), 12))}
    return out


def run_pipeline(cfg: ExperimentConfig, out, stages=STAGES) -> Manifest:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest(out, cfg)
    man.write()
    steps = {"collect": stage_collect, "train": stage_train, "infer": stage_infer,
             "eval": stage_eval}
    for name in stages:
        steps[name](cfg, out, man)
    return man


# --- SVG ------------------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_polylines(series: dict[str, np.ndarray], title: str, width: int = 720,
                  height: int = 420) -> str:
    """A minimal line chart: one polyline per series, shared linear axes, legend."""
    left, right, top, bottom = 60, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    n = max(len(v) for v in series.values())
    ymax = max(float(np.max(v)) for v in series.values()) or 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for k in range(5):
        y = top + ph - ph * k / 4
        parts.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="11">'
                     f'{ymax * k / 4:.3f}</text>')
        x = left + pw * k / 4
        parts.append(f'<text x="{x:.1f}" y="{top + ph + 16}" text-anchor="middle" font-size="11">'
                     f'{int(round(1 + (n - 1) * k / 4))}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" '
                 f'font-size="12">episode</text>')
    stride = max(1, n // 1000)
    for c, (label, ys) in enumerate(series.items()):
        color = _COLORS[c % len(_COLORS)]
        idx = np.arange(0, len(ys), stride)
        pts = " ".join(f"{left + pw * i / max(n - 1, 1):.1f},{top + ph - ph * ys[i] / ymax:.1f}"
                       for i in idx)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        ly = top + 12 + 16 * c
        parts.append(f'<line x1="{left + pw - 150}" y1="{ly}" x2="{left + pw - 130}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw - 125}" y="{ly + 4}" font-size="11">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
