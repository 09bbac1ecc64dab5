"""Command-line entry points: gen-data, train, eval, sweep and trace.

Every command reads an optional JSON config file; ``--kebab-case`` flags
override file values. Outputs land under ``--out-dir``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .episode import GENEROUS, AuditError, Budgets, EpisodeConfig, Prices, load_trace, replay_trace
from .harness import (Dataset, LoadStats, SyntheticTaskConfig, evaluate, generate_tasks, load_metaqa,
                      reference_means, write_metaqa)
from .kg import load_triples
from .lcmappo import (METRIC_COLUMNS, Learner, TrainConfig, load_learner, parameter_checksum, save_learner,
                      train)
from .policy import RandomPolicy
from . import plotting

log = logging.getLogger("clause")

COMMANDS = ("gen-data", "train", "eval", "sweep", "trace")
ABLATIONS = (None, "no_architect", "no_navigator", "no_curator")
SWEEP_AXES = ("beta_edge", "beta_lat", "beta_tok", "lambda_edge", "lambda_lat", "lambda_tok")
# TrainConfig fields owned by the run config itself.
_RUN_OWNED = {"mode", "budgets", "seed", "lambda_init"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "train"
    out_dir: str = "runs/default"
    seed: int = 0
    mode: str = "cap"
    beta_edge: int | None = None
    beta_lat: int | None = None
    beta_tok: int | None = None
    lambda_edge: float | None = None
    lambda_lat: float | None = None
    lambda_tok: float | None = None
    # data
    dataset: str = "synthetic"
    kb: str | None = None
    questions: str | None = None
    eval_questions: str | None = None
    n_entities: int = 200
    n_relations: int = 9
    hops: int = 2
    n_examples: int = 1200
    distractor_multiplier: float = 0.25
    branching: int = 1
    template: int = 0
    n_train: int = 1000
    # training and episodes
    train: dict[str, Any] = field(default_factory=dict)
    episode: dict[str, Any] = field(default_factory=dict)
    # eval / sweep / trace
    checkpoint: str | None = None
    eval_n: int = 200
    greedy: bool = True
    ablation: str | None = None
    traces: int = 0
    sweep_axis: str | None = None
    sweep_values: list[float] = field(default_factory=list)
    sweep_seeds: int = 1
    trace: str | None = None

    @property
    def budgets(self) -> Budgets | None:
        vals = (self.beta_edge, self.beta_lat, self.beta_tok)
        return None if any(v is None for v in vals) else Budgets(*map(int, vals))

    @property
    def prices(self) -> Prices | None:
        vals = (self.lambda_edge, self.lambda_lat, self.lambda_tok)
        return None if any(v is None for v in vals) else Prices(*map(float, vals))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def train_config(self) -> TrainConfig:
        kw = dict(self.train)
        b = self.budgets or GENEROUS
        kw.update(mode=self.mode, budgets=(b.edge, b.lat, b.tok), seed=self.seed)
        if self.prices is not None:
            kw["lambda_init"] = (self.prices.edge, self.prices.lat, self.prices.tok)
        for k in ("eta", "fixed_lambda", "cost_scale", "pid"):
            if kw.get(k) is not None:
                kw[k] = tuple(kw[k])
        return TrainConfig(**kw)

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(**self.episode)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_EPISODE_FIELDS = {f.name for f in fields(EpisodeConfig)}


def _validate(cfg: RunConfig) -> RunConfig:
    if cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.command!r}")
    if cfg.mode not in ("cap", "price"):
        raise ConfigError("mode must be cap or price")
    lam = (cfg.lambda_edge, cfg.lambda_lat, cfg.lambda_tok)
    beta = (cfg.beta_edge, cfg.beta_lat, cfg.beta_tok)
    if cfg.mode == "cap":
        if any(v is not None for v in lam):
            raise ConfigError("mode/field mismatch: cap mode takes budgets (beta_*), not prices (lambda_*)")
        if all(v is None for v in beta):
            cfg.beta_edge, cfg.beta_lat, cfg.beta_tok = GENEROUS.edge, GENEROUS.lat, GENEROUS.tok
    else:
        if any(v is None for v in lam):
            raise ConfigError("mode/field mismatch: price mode requires lambda_edge, lambda_lat and lambda_tok")
    if any(v is not None for v in beta) and any(v is None for v in beta):
        raise ConfigError("budgets must set all of beta_edge, beta_lat, beta_tok")
    if any(v is not None and v < 0 for v in (*lam, *beta)):
        raise ConfigError("budgets and prices must be nonnegative")
    unknown = set(cfg.train) - (set(_TRAIN_FIELDS) - _RUN_OWNED)
    if unknown:
        raise ConfigError(f"unknown train keys: {sorted(unknown)}")
    unknown = set(cfg.episode) - _EPISODE_FIELDS
    if unknown:
        raise ConfigError(f"unknown episode keys: {sorted(unknown)}")
    if cfg.dataset not in ("synthetic", "metaqa"):
        raise ConfigError("dataset must be synthetic or metaqa")
    if cfg.dataset == "metaqa" and (cfg.kb is None or cfg.questions is None):
        raise ConfigError("metaqa dataset requires kb and questions")
    if cfg.ablation not in ABLATIONS:
        raise ConfigError(f"ablation must be one of {ABLATIONS[1:]}")
    if cfg.sweep_axis is not None:
        if cfg.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
        if len(cfg.sweep_values) < 2 or any(v < 0 for v in cfg.sweep_values):
            raise ConfigError("a sweep needs at least two nonnegative values")
    try:
        cfg.train_config()
        cfg.episode_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _coerce(name: str, value: str) -> Any:
    """Turn a flag string into the type of the matching config field."""
    if name in _FIELDS:
        tp = str(_FIELDS[name].type)
    elif name in _TRAIN_FIELDS:
        tp = str(_TRAIN_FIELDS[name].type)
    else:
        tp = "str"
    if value.lower() in ("none", "null") and "None" in tp:
        return None
    if tp.startswith("bool"):
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"--{name.replace('_', '-')} expects a boolean")
        return value.lower() in ("true", "1", "yes")
    if tp.startswith("int"):
        return int(value)
    if tp.startswith("float"):
        return float(value)
    if tp.startswith(("tuple", "list")):
        return [float(v) for v in value.split(",")]
    return value


def parse_config(file: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Load a JSON config, apply overrides (flags win), fill defaults and validate."""
    data: dict[str, Any] = {}
    if file is not None:
        path = Path(file)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        data = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    unknown = set(data) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    for k, v in (overrides or {}).items():
        if k in _FIELDS:
            data[k] = v
        elif k in _TRAIN_FIELDS and k not in _RUN_OWNED:
            data.setdefault("train", {})[k] = v
        elif k in _EPISODE_FIELDS:
            data.setdefault("episode", {})[k] = v
        else:
            raise ConfigError(f"unknown option {k}")
    return _validate(RunConfig(**data))


# --- datasets -------------------------------------------------------------

def synthetic_config(cfg: RunConfig) -> SyntheticTaskConfig:
    return SyntheticTaskConfig(cfg.n_entities, cfg.n_relations, cfg.hops, cfg.n_examples,
                               cfg.distractor_multiplier, cfg.branching, cfg.template, cfg.seed)


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """(train, eval) splits for the configured dataset."""
    if cfg.dataset == "synthetic":
        return generate_tasks(synthetic_config(cfg)).split(cfg.n_train)
    g = load_triples(cfg.kb)
    stats = LoadStats()
    tr = load_metaqa(g, cfg.questions, cfg.hops, stats)
    if cfg.eval_questions:
        ev = load_metaqa(g, cfg.eval_questions, cfg.hops, stats)
        return tr, ev
    log.info("loaded %d questions (%d dropped)", stats.kept, stats.total - stats.kept)
    return tr.split(min(cfg.n_train, len(tr.examples)))


# --- commands -------------------------------------------------------------

def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    return out


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[dict[str, Any]]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(header), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items() if k in header})
    path.write_text(buf.getvalue(), encoding="utf-8")


def cmd_gen_data(cfg: RunConfig) -> int:
    out = _out(cfg)
    ds = generate_tasks(synthetic_config(cfg))
    tr, ev = ds.split(cfg.n_train)
    write_metaqa(ds, out / "kb.txt", out / "train_questions.txt", tr.examples)
    (out / "eval_questions.txt").write_text(
        "".join(f"{ex.question}\t{'|'.join(ex.answers)}\n" for ex in ev.examples), encoding="utf-8")
    print(f"wrote {ds.graph.n_triples} triples, {len(tr.examples)} train and {len(ev.examples)} eval questions to {out}")
    return 0


def _policy(cfg: RunConfig) -> tuple[Any, Learner | None]:
    if cfg.checkpoint is None:
        raise ConfigError("this command needs --checkpoint (a trained checkpoint.bin or 'random')")
    if cfg.checkpoint == "random":
        return RandomPolicy(), None
    if not Path(cfg.checkpoint).exists():
        raise ConfigError(f"checkpoint {cfg.checkpoint} does not exist")
    ln, _ = load_learner(cfg.checkpoint)
    return ln.actors, ln


def _eval_prices(cfg: RunConfig, ln: Learner | None) -> Prices:
    if cfg.mode == "price":
        return cfg.prices  # type: ignore[return-value]
    return Prices(*map(float, ln.prices())) if ln is not None else Prices()


def cmd_train(cfg: RunConfig) -> int:
    out = _out(cfg)
    tr, ev = load_datasets(cfg)
    tc = cfg.train_config()
    _, rows = _run_training(tc, tr, cfg, out)
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
    plotting.training_curves(rows, out / "training_curves.png", tc.budgets)
    print(f"trained {len(rows)} iterations; metrics in {out / 'metrics.csv'}, checkpoint in {out / 'checkpoint.bin'}")
    return 0


def _run_training(tc: TrainConfig, tr: Dataset, cfg: RunConfig, out: Path):
    ln, rows = train(tc, tr, cfg.episode_config())
    save_learner(out / "checkpoint.bin", ln, {"run": cfg.to_dict()})
    return ln, rows


def cmd_eval(cfg: RunConfig) -> int:
    out = _out(cfg)
    _, ev = load_datasets(cfg)
    policy, ln = _policy(cfg)
    traces: list[dict[str, Any]] = []
    budgets = cfg.budgets or GENEROUS
    econf = cfg.episode_config()
    order_n = min(cfg.eval_n, len(ev.examples))
    order = list(range(len(ev.examples))) if order_n >= len(ev.examples) else \
        [int(i) for i in np.random.default_rng(cfg.seed).permutation(len(ev.examples))[:order_n]]
    ref = reference_means(policy, ev, order, cfg.seed, cfg.greedy, econf)
    rep = evaluate(policy, ev, cfg.mode, budgets, _eval_prices(cfg, ln), n=cfg.eval_n, reference=ref, seed=cfg.seed,
                   greedy=cfg.greedy, config=econf, ablation=cfg.ablation, traces=traces)
    (out / "eval.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    (out / "eval.csv").write_text(rep.csv_header() + "\n" + rep.csv_row() + "\n", encoding="utf-8")
    if cfg.traces:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for i, t in enumerate(traces[: cfg.traces]):
            (tdir / f"episode_{i:04d}.json").write_text(json.dumps(t, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    plotting.constraint_comparison({cfg.ablation or "full": rep.to_dict()}, out / "eval.png")
    print(f"em={rep.em:.3f} feasibility={rep.feasibility:.3f} costs=({rep.c_edge:.2f}, {rep.c_lat:.2f}, {rep.c_tok:.1f})")
    return 0


def run_sweep(cfg: RunConfig, policy: Any = None, ln: Learner | None = None, dataset: Dataset | None = None
              ) -> tuple[list[dict[str, Any]], dict[str, Any]]:
    """Evaluate one checkpoint at every value of the swept axis; returns frontier rows and a summary."""
    if cfg.sweep_axis is None:
        raise ConfigError("sweep needs --sweep-axis and --sweep-values")
    if policy is None:
        policy, ln = _policy(cfg)
    ev = dataset if dataset is not None else load_datasets(cfg)[1]
    checksum = parameter_checksum(ln) if ln is not None else "random"
    axis = cfg.sweep_axis
    res = axis.split("_", 1)[1]
    rows: list[dict[str, Any]] = []
    for value in cfg.sweep_values:
        point = RunConfig(**{**cfg.to_dict(), axis: int(value) if axis.startswith("beta") else float(value)})
        if axis.startswith("beta") and point.mode == "cap":
            point.beta_edge = point.beta_edge if point.beta_edge is not None else GENEROUS.edge
        ems, costs, feas = [], [], []
        for s in range(cfg.sweep_seeds):
            rep = evaluate(policy, ev, point.mode, point.budgets or GENEROUS, _eval_prices(point, ln),
                           n=cfg.eval_n, reference={"c_edge": 1.0, "c_lat": 1.0, "c_tok": 1.0},
                           seed=cfg.seed + s, greedy=cfg.greedy, config=cfg.episode_config())
            ems.append(rep.em)
            costs.append([rep.c_edge, rep.c_lat, rep.c_tok])
            feas.append(rep.feasibility)
        if ln is not None and parameter_checksum(ln) != checksum:
            raise RuntimeError("policy parameters changed during the sweep")
        c = np.mean(costs, axis=0)
        rows.append({"axis": axis, "value": float(value), "em_mean": float(np.mean(ems)), "em_std": float(np.std(ems)),
                     "c_edge": float(c[0]), "c_lat": float(c[1]), "c_tok": float(c[2]),
                     "feasibility": float(np.mean(feas))})
    slopes = []
    for a, b in zip(rows, rows[1:]):
        dv = b["value"] - a["value"]
        slopes.append({"from": a["value"], "to": b["value"],
                       "slope": (b["em_mean"] - a["em_mean"]) / dv if dv else 0.0})
    k = ("edge", "lat", "tok").index(res)
    summary = {"axis": axis, "checksum": checksum, "slopes": slopes,
               "mean_lambda": float(ln.prices()[k]) if ln is not None else 0.0}
    return rows, summary


FRONTIER_COLUMNS = ("axis", "value", "em_mean", "em_std", "c_edge", "c_lat", "c_tok", "feasibility")


def cmd_sweep(cfg: RunConfig) -> int:
    out = _out(cfg)
    rows, summary = run_sweep(cfg)
    _write_csv(out / "frontier.csv", FRONTIER_COLUMNS, rows)
    (out / "sweep.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    plotting.frontier(rows, cfg.sweep_axis, out / "frontier.png")
    for r in rows:
        print(f"{r['axis']}={r['value']:g}: em={r['em_mean']:.3f} feasibility={r['feasibility']:.3f}")
    return 0


# --- trace rendering -------------------------------------------------------

def _edge_label(p: dict[str, Any]) -> str:
    names = p.get("names")
    if names:
        return f"{names[0]} --{names[1]}--> {names[2]}"
    return f"triple {p.get('triple')}"


def render_trace(trace: dict[str, Any]) -> str:
    """Per-round text rendering of a trace document (pure function of the document)."""
    events, final = load_trace(trace)
    lines = [f"question: {trace.get('question', '')}"]
    body = [e for e in events if e.kind != "init"]
    if events and events[0].kind == "init":
        init = events[0].payload
        lines.append(f"mode: {init.get('mode')}  budgets: {init.get('budgets')}  prices: {init.get('prices')}")
    if not body:
        lines.append("no actions")
    current = None
    titles = {"architect": "(1) architect", "navigator": "(2) navigator", "curator": "(3) curator"}
    section = None
    for e in body:
        if e.round != current:
            current = e.round
            section = None
            lines.append(f"== round {e.round} ==")
        if e.agent != section:
            section = e.agent
            lines.append(f"  {titles.get(e.agent, e.agent)}")
        p = e.payload
        if e.kind == "edit":
            lines.append(f"    {p['op']:<6} {_edge_label(p)}")
        elif e.kind == "hop":
            names = p.get("names") or ["?", "?", "?"]
            src, dst = p.get("from_name", p.get("from")), p.get("to_name", p.get("to"))
            arrow = f"-{names[1]}->" if names[0] == src else f"<-{names[1]}-"
            lines.append(f"    {src} {arrow} {dst}")
        elif e.kind == "backtrack":
            lines.append(f"    backtrack along triple {p['triple']} to node {p.get('to')}")
        elif e.kind == "curate":
            lines.append(f"    select [{p['tok']} tok] {p.get('text', p.get('snippet'))}")
        elif e.kind == "stop":
            extra = {k: v for k, v in p.items() if k not in ("reason",)}
            lines.append(f"    stop ({p.get('reason')}){' ' + json.dumps(extra, sort_keys=True) if extra else ''}")
    if final:
        c = final.get("counters", {})
        lines.append(f"final: edges={c.get('edge')} steps={c.get('lat')} tokens={c.get('tok')} "
                     f"|G|={len(final.get('subgraph', []))} |S|={len(final.get('selected', []))}")
    return "\n".join(lines) + "\n"


def show_trace(path: str | Path, kb: str | Path | None = None) -> tuple[str, str | None]:
    """Rendering plus an audit error message (None when the replay checks out)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    g = load_triples(kb) if kb else None
    try:
        replay_trace(g, doc)
        err = None
    except AuditError as exc:
        err = str(exc)
    except (KeyError, TypeError, ValueError) as exc:
        err = f"malformed trace: {exc}"
    try:
        text = render_trace(doc)
    except (KeyError, TypeError, ValueError) as exc:
        text = f"cannot render trace: {exc}\n"
    return text, err


def cmd_trace(cfg: RunConfig) -> int:
    if cfg.trace is None:
        raise ConfigError("trace needs --trace PATH")
    text, err = show_trace(cfg.trace, cfg.kb)
    sys.stdout.write(text)
    if err is not None:
        sys.stderr.write(f"!!! AUDIT FAILURE: {err}\n")
        return 2
    print("audit: ok")
    return 0


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "trace": cmd_trace}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clause", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("-v", "--verbose", action="store_true")
    skip = {"command", "train", "episode"}
    for name in _FIELDS:
        if name not in skip:
            ap.add_argument("--" + name.replace("_", "-"), dest=name, default=None)
    for name in sorted(set(_TRAIN_FIELDS) - _RUN_OWNED - set(_FIELDS)):
        ap.add_argument("--" + name.replace("_", "-"), dest=name, default=None)
    for name in sorted(_EPISODE_FIELDS - set(_FIELDS)):
        ap.add_argument("--" + name.replace("_", "-"), dest=name, default=None)
    return ap


def _episode_coerce(name: str, value: str) -> Any:
    tp = str({f.name: f for f in fields(EpisodeConfig)}[name].type)
    return value.lower() in ("true", "1", "yes") if tp.startswith("bool") else (
        int(value) if tp.startswith("int") else float(value))


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    overrides: dict[str, Any] = {"command": ns.command}
    try:
        for k, v in vars(ns).items():
            if k in ("command", "config", "verbose") or v is None:
                continue
            if k == "sweep_values":
                overrides[k] = [float(x) for x in v.split(",")]
            elif k in _FIELDS or k in _TRAIN_FIELDS:
                overrides[k] = _coerce(k, v)
            else:
                overrides[k] = _episode_coerce(k, v)
        cfg = parse_config(ns.config, overrides)
        return HANDLERS[cfg.command](cfg)
    except (ConfigError, ValueError) as exc:
        ap.exit(2, f"clause {ns.command}: error: {exc}\n")
    return 1


if __name__ == "__main__":
    sys.exit(main())
