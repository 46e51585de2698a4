"""Experiment orchestration: configs, the train/attack/sweep commands and their reports."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (TARGETED, UNTARGETED, APGDConfig, BatchSpec, ThreatModel, attack_batch,
                     feasible, regenerate, sparsify)
from .data import Dataset, make_dataset, save_dataset, select_ground_truth
from .metrics import ReferenceCorpus, bleu4_report, cider, permuted_baseline, success_rate
from .model import CaptionModel, ModelConfig, Vocabulary
from .train import TrainConfig, evaluate_clean, load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WALL_CLOCK_KEY = "wall_clock_seconds"

# In-grammar stand-ins for a short phishing-style target and a longer sentence.
TARGET_PRESETS = {
    "short": "a purple triangle",
    "long": "a yellow circle and a green square on a black background",
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    command: str = "attack"
    # dataset
    n: int = 1000
    data_seed: int = 0
    qa: bool = True
    # model
    checkpoint: str = "runs/model.ckpt"
    train_if_missing: bool = True
    epochs: int = 20
    train_seed: int = 0
    # attack
    mode: str = UNTARGETED
    target_text: str = ""
    eps: float = 4 / 255
    perturb: str = "all"
    iterations: int = 500
    seed: int = 0
    shots: int = 0
    n_records: int = 200
    workers: int = 1
    chunk_size: int = 50
    max_new_tokens: int = 24
    # sweeps
    iteration_list: list = field(default_factory=lambda: [1, 10, 100, 500])
    presets: list = field(default_factory=lambda: [UNTARGETED])
    fractions: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    # output
    out: str = "runs/out"
    dump: bool = False
    permutations: int = 100

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.mode not in (UNTARGETED, TARGETED):
            raise ConfigError(f"mode must be untargeted or targeted, got {self.mode!r}")
        if self.mode == TARGETED and not self.target_text:
            raise ConfigError("targeted mode needs target_text")
        if self.perturb not in ("all", "query"):
            raise ConfigError(f"perturb must be all or query, got {self.perturb!r}")
        if self.shots not in (0, 4):
            raise ConfigError(f"shots must be 0 or 4, got {self.shots}")
        if self.eps < 0:
            raise ConfigError("eps must be non-negative")
        if self.iterations < 1 or any(i < 1 for i in self.iteration_list):
            raise ConfigError("iteration budgets must be >= 1")
        if any(not 0.0 <= f <= 1.0 for f in self.fractions):
            raise ConfigError("fractions must lie in [0, 1]")
        if self.n_records < 1 or self.n < 1 or self.chunk_size < 1 or self.workers < 1:
            raise ConfigError("record counts, chunk size and workers must be positive")
        for p in self.presets:
            if p not in (UNTARGETED, TARGETED):
                raise ConfigError(f"unknown preset {p!r}")
        if TARGETED in self.presets and not self.target_text:
            raise ConfigError("a targeted preset needs target_text")
        return self

    def threat_model(self, eps: float | None = None) -> ThreatModel:
        e = self.eps if eps is None else eps
        return ThreatModel(eps_q=e, eps_c=e if self.perturb == "all" else 0.0)

    def echo(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------- config parsing

_SECTIONS = {
    "dataset": {"n": "n", "seed": "data_seed", "qa": "qa"},
    "model": {"checkpoint": "checkpoint", "train_if_missing": "train_if_missing"},
    "train": {"epochs": "epochs", "seed": "train_seed"},
    "attack": {"mode": "mode", "target_text": "target_text", "eps": "eps", "perturb": "perturb",
               "iterations": "iterations", "seed": "seed", "shots": "shots",
               "n_records": "n_records", "workers": "workers", "chunk_size": "chunk_size",
               "max_new_tokens": "max_new_tokens"},
    "sweep": {"iterations": "iteration_list", "presets": "presets", "fractions": "fractions"},
    "output": {"dir": "out", "dump": "dump", "permutations": "permutations"},
}


def parse_number(text: str) -> float:
    """Accepts plain numbers and fractions such as ``4/255``."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"not a number: {text!r}") from e


def _coerce(name: str, raw):
    default = getattr(ExperimentConfig(), name)
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
            return low in ("true", "yes", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return parse_number(raw)
        if isinstance(default, list):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if name == "iteration_list":
                return [int(s) for s in items]
            if name == "fractions":
                return [parse_number(s) for s in items]
            return items
    except ValueError as e:
        raise ConfigError(f"{name}: {e}") from e
    return raw.strip()


def load_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Read an INI config, then apply ``overrides`` (field name -> value)."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as e:
            raise ConfigError(f"{path}: {e}") from e
        for section in parser.sections():
            keys = _SECTIONS.get(section)
            if keys is None:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in keys:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                values[keys[key]] = _coerce(keys[key], raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = _coerce(k, v)
    if values.get("target_text") in TARGET_PRESETS:
        values["target_text"] = TARGET_PRESETS[values["target_text"]]
    return ExperimentConfig(**values).validate()


# ---------------------------------------------------------------- shared pieces

def build_dataset(cfg: ExperimentConfig) -> Dataset:
    return make_dataset(cfg.n, cfg.data_seed, with_qa=cfg.qa)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, seed=cfg.train_seed)


def obtain_model(cfg: ExperimentConfig, ds: Dataset) -> CaptionModel:
    path = Path(cfg.checkpoint)
    if path.exists():
        model, _ = load_checkpoint(path)
        return model
    if not cfg.train_if_missing:
        raise ConfigError(f"checkpoint {path} not found")
    log.info("no checkpoint at %s, training one", path)
    report = run_train(cfg, ds)
    model, _ = load_checkpoint(report["checkpoint"])
    return model


def context_for(cfg: ExperimentConfig, ds: Dataset) -> tuple:
    """The first ``shots`` train records serve as context, captioned by seed."""
    if cfg.shots == 0:
        return [], []
    train_recs = sorted(ds.train, key=lambda r: r.record_id)
    if len(train_recs) < cfg.shots:
        raise ConfigError(f"{cfg.shots}-shot prompts need {cfg.shots} train records")
    ctx = train_recs[:cfg.shots]
    return [r.image for r in ctx], [select_ground_truth(r, cfg.seed) for r in ctx]


def batch_spec(cfg: ExperimentConfig, ds: Dataset, model: CaptionModel, mode: str | None = None) -> BatchSpec:
    mode = mode or cfg.mode
    recs = sorted(ds.eval, key=lambda r: r.record_id)[:cfg.n_records]
    if not recs:
        raise ConfigError("evaluation split is empty")
    images, caps = context_for(cfg, ds)
    vocab = model.vocab
    if mode == TARGETED:
        if not vocab.covers(cfg.target_text):
            raise ConfigError(f"target text {cfg.target_text!r} is not in the vocabulary")
        seqs = [vocab.encode(cfg.target_text) for _ in recs]
        target = cfg.target_text
    else:
        seqs = [vocab.encode(select_ground_truth(r, cfg.seed)) for r in recs]
        target = None
    return BatchSpec(mode, recs, seqs, images, caps, target)


def apgd_config(cfg: ExperimentConfig, iterations: int | None = None) -> APGDConfig:
    return APGDConfig(iterations=iterations or cfg.iterations, seed=cfg.seed)


def _linf(d) -> float:
    return float(np.max(np.abs(d))) if np.size(d) else 0.0


def caption_scores(spec: BatchSpec, captions: list) -> dict:
    """Per-record metric lists; each aggregate is the mean of its list."""
    corpus = ReferenceCorpus([r.references for r in spec.records], ids=[r.record_id for r in spec.records])
    out = {"cider": cider(captions, corpus).scores}
    if spec.target_text is not None:
        out["success_rate"] = success_rate(captions, spec.target_text).scores
        out["bleu4"] = bleu4_report(captions, spec.target_text).scores
    return out


def caption_metrics(spec: BatchSpec, captions: list) -> dict:
    return {k: float(np.mean(v)) for k, v in caption_scores(spec, captions).items()}


def _result_rows(model, spec: BatchSpec, results: list, clean_caps: list, tm: ThreatModel) -> list:
    clean_s = caption_scores(spec, clean_caps)
    adv_s = caption_scores(spec, [r.caption for r in results])
    rows = []
    for i, (res, rec, clean) in enumerate(zip(results, spec.records, clean_caps)):
        ok = feasible(res.delta_q, rec.image, tm.eps_q) and all(
            feasible(d, c, tm.eps_c) for d, c in zip(res.delta_c, spec.context_images))
        row = {
            "record_id": rec.record_id,
            "attacked_text": model.vocab.decode(spec.sequences[i]),
            "clean_caption": clean,
            "adversarial_caption": res.caption,
            "clean_objective": res.trace[0],
            "best_objective": res.best_objective,
            "final_objective": res.trace[-1],
            "iterations": len(res.trace) - 1,
            "linf_query": _linf(res.delta_q),
            "linf_context": max([_linf(d) for d in res.delta_c], default=0.0),
            "feasible": bool(ok),
        }
        for k in clean_s:
            row["clean_" + k] = clean_s[k][i]
            row["adversarial_" + k] = adv_s[k][i]
        rows.append(row)
    return rows


def _report(cfg: ExperimentConfig, command: str, rows: list, aggregates: dict, extra: dict | None = None) -> dict:
    rep = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "command": command,
        "config": cfg.echo(),
        "seeds": {"data": cfg.data_seed, "train": cfg.train_seed, "attack": cfg.seed},
        "rows": rows,
        "aggregates": aggregates,
    }
    rep.update(extra or {})
    return rep


def write_report(report: dict, out_dir, name: str, started: float) -> Path:
    """Write ``name``.json (with the wall-clock field) and ``name``.csv of its rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = dict(report)
    report[WALL_CLOCK_KEY] = round(time.perf_counter() - started, 3)
    path = out / f"{name}.json"
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    (out / f"{name}.csv").write_text(rows_to_csv(report["rows"]))
    return path


def rows_to_csv(rows: list, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(comment)
    if not rows:
        return buf.getvalue()
    cols = [c for c in rows[0] if not isinstance(rows[0][c], (list, dict))]
    if comment is None:
        buf.write("# columns: " + ", ".join(cols) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return buf.getvalue()


# ---------------------------------------------------------------- perturbation dump

DUMP_MAGIC = b"VLMRPERT"


def dump_perturbations(out_dir, results: list, cfg: ExperimentConfig, tm: ThreatModel) -> Path:
    """One binary file per record (K tensors, query last) plus manifest.json."""
    root = Path(out_dir) / "perturbations"
    root.mkdir(parents=True, exist_ok=True)
    manifest = []
    for res in results:
        d = np.asarray(res.deltas(), dtype="<f8")
        name = f"record_{res.record_id:06d}.bin"
        head = DUMP_MAGIC + struct.pack("<B", d.ndim) + struct.pack(f"<{d.ndim}I", *d.shape)
        (root / name).write_bytes(head + np.ascontiguousarray(d).tobytes())
        manifest.append({"record_id": res.record_id, "file": name, "eps_q": tm.eps_q, "eps_c": tm.eps_c,
                         "iterations": len(res.trace) - 1, "best_objective": res.best_objective,
                         "success": res.success})
    path = root / "manifest.json"
    path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, "mode": cfg.mode,
                                "records": manifest}, indent=1, sort_keys=True) + "\n")
    return path


def load_perturbation(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != DUMP_MAGIC:
        raise ValueError(f"{path}: not a perturbation file")
    (nd,) = struct.unpack_from("<B", blob, 8)
    shape = struct.unpack_from(f"<{nd}I", blob, 9)
    return np.frombuffer(blob, dtype="<f8", offset=9 + 4 * nd).reshape(shape).astype(np.float64)


# ---------------------------------------------------------------- commands

def run_gen_data(cfg: ExperimentConfig) -> dict:
    started = time.perf_counter()
    ds = build_dataset(cfg)
    paths = save_dataset(ds, Path(cfg.out))
    rep = _report(cfg, "gen-data", [], {"n_records": len(ds.records), "n_train": len(ds.train),
                                       "n_eval": len(ds.eval)})
    rep["directory"] = str(paths)
    write_report(rep, cfg.out, "gen_data_report", started)
    return rep


def run_train(cfg: ExperimentConfig, ds: Dataset | None = None) -> dict:
    started = time.perf_counter()
    ds = ds or build_dataset(cfg)
    model = CaptionModel(ModelConfig(), Vocabulary(), seed=cfg.train_seed)
    tcfg = train_config(cfg)
    result = train(model, ds.train, tcfg, log_every=1)
    clean = evaluate_clean(model, ds)
    meta = {"data_seed": cfg.data_seed, "n": cfg.n, "train": dataclasses.asdict(tcfg)}
    digest = save_checkpoint(model, cfg.checkpoint, meta)
    rows = [{"epoch": i + 1, "loss": v} for i, v in enumerate(result.loss_curve)]
    aggregates = {"clean_cider": clean["cider"], "vqa_accuracy": clean.get("vqa_accuracy"),
                  "n_eval": clean["n_records"], "steps": result.steps,
                  "final_loss": result.loss_curve[-1]}
    rep = _report(cfg, "train", rows, aggregates,
                  {"checkpoint": str(cfg.checkpoint), "checkpoint_sha256": digest})
    write_report(rep, cfg.out, "train_report", started)
    return rep


def _clean_captions(model, spec, cfg):
    zeros = [np.zeros((len(spec.context_images) + 1,) + r.image.shape) for r in spec.records]
    return regenerate(model, spec, zeros, cfg.chunk_size, cfg.max_new_tokens)


def run_attack(cfg: ExperimentConfig, model: CaptionModel | None = None, ds: Dataset | None = None) -> dict:
    started = time.perf_counter()
    ds = ds or build_dataset(cfg)
    model = model or obtain_model(cfg, ds)
    spec = batch_spec(cfg, ds, model)
    tm = cfg.threat_model()
    clean_caps = _clean_captions(model, spec, cfg)
    results = attack_batch(model, spec, tm, apgd_config(cfg), cfg.chunk_size, cfg.workers,
                           cfg.max_new_tokens)
    rows = _result_rows(model, spec, results, clean_caps, tm)
    corpus = ReferenceCorpus([r.references for r in spec.records])
    agg = {"n_records": len(rows), "eps_q": tm.eps_q, "eps_c": tm.eps_c,
           "feasible_fraction": float(np.mean([r["feasible"] for r in rows])),
           "permuted_baseline": permuted_baseline(corpus, cfg.permutations, cfg.seed)}
    for k in rows[0]:
        if k.startswith(("clean_", "adversarial_")) and isinstance(rows[0][k], float):
            if not k.endswith(("_caption", "_objective")):
                agg[k] = recompute_aggregate(rows, k)
    rep = _report(cfg, "attack", rows, agg)
    if cfg.dump:
        rep["perturbation_manifest"] = str(dump_perturbations(cfg.out, results, cfg, tm))
    write_report(rep, cfg.out, "attack_report", started)
    return rep


def run_iteration_sweep(cfg: ExperimentConfig, model: CaptionModel | None = None,
                        ds: Dataset | None = None) -> dict:
    started = time.perf_counter()
    ds = ds or build_dataset(cfg)
    model = model or obtain_model(cfg, ds)
    tm = cfg.threat_model()
    rows = []
    for preset in cfg.presets:
        spec = batch_spec(cfg, ds, model, preset)
        for n_it in cfg.iteration_list:
            results = attack_batch(model, spec, tm, apgd_config(cfg, n_it), cfg.chunk_size,
                                   cfg.workers, cfg.max_new_tokens)
            caps = [r.caption for r in results]
            row = {"preset": preset, "iterations": n_it}
            row.update(caption_metrics(spec, caps))
            row["mean_best_objective"] = float(np.mean([r.best_objective for r in results]))
            row["captions"] = caps
            row["record_ids"] = [r.record_id for r in results]
            rows.append(row)
    rep = _report(cfg, "sweep-iters", rows, {"n_rows": len(rows), "eps": cfg.eps})
    write_report(rep, cfg.out, "sweep_iters_report", started)
    return rep


def run_sparsify_sweep(cfg: ExperimentConfig, model: CaptionModel | None = None,
                       ds: Dataset | None = None) -> dict:
    started = time.perf_counter()
    ds = ds or build_dataset(cfg)
    model = model or obtain_model(cfg, ds)
    spec = batch_spec(cfg, ds, model)
    tm = cfg.threat_model()
    results = attack_batch(model, spec, tm, apgd_config(cfg), cfg.chunk_size, cfg.workers,
                           cfg.max_new_tokens)
    clean_caps = _clean_captions(model, spec, cfg)
    rows = []

    def add(label, frac, caps):
        row = {"label": label, "fraction": frac}
        row.update(caption_metrics(spec, caps))
        row["captions"] = caps
        rows.append(row)

    add("clean", None, clean_caps)
    add("full", None, [r.caption for r in results])
    for f in cfg.fractions:
        deltas = [np.stack([sparsify(d, f) for d in r.deltas()]) for r in results]
        add("sparsified", f, regenerate(model, spec, deltas, cfg.chunk_size, cfg.max_new_tokens))
    agg = {"n_records": len(spec.records), "eps": cfg.eps}
    rep = _report(cfg, "sweep-sparsify", rows, agg)
    write_report(rep, cfg.out, "sweep_sparsify_report", started)
    return rep


# ---------------------------------------------------------------- render

_CURVES = {
    "sweep-iters": ("iterations", ("cider", "success_rate", "bleu4", "mean_best_objective"), "preset"),
    "sweep-sparsify": ("fraction", ("cider", "success_rate", "bleu4"), None),
    "train": ("epoch", ("loss",), None),
}


def load_report(path) -> dict:
    try:
        rep = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: cannot read report ({e})") from e
    if not isinstance(rep, dict) or "rows" not in rep or "command" not in rep:
        raise ConfigError(f"{path}: malformed report (needs 'command' and 'rows')")
    if not isinstance(rep["rows"], list) or not all(isinstance(r, dict) for r in rep["rows"]):
        raise ConfigError(f"{path}: malformed report rows")
    return rep


def render_tables(report: dict) -> dict:
    """File name -> text for the flat CSV table and any two-column curve files."""
    cmd = report["command"]
    rows = report["rows"]
    files = {"table.csv": rows_to_csv(rows)}
    if cmd in _CURVES and rows:
        xcol, ycols, group = _CURVES[cmd]
        for y in ycols:
            keys = sorted({r.get(group) for r in rows}) if group else [None]
            for key in keys:
                pts = [(r[xcol], r[y]) for r in rows
                       if r.get(xcol) is not None and r.get(y) is not None
                       and (group is None or r.get(group) == key)]
                if not pts:
                    continue
                name = f"{y}.dat" if key is None else f"{y}_{key}.dat"
                lines = [f"# {xcol} {y}"] + [f"{x!r} {v!r}" for x, v in pts]
                files[name] = "\n".join(lines) + "\n"
    return files


def parse_table_csv(text: str) -> list:
    """Rows from a rendered CSV table, with numbers converted back."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        rows.append({k: _literal(v) for k, v in r.items()})
    return rows


def _literal(v: str):
    if v in ("True", "False"):
        return v == "True"
    if v == "":
        return ""
    if v == "None":
        return None
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def run_render(path, out_dir) -> list:
    report = load_report(path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in render_tables(report).items():
        (out / name).write_text(text)
        written.append(out / name)
    return written


COMMANDS = ("train", "attack", "sweep-iters", "sweep-sparsify", "render", "gen-data")


def recompute_aggregate(rows: list, key: str) -> float:
    vals = [r[key] for r in rows if r.get(key) is not None]
    return float(np.mean(vals)) if vals else math.nan
