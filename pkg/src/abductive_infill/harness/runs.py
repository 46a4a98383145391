"""End-to-end experiment runs driven by one config file.

Run directory layout::

    config.resolved          every resolved key; the run is reproducible from it alone
    data/                    synthesized corpus (only when experiment.data = none)
    models/<variant>/        model.npz, loss_curve.csv, checkpoints/
    predictions.jsonl        {"id", "hypothesis", "score", "strategy", "variant"} per row and instance
    traces/<row>.jsonl       per-iteration decoder traces (delorean, cold)
    report.json, report.md   one row per experiment row, in config order
    failures.md              lowest-scoring cases for manual tagging
    manifest.json            code version, seeds, wall-clock timing
"""
from __future__ import annotations

import hashlib
import json
import time
from importlib import metadata
from pathlib import Path

from .. import config as cfgmod
from ..errors import ConfigError
from ..metrics import evaluate_corpus
from . import pipeline
from .reporting import failure_report, write_report

SEED_KEYS = ("synth.seed", "train.seed", "decode.seed", "knowledge.encoder_seed", "eval.encoder_seed")


def code_version() -> dict:
    src = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for path in sorted(src.rglob("*")):
        if path.suffix in (".py", ".cfg", ".tsv") and "__pycache__" not in path.parts:
            h.update(path.relative_to(src).as_posix().encode())
            h.update(path.read_bytes())
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    return {"package_version": version, "source_sha256": h.hexdigest()}


def parse_rows(cfg: dict) -> list[tuple[str, str]]:
    rows = cfg.get("experiment.rows")
    if not rows:
        raise ConfigError("experiment.rows is empty")
    rows = rows if isinstance(rows, list) else [rows]
    out = []
    for r in rows:
        if "/" not in str(r):
            raise ConfigError(f"experiment row must be variant/strategy, got {r!r}")
        variant, strategy = str(r).split("/", 1)
        out.append((variant.strip(), strategy.strip()))
    return out


def _load_done(path: Path) -> list[dict]:
    """Valid prediction rows already written; a truncated last line is dropped."""
    if not path.exists():
        return []
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError:
            break
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    return rows


def _keep_traces(path: Path, ids: set[str]) -> None:
    """Drop trace records of instances without a finished prediction row."""
    keep = []
    if ids and path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                break
            if rec.get("id") in ids:
                keep.append(line + "\n")
    path.write_text("".join(keep), encoding="utf-8", newline="\n")


def run_experiment(config_path: str | Path | None, out_dir: str | Path, overrides: dict | None = None) -> Path:
    cfg = cfgmod.resolve(config_path, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfgmod.dump_config(cfg), encoding="utf-8")
    rows = parse_rows(cfg)
    timing: dict[str, float] = {}

    t0 = time.perf_counter()
    data_dir = cfg.get("experiment.data")
    if not data_dir:
        data_dir = out / "data"
        if not (data_dir / "train.jsonl").exists():
            pipeline.synth_to_dir(cfg["synth.seed"], cfg["synth.size"], data_dir, pipeline.provider_from_config(cfg))
    data_dir = Path(data_dir)
    timing["data"] = time.perf_counter() - t0

    models = {}
    for variant in dict.fromkeys(v for v, _ in rows):
        t0 = time.perf_counter()
        mdir = out / "models" / variant
        if not (mdir / "model.npz").exists():
            pipeline.train_from_config(cfg, data_dir, mdir, variant)
        models[variant] = pipeline.LoadedModel(mdir / "model.npz", cfg)
        timing[f"train.{variant}"] = time.perf_counter() - t0

    instances = pipeline.load_split(data_dir, cfg.get("experiment.split", "test"))
    limit = cfg.get("experiment.limit") or 0
    if limit:
        instances = instances[:limit]

    pred_path = out / "predictions.jsonl"
    done = {(r["variant"], r["strategy"], r["id"]) for r in _load_done(pred_path)}
    (out / "traces").mkdir(exist_ok=True)
    with open(pred_path, "a", encoding="utf-8", newline="\n") as fh:
        for variant, strategy in rows:
            t0 = time.perf_counter()
            model = models[variant]
            dcfg = pipeline.decode_config(cfg, strategy=strategy)
            label = f"{variant}/{strategy}"
            trace_path = out / "traces" / f"{variant}_{strategy}.jsonl"
            _keep_traces(trace_path, {i for v, l, i in done if (v, l) == (variant, label)})
            with open(trace_path, "a", encoding="utf-8", newline="\n") as tf:
                for inst in instances:
                    if (variant, label, inst.id) in done:
                        continue
                    result = model.decode(inst, dcfg)
                    for rec in result.trace:
                        tf.write(json.dumps({"id": inst.id, **rec}) + "\n")
                    fh.write(json.dumps(pipeline.prediction_record(inst.id, result, label, variant)) + "\n")
                    fh.flush()
            timing[f"decode.{label}"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    preds = pipeline.read_predictions(pred_path)
    by_row: dict[str, dict[str, str]] = {}
    for r in preds:
        by_row.setdefault(r["strategy"], {})[r["id"]] = r["hypothesis"]
    any_model = next(iter(models.values()))
    encoder = pipeline.eval_encoder(cfg, any_model.vocab)
    report_rows, hyps_by_label = [], {}
    for variant, strategy in rows:
        label = f"{variant}/{strategy}"
        hyps = [by_row.get(label, {}).get(inst.id, "") for inst in instances]
        hyps_by_label[label] = hyps
        rep = evaluate_corpus(hyps, instances, encoder)
        report_rows.append({"name": label, "variant": variant, "strategy": strategy, **rep.as_dict()})
    write_report(report_rows, out)
    if cfg.get("experiment.failures", True):
        md = failure_report(hyps_by_label, instances, cfg["failures.n"], cfg["failures.metric"], encoder)
        (out / "failures.md").write_text(md, encoding="utf-8")
    timing["eval"] = time.perf_counter() - t0

    manifest = {
        "code_version": code_version(),
        "seeds": {k: cfg.get(k) for k in SEED_KEYS},
        "rows": [f"{v}/{s}" for v, s in rows],
        "config_sha256": hashlib.sha256((out / "config.resolved").read_bytes()).hexdigest(),
        "timing_seconds": timing,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out
