"""Command-line entry point: generate, train, evaluate, explain.

Every command accepts ``--config FILE`` (``key = value`` lines), ``--seed``
and ``--out-dir``.  Values come from built-in defaults, then the config file,
then explicit flags.  The resolved settings are written next to the outputs.

Exit codes: 0 success, 2 usage or input error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ShapeError
from .cohort import (
    ORGANS,
    generate_cohort,
    label_record,
    read_cohort,
    read_scalers,
    write_cohort,
    write_scalers,
)
from .layers import load_checkpoint, save_checkpoint
from .metrics import (
    EvalSample,
    bootstrap_compare,
    concept_regression_report,
    pooled,
    write_concept_pairs,
    write_pr,
    write_roc,
)
from .model import ModelConfig, build_model, recombine
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    desk_profile,
    format_log,
    predict,
    prepare,
    prepare_splits,
    split_cohort,
    train,
)

log = logging.getLogger("senn_icu")


class UsageError(Exception):
    """Bad arguments or inputs; exit code 2."""


def _int_list(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(s).split(",") if v.strip())


def _float_list(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(s).split(",") if v.strip())


def _fmt_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


# (key, type, default, help); REQUIRED marks a mandatory key
REQUIRED = object()

_TRAIN_OVERRIDES = [
    ("lr", float, None, "Adam learning rate"),
    ("beta1", float, None, "Adam beta1"),
    ("beta2", float, None, "Adam beta2"),
    ("eps", float, None, "Adam epsilon"),
    ("l2", float, None, "L2 factor on weights"),
    ("batch_size", int, None, "stays per mini-batch"),
    ("max_epochs", int, None, "epoch cap"),
    ("dropout", float, None, "dropout rate in the heads"),
    ("patience", int, None, "early-stopping patience in epochs"),
    ("split", _float_list, None, "train,val,test fractions"),
    ("lambda_mort", float, None, "mortality loss weight"),
    ("lambda_aux", float, None, "concept loss weight"),
    ("lambda_impute", float, None, "imputation loss weight"),
    ("lstm_hidden", int, None, "encoder LSTM width"),
    ("lstm_layers", int, None, "encoder LSTM depth"),
    ("imputer_hidden", int, None, "imputer LSTM width"),
    ("imputer_layers", int, None, "imputer LSTM depth"),
    ("head_dims", _int_list, None, "hidden widths of the dense heads, comma separated"),
]

COMMANDS = {
    "generate": [
        ("n", int, REQUIRED, "number of patients"),
        ("prevalence", float, 0.089, "fraction of non-survivors"),
        ("out", str, "cohort.csv", "cohort file name (relative to --out-dir)"),
    ],
    "train": [
        ("cohort", str, REQUIRED, "cohort file"),
        ("model", str, "senn", "senn or baseline"),
        ("profile", str, "desk", "desk (small, CPU friendly) or full (large network)"),
    ] + _TRAIN_OVERRIDES,
    "evaluate": [
        ("checkpoint", str, REQUIRED, "checkpoint to evaluate"),
        ("checkpoint_b", str, None, "second checkpoint for a paired comparison"),
        ("cohort", str, REQUIRED, "cohort file"),
        ("split", str, "test", "train, val or test"),
        ("n_resamples", int, 1000, "bootstrap resamples"),
    ],
    "explain": [
        ("checkpoint", str, REQUIRED, "concept-model checkpoint"),
        ("cohort", str, REQUIRED, "cohort file"),
        ("patient_id", int, REQUIRED, "patient to explain"),
        ("out", str, None, "output file name (default explain_<id>.tsv)"),
    ],
}
GLOBAL_KEYS = [("seed", int, 0, "global random seed"), ("out_dir", str, ".", "output directory")]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="senn-icu", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value settings file")
    for key, typ, _, help_ in GLOBAL_KEYS:
        common.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=argparse.SUPPRESS, help=help_)
    # global flags may also come before the command
    parser.add_argument("--config", default=None, help="key = value settings file")
    for key, typ, _, help_ in GLOBAL_KEYS:
        parser.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None, help=help_)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=f"{name} command")
        for key, typ, _, help_ in keys:
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None, help=help_)
    return parser


def read_config(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then config file, then flags; unknown config keys are an error."""
    specs = GLOBAL_KEYS + COMMANDS[args.command]
    known = {k: (t, d) for k, t, d, _ in specs}
    resolved = {k: d for k, (_, d) in known.items()}
    if args.config:
        try:
            file_values = read_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        unknown = sorted(set(file_values) - set(known))
        if unknown:
            raise UsageError(f"unknown config key(s) for '{args.command}': {', '.join(unknown)}")
        for k, raw in file_values.items():
            typ = known[k][0]
            try:
                resolved[k] = typ(raw) if raw != "" else None
            except ValueError:
                raise UsageError(f"config key {k}: cannot parse {raw!r}") from None
    for k in known:
        v = getattr(args, k, None)
        if v is not None:
            resolved[k] = v
    missing = [k for k, v in resolved.items() if v is REQUIRED]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return resolved


def write_resolved(path: Path, command: str, cfg: dict) -> None:
    lines = [f"# senn-icu {command} (resolved settings)"]
    lines += [f"{k} = {_fmt_value(v)}" for k, v in cfg.items() if v is not None]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cohort(path):
    if not Path(path).is_file():
        raise UsageError(f"cohort file not found: {path}")
    try:
        return read_cohort(path)
    except ValueError as exc:
        raise UsageError(f"cannot parse cohort {path}: {exc}") from None


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        params, meta = load_checkpoint(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    mc = ModelConfig.from_dict(meta["model_config"])
    scalers = read_scalers(Path(path).parent / meta["scalers_file"])
    return build_model(mc, params), meta, scalers


def _check_dims(model, records, path) -> None:
    c = model.config
    d_x = records[0].series.values.shape[1]
    d_s = records[0].static.shape[0]
    if (d_x, d_s) != (c.d_x, c.d_s):
        raise UsageError(
            f"{path} expects d_x={c.d_x}, d_s={c.d_s} but the cohort has d_x={d_x}, d_s={d_s}"
        )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg) -> int:
    if cfg["n"] < 1:
        raise UsageError("--n must be at least 1")
    if not 0.0 <= cfg["prevalence"] <= 1.0:
        raise UsageError("--prevalence must lie in [0, 1]")
    out = _out_dir(cfg)
    records = generate_cohort(cfg["n"], cfg["prevalence"], rng_seed=cfg["seed"])
    path = out / cfg["out"]
    write_cohort(path, records)
    write_resolved(out / "generate.cfg", "generate", cfg)
    realized = sum(r.died for r in records) / len(records)
    print(f"wrote {len(records)} patients to {path}; realized prevalence {realized:.4f}")
    return 0


def _train_configs(cfg) -> tuple[ModelConfig, TrainConfig]:
    if cfg["model"] not in ("senn", "baseline"):
        raise UsageError("--model must be senn or baseline")
    if cfg["profile"] == "desk":
        mc, tc = desk_profile(cfg["model"], cfg["seed"])
    elif cfg["profile"] == "full":
        mc, tc = ModelConfig(kind=cfg["model"]), TrainConfig(seed=cfg["seed"])
    else:
        raise UsageError("--profile must be desk or full")
    m, t = mc.to_dict(), tc.to_dict()
    for key, *_ in _TRAIN_OVERRIDES:
        v = cfg.get(key)
        if v is None:
            continue
        (m if key in m else t)[key] = v
    t["seed"] = cfg["seed"]
    try:
        tc = TrainConfig(**t)
        m["dropout"] = tc.dropout  # one source of truth for the rate
        return ModelConfig.from_dict(m), tc
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(cfg) -> int:
    mc, tc = _train_configs(cfg)
    records = _load_cohort(cfg["cohort"])
    mc.d_x = records[0].series.values.shape[1]
    mc.d_s = records[0].static.shape[0]
    out = _out_dir(cfg)
    name = mc.kind
    tr, va, te = split_cohort(records, tc.split, seed=tc.seed)
    scalers, trs, vas, _ = prepare_splits(tr, va)
    scaler_file = f"{name}_scalers.tsv"
    write_scalers(out / scaler_file, scalers)
    model = build_model(mc, seed=tc.seed)
    meta = {"model_config": mc.to_dict(), "train_config": tc.to_dict(), "split_seed": tc.seed,
            "scalers_file": scaler_file, "cohort": str(cfg["cohort"])}
    resolved = dict(cfg)
    resolved.update({k: v for k, v in tc.to_dict().items() if k in cfg})
    resolved.update({k: v for k, v in mc.to_dict().items() if k in cfg})
    write_resolved(out / f"train_{name}.cfg", "train", resolved)
    ckpt = out / f"{name}.ckpt"
    rows, times = [], []
    t0 = time.perf_counter()

    def on_epoch(row):
        rows.append(row)
        times.append(time.perf_counter() - t0)
        print(f"epoch {row['epoch']:3d}  train {row['train_total']:.5f}  val {row['val_total']:.5f}", flush=True)

    def write_logs():
        (out / f"{name}_epochs.tsv").write_text(format_log(rows), encoding="utf-8")
        (out / f"{name}_epochs_time.tsv").write_text(
            "epoch\twall_seconds\n" + "".join(f"{r['epoch']}\t{s:.3f}\n" for r, s in zip(rows, times)),
            encoding="utf-8",
        )

    try:
        result = train(model, trs, vas, tc, on_epoch=on_epoch)
    except TrainingDiverged as exc:
        write_logs()
        if exc.last_good is not None:
            save_checkpoint(ckpt, exc.last_good, dict(meta, diverged=True))
        print(f"error: training diverged: {exc}; last good checkpoint kept at {ckpt}", file=sys.stderr)
        return 1
    write_logs()
    meta["best_epoch"] = result.best_epoch
    meta["best_val_total"] = result.best_val
    save_checkpoint(ckpt, result.best_params, meta)
    print(f"best epoch {result.best_epoch} (val {result.best_val:.5f}); checkpoint {ckpt}")
    return 0


def _split_records(records, meta, split: str):
    if split not in ("train", "val", "test"):
        raise UsageError("--split must be train, val or test")
    tc = meta["train_config"]
    parts = split_cohort(records, tc["split"], seed=meta["split_seed"])
    return parts[("train", "val", "test").index(split)], parts[0]


def _samples(model, records, scalers) -> list[EvalSample]:
    preds = predict(model, prepare(records, scalers))
    return [EvalSample(p["patient_id"], p["y_true"], p["y_pred"], p["concept_labels"], p["concepts"]) for p in preds]


def cmd_evaluate(cfg) -> int:
    n_res = cfg["n_resamples"]
    if n_res < 1:
        raise UsageError("--n-resamples must be positive")
    records = _load_cohort(cfg["cohort"])
    out = _out_dir(cfg)
    paths = [cfg["checkpoint"]] + ([cfg["checkpoint_b"]] if cfg["checkpoint_b"] else [])
    loaded = [_load_model(p) for p in paths]
    for (model, _, _), p in zip(loaded, paths):
        _check_dims(model, records, p)
    metas = [m for _, m, _ in loaded]
    if len(metas) == 2 and (metas[0]["split_seed"], metas[0]["train_config"]["split"]) != (
        metas[1]["split_seed"], metas[1]["train_config"]["split"]
    ):
        raise UsageError("checkpoints were trained on different splits; a paired comparison needs the same split")
    subset, train_part = _split_records(records, metas[0], cfg["split"])
    tags = [f"{m.config.kind}" for m, _, _ in loaded]
    if len(tags) == 2 and tags[0] == tags[1]:
        tags = [f"{tags[0]}_a", f"{tags[1]}_b"]
    samples = [_samples(model, subset, sc) for model, _, sc in loaded]

    lines = [f"# split={cfg['split']} patients={len(subset)} timepoints={sum(s.y_true.size for s in samples[0])}"]
    lines.append("model\tmetric\testimate\tn_resamples")
    comps = {}
    for metric in ("AUROC", "AUPRC"):
        comp = bootstrap_compare(samples[0], samples[1] if len(samples) == 2 else None, metric, n_res, cfg["seed"])
        comps[metric] = comp
        lines.append(f"{tags[0]}\t{metric}\t{comp.report_a.interval()}\t{n_res}")
        if len(samples) == 2:
            lines.append(f"{tags[1]}\t{metric}\t{comp.report_b.interval()}\t{n_res}")
    if len(samples) == 2:
        lines.append("comparison\tmetric\tdelta\tp_value")
        for metric, comp in comps.items():
            lines.append(f"{tags[0]}-{tags[1]}\t{metric}\t{comp.delta.interval()}\t{comp.p_value:.4f}")
    for (model, _, sc), tag, smp in zip(loaded, tags, samples):
        scores, labels = pooled(smp)
        write_roc(out / f"roc_{tag}.tsv", scores, labels)
        write_pr(out / f"pr_{tag}.tsv", scores, labels)
        if model.config.kind == "senn":
            train_mean = np.concatenate([label_record(r).target for r in train_part]).mean(axis=0)
            rep = concept_regression_report(smp, train_mean)
            lines.append("model\tconcept\tmse\tmean_baseline_mse")
            lines += [f"{tag}\t{row}" for row in rep.rows(ORGANS)]
            write_concept_pairs(out / f"concepts_{tag}.tsv", rep, ORGANS)
    report = "\n".join(lines) + "\n"
    (out / "metrics.txt").write_text(report, encoding="utf-8")
    write_resolved(out / "evaluate.cfg", "evaluate", cfg)
    sys.stdout.write(report)
    return 0


def cmd_explain(cfg) -> int:
    model, meta, scalers = _load_model(cfg["checkpoint"])
    if model.config.kind != "senn":
        raise UsageError("baseline has no explanations")
    records = _load_cohort(cfg["cohort"])
    _check_dims(model, records, cfg["checkpoint"])
    pid = cfg["patient_id"]
    match = [r for r in records if r.patient_id == pid]
    if not match:
        raise UsageError(f"unknown patient id {pid}")
    p = predict(model, prepare(match, scalers))[0]
    out = _out_dir(cfg)
    path = out / (cfg["out"] or f"explain_{pid}.tsv")
    N = p["concepts"].shape[1]
    header = (["patient_id", "hour", "y_true", "y_pred"] + [f"exp_{j + 1}" for j in range(N)]
              + [f"label_{j + 1}" for j in range(N)] + [f"rel_{j + 1}" for j in range(N)])
    lines = ["\t".join(header)]
    for t in range(p["y_pred"].shape[0]):
        vals = [p["y_true"][t], p["y_pred"][t], *p["concepts"][t], *p["concept_labels"][t], *p["relevance"][t]]
        lines.append("\t".join([str(pid), str(t)] + [repr(float(v)) for v in vals]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_resolved(out / f"explain_{pid}.cfg", "explain", cfg)
    gap = np.max(np.abs(recombine(p["concepts"], p["relevance"]) - p["y_pred"]))
    print(f"wrote {len(lines) - 1} hourly rows to {path} (recombination gap {gap:.1e})")
    return 0


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "explain": cmd_explain}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ShapeError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
