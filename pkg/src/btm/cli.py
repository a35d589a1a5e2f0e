"""Command-line pipeline: data, experts, surrogates, condensation, evaluation, reports.

All artifacts live under ``run.out_dir``::

    data/                      train/val/test CSVs + manifest.json
    experts/expert_0001.btmt   SGD trajectories (+ .json sidecars)
    surrogates/expert_0001.btmb  fitted Bezier paths, .trace.csv fit traces
    condensed/<method>_ipc<n>.csv  synthetic sets, .history.csv
    results.csv, eval/         evaluation summaries and per-seed metrics
    storage_report.json, theory/
    manifest.json              RunManifest: config hash, seeds, files, timestamps

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from ._io import write_json
from .bezier import (
    ControlOptConfig, MlpObjective, control_fit_cost_epochs, load_path, optimize_control_point, save_path,
    storage_ratio,
)
from .condense import CondenseConfig, condense_run, mtt_sampler
from .config import ConfigError, config_hash, int_list, load_config
from .data import (
    GenConfig, balance_train_split, generate_synthetic_clinical, init_synthetic, load_csv, load_dataset,
    load_synthetic, preprocess, save_dataset, save_synthetic,
)
from .evalharness import EvalConfig, append_results, evaluate_synthetic, evaluate_training_set, random_coreset, write_per_seed
from .net import MlpSpec
from .theory import theorem_report, write_report
from .trajectory import SgdConfig, TrajectoryDiverged, load_trajectory, save_trajectory, train_expert

log = logging.getLogger("btm")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class MissingInput(FileNotFoundError):
    """A required input artifact is absent (reported as a usage error)."""


# -- helpers -----------------------------------------------------------------

def _out(cfg) -> Path:
    return Path(cfg["run"]["out_dir"])


def _data_dir(cfg) -> Path:
    return Path(cfg["data"]["dir"]) if cfg["data"]["dir"] else _out(cfg) / "data"


def _hidden(cfg) -> list[int]:
    widths = int_list(cfg, "network", "hidden")
    if not widths:
        raise ConfigError("network.hidden: need at least one hidden width")
    return widths


def _specs(cfg, input_dim: int) -> tuple[MlpSpec, MlpSpec]:
    """(expert spec with dropout, deterministic spec for everything else)."""
    hidden = _hidden(cfg)
    return (MlpSpec.hidden(input_dim, hidden, dropout_rate=cfg["network"]["dropout"]),
            MlpSpec.hidden(input_dim, hidden))


def _dataset(cfg):
    d = _data_dir(cfg)
    if not (d / "manifest.json").is_file():
        raise MissingInput(f"dataset not found: {d} (run gen-data first)")
    ds = load_dataset(d)
    if cfg["data"]["balance_train"]:
        ds = balance_train_split(ds, seed=cfg["data"]["seed"])
    return ds


def _glob(directory: Path, pattern: str) -> list[Path]:
    return sorted(p for p in directory.glob(pattern) if p.is_file())


def _run_hash(cfg) -> str:
    return config_hash({k: v for k, v in cfg.items() if k != "run"})


def _map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def record_manifest(cfg, command: str, files: list[Path], seeds, started: float) -> Path:
    """Merge this command's entry into ``<out_dir>/manifest.json``."""
    out = _out(cfg)
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"commands": {}}
    entries = {}
    for f in files:
        f = Path(f)
        if not f.is_file():
            raise RuntimeError(f"manifest references missing file {f}")
        try:
            key = str(f.resolve().relative_to(out.resolve()))
        except ValueError:
            key = str(f.resolve())
        entries[key] = _sha256(f)
    manifest["tool_version"] = __version__
    manifest["commands"][command] = {
        "config_hash": _run_hash(cfg),
        "seeds": seeds,
        "files": entries,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    write_json(path, manifest)
    return path


# -- commands ----------------------------------------------------------------

def cmd_gen_data(cfg, args) -> int:
    started = time.time()
    d = cfg["data"]
    if d["csv"]:
        src = Path(d["csv"])
        if not src.is_file():
            raise MissingInput(f"raw CSV not found: {src}")
        ds = preprocess(load_csv(src, d["label_column"]), split_seed=d["seed"])
        ds.meta["source"] = src.name
    else:
        gen = GenConfig(**{k: d[k] for k in GenConfig.__dataclass_fields__})
        ds = generate_synthetic_clinical(gen)
    files = save_dataset(ds, _data_dir(cfg))
    print(f"dataset: {len(ds.y_train)}/{len(ds.y_val)}/{len(ds.y_test)} rows, "
          f"train prevalence {ds.prevalence['train']:.4f} -> {_data_dir(cfg)}")
    record_manifest(cfg, "gen-data", files, {"data": d["seed"]}, started)
    return EXIT_OK


def _expert_seeds(cfg) -> list[int]:
    seeds = int_list(cfg, "expert", "seeds")
    return seeds if seeds else list(range(cfg["expert"]["n_experts"]))


def _train_one(task):
    ds, spec, sgd, path = task
    try:
        traj = train_expert(ds, spec, sgd)
    except TrajectoryDiverged as exc:
        return path, str(exc)
    save_trajectory(traj, path, traj_id=Path(path).stem)
    return path, None


def cmd_train_experts(cfg, args) -> int:
    started = time.time()
    ds = _dataset(cfg)
    spec, _ = _specs(cfg, ds.n_features)
    e = cfg["expert"]
    seeds = _expert_seeds(cfg)
    out = _out(cfg) / "experts"
    tasks = []
    for i, seed in enumerate(seeds, start=1):
        sgd = SgdConfig(lr=e["lr"], momentum=e["momentum"], epochs=e["epochs"], batch_size=e["batch_size"],
                        snapshot_every=e["snapshot_every"], seed=seed)
        tasks.append((ds, spec, sgd, out / f"expert_{i:04d}.btmt"))
    written = []
    for path, err in _map(_train_one, tasks, args.jobs):
        if err:
            log.error("%s: %s", Path(path).name, err)
        else:
            written.append(Path(path))
    print(f"trained {len(written)}/{len(tasks)} experts -> {out}")
    if not written:
        return EXIT_RUNTIME
    files = written + [p.with_name(p.name + ".json") for p in written]
    record_manifest(cfg, "train-experts", files, {"experts": seeds}, started)
    return EXIT_OK if len(written) == len(tasks) else EXIT_RUNTIME


def _fit_one(task):
    traj_path, out_path, objective, opt = task
    traj = load_trajectory(traj_path)
    path, trace = optimize_control_point(traj.theta0, traj.thetaT, objective, opt)
    save_path(path, out_path, meta={"source_trajectory": Path(traj_path).stem, "fit_config": asdict(opt),
                                    "iterations": trace.n_iters, "converged": trace.converged})
    trace_path = Path(out_path).with_suffix(".trace.csv")
    trace.write_csv(trace_path)
    return [Path(out_path), Path(str(out_path) + ".json"), trace_path]


def cmd_fit_bezier(cfg, args) -> int:
    started = time.time()
    trajs = _glob(_out(cfg) / "experts", "*.btmt")
    if not trajs:
        raise MissingInput(f"no trajectories in {_out(cfg) / 'experts'} (run train-experts first)")
    ds = _dataset(cfg)
    _, spec = _specs(cfg, ds.n_features)
    b = cfg["bezier"]
    objective = MlpObjective.from_dataset(spec, ds, batch_size=b["batch_size"], full_batch=b["full_batch"])
    out = _out(cfg) / "surrogates"
    tasks, seeds = [], []
    for tp in trajs:
        seed = int(json.loads(Path(str(tp) + ".json").read_text())["config"]["seed"])
        opt = ControlOptConfig(lr=b["lr"], tol=b["tol"], max_iters=b["max_iters"], mc_samples=b["mc_samples"], seed=seed)
        tasks.append((tp, out / f"{tp.stem}.btmb", objective, opt))
        seeds.append(seed)
    files = [f for group in _map(_fit_one, tasks, args.jobs) for f in group]
    print(f"fitted {len(tasks)} surrogates -> {out}")
    record_manifest(cfg, "fit-bezier", files, {"fits": seeds}, started)
    return EXIT_OK


def _condense_config(cfg, student_steps: int) -> CondenseConfig:
    c = cfg["condense"]
    return CondenseConfig(
        segment_length=c["segment_length"], t_start_max=c["t_start_max"], segment_scheme=c["segment_scheme"],
        student_steps=student_steps, meta_lr=c["meta_lr"], meta_momentum=c["meta_momentum"],
        eta_s_lr=c["eta_s_lr"], eta_s_momentum=c["eta_s_momentum"],
        batch_size=c["batch_size"] or None, max_iters=c["max_iters"], eval_every=c["eval_every"],
        eval_epochs=c["eval_epochs"], expert_epochs=c["expert_epochs"], seed=c["seed"],
    )


def synthetic_path(cfg) -> Path:
    c = cfg["condense"]
    return _out(cfg) / "condensed" / f"{c['method']}_ipc{c['ipc']}.csv"


def cmd_condense(cfg, args) -> int:
    started = time.time()
    c = cfg["condense"]
    method = c["method"]
    if method not in ("btm", "mtt", "random"):
        raise ConfigError(f"condense.method: expected btm, mtt or random, got {method!r}")
    ds = _dataset(cfg)
    _, spec = _specs(cfg, ds.n_features)
    out = synthetic_path(cfg)
    meta = {"method": method, "config_hash": _run_hash(cfg)}
    files = [out, out.with_name(out.name + ".json")]

    if method == "random":
        best = random_coreset(ds, c["ipc"], seed=c["init_seed"])
        best.eta_s = c["eta_s"]
    else:
        synth0 = init_synthetic(ds, c["ipc"], strategy=c["init"], seed=c["init_seed"])
        synth0.eta_s = c["eta_s"]
        if method == "btm":
            sources = _glob(_out(cfg) / "surrogates", "*.btmb")
            if not sources:
                raise MissingInput(f"no surrogates in {_out(cfg) / 'surrogates'} (run fit-bezier first)")
            ccfg = _condense_config(cfg, c["student_steps"])
            best, history = condense_run([load_path(p) for p in sources], ds, spec, synth0, ccfg)
        else:
            sources = _glob(_out(cfg) / "experts", "*.btmt")
            if not sources:
                raise MissingInput(f"no trajectories in {_out(cfg) / 'experts'} (run train-experts first)")
            ccfg = _condense_config(cfg, c["mtt_student_steps"])
            trajs = [load_trajectory(p) for p in sources]
            best, history = condense_run(None, ds, spec, synth0, ccfg, sampler=mtt_sampler(trajs, ccfg.expert_epochs))
        hist_path = out.with_suffix(".history.csv")
        history.write_csv(hist_path)
        files.append(hist_path)
        evals = history.evaluations
        meta["iterations"] = c["max_iters"]
        meta["best_val_auprc"] = max((r["val_auprc"] for r in evals), default=None)
    save_synthetic(best, out, ds.feature_names, meta)
    print(f"{method}: {len(best.labels)} synthetic rows (eta_s {best.eta_s:.6g}) -> {out}")
    record_manifest(cfg, f"condense:{method}:ipc{c['ipc']}", files,
                    {"condense": c["seed"], "init": c["init_seed"]}, started)
    return EXIT_OK


def _eval_config(cfg) -> EvalConfig:
    e = cfg["eval"]
    return EvalConfig(lr=e["lr"], momentum=e["momentum"], epochs=e["epochs"], n_seeds=e["n_seeds"], batch_size=e["batch_size"])


def cmd_evaluate(cfg, args) -> int:
    started = time.time()
    e, c = cfg["eval"], cfg["condense"]
    src = Path(e["synthetic"]) if e["synthetic"] else synthetic_path(cfg)
    if not src.is_file():
        raise MissingInput(f"synthetic dataset not found: {src}")
    ds = _dataset(cfg)
    _, spec = _specs(cfg, ds.n_features)
    ecfg = _eval_config(cfg)
    test = (ds.X_test, ds.y_test)
    results = _out(cfg) / "results.csv"
    eval_dir = _out(cfg) / "eval"
    synth = load_synthetic(src)
    method = src.stem.split("_ipc")[0]
    summary = evaluate_synthetic(synth, spec, test, ecfg)
    append_results(results, method, synth.ipc, summary)
    per_seed = eval_dir / f"{src.stem}.seeds.csv"
    write_per_seed(per_seed, summary)
    files = [results, per_seed]
    print(f"{method} ipc={synth.ipc}: AUROC {summary.auroc_mean:.4f}+-{summary.auroc_std:.4f} "
          f"AUPRC {summary.auprc_mean:.4f}+-{summary.auprc_std:.4f}")
    if e["include_full"]:
        full = evaluate_training_set(ds.X_train, ds.y_train, spec, test, ecfg)
        append_results(results, "full", "all", full)
        full_seeds = eval_dir / "full.seeds.csv"
        write_per_seed(full_seeds, full)
        files.append(full_seeds)
        print(f"full: AUROC {full.auroc_mean:.4f}+-{full.auroc_std:.4f} AUPRC {full.auprc_mean:.4f}+-{full.auprc_std:.4f}")
    record_manifest(cfg, f"evaluate:{src.stem}", files, {"eval": list(range(ecfg.n_seeds))}, started)
    return EXIT_OK


def storage_report(traj_files: list[Path], surrogate_files: list[Path], max_iters: int, batch_size: int,
                   n_train: int | None, mc_samples: int = 2) -> dict:
    trajs, surs = [], {}
    for p in traj_files:
        t = load_trajectory(p)
        trajs.append({"id": p.stem, "n_checkpoints": t.K + 1, "n_params": t.checkpoints.shape[1],
                      "payload_bytes": t.payload_nbytes, "file_bytes": p.stat().st_size,
                      "ratio_vs_surrogate": storage_ratio(t.K + 1)})
    for p in surrogate_files:
        s = load_path(p)
        surs[p.stem] = {"id": p.stem, "n_params": s.n_params, "payload_bytes": s.payload_nbytes,
                        "file_bytes": p.stat().st_size}
    for t in trajs:
        if t["id"] in surs:
            t["measured_payload_ratio"] = t["payload_bytes"] / surs[t["id"]]["payload_bytes"]
    report = {
        "trajectories": trajs,
        "surrogates": [surs[k] for k in sorted(surs)],
        "total_trajectory_bytes": sum(t["payload_bytes"] for t in trajs),
        "total_surrogate_bytes": sum(s["payload_bytes"] for s in surs.values()),
    }
    if n_train:
        report["control_fit_cost"] = {
            "max_iters": max_iters, "batch_size": batch_size, "n_train": n_train, "mc_samples": mc_samples,
            "equivalent_epochs": control_fit_cost_epochs(max_iters, batch_size, n_train, mc_samples),
        }
    return report


def cmd_report_storage(cfg, args) -> int:
    started = time.time()
    trajs = [Path(p) for p in args.trajectories] if args.trajectories else _glob(_out(cfg) / "experts", "*.btmt")
    surs = [Path(p) for p in args.surrogates] if args.surrogates else _glob(_out(cfg) / "surrogates", "*.btmb")
    for p in trajs + surs:
        if not p.is_file():
            raise MissingInput(f"file not found: {p}")
    if not trajs and not surs:
        raise MissingInput(f"no trajectory or surrogate files under {_out(cfg)}")
    n_train = args.n_train
    if n_train is None and (_data_dir(cfg) / "manifest.json").is_file():
        n_train = _dataset(cfg).y_train.shape[0]
    b = cfg["bezier"]
    report = storage_report(trajs, surs, b["max_iters"], b["batch_size"], n_train, b["mc_samples"])
    out = _out(cfg) / "storage_report.json"
    write_json(out, report)
    for t in report["trajectories"]:
        print(f"{t['id']}: {t['n_checkpoints']} checkpoints, {t['payload_bytes']} B, ratio {t['ratio_vs_surrogate']:.2f}")
    if "control_fit_cost" in report:
        print(f"control-point fit cost: {report['control_fit_cost']['equivalent_epochs']:.3f} equivalent epochs")
    record_manifest(cfg, "report-storage", [out], {}, started)
    return EXIT_OK


def _theory_one(task):
    traj_path, sur_path, objective, spec, inputs, th, out_dir = task
    report = theorem_report(load_trajectory(traj_path), load_path(sur_path), objective, spec, inputs,
                            n_t=th["n_t"], n_t_pred=th["n_t_pred"], n_x=th["n_x"], seed=th["seed"])
    stem = Path(traj_path).stem
    json_path, text_path = Path(out_dir) / f"{stem}.json", Path(out_dir) / f"{stem}.txt"
    write_report(report, json_path, text_path)
    return stem, report.to_dict(), [json_path, text_path]


def cmd_theory_report(cfg, args) -> int:
    started = time.time()
    trajs = {p.stem: p for p in _glob(_out(cfg) / "experts", "*.btmt")}
    surs = {p.stem: p for p in _glob(_out(cfg) / "surrogates", "*.btmb")}
    if not trajs or not surs:
        raise MissingInput(f"need trajectories and surrogates under {_out(cfg)}")
    unmatched = sorted(set(trajs) ^ set(surs))
    if unmatched:
        raise MissingInput(f"unmatched trajectory/surrogate ids: {', '.join(unmatched)}")
    ds = _dataset(cfg)
    _, spec = _specs(cfg, ds.n_features)
    objective = MlpObjective.from_dataset(spec, ds, batch_size=cfg["bezier"]["batch_size"])
    out_dir = _out(cfg) / "theory"
    tasks = [(trajs[k], surs[k], objective, spec, ds.X_train, cfg["theory"], out_dir) for k in sorted(trajs)]
    results = _map(_theory_one, tasks, args.jobs)
    reports = {stem: rep for stem, rep, _ in results}
    n = len(reports)
    summary = {
        "n_pairs": n,
        "avg_loss_bound_holds": sum(r["bound_holds"] for r in reports.values()),
        "curvature_holds": sum(r["curvature_holds"] for r in reports.values()),
        "prediction_bound_holds": sum(r["pred_holds"] for r in reports.values()),
        "mean_kappa": float(np.mean([r["kappa"] for r in reports.values()])),
        "mean_beta_hat": float(np.mean([r["beta_hat"] for r in reports.values()])),
        "mean_pred_ratio": float(np.mean([r["pred_ratio"] for r in reports.values()])),
        "pairs": reports,
    }
    summary_path = out_dir / "summary.json"
    write_json(summary_path, summary)
    print(f"theory: (i) {summary['avg_loss_bound_holds']}/{n}, (ii) {summary['curvature_holds']}/{n}, "
          f"(iii) {summary['prediction_bound_holds']}/{n} pairs hold")
    files = [f for _, _, fs in results for f in fs] + [summary_path]
    record_manifest(cfg, "theory-report", files, {"theory": cfg["theory"]["seed"]}, started)
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate (or preprocess) the tabular dataset"),
    "train-experts": (cmd_train_experts, "train SGD expert trajectories"),
    "fit-bezier": (cmd_fit_bezier, "fit a Bezier surrogate to every trajectory"),
    "condense": (cmd_condense, "condense the training set (method btm, mtt or random)"),
    "evaluate": (cmd_evaluate, "train from scratch on a condensed set and report test metrics"),
    "report-storage": (cmd_report_storage, "storage and control-point cost accounting"),
    "theory-report": (cmd_theory_report, "numerical checks of the surrogate guarantees"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI config file")
    common.add_argument("--profile", default="paper", help="preset: paper (default) or desk")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--out", help="shorthand for --set run.out_dir=OUT")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-trajectory work")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="btm", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "report-storage":
            p.add_argument("--trajectories", nargs="*", help="trajectory files (default: experts/*.btmt)")
            p.add_argument("--surrogates", nargs="*", help="surrogate files (default: surrogates/*.btmb)")
            p.add_argument("--n-train", type=int, help="training-set size for the cost formula")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        overrides = list(args.overrides) + ([f"run.out_dir={args.out}"] if args.out else [])
        cfg = load_config(args.config, args.profile, overrides)
        return COMMANDS[args.command][0](cfg, args)
    except (ConfigError, MissingInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
