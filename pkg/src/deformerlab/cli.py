"""Command-line entry point: ``python -m deformerlab <command>``.

Every command writes ``manifest-<command>.json`` (``manifest-train-<variant>.json``
for training) into ``--out`` with the fully resolved configuration, the
inputs it read and the files it wrote.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__, dnet, geom, mp as mpsel, pipeline, servo, softsim
from .nn import LrSchedule

log = logging.getLogger("deformerlab")


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise SystemExit(f"{path}: config must be a JSON object")
    return cfg


def _write_manifest(out: Path, name: str, argv: List[str], resolved: dict, outputs: List[Path], t0: float) -> Path:
    manifest = {
        "command": argv[0] if argv else name,
        "argv": argv,
        "version": __version__,
        "resolved_config": resolved,
        "outputs": [str(p) for p in outputs],
        "started_unix": t0,
        "seconds": round(time.time() - t0, 3),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    path = out / f"manifest-{name}.json"
    path.write_text(json.dumps(manifest, indent=2, default=_jsonable) + "\n")
    return path


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


# --- commands -------------------------------------------------------------------

def cmd_gen_data(args, cfg: dict, out: Path):
    gen = dict(cfg.get("gen", {}))
    gen["seed"] = args.seed
    if args.full_scale:
        gen.update(num_configs=150, shapes_per_config=200)
    if args.num_configs is not None:
        gen["num_configs"] = args.num_configs
    if args.shapes_per_config is not None:
        gen["shapes_per_config"] = args.shapes_per_config
    gcfg = pipeline.GenConfig.from_dict(gen)
    ds = pipeline.generate_dataset(gcfg, workers=args.workers)
    path = out / "dataset.dfns"
    pipeline.save_dataset(ds, path)
    log.info("wrote %d samples to %s", len(ds), path)
    return {"gen": gcfg.to_dict(), "workers": args.workers}, [path, Path(str(path) + ".meta.json")]


def _train_config(args, cfg: dict) -> dnet.TrainConfig:
    t = dict(cfg.get("train", {}))
    sched = LrSchedule(**t.pop("schedule", {}))
    t.update(seed=args.seed, variant="deformer" if args.variant == "baseline" else args.variant)
    if args.epochs is not None:
        t["epochs"] = args.epochs
    if args.batch_size is not None:
        t["batch_size"] = args.batch_size
    return dnet.TrainConfig(schedule=sched, **t)


def cmd_train(args, cfg: dict, out: Path):
    ds = pipeline.load_dataset(args.data)
    tcfg = _train_config(args, cfg)
    fit = dnet.train_baseline_head if args.variant == "baseline" else dnet.train
    res = fit(ds, tcfg)
    model_path, curve_path = out / f"{args.variant}.dfnm", out / f"{args.variant}_curve.csv"
    res.model.save(model_path)
    dnet.write_curve_csv(res.curve, curve_path)
    log.info("%s: epoch-0 train MSE %.3f mm2, final train %.3f mm2, test %.3f mm2 (%.0f s)", args.variant,
             res.curve[0].train_mse_mm2, res.final_train_mse, res.final_test_mse, res.seconds)
    resolved = {"variant": args.variant, "data": str(args.data), "train": asdict(tcfg),
                "final_train_mse_mm2": res.final_train_mse, "final_test_mse_mm2": res.final_test_mse,
                "seconds": res.seconds}
    return resolved, [model_path, curve_path]


def _servo_config(args, cfg: dict) -> servo.ServoConfig:
    s = dict(cfg.get("servo", {}))
    if args.max_iters is not None:
        s["max_iters"] = args.max_iters
    return servo.ServoConfig(**s)


def _parse_mp(text: str):
    if text in pipeline.MP_METHODS or text == "adversarial":
        return text
    try:
        xyz = [float(v) for v in text.split(",")]
    except ValueError:
        xyz = []
    if len(xyz) != 3:
        raise SystemExit(f"--mp must be one of {pipeline.MP_METHODS + ('adversarial',)} or 'x,y,z'")
    return np.array(xyz)


def cmd_servo(args, cfg: dict, out: Path):
    cases = pipeline.load_dataset(args.data)
    gcfg = pipeline.GenConfig.from_dict(cases.meta["gen_config"]) if "gen_config" in cases.meta else pipeline.GenConfig()
    scfg = replace(_servo_config(args, cfg), cloud_size=gcfg.cloud_size, seed=gcfg.cloud_seed,
                   grasp_radius=gcfg.grasp_radius)
    models = {"deformer": dnet.DeformerNet.load(args.model)}
    if args.mp_model:
        models["mp"] = dnet.DeformerNet.load(args.mp_model)
    mesh, goal = pipeline.case_setup(cases, args.index, gcfg)
    method = _parse_mp(args.mp)
    if isinstance(method, str) and method == "ground-truth":
        method = cases.mp[args.index].astype(np.float64)
    elif isinstance(method, str) and method == "adversarial":
        method = pipeline.adversarial_mp(gcfg)
    point, trace = servo.run_full_pipeline(mesh, goal, method, models, scfg, args.m)
    paths = [out / "trace.csv", out / "goal.xyz", out / "final.xyz", out / "final.obj"]
    trace.to_csv(paths[0])
    geom.save_xyz(goal, paths[1])
    geom.save_xyz(softsim.surface_cloud(mesh, scfg.cloud_size, scfg.seed), paths[2])
    softsim.export_obj(mesh, paths[3])
    log.info("mp %s, chamfer %.4f -> %.4f m after %d iterations (%s)", np.round(point, 4), trace.initial_chamfer,
             trace.final_chamfer, len(trace.records) - 1, trace.outcome)
    resolved = {"data": str(args.data), "index": args.index, "model": str(args.model), "mp_model": args.mp_model,
                "mp": args.mp, "mp_point": point, "m": args.m, "servo": asdict(scfg), "outcome": trace.outcome}
    return resolved, paths


def cmd_eval(args, cfg: dict, out: Path):
    models = {"deformer": dnet.DeformerNet.load(args.deformer)}
    if args.mp_model:
        models["mp"] = dnet.DeformerNet.load(args.mp_model)
    if args.cases:
        cases = pipeline.load_dataset(args.cases)
    else:
        cases = pipeline.holdout_cases(args.num_cases, args.seed)
    mse = {}
    if args.train_data:
        ds = pipeline.load_dataset(args.train_data)
        frac = cfg.get("train", {}).get("test_fraction", 0.1)
        mse["deformer"] = pipeline.model_mse(models["deformer"], ds, frac, args.seed)
        if args.baseline:
            mse["baseline"] = pipeline.model_mse(dnet.BaselineNet.load(args.baseline), ds, frac, args.seed)
    ecfg = pipeline.EvalConfig(_servo_config(args, cfg), m=args.m, trace_dir=str(out / "traces"))
    report = pipeline.evaluate(models, cases, ecfg, mse)
    paths = [out / "report.csv", out / "summary.txt"]
    report.to_csv(paths[0])
    paths[1].write_text(report.summary())
    if mse:
        paths.append(out / "mse.csv")
        report.mse_to_csv(paths[-1])
    sys.stdout.write(report.summary())
    resolved = {"eval": ecfg.to_dict(), "cases": args.cases or f"{args.num_cases} generated",
                "cases_gen": cases.meta.get("gen_config"), "deformer": str(args.deformer),
                "mp_model": args.mp_model, "baseline": args.baseline, "train_data": args.train_data}
    return resolved, paths


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}


def cmd_export_plots(args, cfg: dict, out: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    src = Path(args.inputs)
    paths = []
    curves = sorted(src.glob("*_curve.csv"))
    if curves:
        fig, ax = plt.subplots(figsize=(6, 4))
        for p in curves:
            c = _read_csv(p)
            ax.semilogy(c["epoch"], c["train_mse_mm2"], label=f"{p.stem[:-6]} train")
            if np.any(np.isfinite(c["test_mse_mm2"])):
                ax.semilogy(c["epoch"], c["test_mse_mm2"], "--", label=f"{p.stem[:-6]} test")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE [mm$^2$]")
        ax.legend()
        fig.tight_layout()
        paths.append(out / "loss_curves.png")
        fig.savefig(paths[-1], dpi=120)
        plt.close(fig)
    traces = sorted(p for p in src.rglob("*.csv") if p.name == "trace.csv" or p.parent.name == "traces")
    if traces:
        fig, ax = plt.subplots(figsize=(6, 4))
        for p in traces:
            t = _read_csv(p)
            if t:
                ax.plot(t["iter"], t["chamfer_m"], marker=".", alpha=0.6)
        ax.set_xlabel("iteration")
        ax.set_ylabel("Chamfer distance [m]")
        fig.tight_layout()
        paths.append(out / "servo_traces.png")
        fig.savefig(paths[-1], dpi=120)
        plt.close(fig)
    if not paths:
        log.warning("no *_curve.csv or trace CSVs found under %s", src)
    return {"inputs": str(src), "curves": [str(p) for p in curves], "traces": [str(p) for p in traces]}, paths


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--config", help="JSON config with optional 'gen', 'train' and 'servo' sections")
    common.add_argument("--out", default="out", help="output directory (default ./out)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="deformerlab", description="Shape servoing of a simulated soft box.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="simulate a DFNS training dataset")
    g.add_argument("--num-configs", type=int)
    g.add_argument("--shapes-per-config", type=int)
    g.add_argument("--full-scale", action="store_true", help="150 episodes x 200 shapes")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train DeformerNet, the MP regressor or the baseline")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=["deformer", "mp", "baseline"], default="deformer")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("servo", parents=[common], help="servo the box to one goal of a dataset")
    s.add_argument("--model", required=True, help="DeformerNet checkpoint")
    s.add_argument("--data", required=True, help="dataset holding the goal")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--mp", default="heuristic", help="heuristic | regression | ground-truth | adversarial | x,y,z")
    s.add_argument("--mp-model", help="MP regression checkpoint")
    s.add_argument("-m", "--m", type=int, default=mpsel.DEFAULT_M, help="top keypoints for the heuristic")
    s.add_argument("--max-iters", type=int)
    s.set_defaults(func=cmd_servo)

    e = sub.add_parser("eval", parents=[common], help="servo held-out goals with every MP method")
    e.add_argument("--deformer", required=True)
    e.add_argument("--mp-model")
    e.add_argument("--baseline")
    e.add_argument("--cases", help="DFNS file of goals (default: generate --num-cases held-out episodes)")
    e.add_argument("--num-cases", type=int, default=20)
    e.add_argument("--train-data", help="training DFNS for the train/test MSE columns")
    e.add_argument("-m", "--m", type=int, default=mpsel.DEFAULT_M)
    e.add_argument("--max-iters", type=int)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-plots", parents=[common], help="plot loss curves and servo traces")
    x.add_argument("--inputs", default=".", help="directory searched for *_curve.csv and trace CSVs")
    x.set_defaults(func=cmd_export_plots)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    resolved, outputs = args.func(args, _load_config(args.config), out)
    resolved = {"seed": args.seed, "config_file": args.config, **resolved}
    name = f"{args.command}-{args.variant}" if args.command == "train" else args.command
    manifest = _write_manifest(out, name, argv, resolved, outputs, t0)
    log.info("manifest: %s", manifest)
    return 0
