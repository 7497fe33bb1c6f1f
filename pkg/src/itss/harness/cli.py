"""Command-line entry point: ``itss <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from itss.errors import ItssError
from itss.harness import artifacts, report
from itss.harness.config import ExperimentConfig, RunManifest, resolve_out
from itss.harness.runner import EXPERIMENTS, Lab, run_experiment
from itss.subspace import extract_basis, random_basis, train_in_subspace
from itss.train import train_full

log = logging.getLogger("itss")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    return cfg


def _stem(task, seed, dim=None):
    return f"{task}_s{seed}" + ("" if dim is None else f"_d{dim}")


def cmd_train_full(args):
    cfg = _config(args)
    out = resolve_out(args.out, cfg)
    lab = Lab(cfg, out)
    t = lab.task(args.task)
    res = train_full(lab.base_model(args.task), t.train, t.val, cfg.train_config(args.task, args.seed), args.task)
    path = artifacts.save(res.trajectory, out / f"{_stem(args.task, args.seed)}.trajectory.itss")
    _emit(out / f"{_stem(args.task, args.seed)}.full.json",
          {"task": args.task, "seed": args.seed, "accuracy": res.final_accuracy, "trajectory": str(path)})


def cmd_extract_basis(args):
    cfg = _config(args)
    out = resolve_out(args.out, cfg)
    src = Path(args.trajectory) if args.trajectory else out / f"{_stem(args.task, args.seed)}.trajectory.itss"
    traj = artifacts.load_trajectory(src, hint=f"itss train-full --task {args.task} --seed {args.seed}")
    dim = args.dim or cfg.task_dim(args.task)
    basis = extract_basis(traj, dim)
    path = artifacts.save(basis, out / f"{_stem(args.task, args.seed, dim)}.basis.itss")
    _emit(None, {"basis": str(path), "dims": basis.dims,
                 "singular_values": [list(map(float, s)) for s in basis.singular_values]})


def cmd_train_subspace(args):
    cfg = _config(args)
    out = resolve_out(args.out, cfg)
    lab = Lab(cfg, out)
    dim = args.dim or cfg.task_dim(args.task)
    model = lab.base_model(args.task)
    if args.random:
        basis = random_basis(model.layouts, dim, args.seed, [pv.values for pv in model.hidden])
        tag = "random"
    else:
        src = Path(args.basis) if args.basis else out / f"{_stem(args.task, args.seed, dim)}.basis.itss"
        basis = artifacts.load_basis(
            src, hint=f"itss extract-basis --task {args.task} --seed {args.seed} --dim {dim}")
        tag = "intrinsic"
    t = lab.task(args.task)
    res, state = train_in_subspace(model, basis, t.train, t.val, cfg.train_config(args.task, args.seed),
                                   **cfg.subspace_kwargs())
    path = artifacts.save(state, out / f"{_stem(args.task, args.seed, dim)}.{tag}.state.itss")
    _emit(out / f"{_stem(args.task, args.seed, dim)}.{tag}.json",
          {"task": args.task, "seed": args.seed, "basis": basis.source, "accuracy": res.final_accuracy,
           "state": str(path)})


def cmd_experiment(args):
    cfg = _config(args)
    out = resolve_out(args.out, cfg)
    names = EXPERIMENTS if args.name == "all" else [args.name]
    for name in names:
        man = run_experiment(name, cfg, out, args.parallel)
        for fname in sorted(man.artifacts):
            if fname.endswith(".csv") and not fname.startswith("update_vector"):
                print(f"== {fname}")
                print(Path(man.artifacts[fname]).read_text(encoding="utf-8"), end="")


def cmd_report(args):
    run = Path(args.run)
    paths = sorted(run.glob("manifest_*.json"))
    if not paths:
        raise ItssError(f"no manifests in {run}; run `itss experiment <name> --out {run}` first")
    text = report.summarize([RunManifest.load(p) for p in paths])
    (run / "summary.csv").write_text(text, encoding="utf-8", newline="")
    print(text, end="")


def cmd_write_config(args):
    ExperimentConfig().save(args.path)
    print(args.path)


def _emit(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n", encoding="utf-8")
    print(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="itss", description="Intrinsic task-specific subspace laboratory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, task=True):
        sp.add_argument("--config", help="experiment config JSON (defaults built in)")
        sp.add_argument("--out", help="output directory (overrides $ITSS_OUT and the config)")
        if task:
            sp.add_argument("--task", required=True, help="task id, e.g. task1")
            sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("train-full", help="full-space fine-tuning; writes the trajectory")
    common(sp)
    sp.set_defaults(func=cmd_train_full)

    sp = sub.add_parser("extract-basis", help="SVD of a stored trajectory")
    common(sp)
    sp.add_argument("--dim", type=int)
    sp.add_argument("--trajectory", help="trajectory file (default: from --out)")
    sp.set_defaults(func=cmd_extract_basis)

    sp = sub.add_parser("train-subspace", help="train inside a stored or random basis")
    common(sp)
    sp.add_argument("--dim", type=int)
    sp.add_argument("--basis", help="basis file (default: from --out)")
    sp.add_argument("--random", action="store_true", help="use a random basis instead")
    sp.set_defaults(func=cmd_train_subspace)

    sp = sub.add_parser("experiment", help="run an experiment over the whole suite")
    sp.add_argument("name", choices=[*EXPERIMENTS, "all"])
    common(sp, task=False)
    sp.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    sp.add_argument("--parallel", type=int, default=1, help="worker processes")
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("report", help="seed means and stds for a finished run directory")
    sp.add_argument("--run", required=True, help="run directory holding manifests")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("write-config", help="write the default config to a file")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_write_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ItssError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
