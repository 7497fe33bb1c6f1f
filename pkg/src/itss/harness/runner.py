"""Experiment orchestration with an on-disk cache of finished runs.

Every unit of work (one full-space run, one subspace run, one outlier
disabling run) is a pure function of ``(config, task, seed, ...)``. Results
are cached under ``<out>/cache`` keyed by a hash of the settings they depend
on, so experiments that share work (transfer reuses transductive
trajectories, ablation reuses the headline dimension) never redo it, and an
interrupted experiment resumes where it stopped.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path

import numpy as np

from itss import analysis
from itss.data import SuiteParams, generate_from_params
from itss.harness import artifacts, report
from itss.harness.config import ExperimentConfig, RunManifest, canonical_hash
from itss.nn import ModelSpec, init_model
from itss.seeding import derive_seed, name_key
from itss.subspace import (
    extract_basis,
    random_basis,
    train_in_subspace,
    unified_basis,
)
from itss.train import train_frozen, train_full

log = logging.getLogger("itss")

EXPERIMENTS = ("transductive", "transfer", "unified", "outliers", "ablation")


@lru_cache(maxsize=4)
def _suite(params: SuiteParams):
    return generate_from_params(params)


class Lab:
    def __init__(self, config: ExperimentConfig, out, parallel: int = 1):
        self.config = config
        self.out = Path(out)
        self.parallel = max(1, int(parallel))
        self.tasks = _suite(config.suite_params())
        self.task_ids = [t.spec.task_id for t in self.tasks]
        train_key = config.training_hash()
        sub_key = canonical_hash({"training": train_key, "subspace": config.subspace_kwargs(),
                                  "k_sigma": config.k_sigma, "top_k": config.top_k})
        self.traj_dir = self.out / "cache" / f"full-{train_key}"
        self.run_dir = self.out / "cache" / f"sub-{sub_key}"

    # ---- single units of work -------------------------------------------------

    def task(self, task_id):
        return self.tasks[self.task_ids.index(task_id)]

    def base_model(self, task_id):
        spec = ModelSpec(num_classes=self.task(task_id).spec.num_classes, **self.config.model_kwargs())
        return init_model(spec)

    def traj_path(self, task_id, seed) -> Path:
        return self.traj_dir / f"{task_id}_s{seed}.itss"

    def full(self, task_id, seed) -> dict:
        """Full fine-tuning; caches the trajectory and its metrics."""
        meta = self.traj_dir / f"{task_id}_s{seed}.json"
        if meta.exists() and self.traj_path(task_id, seed).exists():
            return _read_json(meta)
        t = self.task(task_id)
        res = train_full(self.base_model(task_id), t.train, t.val,
                         self.config.train_config(task_id, seed), task_id)
        artifacts.save(res.trajectory, self.traj_path(task_id, seed))
        out = {"accuracy": res.final_accuracy, "val_accuracy": [m.val_accuracy for m in res.metrics]}
        _write_json(meta, out)
        return out

    def trajectory(self, task_id, seed):
        self.full(task_id, seed)
        return artifacts.load_trajectory(self.traj_path(task_id, seed))

    def basis(self, kind, source, seed, dim):
        if kind == "intrinsic":
            return extract_basis(self.trajectory(source, seed), dim)
        if kind == "random":
            origin = [pv.values for pv in self.base_model(self.task_ids[0]).hidden]
            layouts = self.base_model(self.task_ids[0]).layouts
            return random_basis(layouts, dim, derive_seed(seed, 0x4D, name_key(source), dim), origin)
        if kind == "unified":
            return unified_basis([self.trajectory(t, seed) for t in self.task_ids])
        if kind == "zeroshot":
            return unified_basis([self.trajectory(t, seed) for t in self.task_ids], exclude=source)
        raise ValueError(f"unknown basis kind {kind!r}")

    def subspace(self, kind, source, target, seed, dim) -> dict:
        """Train ``target`` in a basis; ``source`` names the task the basis
        comes from (the excluded task for zero-shot)."""
        key = f"{kind}-{source}-{target}-s{seed}-d{dim}"
        meta = self.run_dir / f"{key}.json"
        if meta.exists():
            return _read_json(meta)
        t = self.task(target)
        if kind == "frozen":
            res = train_frozen(self.base_model(target), t.train, t.val, self.config.train_config(target, seed))
            out = {"accuracy": res.final_accuracy, "dims": []}
        else:
            basis = self.basis(kind, source, seed, dim)
            res, state = train_in_subspace(self.base_model(target), basis, t.train, t.val,
                                           self.config.train_config(target, seed),
                                           **self.config.subspace_kwargs())
            artifacts.save(state, self.run_dir / f"{key}.state.itss")
            out = {"accuracy": res.final_accuracy, "dims": basis.dims}
        _write_json(meta, out)
        return out

    def state(self, kind, source, target, seed, dim):
        self.subspace(kind, source, target, seed, dim)
        return artifacts.load_state(self.run_dir / f"{kind}-{source}-{target}-s{seed}-d{dim}.state.itss")

    def outlier_run(self, task_id, seed) -> dict:
        meta = self.run_dir / f"outliers-{task_id}-s{seed}.json"
        if meta.exists():
            return _read_json(meta)
        dim = self.config.task_dim(task_id)
        basis = self.basis("intrinsic", task_id, seed, dim)
        state = self.state("intrinsic", task_id, task_id, seed, dim)
        rep = analysis.outlier_report(analysis.update_vector(basis, state), self.config.k_sigma)
        model = self.base_model(task_id)
        res = analysis.disable_and_finetune(
            model, self.task(task_id), rep, self.config.train_config(task_id, seed),
            mask_seed=derive_seed(seed, 0x0D, name_key(task_id)),
            full_accuracy=self.full(task_id, seed)["accuracy"])
        positions, overlap = analysis.top_outlier_positions(rep, model.layouts, self.config.top_k)
        out = {
            "outlier_accuracy": res.outlier_accuracy,
            "random_accuracy": res.random_accuracy,
            "full_accuracy": res.full_accuracy,
            "flagged": [int(l.indices.size) for l in rep.layers],
            "fraction": rep.fraction(model.num_hidden_params()),
            "top_positions": [[{"flat": p[0], "tensor": p[1], "index": list(p[2])} for p in ps]
                              for ps in positions],
            "overlap": overlap,
        }
        _write_json(meta, out)
        return out

    # ---- fan-out ------------------------------------------------------------------

    def run_all(self, method, jobs):
        """Run ``getattr(self, method)(*job)`` for every job, possibly in worker
        processes. Results come back in job order."""
        jobs = list(jobs)
        if self.parallel == 1 or len(jobs) < 2:
            return [getattr(self, method)(*j) for j in jobs]
        args = [(self.config.to_dict(), str(self.out), method, j) for j in jobs]
        with ProcessPoolExecutor(max_workers=self.parallel) as ex:
            return list(ex.map(_worker, args))

    def manifest(self, name) -> RunManifest:
        return RunManifest(name, self.config.hash(), self.config.to_dict())

    def finish(self, man: RunManifest, files: dict):
        for fname, text in files.items():
            path = self.out / fname
            path.write_text(text, encoding="utf-8", newline="")
            man.artifacts[fname] = str(path)
        man.finished = time.time()
        man.save(self.out / f"manifest_{man.experiment}.json")
        return man


def _worker(args):
    cfg, out, method, job = args
    return getattr(Lab(ExperimentConfig.from_dict(cfg), out), method)(*job)


def _read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def _per_seed(results, tasks, seeds):
    """Reshape a flat job-ordered list (task-major) into ``{task: [acc per seed]}``."""
    it = iter(results)
    return {t: [next(it)["accuracy"] for _ in seeds] for t in tasks}


# ---- experiments ---------------------------------------------------------------------


def transductive(lab: Lab) -> RunManifest:
    """Full / Freeze / Random / Intrinsic per task."""
    cfg, tasks, seeds = lab.config, lab.task_ids, lab.config.seeds
    man = lab.manifest("transductive")
    full = _per_seed(lab.run_all("full", [(t, s) for t in tasks for s in seeds]), tasks, seeds)
    rows = {"Full": full}
    for label, kind in (("Freeze", "frozen"), ("Random", "random"), ("Intrinsic", "intrinsic")):
        jobs = [(kind, t, t, s, cfg.task_dim(t)) for t in tasks for s in seeds]
        rows[label] = _per_seed(lab.run_all("subspace", jobs), tasks, seeds)
    man.metrics = {"rows": rows, "dims": {t: cfg.task_dim(t) for t in tasks}}
    return lab.finish(man, {"transductive.csv": report.method_table(rows, tasks)})


def transfer(lab: Lab) -> RunManifest:
    """Every target trained in every other task's intrinsic basis, plus random."""
    cfg, tasks, seeds = lab.config, lab.task_ids, lab.config.seeds
    man = lab.manifest("transfer")
    lab.run_all("full", [(t, s) for t in tasks for s in seeds])
    jobs = [("intrinsic", src, tgt, s, cfg.dim) for src in tasks for tgt in tasks for s in seeds]
    jobs += [("random", tgt, tgt, s, cfg.dim) for tgt in tasks for s in seeds]
    res = lab.run_all("subspace", jobs)
    n = len(tasks) * len(seeds)
    acc = np.array([[np.mean([r["accuracy"] for r in res[(i * len(tasks) + j) * len(seeds):
                                                       (i * len(tasks) + j + 1) * len(seeds)]])
                     for j in range(len(tasks))] for i in range(len(tasks))])
    rnd = np.array([np.mean([r["accuracy"] for r in res[len(tasks) * n + j * len(seeds):
                                                      len(tasks) * n + (j + 1) * len(seeds)]])
                    for j in range(len(tasks))])
    drops, rnd_drops, row_means = analysis.transfer_matrix(np.diag(acc), acc, rnd)
    off = ~np.eye(len(tasks), dtype=bool)
    man.metrics = {"accuracy": acc.tolist(), "random_accuracy": rnd.tolist(), "drops": drops.tolist(),
                   "random_drops": rnd_drops.tolist(), "row_means": row_means.tolist(),
                   "mean_transferred_accuracy": float(acc[off].mean()),
                   "mean_random_accuracy": float(rnd.mean())}
    return lab.finish(man, {"transfer_matrix.csv": report.transfer_table(drops, rnd_drops, row_means, tasks)})


def unified(lab: Lab) -> RunManifest:
    """Full / Random / Zeroshot / Unified, plus the cosine-similarity matrix of
    the low-dimensional vectors learned in the unified basis."""
    tasks, seeds = lab.task_ids, lab.config.seeds
    man = lab.manifest("unified")
    full = _per_seed(lab.run_all("full", [(t, s) for t in tasks for s in seeds]), tasks, seeds)
    dim = len(tasks)
    rnd = lab.run_all("subspace", [("random", t, t, s, dim) for t in tasks for s in seeds])
    zs = lab.run_all("subspace", [("zeroshot", t, t, s, 0) for t in tasks for s in seeds])
    uni = lab.run_all("subspace", [("unified", "all", t, s, 0) for t in tasks for s in seeds])
    rows = {"Full": full, "Random": _per_seed(rnd, tasks, seeds),
            "Zeroshot": _per_seed(zs, tasks, seeds), "Unified": _per_seed(uni, tasks, seeds)}
    sims = [analysis.similarity_matrix([lab.state("unified", "all", t, s, 0) for t in tasks]) for s in seeds]
    sim = np.mean(sims, axis=0)
    man.metrics = {"rows": rows, "unified_dims": uni[0]["dims"], "zeroshot_dims": zs[0]["dims"],
                   "similarity": sim.tolist()}
    return lab.finish(man, {"unified.csv": report.method_table(rows, tasks),
                            "similarity.csv": report.square_table(sim, tasks)})


def outliers(lab: Lab) -> RunManifest:
    """Outlier dimensions of the intrinsic update and the disabling study."""
    tasks, seeds = lab.task_ids, lab.config.seeds
    man = lab.manifest("outliers")
    lab.run_all("subspace", [("intrinsic", t, t, s, lab.config.task_dim(t)) for t in tasks for s in seeds])
    res = lab.run_all("outlier_run", [(t, s) for t in tasks for s in seeds])
    per_task = {t: res[i * len(seeds):(i + 1) * len(seeds)] for i, t in enumerate(tasks)}
    doc = {"k_sigma": lab.config.k_sigma, "seeds": list(seeds), "tasks": {}}
    for t, runs in per_task.items():
        doc["tasks"][t] = {
            "flagged_fraction": float(np.mean([r["fraction"] for r in runs])),
            "flagged_per_layer": [r["flagged"] for r in runs],
            "full_accuracy": float(np.mean([r["full_accuracy"] for r in runs])),
            "outlier_masked_accuracy": float(np.mean([r["outlier_accuracy"] for r in runs])),
            "random_masked_accuracy": float(np.mean([r["random_accuracy"] for r in runs])),
            "top_positions": runs[0]["top_positions"],
            "layer_overlap": float(np.mean([r["overlap"] for r in runs])),
        }
    man.metrics = {t: runs for t, runs in per_task.items()}
    files = {"outliers.json": report.json_report(doc)}
    s0 = seeds[0]
    model = lab.base_model(tasks[0])
    updates = {t: analysis.update_vector(lab.basis("intrinsic", t, s0, lab.config.task_dim(t)),
                                         lab.state("intrinsic", t, t, s0, lab.config.task_dim(t)))
               for t in tasks}
    for k, lay in enumerate(model.layouts):
        files[f"update_vector_layer{k}.csv"] = report.update_vector_table(
            lay, {t: updates[t][k].values for t in tasks})
    return lab.finish(man, files)


def ablation(lab: Lab) -> RunManifest:
    """Intrinsic subspace accuracy for each dim in ``config.dims``."""
    tasks, seeds, dims = lab.task_ids, lab.config.seeds, list(lab.config.dims)
    man = lab.manifest("ablation")
    jobs = [("intrinsic", t, t, s, d) for d in dims for t in tasks for s in seeds]
    res = lab.run_all("subspace", jobs)
    block = len(tasks) * len(seeds)
    rows = {f"dim={d}": _per_seed(res[i * block:(i + 1) * block], tasks, seeds) for i, d in enumerate(dims)}
    man.metrics = {"rows": rows, "dims": dims}
    return lab.finish(man, {"ablation.csv": report.method_table(rows, tasks)})


RUNNERS = {"transductive": transductive, "transfer": transfer, "unified": unified,
           "outliers": outliers, "ablation": ablation}


def run_experiment(name: str, config: ExperimentConfig, out, parallel: int = 1) -> RunManifest:
    if name not in RUNNERS:
        raise ValueError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lab = Lab(config, out, parallel)
    t0 = time.time()
    man = RUNNERS[name](lab)
    log.info("%s finished in %.1fs", name, time.time() - t0)
    return man
