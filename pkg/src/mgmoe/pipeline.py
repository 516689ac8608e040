"""Corpus synthesis, staged model building, restoration, evaluation and usage statistics.

Directory layout (all under the configured roots):

    corpus_dir/manifest.csv
    corpus_dir/<split>/<dist>/<id>.png, <id>.json, <id>.clean.png
    models_dir/build_state.json, standardizer.json, dr.csv, tree.json,
               assignment.csv, task_stats.json, experts/, router.json
    reports_dir/metrics.csv, traces.json, stats.csv, sweep_*.csv
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import degrade
from .cluster import ClusterConfig, GranularityTree, build_tree
from .config import RunConfig
from .experts import ExpertRegistry, apply_expert, train_registry
from .features import Standardizer, extract_raw, fit_standardizer, read_dr_csv, write_dr_csv
from .imagecore import load_png, psnr, save_png, ssim
from .router import (RouterBundle, cluster_task_stats, instruction_mask_for,
                     precompute_samples, route, train_routers)

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ["id", "split", "dist_mode", "recipe", "clean_source", "crop_x", "crop_y",
                   "png", "spec", "clean"]
METRIC_FIELDS = ["recipe", "dist_mode", "method", "psnr", "ssim", "n"]
METHODS = ["level0-only", "finest-only", "multi-granularity-auto", "instruction",
           "best-of-chain-oracle"]
STATS_FIELDS = ["dist_mode", "level", "practical_pct", "expected_pct"]
KIND_OF_TASK = {k: k for k in degrade.PIPELINE_ORDER}
_DIST_TAG = {"in_dist": "in", "out_dist": "out"}


class PipelineError(RuntimeError):
    pass


def _seed64(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint64)[0] >> 1)


def _sha_files(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(str(Path(p).name).encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _sha_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


# ---------------------------------------------------------------- synth

def clean_sources(cfg: RunConfig) -> list[Path]:
    d = Path(cfg.clean_dir)
    files = sorted(d.glob("*.png")) if d.is_dir() else []
    if not files:
        raise PipelineError(f"no clean PNG images found in {d}")
    return files


def split_cleans(cfg: RunConfig, files) -> dict:
    need = sum(cfg.clean_splits.values())
    if len(files) < need:
        raise PipelineError(f"need {need} clean images for splits {cfg.clean_splits}, found {len(files)}")
    out, start = {}, 0
    for split in ("train", "val", "test"):
        n = int(cfg.clean_splits.get(split, 0))
        out[split] = files[start:start + n]
        start += n
    return out


def cmd_synth(cfg: RunConfig) -> list[dict]:
    """Write degraded crops, spec sidecars, clean targets and manifest.csv."""
    files = clean_sources(cfg)
    splits = split_cleans(cfg, files)
    root = Path(cfg.corpus_dir)
    rows = []
    for s_i, split in enumerate(("train", "val", "test")):
        dists = ["in_dist"] if split == "train" else list(degrade.DIST_MODES)
        for d_i, dist in enumerate(dists):
            out = root / split / _DIST_TAG[dist]
            out.mkdir(parents=True, exist_ok=True)
            n = 0
            for c_i, path in enumerate(splits[split]):
                clean = load_png(path)
                h, w = clean.shape[:2]
                if h < cfg.crop_size or w < cfg.crop_size:
                    raise PipelineError(f"{path} is smaller than crop size {cfg.crop_size}")
                crng = np.random.default_rng(_seed64(cfg.seed, s_i, d_i, c_i, 7))
                for k in range(cfg.crops_per_clean):
                    y0 = int(crng.integers(0, h - cfg.crop_size + 1))
                    x0 = int(crng.integers(0, w - cfg.crop_size + 1))
                    crop = clean[y0:y0 + cfg.crop_size, x0:x0 + cfg.crop_size]
                    recipe = cfg.recipes[(c_i * cfg.crops_per_clean + k) % len(cfg.recipes)]
                    seed = _seed64(cfg.seed, s_i, d_i, n)
                    if recipe == "random":
                        x, spec = degrade.synthesize(crop, dist, seed, enable_jpeg=cfg.enable_jpeg)
                    else:
                        x, spec = degrade.make_named_mixture(crop, recipe, dist, seed)
                    iid = f"{split}-{_DIST_TAG[dist]}-{n:05d}"
                    save_png(x, out / f"{iid}.png")
                    save_png(crop, out / f"{iid}.clean.png")
                    (out / f"{iid}.json").write_text(spec.to_json())
                    rel = Path(split) / _DIST_TAG[dist]
                    rows.append({"id": iid, "split": split, "dist_mode": dist, "recipe": recipe,
                                 "clean_source": path.name, "crop_x": x0, "crop_y": y0,
                                 "png": str(rel / f"{iid}.png"), "spec": str(rel / f"{iid}.json"),
                                 "clean": str(rel / f"{iid}.clean.png")})
                    n += 1
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        w.writeheader()
        w.writerows(rows)
    log.info("synth: wrote %d images to %s", len(rows), root)
    return rows


def read_manifest(cfg: RunConfig) -> list[dict]:
    path = Path(cfg.corpus_dir) / "manifest.csv"
    if not path.exists():
        raise PipelineError(f"corpus manifest missing: {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_item(cfg: RunConfig, row: dict):
    root = Path(cfg.corpus_dir)
    spec = degrade.DegradationSpec.from_json((root / row["spec"]).read_text())
    return load_png(root / row["png"]), load_png(root / row["clean"]), spec


# ---------------------------------------------------------------- build

STAGES = ("extract", "cluster", "experts", "router")


class BuildState:
    def __init__(self, path: Path):
        self.path = path
        self.data = json.loads(path.read_text()) if path.exists() else {}

    def check(self, stage: str, inputs: str, outputs_hash) -> bool:
        """True when the stage can be skipped; raises when its recorded inputs are stale."""
        rec = self.data.get(stage)
        if rec is None:
            return False
        if rec["inputs"] != inputs:
            raise PipelineError(f"stale stage '{stage}': inputs changed since it was built "
                                "(rerun build with --force)")
        out = outputs_hash()
        if out is None or out != rec["outputs"]:
            raise PipelineError(f"stale stage '{stage}': outputs missing or modified "
                                "(rerun build with --force)")
        return True

    def record(self, stage: str, inputs: str, outputs: str) -> None:
        self.data[stage] = {"inputs": inputs, "outputs": outputs}
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True))

    def drop_from(self, stage: str) -> None:
        for s in STAGES[STAGES.index(stage):]:
            self.data.pop(s, None)
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True))


def _hash_or_none(paths):
    paths = [Path(p) for p in paths]
    if not all(p.exists() for p in paths):
        return None
    return _sha_files(paths)


def _registry_files(d: Path):
    if not (d / "registry.json").exists():
        return [d / "registry.json"]
    return [d / "registry.json"] + sorted(d.glob("expert_*.json"))


def corpus_checksum(cfg: RunConfig, rows) -> str:
    root = Path(cfg.corpus_dir)
    files = [root / "manifest.csv"]
    for r in rows:
        files += [root / r["png"], root / r["spec"], root / r["clean"]]
    return _sha_files(files)


def run_extract(cfg: RunConfig, rows, models: Path) -> None:
    raw = []
    for r in rows:
        x, _, _ = load_item(cfg, r)
        raw.append(extract_raw(x).values)
    raw = np.array(raw)
    train = np.array([r["split"] == "train" for r in rows])
    st = fit_standardizer(raw[train], clip=cfg.dr_clip)
    (models / "standardizer.json").write_text(json.dumps(st.to_dict()))
    write_dr_csv(models / "dr.csv", [(r["id"], st.transform(v)) for r, v in zip(rows, raw)])


def load_drs(models: Path) -> dict:
    ids, vals = read_dr_csv(models / "dr.csv")
    return dict(zip(ids, vals))


def run_cluster(cfg: RunConfig, rows, models: Path, level_counts) -> GranularityTree:
    drs = load_drs(models)
    train = {r["id"]: drs[r["id"]] for r in rows if r["split"] == "train"}
    tree = build_tree(train, ClusterConfig(list(level_counts), cfg.kmeans))
    (models / "tree.json").write_text(tree.to_json())
    tree.write_assignment_csv(models / "assignment.csv")
    specs = {r["id"]: load_item(cfg, r)[2] for r in rows if r["split"] == "train"}
    (models / "task_stats.json").write_text(json.dumps(cluster_task_stats(tree, specs), sort_keys=True))
    return tree


def load_tree(models: Path) -> GranularityTree:
    return GranularityTree.from_dict(json.loads((models / "tree.json").read_text()))


def _train_pairs(cfg, rows):
    return {r["id"]: load_item(cfg, r)[:2] for r in rows if r["split"] == "train"}


def run_experts(cfg: RunConfig, rows, models: Path, tree, pairs=None) -> ExpertRegistry:
    pairs = pairs if pairs is not None else _train_pairs(cfg, rows)
    reg = train_registry(tree, pairs, cfg.expert, cache_dir=Path(cfg.models_dir) / "expert_cache")
    reg.save(models / "experts")
    return reg


def run_router(cfg: RunConfig, rows, models: Path, tree, reg, pairs=None) -> RouterBundle:
    pairs = pairs if pairs is not None else _train_pairs(cfg, rows)
    drs = load_drs(models)
    ids = sorted(pairs)
    samples = precompute_samples(tree, reg, [(i, drs[i], pairs[i][0], pairs[i][1]) for i in ids])
    bundle = RouterBundle.create(len(drs[ids[0]]), tree.level_counts[-1], tree.n_levels,
                                 seed=cfg.router.seed, tree_checksum=tree.checksum())
    bundle, _ = train_routers(bundle, tree, reg, samples, cfg.router)
    bundle.save(models / "router.json")
    return bundle


def build_models(cfg: RunConfig, models: Path, level_counts, rows=None, force: bool = False,
                 shared_extract: Path | None = None) -> dict:
    """Run (or resume) extract -> cluster -> experts -> router into `models`."""
    models.mkdir(parents=True, exist_ok=True)
    rows = rows if rows is not None else read_manifest(cfg)
    state = BuildState(models / "build_state.json")
    if force:
        state.drop_from("extract")
    done = {}

    if shared_extract is not None:
        # sweeps reuse the main build's DRs
        for name in ("dr.csv", "standardizer.json"):
            (models / name).write_bytes((shared_extract / name).read_bytes())
        ext_in = _sha_files([shared_extract / "dr.csv"])
    else:
        ext_in = _sha_obj([corpus_checksum(cfg, rows), cfg.dr_clip])
    ext_files = [models / "dr.csv", models / "standardizer.json"]
    if state.check("extract", ext_in, lambda: _hash_or_none(ext_files)):
        done["extract"] = "skipped"
    else:
        if shared_extract is None:
            run_extract(cfg, rows, models)
        state.record("extract", ext_in, _sha_files(ext_files))
        done["extract"] = "built"

    cl_in = _sha_obj([state.data["extract"]["outputs"], list(level_counts), asdict(cfg.kmeans)])
    cl_files = [models / "tree.json", models / "assignment.csv", models / "task_stats.json"]
    if state.check("cluster", cl_in, lambda: _hash_or_none(cl_files)):
        done["cluster"] = "skipped"
        tree = load_tree(models)
    else:
        tree = run_cluster(cfg, rows, models, level_counts)
        state.record("cluster", cl_in, _sha_files(cl_files))
        done["cluster"] = "built"

    pairs = None
    ex_in = _sha_obj([state.data["cluster"]["outputs"], asdict(cfg.expert)])
    ex_dir = models / "experts"
    if state.check("experts", ex_in, lambda: _hash_or_none(_registry_files(ex_dir))):
        done["experts"] = "skipped"
        reg = ExpertRegistry.load(ex_dir)
    else:
        pairs = _train_pairs(cfg, rows)
        reg = run_experts(cfg, rows, models, tree, pairs)
        state.record("experts", ex_in, _sha_files(_registry_files(ex_dir)))
        done["experts"] = "built"

    ro_in = _sha_obj([state.data["experts"]["outputs"], asdict(cfg.router)])
    if state.check("router", ro_in, lambda: _hash_or_none([models / "router.json"])):
        done["router"] = "skipped"
    else:
        run_router(cfg, rows, models, tree, reg, pairs)
        state.record("router", ro_in, _sha_files([models / "router.json"]))
        done["router"] = "built"
    log.info("build %s: %s", models, done)
    return done


def cmd_build(cfg: RunConfig, force: bool = False) -> dict:
    return build_models(cfg, Path(cfg.models_dir), cfg.level_counts, force=force)


# ---------------------------------------------------------------- loaded model set

class ModelSet:
    def __init__(self, models: Path):
        if not (models / "router.json").exists():
            raise PipelineError(f"models not built in {models} (run build first)")
        self.dir = models
        self.standardizer = Standardizer.from_dict(json.loads((models / "standardizer.json").read_text()))
        self.tree = load_tree(models)
        self.registry = ExpertRegistry.load(models / "experts")
        self.bundle = RouterBundle.load(models / "router.json")
        self.task_stats = json.loads((models / "task_stats.json").read_text())
        if self.registry.tree_checksum != self.tree.checksum():
            raise PipelineError("expert registry does not match tree (stale build)")

    def known_tasks(self) -> list[str]:
        kinds = set()
        for v in self.task_stats.values():
            kinds.update(v["kinds"])
        return sorted(kinds)

    def mask_for(self, task: str) -> list[int]:
        if task not in self.known_tasks():
            raise PipelineError(f"unknown task {task!r}; known tasks: {', '.join(self.known_tasks())}")
        return instruction_mask_for(task, self.tree, self.task_stats)

    def dr(self, img) -> np.ndarray:
        return self.standardizer.transform(extract_raw(img).values)


def parse_mode(mode: str) -> str | None:
    if mode == "auto":
        return None
    if mode.startswith("instruction:"):
        return mode.split(":", 1)[1]
    raise PipelineError(f"unknown mode {mode!r} (use auto or instruction:<task>)")


def cmd_restore(cfg: RunConfig, inputs, out_dir, mode: str = "auto") -> list[dict]:
    ms = ModelSet(Path(cfg.models_dir))
    task = parse_mode(mode)
    mask = ms.mask_for(task) if task is not None else None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traces = []
    for p in inputs:
        p = Path(p)
        img = load_png(p)
        dec = route(ms.bundle, ms.tree, ms.dr(img), mask=mask)
        restored = apply_expert(ms.registry.get(dec.chosen), img)
        target = out / f"{p.stem}.restored.png"
        save_png(restored, target)
        traces.append({"input": str(p), "output": str(target), "mode": mode,
                       "expert": list(ms.registry.resolve(dec.chosen)), "decision": dec.to_dict()})
    (out / "restore_trace.json").write_text(json.dumps(traces, indent=1))
    return traces


# ---------------------------------------------------------------- eval

def single_task(recipe: str) -> str | None:
    kinds = degrade.recipe_kinds(recipe) if recipe != "random" else []
    return kinds[0] if len(kinds) == 1 else None


def evaluate_models(cfg: RunConfig, ms: ModelSet, rows, methods=METHODS) -> tuple[list[dict], list[dict]]:
    """Per-image evaluation of every method; returns (metric rows, traces)."""
    drs = load_drs(ms.dir)
    tree, reg = ms.tree, ms.registry
    traces = []
    masks = {}
    for r in rows:
        x, y, _ = load_item(cfg, r)
        dr = drs[r["id"]] if r["id"] in drs else ms.dr(x)
        auto = route(ms.bundle, tree, dr)
        cand = {n for n in tree.chain(auto.finest_index)}
        inst = None
        task = single_task(r["recipe"])
        if "instruction" in methods and task is not None and task in ms.known_tasks():
            if task not in masks:
                masks[task] = ms.mask_for(task)
            inst = route(ms.bundle, tree, dr, mask=masks[task])
            cand |= set(tree.chain(inst.finest_index))
        scores = {}
        for node in sorted(cand):
            key = reg.resolve(node)
            if key not in scores:
                out = apply_expert(reg.experts[key], x)
                scores[key] = (psnr(out, y), ssim(out, y))
        chain_auto = [reg.resolve(n) for n in tree.chain(auto.finest_index)]
        oracle_chain = max(chain_auto, key=lambda k: (scores[k][0], -k[0]))
        oracle_all = max(scores, key=lambda k: (scores[k][0], -k[0]))
        picks = {
            "level0-only": reg.resolve((0, 0)),
            "finest-only": reg.resolve((tree.n_levels - 1, auto.finest_index)),
            "multi-granularity-auto": reg.resolve(auto.chosen),
            "best-of-chain-oracle": oracle_all,
        }
        if inst is not None:
            picks["instruction"] = reg.resolve(inst.chosen)
        traces.append({
            "id": r["id"], "recipe": r["recipe"], "dist_mode": r["dist_mode"],
            "gt_finest": tree.assign(dr, tree.n_levels - 1),
            "decision": auto.to_dict(),
            "expert": list(picks["multi-granularity-auto"]),
            "instruction": None if inst is None else inst.to_dict(),
            "chain": [list(k) for k in chain_auto],
            "chain_psnr": [scores[k][0] for k in chain_auto],
            "oracle_expert": list(oracle_chain),
            "oracle_level": chain_auto.index(oracle_chain),
            "scores": {m: list(scores[k]) for m, k in picks.items() if m in methods},
        })
    return aggregate(traces, methods), traces


def aggregate(traces, methods=METHODS) -> list[dict]:
    groups = {}
    for t in traces:
        for key in ((t["recipe"], t["dist_mode"]), ("ALL", t["dist_mode"])):
            for m, (p, s) in t["scores"].items():
                groups.setdefault((key, m), []).append((p, s))
    out = []
    recipes = sorted({t["recipe"] for t in traces}) + ["ALL"]
    for dist in degrade.DIST_MODES:
        for rec in recipes:
            for m in methods:
                vals = groups.get(((rec, dist), m))
                if not vals:
                    continue
                arr = np.array(vals)
                out.append({"recipe": rec, "dist_mode": dist, "method": m,
                            "psnr": f"{arr[:, 0].mean():.4f}", "ssim": f"{arr[:, 1].mean():.4f}",
                            "n": len(vals)})
    return out


def write_csv(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def eval_rows(cfg: RunConfig, split: str = "test", dist: str | None = None) -> list[dict]:
    rows = [r for r in read_manifest(cfg) if r["split"] == split]
    if dist is not None:
        rows = [r for r in rows if r["dist_mode"] == dist]
    if not rows:
        raise PipelineError(f"no '{split}' split images in the corpus manifest")
    return rows


def cmd_eval(cfg: RunConfig, dist: str | None = None, sweep: str | None = None,
             split: str = "test") -> Path:
    reports = Path(cfg.reports_dir)
    reports.mkdir(parents=True, exist_ok=True)
    rows = eval_rows(cfg, split, dist)
    if sweep is not None:
        return run_sweep(cfg, sweep, rows)
    ms = ModelSet(Path(cfg.models_dir))
    metrics, traces = evaluate_models(cfg, ms, rows)
    write_csv(reports / "metrics.csv", METRIC_FIELDS, metrics)
    (reports / "traces.json").write_text(json.dumps(traces, indent=1, sort_keys=True))
    return reports / "metrics.csv"


SWEEP_FIELDS = ["sweep", "variant", "level_counts", "dist_mode", "method", "psnr", "ssim", "n"]


def run_sweep(cfg: RunConfig, sweep: str, rows) -> Path:
    if sweep == "fineness":
        variants = [(list(v), "multi-granularity-auto") for v in cfg.sweep_fineness]
    elif sweep == "granularity":
        variants = []
        for v in cfg.sweep_granularity:
            variants.append((list(v), "multi-granularity-auto"))
            if len(v) > 1:
                variants.append((list(v), "finest-only"))
    else:
        raise PipelineError(f"unknown sweep {sweep!r} (use fineness or granularity)")
    main = Path(cfg.models_dir)
    all_rows = read_manifest(cfg)
    if not (main / "dr.csv").exists():
        raise PipelineError("run build before sweeps (DRs are shared)")
    out = []
    for lc in sorted({tuple(v) for v, _ in variants}, key=lambda t: (len(t), t)):
        tag = "-".join(str(c) for c in lc)
        mdir = main / "sweeps" / tag
        build_models(cfg, mdir, list(lc), rows=all_rows, shared_extract=main)
        ms = ModelSet(mdir)
        methods = [m for v, m in variants if tuple(v) == lc]
        metrics, _ = evaluate_models(cfg, ms, rows, methods=methods)
        for m in metrics:
            if m["recipe"] == "ALL":
                out.append({"sweep": sweep, "variant": tag, "level_counts": tag,
                            "dist_mode": m["dist_mode"], "method": m["method"],
                            "psnr": m["psnr"], "ssim": m["ssim"], "n": m["n"]})
    path = Path(cfg.reports_dir) / f"sweep_{sweep}.csv"
    write_csv(path, SWEEP_FIELDS, out)
    return path


# ---------------------------------------------------------------- stats

def usage_stats(traces) -> tuple[list[dict], dict]:
    """Practical vs expected (oracle) level usage and routing accuracies per dist mode."""
    if not traces:
        raise PipelineError("no routing traces")
    n_levels = len(traces[0]["chain"])
    rows, acc = [], {}
    for dist in degrade.DIST_MODES:
        ts = [t for t in traces if t["dist_mode"] == dist]
        if not ts:
            continue
        prac = np.bincount([t["decision"]["chosen"][0] for t in ts], minlength=n_levels)
        expd = np.bincount([t["oracle_level"] for t in ts], minlength=n_levels)
        for lv in range(n_levels):
            rows.append({"dist_mode": dist, "level": lv,
                         "practical_pct": f"{100.0 * prac[lv] / len(ts):.2f}",
                         "expected_pct": f"{100.0 * expd[lv] / len(ts):.2f}"})
        acc[dist] = {
            "routing_accuracy": float(np.mean([t["expert"] == t["oracle_expert"] for t in ts])),
            "finest_accuracy": float(np.mean([t["decision"]["finest_index"] == t["gt_finest"] for t in ts])),
            "mean_e_gran": float(np.mean([t["decision"]["e_gran"] for t in ts])),
            "n": len(ts),
        }
    return rows, acc


def cmd_stats(cfg: RunConfig) -> Path:
    path = Path(cfg.reports_dir) / "traces.json"
    if not path.exists():
        raise PipelineError(f"no eval traces at {path} (run eval first)")
    traces = json.loads(path.read_text())
    rows, acc = usage_stats(traces)
    out = Path(cfg.reports_dir) / "stats.csv"
    write_csv(out, STATS_FIELDS, rows)
    (Path(cfg.reports_dir) / "stats.json").write_text(json.dumps(acc, indent=1, sort_keys=True))
    return out
