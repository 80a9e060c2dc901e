"""Pipeline stages and the resumable end-to-end driver."""
import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import clusterlab, elastsolve, evalmetrics, microgen, preprocess, tensorio
from ._accel import thread_count
from .cednet import (CedModel, TrainConfig, architecture, load_checkpoint, predict,
                     save_checkpoint, train)

log = logging.getLogger(__name__)
CONFIG_VERSION = 1


class StageError(RuntimeError):
    def __init__(self, stage, sample, cause):
        where = f" (sample {sample})" if sample is not None else ""
        super().__init__(f"stage {stage!r} failed{where}: {cause}")
        self.stage, self.sample, self.cause = stage, sample, cause


# --- configuration ---------------------------------------------------------------

@dataclass
class SolverConfig:
    tol: float = 1e-6
    max_iter: int = 5000
    e33: float = 1e-4


@dataclass
class DetectConfig:
    k: int = 3
    thresholds: tuple = clusterlab.THRESHOLDS
    sigma: float = 1.0


@dataclass
class EvalConfig:
    bins: int = 10
    n_sigma: float = 2.0


@dataclass
class PipelineConfig:
    seed: int = 0
    n_samples: int = 10000
    ratios: tuple = (0.7, 0.1, 0.2)
    generator: dict = field(default_factory=lambda: {"size": 128, "mu": 2.3, "sigma": 0.4,
                                                     "cutoff": 4.0})
    solver: SolverConfig = field(default_factory=SolverConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    r: int = 1
    threads: int = 1
    version: int = CONFIG_VERSION

    def to_json(self):
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        d["detect"]["thresholds"] = list(self.detect.thresholds)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {d['version']}")
        sub = {"solver": SolverConfig, "train": TrainConfig, "detect": DetectConfig,
               "eval": EvalConfig}
        base = cls()
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name in sub:
                v = replace(getattr(base, f.name), **v)
            elif f.name == "generator":
                v = {**base.generator, **v}
            elif f.name == "ratios":
                v = tuple(v)
            kw[f.name] = v
        cfg = cls(**kw)
        cfg.detect.thresholds = tuple(cfg.detect.thresholds)
        return cfg

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))


# --- per-sample workers (module level so they pickle) -------------------------------

def _gen_one(args):
    gcfg, sid, out = args
    ms = microgen.generate(gcfg)
    ms.save(Path(out) / sid)
    return sid


def _solve_one(args):
    sid, ms_dir, out, tol, max_iter, e33 = args
    ms = microgen.Microstructure.load(Path(ms_dir) / sid)
    res = elastsolve.solve(elastsolve.build_stiffness(ms.euler), elastsolve.default_strain(e33),
                           tol, max_iter)
    tensorio.write_tensor(Path(out) / f"{sid}_vm.gtns", res.von_mises.astype(np.float32))
    return {"id": sid, "iters": res.iterations, "residual": res.residual}


def _map(fn, jobs, threads, stage):
    threads = max(1, int(threads))
    if threads == 1:
        out = []
        for job in jobs:
            try:
                out.append(fn(job))
            except Exception as exc:
                raise StageError(stage, _job_id(job), exc) from exc
        return out
    with ProcessPoolExecutor(threads) as ex:
        futures = [ex.submit(fn, j) for j in jobs]
        out = []
        for job, fut in zip(jobs, futures):
            try:
                out.append(fut.result())
            except Exception as exc:
                raise StageError(stage, _job_id(job), exc) from exc
        return out


def _job_id(job):
    return job[1] if isinstance(job[0], microgen.GeneratorConfig) else job[0]


# --- stages -------------------------------------------------------------------------------

def generate_stage(n, out, seed=0, size=128, mu=2.3, sigma=0.4, cutoff=4.0,
                   ratios=(0.7, 0.1, 0.2), threads=1):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = tensorio.split_dataset(n, ratios, tensorio.derive_seed(seed, "split"))
    jobs = []
    for i in range(n):
        sid = tensorio.sample_id(i)
        gcfg = microgen.GeneratorConfig(size=size, mu=mu, sigma=sigma, cutoff=cutoff,
                                        seed=tensorio.derive_seed(seed, "generate", i))
        jobs.append((gcfg, sid, str(out)))
        manifest.files[sid] = sid
    _map(_gen_one, jobs, threads, "generate")
    manifest.save(out / "manifest.json")
    return manifest


def solve_stage(in_dir, out, tol=1e-6, max_iter=5000, e33=1e-4, threads=1):
    in_dir, out = Path(in_dir), Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = tensorio.DatasetManifest.load(in_dir / "manifest.json")
    jobs = [(sid, str(in_dir), str(out), tol, max_iter, e33) for sid in sorted(manifest.ids)]
    records = _map(_solve_one, jobs, threads, "solve")
    with open(out / "solve_log.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return records


def preprocess_stage(ms_dir, vm_dir, manifest_path, out):
    manifest = tensorio.DatasetManifest.load(manifest_path)
    try:
        return preprocess.assemble(ms_dir, vm_dir, manifest, out)
    except tensorio.TensorIOError as exc:
        raise StageError("preprocess", _sample_of(exc.path), exc) from exc


def _sample_of(path):
    p = Path(path)
    return p.name[:-len("_vm.gtns")] if p.name.endswith("_vm.gtns") else p.parent.name


def train_stage(data_dir, ckpt, cfg=TrainConfig(), r=1, history_path=None):
    xtr, ytr, _ = preprocess.load_split(data_dir, "train")
    xva, yva, _ = preprocess.load_split(data_dir, "val")
    model = CedModel(architecture(r), seed=cfg.seed)
    best, hist = train(model, (xtr, ytr), (xva, yva), cfg)
    save_checkpoint(best, ckpt, epoch=hist.best_epoch, val_mse=hist.best_val,
                    train_config=asdict(cfg))
    hp = Path(str(ckpt) + ".history.jsonl") if history_path is None else Path(history_path)
    with open(hp, "w") as fh:
        for rec in hist.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return best, hist


def predict_stage(ckpt, in_dir, out, split="test"):
    model, _ = load_checkpoint(ckpt)
    x, _, ids = preprocess.load_split(in_dir, split)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pred = predict(model, x)
    for sid, p in zip(ids, pred):
        tensorio.write_tensor(out / f"{sid}.gtns", p.astype(np.float32))
    return ids


def _field_files(d):
    return sorted(Path(d).glob("*.gtns"))


def detect_stage(in_dir, out_path, k=3, thresholds=clusterlab.THRESHOLDS, sigma=1.0, ids=None):
    records = []
    wanted = None if ids is None else set(ids)
    for p in _field_files(in_dir):
        if wanted is not None and p.stem not in wanted:
            continue
        try:
            f = tensorio.read_tensor(p)
        except tensorio.TensorIOError as exc:
            raise StageError("detect", p.stem, exc) from exc
        for cl in clusterlab.detect(f, k, thresholds, sigma):
            records.append(clusterlab.cluster_record(p.stem, cl))
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    clusterlab.write_records(out_path, records)
    return records


def _finite(v):
    return None if v is None or (isinstance(v, float) and not math.isfinite(v)) else v


def evaluate_stage(pred_dir, truth_dir, out, clusters=None, ms_dir=None, ckpt=None,
                   data_dir=None, bins=10, n_sigma=2.0):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pred_files = {p.stem: p for p in _field_files(pred_dir)}
    truth_files = {p.stem: p for p in _field_files(truth_dir)}
    ids = sorted(set(pred_files) & set(truth_files))
    if not ids:
        raise StageError("evaluate", None, "no samples common to prediction and truth dirs")

    preds = {i: tensorio.read_tensor(pred_files[i]) for i in ids}
    truths = {i: tensorio.read_tensor(truth_files[i]) for i in ids}
    metrics = [evalmetrics.field_metrics(preds[i], truths[i]) for i in ids]
    mses = np.array([m.mse for m in metrics])
    keep = evalmetrics.high_mse_mask(mses, n_sigma)
    with open(out / "metrics.jsonl", "w") as fh:
        for i, m, kp in zip(ids, metrics, keep):
            fh.write(json.dumps({"id": i, "mse": m.mse, "mse_pixel": m.mse_pixel,
                                 "cosine": _finite(m.cosine), "kept": bool(kp)},
                                sort_keys=True) + "\n")

    cos = np.array([m.cosine for m in metrics])
    cos_ok = cos[np.isfinite(cos)]
    summary = {
        "n": len(ids),
        "mse_mean": float(mses.mean()), "mse_std": float(mses.std()),
        "mse_pixel_mean": float(mses.mean() / truths[ids[0]].size),
        "cosine_mean": float(cos_ok.mean()) if cos_ok.size else None,
        "cosine_std": float(cos_ok.std()) if cos_ok.size else None,
        "cosine_min": float(cos_ok.min()) if cos_ok.size else None,
        "cosine_max": float(cos_ok.max()) if cos_ok.size else None,
        "excluded_high_mse": [i for i, k in zip(ids, keep) if not k],
    }
    h, e = np.histogram(mses, bins=20)
    summary["mse_histogram"] = {"counts": h.tolist(), "edges": e.tolist()}
    if cos_ok.size:
        h, e = np.histogram(cos_ok, bins=20, range=(-1, 1))
        summary["cosine_histogram"] = {"counts": h.tolist(), "edges": e.tolist()}

    if clusters is not None:
        pred_path, truth_path = clusters
        kept = {i for i, k in zip(ids, keep) if k}
        pr = [r for r in clusterlab.read_records(pred_path) if r["id"] in kept]
        tr = [r for r in clusterlab.read_records(truth_path) if r["id"] in kept]
        errs, skipped = evalmetrics.cluster_errors(pr, tr)
        with open(out / "cluster_errors.jsonl", "w") as fh:
            for ce in errs:
                fh.write(json.dumps({k: _finite(v) for k, v in ce.to_dict().items()},
                                    sort_keys=True) + "\n")
        agg = {}
        for ce in errs:
            agg.setdefault(f"rank{ce.rank}_t{ce.threshold}", []).append(ce)
        summary["clusters"] = {
            k: {name: _finite(float(np.nanmean([getattr(c, name) for c in v])))
                for name in ("distance", "delta_a", "delta_theta", "delta_ar")} | {"n": len(v)}
            for k, v in sorted(agg.items())}
        summary["clusters_skipped"] = [list(k) for k in skipped]

    if ms_dir is not None:
        _write_curves(out / "curves.csv", ids, preds, truths, mses, ms_dir, bins)
    if ckpt is not None and data_dir is not None:
        ablate_stage(ckpt, data_dir, out)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def _write_curves(path, ids, preds, truths, mses, ms_dir, bins):
    per_ms = {"grain_diameter": [], "aspect_ratio": [], "euler_phi": [], "euler_psi1": [],
              "euler_psi2": []}
    grain_d, grain_e = [], []
    for i in ids:
        ms = microgen.Microstructure.load(Path(ms_dir) / i)
        st = microgen.grain_stats(ms)
        per_ms["grain_diameter"].append(st.mean_diameter)
        per_ms["aspect_ratio"].append(st.mean_aspect_ratio)
        for name, v in zip(("euler_phi", "euler_psi1", "euler_psi2"), st.mean_euler_angles):
            per_ms[name].append(v)
        grain_d.append(st.diameters)
        grain_e.append(evalmetrics.per_grain_errors(ms.labels, preds[i], truths[i]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["curve", "bin_center", "stat_mean", "mse_mean", "count"])
        for name, vals in per_ms.items():
            for row in evalmetrics.bin_mse_by_stat(vals, mses, bins).rows():
                w.writerow([name, *row])
        curve = evalmetrics.bin_mse_by_stat(np.concatenate(grain_d), np.concatenate(grain_e), bins)
        for row in curve.rows():
            w.writerow(["per_grain_diameter", *row])


def ablate_stage(ckpt, data_dir, out, split="test"):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model, _ = load_checkpoint(ckpt)
    x, y, _ = preprocess.load_split(data_dir, split)
    base, changes = evalmetrics.ablation_table(model, x, y)
    probe = evalmetrics.filter_probe(model)
    types = probe["types"]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filter", "pct_change", "type"])
        for k, (c, t) in enumerate(zip(changes, types)):
            w.writerow([k, repr(float(c)), int(t)])
    (out / "filter_types.json").write_text(json.dumps({
        "base_mse": base,
        "types": {str(k): int(t) for k, t in enumerate(types)},
        "counts": {str(t): int((types == t).sum()) for t in range(1, 6)},
        "names": {str(k): v for k, v in evalmetrics.FILTER_TYPES.items()},
        "max_impact_filter": int(np.argmax(changes)),
    }, indent=1, sort_keys=True))
    return base, changes, types


# --- end-to-end -----------------------------------------------------------------------

def _hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _record_hashes(run, stage, outputs):
    mpath = run / "MANIFEST.json"
    man = json.loads(mpath.read_text()) if mpath.exists() else {}
    files = {}
    for o in outputs:
        o = Path(o)
        paths = sorted(p for p in o.rglob("*") if p.is_file()) if o.is_dir() else [o]
        for p in paths:
            files[str(p.relative_to(run))] = _hash(p)
    man[stage] = files
    mpath.write_text(json.dumps(man, indent=1, sort_keys=True))


STAGES = ("generate", "solve", "preprocess", "train", "predict", "detect", "evaluate")


def run_all(config, run_dir):
    """Run every stage, skipping those whose completion marker exists."""
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    cfg_path = run / "config.json"
    if cfg_path.exists():
        prev = json.loads(cfg_path.read_text())
        if prev != config.to_json():
            raise ValueError(f"{run} holds a run with a different config")
    else:
        config.save(cfg_path)
    done = run / "stages"
    done.mkdir(exist_ok=True)
    threads = config.threads or thread_count()
    tcfg = replace(config.train, seed=tensorio.derive_seed(config.seed, "train"))
    paths = {"ms": run / "ms", "vm": run / "vm", "data": run / "data",
             "ckpt": run / "model" / "ckpt.gtns", "pred": run / "pred",
             "clusters": run / "clusters", "eval": run / "eval"}
    d = config.detect

    def stage(name, fn, outputs):
        marker = done / f"{name}.done"
        if marker.exists():
            log.info("skip %s (done)", name)
            return
        log.info("run %s", name)
        try:
            fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, getattr(exc, "sample", None), exc) from exc
        _record_hashes(run, name, outputs)
        marker.write_text("ok\n")

    g = config.generator
    stage("generate", lambda: generate_stage(config.n_samples, paths["ms"], config.seed,
                                             g["size"], g["mu"], g["sigma"], g["cutoff"],
                                             config.ratios, threads), [paths["ms"]])
    s = config.solver
    stage("solve", lambda: solve_stage(paths["ms"], paths["vm"], s.tol, s.max_iter, s.e33,
                                       threads), [paths["vm"]])
    stage("preprocess", lambda: preprocess_stage(paths["ms"], paths["vm"],
                                                 paths["ms"] / "manifest.json", paths["data"]),
          [paths["data"]])
    stage("train", lambda: train_stage(paths["data"], paths["ckpt"], tcfg, config.r),
          [paths["ckpt"].parent])
    stage("predict", lambda: predict_stage(paths["ckpt"], paths["data"], paths["pred"]),
          [paths["pred"]])
    stage("detect", lambda: (
        detect_stage(paths["pred"], paths["clusters"] / "pred.jsonl", d.k, d.thresholds, d.sigma),
        detect_stage(paths["data"] / "truth", paths["clusters"] / "truth.jsonl", d.k,
                     d.thresholds, d.sigma, ids=_test_ids(paths["data"]))),
          [paths["clusters"]])
    e = config.eval
    stage("evaluate", lambda: evaluate_stage(
        paths["pred"], paths["data"] / "truth", paths["eval"],
        (paths["clusters"] / "pred.jsonl", paths["clusters"] / "truth.jsonl"),
        paths["ms"], paths["ckpt"], paths["data"], e.bins, e.n_sigma), [paths["eval"]])
    return run


def _test_ids(data_dir):
    return json.loads((Path(data_dir) / "index.json").read_text())["splits"]["test"]
