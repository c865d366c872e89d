"""Command-line entry point: generate / register / train / predict / evaluate
/ baseline.

Every command is driven by a JSON experiment config plus flag overrides
(flags win), needs an explicit seed, and writes deterministic outputs: two
runs with the same config and seed produce byte-identical numeric artifacts
regardless of the worker count. Completed work (EM iterations, cached metric
matrices, test scores) is picked up from the output directory on rerun, so an
interrupted experiment resumes instead of recomputing.

Exit codes: 0 success, 2 usage or config error, 3 input data error,
4 numerical failure.
"""

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .diffop import OperatorParams, build_operator
from .emtrain import EmConfig, e_step, split_folds, train
from .errors import ConfigError, InputError, MetricRegError, NumericalError
from .evalsuite import logistic_baseline, mi_select_alpha, roc_auc
from .formats import read_labels_csv, read_pgm, write_pgm, write_velocity
from .grid import GridSpec, ScalarImage, warp
from .kernel import kernel_row
from .klda import LabeledSample, decision, predict_label
from .registration import RegistrationConfig, normalize_image, register
from .synthdata import ShapeGenConfig, generate, read_dataset, write_dataset

SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "seed": None,
    "dataset": {
        "mode": "generate",
        "dir": "dataset",
        "n_per_class": 100,
        "grid": [64, 64],
    },
    "split": {"train_per_class": 50},
    "registration": {
        "sigma2": 0.05,
        "time_steps": 10,
        "max_iters": 60,
        "step_size": 0.1,
        "energy_tol": 1e-5,
        "grad_tol": 1e-9,
    },
    "em": {
        "alpha0": 1.0,
        "alpha_bounds": [1e-3, 1e2],
        # denser than the library default: the informative kernel widths for
        # 64x64 shape energies sit between its 1e-3 and 4.6e-3 grid points
        "gamma_grid": [float(g) for g in np.logspace(-4.0, 1.0, 11)],
        "em_max_iters": 10,
        "mstep_max_iters": 25,
        "mstep_step0": 0.5,
        "mstep_trust": 2.0,
        "loss_tol": 1e-4,
        "ridge_scale": 1e-3,
        "select": "val",
    },
    "evaluation": {
        "mi_alpha_grid": [0.1, 0.3, 1.0, 3.0, 10.0],
        "mi_pairs": 20,
        "mi_bins": 32,
        "logistic_folds": 5,
        "logistic_l2": 1.0,
        "logistic_iters": 500,
    },
    "output_dir": "run",
    "jobs": 1,
}


def _deep_merge(base, override):
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path, overrides=None):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    cfg = _deep_merge(DEFAULT_CONFIG, raw)
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    if cfg.get("seed") is None:
        raise ConfigError("config must set a seed (or pass --seed)")
    cfg["seed"] = int(cfg["seed"])
    return cfg


def config_hash(cfg, *sections):
    """Stable hash of the config sections that determine a cached artifact."""
    view = {name: cfg[name] for name in sections}
    view["seed"] = cfg["seed"]
    blob = json.dumps(view, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def shape_config(cfg):
    d = cfg["dataset"]
    nx, ny = d["grid"]
    fields = {
        k: d[k]
        for k in (
            "size_min",
            "size_max",
            "aspect_min",
            "aspect_max",
            "max_tilt_deg",
            "center_jitter",
            "num_patches",
            "patch_scale",
            "smoothing",
            "noise",
        )
        if k in d
    }
    return ShapeGenConfig(
        grid=GridSpec(nx, ny), n_per_class=d["n_per_class"], seed=cfg["seed"], **fields
    )


def registration_config(cfg):
    r = cfg["registration"]
    return RegistrationConfig(
        sigma2=r["sigma2"],
        time_steps=r["time_steps"],
        max_iters=r["max_iters"],
        step_size=r["step_size"],
        energy_tol=r["energy_tol"],
        grad_tol=r["grad_tol"],
    )


def em_config(cfg):
    e = cfg["em"]
    return EmConfig(
        alpha0=e["alpha0"],
        alpha_bounds=tuple(e["alpha_bounds"]),
        gamma_grid=tuple(e["gamma_grid"]),
        em_max_iters=e["em_max_iters"],
        mstep_max_iters=e["mstep_max_iters"],
        mstep_step0=e["mstep_step0"],
        mstep_trust=e.get("mstep_trust", 2.0),
        loss_tol=e["loss_tol"],
        ridge_scale=e.get("ridge_scale", 1e-3),
        select=e["select"],
        seed=cfg["seed"],
    )


def ensure_dataset(cfg, log=print):
    """Generate the dataset into its directory, or load an existing one."""
    d = cfg["dataset"]
    data_dir = Path(d["dir"])
    if d["mode"] == "load":
        if not data_dir.exists():
            raise InputError(f"dataset directory not found: {data_dir}")
        images, labels, names = read_dataset(data_dir)
        return images, np.asarray(labels), names, data_dir
    gen_cfg = shape_config(cfg)
    manifest_path = data_dir / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("config") == gen_cfg.to_dict():
            images, labels, names = read_dataset(data_dir)
            return images, np.asarray(labels), names, data_dir
        raise InputError(
            f"dataset directory {data_dir} holds data generated with a different "
            "config; point dataset.dir elsewhere or delete it"
        )
    log(f"generating {2 * gen_cfg.n_per_class} images into {data_dir} ...")
    images, labels = generate(gen_cfg)
    write_dataset(data_dir, images, labels, gen_cfg)
    # reload so every run sees the same 16-bit quantized on-disk images,
    # whether it generated the dataset or found it already present
    images, labels, names = read_dataset(data_dir)
    return images, np.asarray(labels), names, data_dir


def split_train_test(labels, train_per_class, seed):
    """Stratified train/test split of the dataset, seeded shuffle."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 1])
    train_idx = []
    for cls in (1, -1):
        idx = np.flatnonzero(labels == cls)
        if idx.size < train_per_class + 1:
            raise InputError(
                f"class {cls} has {idx.size} items; need more than train_per_class={train_per_class}"
            )
        idx = idx[rng.permutation(idx.size)]
        train_idx.extend(idx[:train_per_class])
    train_idx = np.sort(np.array(train_idx))
    test_mask = np.ones(labels.size, dtype=bool)
    test_mask[train_idx] = False
    return train_idx, np.flatnonzero(test_mask)


def write_scores_csv(path, names, scores, predictions):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "score", "predicted_label"])
        for name, score, pred in zip(names, scores, predictions):
            writer.writerow([name, repr(float(score)), int(pred)])


def read_scores_csv(path):
    names, scores = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "filename" or header[1] != "score":
            raise InputError(f"{path}: expected a 'filename,score,...' header")
        for row in reader:
            if not row:
                continue
            names.append(row[0])
            scores.append(float(row[1]))
    return names, np.array(scores)


def _json_dump(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def score_test_images(test_images, train_images, alpha, gamma, reg_cfg, jobs, cache_path, cache_key):
    """Kernel columns + decision scores for a held-out set, cached on disk."""
    if cache_path is not None and cache_path.exists():
        cached = json.loads(cache_path.read_text())
        if cached.get("key") == cache_key:
            return np.array(cached["columns"])
    op = build_operator(train_images[0].grid, OperatorParams(alpha=alpha, beta=1.0))
    columns = []
    for img in test_images:
        columns.append(kernel_row(img, train_images, op, reg_cfg, gamma, jobs=jobs))
    columns = np.array(columns)
    if cache_path is not None:
        payload = {"key": cache_key, "columns": columns.tolist()}
        tmp = cache_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload))
        tmp.replace(cache_path)
    return columns


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["dataset"] = {"dir": args.out}
    cfg = load_config(args.config, overrides)
    if cfg["dataset"]["mode"] != "generate":
        raise ConfigError("cmd generate requires dataset.mode == 'generate'")
    data_dir = Path(cfg["dataset"]["dir"])
    if (data_dir / "manifest.json").exists():
        raise InputError(f"{data_dir} already holds a dataset; refusing to overwrite")
    gen_cfg = shape_config(cfg)
    images, labels = generate(gen_cfg)
    names = write_dataset(data_dir, images, labels, gen_cfg)
    print(f"wrote {len(names)} images + labels.csv + manifest.json to {data_dir}")
    return 0


def cmd_register(args):
    i0 = read_pgm(args.moving)
    i1 = read_pgm(args.target)
    cfg = RegistrationConfig(
        sigma2=args.sigma2,
        time_steps=args.steps,
        max_iters=args.max_iters,
    )
    op = build_operator(i0.grid, OperatorParams(alpha=args.alpha, beta=args.beta))
    if args.no_opt:
        a = normalize_image(i0)
        b = normalize_image(i1)
        residual = float(np.sum((a.data - b.data) ** 2)) * i0.grid.cell_area
        payload = {
            "schema_version": SCHEMA_VERSION,
            "alpha": args.alpha,
            "sigma2": args.sigma2,
            "metric_value": 0.0,
            "match_residual": residual,
            "total_energy": residual / args.sigma2,
            "iterations": 0,
            "converged": False,
            "optimized": False,
        }
    else:
        res = register(i0, i1, op, cfg)
        for k, energy in enumerate(res.energy_trace):
            print(f"iter {k}: energy {energy:.6f}")
        payload = {
            "schema_version": SCHEMA_VERSION,
            "alpha": args.alpha,
            "sigma2": args.sigma2,
            "metric_value": res.metric_value,
            "match_residual": res.match_residual,
            "total_energy": res.total_energy,
            "iterations": res.iterations,
            "converged": res.converged,
            "min_jacobian": res.min_jacobian,
            "optimized": True,
        }
        if args.dump_velocity:
            write_velocity(args.dump_velocity, res.velocity)
            payload["velocity_file"] = str(args.dump_velocity)
        if args.dump_warped:
            warped = warp(normalize_image(i0), res.forward_map)
            write_pgm(args.dump_warped, ScalarImage(i0.grid, np.clip(warped.data, 0.0, 1.0)))
            payload["warped_file"] = str(args.dump_warped)
    if args.out:
        _json_dump(args.out, payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def model_to_json(result, reg_cfg, train_names, dataset_dir):
    model = result.model
    return {
        "schema_version": SCHEMA_VERSION,
        "alpha": result.alpha,
        "beta": 1.0,
        "gamma": result.gamma,
        "epsilon": result.epsilon,
        "projection": model.projection.tolist(),
        "mean_pos": model.mean_pos.tolist(),
        "mean_neg": model.mean_neg.tolist(),
        "train_labels": [int(z) for z in model.sample.labels],
        "training_images": train_names,
        "dataset_dir": str(dataset_dir),
        "registration": {
            "sigma2": reg_cfg.sigma2,
            "time_steps": reg_cfg.time_steps,
            "max_iters": reg_cfg.max_iters,
            "step_size": reg_cfg.step_size,
            "energy_tol": reg_cfg.energy_tol,
            "grad_tol": reg_cfg.grad_tol,
        },
    }


def cmd_train(args):
    overrides = _common_overrides(args)
    if args.em_iters is not None:
        overrides.setdefault("em", {})["em_max_iters"] = args.em_iters
    if args.select is not None:
        overrides.setdefault("em", {})["select"] = args.select
    cfg = load_config(args.config, overrides)
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    images, labels, names, dataset_dir = ensure_dataset(cfg)
    train_idx, test_idx = split_train_test(labels, cfg["split"]["train_per_class"], cfg["seed"])
    reg_cfg = registration_config(cfg)
    emc = em_config(cfg)
    ckpt_dir = out_dir / "checkpoints"
    if args.no_resume and ckpt_dir.exists():
        for stale in sorted(ckpt_dir.iterdir()):
            stale.unlink()
    ckpt_dir.mkdir(exist_ok=True)
    run_key = config_hash(cfg, "dataset", "split", "registration", "em")
    key_file = ckpt_dir / "run_key.json"
    if key_file.exists():
        if json.loads(key_file.read_text()).get("key") != run_key:
            raise ConfigError(
                f"checkpoints in {ckpt_dir} belong to a different config; "
                "pass --no-resume or use a fresh output_dir"
            )
    else:
        _json_dump(key_file, {"key": run_key})
    sample_images = [images[i] for i in train_idx]
    sample_labels = labels[train_idx]
    result = train(
        sample_images, sample_labels, emc, reg_cfg, jobs=cfg["jobs"], checkpoint_dir=ckpt_dir, log=print
    )
    result.trace.to_csv(out_dir / "emtrace.csv")
    fold_names = [names[train_idx[i]] for i in result.train_idx]
    model_payload = model_to_json(result, reg_cfg, fold_names, dataset_dir)
    _json_dump(out_dir / "model.json", model_payload)
    # held-out evaluation at the selected operator weight
    test_images = [images[i] for i in test_idx]
    test_names = [names[i] for i in test_idx]
    fold_images = [sample_images[i] for i in result.train_idx]
    columns = score_test_images(
        test_images,
        fold_images,
        result.alpha,
        result.gamma,
        reg_cfg,
        cfg["jobs"],
        out_dir / "test_columns.json",
        run_key + f":{result.best_iteration}",
    )
    scores = np.array([decision(result.model, col) for col in columns])
    predictions = predict_label(scores)
    write_scores_csv(out_dir / "test_scores.csv", test_names, scores, predictions)
    test_auc = roc_auc(scores, labels[test_idx]).auc
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg,
        "alpha": result.alpha,
        "gamma": result.gamma,
        "epsilon": result.epsilon,
        "best_iteration": result.best_iteration,
        "em_iterations": len(result.trace.rows),
        "test_auc": test_auc,
        "test_count": len(test_images),
        "registrations_per_estep": int(result.trace.rows[0]["registrations"]),
    }
    _json_dump(out_dir / "report.json", report)
    print(f"best iteration {result.best_iteration}: alpha={result.alpha:.6g} "
          f"gamma={result.gamma:.6g} test_auc={test_auc:.4f}")
    print(f"outputs in {out_dir}")
    return 0


def cmd_predict(args):
    model_doc = json.loads(Path(args.model).read_text())
    dataset_dir = Path(model_doc["dataset_dir"])
    missing = [n for n in model_doc["training_images"] if not (dataset_dir / n).exists()]
    if missing:
        raise InputError(f"training images referenced by the model are missing: {missing}")
    train_images = [read_pgm(dataset_dir / n) for n in model_doc["training_images"]]
    r = model_doc["registration"]
    reg_cfg = RegistrationConfig(
        sigma2=r["sigma2"],
        time_steps=r["time_steps"],
        max_iters=r["max_iters"],
        step_size=r["step_size"],
        energy_tol=r["energy_tol"],
        grad_tol=r["grad_tol"],
    )
    op = build_operator(
        train_images[0].grid, OperatorParams(alpha=model_doc["alpha"], beta=model_doc["beta"])
    )
    sample = LabeledSample(np.array(model_doc["train_labels"]))
    model = _model_from_json(model_doc, sample)
    names, scores, predictions = [], [], []
    for path in args.images:
        img = read_pgm(path)
        col = kernel_row(img, train_images, op, reg_cfg, model_doc["gamma"], jobs=args.jobs)
        score = float(decision(model, col))
        names.append(str(path))
        scores.append(score)
        predictions.append(int(predict_label(score)))
    write_scores_csv(args.out, names, scores, predictions)
    print(f"wrote {len(names)} scores to {args.out}")
    return 0


def _model_from_json(doc, sample):
    from .klda import KldaModel

    n = len(doc["projection"])
    return KldaModel(
        projection=np.array(doc["projection"]),
        mean_pos=np.array(doc["mean_pos"]),
        mean_neg=np.array(doc["mean_neg"]),
        within=np.eye(n),  # not serialized; unused by decision
        epsilon=doc["epsilon"],
        gamma=doc["gamma"],
        train_kernel=np.eye(n),  # not serialized; unused by decision
        sample=sample,
    )


def cmd_evaluate(args):
    score_names, scores = read_scores_csv(args.scores)
    label_names, labels = read_labels_csv(args.labels)
    label_map = dict(zip(label_names, labels))
    missing = [n for n in score_names if n not in label_map]
    if missing:
        raise InputError(f"labels missing for scored files: {missing[:5]}")
    z = np.array([label_map[n] for n in score_names])
    out = roc_auc(scores, z)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "auc": out.auc,
        "count": len(score_names),
        "positives": int((z == 1).sum()),
        "negatives": int((z == -1).sum()),
    }
    if args.out:
        _json_dump(args.out, payload)
        curve = args.out.with_suffix(".curve.csv") if isinstance(args.out, Path) else Path(str(args.out)).with_suffix(".curve.csv")
        with open(curve, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fpr", "tpr"])
            for f, t in zip(out.fpr, out.tpr):
                writer.writerow([repr(float(f)), repr(float(t))])
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_baseline(args):
    cfg = load_config(args.config, _common_overrides(args))
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    images, labels, names, _ = ensure_dataset(cfg)
    train_idx, test_idx = split_train_test(labels, cfg["split"]["train_per_class"], cfg["seed"])
    reg_cfg = registration_config(cfg)
    emc = em_config(cfg)
    ev = cfg["evaluation"]
    sample_images = [images[i] for i in train_idx]
    sample_labels = labels[train_idx]

    log = logistic_baseline(
        sample_images,
        sample_labels,
        folds=ev["logistic_folds"],
        l2=ev["logistic_l2"],
        max_iters=ev["logistic_iters"],
        seed=cfg["seed"],
    )
    print(f"logistic baseline: auc {log.auc_mean:.4f} +/- {log.auc_std:.4f}")

    # mutual-information alpha selection over a seeded subset of training pairs
    rng = np.random.default_rng([cfg["seed"], 2])
    n_tr = len(sample_images)
    pair_ids = set()
    while len(pair_ids) < min(ev["mi_pairs"], n_tr * (n_tr - 1)):
        i, j = rng.integers(0, n_tr, size=2)
        if i != j:
            pair_ids.add((int(i), int(j)))
    pairs = [(sample_images[i], sample_images[j]) for i, j in sorted(pair_ids)]
    builder = lambda a: build_operator(sample_images[0].grid, OperatorParams(alpha=a, beta=1.0))
    mi_cache = out_dir / "mi_alpha.json"
    mi_key = config_hash(cfg, "dataset", "split", "registration", "evaluation")
    if mi_cache.exists() and json.loads(mi_cache.read_text()).get("key") == mi_key:
        mi_alpha = json.loads(mi_cache.read_text())["alpha"]
    else:
        mi_alpha = mi_select_alpha(
            pairs,
            ev["mi_alpha_grid"],
            builder,
            reg_cfg,
            bins=ev["mi_bins"],
            jobs=cfg["jobs"],
            progress=lambda a, mi: print(f"  mi(alpha={a}) = {mi:.4f}"),
        )
        _json_dump(mi_cache, {"key": mi_key, "alpha": mi_alpha})
    print(f"mi-selected alpha: {mi_alpha}")

    # full pipeline at the fixed MI alpha: same protocol as training, one E-step
    tr_fold, val_fold = split_folds(sample_labels, emc.seed)
    ckpt = out_dir / "baseline_checkpoints"
    ckpt.mkdir(exist_ok=True)
    estep = _cached_estep(
        ckpt, mi_key, sample_images, sample_labels, tr_fold, val_fold, mi_alpha, emc, reg_cfg, cfg["jobs"]
    )
    fold_images = [sample_images[i] for i in tr_fold]
    test_images = [images[i] for i in test_idx]
    test_names = [names[i] for i in test_idx]
    columns = score_test_images(
        test_images,
        fold_images,
        mi_alpha,
        estep.gamma,
        reg_cfg,
        cfg["jobs"],
        out_dir / "baseline_test_columns.json",
        mi_key,
    )
    scores = np.array([decision(estep.model, col) for col in columns])
    write_scores_csv(out_dir / "baseline_test_scores.csv", test_names, scores, predict_label(scores))
    mi_test_auc = roc_auc(scores, labels[test_idx]).auc
    print(f"mi-alpha pipeline: val_auc {estep.val_auc:.4f} test_auc {mi_test_auc:.4f}")

    optimized = None
    if args.train_dir is not None:
        report_path = Path(args.train_dir) / "report.json"
        if not report_path.exists():
            raise InputError(f"no report.json under {args.train_dir}")
        train_report = json.loads(report_path.read_text())
        optimized = {"test_auc": train_report["test_auc"], "alpha": train_report["alpha"]}

    payload = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg,
        "logistic": {"auc_mean": log.auc_mean, "auc_std": log.auc_std},
        "mi_alpha": {
            "alpha": mi_alpha,
            "gamma": estep.gamma,
            "val_auc": estep.val_auc,
            "test_auc": mi_test_auc,
        },
        "optimized": optimized,
    }
    _json_dump(out_dir / "baseline_report.json", payload)
    with open(out_dir / "baseline_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "test_auc"])
        writer.writerow(["logistic", repr(float(log.auc_mean))])
        writer.writerow(["mi_alpha", repr(float(mi_test_auc))])
        writer.writerow(["optimized", repr(float(optimized["test_auc"])) if optimized else ""])
    print(f"baseline report in {out_dir}")
    return 0


def _cached_estep(ckpt_dir, key, images, labels, tr_fold, val_fold, alpha, emc, reg_cfg, jobs):
    """One E-step at a fixed alpha, cached like an EM iteration."""
    from .emtrain import _load_em_checkpoint, _save_em_checkpoint

    key_file = ckpt_dir / "run_key.json"
    if key_file.exists() and json.loads(key_file.read_text()).get("key") != key:
        for stale in sorted(ckpt_dir.iterdir()):
            stale.unlink()
    _json_dump(key_file, {"key": key})
    loaded = _load_em_checkpoint(ckpt_dir, 0, labels, tr_fold, val_fold, emc)
    if loaded is not None and loaded[0].alpha == alpha:
        return loaded[0]
    estep = e_step(images, labels, tr_fold, val_fold, alpha, emc, reg_cfg, jobs=jobs)
    _save_em_checkpoint(ckpt_dir, 0, estep, alpha)
    return estep


def _common_overrides(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        overrides["jobs"] = args.jobs
    if getattr(args, "out_dir", None) is not None:
        overrides["output_dir"] = args.out_dir
    return overrides


def build_parser():
    parser = argparse.ArgumentParser(
        prog="metricreg",
        description="Learn a diffeomorphic registration metric that classifies shapes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate the synthetic shape dataset")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="dataset directory (overrides dataset.dir)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("register", help="register one image pair")
    p.add_argument("moving", type=Path)
    p.add_argument("target", type=Path)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--sigma2", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--max-iters", type=int, default=60)
    p.add_argument("--no-opt", action="store_true", help="report the unoptimized pass-through energy")
    p.add_argument("--dump-velocity", type=Path)
    p.add_argument("--dump-warped", type=Path)
    p.add_argument("--out", type=Path, help="write the result JSON here")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("train", help="run the full EM metric-learning experiment")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out-dir", type=str)
    p.add_argument("--em-iters", type=int)
    p.add_argument("--select", choices=["val", "train"])
    p.add_argument("--no-resume", action="store_true", help="discard existing checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score new images with a trained model")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("images", nargs="*", type=Path)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="ROC AUC of a scores CSV against labels")
    p.add_argument("--scores", required=True, type=Path)
    p.add_argument("--labels", required=True, type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="MI-alpha and logistic baselines")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out-dir", type=str)
    p.add_argument("--train-dir", type=Path, help="pull the optimized pipeline's report for comparison")
    p.set_defaults(func=cmd_baseline)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InputError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except MetricRegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
