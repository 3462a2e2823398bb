"""Experiment runner: dataset generation, training, evaluation, traversals.

Subcommands: gen-data, train-mean, train-nppc, eval, traverse,
reproduce-toy2d, reproduce-toy100d. Every output file embeds the config
hash, seed and format version, and reruns with identical inputs produce
byte-identical files. Exit codes: 0 ok, 2 invalid config, 3 I/O failure,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import evaluation as ev
from . import gmm, linalg
from .autodiff import ParamStore
from .errors import (
    BadIndex,
    DegenerateDirections,
    InvalidConfig,
    MissingMeanModel,
    NotPsd,
    NotSymmetric,
    SingularSolve,
)
from .models import (
    IterativeEnsemble,
    JointModel,
    MeanModel,
    MlpConfig,
    NppcHead,
    NppcHeadConfig,
    OrthogonalizedHead,
)
from .training import TrainConfig, make_triplets, train_iterative, train_joint, train_mean, train_posthoc

FORMAT_VERSION = 1

TOY2D_DEFAULTS = {
    "task": "toy2d",
    "seed": 0,
    "n_train": 12000,
    "n_test": 1000,
    "k_list": [0, 1, 2],
    "mean": {"hidden": 256, "depth": 5, "epochs": 30, "batch_size": 128, "lr": 1e-3},
    "nppc": {
        "K": 2,
        "hidden": 256,
        "depth": 5,
        "epochs": 40,
        "batch_size": 128,
        "lr": 1e-3,
        "lambda1": 1.0,
        "lambda2": 1.0,
        "ramp_w_epoch": 0,
        "ramp_sigma_epoch": 20,
        "normalize_losses": True,
        "include_mean_input": True,
    },
}

TOY100D_DEFAULTS = {
    "task": "toy100d",
    "seed": 0,
    "n_train": 15000,
    "n_test": 5000,
    "k_list": [0, 3, 6, 9, 12],
    "mean": {"hidden": 256, "depth": 5, "epochs": 16, "batch_size": 128, "lr": 1e-3},
    "nppc": {
        "K": 12,
        "hidden": 256,
        "depth": 5,
        "epochs": 20,
        "batch_size": 128,
        "lr": 1e-3,
        "lambda1": 1.0,
        "lambda2": 1.0,
        "ramp_w_epoch": 0,
        "ramp_sigma_epoch": 10,
        "normalize_losses": True,
        "include_mean_input": True,
    },
}


@dataclass
class ExperimentConfig:
    task: str
    seed: int
    n_train: int
    n_test: int
    k_list: list[int]
    mean: dict
    nppc: dict
    mixture: dict | None = None  # explicit mixture for task == "custom"
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        base = {
            "toy2d": TOY2D_DEFAULTS,
            "toy100d": TOY100D_DEFAULTS,
            "custom": TOY2D_DEFAULTS,
        }.get(data.get("task", "toy2d"))
        if base is None:
            raise InvalidConfig(f"unknown task {data.get('task')!r}")
        merged = json.loads(json.dumps(base))  # deep copy
        for key, value in data.items():
            if key in ("mean", "nppc") and isinstance(value, dict):
                merged[key].update(value)
            else:
                merged[key] = value
        if merged["task"] == "custom" and "mixture" not in merged:
            raise InvalidConfig("custom task requires a 'mixture' entry")
        if merged.get("n_train", 0) < 1 or merged.get("n_test", 0) < 1:
            raise InvalidConfig("n_train and n_test must be >= 1")
        return cls(
            task=merged["task"],
            seed=int(merged.get("seed", 0)),
            n_train=int(merged["n_train"]),
            n_test=int(merged["n_test"]),
            k_list=[int(k) for k in merged["k_list"]],
            mean=merged["mean"],
            nppc=merged["nppc"],
            mixture=merged.get("mixture"),
            raw=merged,
        )

    def canonical(self) -> dict:
        out = {
            "task": self.task,
            "seed": self.seed,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "k_list": self.k_list,
            "mean": self.mean,
            "nppc": self.nppc,
        }
        if self.mixture is not None:
            out["mixture"] = self.mixture
        return out

    def hash(self) -> str:
        return hashlib.sha256(_dumps(self.canonical()).encode()).hexdigest()[:16]

    def build_world(self) -> tuple[gmm.GaussianMixture, gmm.NoiseModel]:
        if self.task == "toy2d":
            return gmm.make_toy_2d(self.seed)
        if self.task == "toy100d":
            return gmm.make_toy_100d(self.seed)
        return gmm.mixture_from_jsonable(self.mixture)

    def train_config(self) -> TrainConfig:
        n = self.nppc
        return TrainConfig(
            K=int(n["K"]),
            epochs=int(n["epochs"]),
            batch_size=int(n["batch_size"]),
            lr=float(n["lr"]),
            lambda1=float(n["lambda1"]),
            lambda2=float(n["lambda2"]),
            ramp_w_epoch=int(n["ramp_w_epoch"]),
            ramp_sigma_epoch=int(n["ramp_sigma_epoch"]),
            normalize_losses=bool(n["normalize_losses"]),
            seed=self.seed,
        )


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        fh.write(_dumps(obj))
        fh.write("\n")


def load_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config {path} is not valid JSON: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------- datasets


def save_dataset(
    out_dir: str, name: str, xs: np.ndarray, ys: np.ndarray, seed: int, config_hash: str
) -> str:
    os.makedirs(out_dir, exist_ok=True)
    bin_path = os.path.join(out_dir, f"{name}.bin")
    with open(bin_path, "wb") as fh:
        fh.write(np.ascontiguousarray(xs, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ys, dtype="<f8").tobytes())
    sidecar = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "n": int(xs.shape[0]),
        "d_x": int(xs.shape[1]),
        "d_y": int(ys.shape[1]),
        "seed": seed,
        "config_hash": config_hash,
        "blob": f"{name}.bin",
    }
    _write_json(os.path.join(out_dir, f"{name}.json"), sidecar)
    return bin_path


def load_dataset(out_dir: str, name: str) -> tuple[np.ndarray, np.ndarray, dict]:
    with open(os.path.join(out_dir, f"{name}.json")) as fh:
        meta = json.load(fh)
    raw = np.fromfile(os.path.join(out_dir, meta["blob"]), dtype="<f8")
    n, d_x, d_y = meta["n"], meta["d_x"], meta["d_y"]
    xs = raw[: n * d_x].reshape(n, d_x).copy()
    ys = raw[n * d_x :].reshape(n, d_y).copy()
    return xs, ys, meta


# -------------------------------------------------------------- checkpoints


def save_checkpoint(
    path: str,
    kind: str,
    configs: dict,
    params: dict[str, ParamStore],
    mixture: dict,
    seed: int,
    config_hash: str,
    summary: dict | None = None,
) -> None:
    """JSON manifest at ``path`` plus a float64-LE blob next to it."""
    index = []
    chunks = []
    offset = 0
    for prefix, store in params.items():
        for name, arr in store.items():
            full = f"{prefix}{name}"
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            index.append({"name": full, "shape": list(arr.shape), "offset": offset})
            chunks.append(data)
            offset += len(data)
    blob_name = os.path.basename(path)[: -len(".json")] + ".bin"
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "configs": configs,
        "mixture": mixture,
        "seed": seed,
        "config_hash": config_hash,
        "params": index,
        "blob": blob_name,
        "summary": summary or {},
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(os.path.join(os.path.dirname(os.path.abspath(path)), blob_name), "wb") as fh:
        fh.write(b"".join(chunks))
    _write_json(path, manifest)


def load_checkpoint(path: str) -> dict:
    with open(path) as fh:
        manifest = json.load(fh)
    blob = np.fromfile(os.path.join(os.path.dirname(os.path.abspath(path)), manifest["blob"]), dtype="<f8")
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"] // 8
        arrays[entry["name"]] = blob[start : start + size].reshape(entry["shape"]).copy()
    manifest["arrays"] = arrays
    return manifest


def _store_from_arrays(arrays: dict[str, np.ndarray], prefix: str = "") -> ParamStore:
    store = ParamStore()
    for name, arr in arrays.items():
        if name.startswith(prefix):
            store.add(name[len(prefix) :], arr)
    return store


def mean_model_from_checkpoint(manifest: dict) -> MeanModel:
    cfg = MlpConfig(**manifest["configs"]["mean"])
    return MeanModel(cfg, params=_store_from_arrays(manifest["arrays"], "mean."))


def head_from_checkpoint(manifest: dict) -> NppcHead:
    cfg = NppcHeadConfig(**manifest["configs"]["head"])
    return NppcHead(cfg, params=_store_from_arrays(manifest["arrays"], "head."))


def _mean_cfg_dict(cfg: MlpConfig) -> dict:
    return asdict(cfg)


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    config = load_config(args.config, {"seed": args.seed})
    mix, noise = config.build_world()
    rng = np.random.default_rng(config.seed)
    xs, ys = gmm.sample_dataset(mix, noise, config.n_train, rng)
    xs_test, ys_test = gmm.sample_dataset(mix, noise, config.n_test, rng)
    chash = config.hash()
    save_dataset(args.out, "train", xs, ys, config.seed, chash)
    save_dataset(args.out, "test", xs_test, ys_test, config.seed, chash)
    print(f"wrote train ({config.n_train}) and test ({config.n_test}) datasets to {args.out}")
    return 0


def _train_mean_on(config: ExperimentConfig, xs: np.ndarray, ys: np.ndarray):
    d_x, d_y = xs.shape[1], ys.shape[1]
    cfg = MlpConfig(
        in_dim=d_y,
        out_dim=d_x,
        hidden=int(config.mean["hidden"]),
        depth=int(config.mean["depth"]),
    )
    model = MeanModel(cfg, seed=config.seed)
    tc = TrainConfig(
        K=1,
        epochs=int(config.mean["epochs"]),
        batch_size=int(config.mean["batch_size"]),
        lr=float(config.mean["lr"]),
        ramp_w_epoch=0,
        ramp_sigma_epoch=0,
        seed=config.seed,
    )
    result = train_mean(xs, ys, model, tc)
    return model, cfg, result


def _write_metrics(path: str, metrics: list[dict]) -> None:
    with open(path, "w") as fh:
        for record in metrics:
            fh.write(_dumps(record))
            fh.write("\n")


def cmd_train_mean(args) -> int:
    config = load_config(args.config, {"seed": args.seed})
    mix, noise = config.build_world()
    xs, ys, _ = load_dataset(args.data, "train")
    model, cfg, result = _train_mean_on(config, xs, ys)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(
        os.path.join(args.out, "mean.json"),
        kind="mean",
        configs={"mean": _mean_cfg_dict(cfg)},
        params={"mean.": model.params},
        mixture=gmm.mixture_to_jsonable(mix, noise),
        seed=config.seed,
        config_hash=config.hash(),
        summary={"epochs": len(result.metrics), "final": result.metrics[-1]},
    )
    _write_metrics(os.path.join(args.out, "mean_metrics.jsonl"), result.metrics)
    print(f"mean model trained; final val MSE {result.metrics[-1]['val_mse']:.4f}")
    return 0


def _head_config(config: ExperimentConfig, d_x: int, d_y: int) -> NppcHeadConfig:
    n = config.nppc
    return NppcHeadConfig(
        K=int(n["K"]),
        d_x=d_x,
        d_y=d_y,
        hidden=int(n["hidden"]),
        depth=int(n["depth"]),
        include_mean_input=bool(n["include_mean_input"]),
    )


def cmd_train_nppc(args) -> int:
    config = load_config(args.config, {"seed": args.seed})
    mix, noise = config.build_world()
    xs, ys, _ = load_dataset(args.data, "train")
    d_x, d_y = xs.shape[1], ys.shape[1]
    head_cfg = _head_config(config, d_x, d_y)
    tc = config.train_config()
    mixture = gmm.mixture_to_jsonable(mix, noise)
    chash = config.hash()
    os.makedirs(args.out, exist_ok=True)

    if args.mode == "joint":
        if args.mean_checkpoint is not None:
            raise InvalidConfig("joint mode trains its own mean; drop --mean-checkpoint")
        mean_cfg = MlpConfig(
            in_dim=d_y,
            out_dim=d_x,
            hidden=int(config.mean["hidden"]),
            depth=int(config.mean["depth"]),
        )
        model = JointModel.create(mean_cfg, head_cfg, seed=config.seed)
        result = train_joint(xs, ys, model, tc)
        save_checkpoint(
            os.path.join(args.out, "joint.json"),
            kind="joint",
            configs={"mean": _mean_cfg_dict(mean_cfg), "head": asdict(head_cfg)},
            params={"mean.": model.mean.params, "head.": model.head.params},
            mixture=mixture,
            seed=config.seed,
            config_hash=chash,
            summary={"final": result.metrics[-1]},
        )
        _write_metrics(os.path.join(args.out, "nppc_metrics.jsonl"), result.metrics)
        print(f"joint model trained; final val MSE {result.metrics[-1]['val_mse']:.4f}")
        return 0

    if args.mean_checkpoint is None:
        raise MissingMeanModel(f"{args.mode} mode requires --mean-checkpoint")
    mean_manifest = load_checkpoint(args.mean_checkpoint)
    mean_model = mean_model_from_checkpoint(mean_manifest)
    triplets = make_triplets(xs, ys, mean_model)

    if args.mode == "posthoc":
        head = NppcHead(head_cfg, seed=config.seed)
        result = train_posthoc(triplets, head, tc)
        save_checkpoint(
            os.path.join(args.out, "nppc.json"),
            kind="nppc",
            configs={"head": asdict(head_cfg)},
            params={"head.": head.params},
            mixture=mixture,
            seed=config.seed,
            config_hash=chash,
            summary={"final": result.metrics[-1]},
        )
        _write_metrics(os.path.join(args.out, "nppc_metrics.jsonl"), result.metrics)
        print(f"post-hoc head trained; final val loss {result.metrics[-1]['val_loss']:.4f}")
        return 0

    if args.mode == "iterative":
        stages, metrics = train_iterative(triplets, head_cfg, tc, upto_k=head_cfg.K)
        stage_cfg = asdict(stages[0].cfg)
        for k, stage in enumerate(stages):
            save_checkpoint(
                os.path.join(args.out, f"nppc_stage{k + 1}.json"),
                kind="nppc",
                configs={"head": stage_cfg, "stage": k + 1},
                params={"head.": stage.base.params},
                mixture=mixture,
                seed=config.seed,
                config_hash=chash,
                summary={"final": metrics[k][-1]},
            )
            _write_metrics(os.path.join(args.out, f"nppc_stage{k + 1}_metrics.jsonl"), metrics[k])
        print(f"iterative training wrote {len(stages)} stage checkpoints")
        return 0

    raise InvalidConfig(f"unknown mode {args.mode!r}")


def load_iterative_ensemble(paths: list[str]) -> IterativeEnsemble:
    stages: list[OrthogonalizedHead] = []
    for path in paths:
        manifest = load_checkpoint(path)
        cfg = NppcHeadConfig(**manifest["configs"]["head"])
        base = NppcHead(cfg, params=_store_from_arrays(manifest["arrays"], "head."))
        stages.append(OrthogonalizedHead(base, list(stages)))
    return IterativeEnsemble(stages)


def run_evaluation(
    mix: gmm.GaussianMixture,
    noise: gmm.NoiseModel,
    mean_model,
    head,
    xs_test: np.ndarray,
    ys_test: np.ndarray,
    k_list: list[int],
    seed: int,
    threads: int = 1,
    angle_subset: int = 100,
    pca_samples: int = 4096,
) -> dict:
    """All §-style metrics for one trained model on one test set."""
    oracle = gmm.PosteriorOracle(mix, noise)
    methods = {
        "baseline": ev.point_mass_method(oracle.moments),
        "nppc": ev.nppc_method(mean_model, head),
    }
    report = ev.w2_table(
        oracle.moments, methods, ys_test, k_list, threads=threads, seed=seed
    )

    xhats = np.stack([mean_model.predict(y) for y in ys_test])
    outs = [head.predict(y, xh) for y, xh in zip(ys_test, xhats)]
    errors = [x - xh for x, xh in zip(xs_test, xhats)]
    K = outs[0].W.shape[0]

    pyth_dev = 0.0
    resid_by_k = {}
    for k in range(1, K + 1):
        resids = []
        for e, out in zip(errors, outs):
            W = out.W[:k]
            r2 = ev.residual_norm(e, W) ** 2
            cap = ev.captured_energy(e, W)
            pyth_dev = max(pyth_dev, abs(r2 + cap - float(np.sum(e * e))))
            resids.append(np.sqrt(r2))
        resid_by_k[k] = float(np.mean(resids))

    curve = ev.unexplained_curve(errors, [out.W for out in outs])

    rng = np.random.default_rng(seed + 1)
    subset = np.arange(min(angle_subset, len(ys_test)))
    angles_by_k: dict[int, list[float]] = {k: [] for k in range(1, K + 1)}
    for i in subset:
        samples = oracle.sample(ys_test[i], pca_samples, rng)
        W_pca, _ = linalg.pca_from_samples(samples, K)
        W_nppc = outs[i].W
        for k in range(1, K + 1):
            c = abs(float(W_nppc[k - 1] @ W_pca[k - 1]))
            angles_by_k[k].append(float(np.degrees(np.arccos(min(c, 1.0)))))
    angle_medians = {k: float(np.median(v)) for k, v in angles_by_k.items()}

    return {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "n_test": len(ys_test),
        "k_list": list(k_list),
        "w2": {
            "methods": report.methods,
            "means": report.cells.tolist(),
            "sems": report.sems.tolist(),
            "poisoned": report.poisoned,
        },
        "rmse": ev.rmse(xhats, xs_test),
        "mean_residual_norm_by_k": resid_by_k,
        "unexplained_curve": curve.tolist(),
        "principal_angle_median_by_k": angle_medians,
        "pythagorean_max_abs_dev": pyth_dev,
        "_report": report,
    }


def write_w2_csv(path: str, report: ev.W2Report) -> None:
    lines = ["method,K,w2_mean,w2_sem,n"]
    for i, name in enumerate(report.methods):
        for j, K in enumerate(report.k_list):
            lines.append(
                f"{name},{K},{report.cells[i, j]!r},{report.sems[i, j]!r},{report.n_test}"
            )
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def _load_eval_models(args):
    manifest = load_checkpoint(args.checkpoint)
    if manifest["kind"] == "joint":
        mean_model = mean_model_from_checkpoint(manifest)
        head = head_from_checkpoint(manifest)
    elif manifest["kind"] == "nppc":
        if args.mean_checkpoint is None:
            raise MissingMeanModel("nppc checkpoint needs --mean-checkpoint for evaluation")
        mean_model = mean_model_from_checkpoint(load_checkpoint(args.mean_checkpoint))
        head = head_from_checkpoint(manifest)
    else:
        raise InvalidConfig(f"cannot evaluate checkpoint of kind {manifest['kind']!r}")
    mix, noise = gmm.mixture_from_jsonable(manifest["mixture"])
    return mix, noise, mean_model, head


def cmd_eval(args) -> int:
    config = load_config(args.config, {"seed": args.seed})
    mix, noise, mean_model, head = _load_eval_models(args)
    xs_test, ys_test, _ = load_dataset(args.data, "test")
    k_list = [int(k) for k in args.k_list.split(",")] if args.k_list else config.k_list
    results = run_evaluation(
        mix, noise, mean_model, head, xs_test, ys_test, k_list,
        seed=config.seed, threads=args.threads,
    )
    report = results.pop("_report")
    results["config_hash"] = config.hash()
    os.makedirs(args.out, exist_ok=True)
    write_w2_csv(os.path.join(args.out, "w2_table.csv"), report)
    _write_json(os.path.join(args.out, "report.json"), results)
    print(f"rmse {results['rmse']:.4f}; w2 table written to {args.out}")
    return 0


def cmd_traverse(args) -> int:
    manifest = load_checkpoint(args.checkpoint)
    if manifest["kind"] == "joint":
        mean_model = mean_model_from_checkpoint(manifest)
        head = head_from_checkpoint(manifest)
    elif manifest["kind"] == "nppc":
        if args.mean_checkpoint is None:
            raise MissingMeanModel("nppc checkpoint needs --mean-checkpoint")
        mean_model = mean_model_from_checkpoint(load_checkpoint(args.mean_checkpoint))
        head = head_from_checkpoint(manifest)
    else:
        raise InvalidConfig(f"cannot traverse checkpoint of kind {manifest['kind']!r}")
    y = np.array(json.loads(args.y), dtype=np.float64)
    xhat = mean_model.predict(y)
    out = head.predict(y, xhat)
    K = out.W.shape[0]
    if not (1 <= args.k <= K):
        raise BadIndex(f"k={args.k} out of range 1..{K}")
    w = out.W[args.k - 1]
    sigma = float(np.sqrt(max(out.sigma2[args.k - 1], 0.0)))
    ts = np.linspace(-args.span, args.span, args.steps)
    rows = [xhat + t * sigma * w for t in ts]
    header = "t," + ",".join(f"x{i}" for i in range(len(xhat)))
    lines = [header]
    for t, row in zip(ts, rows):
        lines.append(",".join([repr(float(t))] + [repr(float(v)) for v in row]))
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
    print(f"traversal of PC {args.k} (sigma {sigma:.4f}) written to {args.out}")
    return 0


def run_reproduction(task: str, out_dir: str, overrides: dict, threads: int = 1) -> dict:
    """gen-data -> train-mean -> train-nppc(posthoc) -> eval, one seed."""
    defaults = {"toy2d": TOY2D_DEFAULTS, "toy100d": TOY100D_DEFAULTS}[task]
    data = json.loads(json.dumps(defaults))
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "epochs_mean":
            data["mean"]["epochs"] = value
        elif key == "epochs_nppc":
            data["nppc"]["epochs"] = value
            data["nppc"]["ramp_sigma_epoch"] = min(data["nppc"]["ramp_sigma_epoch"], value)
        else:
            data[key] = value
    config = ExperimentConfig.from_dict(data)
    chash = config.hash()
    os.makedirs(out_dir, exist_ok=True)

    mix, noise = config.build_world()
    rng = np.random.default_rng(config.seed)
    xs, ys = gmm.sample_dataset(mix, noise, config.n_train, rng)
    xs_test, ys_test = gmm.sample_dataset(mix, noise, config.n_test, rng)
    save_dataset(out_dir, "train", xs, ys, config.seed, chash)
    save_dataset(out_dir, "test", xs_test, ys_test, config.seed, chash)

    mean_model, mean_cfg, mean_result = _train_mean_on(config, xs, ys)
    save_checkpoint(
        os.path.join(out_dir, "mean.json"),
        kind="mean",
        configs={"mean": _mean_cfg_dict(mean_cfg)},
        params={"mean.": mean_model.params},
        mixture=gmm.mixture_to_jsonable(mix, noise),
        seed=config.seed,
        config_hash=chash,
        summary={"final": mean_result.metrics[-1]},
    )
    _write_metrics(os.path.join(out_dir, "mean_metrics.jsonl"), mean_result.metrics)

    head_cfg = _head_config(config, xs.shape[1], ys.shape[1])
    triplets = make_triplets(xs, ys, mean_model)
    head = NppcHead(head_cfg, seed=config.seed)
    nppc_result = train_posthoc(triplets, head, config.train_config())
    save_checkpoint(
        os.path.join(out_dir, "nppc.json"),
        kind="nppc",
        configs={"head": asdict(head_cfg)},
        params={"head.": head.params},
        mixture=gmm.mixture_to_jsonable(mix, noise),
        seed=config.seed,
        config_hash=chash,
        summary={"final": nppc_result.metrics[-1]},
    )
    _write_metrics(os.path.join(out_dir, "nppc_metrics.jsonl"), nppc_result.metrics)

    results = run_evaluation(
        mix, noise, mean_model, head, xs_test, ys_test, config.k_list,
        seed=config.seed, threads=threads,
    )
    report = results.pop("_report")
    results["config_hash"] = chash
    write_w2_csv(os.path.join(out_dir, "w2_table.csv"), report)
    _write_json(os.path.join(out_dir, "report.json"), results)

    summary = {
        "format_version": FORMAT_VERSION,
        "task": task,
        "seed": config.seed,
        "config_hash": chash,
        "rmse": results["rmse"],
        "w2_means": results["w2"]["means"],
        "k_list": config.k_list,
    }
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    results["_report"] = report
    return results


def _add_repro_args(sub, name):
    p = sub.add_parser(name, help=f"full {name.split('-')[1]} pipeline with pinned defaults")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-train", type=int, default=None, dest="n_train")
    p.add_argument("--n-test", type=int, default=None, dest="n_test")
    p.add_argument("--epochs-mean", type=int, default=None, dest="epochs_mean")
    p.add_argument("--epochs-nppc", type=int, default=None, dest="epochs_nppc")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nppc", description="posterior principal component experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample a (x, y) dataset for a task")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-mean", help="train the conditional-mean MLP")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", required=True, help="directory holding train.json/.bin")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_mean)

    p = sub.add_parser("train-nppc", help="train the direction head")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["posthoc", "joint", "iterative"], default="posthoc")
    p.add_argument("--mean-checkpoint", default=None, dest="mean_checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_nppc)

    p = sub.add_parser("eval", help="evaluate a trained model against the oracle")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mean-checkpoint", default=None, dest="mean_checkpoint")
    p.add_argument("--k-list", default=None, dest="k_list", help="comma separated, e.g. 0,3,6,9,12")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("traverse", help="steps along one scaled direction around x_hat")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mean-checkpoint", default=None, dest="mean_checkpoint")
    p.add_argument("--y", required=True, help="measurement as a JSON list")
    p.add_argument("--k", type=int, required=True, help="direction index, 1-based")
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--span", type=float, default=3.0, dest="span")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_traverse)

    for name in ("reproduce-toy2d", "reproduce-toy100d"):
        p = _add_repro_args(sub, name)
        task = name.split("-")[1]
        p.set_defaults(
            func=lambda args, task=task: _cmd_reproduce(task, args)
        )
    return parser


def _cmd_reproduce(task: str, args) -> int:
    overrides = {
        "seed": args.seed,
        "n_train": args.n_train,
        "n_test": args.n_test,
        "epochs_mean": args.epochs_mean,
        "epochs_nppc": args.epochs_nppc,
    }
    results = run_reproduction(task, args.out, overrides, threads=args.threads)
    means = np.array(results["w2"]["means"])
    print(f"{task}: rmse {results['rmse']:.4f}")
    for i, name in enumerate(results["w2"]["methods"]):
        cells = " ".join(f"{v:.3f}" for v in means[i])
        print(f"  {name:10s} W2^2 by K: {cells}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (InvalidConfig, MissingMeanModel, BadIndex) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except (DegenerateDirections, NotPsd, NotSymmetric, SingularSolve, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
