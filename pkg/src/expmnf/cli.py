"""Configuration-driven experiment runner: prepare data, sweep epsilon for
ExpM+NF and DPSGD, run non-private baselines, evaluate with the median
protocol, and emit reproducible manifests.

Configs are TOML. Every (method, epsilon, seed) cell is independent and may
run on a worker pool; results funnel through a single writer so the metric
files are deterministic byte-for-byte under a fixed config.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import time
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import click
import numpy as np

from . import __version__
from .data import Dataset, SplitSpec, prepare_adult, stratified_split, synth_blobs
from .dpsgd import DpsgdConfig, rdp_epsilon_detail, solve_noise_multiplier, train_dpsgd
from .errors import InfeasibleTargetError
from .evaluation import EvalReport, auc, benchmark, median_protocol
from .flows import init_planar_stack, init_sylvester_stack
from .numerics import substream
from .target import ExpMTarget, logistic_predict, sensitivity_bound_l2
from .trainer import TrainConfig, sample_model, train_logistic, train_nf

NONPRIVATE_EPSILON = float("inf")


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _apply_smoke(config: dict) -> dict:
    """Shrink a config to smoke scale: 2 seeds, capped steps and samples."""
    cfg = json.loads(json.dumps(config))  # deep copy
    exp = cfg.setdefault("experiment", {})
    exp["seeds"] = exp.get("seeds", list(range(10)))[:2]
    for section in ("expm_nf", "dpsgd", "nonprivate"):
        if section in cfg:
            if "steps" in cfg[section]:
                cfg[section]["steps"] = min(cfg[section]["steps"], 100)
            if "samples_per_model" in cfg[section]:
                cfg[section]["samples_per_model"] = min(cfg[section]["samples_per_model"], 50)
    if "search" in cfg:
        cfg["search"]["budget"] = min(cfg["search"].get("budget", 60), 4)
    return cfg


def load_dataset(dataset_cfg: dict) -> Dataset:
    kind = dataset_cfg.get("kind", "csv")
    if kind == "synth":
        return synth_blobs(
            seed=dataset_cfg.get("seed", 0),
            n=dataset_cfg.get("n", 2000),
            p=dataset_cfg.get("p", 5),
            separation=dataset_cfg.get("separation", 4.0),
        )
    if kind in ("adult", "csv"):
        path = Path(dataset_cfg["path"])
        if not path.exists():
            raise FileNotFoundError(
                f"dataset file {path} not found; run `expmnf prepare-data` first"
            )
        return Dataset.load(path)
    raise ValueError(f"unknown dataset kind {kind!r}")


def split_dataset(ds: Dataset, dataset_cfg: dict):
    spec = SplitSpec(
        ratios=tuple(dataset_cfg.get("ratios", (0.64, 0.16, 0.20))),
        seed=dataset_cfg.get("split_seed", 0),
    )
    return stratified_split(ds, spec)


def _merge(train: Dataset, dev: Dataset) -> Dataset:
    return Dataset(
        np.concatenate([train.X, dev.X]),
        np.concatenate([train.y, dev.y]),
        np.concatenate([train.w, dev.w]),
        list(train.columns),
        {**train.provenance, "split_role": "train+dev"},
    )


def _build_stack(hp: dict, d: int, seed: int):
    rng = substream(seed, "nf-init")
    flow_type = hp.get("flow_type", "planar")
    n_layers = hp.get("flows", 5)
    if flow_type == "planar":
        return init_planar_stack(rng, d, n_layers)
    if flow_type == "sylvester":
        return init_sylvester_stack(rng, d, hp.get("m", 2), hp.get("k", 2), n_layers)
    raise ValueError(f"unknown flow type {flow_type!r}")


def _run_cell(desc: dict) -> dict:
    """Train and evaluate one (method, epsilon, seed) cell. Picklable."""
    method = desc["method"]
    fit = desc["fit"]  # dict with X, y, w
    test = desc["test"]
    hp = desc["hp"]
    seed = desc["seed"]
    eps = desc["epsilon"]
    bias = desc.get("bias", True)
    t0 = time.perf_counter()
    out = {
        "method": method,
        "epsilon": eps,
        "seed": seed,
        "status": "ok",
        "aucs": [],
        "extra": {},
    }
    try:
        if method == "nonprivate":
            theta = train_logistic(
                fit["X"],
                fit["y"],
                fit["w"],
                bias=bias,
                steps=hp.get("steps", 2000),
                learning_rate=hp.get("learning_rate", 0.05),
                momentum=hp.get("momentum", 0.0),
                weight_decay=hp.get("weight_decay", 0.0),
                scheduler_patience=hp.get("scheduler_patience", 1000),
                seed=seed,
            )
            scores = logistic_predict(theta, test["X"], bias=bias)
            out["aucs"] = [auc(scores, test["y"])]
        elif method == "dpsgd":
            sigma = desc["noise_multiplier"]
            cfg = DpsgdConfig(
                clip_norm=hp.get("clip_norm", 1.0),
                noise_multiplier=sigma,
                sampling_rate=hp.get("sampling_rate", 0.01),
                steps=hp.get("steps", 500),
                delta=desc.get("delta", 1e-5),
                learning_rate=hp.get("learning_rate", 0.5),
                momentum=hp.get("momentum", 0.0),
                seed=seed,
            )
            theta = train_dpsgd(fit["X"], fit["y"], fit["w"], cfg, bias=bias)
            scores = logistic_predict(theta, test["X"], bias=bias)
            out["aucs"] = [auc(scores, test["y"])]
        elif method == "expm_nf":
            target = ExpMTarget(
                fit["X"],
                fit["y"],
                fit["w"],
                epsilon=eps,
                s=sensitivity_bound_l2(),
                bias=bias,
                data_batch=hp.get("data_batch"),
            )
            stack = _build_stack(hp, target.dim, seed)
            cfg = TrainConfig(
                steps=hp.get("steps", 2000),
                nf_batch=hp.get("nf_batch", 64),
                data_batch=hp.get("data_batch"),
                learning_rate=hp.get("learning_rate", 0.01),
                momentum=hp.get("momentum", 0.0),
                weight_decay=hp.get("weight_decay", 0.0),
                scheduler_patience=hp.get("scheduler_patience", 1000),
                scheduler_factor=hp.get("scheduler_factor", 0.5),
                sigma2=hp.get("sigma2", 1.0),
                seed=seed,
            )
            stack, history = train_nf(stack, target, cfg)
            params = sample_model(
                stack, cfg.sigma2, substream(seed, "model-samples"), hp.get("samples_per_model", 1000)
            )
            scores_auc = []
            for row in params:
                scores = logistic_predict(row, test["X"], bias=bias)
                scores_auc.append(auc(scores, test["y"]))
            out["aucs"] = scores_auc
            out["extra"]["final_loss"] = history.loss[-1] if len(history) else None
            out["extra"]["history"] = {"loss": history.loss, "lr": history.lr, "ms": history.ms}
            out["extra"]["stack_json"] = stack.to_json()
        else:
            raise ValueError(f"unknown method {method!r}")
    except Exception as exc:  # recorded per-cell, run continues
        out["status"] = f"failed: {type(exc).__name__}: {exc}"
    out["runtime_s"] = time.perf_counter() - t0
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(config: dict, output_dir=None, jobs: int = 1, smoke: bool = False) -> dict:
    if smoke:
        config = _apply_smoke(config)
    exp = config.get("experiment", {})
    method = exp.get("method", "nonprivate")
    seeds = list(exp.get("seeds", list(range(10))))
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    delta = exp.get("delta", 1e-5)
    epsilons = sorted(float(e) for e in exp.get("epsilons", [1.0]))
    if method != "nonprivate" and any(e <= 0 for e in epsilons):
        raise ValueError("epsilon grid must be positive")
    out_dir = Path(output_dir or exp.get("output_dir", "runs/out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    hp = dict(config.get(method, {}))

    ds = load_dataset(config.get("dataset", {}))
    train, dev, test = split_dataset(ds, config.get("dataset", {}))
    fit = _merge(train, dev)  # final fits use train + dev, validated on test
    fit_arrays = {"X": fit.X, "y": fit.y, "w": fit.w}
    test_arrays = {"X": test.X, "y": test.y}
    bias = config.get("model", {}).get("bias", True)

    eps_grid = [NONPRIVATE_EPSILON] if method == "nonprivate" else epsilons

    accountant = {}
    cells = []
    for eps in eps_grid:
        noise_multiplier = None
        acct_error = None
        if method == "dpsgd":
            q = hp.get("sampling_rate", 0.01)
            steps = hp.get("steps", 500)
            try:
                noise_multiplier = solve_noise_multiplier(eps, delta, q, steps)
                achieved, alpha = rdp_epsilon_detail(q, noise_multiplier, steps, delta)
                accountant[str(eps)] = {
                    "q": q,
                    "sigma": noise_multiplier,
                    "steps": steps,
                    "delta": delta,
                    "epsilon_rdp": achieved,
                    "best_alpha": alpha,
                }
            except InfeasibleTargetError as exc:
                acct_error = str(exc)
                accountant[str(eps)] = {"q": q, "steps": steps, "delta": delta, "error": acct_error}
        for seed in seeds:
            if acct_error is not None:
                cells.append(
                    {"precomputed": {"method": method, "epsilon": eps, "seed": seed,
                                     "status": f"failed: InfeasibleTargetError: {acct_error}",
                                     "aucs": [], "extra": {}, "runtime_s": 0.0}}
                )
                continue
            cells.append(
                {
                    "method": method,
                    "epsilon": eps,
                    "seed": seed,
                    "hp": hp,
                    "fit": fit_arrays,
                    "test": test_arrays,
                    "bias": bias,
                    "delta": delta,
                    "noise_multiplier": noise_multiplier,
                }
            )

    t0 = time.perf_counter()
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(
                pool.map(_run_cell, [c for c in cells if "precomputed" not in c])
            )
    else:
        results = [_run_cell(c) for c in cells if "precomputed" not in c]
    results += [c["precomputed"] for c in cells if "precomputed" in c]
    results.sort(key=lambda r: (r["epsilon"], r["seed"]))
    wall_s = time.perf_counter() - t0

    # single-writer output: metrics.csv, summary.json, manifest.json, histories
    metrics_path = out_dir / "metrics.csv"
    with open(metrics_path, "w") as fh:
        fh.write("method,epsilon,model_idx,sample_idx,auc,status\n")
        for r in results:
            status = r["status"]
            if r["aucs"]:
                for si, a in enumerate(r["aucs"]):
                    fh.write(f"{r['method']},{r['epsilon']!r},{r['seed']},{si},{a!r},{status}\n")
            else:
                fh.write(f"{r['method']},{r['epsilon']!r},{r['seed']},0,,{status}\n")

    summary = {"method": method, "per_epsilon": {}}
    for eps in eps_grid:
        ok = [r for r in results if r["epsilon"] == eps and r["status"] == "ok"]
        failed = [r for r in results if r["epsilon"] == eps and r["status"] != "ok"]
        entry = {"n_ok": len(ok), "n_failed": len(failed)}
        if ok:
            report = EvalReport([r["aucs"] for r in ok])
            s = report.summary()
            s.pop("runtime_s", None)
            entry.update(s)
        summary["per_epsilon"][str(eps)] = entry
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True))

    for r in results:
        hist = r.get("extra", {}).get("history")
        if hist:
            hp_path = out_dir / f"history_{method}_eps{r['epsilon']:g}_seed{r['seed']}.csv"
            with open(hp_path, "w") as fh:
                fh.write("step,loss,lr,ms\n")
                for i, (l, lr, ms) in enumerate(zip(hist["loss"], hist["lr"], hist["ms"])):
                    fh.write(f"{i},{l!r},{lr!r},{ms!r}\n")
        sj = r.get("extra", {}).get("stack_json")
        if sj:
            (out_dir / f"stack_{method}_eps{r['epsilon']:g}_seed{r['seed']}.json").write_text(sj)

    manifest = {
        "version": __version__,
        "created_unix": time.time(),
        "config": config,
        "smoke": smoke,
        "seeds": seeds,
        "accountant": accountant,
        "wall_s": wall_s,
        "cell_runtimes_s": {f"{r['epsilon']}:{r['seed']}": r["runtime_s"] for r in results},
        "digests": {
            "metrics.csv": _sha256(metrics_path),
            "summary.json": _sha256(summary_path),
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    any_failed = any(r["status"] != "ok" for r in results)
    manifest["any_failed"] = any_failed
    return manifest


def random_search(config: dict, budget: int | None = None, smoke: bool = False) -> dict:
    """Randomized hyperparameter search: sample ``budget`` configurations from
    the declared space, fit on train, score dev AUC (median over 3 seeds)."""
    if smoke:
        config = _apply_smoke(config)
    exp = config.get("experiment", {})
    method = exp.get("method", "nonprivate")
    search = config.get("search", {})
    budget = budget if budget is not None else search.get("budget", 60)
    if budget < 1:
        raise ValueError("budget must be >= 1")
    space = search.get("space", {})
    base_hp = dict(config.get(method, {}))
    delta = exp.get("delta", 1e-5)
    eps = float(exp.get("epsilons", [1.0])[0]) if method != "nonprivate" else NONPRIVATE_EPSILON

    ds = load_dataset(config.get("dataset", {}))
    train, dev, _ = split_dataset(ds, config.get("dataset", {}))
    fit_arrays = {"X": train.X, "y": train.y, "w": train.w}
    dev_arrays = {"X": dev.X, "y": dev.y}
    bias = config.get("model", {}).get("bias", True)
    rng = substream(exp.get("search_seed", 0), "hyperparameter-search")

    trials = []
    for trial in range(budget):
        hp = dict(base_hp)
        for key, choices in space.items():
            hp[key] = choices[int(rng.integers(len(choices)))]
        noise_multiplier = None
        if method == "dpsgd":
            try:
                noise_multiplier = solve_noise_multiplier(
                    eps, delta, hp.get("sampling_rate", 0.01), hp.get("steps", 500)
                )
            except InfeasibleTargetError as exc:
                trials.append({"trial": trial, "hp": hp, "status": f"failed: {exc}", "dev_auc": None})
                continue
        seed_aucs = []
        status = "ok"
        for seed in (0, 1, 2):
            cell = {
                "method": method,
                "epsilon": eps,
                "seed": seed,
                "hp": hp,
                "fit": fit_arrays,
                "test": dev_arrays,
                "bias": bias,
                "delta": delta,
                "noise_multiplier": noise_multiplier,
            }
            r = _run_cell(cell)
            if r["status"] != "ok":
                status = r["status"]
                break
            seed_aucs.append(float(np.median(r["aucs"])))
        trials.append(
            {
                "trial": trial,
                "hp": hp,
                "status": status,
                "dev_auc": float(np.median(seed_aucs)) if status == "ok" and seed_aucs else None,
            }
        )
    ok_trials = [t for t in trials if t["status"] == "ok"]
    if not ok_trials:
        raise RuntimeError(f"all {budget} search trials failed; log: {trials}")
    best = max(ok_trials, key=lambda t: t["dev_auc"])
    return {"best": best, "trials": trials}


@click.group()
def main():
    """ExpM+NF and DPSGD experiment runner."""


@main.command("prepare-data")
@click.option("--raw", "raw_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def prepare_data_cmd(raw_path, out_path):
    """Ingest a raw Adult CSV into a prepared dataset + provenance sidecar."""
    ds = prepare_adult(raw_path)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    ds.save(out_path)
    click.echo(f"prepared {ds.n_rows} rows x {ds.n_features} features -> {out_path}")


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--output-dir", default=None, type=click.Path())
@click.option("--jobs", default=1, type=int)
@click.option("--smoke", is_flag=True, default=False)
def run_cmd(config_path, output_dir, jobs, smoke):
    """Run the configured experiment sweep and write metric files."""
    config = load_config(config_path)
    manifest = run_experiment(config, output_dir=output_dir, jobs=jobs, smoke=smoke)
    click.echo(json.dumps({k: manifest[k] for k in ("digests", "wall_s")}, indent=2))
    if manifest.get("any_failed"):
        raise SystemExit(1)


@main.command("search")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--budget", default=None, type=int)
@click.option("--output-dir", default=None, type=click.Path())
@click.option("--smoke", is_flag=True, default=False)
def search_cmd(config_path, budget, output_dir, smoke):
    """Randomized hyperparameter search scored on the dev partition."""
    config = load_config(config_path)
    result = random_search(config, budget=budget, smoke=smoke)
    out_dir = Path(output_dir or config.get("experiment", {}).get("output_dir", "runs/out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "search_trials.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    click.echo(json.dumps(result["best"], indent=2))


@main.command("bench")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--repeats", default=10, type=int)
@click.option("--smoke", is_flag=True, default=True)
def bench_cmd(config_path, repeats, smoke):
    """Time one training cell of the configured method."""
    config = load_config(config_path)
    if smoke:
        config = _apply_smoke(config)
    exp = config.get("experiment", {})
    method = exp.get("method", "nonprivate")
    ds = load_dataset(config.get("dataset", {}))
    train, dev, test = split_dataset(ds, config.get("dataset", {}))
    fit = _merge(train, dev)
    eps = float(exp.get("epsilons", [1.0])[0]) if method != "nonprivate" else NONPRIVATE_EPSILON
    noise = None
    if method == "dpsgd":
        hp = config.get(method, {})
        noise = solve_noise_multiplier(
            eps, exp.get("delta", 1e-5), hp.get("sampling_rate", 0.01), hp.get("steps", 500)
        )
    cell = {
        "method": method,
        "epsilon": eps,
        "seed": exp.get("seeds", [0])[0],
        "hp": config.get(method, {}),
        "fit": {"X": fit.X, "y": fit.y, "w": fit.w},
        "test": {"X": test.X, "y": test.y},
        "bias": config.get("model", {}).get("bias", True),
        "delta": exp.get("delta", 1e-5),
        "noise_multiplier": noise,
    }
    stats = benchmark(lambda: _run_cell(cell), repeats=repeats)
    click.echo(json.dumps(stats, indent=2))


@main.command("report")
@click.option("--output-dir", required=True, type=click.Path(exists=True))
def report_cmd(output_dir):
    """Print the per-epsilon summary of a finished run."""
    summary = json.loads((Path(output_dir) / "summary.json").read_text())
    click.echo(f"method: {summary['method']}")
    for eps, entry in sorted(summary["per_epsilon"].items(), key=lambda kv: float(kv[0])):
        med = entry.get("median_auc")
        med_s = f"{med:.4f}" if med is not None else "-"
        click.echo(
            f"  eps={eps:>12}  median AUC={med_s}  ok={entry['n_ok']} failed={entry['n_failed']}"
        )


if __name__ == "__main__":
    main()
