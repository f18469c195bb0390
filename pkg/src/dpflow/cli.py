"""Command-line front end for reproducible experiment runs.

Every subcommand resolves its configuration (flags override an optional
JSON config file), writes a manifest capturing the resolved values plus any
spent privacy budget, and emits metrics as JSON on stdout with tables as
CSV files.
"""

from __future__ import annotations

import csv
import json
import sys

import click
import numpy as np

from . import anomaly as ad
from . import data as dt
from .accounting import Accountant, exp_mech_binary, gdp_mu
from .errors import DpflowError
from .flows import FlowModel, GmmBase, build_maf
from .gmm import gmm_fit_em
from .initialization import InitConfig, dp_nf_init
from .training import TrainConfig, train_dp_nf


def _resolve(ctx: click.Context, *required: str) -> dict:
    """Merge an optional JSON config file under explicit command-line flags.

    ``required`` names must be present after merging (they are ordinary
    options at the click level so a config file can supply them).
    """
    params = dict(ctx.params)
    path = params.pop("config", None)
    if path:
        with open(path) as fh:
            doc = json.load(fh)
        file_cfg = doc.get("config", doc)  # accept a manifest as a config
        for name, value in file_cfg.items():
            if name not in params:
                continue
            src = ctx.get_parameter_source(name)
            if src is not None and src.name != "COMMANDLINE":
                params[name] = value
    for name in required:
        if params.get(name) is None:
            flag = name.replace("_", "-")
            raise click.UsageError(f"Missing option '--{flag}'.")
    return params


def _write_manifest(command: str, cfg: dict, extra: dict | None = None):
    path = cfg.get("manifest")
    if not path:
        out = cfg.get("out")
        path = f"{out}.manifest.json" if out else f"{command}.manifest.json"
    config = {k: v for k, v in cfg.items() if k != "manifest"}
    doc = {"command": command, "config": config}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def _write_rows(path, header, rows):
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _echo_json(obj):
    click.echo(json.dumps(obj))


def _load_matrix(path, has_header):
    return dt.load_csv(path, has_header=has_header)


def _common_options(fn):
    fn = click.option("--config", type=click.Path(exists=True), default=None,
                      help="JSON config file (or manifest); flags override it.")(fn)
    fn = click.option("--manifest", type=click.Path(), default=None,
                      help="Manifest output path.")(fn)
    fn = click.option("--seed", type=int, default=0, show_default=True)(fn)
    return fn


def _train_options(fn):
    for opt in reversed([
        click.option("--epsilon", type=float, default=1.0, show_default=True),
        click.option("--delta", type=float, default=1e-5, show_default=True),
        click.option("--sigma", type=float, default=1.1, show_default=True,
                     help="Noise multiplier."),
        click.option("--clip", type=float, default=10.0, show_default=True,
                     help="Per-example gradient l2 bound."),
        click.option("--batch-size", type=int, default=256, show_default=True),
        click.option("--lr", type=float, default=1e-4, show_default=True),
        click.option("--optimizer", type=click.Choice(["sgd", "adam"]),
                     default="adam", show_default=True),
        click.option("--accountant", type=click.Choice(["rdp", "gdp"]),
                     default="gdp", show_default=True),
        click.option("--sampling", type=click.Choice(["uniform", "poisson"]),
                     default="uniform", show_default=True),
        click.option("--max-steps", type=int, default=1_000_000),
        click.option("--eval-every", type=int, default=500),
        click.option("--blocks", type=int, default=5, show_default=True),
        click.option("--hidden", type=int, default=64, show_default=True),
        click.option("--actnorm/--no-actnorm", default=False),
        click.option("--base", type=click.Choice(["spherical", "gmm"]),
                     default="spherical", show_default=True),
        click.option("--gmm-components", type=int, default=5),
        click.option("--gmm-iters", type=int, default=100),
    ]):
        fn = opt(fn)
    return fn


def _make_train_config(cfg) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["lr"], batch_size=cfg["batch_size"],
        noise_multiplier=cfg["sigma"], clip_norm=cfg["clip"],
        epsilon=cfg["epsilon"], delta=cfg["delta"],
        accountant=cfg["accountant"], optimizer=cfg["optimizer"],
        max_steps=cfg["max_steps"], seed=cfg["seed"],
        sampling=cfg["sampling"], eval_every=cfg["eval_every"])


def _build_model(cfg, X_train, dim, seed):
    model = build_maf(dim, n_blocks=cfg["blocks"], hidden=cfg["hidden"],
                      actnorm=cfg["actnorm"], seed=seed)
    if cfg["base"] == "gmm":
        # Fit the mixture in the latent frame the base actually sees (at the
        # identity initialization, the stack's net permutation of the data).
        latent = model.transform_to_base(X_train)
        params, _ = gmm_fit_em(latent, cfg["gmm_components"],
                               n_iters=cfg["gmm_iters"], seed=seed)
        model.base = GmmBase(params)
    return model


@click.group()
def cli():
    """Differentially private density estimation with autoregressive flows."""


@cli.command("gen-data")
@click.option("--shape", type=click.Choice(["half-moons", "pinwheel",
                                            "gaussians8"]), default=None)
@click.option("--n", type=int, default=None)
@click.option("--noise-std", type=float, default=0.1, show_default=True)
@click.option("--arms", type=int, default=5, show_default=True)
@click.option("--out", type=click.Path(), default=None)
@_common_options
@click.pass_context
def gen_data(ctx, **_):
    """Write a synthetic benchmark dataset as CSV."""
    cfg = _resolve(ctx, "shape", "n", "out")
    if cfg["shape"] == "half-moons":
        ds = dt.gen_half_moons(cfg["n"], noise_std=cfg["noise_std"],
                               seed=cfg["seed"])
    elif cfg["shape"] == "pinwheel":
        ds = dt.gen_pinwheel(cfg["n"], arms=cfg["arms"], seed=cfg["seed"])
    else:
        ds = dt.gen_gaussians8(cfg["n"], seed=cfg["seed"])
    dt.save_csv(cfg["out"], ds)
    _write_manifest("gen-data", cfg)
    _echo_json({"rows": ds.n, "dim": ds.dim, "out": cfg["out"]})


@cli.command("train")
@click.option("--data", type=click.Path(exists=True), default=None)
@click.option("--has-header", is_flag=True, default=False)
@click.option("--standardize", "do_standardize", is_flag=True, default=False)
@click.option("--holdout-frac", type=float, default=0.1, show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="Model file (JSON).")
@click.option("--report", type=click.Path(), default=None,
              help="Training report (JSON lines).")
@_train_options
@_common_options
@click.pass_context
def train(ctx, **_):
    """Train a flow privately on a CSV dataset (budget-gated)."""
    cfg = _resolve(ctx, "data", "out")
    ds = _load_matrix(cfg["data"], cfg["has_header"])
    if cfg["do_standardize"]:
        ds = dt.standardize(ds)
    X = ds.X
    rng = np.random.default_rng(cfg["seed"])
    holdout = None
    if cfg["holdout_frac"] > 0:
        n_hold = int(round(cfg["holdout_frac"] * X.shape[0]))
        perm = rng.permutation(X.shape[0])
        holdout, X = X[perm[:n_hold]], X[perm[n_hold:]]
    model = _build_model(cfg, X, ds.dim, cfg["seed"])
    model, rep = train_dp_nf(X, model, _make_train_config(cfg),
                             holdout=holdout)
    model.save(cfg["out"])
    if cfg["report"]:
        with open(cfg["report"], "w") as fh:
            fh.write(rep.to_jsonl())
    summary = {"steps": rep.steps, "spent_epsilon": rep.final_epsilon,
               "skipped_batches": rep.skipped_batches,
               "train_nll": rep.checkpoints[-1].train_nll,
               "holdout_nll": rep.checkpoints[-1].holdout_nll,
               "gdp_note": "CLT-approximate" if cfg["accountant"] == "gdp" else None}
    _write_manifest("train", cfg, {"spent_epsilon": rep.final_epsilon})
    _echo_json(summary)


@cli.command("sample")
@click.option("--model", "model_path", type=click.Path(exists=True),
              default=None)
@click.option("--n", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@_common_options
@click.pass_context
def sample(ctx, **_):
    """Draw synthetic rows from a saved model."""
    cfg = _resolve(ctx, "model_path", "n", "out")
    model = FlowModel.load(cfg["model_path"])
    dt.save_csv(cfg["out"], model.sample(cfg["n"], cfg["seed"]))
    _write_manifest("sample", cfg)
    _echo_json({"rows": cfg["n"], "out": cfg["out"]})


@cli.command("logprob")
@click.option("--model", "model_path", type=click.Path(exists=True),
              default=None)
@click.option("--data", type=click.Path(exists=True), default=None)
@click.option("--has-header", is_flag=True, default=False)
@click.option("--out", type=click.Path(), default=None)
@_common_options
@click.pass_context
def logprob(ctx, **_):
    """Per-row log-density of a dataset under a saved model."""
    cfg = _resolve(ctx, "model_path", "data")
    model = FlowModel.load(cfg["model_path"])
    ds = _load_matrix(cfg["data"], cfg["has_header"])
    lp = model.log_prob(ds.X)
    if cfg["out"]:
        _write_rows(cfg["out"], ["log_prob"], [[repr(float(v))] for v in lp])
    _write_manifest("logprob", cfg)
    _echo_json({"mean_log_prob": float(np.mean(lp)), "rows": ds.n})


@cli.command("eval-ll")
@click.option("--data", type=click.Path(exists=True), default=None)
@click.option("--has-header", is_flag=True, default=False)
@click.option("--standardize", "do_standardize", is_flag=True, default=False)
@click.option("--folds", type=int, default=10, show_default=True)
@_train_options
@_common_options
@click.pass_context
def eval_ll(ctx, **_):
    """Cross-validated mean test log-likelihood: train on each 90% split,
    score the held-out 10%."""
    cfg = _resolve(ctx, "data")
    ds = _load_matrix(cfg["data"], cfg["has_header"])
    splits = dt.make_cv_splits(ds.n, folds=cfg["folds"], seed=cfg["seed"])
    per_fold = []
    for fold, (tr, te) in enumerate(splits):
        train_ds = dt.Dataset(ds.X[tr])
        test_X = ds.X[te]
        if cfg["do_standardize"]:
            train_ds = dt.standardize(train_ds)
            rec = train_ds.standardization
            test_X = (test_X - rec.mean) / rec.std
        model = _build_model(cfg, train_ds.X, ds.dim, cfg["seed"] + fold)
        config = _make_train_config(cfg)
        config.seed = cfg["seed"] + fold
        model, _rep = train_dp_nf(train_ds.X, model, config)
        per_fold.append(float(np.mean(model.log_prob(test_X))))
        click.echo(f"fold {fold}: test log-likelihood {per_fold[-1]:.4f}",
                   err=True)
    _write_manifest("eval-ll", cfg)
    _echo_json({"mean_test_log_likelihood": float(np.mean(per_fold)),
                "std": float(np.std(per_fold)), "per_fold": per_fold})


@cli.command("accountant")
@click.option("--q", type=float, default=None, help="Sampling ratio b/n.")
@click.option("--sigma", type=float, default=None)
@click.option("--delta", type=float, default=None)
@click.option("--t-max", type=int, default=None)
@click.option("--t-min", type=int, default=1, show_default=True)
@click.option("--points", type=int, default=30, show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="CSV path (default: stdout).")
@_common_options
@click.pass_context
def accountant_cmd(ctx, **_):
    """Tabulate spent epsilon under both accountants over a step range."""
    cfg = _resolve(ctx, "q", "sigma", "delta", "t_max")
    rdp = Accountant("rdp", cfg["q"], cfg["sigma"], cfg["delta"])
    gdp = Accountant("gdp", cfg["q"], cfg["sigma"], cfg["delta"])
    grid = np.unique(np.geomspace(cfg["t_min"], cfg["t_max"],
                                  cfg["points"]).astype(int))
    rows = [[t, repr(rdp.eps(int(t))), repr(gdp.eps(int(t))),
             repr(gdp_mu(int(t), cfg["q"], cfg["sigma"]))] for t in grid]
    header = ["t", "eps_rdp", "eps_gdp", "mu"]
    if cfg["out"]:
        _write_rows(cfg["out"], header, rows)
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    _write_manifest("accountant", cfg, {"gdp_note": "CLT-approximate"})


@cli.command("init")
@click.option("--data", type=click.Path(exists=True), default=None)
@click.option("--has-header", is_flag=True, default=False)
@click.option("--out", type=click.Path(), default=None)
@click.option("--ctilde", type=float, default=20.0, show_default=True,
              help="Feature clip range width.")
@click.option("--epsilon", type=float, default=1.0, show_default=True)
@click.option("--delta", type=float, default=1e-5, show_default=True)
@click.option("--blocks", type=int, default=5, show_default=True)
@click.option("--hidden", type=int, default=64, show_default=True)
@_common_options
@click.pass_context
def init_cmd(ctx, **_):
    """Build a flow with actnorm layers initialized from privatized
    feature statistics."""
    cfg = _resolve(ctx, "data", "out")
    ds = _load_matrix(cfg["data"], cfg["has_header"])
    model = build_maf(ds.dim, n_blocks=cfg["blocks"], hidden=cfg["hidden"],
                      actnorm=True, seed=cfg["seed"])
    config = InitConfig(clip_range=cfg["ctilde"], epsilon=cfg["epsilon"],
                        delta=cfg["delta"], seed=cfg["seed"])
    dp_nf_init(ds.X, model, config)
    model.save(cfg["out"])
    _write_manifest("init", cfg, {
        "spent_epsilon": cfg["epsilon"], "spent_delta": cfg["delta"],
        "sensitivity_note": "mean c/n, std c/sqrt(n) for clipped features"})
    _echo_json({"out": cfg["out"], "epsilon": cfg["epsilon"],
                "delta": cfg["delta"]})


@cli.command("anomaly-roc")
@click.option("--model", "model_path", type=click.Path(exists=True),
              default=None)
@click.option("--data", type=click.Path(exists=True), default=None,
              help="In-distribution test rows (CSV).")
@click.option("--has-header", is_flag=True, default=False)
@click.option("--out", type=click.Path(), default=None,
              help="ROC points CSV (threshold, fpr, tpr).")
@_common_options
@click.pass_context
def anomaly_roc(ctx, **_):
    """Likelihood-threshold ROC against generated tail anomalies."""
    cfg = _resolve(ctx, "model_path", "data", "out")
    model = FlowModel.load(cfg["model_path"])
    ds = _load_matrix(cfg["data"], cfg["has_header"])
    anomalies = ad.gen_tail_anomalies(ds.X, ds.n, seed=cfg["seed"])
    scores = np.concatenate([model.log_prob(ds.X), model.log_prob(anomalies)])
    labels = np.concatenate([np.ones(ds.n, dtype=int),
                             np.zeros(ds.n, dtype=int)])
    curve = ad.roc(scores, labels)
    _write_rows(cfg["out"], ["threshold", "fpr", "tpr"],
                [[repr(float(t)), repr(float(f)), repr(float(p))]
                 for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr)])
    threshold, accuracy = ad.select_threshold(scores, labels)
    _write_manifest("anomaly-roc", cfg)
    _echo_json({"auc": curve.auc, "best_threshold": threshold,
                "best_accuracy": accuracy})


@cli.command("dp-ad")
@click.option("--data", type=click.Path(exists=True), default=None)
@click.option("--has-header", is_flag=True, default=False)
@click.option("--k", type=int, default=10, show_default=True)
@click.option("--eps", "eps_grid", type=str, default="0.1,0.5,1,2,5",
              show_default=True, help="Comma-separated per-query budgets.")
@click.option("--test-frac", type=float, default=0.2, show_default=True)
@click.option("--train-steps", type=int, default=1000, show_default=True)
@click.option("--hidden", type=int, default=64, show_default=True)
@click.option("--blocks", type=int, default=5, show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="CSV of (eps, accuracy).")
@_common_options
@click.pass_context
def dp_ad(ctx, **_):
    """Ensemble anomaly detection accuracy as a function of the per-query
    privacy budget."""
    cfg = _resolve(ctx, "data", "out")
    ds = _load_matrix(cfg["data"], cfg["has_header"])
    rng = np.random.default_rng(cfg["seed"])
    n_test = int(round(cfg["test_frac"] * ds.n))
    perm = rng.permutation(ds.n)
    test_X, train_X = ds.X[perm[:n_test]], ds.X[perm[n_test:]]
    anomalies = ad.gen_tail_anomalies(test_X, n_test, seed=cfg["seed"])
    queries = np.vstack([test_X, anomalies])
    labels = np.concatenate([np.ones(n_test, dtype=int),
                             np.zeros(n_test, dtype=int)])

    detector = ad.build_ensemble(train_X, cfg["k"], n_blocks=cfg["blocks"],
                                 hidden=cfg["hidden"],
                                 train_steps=cfg["train_steps"],
                                 seed=cfg["seed"])
    member_scores = np.stack([m.log_prob(queries) for m in detector.models])
    pooled = member_scores.ravel()
    pooled_labels = np.tile(labels, cfg["k"])
    detector.threshold, _ = ad.select_threshold(pooled, pooled_labels)

    votes = (member_scores > detector.threshold).sum(axis=0)
    seq = np.random.SeedSequence(cfg["seed"])
    rows = []
    for eps in [float(v) for v in cfg["eps_grid"].split(",")]:
        correct = 0
        for c, label, child in zip(votes, labels, seq.spawn(len(votes))):
            predicted = exp_mech_binary(int(c), detector.k, eps, child)
            correct += int(predicted == bool(label))
        rows.append([repr(eps), repr(correct / len(labels))])
    _write_rows(cfg["out"], ["eps", "accuracy"], rows)
    _write_manifest("dp-ad", cfg, {
        "threshold": detector.threshold,
        "cumulative_epsilon": "query_count * eps per row (simple composition)"})
    _echo_json({"k": cfg["k"], "queries": int(len(labels)),
                "threshold": detector.threshold, "out": cfg["out"]})


@cli.command("downstream-knn")
@click.option("--model", "model_path", type=click.Path(exists=True),
              default=None)
@click.option("--train", "train_path", type=click.Path(exists=True),
              default=None, help="Real training rows (last column = target).")
@click.option("--test", "test_path", type=click.Path(exists=True),
              default=None)
@click.option("--has-header", is_flag=True, default=False)
@click.option("--k", type=int, default=3, show_default=True)
@_common_options
@click.pass_context
def downstream_knn(ctx, **_):
    """kNN regression MSE on real test data, trained on model samples vs on
    the real training data (baseline)."""
    cfg = _resolve(ctx, "model_path", "train_path", "test_path")
    model = FlowModel.load(cfg["model_path"])
    train_ds = _load_matrix(cfg["train_path"], cfg["has_header"])
    test_ds = _load_matrix(cfg["test_path"], cfg["has_header"])
    synth = dt.Dataset(model.sample(train_ds.n, cfg["seed"]))
    baseline = dt.knn_regress_mse(train_ds, test_ds, k=cfg["k"])
    synthetic = dt.knn_regress_mse(synth, test_ds, k=cfg["k"])
    _write_manifest("downstream-knn", cfg)
    _echo_json({"baseline_mse": baseline, "synthetic_mse": synthetic,
                "k": cfg["k"]})


@cli.command("project-pca")
@click.option("--data", type=click.Path(exists=True), default=None)
@click.option("--has-header", is_flag=True, default=False)
@click.option("--components", type=int, default=2, show_default=True)
@click.option("--out", type=click.Path(), default=None)
@_common_options
@click.pass_context
def project_pca(ctx, **_):
    """Project a dataset onto its top principal components (CSV out)."""
    cfg = _resolve(ctx, "data", "out")
    ds = _load_matrix(cfg["data"], cfg["has_header"])
    projected, comps = dt.pca_project(ds, components=cfg["components"])
    _write_rows(cfg["out"],
                [f"pc{i + 1}" for i in range(cfg["components"])],
                [[repr(float(v)) for v in row] for row in projected])
    _write_manifest("project-pca", cfg)
    _echo_json({"components": comps.tolist(), "out": cfg["out"]})


@cli.command("hist")
@click.option("--data", type=click.Path(exists=True), default=None)
@click.option("--has-header", is_flag=True, default=False)
@click.option("--bins", type=int, default=50, show_default=True)
@click.option("--out", type=click.Path(), default=None)
@_common_options
@click.pass_context
def hist(ctx, **_):
    """Dimension-wise histogram table: (dim, bin_left, bin_right, count)."""
    cfg = _resolve(ctx, "data", "out")
    ds = _load_matrix(cfg["data"], cfg["has_header"])
    rows = []
    for j, (edges, counts) in enumerate(dt.dimwise_histogram(ds, cfg["bins"])):
        for b in range(len(counts)):
            rows.append([j, repr(float(edges[b])), repr(float(edges[b + 1])),
                         int(counts[b])])
    _write_rows(cfg["out"], ["dim", "bin_left", "bin_right", "count"], rows)
    _write_manifest("hist", cfg)
    _echo_json({"dims": ds.dim, "bins": cfg["bins"], "out": cfg["out"]})


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        sys.exit(2)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except (DpflowError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)
    sys.exit(0)


if __name__ == "__main__":
    main()
