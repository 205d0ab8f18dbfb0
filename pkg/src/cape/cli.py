"""Command-line entry point.

Commands: simulate | pretrain | finetune | forecast | zeroshot | analyze |
gradcheck. Each run writes its artifacts (CSVs, checkpoints, and figures)
into a directory named by the hash of the effective configuration, so
reruns of the same configuration land in the same place and produce the
same bytes. Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import (AnalysisError, MetricReport, cmd_score, dbi_pairwise,
                       dbi_score, forecast_metrics, naive_baselines,
                       prototype_alignment_report, window_embeddings)
from .config import ConfigError, RunConfig, describe_keys, load_config
from .data import (DataError, load_csv, save_csv, split_indices,
                   zscore_normalize)
from .gradcheck import run_suite
from .losses import LossWeights
from .model import CapeModel, ModelConfig
from .sim import CorpusSpec, SirdParams, Trajectory, make_corpus, simulate_sird
from .training import (CheckpointError, TrainConfig, finetune,
                       load_checkpoint, pretrain, save_checkpoint)

log = logging.getLogger("cape")

VALIDATION_ERRORS = (ConfigError, DataError, CheckpointError, AnalysisError,
                     FileNotFoundError, ValueError)


# ---------------------------------------------------------------------------
# config adapters

def model_config_from(cfg: RunConfig) -> ModelConfig:
    roles = [r.strip() for r in cfg.roles.split(",") if r.strip()]
    return ModelConfig(T=cfg.lookback, patch_len=cfg.patch_len, d=cfg.hidden,
                       L=cfg.layers, heads=cfg.heads, K=cfg.prototypes,
                       horizon=cfg.horizon, ff_mult=cfg.ff_mult,
                       constraint_roles=roles)


def train_config_from(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                       lr=cfg.lr, weight_decay=cfg.weight_decay,
                       clip_norm=cfg.clip_norm, stride=cfg.stride,
                       mask_ratio=cfg.mask_ratio,
                       splits=(cfg.split_train, cfg.split_val, cfg.split_test),
                       finetune_epochs=cfg.finetune_epochs,
                       finetune_lr=cfg.finetune_lr,
                       lambda_finetune=cfg.lambda_finetune)


def weights_from(cfg: RunConfig) -> LossWeights:
    return LossWeights(lambda_align=cfg.lambda_align,
                       epsilon_mono=cfg.epsilon_mono,
                       alpha_mix=cfg.alpha_mix,
                       perturb_eps=cfg.perturb_eps,
                       r0_range=(cfg.r0_lower, cfg.r0_upper),
                       masked_only=cfg.masked_only,
                       normalize_contrastive=cfg.normalize_contrastive,
                       ngm_subset=cfg.ngm_subset)


def corpus_spec_from(cfg: RunConfig) -> CorpusSpec:
    return CorpusSpec(
        n_series=cfg.sim_series, length=cfg.sim_length, noise_level=cfg.sim_noise,
        observable=cfg.sim_observable, population=cfg.population,
        param_ranges={"beta": (cfg.sim_beta_min, cfg.sim_beta_max),
                      "gamma": (cfg.sim_gamma_min, cfg.sim_gamma_max),
                      "mu": (cfg.sim_mu_min, cfg.sim_mu_max),
                      "I0": (cfg.sim_i0_min, cfg.sim_i0_max)})


# ---------------------------------------------------------------------------
# small IO helpers

def write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, (int, float))
                              and not isinstance(v, bool) else str(v)
                              for v in row) + "\n")


def write_metrics_csv(path: Path, reports: dict[str, dict[int, MetricReport]]) -> None:
    """Long-form (model,metric,horizon,value) rows, full float precision."""
    rows = []
    for model_name, by_h in sorted(reports.items()):
        for h, rep in sorted(by_h.items()):
            for metric, value in rep.row().items():
                if metric == "horizon":
                    continue
                rows.append([model_name, metric, h, value])
    write_rows(path, ["model", "metric", "horizon", "value"], rows)


def read_metrics_csv(path: Path) -> dict[str, dict[int, MetricReport]]:
    out: dict[str, dict[int, dict]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            d = out.setdefault(row["model"], {}).setdefault(
                int(float(row["horizon"])), {})
            d[row["metric"]] = float(row["value"])
    built: dict[str, dict[int, MetricReport]] = {}
    for model_name, by_h in out.items():
        built[model_name] = {}
        for h, vals in by_h.items():
            built[model_name][h] = MetricReport(
                horizon=h, mse=vals["mse"], mae=vals["mae"],
                n_windows=int(vals["n_windows"]),
                residual_min=vals["residual_min"],
                residual_max=vals["residual_max"],
                residual_mean=vals["residual_mean"])
    return built


def _require_file(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} path not set in the config")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def test_split_windows(records, T: int, h: int, splits, stride: int = 1):
    """Windows whose targets lie inside the chronological test split;
    lookbacks may extend back into earlier splits."""
    xs, ys, sources = [], [], []
    for rec in records:
        rec_n = zscore_normalize(rec, train_frac=splits[0])
        (_, _), (_, _), (test_start, n) = split_indices(len(rec_n), splits)
        vals = rec_n.values
        for off in range(max(0, test_start - T), n - T - h + 1, stride):
            if off + T >= test_start:
                xs.append(vals[off:off + T])
                ys.append(vals[off + T:off + T + h])
                sources.append((rec.disease_id, rec.region_id, off))
    if not xs:
        raise DataError(f"no test windows: series too short for T={T}, h={h}")
    return np.stack(xs), np.stack(ys), sources


def batched_zero_shot(model: CapeModel, xs: np.ndarray,
                      horizon: int) -> np.ndarray:
    """Mask-last-patch forecasts for a stack of windows, rolling the window
    forward on its own predictions for horizons beyond one patch."""
    cfg = model.config
    window = np.array(xs, dtype=float)
    preds = np.empty((len(xs), 0))
    while preds.shape[1] < horizon:
        mask = np.zeros((len(xs), cfg.C), dtype=bool)
        mask[:, -1] = True
        out = model.forward(window, mode="pretrain", mask=mask)
        patch = out.reconstruction.data[:, -cfg.patch_len:]
        preds = np.hstack([preds, patch])
        window = np.hstack([window[:, cfg.patch_len:], patch])
    return preds[:, :horizon]


# ---------------------------------------------------------------------------
# command handlers

def cmd_simulate(cfg: RunConfig, run_dir: Path) -> None:
    records = make_corpus(seed=cfg.seed, spec=corpus_spec_from(cfg))
    save_csv(records, run_dir / "corpus.csv")

    truth_rows = []
    trajectories = []
    for rec in records:
        params = SirdParams(beta=rec.meta["beta"], gamma=rec.meta["gamma"],
                            mu=rec.meta["mu"], N=cfg.population,
                            S0=1.0 - rec.meta["I0"], I0=rec.meta["I0"])
        traj = simulate_sird(params, len(rec) - 1, observable=cfg.sim_observable)
        trajectories.append(traj)
        for i, ts in enumerate(rec.timestamps):
            truth_rows.append([rec.disease_id, rec.region_id, ts,
                               traj.S[i], traj.I[i], traj.R[i], traj.D[i]])
    write_rows(run_dir / "truth.csv",
               ["disease_id", "region_id", "timestamp", "S", "I", "R", "D"],
               truth_rows)
    log.info("wrote %d series to %s", len(records), run_dir / "corpus.csv")
    if cfg.figures:
        from . import report
        report.trajectory_figure(trajectories, run_dir / "trajectories.png")


def cmd_pretrain(cfg: RunConfig, run_dir: Path) -> None:
    records = load_csv(_require_file(cfg.data, "dataset"))
    if not records:
        raise DataError("empty corpus")
    state = pretrain(records, model_config_from(cfg), train_config_from(cfg),
                     weights_from(cfg), seed=cfg.seed)
    state.use_best()
    save_checkpoint(state, run_dir / "checkpoint.bin")
    rows = []
    for key, series in sorted(state.history.items()):
        for epoch, value in enumerate(series):
            rows.append([key, epoch, value])
    write_rows(run_dir / "loss_history.csv", ["metric", "epoch", "value"], rows)
    log.info("best val %.6f after %d epochs; %d skipped reproduction terms",
             state.best_val, state.epoch, state.ngm_skips)
    if cfg.figures:
        from . import report
        report.loss_curves_figure(state.history, run_dir / "loss_curves.png")


def cmd_finetune(cfg: RunConfig, run_dir: Path) -> None:
    ckpt = _require_file(cfg.checkpoint, "checkpoint")
    records = load_csv(_require_file(cfg.data, "dataset"))
    state = load_checkpoint(ckpt)
    state.train_config = train_config_from(cfg)
    state.weights = weights_from(cfg)
    tuned = finetune(state, records, horizon=cfg.horizon,
                     lam=cfg.lambda_finetune, seed=cfg.seed,
                     epochs=cfg.finetune_epochs)
    save_checkpoint(tuned, run_dir / "checkpoint.bin")
    splits = (cfg.split_train, cfg.split_val, cfg.split_test)
    xs, ys, _ = test_split_windows(records, tuned.model.config.T, cfg.horizon,
                                   splits)
    out = tuned.model.forward(xs, mode="forecast", horizon=cfg.horizon)
    rep = forecast_metrics(out.forecast.data, ys)
    write_metrics_csv(run_dir / "metrics.csv", {"finetuned": {cfg.horizon: rep}})
    log.info("finetuned test MSE %.6f over %d windows", rep.mse, rep.n_windows)
    if cfg.figures:
        from . import report
        report.loss_curves_figure(tuned.history, run_dir / "loss_curves.png")
        report.forecast_figure(xs, ys, out.forecast.data,
                               run_dir / "forecast.png")


def cmd_forecast(cfg: RunConfig, run_dir: Path) -> None:
    ckpt = _require_file(cfg.checkpoint, "checkpoint")
    records = load_csv(_require_file(cfg.data, "dataset"))
    state = load_checkpoint(ckpt)
    model = state.model
    splits = (cfg.split_train, cfg.split_val, cfg.split_test)
    available = [h for h in cfg.horizon_list()
                 if f"forecast{h}.W" in model.params]
    missing = sorted(set(cfg.horizon_list()) - set(available))
    if missing:
        log.warning("no finetuned heads for horizons %s; skipped", missing)
    if not available:
        raise ConfigError("checkpoint has no forecast heads for the requested "
                          "horizons; run finetune first")
    by_h: dict[int, MetricReport] = {}
    pred_rows = []
    last = None
    for h in available:
        xs, ys, sources = test_split_windows(records, model.config.T, h, splits)
        out = model.forward(xs, mode="forecast", horizon=h)
        by_h[h] = forecast_metrics(out.forecast.data, ys)
        last = (xs, ys, out.forecast.data)
        for (disease, region, off), pred, target in zip(sources,
                                                        out.forecast.data, ys):
            for step in range(h):
                pred_rows.append([disease, region, off, h, step,
                                  pred[step], target[step]])
    write_metrics_csv(run_dir / "metrics.csv", {"forecast": by_h})
    write_rows(run_dir / "predictions.csv",
               ["disease_id", "region_id", "window_start", "horizon", "step",
                "prediction", "target"], pred_rows)
    if cfg.figures and last is not None:
        from . import report
        report.metrics_figure({h: {"mse": r.mse, "mae": r.mae}
                               for h, r in by_h.items()},
                              run_dir / "metrics.png")
        report.forecast_figure(*last, run_dir / "forecast.png")


def cmd_zeroshot(cfg: RunConfig, run_dir: Path) -> None:
    ckpt = _require_file(cfg.checkpoint, "checkpoint")
    ckpt_bytes = ckpt.read_bytes()
    records = load_csv(_require_file(cfg.data, "dataset"))
    state = load_checkpoint(ckpt)
    model = state.model
    splits = (cfg.split_train, cfg.split_val, cfg.split_test)
    h = cfg.horizon
    xs, ys, sources = test_split_windows(records, model.config.T, h, splits)
    preds = batched_zero_shot(model, xs, h)
    reports = {"zeroshot": {h: forecast_metrics(preds, ys)}}
    base = naive_baselines(xs, ys)
    reports["persistence"] = {h: base["persistence"]}
    reports["mean"] = {h: base["mean"]}
    write_metrics_csv(run_dir / "metrics.csv", reports)

    zs_mse = np.mean((preds - ys) ** 2, axis=1)
    mean_mse = np.mean(ys ** 2, axis=1)
    win = zs_mse < mean_mse
    rows = [[d, r, off, zm, mm, int(w)] for (d, r, off), zm, mm, w
            in zip(sources, zs_mse, mean_mse, win)]
    write_rows(run_dir / "per_window.csv",
               ["disease_id", "region_id", "window_start", "zeroshot_mse",
                "mean_baseline_mse", "beats_mean"], rows)
    log.info("zero-shot MSE %.4f; beats mean baseline on %.1f%% of windows",
             reports["zeroshot"][h].mse, 100.0 * win.mean())
    if ckpt.read_bytes() != ckpt_bytes:
        raise RuntimeError("checkpoint changed during a frozen run")
    if cfg.figures:
        from . import report
        report.forecast_figure(xs, ys, preds, run_dir / "forecast.png")


def _load_truth(path: Path) -> dict[tuple[str, str], dict[str, list[float]]]:
    out: dict[tuple[str, str], dict[str, list[float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["disease_id"], row["region_id"])
            d = out.setdefault(key, {"S": [], "I": [], "R": [], "D": []})
            for name in "SIRD":
                d[name].append(float(row[name]))
    return out


def _alignment_groups(model: CapeModel) -> dict[str, list[int]]:
    """Compartment groups derived from role tags: decreasing -> S,
    infectious -> I, increasing -> R (D needs an explicit truth file split,
    so it is folded into R here)."""
    cfg = model.config
    groups = {"S": cfg.role_indices("mono_dec"),
              "I": cfg.role_indices("infectious"),
              "R": cfg.role_indices("mono_inc")}
    return {k: v for k, v in groups.items() if v}


def cmd_analyze(cfg: RunConfig, run_dir: Path) -> None:
    ckpt = _require_file(cfg.checkpoint, "checkpoint")
    records = load_csv(_require_file(cfg.data, "dataset"))
    state = load_checkpoint(ckpt)
    model = state.model
    splits = (cfg.split_train, cfg.split_val, cfg.split_test)

    cmd_rows = []
    emb_all, labels = [], []
    for rec in records:
        rec_n = zscore_normalize(rec, train_frac=splits[0])
        (tr0, tr1), _, (te0, te1) = split_indices(len(rec_n), splits)
        T = model.config.T
        try:
            train_emb = window_embeddings(model, rec_n.values[tr0:tr1])
            test_emb = window_embeddings(
                model, rec_n.values[max(te0 - T + 1, 0):te1])
        except AnalysisError:
            continue
        cmd_rows.append([rec.disease_id, rec.region_id,
                         cmd_score(train_emb, test_emb)])
        emb_all.append(np.vstack([train_emb, test_emb]))
        labels.extend([rec.disease_id] * (len(train_emb) + len(test_emb)))
    if not cmd_rows:
        raise AnalysisError("no series long enough to embed")
    write_rows(run_dir / "cmd.csv",
               ["disease_id", "region_id", "cmd_train_vs_test"], cmd_rows)

    embeddings = np.vstack(emb_all)
    labels_arr = np.array(labels)
    uniq = sorted(set(labels))
    if len(uniq) >= 2:
        global_dbi = dbi_score(embeddings, labels_arr)
        names, matrix = dbi_pairwise(embeddings, labels_arr)
        rows = [["__global__", "__global__", global_dbi]]
        for i, a in enumerate(names):
            for j, b in enumerate(names):
                if i < j:
                    rows.append([a, b, matrix[i, j]])
        write_rows(run_dir / "dbi.csv", ["disease_a", "disease_b", "dbi"], rows)
        if cfg.figures:
            from . import report
            report.dbi_heatmap_figure(names, matrix, run_dir / "dbi.png")
    else:
        log.info("single disease: pairwise DBI matrix omitted")
        write_rows(run_dir / "dbi.csv", ["disease_a", "disease_b", "dbi"], [])

    if cfg.truth:
        truth = _load_truth(_require_file(cfg.truth, "truth file"))
        groups = _alignment_groups(model)
        if not groups:
            log.warning("no tagged prototypes; alignment skipped")
            return
        align_rows = []
        first_report = None
        for rec in records:
            key = (rec.disease_id, rec.region_id)
            if key not in truth:
                continue
            frac = truth[key]
            traj = Trajectory(times=np.arange(len(rec), dtype=float),
                              S=np.array(frac["S"]), I=np.array(frac["I"]),
                              R=np.array(frac["R"]), D=np.array(frac["D"]),
                              observed=rec.values.astype(float))
            rec_n = zscore_normalize(rec, train_frac=splits[0])
            try:
                rep = prototype_alignment_report(
                    model, traj, groups, norm_state=rec_n.norm_state)
            except AnalysisError:
                continue
            if first_report is None:
                first_report = rep
            for name, rho in rep.correlations.items():
                align_rows.append([rec.disease_id, rec.region_id, name, rho,
                                   rep.group_mean_first_difference[name]])
        write_rows(run_dir / "alignment.csv",
                   ["disease_id", "region_id", "compartment", "spearman",
                    "mean_first_difference"], align_rows)
        if cfg.figures and first_report is not None:
            from . import report
            report.alignment_figure(first_report, run_dir / "alignment.png")


def cmd_gradcheck(cfg: RunConfig, run_dir: Path) -> None:
    results = run_suite(n_seeds=cfg.gradcheck_seeds)
    rows = [[r.name, r.seed, r.report.max_rel_error, r.report.n_checked,
             "pass" if r.passed else "fail"] for r in results]
    write_rows(run_dir / "gradcheck.csv",
               ["check", "seed", "max_rel_error", "n_checked", "status"], rows)
    failures = [r for r in results if not r.passed]
    for r in failures:
        log.error("gradcheck failure: %s seed %d (%s)", r.name, r.seed, r.report)
    log.info("%d/%d gradient checks passed", len(results) - len(failures),
             len(results))
    if failures:
        raise RuntimeError(f"{len(failures)} gradient checks failed")


HANDLERS = {
    "simulate": cmd_simulate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "forecast": cmd_forecast,
    "zeroshot": cmd_zeroshot,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cape",
        description="Compartmental-prototype epidemic forecasting",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Config keys (key=value file entries or positional overrides):\n"
               + describe_keys())
    sub = parser.add_subparsers(dest="command", required=True)
    for name in HANDLERS:
        p = sub.add_parser(name, help=f"run the {name} step",
                           formatter_class=argparse.RawDescriptionHelpFormatter,
                           epilog="Config keys:\n" + describe_keys())
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default="runs", help="output root directory")
        p.add_argument("overrides", nargs="*",
                       help="key=value overrides (win over the file)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        run_dir = Path(args.out) / f"{args.command}-{cfg.content_hash()}"
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(
            "\n".join(cfg.to_lines()) + "\n", encoding="utf-8")
        HANDLERS[args.command](cfg, run_dir)
        print(run_dir)
        return 0
    except VALIDATION_ERRORS as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 2
        log.error("runtime failure: %s", exc, exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
