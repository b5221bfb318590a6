"""Command-line entry point: ``hbaflow {gen-data,train,eval,sample,inspect,bench}``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from hbaflow import haar
from hbaflow.checkpoint import CheckpointError, load_checkpoint
from hbaflow.config import ConfigKeyError, float_list, int_list, render, resolve
from hbaflow.coupling import NumericError
from hbaflow.data import (BRANCHES, ConfigError, OrderingError, ParseError,
                          SyntheticScenarioConfig, fold_indices, generate_synthetic, kfold_split,
                          load_tracks, read_manifest, window_and_normalize, write_manifest,
                          write_tracks)
from hbaflow.eval import (MetricReport, aggregate_reports, benchmark_sampling, evaluate,
                          mode_coverage)
from hbaflow.model import HBAFlowModel, ModelConfig
from hbaflow.train import (TrainConfig, TrainingDiverged, format_log_line,
                           load_training_checkpoint, save_training_checkpoint, train)

log = logging.getLogger("hbaflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
    p = _Parser(prog="hbaflow", description="Haar block-autoregressive trajectory flows")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in [("gen-data", "generate the synthetic intersection dataset"),
                        ("train", "train one model per cross-validation fold"),
                        ("eval", "evaluate trained folds and aggregate"),
                        ("sample", "draw futures for test examples"),
                        ("inspect", "dump the Haar pyramid of trajectories"),
                        ("bench", "time sampling of a 128-sample batch")]:
        sub.add_parser(name, parents=[common], help=help_)
    return p


# -- helpers ------------------------------------------------------------------------

def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(dim=2, K=cfg["model.K"], n_steps=cfg["model.n_steps"],
                       transform=cfg["model.transform"], channels=cfg["model.channels"],
                       kernel=cfg["model.kernel"], dilations=int_list(cfg["model.dilations"]),
                       prior=cfg["model.prior"], alpha=cfg["model.alpha"],
                       alpha_mode=cfg["model.alpha_mode"], encoder_dim=cfg["model.encoder_dim"])


def _scenario(cfg: dict) -> SyntheticScenarioConfig:
    probs = {b: cfg[f"data.p_{b}"] for b in BRANCHES}
    for b, p in probs.items():
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"data.p_{b} must lie in [0, 1], got {p}")
    if abs(sum(probs.values()) - 1.0) > 1e-9:
        raise ConfigError("data.p_straight + data.p_left + data.p_right must sum to 1, got "
                          f"{sum(probs.values())}")
    for key in ("data.speed_std", "data.noise_std"):
        if cfg[key] < 0:
            raise ConfigError(f"{key} must be >= 0, got {cfg[key]}")
    return SyntheticScenarioConfig(
        probs=tuple(probs[b] for b in BRANCHES), speed_mean=cfg["data.speed_mean"],
        speed_std=cfg["data.speed_std"], noise_std=cfg["data.noise_std"],
        t_obs=cfg["data.t_obs"], t_fut=cfg["data.t_fut"], count=cfg["data.count"],
        seed=cfg["seed"], dt=cfg["data.dt"])


def load_dataset(cfg: dict, out: Path):
    """Windowed dataset plus the fold assignment for the configured run."""
    path = Path(cfg["data.path"]) if cfg["data.path"] else out / "tracks.csv"
    if not path.exists():
        raise FileNotFoundError(f"track file not found: {path} (run gen-data or set data.path)")
    tracks = load_tracks(path)
    manifest = path.with_name("manifest.txt")
    scale = None
    if manifest.exists():
        m = read_manifest(manifest)
        if "normalization_scale" in m:
            scale = float(m["normalization_scale"])
    labels = {}
    lab_path = path.with_name("branches.csv")
    if lab_path.exists():
        for line in lab_path.read_text(encoding="utf-8").splitlines()[1:]:
            tid, b = line.split(",")
            labels[tid] = int(b)
    ds = window_and_normalize(tracks, cfg["data.t_obs"], cfg["data.t_fut"], cfg["data.stride"],
                              K=cfg["model.K"], resample=cfg["data.resample"], scale=scale,
                              labels=labels)
    assign = kfold_split(ds.track_ids, cfg["train.folds"], cfg["seed"])
    return ds, assign


def run_folds(cfg: dict) -> list[int]:
    spec = str(cfg["train.run_folds"]).strip()
    if spec == "all":
        return list(range(cfg["train.folds"]))
    folds = list(int_list(spec))
    bad = [f for f in folds if not 0 <= f < cfg["train.folds"]]
    if bad:
        raise ConfigError(f"train.run_folds contains folds outside 0..{cfg['train.folds'] - 1}: {bad}")
    return folds


def _fold_ckpt(out: Path, fold: int) -> Path:
    return out / f"fold{fold}" / "checkpoint.hbaf"


# -- commands ----------------------------------------------------------------------

def cmd_gen_data(cfg: dict, out: Path) -> None:
    sc = _scenario(cfg)
    st = generate_synthetic(sc)
    write_tracks(st.tracks, out / "tracks.csv")
    with (out / "branches.csv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("track_id,branch\n")
        for tr, b in zip(st.tracks, st.branches):
            fh.write(f"{tr.id},{int(b)}\n")
    from hbaflow.data import displacement_scale

    write_manifest(out / "manifest.txt", {
        "resample_rate": cfg["data.resample"], "t_obs": sc.t_obs, "t_fut": sc.t_fut,
        "normalization_scale": repr(displacement_scale(st.tracks, cfg["data.resample"])),
        "rows": sum(len(t) for t in st.tracks), "tracks": len(st.tracks), "dt": sc.dt,
        "seed": sc.seed,
    })
    print(f"wrote {len(st.tracks)} tracks to {out / 'tracks.csv'}")


def cmd_train(cfg: dict, out: Path) -> None:
    ds, assign = load_dataset(cfg, out)
    folds = run_folds(cfg)
    resume = cfg["train.resume"]
    if resume and len(folds) != 1:
        raise ConfigError("train.resume needs exactly one fold in train.run_folds")
    for fold in folds:
        tr, va, _ = fold_indices(ds, assign, fold, cfg["train.val_fraction"], cfg["seed"])
        fdir = out / f"fold{fold}"
        fdir.mkdir(parents=True, exist_ok=True)
        state = None
        if resume:
            model, state = load_training_checkpoint(resume)
            state.lr = cfg["train.lr"]
        else:
            model = HBAFlowModel(model_config(cfg), seed=cfg["seed"] + fold)
        tcfg = TrainConfig(batch_size=cfg["train.batch_size"], epochs=cfg["train.epochs"],
                           lr=cfg["train.lr"], lr_final=cfg["train.lr_final"],
                           clip_norm=cfg["train.clip_norm"],
                           seed=cfg["seed"] + fold, max_steps=cfg["train.max_steps"])
        logf = (fdir / "metrics.csv").open("w", encoding="utf-8", newline="\n")
        logf.write("epoch,train_nll,val_nll,alpha,wall_seconds\n")

        def on_epoch(rec, fh=logf):
            fh.write(format_log_line(rec) + "\n")
            fh.flush()

        try:
            res = train(model, ds.arrays(tr), ds.arrays(va) if va else None, tcfg, state, on_epoch)
        except TrainingDiverged as exc:
            diag = out / "diagnostics.txt"
            diag.write_text("".join(f"{k}={v}\n" for k, v in
                                    {"fold": fold, **exc.diagnostics}.items()), encoding="utf-8")
            raise
        finally:
            logf.close()
        save_training_checkpoint(res.model, res.state, _fold_ckpt(out, fold))
        if cfg["eval.plots"]:
            from hbaflow.plotting import save_loss_curve

            save_loss_curve(res.log, fdir / "loss.png")
        print(f"fold {fold}: best val NLL {res.best_val:.4f} after {res.state.step} steps")


def _eval_subset(idx: list[int], cfg: dict) -> list[int]:
    m = cfg["eval.max_examples"]
    return idx[:m] if m else idx


def cmd_eval(cfg: dict, out: Path) -> None:
    ds, assign = load_dataset(cfg, out)
    folds = run_folds(cfg)
    ckpts = {f: _fold_ckpt(out, f) for f in folds}
    missing = [str(p) for p in ckpts.values() if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing checkpoint(s): {', '.join(missing)}")
    reports = []
    for fold in folds:
        model = load_checkpoint(ckpts[fold])
        _, _, te = fold_indices(ds, assign, fold, cfg["train.val_fraction"], cfg["seed"])
        te = _eval_subset(te, cfg)
        rep = evaluate(model, ds, te, n_samples=cfg["eval.n_samples"],
                       n_min_samples=cfg["eval.n_min_samples"], fraction=cfg["eval.fraction"],
                       horizons_sec=float_list(cfg["eval.horizons"]), seed=cfg["seed"],
                       label=f"fold{fold}")
        if cfg["eval.benchmark"]:
            x0 = ds[te[0]].x
            rep.sampling_ms = benchmark_sampling(model, x0, cfg["data.t_fut"],
                                                 cfg["bench.batch"], cfg["bench.repeats"]).median_ms
        reports.append(rep)
        (out / f"report_fold{fold}.txt").write_text(rep.to_kv(), encoding="utf-8")
    agg = aggregate_reports(reports)
    (out / "report_aggregate.txt").write_text(agg.to_kv(), encoding="utf-8")
    rows = [agg.csv_header()] + [r.to_csv_row() for r in reports + [agg]]
    (out / "reports.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    if cfg["eval.plots"]:
        from hbaflow.plotting import save_horizon_errors

        save_horizon_errors(reports + [agg], out / "horizon_errors.png")
    print(agg.to_kv(), end="")


def cmd_sample(cfg: dict, out: Path) -> None:
    ds, assign = load_dataset(cfg, out)
    fold = cfg["sample.fold"]
    ck = _fold_ckpt(out, fold)
    model = load_checkpoint(ck)
    _, _, te = fold_indices(ds, assign, fold, cfg["train.val_fraction"], cfg["seed"])
    te = te[:cfg["sample.max_examples"]] if cfg["sample.max_examples"] else te
    n = cfg["sample.n"]
    sdir = out / "samples"
    sdir.mkdir(parents=True, exist_ok=True)
    lines = ["example_id,track_id,sample_id,step,x,y"]
    all_samples = []
    for j, i in enumerate(te):
        ex = ds[i]
        s = ex.norm.invert(model.sample(ex.x, n, ds[i].y.shape[0], seed=cfg["seed"] + j))
        all_samples.append(s - ex.norm.offset)
        for sid in range(n):
            for t, p in enumerate(s[sid], start=1):
                lines.append(f"{j},{ex.track_id},{sid},{t},{float(p[0])!r},{float(p[1])!r}")
        if cfg["sample.svg"]:
            from hbaflow.plotting import svg_overlay

            svg = svg_overlay(ex.norm.invert(ex.x), s, ex.norm.invert(ex.y))
            (sdir / f"example{j}.svg").write_text(svg, encoding="utf-8")
    (sdir / "samples.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if all_samples:
        cov = mode_coverage(np.concatenate(all_samples))
        print("mode coverage " + " ".join(f"{b}={c:.3f}" for b, c in zip(BRANCHES, cov)))
    print(f"wrote {len(te) * n} samples to {sdir / 'samples.csv'}")


def _inspect_inputs(cfg: dict):
    if cfg["inspect.input"]:
        return [(t.id, t.positions) for t in load_tracks(cfg["inspect.input"])]
    vals = np.array(float_list(cfg["inspect.values"]))
    d = cfg["inspect.dim"]
    if d < 1 or vals.size % d:
        raise ConfigError(f"inspect.values has {vals.size} numbers, not a multiple of inspect.dim={d}")
    return [("values", vals.reshape(-1, d))]


def cmd_inspect(cfg: dict, out: Path) -> None:
    K, alpha = cfg["model.K"], cfg["model.alpha"]
    lines = []
    for name, pts in _inspect_inputs(cfg):
        pyr = haar.decompose(pts, K, alpha)
        back = haar.reconstruct(pyr)
        lines.append(f"[{name}] T={pts.shape[0]} d={pts.shape[1]} K={K} alpha={alpha!r}")
        for k, f in enumerate(pyr.fines, start=1):
            lines.append(f"f{k} = " + "; ".join(",".join(repr(float(v)) for v in row) for row in f))
        lines.append(f"c{K} = " + "; ".join(",".join(repr(float(v)) for v in row)
                                            for row in pyr.coarsest))
        for k, ld in enumerate(pyr.logdets, start=1):
            lines.append(f"logdet{k} = {float(ld)!r}")
        lines.append(f"logdet_total = {float(pyr.logdet)!r}")
        lines.append(f"roundtrip_max_abs_err = {float(np.max(np.abs(back - pts)))!r}")
    text = "\n".join(lines) + "\n"
    (out / "pyramid.txt").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_bench(cfg: dict, out: Path) -> None:
    t = cfg["data.t_fut"]
    ck = _fold_ckpt(out, cfg["sample.fold"])
    model = load_checkpoint(ck) if ck.exists() else HBAFlowModel(model_config(cfg), seed=cfg["seed"])
    x = np.zeros((cfg["data.t_obs"], 2))
    res = benchmark_sampling(model, x, t, cfg["bench.batch"], cfg["bench.repeats"])
    text = (f"batch={cfg['bench.batch']}\nrepeats={cfg['bench.repeats']}\nt_fut={t}\n"
            f"K={model.config.K}\nstages={res.stages}\nmedian_ms={res.median_ms:.3f}\n"
            f"iqr_ms={res.iqr_ms:.3f}\n")
    (out / "bench.txt").write_text(text, encoding="utf-8")
    print(text, end="")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "sample": cmd_sample, "inspect": cmd_inspect, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args.config, args.overrides, args.seed)
    except (ConfigKeyError, ValueError, FileNotFoundError) as exc:
        print(f"hbaflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = render(cfg)
    print(f"# {args.command} config\n{text}", end="")
    (out / f"config.{args.command}.txt").write_text(text, encoding="utf-8")
    try:
        COMMANDS[args.command](cfg, out)
    except (ConfigError, ParseError, OrderingError, FileNotFoundError, CheckpointError,
            haar.LengthError, haar.ParameterError, haar.StructureError) as exc:
        print(f"hbaflow: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"hbaflow: error: {exc}; diagnostics in {out / 'diagnostics.txt'}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NumericError, FloatingPointError) as exc:
        print(f"hbaflow: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"hbaflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
