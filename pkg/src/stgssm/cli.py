"""Command-line entry point.

Subcommands: synth, train, eval, predict, bench, ablate. Configuration
comes from a JSON file ({"model": {...}, "train": {...}}, both optional)
with individual flag overrides; every run is seeded. Result CSVs carry a
header comment with the package version, seed, and config hash. Exit
codes: 1 for contract violations, 2 for I/O failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

import numpy as np

from . import __version__, data, flops, model
from .tensor import ContractError, DimensionError, DomainError, NumericalError

CONTRACT_ERRORS = (ContractError, DimensionError, DomainError, NumericalError,
                   ValueError, KeyError, TypeError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(self.prog + ": error: " + message) from None


def _load_configs(args):
    raw = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            raw = json.load(f)
    model_kw = dict(raw.get("model", {}))
    train_kw = dict(raw.get("train", {}))
    for name in ("epochs", "batch_size", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            train_kw[name] = v
    for name in ("variant", "horizon_k", "history_p"):
        v = getattr(args, name, None)
        if v is not None:
            model_kw[name] = v
    return model.ModelConfig(**model_kw), model.TrainConfig(**train_kw)


def _csv_header(f, seed, cfg_hash):
    f.write(f"# stgssm v{__version__} seed={seed} config={cfg_hash}\n")


def cmd_synth(args):
    cfg = data.SyntheticConfig(n_nodes=args.nodes, t_steps=args.steps,
                               interval_minutes=args.interval, seed=args.seed or 0,
                               radius=args.radius, diffusion=args.diffusion,
                               amplitude=args.amplitude, noise_sigma=args.noise)
    ds = data.generate_synthetic(cfg)
    data.save_csv(ds, args.output)
    if args.binary:
        data.save_binary(ds, args.binary)
    print(f"wrote {ds.n_steps} steps x {ds.n_nodes} nodes to {args.output}")
    return 0


def cmd_train(args):
    model_cfg, train_cfg = _load_configs(args)
    ds = data.load_csv(args.dataset)
    result = model.fit(ds, model_cfg, train_cfg)
    _, _, test_split = data.split_dataset(ds, p=model_cfg.history_p,
                                          k=model_cfg.horizon_k)
    test_ws = model.build_windows(test_split, model_cfg.history_p,
                                  model_cfg.horizon_k, result.norm)
    report = model.evaluate_windows(result.weights, model_cfg, test_ws,
                                    result.norm, result.static_alpha)
    metrics = {"rmse": report.rmse, "mae": report.mae, "mape": report.mape}
    model.save_model(args.output, result, model_cfg, train_cfg, metrics=metrics)
    model.write_history_csv(args.history, result.history, model_cfg, train_cfg,
                            version=__version__)
    print(f"best epoch {result.best_epoch}; test RMSE {report.rmse:.6f} "
          f"MAE {report.mae:.6f} MAPE {report.mape:.3f}%")
    print(f"checkpoint -> {args.output}; history -> {args.history}")
    return 0


def _load_for_eval(args):
    weights, model_cfg, train_cfg, norm, static, manifest = model.load_model(
        args.checkpoint)
    ds = data.load_csv(args.dataset)
    split_name = args.split
    splits = dict(zip(("train", "val", "test"),
                      data.split_dataset(ds, p=model_cfg.history_p,
                                         k=model_cfg.horizon_k)))
    ws = model.build_windows(splits[split_name], model_cfg.history_p,
                             model_cfg.horizon_k, norm)
    return weights, model_cfg, train_cfg, norm, static, ws, splits[split_name]


def cmd_eval(args):
    weights, model_cfg, train_cfg, norm, static, ws, _ = _load_for_eval(args)
    if args.scenario:
        pred = data.minmax_denormalize(
            model.predict_windows(weights, model_cfg, ws, static), norm)
        truth = data.minmax_denormalize(ws.y, norm)
        flat = [t for times in ws.target_times for t in times]
        mask = data.scenario_mask(flat, args.scenario).reshape(ws.y.shape[:2])
        report = model.compute_metrics(pred, truth, mask=mask)
        print(f"{args.scenario}: RMSE {report.rmse:.6f} MAE {report.mae:.6f} "
              f"MAPE {report.mape:.3f}%")
    else:
        report = model.evaluate_windows(weights, model_cfg, ws, norm, static)
        print(f"overall: RMSE {report.rmse:.6f} MAE {report.mae:.6f} "
              f"MAPE {report.mape:.3f}%")
        for name, sub in report.scenarios.items():
            print(f"{name}: RMSE {sub.rmse:.6f} MAE {sub.mae:.6f} "
                  f"MAPE {sub.mape:.3f}%")
    return 0


def cmd_predict(args):
    weights, model_cfg, train_cfg, norm, static, ws, split = _load_for_eval(args)
    pred = data.minmax_denormalize(
        model.predict_windows(weights, model_cfg, ws, static), norm)
    cfg_hash = model.config_hash(model_cfg, train_cfg)
    with open(args.output, "w") as f:
        _csv_header(f, train_cfg.seed, cfg_hash)
        f.write("timestamp,node_id,horizon_step,"
                + ",".join(f"feature_{i}" for i in range(pred.shape[-1])) + "\n")
        for w in range(pred.shape[0]):
            for j in range(pred.shape[1]):
                ts = ws.target_times[w][j].isoformat(timespec="seconds")
                for n, node in enumerate(split.node_ids):
                    feats = ",".join(repr(float(v)) for v in pred[w, j, n])
                    f.write(f"{ts},{node},{j},{feats}\n")
    print(f"wrote {pred.shape[0] * pred.shape[1] * pred.shape[2]} forecast rows "
          f"to {args.output}")
    return 0


def _parse_sweep(text):
    kind, _, values = text.partition("=")
    if kind not in ("nodes", "length") or not values:
        raise ContractError(
            f"--sweep must look like nodes=50,100,... or length=64,128,..., got {text!r}")
    return kind, [int(v) for v in values.split(",")]


def cmd_bench(args):
    seed = args.seed or 0
    if args.kernels:
        lengths = [int(v) for v in args.kernels.split(",")]
        rows = flops.compare_kernel_backends(lengths, trials=args.trials, seed=seed)
        cols = list(rows[0].keys())
        with open(args.output, "w") as f:
            _csv_header(f, seed, "kernel-compare")
            f.write(",".join(cols) + "\n")
            for row in rows:
                f.write(",".join(repr(row[c]) if isinstance(row[c], float)
                                 else str(row[c]) for c in cols) + "\n")
        for row in rows:
            print(" ".join(f"{c}={row[c]}" for c in cols))
        print(f"kernel comparison -> {args.output}")
        return 0

    if not args.sweep:
        raise ContractError("bench needs --sweep or --kernels")
    mode, xs = _parse_sweep(args.sweep)
    result = flops.scaling_experiment(xs, mode=mode, trials=args.trials, seed=seed)
    attn = [flops.count_flops_attention(1, x if mode == "length" else args.attn_length,
                                        16).flops for x in xs] if mode == "length" else None
    with open(args.output, "w") as f:
        _csv_header(f, seed, mode)
        cols = ["x", "flops", "wall_seconds"] + (["attention_flops"] if attn else [])
        f.write(",".join(cols) + "\n")
        for i, x in enumerate(result.x_values):
            row = [str(x), str(result.flops[i]), repr(result.wall_times[i])]
            if attn:
                row.append(str(attn[i]))
            f.write(",".join(row) + "\n")
    print(f"{mode} sweep {xs}")
    print(f"flops exponent {result.flops_exponent:.6f} "
          f"(stderr {result.flops_exponent_stderr:.2e})")
    print(f"wall-time exponent {result.time_exponent:.6f} "
          f"(stderr {result.time_exponent_stderr:.2e})")
    print(f"results -> {args.output}")
    return 0


def cmd_ablate(args):
    model_cfg, train_cfg = _load_configs(args)
    ds = data.load_csv(args.dataset)
    seeds = [train_cfg.seed + i for i in range(args.seeds)]
    table = {}
    for variant in ("full", "kfgn_off", "gss_off"):
        rows = []
        for seed in seeds:
            mc = model.ModelConfig(**{**asdict(model_cfg), "variant": variant})
            tc = model.TrainConfig(**{**asdict(train_cfg), "seed": seed})
            result = model.fit(ds, mc, tc)
            _, val_split, _ = data.split_dataset(ds, p=mc.history_p, k=mc.horizon_k)
            ws = model.build_windows(val_split, mc.history_p, mc.horizon_k,
                                     result.norm)
            report = model.evaluate_windows(result.weights, mc, ws, result.norm,
                                            result.static_alpha,
                                            with_scenarios=False)
            rows.append(report)
        table[variant] = rows

    print(f"{'variant':<10} {'val RMSE (median)':>18} {'MAE':>10} {'MAPE %':>10}")
    for variant, rows in table.items():
        med = np.median([r.rmse for r in rows])
        mae = np.median([r.mae for r in rows])
        mape = np.median([r.mape for r in rows])
        print(f"{variant:<10} {med:>18.6f} {mae:>10.6f} {mape:>10.3f}")
    if args.output:
        with open(args.output, "w") as f:
            _csv_header(f, train_cfg.seed, model.config_hash(model_cfg, train_cfg))
            f.write("variant,seed,rmse,mae,mape\n")
            for variant, rows in table.items():
                for seed, r in zip(seeds, rows):
                    f.write(f"{variant},{seed},{r.rmse!r},{r.mae!r},{r.mape!r}\n")
        print(f"ablation table -> {args.output}")
    return 0


def build_parser():
    p = _Parser(prog="stgssm", description=__doc__)
    p.add_argument("--version", action="version", version=f"stgssm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="emit a synthetic dataset as CSV")
    sp.add_argument("--nodes", type=int, default=20)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--interval", type=int, default=60)
    sp.add_argument("--radius", type=float, default=0.6)
    sp.add_argument("--diffusion", type=float, default=0.2)
    sp.add_argument("--amplitude", type=float, default=0.15)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--binary", help="also write the binary cube here")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="fit a model from a config")
    tp.add_argument("-c", "--config", help="JSON config file")
    tp.add_argument("-d", "--dataset", required=True)
    tp.add_argument("-o", "--output", default="checkpoint.stgc")
    tp.add_argument("--history", default="history.csv")
    tp.add_argument("--epochs", type=int)
    tp.add_argument("--batch-size", dest="batch_size", type=int)
    tp.add_argument("--seed", type=int)
    tp.add_argument("--variant", choices=("full", "kfgn_off", "gss_off"))
    tp.set_defaults(fn=cmd_train)

    ep = sub.add_parser("eval", help="metrics and scenario breakdown")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("-d", "--dataset", required=True)
    ep.add_argument("--split", choices=("train", "val", "test"), default="test")
    ep.add_argument("--scenario", choices=data.SCENARIOS)
    ep.set_defaults(fn=cmd_eval)

    pp = sub.add_parser("predict", help="emit a forecast CSV")
    pp.add_argument("--checkpoint", required=True)
    pp.add_argument("-d", "--dataset", required=True)
    pp.add_argument("--split", choices=("train", "val", "test"), default="test")
    pp.add_argument("-o", "--output", required=True)
    pp.set_defaults(fn=cmd_predict)

    bp = sub.add_parser("bench", help="complexity scaling experiments")
    bp.add_argument("--sweep", help="nodes=50,100,... or length=64,128,...")
    bp.add_argument("--kernels", help="compare scan backends at these lengths "
                                      "(comma-separated)")
    bp.add_argument("--trials", type=int, default=3)
    bp.add_argument("--attn-length", type=int, default=12)
    bp.add_argument("--seed", type=int, default=0)
    bp.add_argument("-o", "--output", default="bench.csv")
    bp.set_defaults(fn=cmd_bench)

    ap = sub.add_parser("ablate", help="train and score the model variants")
    ap.add_argument("-c", "--config")
    ap.add_argument("-d", "--dataset", required=True)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--batch-size", dest="batch_size", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("-o", "--output")
    ap.set_defaults(fn=cmd_ablate)

    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if isinstance(e.code, str):
            print(e.code, file=sys.stderr)
            return 1
        return e.code or 0
    try:
        return args.fn(args)
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 2
    except CONTRACT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
