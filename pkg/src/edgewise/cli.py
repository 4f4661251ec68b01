"""Command-line entry points.

Every subcommand takes ``--config FILE`` (key=value lines) plus one flag per
setting; flags win over the file. Exit codes: 0 success, 2 configuration
error, 3 input/output or format error, 4 selftest failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from edgewise import config as cfgmod
from edgewise.config import ConfigError

log = logging.getLogger("edgewise")

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_SELFTEST = 4

DPU_COLUMNS = ["round", "arm", "seed", "val_acc", "test_acc", "deployed", "payload_bits",
               "cumulative_bits", "acc_diff_vs_full", "encoded_bits", "fell_back", "reinit"]
ALQ_COLUMNS = ["round", "stage", "total_alphas", "model_bitwidth", "avg_bitwidth", "loss", "val_acc", "test_acc"]
DRESS_COLUMNS = ["seed", "level", "sparsity", "test_acc", "val_acc"]


class SchemaError(ValueError):
    pass


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(cfg):
    from edgewise.model import load_mnist, split_validation

    train, test = load_mnist(cfg["data_dir"])
    train, val = split_validation(train, cfg["val_fraction"], cfg["seed"])
    return train, val, test


def _require_model(cfg):
    from edgewise.model import MlpModel

    if not cfg["model"]:
        raise ConfigError("model path is required")
    return MlpModel.load(cfg["model"])


def _structures(cfg, n_layers):
    from edgewise.mbq import GroupingStructure

    names = cfg["structures"]
    if len(names) != n_layers:
        raise ConfigError(f"{len(names)} structures for {n_layers} layers")
    try:
        return [GroupingStructure.parse(s) for s in names]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg) -> int:
    from edgewise.model import MlpModel, OptimConfig, accuracy, steps_per_epoch, train

    tr, val, test = _load_data(cfg)
    model = MlpModel.init(list(cfg["sizes"]), cfg["seed"])
    opt = OptimConfig(cfg["lr"], cfg["batch_size"], cfg["milestones"])
    steps = cfg["epochs"] * steps_per_epoch(len(tr), cfg["batch_size"])
    model, _ = train(model, tr, opt, steps, cfg["seed"])
    out = _out_dir(cfg)
    model.save(out / "model.npz")
    row = {"epochs": cfg["epochs"], "val_acc": accuracy(model, val), "test_acc": accuracy(model, test)}
    cfgmod.write_csv(out / "pretrain.csv", [row], ["epochs", "val_acc", "test_acc"])
    print(f"test accuracy {row['test_acc']:.4f}")
    return 0


def sketch_report(model, qm) -> list:
    from edgewise.mbq import avg_bitwidth, error_bound, partition, storage_ratio

    rows = []
    for l, (w, layer) in enumerate(zip(model.weights, qm.layers)):
        groups = partition(w, layer.structure)
        residuals = [float(np.sum((g - v) ** 2)) for g, v in zip(groups, layer.group_values())]
        bounds = [error_bound(g, int(b)) for g, b in zip(groups, layer.bits())]
        bits = avg_bitwidth(layer)
        rows.append({
            "layer": l, "groups": layer.num_groups, "n": layer.group_size, "avg_bitwidth": bits,
            "storage_ratio": storage_ratio(w.size, layer.group_size, bits),
            "max_residual": max(residuals),
            "bound_violations": sum(r > b * (1 + 1e-12) + 1e-300 for r, b in zip(residuals, bounds)),
        })
    return rows


def cmd_sketch(cfg) -> int:
    from edgewise.alq import sketch_model
    from edgewise.formats import save_mbn

    model = _require_model(cfg)
    qm = sketch_model(model, _structures(cfg, len(model.weights)), cfg["i_max"], cfg["sigma"])
    out = _out_dir(cfg)
    save_mbn(out / "model.mbn", qm)
    rows = sketch_report(model, qm)
    cfgmod.write_csv(out / "sketch_report.csv", rows, list(rows[0]))
    for r in rows:
        print(f"layer {r['layer']}: bits {r['avg_bitwidth']:.3f} ratio {r['storage_ratio']:.2f} "
              f"max residual {r['max_residual']:.3g}")
    return 0


def cmd_alq(cfg) -> int:
    from edgewise.alq import AlqConfig, alq_pipeline, layer_storage_ratios
    from edgewise.formats import save_mbn

    model = _require_model(cfg)
    structures = _structures(cfg, len(model.weights))
    tr, val, test = _load_data(cfg)
    keys = ["i_max", "sigma", "rounds", "prune_ratio", "prune_iters", "k_percent", "bases_iters", "coords_iters",
            "init_iters", "final_iters", "lr", "final_lr", "l2", "batch_size", "act_bits", "reset_moments", "seed"]
    qm, trace = alq_pipeline(model, tr, AlqConfig(structures, **{k: cfg[k] for k in keys}), val, test)
    out = _out_dir(cfg)
    save_mbn(out / "alq.mbn", qm)
    cfgmod.write_csv(out / "alq_trace.csv", trace, ALQ_COLUMNS)
    layers = [{"layer": l, "avg_bitwidth": b, "storage_ratio": r}
              for l, (b, r) in enumerate(zip(qm.avg_bitwidths(), layer_storage_ratios(qm)))]
    cfgmod.write_csv(out / "alq_layers.csv", layers, ["layer", "avg_bitwidth", "storage_ratio"])
    print(f"bits/weight {qm.model_bitwidth():.3f} test accuracy {trace[-1]['test_acc']:.4f}")
    return 0


def cmd_dress(cfg) -> int:
    from edgewise.dress import DressConfig, SparsityLadder, csr_cost, dress_train, model_csrs, subnet_accuracies
    from edgewise.formats import save_dcsr

    try:
        SparsityLadder(list(cfg["levels"]), cfg["gamma"]).pi
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model = _require_model(cfg)
    tr, val, test = _load_data(cfg)
    dcfg = DressConfig(levels=cfg["levels"], gamma=cfg["gamma"], epochs=cfg["epochs"], lr=cfg["lr"],
                       batch_size=cfg["batch_size"], layerwise=cfg["layerwise"], seed=cfg["seed"])
    model, masks, ladder, trace = dress_train(model, tr, dcfg, val)
    out = _out_dir(cfg)
    model.save(out / "dress_backbone.npz")
    test_acc = subnet_accuracies(model, masks, test)
    val_acc = subnet_accuracies(model, masks, val)
    rows = [{"seed": cfg["seed"], "level": k, "sparsity": s, "test_acc": t, "val_acc": v}
            for k, (s, t, v) in enumerate(zip(ladder.levels, test_acc, val_acc))]
    cfgmod.write_csv(out / "dress_results.csv", rows, DRESS_COLUMNS)
    epochs = [r for r in trace if "val_acc" in r]
    cfgmod.write_csv(out / "dress_trace.csv", epochs, ["iteration", "epoch", "val_acc", "nested"])
    costs = []
    for l, csr in enumerate(model_csrs(model, masks, ladder.levels)):
        save_dcsr(out / f"layer{l}.dcsr", csr)
        c = csr_cost(csr)
        costs.append({"layer": l, "row_size": csr.row_size, "rows": csr.rows, "nz": list(csr.nz),
                      "total_bytes": c["total"], "independent_bytes": c["independent"],
                      "index_entries": c["index_entries"],
                      "independent_index_entries": c["independent_index_entries"]})
    cfgmod.write_csv(out / "dress_cost.csv", costs, list(costs[0]))
    for r in rows:
        print(f"level {r['level']} (s={r['sparsity']}): test accuracy {r['test_acc']:.4f}")
    return 0


def cmd_dpu(cfg) -> int:
    from edgewise.dpu import RoundConfig, StageConfig, multi_round_sim, summarize

    try:
        rc = RoundConfig(arms=cfg["arms"], rounds=cfg["rounds"], d1=cfg["d1"], dd=cfg["dd"], k=cfg["k"],
                         s_w=cfg["s_w"], sizes=cfg["sizes"], reinit=cfg["reinit"],
                         stage=StageConfig(cfg["epochs"], cfg["lr"], cfg["batch_size"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    tr, val, test = _load_data(cfg)
    rows = multi_round_sim(tr, val, test, rc, cfg["seeds"])
    out = _out_dir(cfg)
    cfgmod.write_csv(out / "dpu_trace.csv", rows, DPU_COLUMNS)
    for arm, s in summarize(rows, rc.s_w).items():
        print(f"{arm}: mean acc {s['mean_test_acc']:.4f} diff {s['mean_acc_diff']:+.4f} cost ratio {s['cost_ratio']:.4f}")
    return 0


def _typed_dpu_rows(rows):
    out = []
    for r in rows:
        out.append({"round": int(r["round"]), "arm": r["arm"], "seed": int(r["seed"]),
                    "test_acc": float(r["test_acc"]), "payload_bits": float(r["payload_bits"]),
                    "acc_diff_vs_full": float(r["acc_diff_vs_full"])})
    return out


def report_rows(traces) -> tuple:
    """Aggregate trace files into ``(columns, rows)`` of mean/std summaries."""
    from edgewise.dpu import summarize

    tables = [cfgmod.read_csv(p) for p in traces]
    if not tables or not tables[0]:
        raise SchemaError("no trace rows")
    header = set(tables[0][0])
    for t in tables:
        if not t or set(t[0]) != header:
            raise SchemaError("trace files have different columns")
    rows = [r for t in tables for r in t]
    if set(DPU_COLUMNS[:9]) <= header:
        typed = _typed_dpu_rows(rows)
        out = []
        for arm in sorted({r["arm"] for r in typed}):
            per_seed = []
            for seed in sorted({r["seed"] for r in typed}):
                sel = [r for r in typed if r["seed"] == seed and (r["arm"] in (arm, "FULL"))]
                if any(r["arm"] == arm for r in sel):
                    per_seed.append(summarize(sel)[arm])
            diffs = [s["mean_acc_diff"] for s in per_seed]
            ratios = [s["cost_ratio"] for s in per_seed]
            out.append({"arm": arm, "seeds": len(per_seed),
                        "acc_diff_mean": float(np.mean(diffs)), "acc_diff_std": float(np.std(diffs)),
                        "cost_ratio_mean": float(np.mean(ratios)), "cost_ratio_std": float(np.std(ratios))})
        return ["arm", "seeds", "acc_diff_mean", "acc_diff_std", "cost_ratio_mean", "cost_ratio_std"], out
    if set(DRESS_COLUMNS[:4]) <= header:
        out = []
        for level in sorted({int(r["level"]) for r in rows}):
            accs = [float(r["test_acc"]) for r in rows if int(r["level"]) == level]
            s = next(float(r["sparsity"]) for r in rows if int(r["level"]) == level)
            out.append({"level": level, "sparsity": s, "runs": len(accs),
                        "test_acc_mean": float(np.mean(accs)), "test_acc_std": float(np.std(accs))})
        return ["level", "sparsity", "runs", "test_acc_mean", "test_acc_std"], out
    raise SchemaError(f"unrecognized trace columns {sorted(header)}")


def cmd_report(cfg) -> int:
    if not cfg["traces"]:
        raise ConfigError("traces is required")
    columns, rows = report_rows(cfg["traces"])
    text = cfgmod.rows_to_csv(rows, columns)
    out = _out_dir(cfg)
    (out / "report.csv").write_text(text)
    print(text, end="")
    return 0


def selftest_checks() -> list:
    """Quick closed-form checks as ``(name, passed)`` pairs."""
    from edgewise.alq import alpha_cost, row_project
    from edgewise.bitwise import PackedVector, pm1_dot
    from edgewise.dpu import PayloadHeader, comm_cost, decode_payload, encode_payload, shannon_bits, should_reinit
    from edgewise.dress import build_dress_csr, csr_cost, loss_weights, row_sample_masks
    from edgewise.mbq import error_bound, sketch_group, storage_ratio
    from edgewise.numerics import least_squares, make_rng

    checks = []
    a = least_squares(np.array([[1.0, 1.0], [1.0, -1.0]]), np.array([0.9, 0.1]))
    checks.append(("least squares 2x2", np.allclose(a, [0.5, 0.4], atol=1e-12)))
    g = sketch_group([0.9, 0.1], 2, 0.0)
    checks.append(("sketch example", np.array_equal(g.basis, [[1, 1], [1, -1]]) and np.allclose(g.alpha, [0.5, 0.4])))
    pa, pb = PackedVector.pack([1, -1, 1, -1]), PackedVector.pack([1, 1, -1, -1])
    checks.append(("pm1 dot", pm1_dot(pa, pb) == 0))
    checks.append(("storage ratio", math.isclose(storage_ratio(32, 32, 1), 16.0)))
    checks.append(("error bound", math.isclose(error_bound([1.0, 1.0, 1.0, 1.0], 2), 4 * 9 / 16)))
    checks.append(("row projection", row_project([0.5, 0.4], [-0.2]).tolist() == [[-1, 1]]))
    checks.append(("alpha cost", math.isclose(alpha_cost(0.5, 1.0, 2.0), 1.0)))
    pi = loss_weights(0.5, [0.8, 0.9, 0.95, 0.98, 0.99])
    checks.append(("loss weights", np.all(np.abs(pi - [0.36, 0.26, 0.18, 0.12, 0.08]) <= 0.005)))
    w = make_rng(0).standard_normal((4, 8))
    masks = row_sample_masks(w, [0.5, 0.75, 0.875])
    c = csr_cost(build_dress_csr(w, masks, [0.5, 0.75, 0.875]))
    checks.append(("csr index sharing", c["index_entries"] == 16 and c["independent_index_entries"] == 28))
    checks.append(("entropy", shannon_bits(0.5) == 1.0 and abs(shannon_bits(0.01) - 0.0808) <= 5e-4))
    checks.append(("comm cost", math.isclose(comm_cost(0.01, 10**6, 32), 320000 + shannon_bits(0.01) * 1e6)))
    checks.append(("reinit", should_reinit(2001, 1000) and not should_reinit(2000, 1000)
                   and not should_reinit(999, 1000)))
    mask = make_rng(1).random(1000) < 0.05
    vals = make_rng(2).standard_normal(int(mask.sum())).astype(np.float32)
    p = decode_payload(encode_payload(mask, vals, PayloadHeader(3, 0.25, 32, 7)))
    checks.append(("payload round trip", np.array_equal(p.mask, mask) and p.values.tobytes() == vals.tobytes()))
    return checks


def cmd_selftest(cfg) -> int:
    failed = 0
    for name, ok in selftest_checks():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        failed += not ok
    return EXIT_SELFTEST if failed else 0


COMMANDS = {
    "pretrain": cmd_pretrain, "sketch": cmd_sketch, "alq": cmd_alq, "dress": cmd_dress,
    "dpu": cmd_dpu, "report": cmd_report, "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgewise", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", "") + " command")
        p.add_argument("--config", help="key=value settings file")
        for key, (kind, default) in cfgmod.schema(name).items():
            shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           help=f"{kind} (default {shown})")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config", "verbose") and v is not None}
    try:
        cfg = cfgmod.load(args.command, args.config, overrides)
        log.info("resolved config for %s:\n%s", args.command, cfgmod.format_config(cfg))
        if args.command not in ("selftest", "report"):
            out = _out_dir(cfg)
            (out / f"{args.command}_config.txt").write_text(cfgmod.format_config(cfg))
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, SchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
