"""Command-line entry point: warmup-select, train, profile, sweep, report."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from pathlib import Path

from . import cost
from .blockmap import DivisibilityError
from .config import ConfigError, RunConfig, load_config
from .layers import LayerRole
from .optim import AdamHyper
from .selection import ATTN_QKV, EmptySelectionWarning, TruncatedWarmupError, run_warmup
from .serialize import (FormatError, append_metrics, read_checkpoint, read_metrics, read_selection,
                        write_checkpoint, write_selection)
from .sparse_linear import SparseLinearLayer, gather
from .stats import allocation_summary
from .tensor import ShapeError
from .training import EmptySelectionError, Trainer, evaluate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SHAPE = 3
EXIT_EMPTY_SELECTION = 4
EXIT_RESUME_MISMATCH = 5
EXIT_MISSING_INPUT = 6
EXIT_COUNTER_MISMATCH = 7

OUT_ROOT_ENV = "SMT_OUT_ROOT"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _out_dir(args, cfg: RunConfig | None) -> Path:
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    if getattr(args, "out", None):
        out = Path(args.out)
    elif cfg is not None and cfg.out_dir:
        out = Path(cfg.out_dir)
        if not out.is_absolute():
            out = root / out
    else:
        out = root / Path(args.config).stem
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _emit(obj, fmt: str) -> None:
    if fmt == "records":
        for line in obj if isinstance(obj, list) else [obj]:
            print(line if isinstance(line, str) else json.dumps(line, sort_keys=True))
    else:
        print(obj if isinstance(obj, str) else json.dumps(obj, indent=2, sort_keys=True))


def build_base(cfg: RunConfig):
    """Model at its fine-tuning starting point, pretrained if configured."""
    model = cfg.build_model()
    if cfg.pretrain.steps:
        trainer = Trainer(model, "full_ft", AdamHyper(lr=cfg.pretrain.lr))
        trainer.run(cfg.pretrain_data(), cfg.pretrain.steps)
        model.reset_counters()
    return model


def _lora_roles(cfg: RunConfig):
    return tuple(cfg.lora.roles) if cfg.lora.roles else tuple(r.value for r in ATTN_QKV)


def warmup_selection(cfg: RunConfig, model, budget: float | None = None):
    """Run the configured warm-up on ``model`` and return its selection (possibly empty)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptySelectionWarning)
        _, sel = run_warmup(model, cfg.train_data().batches(epochs=None), cfg.n_warmup,
                            cfg.allocation_policy(budget), cfg.block_side, cfg.score_mode, cfg.seed)
    return sel


def _check_selection(sel, model) -> None:
    for name in sel.selected_layers():
        if name not in model.linears:
            raise CliError(f"selection names unknown layer {name!r}", EXIT_SHAPE)
        grid = sel.grids.get(name)
        shape = model.linears[name].weight.shape
        if grid is not None and (grid.rows_d, grid.cols_k) != shape:
            raise CliError(f"selection grid {grid.rows_d}x{grid.cols_k} does not match layer {name!r} {shape}",
                           EXIT_SHAPE)


# -- commands -------------------------------------------------------------

def cmd_warmup_select(args) -> int:
    cfg = _load(args)
    if cfg.mode != "smt":
        raise CliError("warmup-select requires mode: smt", EXIT_CONFIG)
    out = _out_dir(args, cfg)
    model = build_base(cfg)
    sel = warmup_selection(cfg, model)
    total = model.num_params()
    if sel.is_empty:
        print("status: empty-selection (budget is smaller than one block); no selection written")
        return EXIT_EMPTY_SELECTION
    path = write_selection(out / "selection.json", sel)
    summary = allocation_summary(sel, total)
    if args.format == "records":
        _emit({"selection": str(path), **summary}, "records")
    else:
        print(f"selection written to {path}")
        print(f"selected parameters: {sel.param_count} of {total} ({100 * sel.param_count / total:.2f}%)")
        for role, share in summary["role_shares"].items():
            print(f"  {role:<8} {100 * share:6.2f}%")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    ckpt = None
    if args.resume:
        ckpt = read_checkpoint(args.resume)
        if ckpt["config_hash"] != cfg.hash():
            raise CliError("checkpoint was written by a different configuration", EXIT_RESUME_MISMATCH)

    model = build_base(cfg)
    data = cfg.train_data()
    total = cfg.total_steps(data)

    sel = None
    if cfg.mode == "smt":
        if ckpt is not None:
            sel = ckpt["selection"]
        elif args.selection:
            sel = read_selection(args.selection)
        elif cfg.inline_warmup:
            sel = warmup_selection(cfg, model)
            write_selection(out / "selection.json", sel)
        else:
            raise CliError("smt training needs --selection or inline_warmup: true", EXIT_CONFIG)
        if sel.is_empty:
            print("status: empty-selection; nothing to fine-tune")
            return EXIT_EMPTY_SELECTION
        _check_selection(sel, model)
    elif args.selection:
        print(f"warning: --selection is ignored in {cfg.mode} mode", file=sys.stderr)

    trainer = Trainer(model, cfg.mode, cfg.hyper(), selection=sel, rank=cfg.lora.rank,
                      lora_scale=cfg.lora.scale, lora_roles=_lora_roles(cfg), seed=cfg.seed)
    metrics_path = out / "metrics.jsonl"
    if ckpt is not None:
        model.load_state_dict(ckpt["weights"])
        if ckpt["optimizer"] is not None:
            trainer.load_optimizer_state(ckpt["optimizer"])
        trainer.step_count = ckpt["step"]
    else:
        metrics_path.write_text("")

    stop = total if args.stop_after is None else min(total, args.stop_after)
    log = trainer.run(data, stop, on_step=lambda rec: append_metrics(metrics_path, [rec]))

    packs = {name: gather(layer) for name, layer in model.linears.items() if isinstance(layer, SparseLinearLayer)}
    write_checkpoint(out / "checkpoint.json", config_hash=cfg.hash(), mode=cfg.mode, step=trainer.step_count,
                     weights=model.state_dict(), packs=packs, optimizer=trainer.optimizer_state(), selection=sel)
    held = evaluate(model, cfg.heldout_data())
    summary = {
        "mode": cfg.mode,
        "steps_done": trainer.step_count,
        "total_steps": total,
        "tokens_per_step": cfg.tokens_per_step(),
        "trainable_params": trainer.trainable_params,
        "final_train_loss": log.records[-1].loss if log.records else None,
        "heldout": held,
        "config_hash": cfg.hash(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _emit(summary, args.format)
    return EXIT_OK


def reference_arithmetic() -> dict:
    """Golden arithmetic: speedups, adapter overhead, 7B breakdown and a 0.5% preset."""
    llama = cost.llama_arch()
    ft = cost.ft_budget(llama)
    arch, sel = cost.stripe_example()
    stripe = cost.smt_budget(arch, sel, 16).ratios(cost.ft_budget(arch))
    return {
        "speedup": {
            "smt_vs_ft": cost.format_speedup(cost.speedup(243.84, 16.68)),
            "lora_vs_ft": cost.format_speedup(cost.speedup(243.84, 17.82)),
            "dora_vs_ft": cost.format_speedup(cost.speedup(243.84, 18.04)),
        },
        "lora_overhead_25GB_1pct_MB": cost.lora_overhead(25 * cost.GB, 0.01) / cost.MB,
        "llama7b_full_ft_GB": {
            "params": llama.total_params,
            "param_bytes": ft.param_bytes / cost.GB,
            "grads_and_adam_states": (ft.grad_bytes + ft.optimizer_bytes) / cost.GB,
        },
        "rho_0.005_ratios_pct": {
            "bwd_dw_flops": round(100 * stripe["bwd_dw_flops"], 6),
            "activation_bytes": round(100 * stripe["activation_bytes"], 6),
            "optimizer_bytes": round(100 * stripe["optimizer_bytes"], 6),
            "update_flops": round(100 * stripe["update_flops"], 6),
        },
    }


def measured_vs_analytic(report: cost.CostReport, mode: str, record: dict) -> dict:
    row = report.rows[mode]
    pairs = {
        "dw_flops": (record["dw_flops"], row.bwd_dw_flops),
        "cache_bytes": (record["cache_bytes"], row.activation_bytes),
        "opt_bytes": (record["opt_bytes"], row.optimizer_bytes),
        "trainable_params": (record["trainable_params"], row.trainable_params),
    }
    return {k: {"measured": m, "analytic": a, "diff": m - a} for k, (m, a) in pairs.items()}


def cmd_profile(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    model = cfg.build_model()
    arch = cost.arch_from_model(model, cfg.tokens_per_step(), dtype_bytes=8)
    report = cost.CostReport()
    report.add(cost.ft_budget(arch))
    report.add(cost.lora_budget(arch, cfg.lora.rank, _lora_roles(cfg)))

    sel_path = Path(args.selection) if args.selection else out / "selection.json"
    if args.selection and not sel_path.exists():
        raise CliError(f"selection file {sel_path} not found", EXIT_MISSING_INPUT)
    if sel_path.exists():
        sel = read_selection(sel_path)
        report.add(cost.smt_budget(arch, sel.blocks, cfg.block_side))
    elif (out / "checkpoint.json").exists():
        sel = read_checkpoint(out / "checkpoint.json")["selection"]
        if sel is not None:
            report.add(cost.smt_budget(arch, sel.blocks, cfg.block_side))

    (out / "cost_report.jsonl").write_text("\n".join(report.to_records()) + "\n")
    (out / "cost_table.txt").write_text(report.to_table() + "\n")
    ref = reference_arithmetic()
    (out / "reference.json").write_text(json.dumps(ref, indent=1, sort_keys=True) + "\n")

    code = EXIT_OK
    metrics_path = Path(args.metrics) if args.metrics else out / "metrics.jsonl"
    diff = None
    if args.metrics and not metrics_path.exists():
        raise CliError(f"metrics stream {metrics_path} not found", EXIT_MISSING_INPUT)
    if metrics_path.exists() and metrics_path.stat().st_size:
        records = read_metrics(metrics_path)
        summary_path = out / "summary.json"
        mode = json.loads(summary_path.read_text())["mode"] if summary_path.exists() else cfg.mode
        if mode in report.rows:
            diff = measured_vs_analytic(report, mode, records[-1])
            (out / "measured_vs_analytic.json").write_text(json.dumps(diff, indent=1, sort_keys=True) + "\n")
            if any(v["diff"] for v in diff.values()):
                code = EXIT_COUNTER_MISMATCH

    if args.format == "records":
        _emit(report.to_records() + [json.dumps({"reference": ref, "measured_vs_analytic": diff}, sort_keys=True)],
              "records")
    else:
        print(report.to_table())
        print()
        r = ref["rho_0.005_ratios_pct"]
        print(f"rho=0.005 preset: bwd_dw {r['bwd_dw_flops']:.1f}%  activation {r['activation_bytes']:.1f}%  "
              f"optimizer {r['optimizer_bytes']:.1f}%  update {r['update_flops']:.1f}%")
        print(f"LoRA adapter overhead at 25 GB / 1%: {ref['lora_overhead_25GB_1pct_MB']:.0f} MB")
        s = ref["speedup"]
        print(f"speedup vs full FT: SMT {s['smt_vs_ft']}, LoRA {s['lora_vs_ft']} (raw ratio, not rounded down), "
              f"DoRA {s['dora_vs_ft']}")
        b = ref["llama7b_full_ft_GB"]
        print(f"7B full FT: params {b['param_bytes']:.1f} GB, grads + Adam states {b['grads_and_adam_states']:.1f} GB")
        if diff is not None:
            print("measured vs analytic:")
            for k, v in diff.items():
                print(f"  {k:<17} measured {v['measured']:>12}  analytic {v['analytic']:>12}  diff {v['diff']}")
    return code


def lora_rank_for(fraction: float, model, roles) -> int:
    roles = {LayerRole(r) for r in roles}
    per_rank = sum(sum(layer.weight.shape) for layer in model.linears.values() if layer.role in roles)
    return int(fraction * model.num_params() // per_rank)


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    base = build_base(cfg)
    state = base.state_dict()
    data = cfg.train_data()
    held = cfg.heldout_data()
    total = cfg.total_steps(data)
    rows = []
    for fraction in cfg.sweep.fractions:
        for mode in cfg.sweep.modes:
            row = {"fraction": fraction, "method": mode, "status": "ok", "error": ""}
            model = cfg.build_model()
            model.load_state_dict(state)
            try:
                sel, rank = None, cfg.lora.rank
                if mode == "smt":
                    sel = warmup_selection(cfg, model, fraction)
                    if sel.is_empty:
                        raise EmptySelectionError("budget is smaller than one block")
                elif mode == "lora":
                    rank = lora_rank_for(fraction, model, _lora_roles(cfg))
                    if rank < 1:
                        raise ValueError("budget is smaller than a rank-1 adapter")
                trainer = Trainer(model, mode, cfg.hyper(), selection=sel, rank=rank, lora_scale=cfg.lora.scale,
                                  lora_roles=_lora_roles(cfg), seed=cfg.seed)
                log = trainer.run(data, total)
                ev = evaluate(model, held)
                row.update(trainable_params=trainer.trainable_params,
                           trainable_pct=100 * trainer.trainable_params / model.num_params(),
                           final_train_loss=log.final_loss, heldout_loss=ev["loss"],
                           heldout_accuracy=ev.get("accuracy", ""))
            except (EmptySelectionError, ValueError, ShapeError, DivisibilityError) as exc:
                row.update(status="error", error=str(exc))
            rows.append(row)

    fields = ["fraction", "method", "status", "trainable_params", "trainable_pct", "final_train_loss",
              "heldout_loss", "heldout_accuracy", "error"]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, restval="")
        w.writeheader()
        w.writerows(rows)
    with open(out / "series.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "method", "metric", "value"])
        for row in rows:
            if row["status"] != "ok":
                continue
            for metric in ("final_train_loss", "heldout_loss", "heldout_accuracy"):
                if row.get(metric, "") != "":
                    w.writerow([row["fraction"], row["method"], metric, row[metric]])
    if args.format == "records":
        _emit([json.dumps(r, sort_keys=True) for r in rows], "records")
    else:
        print(f"{'fraction':>9} {'method':>8} {'status':>7} {'train':>8} {'heldout':>8}")
        for r in rows:
            tl = f"{r['final_train_loss']:.4f}" if r["status"] == "ok" else "-"
            hl = f"{r['heldout_loss']:.4f}" if r["status"] == "ok" else "-"
            print(f"{r['fraction']:>9.4f} {r['method']:>8} {r['status']:>7} {tl:>8} {hl:>8}")
        print(f"wrote {out / 'sweep.csv'} and {out / 'series.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load(args) if args.config else None
    out = _out_dir(args, cfg) if (args.out or cfg) else None
    if out is None:
        raise CliError("report needs --out or --config", EXIT_MISSING_INPUT)
    report = {"run_dir": str(out)}
    found = False
    if (out / "selection.json").exists():
        sel = read_selection(out / "selection.json")
        report["allocation"] = allocation_summary(sel)
        found = True
    if (out / "metrics.jsonl").exists() and (out / "metrics.jsonl").stat().st_size:
        recs = read_metrics(out / "metrics.jsonl")
        report["metrics"] = {"steps": len(recs), "first_loss": recs[0]["loss"], "last_loss": recs[-1]["loss"],
                             "trainable_params": recs[-1]["trainable_params"]}
        found = True
    if (out / "summary.json").exists():
        report["summary"] = json.loads((out / "summary.json").read_text())
        found = True
    if not found:
        raise CliError(f"no run artifacts in {out}", EXIT_MISSING_INPUT)
    if "allocation" in report:
        (out / "allocation.json").write_text(json.dumps(report["allocation"], indent=1, sort_keys=True) + "\n")
    if args.format == "records":
        _emit(report, "records")
    else:
        print(f"run directory: {out}")
        alloc = report.get("allocation")
        if alloc:
            print(f"selected parameters: {alloc['selected_params']}")
            for role, share in alloc["role_shares"].items():
                print(f"  {role:<8} {100 * share:6.2f}%")
            for idx, roles in alloc["per_block_index"].items():
                cells = "  ".join(f"{r}={n}" for r, n in sorted(roles.items()))
                print(f"  block {idx}: {cells}")
        if "metrics" in report:
            m = report["metrics"]
            print(f"steps {m['steps']}: loss {m['first_loss']:.4f} -> {m['last_loss']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smt", description="Sparse matrix tuning on toy models")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML run configuration")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ROOT_ENV}/<config name>)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--format", choices=("table", "records"), default="table")

    p = sub.add_parser("warmup-select", help="run warm-up and write the block selection")
    common(p)
    p.set_defaults(func=cmd_warmup_select)

    p = sub.add_parser("train", help="fine-tune and write metrics and a checkpoint")
    common(p)
    p.add_argument("--selection", help="selection file from warmup-select")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-after", type=int, help="stop once this many total steps have run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("profile", help="analytic cost report and measured-counter check")
    common(p)
    p.add_argument("--selection", help="selection file for the SMT row")
    p.add_argument("--metrics", help="metrics stream to compare against")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("sweep", help="train every mode at every budget fraction")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarise the artifacts of a run directory")
    common(p, config_required=False)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ShapeError, DivisibilityError) as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except EmptySelectionError as exc:
        print(f"status: empty-selection ({exc})", file=sys.stderr)
        return EXIT_EMPTY_SELECTION
    except TruncatedWarmupError as exc:
        print(f"warm-up error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
