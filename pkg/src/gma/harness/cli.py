"""Command line entry point: ``gma <command> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure
(training diverged), 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from gma.errors import ConfigError, ContractError, FormatError, GMAError, NumericError, ShapeError
from gma.gmat import tensor_to_bytes
from gma.harness.config import RunConfig
from gma.harness.data import generate_dataset, load_splits, save_splits
from gma.harness.models import Model, Probe, make_batch, needs_saliency, needs_word_mask
from gma.harness.plots import emit_plot_data, heatmap_csv
from gma.harness.train import Experiment, checkpoint_bytes, compute_aux, evaluate, load_model, sweep
from gma.metrics import compare_maps, nemenyi_cd, rank_models
from gma.saliency import rise_combine, sample_masks

log = logging.getLogger("gma")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
UNHASHED = {"manifest.json", "timings.json"}


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(getattr(args, "out", None) or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(out: Path, rel: str, data: str | bytes) -> Path:
    path = out / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data)
    return path


def write_manifest(out: Path, command: str) -> Path:
    """Hash every artifact under ``out`` except the manifest and wall-clock timings."""
    entries = []
    for path in sorted(p for p in out.rglob("*") if p.is_file()):
        rel = path.relative_to(out).as_posix()
        if rel in UNHASHED:
            continue
        data = path.read_bytes()
        entries.append({"path": rel, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
    return _write(out, "manifest.json", json.dumps({"command": command, "artifacts": entries}, indent=2) + "\n")


def _splits(args, cfg):
    return load_splits(args.data) if getattr(args, "data", None) else generate_dataset(cfg)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_generate(args) -> None:
    cfg, out = _config(args), _out(args)
    save_splits(generate_dataset(cfg), out / "data")
    _write(out, "config.json", cfg.to_json() + "\n")


def cmd_train(args) -> None:
    cfg, out = _config(args), _out(args)
    if args.variant:
        cfg = cfg.replace(variant=args.variant)
    start = time.perf_counter()
    exp = Experiment(cfg, _splits(args, cfg))
    report, model = exp.run(eval_split=args.split)
    probe = exp.probe().model if exp.uses_probe(cfg.variant, cfg) else None
    _write(out, "config.json", cfg.to_json() + "\n")
    _write(out, "checkpoint.gmck", checkpoint_bytes(model, probe))
    _write(out, "report.json", report.to_json())
    _write(out, "timings.json", json.dumps({"seconds": time.perf_counter() - start}) + "\n")
    row = report.metrics[cfg.variant].to_table_row()
    print(f"{cfg.variant}: final loss {report.losses[-1] if report.losses else float('nan'):.4f}  "
          + "  ".join(f"{k} {v:.4f}" for k, v in row.items()))


def cmd_evaluate(args) -> None:
    cfg, out = _config(args), _out(args)
    model, probe = load_model(args.checkpoint, cfg)
    dialogs = _splits(args, cfg).get(args.split)
    aux = None
    if needs_word_mask(cfg.variant) or (needs_saliency(cfg.variant) and cfg.saliency == "rise"):
        if probe is None:
            raise FormatError("checkpoint has no bundled probe, which this variant needs")
        aux = compute_aux(Probe(probe), dialogs, cfg)
        if cfg.saliency == "uniform":
            aux.saliency[...] = 0.0
    ev = evaluate(model, dialogs, aux)
    result = {"variant": cfg.variant, "split": args.split, **ev.metrics.to_table_row(), "count": ev.metrics.count}
    _write(out, "metrics.json", json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(json.dumps(result, sort_keys=True))


def cmd_sweep(args) -> None:
    cfg, out = _config(args), _out(args)
    values = args.values
    if values is not None and args.axis == "K":
        try:
            values = [int(v) for v in values]
        except ValueError as exc:
            raise ConfigError(f"K values must be integers: {values}") from exc
    start = time.perf_counter()
    rep = sweep(cfg, args.axis, values, seeds=args.seeds, eval_split=args.split)
    _write(out, "sweep.csv", rep.to_csv())
    _write(out, "sweep.json", rep.to_json())
    _write(out, "timings.json", json.dumps({"seconds": time.perf_counter() - start}) + "\n")
    for row in rep.summary():
        print(f"{row['value']}: R@1 {row['R@1']:.4f}  R@10 {row['R@10']:.4f}  MRR {row['MRR']:.4f}")


def cmd_saliency(args) -> None:
    cfg, out = _config(args), _out(args)
    model, probe = load_model(args.checkpoint, cfg)
    probe_model = model if cfg.variant == "san" else probe
    if probe_model is None:
        raise FormatError("checkpoint holds neither a stacked-attention model nor a bundled probe")
    dialogs = _splits(args, cfg).get(args.split)
    if not 0 <= args.dialog < len(dialogs):
        raise ContractError(f"dialog index {args.dialog} outside [0, {len(dialogs)})")
    batch = make_batch([dialogs[args.dialog]])
    p = Probe(probe_model)
    targets = p.predictions(batch)[0]
    masks = sample_masks(cfg.grid, cfg.mask_p, cfg.effective_mask_side, cfg.mask_count, seed=cfg.seed)
    sal = rise_combine(p.rise_scores(batch.images[0], batch.questions[0], batch.options[0], targets, masks), masks)
    _write(out, "saliency/saliency.gmat", tensor_to_bytes(sal))
    for r, grid in enumerate(sal):
        _write(out, f"saliency/round_{r:02d}.csv", heatmap_csv(grid))


def _read_grid(path: str) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    except ValueError as exc:
        raise ContractError(f"{path}: non-numeric cell: {exc}") from exc
    return np.array(rows, dtype=np.float64)


def cmd_compare_maps(args) -> None:
    out = _out(args)
    result = compare_maps(_read_grid(args.a), _read_grid(args.b)).to_dict()
    _write(out, "comparison.json", json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(json.dumps(result, sort_keys=True))


def cmd_stats_cd(args) -> None:
    out = _out(args)
    with open(args.scores, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if len(rows) < 2:
        raise ContractError("scores CSV needs a header of model names and at least one dataset row")
    names, body = rows[0], rows[1:]
    try:
        scores = np.array([[float(x) for x in row] for row in body])
    except ValueError as exc:
        raise ContractError(f"non-numeric score: {exc}") from exc
    ranks = rank_models(scores.T, higher_is_better=not args.lower_is_better)
    res = nemenyi_cd(ranks, alpha=args.alpha, names=names)
    result = res.to_dict()
    _write(out, "critical_difference.json", json.dumps(result, indent=2, sort_keys=True) + "\n")
    _write(out, "critical_difference.csv", cd_diagram_csv(res, names))
    print(json.dumps(result, sort_keys=True))


def cd_diagram_csv(res, names: list[str]) -> str:
    # one row per model, best first; "tied_with" lists models inside the CD bar
    rows = ["model,avg_rank,cd,tied_with"]
    for i in np.argsort(res.avg_ranks, kind="stable"):
        tied = [names[j] for j in range(len(names)) if j != i and not res.significant[i, j]]
        rows.append(f"{names[i]},{res.avg_ranks[i]:.6f},{res.cd:.6f},{' '.join(tied)}")
    return "\n".join(rows) + "\n"


def cmd_report(args) -> None:
    out = _out(args)
    report = json.loads(Path(args.run, "report.json").read_text())
    for path in emit_plot_data(report, out / "plots"):
        log.info("wrote %s", path)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a subcommand's missing flag from overwriting one given before it
    common.add_argument("--config", default=argparse.SUPPRESS, help="run configuration JSON")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="gma", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(fn=fn)
        return p

    add("generate", cmd_generate, "write the synthetic dialog dataset")

    p = add("train", cmd_train, "train one variant and evaluate it")
    p.add_argument("--variant", help="override the config variant")
    p.add_argument("--data", help="dataset directory from `generate` (default: regenerate)")
    p.add_argument("--split", default="test", choices=("val", "test"))

    p = add("evaluate", cmd_evaluate, "score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = add("sweep", cmd_sweep, "ablation over fusion variants or granule counts")
    p.add_argument("--axis", required=True, choices=("fusion", "K"))
    p.add_argument("--values", nargs="+", help="axis values (default: all variants, or K in 8 32 64 128 capped)")
    p.add_argument("--seeds", type=int, default=1, help="number of derived seeds (seed xor i)")
    p.add_argument("--split", default="test", choices=("val", "test"))

    p = add("saliency", cmd_saliency, "RISE saliency of one dialog under a trained probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--dialog", type=int, default=0)

    p = add("compare-maps", cmd_compare_maps, "rank correlation and EMD of two grid CSVs")
    p.add_argument("a")
    p.add_argument("b")

    p = add("stats-cd", cmd_stats_cd, "Nemenyi critical difference from a model-score CSV")
    p.add_argument("scores", help="CSV: header of model names, one row of scores per dataset")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--lower-is-better", action="store_true")

    p = add("report", cmd_report, "emit plot data from a run directory")
    p.add_argument("--run", required=True, help="directory holding report.json")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
        write_manifest(_out(args), args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, ShapeError, GMAError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
