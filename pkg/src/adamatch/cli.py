"""Command-line entry point: ``adamatch {train,matrix,ablate,selftest,oracle-check,prepare-data}``."""

from __future__ import annotations

import argparse
import functools
import hashlib
import json
import logging
import statistics
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .data import DataError, prepare_bundled, resolve_data_dir
from .nn.tensor import NumericalError
from .train import ResultRow, ResultsTable, TrainingAborted, run_matrix, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_CHECKS = 0, 1, 2, 3, 4
VARIANTS = ("Full", "NoLogitInterp", "NoDistAlign", "NoRelThreshold")

log = logging.getLogger("adamatch")


def _load(args, extra=()):
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"train.seed={args.seed}", f"task.seed={args.seed}"]
    overrides += list(extra)
    return C.parse_config(args.config, overrides)


def _run_dir(args, command, values) -> Path:
    digest = hashlib.sha256(C.dump(values).encode()).hexdigest()[:10]
    run_id = args.run_id or f"{command}-{digest}"
    out = Path(args.out_dir) / run_id
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(C.dump(values), encoding="utf-8")
    return out


def _write_results(out: Path, table: ResultsTable, extra=None):
    (out / "results.csv").write_text(table.to_csv(), encoding="utf-8")
    payload = json.loads(table.to_json())
    if extra:
        payload.update(extra)
    (out / "results.json").write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def _progress(t, total, images, tgt, src, report):
    log.info("step %d/%d images=%d target=%.4f source=%.4f mask=%.2f", t, total, images, tgt, src,
             report.mask_rate)


def cmd_train(args) -> int:
    builder, cfg, values = _load(args)
    task = builder(args.data_dir)
    out = _run_dir(args, "train", values)
    rec = train(task, cfg, out / "checkpoints", resume=args.resume, progress=_progress)
    table = ResultsTable([ResultRow(values["task.source"], values["task.target"], task.kind,
                                    cfg.algo, cfg.seed, rec.final_accuracy)])
    _write_results(out, table, {"run": rec.to_dict()})
    print(f"{cfg.algo} {values['task.source']}->{values['task.target']} seed={cfg.seed} "
          f"final_accuracy={rec.final_accuracy:.4f}  ({out})")
    return EXIT_OK


def _pairs(values) -> list:
    text = values["task.pairs"].strip()
    if not text:
        return [(values["task.source"], values["task.target"])]
    pairs = []
    for item in text.split(","):
        src, sep, tgt = item.strip().partition("->")
        if not sep:
            raise C.ConfigError(f"task.pairs entry {item!r} is not SOURCE->TARGET")
        pairs.append((src.strip(), tgt.strip()))
    return pairs


def _matrix_task(values, data_dir, source, target, kind, seed):
    v = C.with_overrides(values, task__kind=kind, task__seed=seed)
    return C.make_task(v, data_dir, source, target)


def cmd_matrix(args) -> int:
    _, cfg, values = _load(args)
    out = _run_dir(args, "matrix", values)
    make = functools.partial(_matrix_task, values, args.data_dir)
    records = {}
    table = run_matrix(_pairs(values), values["task.kind"], cfg, make, workers=args.workers,
                       on_record=lambda s, t, rec: records.__setitem__(f"{s}->{t}", rec.to_dict()))
    _write_results(out, table, {"runs": records})
    (out / "grid.csv").write_text(table.grid_csv(), encoding="utf-8")
    print(table.grid_csv(), end="")
    if not table.present():
        return EXIT_NUMERICAL
    return EXIT_OK


def ablation_table(rows, seeds) -> str:
    """Variant-by-seed CSV with a median column, one row per variant."""
    lines = ["variant," + ",".join(f"seed_{s}" for s in seeds) + ",median"]
    for variant in VARIANTS:
        accs = [rows.get((variant, s)) for s in seeds]
        present = [a for a in accs if a is not None]
        med = repr(float(statistics.median(present))) if present else ""
        lines.append(",".join([variant] + ["" if a is None else repr(float(a)) for a in accs] + [med]))
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    _, _, values = _load(args)
    out = _run_dir(args, "ablate", values)
    base_seed, n_seeds = values["train.seed"], values["ablate.seeds"]
    seeds = [base_seed + i for i in range(n_seeds)]
    table, rows, runs = ResultsTable(), {}, {}
    for seed in seeds:
        v_seed = C.with_overrides(values, train__seed=seed, task__seed=seed)
        task = C.make_task(v_seed, args.data_dir)
        for variant in VARIANTS:
            algo = "AdaMatch" if variant == "Full" else f"AdaMatch:{variant}"
            cfg = C.train_config(C.with_overrides(v_seed, train__algo=algo))
            try:
                rec = train(task, cfg, out / "checkpoints" / f"{variant}-seed{seed}",
                            progress=_progress)
                acc = rec.final_accuracy
                runs[f"{variant}/seed{seed}"] = rec.to_dict()
            except TrainingAborted as exc:
                log.error("%s seed %d aborted: %s", variant, seed, exc)
                acc = None
            rows[(variant, seed)] = acc
            table.rows.append(ResultRow(values["task.source"], values["task.target"],
                                        values["task.kind"], algo, seed, acc))
    _write_results(out, table, {"runs": runs})
    text = ablation_table(rows, seeds)
    (out / "ablation.csv").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest

    undo = []
    for name in args.mutate or []:
        module, attr, replacement = selftest.MUTATIONS[name]
        undo.append((module, attr, getattr(module, attr)))
        setattr(module, attr, replacement)
    try:
        results = selftest.run(args.select, stream=sys.stdout)
    finally:
        for module, attr, original in undo:
            setattr(module, attr, original)
    failed = [r.name for r in results if not r.passed]
    summary = {"summary": {"checks": len(results), "passed": len(results) - len(failed),
                           "failed": failed, "seconds": round(sum(r.seconds for r in results), 2)}}
    print(json.dumps(summary))
    return EXIT_CHECKS if failed else EXIT_OK


def cmd_oracle_check(args) -> int:
    """Gradient and loss-pipeline oracles at full strength (all coordinates, 1000 batches)."""
    from . import selftest
    from .gradcheck import gradcheck

    report = {}
    for dtype, batch, bound in ((np.float64, 4, 1e-6), (np.float32, 1, 1e-3)):
        errs = [gradcheck(s, dtype, batch=batch).rel_error for s in range(args.seeds)]
        report[f"gradcheck_{np.dtype(dtype).name}"] = {
            "seeds": args.seeds, "max_rel_error": max(errs), "bound": bound, "passed": max(errs) < bound}
    res = selftest.run(["oracle_equivalence", "distribution_alignment", "relative_threshold"])
    for r in res:
        report[r.name] = {"passed": r.passed, "detail": r.detail}
    print(json.dumps(report, indent=2))
    return EXIT_OK if all(v["passed"] for v in report.values()) else EXIT_CHECKS


def cmd_prepare_data(args) -> int:
    for path in prepare_bundled(resolve_data_dir(args.data_dir)):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adamatch", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at every checkpoint")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, outputs=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--data-dir", help="directory with IDX files (default: $ADAMATCH_DATA_DIR)")
        sp.add_argument("--seed", type=int, help="sets both train.seed and task.seed")
        if outputs:
            sp.add_argument("--out-dir", default="runs", help="parent directory for run outputs")
            sp.add_argument("--run-id", help="output subdirectory name (default: command + config hash)")

    sp = sub.add_parser("train", help="train one configured task")
    common(sp)
    sp.add_argument("--resume", action="store_true", help="continue from checkpoints/latest.json")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("matrix", help="run every task.pairs cell")
    common(sp)
    sp.add_argument("--workers", type=int, default=1, help="parallel cells (one process each)")
    sp.set_defaults(fn=cmd_matrix)

    sp = sub.add_parser("ablate", help="exclude-one-component table over ablate.seeds seeds")
    common(sp)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("selftest", help="run the invariant suite")
    sp.add_argument("--select", action="append", help="only checks whose name contains this")
    sp.add_argument("--mutate", action="append", choices=["softmax"],
                    help="break an implementation on purpose (the suite must then fail)")
    sp.set_defaults(fn=cmd_selftest)

    sp = sub.add_parser("oracle-check", help="gradient and loss-pipeline oracles at full strength")
    sp.add_argument("--seeds", type=int, default=100)
    sp.set_defaults(fn=cmd_oracle_check)

    sp = sub.add_parser("prepare-data", help="export the bundled MNIST subset and UCI digits as IDX")
    sp.add_argument("--data-dir", help="target directory (default: $ADAMATCH_DATA_DIR)")
    sp.set_defaults(fn=cmd_prepare_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, NumericalError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
