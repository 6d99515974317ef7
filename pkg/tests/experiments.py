"""Scaled-down training experiments behind the acceptance checks, with a result cache.

Each experiment is a set of config overrides. A finished run is stored as
JSON under ``acceptance_cache/`` together with the resolved config and a
hash of the training code (comments and docstrings ignored); a cached run is
reused only while both still match. Fill the cache ahead of time with::

    python tests/experiments.py [name-filter ...]
"""

from __future__ import annotations

import ast
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from adamatch import config as C
from adamatch import data as D
from adamatch.train import RunRecord, train

HERE = Path(__file__).resolve().parent
CACHE = Path(os.environ.get("ADAMATCH_ACCEPTANCE_CACHE", HERE / "acceptance_cache"))
SEEDS = (0, 1, 2)
SSDA_LABELS = (1, 5, 10)

# training-relevant modules; edits elsewhere never invalidate cached runs
CODE = ["nn/tensor.py", "nn/layers.py", "nn/optim.py", "data.py", "augment.py", "algorithms.py",
        "train.py", "config.py"]

DESK = {"task.source": "mnist5k", "task.target": "digits"}
SKEW = {"task.source": "mnist5k", "task.target": "mnist5k", "task.target_shift": "pad:32,invert",
        "task.imbalance": "10"}


def _exp(base, seed, **extra):
    over = dict(base, **{"train.seed": seed, "task.seed": seed})
    over.update({k.replace("__", "."): str(v) for k, v in extra.items()})
    return over


EXPERIMENTS = {}
for s in SEEDS:
    EXPERIMENTS[f"uda-adamatch-s{s}"] = _exp(DESK, s, train__algo="AdaMatch")
    EXPERIMENTS[f"uda-baselinebn-s{s}"] = _exp(DESK, s, train__algo="BaselineBN")
for s in SEEDS:
    EXPERIMENTS[f"skew-full-s{s}"] = _exp(SKEW, s, train__algo="AdaMatch")
    EXPERIMENTS[f"skew-nodistalign-s{s}"] = _exp(SKEW, s, train__algo="AdaMatch:NoDistAlign")
for s in SEEDS:
    for n in SSDA_LABELS:
        EXPERIMENTS[f"ssda{n}-s{s}"] = _exp(DESK, s, task__kind="SSDA", task__n_target_labels=n)


def code_hash() -> str:
    """Hash of the training code's syntax tree with docstrings removed."""
    root = Path(C.__file__).resolve().parent
    h = hashlib.sha256()
    for rel in CODE:
        tree = ast.parse((root / rel).read_text(encoding="utf-8"))
        for node in ast.walk(tree):
            body = getattr(node, "body", None)
            if (isinstance(body, list) and body and isinstance(body[0], ast.Expr)
                    and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str)):
                node.body = body[1:] or [ast.Pass()]
        h.update(rel.encode() + ast.dump(tree).encode())
    return h.hexdigest()[:16]


def data_dir() -> Path:
    env = os.environ.get(D.DATA_DIR_ENV)
    if env:
        return Path(env)
    root = CACHE / "data"
    if not (root / D.DOMAINS["digits"].test[1]).exists():
        D.prepare_bundled(root)
    return root


def resolved(name: str) -> dict:
    return C.resolve("", [f"{k}={v}" for k, v in EXPERIMENTS[name].items()])


def _cache_path(name: str) -> Path:
    return CACHE / f"{name}.json"


def cached(name: str):
    """The cached RunRecord for ``name`` if it is still valid, else None."""
    path = _cache_path(name)
    if not path.exists():
        return None
    entry = json.loads(path.read_text())
    if entry["config"] != C.dump(resolved(name)) or entry["code_hash"] != code_hash():
        return None
    return RunRecord.from_dict(entry["record"])


def run(name: str, log=print) -> RunRecord:
    """Cached record, or train now and cache the result."""
    rec = cached(name)
    if rec is not None:
        return rec
    values = resolved(name)
    task = C.make_task(values, data_dir())
    cfg = C.train_config(values)
    t0 = time.time()

    def progress(t, total, images, tgt, src, report):
        log(f"{name} {images}/{cfg.total_images} target={tgt:.4f} source={src:.4f} "
            f"mask={report.mask_rate:.2f} {time.time() - t0:.0f}s")

    rec = train(task, cfg, progress=progress)
    CACHE.mkdir(parents=True, exist_ok=True)
    _cache_path(name).write_text(json.dumps({
        "name": name,
        "config": C.dump(values),
        "code_hash": code_hash(),
        "record": rec.to_dict(),
        "environment": {"python": platform.python_version(), "numpy": np.__version__,
                        "machine": platform.machine()},
    }, indent=1))
    return rec


def main(argv) -> int:
    names = [n for n in EXPERIMENTS if not argv or any(a in n for a in argv)]
    for n in names:
        rec = run(n, log=lambda msg: print(msg, flush=True))
        print(f"DONE {n} final_accuracy={rec.final_accuracy:.4f}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
