"""Training loop, checkpoint container, evaluation rule and experiment matrix."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import struct
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .algorithms import (AdaMatchConfig, PseudoLabelState, Variant, ablate, adamatch_step,
                         baseline_bn_step, fixmatch_plus_step, supervised_step)
from .augment import AugmentPolicy
from .data import SSDA, Dataset, TaskSpec, batch_stream
from .nn.layers import BnMode, Model, build_desknet, model_apply
from .nn.optim import Optimizer
from .nn.tensor import NumericalError

log = logging.getLogger(__name__)

ALGOS = ("AdaMatch", "FixMatchPlus", "BaselineBN", "SupervisedOracle")
CHECKPOINT_MAGIC = b"ADMK"
CHECKPOINT_VERSION = 1
RING_MARGIN = 2


class TrainingAborted(RuntimeError):
    """A numerical failure during training, tagged with the step index."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"numerical abort at step {step}: {cause}")
        self.step = step


# ------------------------------------------------------------------ config

@dataclass
class TrainConfig:
    algo: str = "AdaMatch"  # one of ALGOS, or "AdaMatch:<Variant>"
    total_images: int = 300_000
    n_sl: int = 64
    checkpoint_every: int = 8192
    eval_last_k: int = 10
    seed: int = 0
    width: int = 16
    input_side: int = 32
    dtype: str = "float32"
    optimizer: Optimizer = field(default_factory=Optimizer)
    adamatch: AdaMatchConfig = field(default_factory=AdaMatchConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        algo_name(self.algo)
        for name in ("total_images", "n_sl", "checkpoint_every", "eval_last_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.checkpoint_every * self.eval_last_k > self.total_images:
            raise ValueError("checkpoint_every * eval_last_k exceeds total_images")

    @property
    def total_steps(self) -> int:
        return math.ceil(self.total_images / self.n_sl)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["optimizer"].pop("velocity", None)
        prior = d["adamatch"]["target_prior"]
        d["adamatch"]["target_prior"] = None if prior is None else [float(p) for p in prior]
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def algo_name(algo: str):
    """Split 'AdaMatch:NoDistAlign' into ('AdaMatch', Variant.NO_DIST_ALIGN)."""
    base, _, variant = algo.partition(":")
    if base not in ALGOS:
        raise ValueError(f"unknown algorithm {algo!r}; expected one of {ALGOS}")
    if variant:
        if base != "AdaMatch":
            raise ValueError("only AdaMatch has ablation variants")
        return base, Variant(variant)
    return base, None


def make_step(cfg: TrainConfig) -> Callable:
    """Uniform ``step(model, batch, state, t, T, rng, opt)`` for the configured algorithm."""
    base, variant = algo_name(cfg.algo)
    am, pol = cfg.adamatch, cfg.augment
    if base == "AdaMatch":
        fn = adamatch_step if variant is None else ablate(variant)
        return lambda m, b, s, t, T, rng, opt: fn(m, b, am, s, t, T, rng, pol, opt)
    if base == "FixMatchPlus":
        return lambda m, b, s, t, T, rng, opt: fixmatch_plus_step(m, b, am, s, t, T, rng, pol, opt)
    if base == "BaselineBN":
        return lambda m, b, s, t, T, rng, opt: baseline_bn_step(m, b, t, T, rng, pol, opt, am.uratio)
    return lambda m, b, s, t, T, rng, opt: supervised_step(m, b, t, T, rng, pol, opt)


# -------------------------------------------------------------- evaluation

def evaluate(model: Model, dataset: Dataset, batch_size: int = 512) -> float:
    """Top-1 accuracy with BN in eval mode and no augmentation."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for i in range(0, len(dataset), batch_size):
        z = model_apply(model, dataset.images[i:i + batch_size], BnMode.EVAL).data
        correct += int((z.argmax(axis=1) == dataset.labels[i:i + batch_size]).sum())
    return correct / len(dataset)


def median_last_k(accuracies, k: int = 10) -> float:
    """Median of the final ``k`` entries; even ``k`` averages the two middle values."""
    accuracies = list(accuracies)
    if k < 1 or len(accuracies) < k:
        raise ValueError(f"need at least {k} accuracies, got {len(accuracies)}")
    tail = sorted(accuracies[-k:])
    mid = k // 2
    if k % 2:
        return float(tail[mid])
    return float((tail[mid - 1] + tail[mid]) / 2)


# ----------------------------------------------------- checkpoint container

def save_checkpoint(path, tensors: dict) -> None:
    """Write ``ADMK`` | version u32 | count u32 | (name, shape, f32 payload)*, little endian."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")  # keeps 0-d shapes
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an ADMK checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 12, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    return out


def _training_tensors(model: Model, opt: Optimizer, state: PseudoLabelState) -> dict:
    out = dict(model.state_arrays())
    for name, v in opt.velocity.items():
        out[f"velocity/{name}"] = v
    if len(state):
        out["pseudo/src"] = np.stack(list(state.src))
        out["pseudo/tgt"] = np.stack(list(state.tgt))
    return out


def _restore_training(tensors: dict, model: Model, opt: Optimizer, state: PseudoLabelState):
    model.load_state_arrays(tensors)
    dtype = model.dtype
    opt.velocity = {n[len("velocity/"):]: v.astype(dtype) for n, v in tensors.items()
                    if n.startswith("velocity/")}
    state.src.clear()
    state.tgt.clear()
    if "pseudo/src" in tensors:
        state.src.extend(v.astype(dtype) for v in tensors["pseudo/src"])
        state.tgt.extend(v.astype(dtype) for v in tensors["pseudo/tgt"])


# -------------------------------------------------------------------- runs

@dataclass
class RunRecord:
    checkpoints: list  # (images_seen, target_accuracy, source_accuracy)
    final_accuracy: float
    wall_time: float
    fingerprint: str
    history: list = field(default_factory=list)  # all target accuracies, oldest first

    def to_dict(self) -> dict:
        return {
            "checkpoints": [list(c) for c in self.checkpoints],
            "final_accuracy": self.final_accuracy,
            "wall_time": self.wall_time,
            "fingerprint": self.fingerprint,
            "history": list(self.history),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls([tuple(c) for c in d["checkpoints"]], d["final_accuracy"], d["wall_time"],
                   d["fingerprint"], list(d.get("history", [])))


def step_rng(seed: int, t: int) -> np.random.Generator:
    """Per-step generator, so a resumed run draws exactly what an unbroken one would."""
    return np.random.default_rng([seed, 1, t])


def train(task: TaskSpec, cfg: TrainConfig, checkpoint_dir=None, resume: bool = False,
          source_eval_size: int = 1000, progress: Optional[Callable] = None) -> RunRecord:
    """Train on ``task`` and evaluate the target test split at every checkpoint."""
    if task.kind == SSDA and task.target_labeled is None:
        raise ValueError("SSDA task without target labels")
    src = task.source_labeled
    if src.side != cfg.input_side or task.target_test.side != cfg.input_side:
        raise ValueError(f"images must be {cfg.input_side}x{cfg.input_side}")
    dtype = np.dtype(cfg.dtype)
    model = build_desknet(cfg.input_side, src.channels, task.k, cfg.width, seed=cfg.seed, dtype=dtype)
    opt = dataclasses.replace(cfg.optimizer, velocity={})
    state = PseudoLabelState(cfg.adamatch.dist_buffer_len)
    step = make_step(cfg)
    T = cfg.total_steps
    stream = batch_stream(task, cfg.n_sl, cfg.adamatch.uratio, np.random.default_rng([cfg.seed, 0]))
    # evenly spaced, so class-sorted datasets are still covered
    src_eval = src.subset(np.unique(np.linspace(0, len(src) - 1, min(len(src), source_eval_size)).astype(int)))

    ring = deque(maxlen=cfg.eval_last_k + RING_MARGIN)
    history = []
    start_step = 0
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        meta_path = ckpt_dir / "latest.json"
        if resume and meta_path.exists():
            meta = json.loads(meta_path.read_text())
            if meta["fingerprint"] != cfg.fingerprint():
                raise ValueError("checkpoint belongs to a different configuration")
            if dtype != np.float32:
                log.warning("checkpoints hold f32 payloads; a %s run resumes from rounded state", dtype)
            _restore_training(load_checkpoint(ckpt_dir / meta["file"]), model, opt, state)
            start_step = meta["step"]
            history = meta["history"]
            ring.extend(tuple(c) for c in meta["ring"])
            for _ in range(start_step):
                next(stream)
            log.info("resumed at step %d", start_step)

    t0 = time.time()
    images = start_step * cfg.n_sl
    for t in range(start_step, T):
        batch = next(stream)
        try:
            report = step(model, batch, state, t, T, step_rng(cfg.seed, t), opt)
        except (NumericalError, FloatingPointError) as exc:
            raise TrainingAborted(t, exc) from exc
        before, images = images, images + cfg.n_sl
        if images // cfg.checkpoint_every > before // cfg.checkpoint_every:
            tgt_acc = evaluate(model, task.target_test)
            src_acc = evaluate(model, src_eval)
            ring.append((images, tgt_acc, src_acc))
            history.append(tgt_acc)
            if ckpt_dir is not None:
                fname = "latest.admk"
                save_checkpoint(ckpt_dir / fname, _training_tensors(model, opt, state))
                (ckpt_dir / "latest.json").write_text(json.dumps({
                    "fingerprint": cfg.fingerprint(), "file": fname, "step": t + 1,
                    "images": images, "history": history, "ring": [list(c) for c in ring],
                }))
            if progress is not None:
                progress(t + 1, T, images, tgt_acc, src_acc, report)
    if len(history) < cfg.eval_last_k:
        raise ValueError(f"only {len(history)} checkpoints; eval_last_k={cfg.eval_last_k}")
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "final.admk", model.state_arrays())
    final = median_last_k([c[1] for c in ring], cfg.eval_last_k)
    return RunRecord(list(ring), final, time.time() - t0, cfg.fingerprint(), history)


# ------------------------------------------------------------------ matrix

RESULT_FIELDS = ("source", "target", "kind", "algo", "seed", "final_accuracy")


@dataclass
class ResultRow:
    source: str
    target: str
    kind: str
    algo: str
    seed: int
    final_accuracy: Optional[float]  # None marks a failed cell


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)

    def __eq__(self, other):
        return isinstance(other, ResultsTable) and self.rows == other.rows

    def present(self):
        return [r for r in self.rows if r.final_accuracy is not None]

    def grand_average(self) -> Optional[float]:
        vals = [r.final_accuracy for r in self.present()]
        return float(np.mean(vals)) if vals else None

    def grid(self):
        """(sources, targets, cells, row_avg, col_avg, grand) with cells[(s, t)] -> accuracy.

        Multiple seeds for one pair are reduced by their median.
        """
        sources = list(dict.fromkeys(r.source for r in self.rows))
        targets = list(dict.fromkeys(r.target for r in self.rows))
        cells = {}
        for s in sources:
            for t in targets:
                vals = [r.final_accuracy for r in self.present() if r.source == s and r.target == t]
                if vals:
                    cells[(s, t)] = float(np.median(vals))
        row_avg = {s: float(np.mean(v)) for s in sources
                   if (v := [cells[(s, t)] for t in targets if (s, t) in cells])}
        col_avg = {t: float(np.mean(v)) for t in targets
                   if (v := [cells[(s, t)] for s in sources if (s, t) in cells])}
        grand = float(np.mean(list(cells.values()))) if cells else None
        return sources, targets, cells, row_avg, col_avg, grand

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r in self.rows:
            acc = "" if r.final_accuracy is None else repr(float(r.final_accuracy))
            w.writerow([r.source, r.target, r.kind, r.algo, r.seed, acc])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResultsTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != RESULT_FIELDS:
            raise ValueError(f"unexpected header {header}")
        rows = []
        for src, tgt, kind, algo, seed, acc in reader:
            rows.append(ResultRow(src, tgt, kind, algo, int(seed), float(acc) if acc else None))
        return cls(rows)

    def grid_csv(self) -> str:
        sources, targets, cells, row_avg, col_avg, grand = self.grid()
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        fmt = lambda v: "" if v is None else f"{100 * v:.1f}"  # noqa: E731
        w.writerow(["source \\ target", *targets, "Avg"])
        for s in sources:
            w.writerow([s, *[fmt(cells.get((s, t))) for t in targets], fmt(row_avg.get(s))])
        w.writerow(["Avg", *[fmt(col_avg.get(t)) for t in targets], fmt(grand)])
        return out.getvalue()

    def to_json(self) -> str:
        sources, targets, cells, row_avg, col_avg, grand = self.grid()
        return json.dumps({
            "rows": [dataclasses.asdict(r) for r in self.rows],
            "grid": {f"{s}->{t}": v for (s, t), v in cells.items()},
            "row_average": row_avg,
            "column_average": col_avg,
            "grand_average": grand,
        }, indent=2, sort_keys=True)


def matrix_cells(pairs, kind: str):
    """Pairs to run; UDA drops the diagonal (a domain adapting to itself)."""
    return [(s, t) for s, t in pairs if not (kind == "UDA" and s == t)]


def _run_cell(args):
    make_task, s, t, kind, cfg = args
    task = make_task(s, t, kind, cfg.seed)
    return train(task, cfg)


def run_matrix(pairs, kind: str, cfg: TrainConfig, make_task: Callable, workers: int = 1,
               on_record: Optional[Callable] = None) -> ResultsTable:
    """One run per (source, target) cell; a failing cell is recorded as missing."""
    cells = matrix_cells(pairs, kind)
    jobs = [(make_task, s, t, kind, cfg) for s, t in cells]
    results = {}
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_cell, job): job[1:3] for job in jobs}
            for fut, cell in futures.items():
                try:
                    results[cell] = fut.result()
                except Exception as exc:  # a broken cell must not sink the matrix
                    log.error("cell %s->%s failed: %s", *cell, exc)
                    results[cell] = None
    else:
        for job in jobs:
            try:
                results[job[1:3]] = _run_cell(job)
            except Exception as exc:
                log.error("cell %s->%s failed: %s", job[1], job[2], exc)
                results[job[1:3]] = None
    table = ResultsTable()
    for s, t in cells:
        rec = results[(s, t)]
        if on_record is not None and rec is not None:
            on_record(s, t, rec)
        table.rows.append(ResultRow(s, t, kind, cfg.algo, cfg.seed,
                                    None if rec is None else rec.final_accuracy))
    return table
