"""Training loop, checkpoints, evaluation and cross-validation."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import tensor as T
from .config import PipelineConfig, config_from_dict
from .dataio import CohortManifest, PatchBag, fold_indices
from .edmll import SurvivalCurve
from .metrics import (
    KmCurve,
    LogRankResult,
    Stratification,
    kaplan_meier,
    logrank,
    stratify_median,
    td_concordance,
)
from .model import SurvivalModel

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MXSV"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: PipelineConfig
    d: int
    time_scale: float
    epoch: int
    tensors: dict[str, np.ndarray]
    rng_state: dict[str, Any] = field(default_factory=dict)
    history: list[float] = field(default_factory=list)

    def model(self) -> SurvivalModel:
        m = SurvivalModel(self.config, self.d)
        m.load_state_dict(self.tensors)
        m.time_scale = self.time_scale
        return m

    def to_bytes(self) -> bytes:
        meta = {
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in self.config.to_dict().items()},
            "d": self.d,
            "time_scale": self.time_scale,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "history": self.history,
        }
        mbytes = json.dumps(meta, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<II", CKPT_VERSION, len(mbytes)))
        buf.write(mbytes)
        buf.write(struct.pack("<I", len(self.tensors)))
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f8")
            nb = name.encode()
            buf.write(struct.pack("<I", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> Checkpoint:
        if raw[:4] != CKPT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, mlen = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 12
        meta = json.loads(raw[pos:pos + mlen])
        pos += mlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            tensors[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
        if pos != len(raw):
            raise ValueError("trailing bytes in checkpoint")
        return cls(config_from_dict(meta["config"]), meta["d"], meta["time_scale"], meta["epoch"],
                   tensors, meta["rng_state"], meta.get("history", []))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> Checkpoint:
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training


def time_normalizer(times, events) -> float:
    """Median observed event time (all times if nothing was observed)."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    pick = times[events == 1] if np.any(events == 1) else times
    return float(np.median(pick))


def forward_slide(model: SurvivalModel, bag: PatchBag) -> tuple[np.ndarray, SurvivalCurve]:
    """Deterministic inference: slide embedding and predicted survival curve."""
    with T.no_grad():
        tr = model.forward(bag)
    return tr.z.data.copy(), tr.head.curve(model.time_scale)


def clip_grad_norm(params: Sequence[T.Tensor], max_norm: float) -> float:
    sq = sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return norm


def _as_bags(data) -> list[PatchBag]:
    if isinstance(data, CohortManifest):
        return data.load_bags()
    return list(data)


def train(config: PipelineConfig, train_data, seed: int | None = None, log_path=None,
          on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Fit a fresh model on ``train_data`` (a manifest or a list of bags)."""
    bags = _as_bags(train_data)
    if not bags:
        raise ValueError("cannot train on an empty cohort")
    seed = config.seed if seed is None else seed
    d = bags[0].d
    for b in bags:
        if b.d != d:
            raise ValueError(f"{b.slide_id}: feature width {b.d} differs from {d}")
    init_ss, run_ss = np.random.SeedSequence(seed).spawn(2)
    model = SurvivalModel(config, d, seed=int(init_ss.generate_state(1)[0]))
    model.time_scale = time_normalizer([b.time for b in bags], [b.censor for b in bags])
    rng = np.random.default_rng(run_ss)
    params = model.parameters()
    opt = T.AdamState(learning_rate=config.lr, weight_decay=config.weight_decay)
    history = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(bags))
            total = 0.0
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                model.zero_grad()
                for i in batch:
                    bag = bags[i]
                    try:
                        with np.errstate(over="raise", invalid="raise"):
                            loss = model.loss(bag, training=True, rng=rng)
                    except Exception as exc:
                        raise RuntimeError(f"slide {bag.slide_id}: {exc}") from exc
                    if not math.isfinite(loss.item()):
                        raise RuntimeError(f"slide {bag.slide_id}: non-finite loss {loss.item()}")
                    total += loss.item()
                    T.backward(loss * (1.0 / len(batch)))
                clip_grad_norm(params, config.grad_clip)
                T.adam_step(opt, params)
            mean_loss = total / len(bags)
            history.append(mean_loss)
            rec = {"epoch": epoch, "mean_loss": mean_loss, "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
            log.info("epoch %d mean_loss %.6f", epoch, mean_loss)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(rec)
    finally:
        if log_fh:
            log_fh.close()
    return Checkpoint(config, d, model.time_scale, config.epochs, model.state_dict(),
                      rng.bit_generator.state, history)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class CohortMetrics:
    slide_ids: list[str]
    times: np.ndarray
    events: np.ndarray
    medians: np.ndarray
    tdc: float | None
    comparable_pairs: int
    strata: Stratification | None = None
    km_high: KmCurve | None = None
    km_low: KmCurve | None = None
    logrank: LogRankResult | None = None

    @property
    def risk(self) -> np.ndarray:
        return -self.medians

    def to_dict(self) -> dict[str, Any]:
        lr = self.logrank
        return {
            "n": len(self.slide_ids),
            "tdc": self.tdc,
            "comparable_pairs": self.comparable_pairs,
            "n_high": None if self.strata is None else int(self.strata.high.size),
            "n_low": None if self.strata is None else int(self.strata.low.size),
            "logrank_statistic": None if lr is None else lr.statistic,
            "logrank_p": None if lr is None else lr.p_value,
            "predictions": [
                {"slide_id": s, "time": float(t), "censor": int(c), "predicted_median": float(m)}
                for s, t, c, m in zip(self.slide_ids, self.times, self.events, self.medians)
            ],
        }


def cohort_metrics(slide_ids, times, events, curves: Sequence[SurvivalCurve], medians=None) -> CohortMetrics:
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if medians is None:
        medians = np.array([c.median() for c in curves])
    tdc = td_concordance(times, events, curves)
    cm = CohortMetrics(list(slide_ids), times, events, np.asarray(medians, float), tdc.value, tdc.comparable)
    _stratify(cm)
    return cm


def _stratify(cm: CohortMetrics) -> None:
    """Median-split risk groups with their KM curves and log-rank test."""
    if len(cm.times) < 2:
        return
    cm.strata = stratify_median(cm.risk)
    if cm.strata.degenerate:
        return
    hi, lo = cm.strata.high, cm.strata.low
    cm.km_high = kaplan_meier(cm.times[hi], cm.events[hi])
    cm.km_low = kaplan_meier(cm.times[lo], cm.events[lo])
    cm.logrank = logrank(cm.times[hi], cm.events[hi], cm.times[lo], cm.events[lo])


def evaluate(checkpoint: Checkpoint, test_data) -> CohortMetrics:
    bags = _as_bags(test_data)
    model = checkpoint.model()
    curves = [forward_slide(model, b)[1] for b in bags]
    return cohort_metrics([b.slide_id for b in bags], [b.time for b in bags],
                          [b.censor for b in bags], curves)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    fold: int
    n_train: int
    n_test: int
    metrics: CohortMetrics
    checkpoint: Checkpoint

    @property
    def tdc(self) -> float | None:
        return self.metrics.tdc


@dataclass
class CvReport:
    folds: list[FoldResult]
    pooled: CohortMetrics

    @property
    def tdcs(self) -> list[float]:
        return [f.tdc for f in self.folds if f.tdc is not None]

    @property
    def mean(self) -> float:
        return float(np.mean(self.tdcs))

    @property
    def std(self) -> float:
        return float(np.std(self.tdcs))

    def to_dict(self) -> dict[str, Any]:
        pooled = self.pooled.to_dict()
        return {
            "folds": [{"fold": f.fold, "n_train": f.n_train, "n_test": f.n_test, "tdc": f.tdc} for f in self.folds],
            "tdc_mean": self.mean,
            "tdc_std": self.std,
            "pooled_logrank_statistic": pooled["logrank_statistic"],
            "pooled_logrank_p": pooled["logrank_p"],
            "pooled_n_high": pooled["n_high"],
            "pooled_n_low": pooled["n_low"],
            "predictions": pooled["predictions"],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _run_fold(args) -> FoldResult:
    config, fold, train_bags, test_bags, log_path = args
    ckpt = train(config, train_bags, seed=config.seed + fold, log_path=log_path)
    return FoldResult(fold, len(train_bags), len(test_bags), evaluate(ckpt, test_bags), ckpt)


def cross_validate(config: PipelineConfig, manifest: CohortManifest | Sequence[PatchBag],
                   k: int | None = None, jobs: int = 1, out_dir=None) -> CvReport:
    """k-fold CV; fold i trains with seed ``config.seed + i``.

    Out-of-fold predictions are pooled for the median-split KM / log-rank.
    """
    k = config.folds if k is None else k
    bags = _as_bags(manifest)
    split_bags = []
    for test in fold_indices(len(bags), k, config.seed):
        held = set(test.tolist())
        split_bags.append(([b for i, b in enumerate(bags) if i not in held], [bags[i] for i in test]))
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    tasks = [(config, i, tr, te, out / f"fold{i}_train_log.jsonl" if out else None)
             for i, (tr, te) in enumerate(split_bags)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            folds = list(ex.map(_run_fold, tasks))
    else:
        folds = [_run_fold(t) for t in tasks]
    pooled = CohortMetrics(
        [s for f in folds for s in f.metrics.slide_ids],
        np.concatenate([f.metrics.times for f in folds]),
        np.concatenate([f.metrics.events for f in folds]),
        np.concatenate([f.metrics.medians for f in folds]),
        None, 0,
    )
    _stratify(pooled)
    report = CvReport(folds, pooled)
    if out:
        for f in folds:
            f.checkpoint.save(out / f"fold{f.fold}.ckpt")
        (out / "cv_report.json").write_text(report.dumps(), encoding="utf-8")
    return report
