"""Accuracy bookkeeping, A_Final / Forgetting, and the experiment driver."""

import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional

import numpy as np

from .backbone import Model, ModelConfig, build_model, count_params, predict
from .numerics import RngStream
from .stream import (
    StreamConfig,
    TaskStream,
    iterate_single_pass,
    iterate_union_single_pass,
    make_base_dataset,
    make_synthetic_stream,
    with_seed,
)
from .training import OptState, SampleCounter, train_step

METHODS = ("RwF", "Finetune", "Joint")
REPORT_VERSION = 1


class AccuracyMatrix:
    """``acc[i, t]``: accuracy on task i after training through task t (0-based).

    Unfilled entries are NaN; only i <= t may be filled.
    """

    def __init__(self, T):
        self.acc = np.full((T, T), np.nan)

    @property
    def T(self):
        return self.acc.shape[0]

    def set(self, i, t, value):
        if i > t:
            raise ValueError("only i <= t entries exist")
        if not 0.0 <= value <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")
        self.acc[i, t] = value

    def to_list(self):
        return [[None if np.isnan(v) else float(v) for v in row] for row in self.acc]

    @classmethod
    def from_list(cls, rows):
        M = cls(len(rows))
        for i, row in enumerate(rows):
            for t, v in enumerate(row):
                if v is not None:
                    M.set(i, t, v)
        return M


def final_average_accuracy(M: AccuracyMatrix):
    final = M.acc[:, -1]
    if np.isnan(final).any():
        raise ValueError("final column of the accuracy matrix is incomplete")
    return float(final.mean())


def forgetting(M: AccuracyMatrix):
    """Mean over tasks 1..T-1 of (best accuracy ever seen - final accuracy)."""
    T = M.T
    if T < 2:
        raise ValueError("forgetting needs at least two tasks")
    gaps = []
    for i in range(T - 1):
        hist = M.acc[i, i:]
        if np.isnan(hist).any():
            raise ValueError("accuracy matrix lower triangle is incomplete")
        gaps.append(hist.max() - hist[-1])
    return float(np.mean(gaps))


def task_accuracy(model: Model, task, seen):
    if len(task.test_y) == 0:
        return 0.0
    pred = predict(model, task.test_x, seen)
    if not np.isin(pred, seen).all():
        raise AssertionError("prediction outside the seen classes")
    return float(np.mean(pred == task.test_y))


def evaluate_seen(model: Model, stream: TaskStream, t):
    """Accuracies of tasks 0..t with logits masked to the union of seen classes."""
    seen = stream.seen_classes(t)
    return [task_accuracy(model, stream.tasks[i], seen) for i in range(t + 1)]


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


def _strict(cls, data, what):
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1:
            raise ValueError("lr must be >= 0 and batch_size >= 1")


@dataclass
class PretrainConfig:
    """Joint multi-epoch training of the backbone on held-out base classes."""

    n_classes: int = 20
    samples_per_class: int = 100
    epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 32


@dataclass
class ExperimentConfig:
    method: str = "RwF"
    model: ModelConfig = field(default_factory=ModelConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        sections = {
            "model": ModelConfig, "stream": StreamConfig,
            "optim": OptimConfig, "pretrain": PretrainConfig,
        }
        kw = {}
        for key, sub in sections.items():
            if key in data:
                kw[key] = _strict(sub, data.pop(key), key)
        unknown = set(data) - {"method", "seeds"}
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        if "seeds" in data:
            kw["seeds"] = [int(s) for s in data["seeds"]]
        if "method" in data:
            kw["method"] = data["method"]
        return cls(**kw)


def resolved_model_config(exp: ExperimentConfig):
    """Model config with stream-derived shapes; Finetune forces k = 0."""
    s = exp.stream
    cfg = replace(exp.model, L=s.L_in, input_dim=s.input_dim, num_classes=s.num_classes)
    if exp.method == "Finetune":
        cfg = replace(cfg, k=0)
    return cfg


@dataclass
class SeedResult:
    seed: int
    matrix: AccuracyMatrix
    a_final: float
    forgetting: Optional[float]
    consumed: int
    expected: int
    final_loss: float


@dataclass
class ExperimentReport:
    config: dict
    results: List[SeedResult]
    params: dict
    wall_clock: float = 0.0

    def _agg(self, key):
        vals = [getattr(r, key) for r in self.results]
        if any(v is None for v in vals):
            return None, None
        return float(np.mean(vals)), float(np.std(vals))

    @property
    def a_final(self):
        return self._agg("a_final")

    @property
    def forgetting(self):
        return self._agg("forgetting")

    def to_json(self):
        """Deterministic content only; timing lives in a separate metadata file."""
        a_mean, a_std = self.a_final
        f_mean, f_std = self.forgetting
        return {
            "version": REPORT_VERSION,
            "config": self.config,
            "method": self.config["method"],
            "params": self.params,
            "per_seed": [
                {
                    "seed": r.seed,
                    "accuracy_matrix": r.matrix.to_list(),
                    "A_final": r.a_final,
                    "forgetting": r.forgetting,
                    "samples_consumed": r.consumed,
                    "samples_expected": r.expected,
                    "final_loss": r.final_loss,
                }
                for r in self.results
            ],
            "A_final": {"mean": a_mean, "std": a_std},
            "forgetting": {"mean": f_mean, "std": f_std},
        }

    def csv_rows(self):
        m = self.config["model"]
        s = self.config["stream"]
        k = 0 if self.config["method"] == "Finetune" else m["k"]
        return [
            {
                "method": self.config["method"], "k": k, "placement": m["placement"],
                "T": s["T"], "fraction": s["few_shot_fraction"], "seed": r.seed,
                "A_final": r.a_final,
                "forgetting": "" if r.forgetting is None else r.forgetting,
            }
            for r in self.results
        ]


CSV_FIELDS = ["method", "k", "placement", "T", "fraction", "seed", "A_final", "forgetting"]


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------


_PRETRAINED = {}


def _pretrain_key(cfg: ModelConfig, exp: ExperimentConfig, seed):
    backbone = {k: v for k, v in cfg.to_dict().items() if k not in ("k", "m", "placement", "num_classes", "beta")}
    stream = {k: getattr(exp.stream, k) for k in ("L_in", "input_dim", "noise_std")}
    return json.dumps([backbone, stream, asdict(exp.pretrain), int(seed)], sort_keys=True)


def pretrain_backbone(model: Model, exp: ExperimentConfig, seed):
    """Train every non-routing tensor on base classes, routers bypassed, then
    copy the backbone into ``model``. The temporary head is discarded.

    Results are memoized per process: the backbone does not depend on the
    routing settings, so RwF/Finetune/Joint runs of one seed share it.
    """
    key = _pretrain_key(model.config, exp, seed)
    if key not in _PRETRAINED:
        _PRETRAINED[key] = _pretrain(model.config, exp, seed)
    for name, val in _PRETRAINED[key].items():
        model.params[name][...] = val
    return model


def _pretrain(cfg: ModelConfig, exp: ExperimentConfig, seed):
    pc = exp.pretrain
    base_cfg = replace(cfg, k=0, num_classes=pc.n_classes, backbone_mode="jointly_trainable")
    base = build_model(base_cfg, RngStream(seed).child(10))
    data = make_base_dataset(exp.stream, pc.n_classes, pc.samples_per_class, seed)
    opt = OptState.for_model(base, lr=pc.lr)
    rng = RngStream(seed).child(11)
    for epoch in range(pc.epochs):
        order = rng.child(epoch).permutation(len(data))
        for s in range(0, len(order), pc.batch_size):
            sel = order[s : s + pc.batch_size]
            train_step(base, data.x[sel], data.y[sel], opt)
    return {n: v.copy() for n, v in base.params.items() if not n.startswith("head.")}


def run_seed(exp: ExperimentConfig, seed, model_out=None) -> SeedResult:
    stream = make_synthetic_stream(with_seed(exp.stream, seed))
    cfg = resolved_model_config(exp)
    model = build_model(cfg, RngStream(seed).child(10))
    if cfg.backbone_mode == "pretrain_then_freeze":
        pretrain_backbone(model, exp, seed)
    o = exp.optim
    opt = OptState.for_model(model, lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps)
    counter = SampleCounter()
    M = AccuracyMatrix(stream.T)
    loss = float("nan")
    if exp.method == "Joint":
        every = list(range(stream.num_classes))
        for x, y in iterate_union_single_pass(stream, o.batch_size, seed):
            loss = train_step(model, x, y, opt, every, counter=counter)
        for i, a in enumerate(evaluate_seen(model, stream, stream.T - 1)):
            M.set(i, stream.T - 1, a)
        forget = None
    else:
        for t, task in enumerate(stream.tasks):
            for x, y in iterate_single_pass(stream, t, o.batch_size, seed):
                loss = train_step(model, x, y, opt, task.classes, counter=counter)
            for i, a in enumerate(evaluate_seen(model, stream, t)):
                M.set(i, t, a)
        forget = forgetting(M) if stream.T > 1 else 0.0
    expected = stream.total_train()
    if counter.count != expected or stream.served != expected:
        raise RuntimeError(
            f"single-pass violation: {counter.count} samples trained, {expected} in stream"
        )
    if model_out is not None:
        model_out.append((model, opt))
    return SeedResult(seed, M, final_average_accuracy(M), forget, counter.count, expected, loss)


def run_experiment(exp: ExperimentConfig, keep_models=False) -> ExperimentReport:
    t0 = time.perf_counter()
    kept = [] if keep_models else None
    results = [run_seed(exp, s, kept) for s in exp.seeds]
    cfg = resolved_model_config(exp)
    params = count_params(build_model(cfg, RngStream(0)))
    report = ExperimentReport(exp.to_dict(), results, params, time.perf_counter() - t0)
    if keep_models:
        report.models = kept
    return report
