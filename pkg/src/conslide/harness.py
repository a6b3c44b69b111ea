"""Continual training loop, composite loss, and accuracy-matrix recording.

One pass over a task sequence: per training sample the loop draws a replay
bag from the rehearsal buffer, combines classification loss on current and
replay bags with the cross-scale consistency loss, routes gradients so the
patch-level blocks see a down-weighted share of the classification signal,
steps Adam, then stores regions of the current sample back into the buffer.
After each task the model is scored on every task's test set to fill one
row of the accuracy matrix.
"""

from __future__ import annotations

import json
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import buro, metrics
from . import tensor as T
from .cssl import CsslProjector, cssl_loss
from .data import FeatureBag
from .hit import HitConfig, HitModel, hit_forward, save_checkpoint
from .tensor import ConfigurationError, Tensor

SCENARIOS = ("class-incremental", "task-incremental")


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss; carries stage diagnostics."""

    def __init__(self, message, task_id=None, sample_id=None):
        super().__init__(message)
        self.task_id = task_id
        self.sample_id = sample_id


@dataclass
class TrainConfig:
    alpha: float = 0.5  # replay classification weight
    beta: float = 0.1  # cross-scale consistency weight
    lambda_pt: float = 0.1  # classification-gradient share reaching patch blocks
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs_per_task: int = 20
    batch_size: int = 1
    seed: int = 0
    scenario: str = "class-incremental"
    buffer_capacity: int = 1100  # counted in regions
    breakup_size: int = 32  # regions sampled per stored slide
    replay_bag_size: int = 16  # regions per reorganized replay bag
    replay_whole_bags: bool = False  # no-reorganize ablation arm
    proj_dim: int = 0  # 0 means same as model channels
    eval_workers: int = 1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be >= 0")
        if not 0.0 <= self.lambda_pt <= 1.0:
            raise ConfigurationError(f"lambda_pt must lie in [0, 1], got {self.lambda_pt}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.epochs_per_task < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs_per_task and batch_size must be >= 1")
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(
                f"scenario must be one of {SCENARIOS}, got {self.scenario!r}"
            )
        if self.buffer_capacity < 0:
            raise ConfigurationError("buffer_capacity must be >= 0")
        if self.breakup_size < 1 or self.replay_bag_size < 1:
            raise ConfigurationError("breakup_size and replay_bag_size must be >= 1")
        if self.eval_workers < 1:
            raise ConfigurationError("eval_workers must be >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Task:
    task_id: int
    name: str
    class_ids: list
    train_bags: list
    test_bags: list


class TaskSequence:
    """Ordered tasks with disjoint, contiguous class ranges."""

    def __init__(self, tasks):
        if not tasks:
            raise ValueError("task sequence is empty")
        flat = []
        for pos, task in enumerate(tasks):
            if task.task_id != pos:
                raise ValueError(f"task ids must be 0..T-1 in order, got {task.task_id} at {pos}")
            flat.extend(task.class_ids)
            for bag in list(task.train_bags) + list(task.test_bags):
                if bag.task_id != task.task_id:
                    raise ValueError(f"bag {bag.sample_id} carries task {bag.task_id}, expected {task.task_id}")
                if bag.label not in task.class_ids:
                    raise ValueError(
                        f"bag {bag.sample_id} label {bag.label} outside task classes {task.class_ids}"
                    )
        if flat != list(range(len(flat))):
            raise ValueError(f"class ranges must be disjoint and contiguous, got {flat}")
        self.tasks = list(tasks)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def num_classes(self) -> int:
        return sum(len(t.class_ids) for t in self.tasks)

    @property
    def class_map(self) -> dict:
        return {t.task_id: list(t.class_ids) for t in self.tasks}

    def seen_classes(self, through_task: int) -> list:
        out = []
        for t in self.tasks[: through_task + 1]:
            out.extend(t.class_ids)
        return out

    @classmethod
    def from_bags(cls, train_by_task, test_by_task, meta) -> "TaskSequence":
        tasks = []
        for info in meta["tasks"]:
            tid = info["task_id"]
            tasks.append(
                Task(
                    task_id=tid,
                    name=info.get("name", f"task_{tid}"),
                    class_ids=list(info["class_ids"]),
                    train_bags=list(train_by_task.get(tid, [])),
                    test_bags=list(test_by_task.get(tid, [])),
                )
            )
        return cls(tasks)


class Adam:
    """Adam over named parameters; gradients are handed in explicitly."""

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self, grads: dict):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class StepResult:
    total: float
    ce_current: float
    ce_replay: float | None
    cssl_current: float | None
    cssl_replay: float | None
    replay_pair: tuple | None


def _trainable(model: HitModel, projector: CsslProjector):
    params = list(model.named_parameters())
    params.extend((f"proj.{n}", p) for n, p in projector.named_parameters())
    return params


def _collect_grads(params):
    grads = {}
    for name, p in params:
        if p.grad is not None:
            grads[name] = p.grad.copy()
        p.grad = None
    return grads


def compute_step_grads(model, projector, bag, replay_bag, cfg: TrainConfig):
    """Loss, two backward passes, and the routed per-parameter gradients.

    The applied gradient is exactly lambda_pt * (classification gradient)
    plus the consistency gradient on patch-block parameters, and the plain
    sum everywhere else.
    """
    params = _trainable(model, projector)
    out = hit_forward(model, bag)
    ce_current = T.cross_entropy(out.logits, bag.label)
    replay_out = None
    ce_replay = None
    if replay_bag is not None:
        replay_out = hit_forward(model, replay_bag)
        if cfg.alpha > 0:
            ce_replay = T.cross_entropy(replay_out.logits, replay_bag.label)

    ce_total = ce_current
    if ce_replay is not None:
        ce_total = T.add(ce_current, T.scale(ce_replay, cfg.alpha))

    cssl_current = None
    cssl_replay = None
    cssl_total = None
    if cfg.beta > 0:
        cssl_current = cssl_loss(out.region_features, out.pt_last, projector)
        cssl_total = cssl_current
        if replay_out is not None:
            cssl_replay = cssl_loss(replay_out.region_features, replay_out.pt_last, projector)
            cssl_total = T.add(cssl_current, cssl_replay)
        cssl_total = T.scale(cssl_total, cfg.beta)

    total = ce_total.item() + (cssl_total.item() if cssl_total is not None else 0.0)

    T.backward(ce_total)
    g_ce = _collect_grads(params)
    g_cssl = {}
    if cssl_total is not None and cssl_total.requires_grad:
        T.backward(cssl_total)
        g_cssl = _collect_grads(params)

    applied = {}
    for name, p in params:
        g = g_ce.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif name.startswith("pt."):
            g = cfg.lambda_pt * g
        extra = g_cssl.get(name)
        if extra is not None:
            g = g + extra
        applied[name] = g

    result = StepResult(
        total=total,
        ce_current=ce_current.item(),
        ce_replay=ce_replay.item() if ce_replay is not None else None,
        cssl_current=cssl_current.item() if cssl_current is not None else None,
        cssl_replay=cssl_replay.item() if cssl_replay is not None else None,
        replay_pair=(replay_bag.task_id, replay_bag.label) if replay_bag is not None else None,
    )
    return applied, result


def _draw_replay(buffer, cfg: TrainConfig):
    if cfg.alpha == 0 and cfg.beta == 0:
        return None
    if cfg.replay_whole_bags:
        return buffer.select(buffer.rng)
    picked = buro.select(buffer, cfg.replay_bag_size, buffer.rng)
    if picked is None:
        return None
    records, _, _ = picked
    return buro.reorganize(records)


def _store_current(buffer, bag: FeatureBag, cfg: TrainConfig):
    if cfg.replay_whole_bags:
        buffer.insert(bag)
    else:
        for record in buro.breakup(bag, cfg.breakup_size, buffer.rng):
            buffer.insert(record)


def train_step(model, projector, bag, buffer, optimizer, cfg: TrainConfig) -> StepResult:
    """One full training step on one bag (replay, loss, routing, Adam, store)."""
    replay_bag = _draw_replay(buffer, cfg)
    applied, result = compute_step_grads(model, projector, bag, replay_bag, cfg)
    if not np.isfinite(result.total):
        raise NonFiniteLossError(
            f"non-finite loss {result.total} on sample {bag.sample_id}", sample_id=bag.sample_id
        )
    optimizer.step(applied)
    _store_current(buffer, bag, cfg)
    return result


def make_buffer(cfg: TrainConfig, mean_regions_per_bag: float):
    """The replay store the config asks for: region reservoir or whole-bag."""
    rng = random.Random(cfg.seed)
    if cfg.replay_whole_bags:
        cap = buro.bag_capacity_from_regions(cfg.buffer_capacity, mean_regions_per_bag)
        return buro.WholeBagBuffer(cap, rng)
    return buro.RehearsalBuffer(cfg.buffer_capacity, rng)


@dataclass
class EvalOutput:
    probabilities: np.ndarray  # [n, num_classes_total], zero outside the mask
    labels: np.ndarray
    task_ids: np.ndarray
    predictions: np.ndarray


def _masked_scores(logits: np.ndarray, mask_classes) -> tuple:
    z = np.full_like(logits, -np.inf)
    z[list(mask_classes)] = logits[list(mask_classes)]
    m = z.max()
    e = np.exp(z - m)
    return e / e.sum(), int(np.argmax(z))


def evaluate(model, bags, scenario, seen_classes, class_map, workers: int = 1) -> EvalOutput:
    """Score bags under the given scenario.

    class-incremental restricts predictions to every class seen so far;
    task-incremental restricts each sample to its own task's classes.
    """
    if scenario not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {scenario!r}")

    def logits_of(bag):
        with T.no_grad():
            return hit_forward(model, bag).logits.data

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            all_logits = list(pool.map(logits_of, bags))
    else:
        all_logits = [logits_of(bag) for bag in bags]

    probs, labels, task_ids, preds = [], [], [], []
    for bag, logits in zip(bags, all_logits):
        if scenario == "class-incremental":
            mask = seen_classes
        else:
            if bag.task_id not in class_map:
                raise ValueError(f"unknown task id {bag.task_id}")
            mask = class_map[bag.task_id]
        p, pred = _masked_scores(logits, mask)
        probs.append(p)
        labels.append(bag.label)
        task_ids.append(bag.task_id)
        preds.append(pred)
    return EvalOutput(
        probabilities=np.array(probs),
        labels=np.array(labels),
        task_ids=np.array(task_ids),
        predictions=np.array(preds),
    )


@dataclass
class RunResult:
    matrix: metrics.AccuracyMatrix
    stage_reports: list
    final_metrics: dict
    wall_clock_seconds: float
    checkpoint_paths: list = field(default_factory=list)


def _stage_metrics(pooled: EvalOutput, seen_classes, class_map) -> dict:
    seen = list(seen_classes)
    sliced = pooled.probabilities[:, seen]
    remap = {c: i for i, c in enumerate(seen)}
    mapped_labels = np.array([remap[int(y)] for y in pooled.labels])
    auc, per_class = metrics.auc_ovr(sliced, mapped_labels)
    return {
        "acc": metrics.accuracy(pooled.predictions, pooled.labels),
        "auc": auc,
        "masked_acc": metrics.masked_accuracy(
            pooled.probabilities, pooled.labels, pooled.task_ids, class_map
        ),
        "per_class_auc": {str(seen[i]): v for i, v in per_class.items()},
    }


def run_sequence(seq: TaskSequence, cfg: TrainConfig, model_cfg: HitConfig, out_dir=None) -> RunResult:
    """Train through the whole sequence, filling the accuracy matrix.

    With an output directory, also writes one checkpoint per stage, the
    accuracy-matrix CSV, the JSON run report, and a final buffer snapshot.
    """
    if model_cfg.num_classes_total < seq.num_classes:
        raise ConfigurationError(
            f"model head covers {model_cfg.num_classes_total} classes, "
            f"sequence needs {seq.num_classes}"
        )
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    model = HitModel(model_cfg, rng)
    projector = CsslProjector(
        model_cfg.channels, cfg.proj_dim or model_cfg.channels, rng
    )
    optimizer = Adam(
        _trainable(model, projector),
        lr=cfg.learning_rate,
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        eps=cfg.adam_eps,
    )
    train_bags = [bag for task in seq for bag in task.train_bags]
    mean_regions = float(np.mean([bag.num_regions for bag in train_bags])) if train_bags else 1.0
    buffer = make_buffer(cfg, mean_regions)
    class_map = seq.class_map

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    t_count = len(seq)
    matrix = np.zeros((t_count, t_count))
    stage_reports = []
    checkpoint_paths = []

    for stage, task in enumerate(seq):
        losses = []
        for _ in range(cfg.epochs_per_task):
            order = rng.permutation(len(task.train_bags))
            pending = []
            for idx in order:
                bag = task.train_bags[int(idx)]
                replay_bag = _draw_replay(buffer, cfg)
                applied, result = compute_step_grads(model, projector, bag, replay_bag, cfg)
                if not np.isfinite(result.total):
                    raise NonFiniteLossError(
                        f"non-finite loss {result.total} on sample {bag.sample_id} "
                        f"during task {task.task_id}",
                        task_id=task.task_id,
                        sample_id=bag.sample_id,
                    )
                losses.append(result.total)
                pending.append(applied)
                _store_current(buffer, bag, cfg)
                if len(pending) == cfg.batch_size:
                    optimizer.step(_mean_grads(pending))
                    pending = []
            if pending:
                optimizer.step(_mean_grads(pending))

        seen = seq.seen_classes(stage)
        stage_evals = [
            evaluate(model, t.test_bags, cfg.scenario, seen, class_map, cfg.eval_workers)
            for t in seq
        ]
        for j, ev in enumerate(stage_evals):
            matrix[stage, j] = metrics.accuracy(ev.predictions, ev.labels)
        pooled = _pool_evals([stage_evals[j] for j in range(stage + 1)])
        report = {
            "after_task": stage,
            "task_name": task.name,
            "per_task_accuracy": [float(x) for x in matrix[stage]],
            "mean_train_loss": float(np.mean(losses)) if losses else None,
            "buffer_size": len(buffer),
            **_stage_metrics(pooled, seen, class_map),
        }
        stage_reports.append(report)
        if out is not None:
            ckpt = out / f"stage_{stage:02d}.csck"
            save_checkpoint(ckpt, model, projector, meta={"seen_classes": len(seen), "stage": stage})
            checkpoint_paths.append(str(ckpt))

    acc_matrix = metrics.AccuracyMatrix(matrix)
    final_eval = _pool_evals(
        [
            evaluate(model, t.test_bags, cfg.scenario, seq.seen_classes(t_count - 1), class_map, cfg.eval_workers)
            for t in seq
        ]
    )
    final = _stage_metrics(final_eval, seq.seen_classes(t_count - 1), class_map)
    final["bwt"] = metrics.bwt(acc_matrix)
    final["forgetting"] = metrics.forgetting(acc_matrix)
    final["final_mean_acc"] = float(np.mean(matrix[-1]))
    final["accuracy_matrix"] = [[float(x) for x in row] for row in matrix]
    final["avg_acc"] = float(np.mean([r["acc"] for r in stage_reports]))
    final["avg_auc"] = float(np.mean([r["auc"] for r in stage_reports]))
    final["avg_masked_acc"] = float(np.mean([r["masked_acc"] for r in stage_reports]))

    wall = time.perf_counter() - started
    result = RunResult(
        matrix=acc_matrix,
        stage_reports=stage_reports,
        final_metrics=final,
        wall_clock_seconds=wall,
        checkpoint_paths=checkpoint_paths,
    )
    if out is not None:
        (out / "accuracy_matrix.csv").write_text(acc_matrix.to_csv())
        buro.save_buffer(buffer, out / "buffer_final.csbf")
        report = {
            "config": cfg.to_dict(),
            "model": model_cfg.to_dict(),
            "stages": stage_reports,
            "final": final,
            "wall_clock_seconds": wall,
        }
        (out / "run_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return result


def _mean_grads(grad_dicts):
    if len(grad_dicts) == 1:
        return grad_dicts[0]
    out = {}
    for name in grad_dicts[0]:
        acc = grad_dicts[0][name].copy()
        for d in grad_dicts[1:]:
            acc += d[name]
        out[name] = acc / len(grad_dicts)
    return out


def _pool_evals(evals) -> EvalOutput:
    return EvalOutput(
        probabilities=np.concatenate([e.probabilities for e in evals]),
        labels=np.concatenate([e.labels for e in evals]),
        task_ids=np.concatenate([e.task_ids for e in evals]),
        predictions=np.concatenate([e.predictions for e in evals]),
    )
