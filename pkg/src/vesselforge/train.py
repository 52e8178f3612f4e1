"""Adam training on image patches with FOV-masked cross-entropy.

Every batch is a pure function of ``(seed, iteration)``, so a run interrupted
after a checkpoint and resumed from it follows the same trajectory as an
uninterrupted one.
"""

from __future__ import annotations

import csv
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import net
from . import tensor as T
from .augment import PATCH_SIZE, CenterSampler, Patch, augment, extract_patch, patch_rng, random_plan
from .data import FundusSample
from .preprocess import gcn

PROB_FLOOR = 1e-7
LR_SCHEDULES = ("exp", "cosine", "constant")
# the exponential schedule ends at this fraction of the initial step
LR_FINAL_FRACTION = 0.01
PREFETCH_DEPTH = 4
# 12000 iterations of 32 patches spread over 9 epochs
DEFAULT_EPOCH_PATCHES = 12000 * 32 // 9


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 12000
    max_epochs: int = 9
    batch_size: int = 32
    seed: int = 0
    checkpoint_every: int = 1000
    lr_schedule: str = "exp"
    amsgrad: bool = True

    def __post_init__(self):
        if not isinstance(self.amsgrad, bool):
            raise ValueError(f"amsgrad must be true or false, got {self.amsgrad!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        for name in ("max_iters", "max_epochs", "batch_size", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    vmax: dict = field(default_factory=dict)  # running max of v, used when amsgrad is on

    @classmethod
    def zeros_like(cls, params: net.ModelParams) -> "AdamState":
        arrays = params.arrays()
        return cls(
            {k: np.zeros_like(a) for k, a in arrays.items()},
            {k: np.zeros_like(a) for k, a in arrays.items()},
            0,
            {k: np.zeros_like(a) for k, a in arrays.items()},
        )

    def extra_tensors(self) -> dict:
        out = {f"adam.m/{k}": a for k, a in self.m.items()}
        out.update({f"adam.v/{k}": a for k, a in self.v.items()})
        out.update({f"adam.vmax/{k}": a for k, a in self.vmax.items()})
        return out

    @classmethod
    def from_extra(cls, extra: dict, params: net.ModelParams, t: int) -> "AdamState":
        state = cls.zeros_like(params)
        for k in state.m:
            for buf in ("m", "v", "vmax"):
                if f"adam.{buf}/{k}" not in extra:
                    raise TrainingError(f"checkpoint lacks optimizer buffers for {k}")
                getattr(state, buf)[k] = extra[f"adam.{buf}/{k}"].astype(state.m[k].dtype)
        state.t = t
        return state


# ---------------------------------------------------------------------------
# loss and optimizer


def loss_ce(probs, labels, fov=None) -> T.Tensor:
    """Mean over FOV pixels of ``-log p(true class)``, with p clamped to [1e-7, 1 - 1e-7].

    When ``probs`` is the output of ``softmax_channel`` the loss is evaluated
    from the logits (see ``tensor.softmax_nll``).
    """
    probs = T.as_tensor(probs)
    labels = np.asarray(labels)
    if probs.data.ndim != 4 or probs.shape[1] != 2:
        raise T.ShapeError(f"probs must be N x 2 x H x W, got {probs.shape}")
    expect = (probs.shape[0],) + probs.shape[2:]
    if labels.shape != expect:
        raise T.ShapeError(f"labels shape {labels.shape} does not match probs {expect}")
    mask = np.ones(expect) if fov is None else np.asarray(fov)
    if mask.shape != expect:
        raise T.ShapeError(f"fov shape {mask.shape} does not match probs {expect}")
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise ValueError("loss undefined: empty field of view")
    keep = (mask != 0).astype(np.float64)
    if probs.op == "softmax":
        # straight from the logits: stable, and saturated pixels keep a gradient
        return T.softmax_nll(probs.parents[0], labels != 0, keep / count, PROB_FLOOR)
    vessel = (labels != 0).astype(probs.dtype)
    p_true = T.add(T.mul(T.take(probs, 1), vessel), T.mul(T.take(probs, 0), 1.0 - vessel))
    nll = T.log(T.clip(p_true, PROB_FLOOR, 1.0 - PROB_FLOOR))
    return T.mul(T.sum(T.mul(nll, (mask != 0).astype(probs.dtype))), -1.0 / count)


def scheduled_lr(cfg: TrainConfig, iteration: int, cap: int) -> float:
    """Step size for ``iteration`` of a run that stops at ``cap``.

    ``exp`` decays geometrically from ``cfg.lr`` to ``LR_FINAL_FRACTION``
    of it at the cap; ``cosine`` anneals towards zero. Full-batch runs sit at
    the edge of stability: the loss saws between iterations and, with a
    step that stays large while the logits keep growing, eventually blows up.
    """
    frac = min(iteration, cap) / cap
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if cfg.lr_schedule == "exp":
        return cfg.lr * LR_FINAL_FRACTION ** frac
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def adam_step(params: net.ModelParams, grads: dict, state: AdamState, cfg: TrainConfig,
              lr: float | None = None) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``; ``lr`` overrides ``cfg.lr``.

    With ``cfg.amsgrad`` the denominator uses the running maximum of the
    second moment, so steps shrink along with the gradients once the loss
    is small instead of staying near ``lr``.
    """
    for path in params.tensors:
        g = grads.get(path)
        if g is None:
            raise TrainingError(f"no gradient for parameter {path}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {path}")
    state.t += 1
    c1 = 1.0 - cfg.beta1 ** state.t
    c2 = 1.0 - cfg.beta2 ** state.t
    for path, tensor in params.tensors.items():
        g = grads[path].astype(tensor.dtype, copy=False)
        m, v = state.m[path], state.v[path]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        if cfg.amsgrad:
            v = np.maximum(state.vmax[path], v, out=state.vmax[path])
        step = ((cfg.lr if lr is None else lr) / c1) * m / (np.sqrt(v / c2) + cfg.eps)
        tensor.data -= step.astype(tensor.dtype, copy=False)


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    images: np.ndarray  # N x 3 x P x P float32
    labels: np.ndarray  # N x P x P uint8
    fov: np.ndarray  # N x P x P uint8


def stack_patches(patches: list[Patch]) -> Batch:
    return Batch(
        np.stack([p.data.transpose(2, 0, 1) for p in patches]).astype(np.float32),
        np.stack([p.label for p in patches]).astype(np.uint8),
        np.stack([p.fov for p in patches]).astype(np.uint8),
    )


class FixedPatchSet:
    """A fixed list of patches, visited in a reshuffled order every epoch."""

    def __init__(self, patches: list[Patch], augment: bool = False, normalize: bool = True):
        if not patches:
            raise ValueError("patch set is empty")
        self.patches = patches
        self.augment = augment
        self.normalize = normalize

    def __len__(self) -> int:
        return len(self.patches)

    def _order(self, seed: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([seed, epoch]).permutation(len(self.patches))

    def batch(self, iteration: int, batch_size: int, seed: int) -> Batch:
        out = []
        for slot in range(batch_size):
            pos = iteration * batch_size + slot
            epoch, offset = divmod(pos, len(self.patches))
            p = self.patches[int(self._order(seed, epoch)[offset])]
            if self.augment:
                p = augment(p, random_plan(patch_rng(seed, iteration, slot)))
            elif self.normalize:
                p = Patch(gcn(p.data), p.label, p.center, p.fov)
            out.append(p)
        return stack_patches(out)


class PatchStream:
    """Class-balanced random patches drawn from whole images, augmented on the fly."""

    def __init__(self, samples: list[FundusSample], size: int = PATCH_SIZE, augment: bool = True,
                 epoch_patches: int = DEFAULT_EPOCH_PATCHES):
        if not samples:
            raise ValueError("dataset is empty")
        self.samplers = [CenterSampler(s, size) for s in samples]
        self.size = size
        self.augment = augment
        self.epoch_patches = epoch_patches

    def __len__(self) -> int:
        return self.epoch_patches

    def batch(self, iteration: int, batch_size: int, seed: int) -> Batch:
        out = []
        for slot in range(batch_size):
            rng = patch_rng(seed, iteration, slot)
            sampler = self.samplers[int(rng.integers(len(self.samplers)))]
            center = sampler.draw(rng, vessel=(iteration * batch_size + slot) % 2 == 0)
            p = extract_patch(sampler.sample, center, self.size)
            if self.augment:
                p = augment(p, random_plan(rng))
            else:
                p = Patch(gcn(p.data), p.label, p.center, p.fov)
            out.append(p)
        return stack_patches(out)


def _prefetch(dataset, start: int, stop: int, cfg: TrainConfig):
    """Yield batches for ``start..stop-1`` built on a worker thread.

    A semaphore caps batches that are built but not yet consumed at
    ``PREFETCH_DEPTH``.
    """
    q: queue.Queue = queue.Queue()
    slots = threading.Semaphore(PREFETCH_DEPTH)
    halt = threading.Event()

    def work():
        try:
            for it in range(start, stop):
                while not slots.acquire(timeout=0.1):
                    if halt.is_set():
                        return
                if halt.is_set():
                    return
                q.put(dataset.batch(it, cfg.batch_size, cfg.seed))
        except BaseException as exc:  # handed to the consumer
            q.put(exc)

    worker = threading.Thread(target=work, daemon=True)
    worker.start()
    try:
        for _ in range(start, stop):
            item = q.get()
            if isinstance(item, BaseException):
                raise item
            slots.release()
            yield item
    finally:
        halt.set()
        worker.join()


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: net.ModelParams
    state: AdamState
    log: list  # (iter, loss, seconds)
    checkpoints: list


def iteration_cap(dataset, cfg: TrainConfig) -> int:
    per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    return min(cfg.max_iters, cfg.max_epochs * per_epoch)


def train_step(params: net.ModelParams, batch: Batch, state: AdamState, cfg: TrainConfig,
               lr: float | None = None) -> float:
    params.zero_grad()
    loss = loss_ce(net.forward(params, batch.images), batch.labels, batch.fov)
    T.backward(loss)
    adam_step(params, {k: t.grad for k, t in params.tensors.items()}, state, cfg, lr)
    return loss.item()


def checkpoint_header(cfg: TrainConfig, state: AdamState, run_info: dict | None = None) -> dict:
    header = {"iteration": state.t, "train_config": cfg.to_dict()}
    if run_info:
        header["run"] = dict(run_info)
    return header


def resume_from(path):
    """Load ``(params, state, cfg)`` from a checkpoint written by :func:`train`."""
    params, header, extra = net.load_checkpoint(path)
    if not header or "iteration" not in header:
        raise TrainingError(f"{path}: checkpoint carries no training state")
    state = AdamState.from_extra(extra, params, int(header["iteration"]))
    return params, state, TrainConfig.from_dict(header["train_config"])


def train(params: net.ModelParams, dataset, cfg: TrainConfig, out_dir=None, state: AdamState | None = None,
          stop_at: int | None = None, prefetch: bool = True, run_info: dict | None = None) -> TrainResult:
    """Run Adam until the iteration or epoch cap (or ``stop_at``), checkpointing into ``out_dir``.

    ``state`` continues a previous run; its step counter is the next iteration index.
    ``run_info`` (JSON-serializable) is stored in every checkpoint header so a
    resumed run can rebuild the same data stream.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    state = state or AdamState.zeros_like(params)
    cap = iteration_cap(dataset, cfg)
    stop = cap if stop_at is None else min(cap, stop_at)
    out = Path(out_dir) if out_dir is not None else None
    log_file = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        fresh = state.t == 0 or not log_path.exists()
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(["iter", "loss", "seconds"])

    log, saved = [], []
    start_time = time.perf_counter()
    batches = _prefetch(dataset, state.t, stop, cfg) if prefetch else (
        dataset.batch(it, cfg.batch_size, cfg.seed) for it in range(state.t, stop))
    try:
        for batch in batches:
            it = state.t
            loss = train_step(params, batch, state, cfg, scheduled_lr(cfg, it, cap))
            row = (it, loss, time.perf_counter() - start_time)
            log.append(row)
            if writer is not None:
                writer.writerow([it, f"{loss:.6f}", f"{row[2]:.3f}"])
            if out is not None and (state.t % cfg.checkpoint_every == 0 or state.t == cap):
                path = out / f"ckpt_{state.t:06d}.vslf"
                net.save_checkpoint(path, params, checkpoint_header(cfg, state, run_info), state.extra_tensors())
                saved.append(path)
        if out is not None and state.t == cap:
            final = out / "final.vslf"
            net.save_checkpoint(final, params, checkpoint_header(cfg, state, run_info), state.extra_tensors())
            saved.append(final)
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(params, state, log, saved)


def pixel_accuracy(params: net.ModelParams, batch: Batch) -> float:
    """Fraction of FOV pixels whose argmax class matches the label."""
    prob = net.predict_proba(params, batch.images)
    pred = prob >= 0.5
    inside = batch.fov != 0
    return float(np.mean(pred[inside] == (batch.labels[inside] != 0)))
