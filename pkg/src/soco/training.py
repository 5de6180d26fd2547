"""Object-level contrastive objective, EMA target, LARS and the training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from soco import checkpoint
from soco.config import RunConfig
from soco.errors import InvalidInputError, NumericError
from soco.network import LEVELS, Params, init_params, leaves, object_embed, pad_to_stride, target_subtree
from soco.numerics import Tensor, backward, constant, ops
from soco.proposals import BBox, sample_proposals
from soco.views import View, augment, build_views

log = logging.getLogger(__name__)

# Stream tags for the per-sample generators.
STREAM_SAMPLE, STREAM_VIEWS, STREAM_AUG = 0, 1, 2
EPOCH_TAG = 0xE90C


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def pair_loss(v, v_pos) -> float:
    """``-2 cos(v, v_pos)`` for two single embeddings."""
    v = np.asarray(v, dtype=np.float64).ravel()
    v_pos = np.asarray(v_pos, dtype=np.float64).ravel()
    nv, np_ = np.linalg.norm(v), np.linalg.norm(v_pos)
    if nv == 0 or np_ == 0 or not np.isfinite(nv * np_):
        raise NumericError("pair_loss: zero or non-finite embedding norm")
    return float(-2.0 * np.dot(v, v_pos) / (nv * np_))


def proposal_loss(v, targets: Sequence) -> float:
    """Loss of one proposal: its online embedding against each target view."""
    return float(sum(pair_loss(v, t) for t in targets))


def image_loss(losses: Sequence[float]) -> float:
    if len(losses) == 0:
        raise InvalidInputError("image_loss needs at least one proposal")
    return float(np.mean(losses))


def _cosines(online: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise cosine between online tensor rows and constant target rows."""
    for arr, what in ((online.data, "online"), (target, "target")):
        norms = np.linalg.norm(arr, axis=1)
        if not np.all(norms > 0) or not np.all(np.isfinite(norms)):
            raise NumericError(f"zero or non-finite {what} embedding norm")
    t = target / np.linalg.norm(target, axis=1, keepdims=True)
    return ops.sum(ops.mul(ops.l2_normalize(online, axis=1), constant(t)), axis=1)


@dataclass
class LossTerms:
    loss: Tensor
    cosines: np.ndarray  # every positive-pair cosine that entered the loss
    online_embeddings: np.ndarray  # predictor outputs, all views stacked


def symmetrized_loss(online: Mapping[str, Tensor], target: Mapping[str, np.ndarray],
                     image_of_row: np.ndarray, n_images: int) -> LossTerms:
    """Batch mean over images of ``L + L~``.

    ``online[v]`` / ``target[v]`` hold one row per (image, proposal) in the
    same order for every view.  In ``L`` the first view is the online query
    and every other view a target; ``L~`` swaps the roles.  Each image's
    term is the mean over its proposals.
    """
    names = list(online)
    if len(names) < 2:
        raise InvalidInputError("need at least two views")
    counts = np.bincount(image_of_row, minlength=n_images).astype(np.float64)
    if np.any(counts == 0):
        raise InvalidInputError("every image needs at least one proposal")
    weights = constant(-2.0 / (n_images * counts[image_of_row]))
    first, rest = names[0], names[1:]
    pairs = [(first, r) for r in rest] + [(r, first) for r in rest]
    total = None
    cos_all = []
    for q, t in pairs:
        c = _cosines(online[q], target[t])
        cos_all.append(c.data)
        term = ops.sum(ops.mul(c, weights))
        total = term if total is None else ops.add(total, term)
    return LossTerms(total, np.concatenate(cos_all),
                     np.concatenate([online[n].data for n in names], axis=0))


def embedding_std(z: np.ndarray) -> float:
    """Mean per-dimension std of l2-normalised embeddings (0 under collapse)."""
    zn = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    return float(zn.std(axis=0).mean())


# ---------------------------------------------------------------------------
# target network and optimiser
# ---------------------------------------------------------------------------

def ema_update(theta: Mapping[str, np.ndarray], xi: Mapping[str, np.ndarray], tau: float) -> Params:
    """``tau * xi + (1 - tau) * theta`` for every target tensor; predictor ignored."""
    names = set(xi)
    online = {k for k in theta if not k.startswith("predictor.")}
    if names != online:
        missing = sorted(names ^ online)[:5]
        raise InvalidInputError(f"ema_update: parameter trees differ ({', '.join(missing)})")
    out = {}
    for k, x in xi.items():
        if theta[k].shape != x.shape:
            raise InvalidInputError(f"ema_update: shape mismatch for {k}")
        out[k] = tau * x + (1.0 - tau) * theta[k]
    return out


def momentum_schedule(step: int, total_steps: int, tau0: float) -> float:
    if total_steps <= 0:
        return 1.0
    return 1.0 - (1.0 - tau0) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


def peak_lr(base_lr: float, batch_size: int) -> float:
    return base_lr * batch_size / 256.0


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float, batch_size: int) -> float:
    """Linear warmup to ``base_lr * batch_size / 256`` then cosine decay to 0."""
    if warmup_steps > total_steps:
        raise InvalidInputError("warmup_steps exceeds total_steps")
    peak = peak_lr(base_lr, batch_size)
    if step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps == warmup_steps:
        return 0.0 if step >= total_steps else peak
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def is_excluded(name: str, value: np.ndarray) -> bool:
    """Biases and normalisation parameters skip weight decay and adaptation."""
    return value.ndim <= 1


def lars_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              slots: Mapping[str, np.ndarray], lr: float, weight_decay: float = 1e-5,
              trust_coeff: float = 1e-3, momentum: float = 0.9,
              exclude: Callable[[str, np.ndarray], bool] = is_excluded) -> tuple[Params, Params]:
    """One LARS update; returns new parameter and momentum dicts.

    Nothing is written unless every tensor's update is finite.
    """
    new_params, new_slots = {}, {}
    for name, theta in params.items():
        g = grads[name]
        skip = exclude(name, theta)
        if not skip:
            g = g + weight_decay * theta
        local = 1.0
        with np.errstate(over="ignore", invalid="ignore"):  # checked just below
            if not skip:
                pn, gn = np.linalg.norm(theta), np.linalg.norm(g)
                if pn > 0 and gn > 0:
                    local = trust_coeff * pn / gn
            m = momentum * slots.get(name, 0.0) + g * (local * lr)
        if not np.all(np.isfinite(m)):
            raise NumericError(f"non-finite LARS update for {name}")
        new_slots[name] = np.asarray(m, dtype=np.float64)
        new_params[name] = theta - m
    return new_params, new_slots


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    params: Params
    buffers: Params
    target: Params
    slots: Params
    step: int
    total_steps: int
    seed: int

    @classmethod
    def initial(cls, cfg: RunConfig) -> "TrainState":
        rng = np.random.default_rng([cfg.seed, 0x1417])
        params, buffers = init_params(cfg.model, rng)
        slots = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(params, buffers, target_subtree(params), slots, 0, cfg.train.steps, cfg.seed)

    def to_entries(self) -> dict[str, np.ndarray]:
        entries = {}
        for prefix, tree in (("online", self.params), ("buffers", self.buffers),
                             ("target", self.target), ("lars", self.slots)):
            entries.update({f"{prefix}.{k}": v for k, v in tree.items()})
        entries["meta.step"] = np.array(float(self.step))
        entries["meta.total_steps"] = np.array(float(self.total_steps))
        entries["meta.seed"] = np.array(float(self.seed))
        return entries

    @classmethod
    def from_entries(cls, entries: Mapping[str, np.ndarray]) -> "TrainState":
        trees: dict[str, Params] = {"online": {}, "buffers": {}, "target": {}, "lars": {}}
        for name, value in entries.items():
            prefix, _, rest = name.partition(".")
            if prefix in trees:
                trees[prefix][rest] = value
        try:
            step = int(entries["meta.step"])
            total = int(entries["meta.total_steps"])
            seed = int(entries["meta.seed"])
        except KeyError as exc:
            raise InvalidInputError(f"checkpoint lacks {exc.args[0]}") from None
        return cls(trees["online"], trees["buffers"], trees["target"], trees["lars"], step, total, seed)


def checksum(tree: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(tree):
        h.update(k.encode())
        h.update(np.ascontiguousarray(tree[k], dtype=np.float64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray  # CHW in [0, 1], original resolution
    proposals: list[BBox]  # filtered proposals in original coordinates


@dataclass
class PreparedImage:
    views: dict[str, View]
    ids: list[int]


def sample_rng(seed: int, step: int, image_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, image_index, stream])


def prepare_image(sample: Sample, cfg: RunConfig, step: int, image_index: int) -> PreparedImage:
    """Sample K proposals, build the views and augment them; pure in its arguments."""
    _, h, w = sample.image.shape
    boxes = sample_proposals(sample.proposals, cfg.proposals.K,
                             sample_rng(cfg.seed, step, image_index, STREAM_SAMPLE), w, h)
    views = build_views(sample.image, boxes, cfg.views, sample_rng(cfg.seed, step, image_index, STREAM_VIEWS),
                        cfg.proposals.jitter_prob, cfg.proposals.jitter_range, cfg.proposals.jitter_shared)
    out = {}
    for j, (name, view) in enumerate(views.items()):
        aug = cfg.aug_online if name == "v1" else cfg.aug_target
        out[name] = augment(view, sample_rng(cfg.seed, step, image_index, STREAM_AUG + j), aug)
    ids = [i for i, _ in out["v1"].boxes]
    for view in out.values():
        if [i for i, _ in view.boxes] != ids:
            raise AssertionError("views disagree on proposal ids")
    return PreparedImage(out, ids)


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    return max(1, math.ceil(n_images / batch_size))


def batch_indices(seed: int, step: int, n_images: int, batch_size: int) -> np.ndarray:
    """Images for ``step``: consecutive slices of a per-epoch permutation."""
    spe = steps_per_epoch(n_images, batch_size)
    epoch, pos = divmod(step, spe)
    perm = np.random.default_rng([seed, EPOCH_TAG, epoch]).permutation(n_images)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def prepare_batch(samples: Sequence[Sample], cfg: RunConfig, step: int) -> list[PreparedImage]:
    idx = batch_indices(cfg.seed, step, len(samples), cfg.train.batch_size)
    return [prepare_image(samples[i], cfg, step, int(i)) for i in idx]


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    state: TrainState
    metrics: dict


def _view_batch(batch: Sequence[PreparedImage], name: str):
    images = pad_to_stride(np.stack([p.views[name].image for p in batch]))
    boxes = [[b for _, b in p.views[name].boxes] for p in batch]
    return images, boxes


def compute_loss(state_params: Mapping[str, Tensor], target: Mapping[str, np.ndarray],
                 buffers: Params | None, batch: Sequence[PreparedImage], cfg: RunConfig):
    """Forward every view through both branches and build the symmetrised loss."""
    names = list(batch[0].views)
    image_of_row = np.concatenate([np.full(len(p.ids), n) for n, p in enumerate(batch)])
    online, tgt, levels = {}, {}, []
    for name in names:
        images, boxes = _view_batch(batch, name)
        z, lv = object_embed(state_params, images, boxes, cfg.model, "online", buffers=buffers)
        online[name] = z
        levels.extend(lv)
        zt, _ = object_embed(target, images, boxes, cfg.model, "target")
        tgt[name] = zt.data
    terms = symmetrized_loss(online, tgt, image_of_row, len(batch))
    return terms, levels


def train_step(state: TrainState, batch: Sequence[PreparedImage], cfg: RunConfig,
               warmup_steps: int) -> StepResult:
    step = state.step
    lr = lr_schedule(step, state.total_steps, warmup_steps, cfg.optim.base_lr, cfg.train.batch_size)
    tau = momentum_schedule(step, state.total_steps, cfg.optim.tau0)
    buffers = {k: v.copy() for k, v in state.buffers.items()}
    theta = leaves(state.params)
    terms, levels = compute_loss(theta, state.target, buffers, batch, cfg)
    loss = float(terms.loss.data)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss at step {step}")
    names = list(theta)
    grads = dict(zip(names, backward(terms.loss, [theta[k] for k in names])))
    params, slots = lars_step(state.params, grads, state.slots, lr, cfg.optim.weight_decay,
                              cfg.optim.trust_coeff, cfg.optim.momentum)
    target = ema_update(params, state.target, tau)
    hist = [int(sum(1 for lv in levels if lv == level)) for level in LEVELS]
    metrics = {"step": step, "loss": loss, "lr": lr, "tau": tau,
               "mean_pos_cosine": float(terms.cosines.mean()),
               "embed_std": embedding_std(terms.online_embeddings),
               "level_histogram": hist}
    new_state = TrainState(params, buffers, target, slots, step + 1, state.total_steps, state.seed)
    return StepResult(new_state, metrics)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

class TrainingAborted(Exception):
    """Raised after a numeric failure; carries the checkpoint written on the way out."""

    def __init__(self, message: str, checkpoint_path: Path):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


def _batches(samples, cfg: RunConfig, start: int, stop: int) -> Iterator[list[PreparedImage]]:
    if cfg.train.prefetch <= 0:
        for step in range(start, stop):
            yield prepare_batch(samples, cfg, step)
        return
    q: queue.Queue = queue.Queue(maxsize=cfg.train.prefetch)
    stop_flag = threading.Event()

    def produce():
        for step in range(start, stop):
            if stop_flag.is_set():
                return
            try:
                item = prepare_batch(samples, cfg, step)
            except Exception as exc:  # handed to the consumer
                item = exc
            while not stop_flag.is_set():
                try:
                    q.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        for _ in range(start, stop):
            item = q.get()
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop_flag.set()
        worker.join()


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"ckpt_{step:06d}.soco"


def latest_checkpoint(out_dir: Path) -> Path | None:
    found = sorted(Path(out_dir).glob("ckpt_*.soco"))
    return found[-1] if found else None


def _truncate_metrics(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        if line.strip() and json.loads(line)["step"] < step:
            keep.append(line)
    path.write_text("".join(line + "\n" for line in keep))


def train_loop(samples: Sequence[Sample], cfg: RunConfig, out_dir: str | Path,
               resume: str | Path | None = None) -> TrainState:
    """Run ``cfg.train.steps`` steps, logging metrics and checkpointing.

    With ``resume`` the state is restored from that checkpoint and the
    metrics log is cut back to the steps that precede it, so the finished
    log matches an uninterrupted run line for line.
    """
    if not samples:
        raise InvalidInputError("empty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    if resume is not None:
        state = TrainState.from_entries(checkpoint.load(resume))
        if state.total_steps != cfg.train.steps or state.seed != cfg.seed:
            raise InvalidInputError("checkpoint was written under a different schedule or seed")
        _truncate_metrics(metrics_path, state.step)
    else:
        state = TrainState.initial(cfg)
        metrics_path.write_text("")
    warmup = int(round(cfg.optim.warmup_epochs * steps_per_epoch(len(samples), cfg.train.batch_size)))
    warmup = min(warmup, state.total_steps)
    every = cfg.train.checkpoint_every
    with metrics_path.open("a") as fh:
        for batch in _batches(samples, cfg, state.step, state.total_steps):
            try:
                result = train_step(state, batch, cfg, warmup)
            except NumericError as exc:
                path = checkpoint_path(out, state.step)
                checkpoint.save(path, state.to_entries())
                raise TrainingAborted(f"step {state.step}: {exc}", path) from exc
            state = result.state
            fh.write(json.dumps(result.metrics) + "\n")
            fh.flush()
            log.info("step %d loss %.4f cos %.3f", result.metrics["step"], result.metrics["loss"],
                     result.metrics["mean_pos_cosine"])
            if (every > 0 and state.step % every == 0) or state.step == state.total_steps:
                checkpoint.save(checkpoint_path(out, state.step), state.to_entries())
    return state


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
