"""Optimization: Adam, plateau scheduling, checkpoints, gradient checking.

The training protocol: Adam with a fixed initial learning rate, halved after
``lr_patience`` consecutive epochs without validation improvement; training
stops after ``early_stop_patience`` consecutive epochs without improvement.
The best-validation checkpoint is persisted.  Runs are single-threaded and
bitwise deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from .config import Config
from .corpus import ConceptVocabulary, CorpusSplit, Vocabulary, batch_iter
from .model import RetrievalModel

CHECKPOINT_MAGIC = b"SKCP"
CHECKPOINT_VERSION = 1


class TrainError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def adam_step(
    param: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> int:
    """One bias-corrected Adam update, in place on param/m/v.  Returns new step."""
    if param.shape != grad.shape:
        raise ValueError("parameter/gradient shape mismatch")
    if not torch.isfinite(grad).all():
        raise TrainError("non-finite gradient encountered")
    step += 1
    m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
    v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    param.add_(-lr * m_hat / (v_hat.sqrt() + eps))
    return step


class Adam:
    """Adam over a model's named parameters with serializable state."""

    def __init__(
        self,
        model: torch.nn.Module,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.moments: dict[str, tuple[Tensor, Tensor]] = {
            name: (torch.zeros_like(p), torch.zeros_like(p))
            for name, p in model.named_parameters()
        }

    def step(self, model: torch.nn.Module, lr: float) -> None:
        new_step = self.step_count + 1
        with torch.no_grad():
            for name, p in model.named_parameters():
                if p.grad is None:
                    continue
                m, v = self.moments[name]
                adam_step(
                    p, p.grad, m, v, self.step_count, lr,
                    self.beta1, self.beta2, self.eps,
                )
        self.step_count = new_step

    def zero_grad(self, model: torch.nn.Module) -> None:
        for p in model.parameters():
            p.grad = None


# ---------------------------------------------------------------------------
# plateau control
# ---------------------------------------------------------------------------

@dataclass
class PlateauController:
    """Tracks a validation objective; decides halvings and early stop.

    Two independent streaks of consecutive non-improving epochs: the halving
    streak resets after each halving, the stop streak only on improvement, so
    a flat trace halves the rate at epochs 3, 6, 9, ... and stops at 10 under
    the default patience values.
    """

    lr: float
    mode: str = "max"             # max (e.g. SumR) or min (loss)
    lr_patience: int = 3
    stop_patience: int = 10
    best: float = field(default=None)  # type: ignore[assignment]
    lr_streak: int = 0
    stop_streak: int = 0

    def update(self, value: float) -> dict:
        """Feed one epoch's objective; returns {improved, halved, stop}."""
        improved = self.best is None or (
            value > self.best if self.mode == "max" else value < self.best
        )
        halved = False
        if improved:
            self.best = value
            self.lr_streak = 0
            self.stop_streak = 0
        else:
            self.lr_streak += 1
            self.stop_streak += 1
            if self.lr_streak >= self.lr_patience:
                self.lr /= 2.0
                self.lr_streak = 0
                halved = True
        return {
            "improved": improved,
            "halved": halved,
            "stop": self.stop_streak >= self.stop_patience,
        }

    def state(self) -> dict:
        return {
            "lr": self.lr,
            "mode": self.mode,
            "lr_patience": self.lr_patience,
            "stop_patience": self.stop_patience,
            "best": self.best,
            "lr_streak": self.lr_streak,
            "stop_streak": self.stop_streak,
        }


# ---------------------------------------------------------------------------
# training log
# ---------------------------------------------------------------------------

@dataclass
class LogEntry:
    epoch: int
    train_loss: float
    val_objective: float
    lr: float


@dataclass
class TrainingLog:
    entries: list[LogEntry] = field(default_factory=list)
    lr_events: list[tuple[int, float]] = field(default_factory=list)  # (epoch, new lr)
    best_epoch: int = -1
    best_value: float = float("nan")
    stopped_epoch: int = -1
    wall_clock_s: float = 0.0

    def canonical_json(self) -> str:
        """Deterministic serialization; wall-clock time is excluded."""
        payload = {
            "entries": [
                [e.epoch, repr(e.train_loss), repr(e.val_objective), repr(e.lr)]
                for e in self.entries
            ],
            "lr_events": [[ep, repr(lr)] for ep, lr in self.lr_events],
            "best_epoch": self.best_epoch,
            "best_value": repr(self.best_value),
            "stopped_epoch": self.stopped_epoch,
        }
        return json.dumps(payload, sort_keys=True)

    def save(self, path: str) -> None:
        data = json.loads(self.canonical_json())
        data["wall_clock_s"] = self.wall_clock_s
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
# magic "SKCP", version u32, meta-JSON block, named tensors, optional
# optimizer block, RNG block.  All integers little-endian; tensor payloads
# are little-endian float32/float64 as flagged.

def _write_block(f, payload: bytes) -> None:
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def _read_block(data: bytes, off: int) -> tuple[bytes, int]:
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    return data[off : off + n], off + n


def _write_tensor(f, name: str, t: Tensor) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    flag = 1 if t.dtype == torch.float64 else 0
    arr = t.detach().cpu().numpy().astype("<f8" if flag else "<f4")
    f.write(struct.pack("<BI", flag, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def _read_tensor(data: bytes, off: int) -> tuple[str, Tensor, int]:
    (name_len,) = struct.unpack_from("<I", data, off)
    off += 4
    name = data[off : off + name_len].decode("utf-8")
    off += name_len
    flag, ndim = struct.unpack_from("<BI", data, off)
    off += 5
    shape = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    dt = "<f8" if flag else "<f4"
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(shape)
    off += arr.nbytes
    tensor = torch.from_numpy(arr.copy()).to(
        torch.float64 if flag else torch.float32
    )
    return name, tensor, off


@dataclass
class Checkpoint:
    config: dict
    meta: dict                       # vocab, concept vocab, d_frame, trainer state
    tensors: dict[str, Tensor]
    optimizer: dict | None           # step, betas/eps, moments
    rng_state: bytes


def save_checkpoint(
    path: str,
    model: RetrievalModel,
    optimizer: Adam | None = None,
    trainer_state: dict | None = None,
) -> None:
    meta = {
        "d_frame": model.d_frame,
        "vocab": {
            "word2idx": model.vocab.word2idx,
            "special_token_index": model.vocab.special_token_index,
            "min_count": model.vocab.min_count,
        },
        "concepts": sorted(
            model.concept_vocab.concept2idx, key=model.concept_vocab.concept2idx.get
        ),
        "trainer": trainer_state or {},
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_block(f, json.dumps(model.cfg.to_dict(), sort_keys=True).encode())
        _write_block(f, json.dumps(meta, sort_keys=True).encode())
        state = model.state_dict()
        f.write(struct.pack("<I", len(state)))
        for name, t in state.items():
            _write_tensor(f, name, t)
        if optimizer is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(
                struct.pack(
                    "<Qddd",
                    optimizer.step_count,
                    optimizer.beta1,
                    optimizer.beta2,
                    optimizer.eps,
                )
            )
            f.write(struct.pack("<I", len(optimizer.moments)))
            for name, (m, v) in optimizer.moments.items():
                _write_tensor(f, "m." + name, m)
                _write_tensor(f, "v." + name, v)
        _write_block(f, torch.get_rng_state().numpy().tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise TrainError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise TrainError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    cfg_raw, off = _read_block(data, off)
    meta_raw, off = _read_block(data, off)
    (n_tensors,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors: dict[str, Tensor] = {}
    for _ in range(n_tensors):
        name, t, off = _read_tensor(data, off)
        tensors[name] = t
    (opt_flag,) = struct.unpack_from("<B", data, off)
    off += 1
    optimizer = None
    if opt_flag:
        step, b1, b2, eps = struct.unpack_from("<Qddd", data, off)
        off += 32
        (n_moms,) = struct.unpack_from("<I", data, off)
        off += 4
        moments: dict[str, Tensor] = {}
        for _ in range(2 * n_moms):
            name, t, off = _read_tensor(data, off)
            moments[name] = t
        optimizer = {
            "step": step, "beta1": b1, "beta2": b2, "eps": eps, "moments": moments
        }
    rng_state, off = _read_block(data, off)
    if off != len(data):
        raise TrainError(f"{path}: {len(data) - off} trailing bytes")
    return Checkpoint(
        config=json.loads(cfg_raw),
        meta=json.loads(meta_raw),
        tensors=tensors,
        optimizer=optimizer,
        rng_state=rng_state,
    )


def restore_model(ckpt: Checkpoint) -> RetrievalModel:
    """Rebuild the model a checkpoint was saved from and load its weights."""
    cfg = Config.from_dict(ckpt.config)
    vocab = Vocabulary(
        word2idx=ckpt.meta["vocab"]["word2idx"],
        special_token_index=ckpt.meta["vocab"]["special_token_index"],
        min_count=ckpt.meta["vocab"]["min_count"],
    )
    cv = ConceptVocabulary({w: i for i, w in enumerate(ckpt.meta["concepts"])})
    model = RetrievalModel(cfg, vocab, cv, d_frame=ckpt.meta["d_frame"])
    model.load_state_dict(ckpt.tensors)
    return model


def restore_optimizer(ckpt: Checkpoint, model: RetrievalModel) -> Adam:
    if ckpt.optimizer is None:
        raise TrainError("checkpoint has no optimizer state")
    opt = Adam(
        model,
        beta1=ckpt.optimizer["beta1"],
        beta2=ckpt.optimizer["beta2"],
        eps=ckpt.optimizer["eps"],
    )
    opt.step_count = int(ckpt.optimizer["step"])
    for name in opt.moments:
        opt.moments[name] = (
            ckpt.optimizer["moments"]["m." + name],
            ckpt.optimizer["moments"]["v." + name],
        )
    return opt


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def validation_objective(
    model: RetrievalModel, val_split: CorpusSplit, monitor: str, cfg: Config
) -> float:
    from . import evaluator  # local import; evaluator does not import trainer

    if monitor == "sumr":
        sims = evaluator.similarity_matrix(model, val_split, direction="t2v")
        truth = evaluator.t2v_ground_truth(val_split)
        return evaluator.rank_metrics(sims, truth).sum_r
    # monitor == "loss": mean batch loss over the validation split
    losses = []
    with torch.no_grad():
        for batch in batch_iter(val_split, cfg.train.batch_size, seed=cfg.train.seed):
            if batch.size >= 2:
                losses.append(model.batch_loss(batch).value)
    if not losses:
        raise TrainError("validation split too small for loss monitoring")
    return float(np.mean(losses))


def train(
    cfg: Config,
    train_split: CorpusSplit,
    val_split: CorpusSplit,
    model: RetrievalModel,
    out_dir: str | None = None,
    max_epochs: int | None = None,
) -> tuple[RetrievalModel, TrainingLog]:
    """Run the optimization loop; returns the model restored to its best epoch."""
    if train_split.n_captions == 0 or val_split.n_captions == 0:
        raise TrainError("train and validation splits must both be non-empty")
    torch.set_num_threads(1)
    t0 = time.monotonic()
    tcfg = cfg.train
    optimizer = Adam(model)
    controller = PlateauController(
        lr=tcfg.lr,
        mode="max" if tcfg.monitor == "sumr" else "min",
        lr_patience=tcfg.lr_patience,
        stop_patience=tcfg.early_stop_patience,
    )
    log = TrainingLog()
    best_state: dict[str, Tensor] | None = None
    epochs = max_epochs if max_epochs is not None else tcfg.max_epochs

    for epoch in range(1, epochs + 1):
        epoch_losses = []
        for batch in batch_iter(
            train_split, tcfg.batch_size, seed=tcfg.seed * 1000003 + epoch
        ):
            if batch.size < 2:
                continue    # a lone trailing pair has no in-batch negative
            optimizer.zero_grad(model)
            loss = model.batch_loss(batch)
            if not torch.isfinite(loss.total):
                snap = _diagnostic_path(out_dir)
                save_checkpoint(snap, model, optimizer)
                raise TrainError(
                    f"non-finite training loss at epoch {epoch}; "
                    f"parameter snapshot written to {snap}"
                )
            loss.total.backward()
            optimizer.step(model, controller.lr)
            epoch_losses.append(loss.value)

        with torch.no_grad():
            objective = validation_objective(model, val_split, tcfg.monitor, cfg)
        lr_before = controller.lr
        events = controller.update(objective)
        log.entries.append(
            LogEntry(epoch, float(np.mean(epoch_losses)), objective, lr_before)
        )
        if events["halved"]:
            log.lr_events.append((epoch, controller.lr))
        if events["improved"]:
            log.best_epoch = epoch
            log.best_value = objective
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if out_dir is not None:
                save_checkpoint(
                    f"{out_dir}/best.ckpt", model, optimizer,
                    trainer_state={"epoch": epoch, **controller.state()},
                )
        if tcfg.early_stop and events["stop"]:
            log.stopped_epoch = epoch
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    log.wall_clock_s = time.monotonic() - t0
    return model, log


def _diagnostic_path(out_dir: str | None) -> str:
    import tempfile

    if out_dir is not None:
        return f"{out_dir}/diagnostic.ckpt"
    return tempfile.mktemp(prefix="skimread-diagnostic-", suffix=".ckpt")


# ---------------------------------------------------------------------------
# finite-difference gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckGroup:
    name: str
    n_coords: int
    max_rel_error: float
    mean_rel_error: float


@dataclass
class GradCheckReport:
    groups: list[GradCheckGroup]
    eps: float

    @property
    def max_rel_error(self) -> float:
        return max(g.max_rel_error for g in self.groups)

    @property
    def mean_rel_error(self) -> float:
        total = sum(g.mean_rel_error * g.n_coords for g in self.groups)
        return total / sum(g.n_coords for g in self.groups)

    def format_table(self) -> str:
        lines = [f"{'parameter group':<44} {'coords':>7} {'max rel':>12} {'mean rel':>12}"]
        for g in self.groups:
            lines.append(
                f"{g.name:<44} {g.n_coords:>7} {g.max_rel_error:>12.3e} "
                f"{g.mean_rel_error:>12.3e}"
            )
        lines.append(
            f"{'OVERALL':<44} {sum(g.n_coords for g in self.groups):>7} "
            f"{self.max_rel_error:>12.3e} {self.mean_rel_error:>12.3e}"
        )
        return "\n".join(lines)


def gradient_check(
    model: torch.nn.Module,
    loss_fn: Callable[[], Tensor],
    eps: float = 1e-5,
    rel_floor: float = 1e-3,
    max_coords_per_group: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Per coordinate: rel = |a - n| / max(|a|, |n|, rel_floor).  The floor keeps
    finite-difference round-off on near-zero coordinates from dominating; for
    such coordinates the comparison degrades to an absolute check at
    rel_floor resolution.  Use 64-bit parameters.

    max_coords_per_group > 0 checks a deterministic random subset of each
    parameter tensor (a fast smoke pass); 0 checks every coordinate.
    """
    params = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    for p in model.parameters():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params
    }

    subset_rng = np.random.default_rng(0)
    groups = []
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            a_flat = analytic[name].view(-1)
            coords = range(flat.numel())
            if 0 < max_coords_per_group < flat.numel():
                coords = sorted(
                    subset_rng.choice(flat.numel(), max_coords_per_group, replace=False)
                )
            rels = []
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(loss_fn())
                flat[i] = orig - eps
                f_minus = float(loss_fn())
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = float(a_flat[i])
                denom = max(abs(a), abs(numeric), rel_floor)
                rels.append(abs(a - numeric) / denom)
            groups.append(
                GradCheckGroup(
                    name=name,
                    n_coords=len(rels),
                    max_rel_error=max(rels),
                    mean_rel_error=sum(rels) / len(rels),
                )
            )
    return GradCheckReport(groups=groups, eps=eps)
