"""AdaDelta training, the validation-driven schedule, and resumable runs."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from hran import numerics as nx
from hran.checkpoint import Checkpoint, check_compatible, load_checkpoint, save_checkpoint
from hran.corpus import Example, Vocab, make_batches
from hran.errors import CompatibilityError, ContractError, NumericError, ParameterError
from hran.evaluation import perplexity
from hran.model import HRAN, ModelConfig

logger = logging.getLogger(__name__)


@dataclass
class AdaDeltaState:
    """Running averages ``E[g^2]`` and ``E[dx^2]`` per parameter."""

    sq_grad: dict
    sq_delta: dict
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0

    @classmethod
    def for_params(cls, params: dict, rho: float = 0.95, eps: float = 1e-6, lr: float = 1.0):
        zeros = lambda: {k: np.zeros_like(p.value) for k, p in params.items()}
        return cls(zeros(), zeros(), rho, eps, lr)


def adadelta_update(state: AdaDeltaState, params: dict, grads: dict):
    """One AdaDelta step.

    ``E[g^2] <- rho E[g^2] + (1 - rho) g^2``;
    ``dx = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g``;
    ``E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2``; the parameter moves by ``lr * dx``.
    The accumulator tracks the unscaled ``dx``, so ``lr = 0`` freezes the
    weights while the averages keep advancing.
    """
    rho, eps, lr = state.rho, state.eps, state.lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    for name, p in params.items():
        g = grads[name]
        eg2 = rho * state.sq_grad[name] + (1.0 - rho) * g * g
        dx = -np.sqrt(state.sq_delta[name] + eps) / np.sqrt(eg2 + eps) * g
        state.sq_grad[name] = eg2
        state.sq_delta[name] = rho * state.sq_delta[name] + (1.0 - rho) * dx * dx
        p.value = (p.value + lr * dx).astype(p.value.dtype, copy=False)
    return params, state


def clip_global_norm(grads: dict, max_norm: float | None) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the original norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * factor
    return norm


@dataclass
class TrainSchedule:
    batch_size: int = 128
    lr: float = 1.0
    halve_on_increase: bool = True
    early_stop_threshold: float = 2.0
    early_stop_patience: int = 5
    # "best": improvement measured against the best perplexity so far; "consecutive": against the previous epoch
    stop_rule: str = "best"
    max_epochs: int = 20
    rho: float = 0.95
    eps: float = 1e-6
    clip_norm: float | None = 5.0
    eval_batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.early_stop_threshold <= 0 or self.early_stop_patience < 1:
            raise ParameterError("early-stop threshold must be positive and patience at least 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.eval_batch_size < 1:
            raise ParameterError("batch sizes and max_epochs must be positive")
        if self.stop_rule not in ("best", "consecutive"):
            raise ParameterError("stop_rule must be 'best' or 'consecutive'")

    def to_dict(self) -> dict:
        return asdict(self)


class ScheduleController:
    """Tracks validation perplexity to halve the learning rate and decide when to stop.

    The rate halves whenever perplexity rises above the previous epoch's value.
    An epoch that fails to improve by at least ``early_stop_threshold`` bumps a
    counter, reset by any sufficient improvement; training stops once the
    counter reaches ``early_stop_patience``.
    """

    def __init__(self, schedule: TrainSchedule, lr: float | None = None):
        self.schedule = schedule
        self.lr = schedule.lr if lr is None else lr
        self.best = math.inf
        self.previous = None
        self.stale = 0

    def observe(self, ppl: float) -> dict:
        s = self.schedule
        halved = s.halve_on_increase and self.previous is not None and ppl > self.previous
        if halved:
            self.lr *= 0.5
        reference = self.best if s.stop_rule == "best" else (math.inf if self.previous is None else self.previous)
        if reference - ppl >= s.early_stop_threshold:
            self.stale = 0
        else:
            self.stale += 1
        improved = ppl < self.best
        if improved:
            self.best = ppl
        self.previous = ppl
        return {"halved": halved, "improved": improved, "stale": self.stale,
                "stop": self.stale >= s.early_stop_patience, "lr": self.lr}

    def state_dict(self) -> dict:
        return {"lr": self.lr, "best": self.best, "previous": self.previous, "stale": self.stale}

    def load_state_dict(self, d: dict) -> None:
        self.lr, self.best, self.previous, self.stale = d["lr"], d["best"], d["previous"], d["stale"]


def train_epoch(model: HRAN, optimizer: AdaDeltaState, batches: Sequence, rng: np.random.Generator,
                clip_norm: float | None = None) -> float:
    """One pass over shuffled batches; returns the mean training NLL per token.

    Each batch's summed loss is back-propagated, gradients are divided by the
    batch's token count, optionally clipped, and applied with AdaDelta.
    """
    if not batches:
        raise ContractError("train_epoch needs at least one batch")
    total, tokens = 0.0, 0
    for bi in rng.permutation(len(batches)):
        batch = batches[bi]
        model.zero_grad()
        res = model.forward_nll(batch)
        loss = float(res.loss.value)
        if not math.isfinite(loss):
            raise NumericError(f"batch {bi}: non-finite loss")
        res.loss.backward()
        grads = {k: p.grad / res.num_tokens for k, p in model.params.items()}
        clip_global_norm(grads, clip_norm)
        try:
            adadelta_update(optimizer, model.params, grads)
        except NumericError as exc:
            raise NumericError(f"batch {bi}: {exc}") from exc
        total += loss
        tokens += res.num_tokens
    return total / tokens


@dataclass
class TrainingReport:
    epochs: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0
    best_perplexity: float = math.inf
    clip_norm: float | None = None
    best_state: dict | None = field(default=None, repr=False)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.epochs)


def _snapshot(model: HRAN) -> dict:
    return {k: p.value.copy() for k, p in model.params.items()}


def model_checkpoint(model: HRAN, context_vocab: Vocab | None = None, response_vocab: Vocab | None = None,
                     optimizer: AdaDeltaState | None = None, schedule: TrainSchedule | None = None,
                     epoch: int = 0, extra: dict | None = None, state: dict | None = None) -> Checkpoint:
    tensors = {f"param/{k}": v for k, v in (state or _snapshot(model)).items()}
    if optimizer is not None:
        tensors.update({f"adadelta/sq_grad/{k}": v for k, v in optimizer.sq_grad.items()})
        tensors.update({f"adadelta/sq_delta/{k}": v for k, v in optimizer.sq_delta.items()})
    meta = dict(extra or {})
    if context_vocab is not None:
        meta["context_vocab"] = context_vocab.tokens
    if response_vocab is not None:
        meta["response_vocab"] = response_vocab.tokens
    if optimizer is not None:
        meta["adadelta"] = {"rho": optimizer.rho, "eps": optimizer.eps}
    return Checkpoint(
        config=model.config.to_dict(), tensors=tensors,
        schedule=schedule.to_dict() if schedule else None, epoch=epoch,
        lr=optimizer.lr if optimizer else None, extra=meta,
    )


def restore(ckpt: Checkpoint, config: ModelConfig | None = None):
    """Rebuild ``(model, optimizer-or-None, context_vocab, response_vocab)`` from a checkpoint."""
    if config is not None:
        check_compatible(ckpt, config.to_dict())
    cfg = ModelConfig.from_dict(ckpt.config)
    model = HRAN(cfg)
    for k, p in model.params.items():
        try:
            arr = ckpt.tensors[f"param/{k}"]
        except KeyError:
            raise ContractError(f"checkpoint lacks parameter {k!r}") from None
        if arr.shape != p.shape:
            raise ContractError(f"parameter {k!r} has shape {arr.shape}, expected {p.shape}")
        p.value = arr.copy()
    optimizer = None
    if any(name.startswith("adadelta/") for name in ckpt.tensors):
        hyper = ckpt.extra.get("adadelta", {})
        optimizer = AdaDeltaState(
            {k: ckpt.tensors[f"adadelta/sq_grad/{k}"].copy() for k in model.params},
            {k: ckpt.tensors[f"adadelta/sq_delta/{k}"].copy() for k in model.params},
            rho=hyper.get("rho", 0.95), eps=hyper.get("eps", 1e-6), lr=ckpt.lr if ckpt.lr is not None else 1.0,
        )
    cv = Vocab(ckpt.extra["context_vocab"]) if "context_vocab" in ckpt.extra else None
    rv = Vocab(ckpt.extra["response_vocab"]) if "response_vocab" in ckpt.extra else None
    return model, optimizer, cv, rv


def fit(model: HRAN, train: Sequence[Example], valid: Sequence[Example], schedule: TrainSchedule,
        context_vocab: Vocab, response_vocab: Vocab, checkpoint_path=None, best_path=None,
        report_path=None, resume_from=None, evaluate=None) -> TrainingReport:
    """Train until the early-stop rule fires or ``max_epochs`` is reached.

    ``checkpoint_path`` receives the full training state after every epoch and
    ``best_path`` the parameters of the best validation epoch. Passing
    ``resume_from`` (a path written to ``checkpoint_path``) continues such a run;
    the per-epoch shuffle is keyed by ``(seed, epoch)``, so a resumed run
    replays exactly what an uninterrupted one would have done. ``evaluate``
    overrides the validation-perplexity function (used to inject sequences).
    """
    if not train or not valid:
        raise ContractError("fit needs nonempty training and validation sets")
    batches = make_batches(train, context_vocab, response_vocab, schedule.batch_size)
    valid_batches = make_batches(valid, context_vocab, response_vocab, schedule.eval_batch_size)
    evaluate = evaluate or (lambda m: perplexity(m, valid_batches).perplexity)

    optimizer = AdaDeltaState.for_params(model.params, schedule.rho, schedule.eps, schedule.lr)
    controller = ScheduleController(schedule)
    report = TrainingReport(clip_norm=schedule.clip_norm)
    start = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        check_compatible(ckpt, model.config.to_dict())
        # max_epochs only decides when to stop, so a resumed run may extend it
        trajectory = lambda d: {k: v for k, v in (d or {}).items() if k != "max_epochs"}
        if trajectory(ckpt.schedule) != trajectory(schedule.to_dict()):
            raise CompatibilityError("checkpoint was written under a different training schedule")
        restored, opt, _, _ = restore(ckpt)
        for k, p in model.params.items():
            p.value = restored.params[k].value
        optimizer = opt
        controller.load_state_dict(ckpt.extra["controller"])
        report.epochs = list(ckpt.extra["history"])
        report.best_epoch = ckpt.extra["best_epoch"]
        report.best_perplexity = controller.best
        if best_path is not None and report.best_epoch:
            report.best_state = {k[len("param/"):]: v for k, v in load_checkpoint(best_path).tensors.items()
                                 if k.startswith("param/")}
        start = ckpt.epoch

    for epoch in range(start + 1, schedule.max_epochs + 1):
        lr_used = optimizer.lr
        train_loss = train_epoch(model, optimizer, batches, nx.make_rng(schedule.seed, epoch), schedule.clip_norm)
        ppl = evaluate(model)
        decision = controller.observe(ppl)
        optimizer.lr = controller.lr
        record = {"epoch": epoch, "train_loss": train_loss, "valid_ppl": ppl, "lr": lr_used,
                  "next_lr": controller.lr, "halved": decision["halved"], "stale": decision["stale"],
                  "clip_norm": schedule.clip_norm}
        report.epochs.append(record)
        logger.info("epoch %d loss %.4f valid ppl %.4f lr %g", epoch, train_loss, ppl, lr_used)
        if report_path is not None:
            with open(report_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if decision["improved"]:
            report.best_epoch, report.best_perplexity = epoch, ppl
            report.best_state = _snapshot(model)
            if best_path is not None:
                save_checkpoint(best_path, model_checkpoint(
                    model, context_vocab, response_vocab, schedule=schedule, epoch=epoch,
                    extra={"valid_ppl": ppl}))
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model_checkpoint(
                model, context_vocab, response_vocab, optimizer, schedule, epoch,
                extra={"controller": controller.state_dict(), "history": report.epochs,
                       "best_epoch": report.best_epoch, "valid_ppl": ppl}))
        if decision["stop"]:
            report.stop_reason = (f"validation perplexity improved by less than {schedule.early_stop_threshold} "
                                  f"{schedule.early_stop_patience} times")
            break
    else:
        report.stop_reason = "max_epochs"
    return report
