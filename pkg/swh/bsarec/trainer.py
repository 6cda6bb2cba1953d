# Copyright (C) 2024 The Software Heritage developers
# See the AUTHORS file at the top-level directory of this distribution
# License: GNU Affero General Public License version 3, or any later version
# See top-level LICENSE file for more information

import copy
import csv
import logging
import os
import time
from typing import Callable, Dict, List, Optional, Union

import attr
import numpy as np
import torch

from swh.bsarec.data import SplitSequences, iterate_batches, training_examples
from swh.bsarec.error import InvalidArgument, InvalidState, NumericFailure
from swh.bsarec.evaluation import MetricsReport, full_ranking_eval
from swh.bsarec.model import BSARec, ForwardTrace, ce_loss, save_checkpoint

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "loss", "val_ndcg20", "val_hr20", "seconds")

EvalHook = Callable[[BSARec], MetricsReport]


@attr.s(frozen=True, slots=True)
class TrainConfig:
    learning_rate = attr.ib(type=float, default=1e-3)
    batch_size = attr.ib(type=int, default=256)
    epochs = attr.ib(type=int, default=200)
    patience = attr.ib(type=int, default=10)
    adam_beta1 = attr.ib(type=float, default=0.9)
    adam_beta2 = attr.ib(type=float, default=0.999)
    adam_eps = attr.ib(type=float, default=1e-8)
    weight_decay = attr.ib(type=float, default=0.0)
    # global-norm clipping threshold, 0 disables it
    grad_clip = attr.ib(type=float, default=5.0)
    seed = attr.ib(type=int, default=42)
    augment_prefixes = attr.ib(type=bool, default=True)
    train_on_validation = attr.ib(type=bool, default=False)
    eval_batch_size = attr.ib(type=int, default=256)

    def __attrs_post_init__(self):
        problems = self.problems()
        if problems:
            raise InvalidArgument("; ".join(problems))

    def problems(self) -> List[str]:
        problems = []
        # lr=0 turns a step into a no-op
        if self.learning_rate < 0:
            problems.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_batch_size < 1:
            problems.append(f"eval_batch_size must be >= 1, got {self.eval_batch_size}")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 1:
            problems.append(f"patience must be >= 1, got {self.patience}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            problems.append("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            problems.append(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.weight_decay < 0 or self.grad_clip < 0:
            problems.append("weight_decay and grad_clip must be >= 0")
        return problems


@attr.s
class OptimizerState:
    """Adam moments (held by the wrapped optimizer) and the step counter"""

    optimizer = attr.ib(type=torch.optim.Adam)
    step = attr.ib(type=int, default=0)

    @classmethod
    def create(cls, model: torch.nn.Module, config: TrainConfig) -> "OptimizerState":
        return cls(
            optimizer=torch.optim.Adam(
                model.parameters(),
                lr=config.learning_rate,
                betas=(config.adam_beta1, config.adam_beta2),
                eps=config.adam_eps,
                weight_decay=config.weight_decay,
            )
        )

    def moments(self, parameter: torch.Tensor) -> Dict[str, torch.Tensor]:
        state = self.optimizer.state.get(parameter, {})
        return {k: state[k] for k in ("exp_avg", "exp_avg_sq") if k in state}


def backward(
    model: BSARec,
    trace: Optional[ForwardTrace],
    grad_output: torch.Tensor,
    retain_graph: bool = False,
) -> Dict[str, torch.Tensor]:
    """Gradients of every named parameter given ``grad_output``, the gradient
    of the objective with respect to ``trace.scores``.

    Parameters the pass did not use get a zero gradient.
    """
    if trace is None or trace.scores is None:
        raise InvalidState("backward needs the trace of a forward pass")
    if not trace.scores.requires_grad:
        raise InvalidState("the forward pass ran without gradient tracking")
    names, parameters = zip(*model.named_parameters())
    grads = torch.autograd.grad(
        trace.scores,
        parameters,
        grad_outputs=grad_output,
        allow_unused=True,
        retain_graph=retain_graph,
    )
    return {
        name: torch.zeros_like(p) if g is None else g
        for name, p, g in zip(names, parameters, grads)
    }


def adam_step(
    model: torch.nn.Module,
    grads: Dict[str, torch.Tensor],
    state: OptimizerState,
    config: TrainConfig,
) -> None:
    """Bias-corrected Adam update from ``grads``, keyed by parameter name"""
    parameters = dict(model.named_parameters())
    # every gradient is checked before any is assigned
    for name, grad in grads.items():
        if name not in parameters:
            raise InvalidArgument(f"gradient given for unknown parameter {name}")
        if grad.shape != parameters[name].shape:
            raise InvalidArgument(
                f"{name}: gradient shape {tuple(grad.shape)} does not match "
                f"parameter shape {tuple(parameters[name].shape)}"
            )
        if not torch.isfinite(grad).all():
            raise NumericFailure(
                f"non-finite gradient (max |g| = {grad.abs().max().item()}) "
                f"at optimizer step {state.step + 1}",
                parameter=name,
            )
    state.optimizer.zero_grad(set_to_none=True)
    for name, grad in grads.items():
        parameters[name].grad = grad.detach().clone()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1
    if isinstance(model, BSARec):
        model.reset_padding()
    for name, parameter in parameters.items():
        if not torch.isfinite(parameter).all():
            raise NumericFailure(
                f"non-finite value after optimizer step {state.step}", parameter=name
            )


def train_step(
    model: BSARec,
    inputs: torch.Tensor,
    targets: torch.Tensor,
    state: OptimizerState,
    config: TrainConfig,
) -> float:
    scores, trace = model(inputs, train_mode=True)
    loss = ce_loss(scores, targets)
    (grad_scores,) = torch.autograd.grad(loss, scores, retain_graph=True)
    adam_step(model, backward(model, trace, grad_scores), state, config)
    return float(loss.detach())


@attr.s(frozen=True, slots=True)
class EpochRecord:
    epoch = attr.ib(type=int)
    loss = attr.ib(type=float)
    val_ndcg20 = attr.ib(type=float)
    val_hr20 = attr.ib(type=float)
    seconds = attr.ib(type=float)


@attr.s
class TrainResult:
    best_state = attr.ib(type=Dict[str, torch.Tensor])
    best_epoch = attr.ib(type=int)
    best_report = attr.ib(type=Optional[MetricsReport])
    history = attr.ib(type=List[EpochRecord], factory=list)

    @property
    def losses(self) -> List[float]:
        return [record.loss for record in self.history]

    @property
    def seconds_per_epoch(self) -> float:
        return float(np.mean([record.seconds for record in self.history]))


def validation_hook(
    splits: SplitSequences, max_len: int, mask_history: bool = True, batch_size=256
) -> EvalHook:
    def hook(model: BSARec) -> MetricsReport:
        return full_ranking_eval(
            model,
            splits,
            max_len,
            stage="valid",
            mask_history=mask_history,
            batch_size=batch_size,
        )

    return hook


def _append_log(path: Union[str, os.PathLike], record: EpochRecord) -> None:
    new = not os.path.exists(path)
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(LOG_FIELDS)
        writer.writerow(
            [
                record.epoch,
                f"{record.loss:.6f}",
                f"{record.val_ndcg20:.6f}",
                f"{record.val_hr20:.6f}",
                f"{record.seconds:.3f}",
            ]
        )


def train(
    model: BSARec,
    splits: SplitSequences,
    config: TrainConfig,
    eval_hook: Optional[EvalHook] = None,
    log_path: Optional[Union[str, os.PathLike]] = None,
    checkpoint_path: Optional[Union[str, os.PathLike]] = None,
) -> TrainResult:
    """Train until validation NDCG@20 stops improving for ``patience`` epochs.

    The model ends up holding the parameters of its best epoch, which are
    also saved to ``checkpoint_path`` whenever they improve.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    max_len = model.config.max_len
    inputs, targets = training_examples(
        splits,
        max_len,
        augment_prefixes=config.augment_prefixes,
        train_on_validation=config.train_on_validation,
    )
    inputs_t, targets_t = torch.from_numpy(inputs), torch.from_numpy(targets)
    if eval_hook is None:
        eval_hook = validation_hook(splits, max_len, batch_size=config.eval_batch_size)
    state = OptimizerState.create(model, config)
    logger.info(
        "Training on %d examples from %d users, %d batches per epoch",
        len(targets),
        len(splits),
        -(-len(targets) // config.batch_size),
    )

    result = TrainResult(
        best_state=copy.deepcopy(model.state_dict()), best_epoch=0, best_report=None
    )
    best_metric = float("-inf")
    stale = 0
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        model.train()
        losses = []
        for batch in iterate_batches(len(targets), config.batch_size, rng):
            index = torch.from_numpy(batch)
            losses.append(
                train_step(model, inputs_t[index], targets_t[index], state, config)
            )
        model.eval()
        with torch.no_grad():
            report = eval_hook(model)
        record = EpochRecord(
            epoch=epoch,
            loss=float(np.mean(losses)),
            val_ndcg20=report.ndcg.get(20, 0.0),
            val_hr20=report.hr.get(20, 0.0),
            seconds=time.perf_counter() - started,
        )
        result.history.append(record)
        if log_path is not None:
            _append_log(log_path, record)
        logger.info(
            "epoch %d: loss %.4f, valid NDCG@20 %.4f, HR@20 %.4f (%.1fs)",
            record.epoch,
            record.loss,
            record.val_ndcg20,
            record.val_hr20,
            record.seconds,
        )

        if record.val_ndcg20 > best_metric:
            best_metric = record.val_ndcg20
            stale = 0
            result.best_state = copy.deepcopy(model.state_dict())
            result.best_epoch = epoch
            result.best_report = report
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, extra={"epoch": epoch})
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(
                    "No improvement for %d epochs, stopping at epoch %d",
                    stale,
                    epoch,
                )
                break

    model.load_state_dict(result.best_state)
    return result
