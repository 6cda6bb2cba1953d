# Copyright (C) 2024 The Software Heritage developers
# See the AUTHORS file at the top-level directory of this distribution
# License: GNU Affero General Public License version 3, or any later version
# See top-level LICENSE file for more information

"""BSARec encoder: item/position embedding, stacked beyond-self-attention
blocks and the dot-product scoring head.

Scores are returned for items ``1..num_items`` only: column ``v - 1`` holds
the score of item ``v``, the padding index never competes in the softmax.
"""

from enum import Enum
import logging
import os
from typing import Any, Dict, List, Optional, Tuple, Union

import attr
import torch
from torch import nn
import torch.nn.functional as F

from swh.bsarec.error import CheckpointMismatch, InvalidArgument, InvalidState
from swh.bsarec.spectral import BetaMode, FrequencyRescaler, FrequencySplit

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "swh-bsarec-checkpoint"
CHECKPOINT_VERSION = 1


class ResidualStyle(Enum):
    """How the block output is normalized"""

    # LayerNorm(X + MSA(X) + Dropout(FFN(MSA(X))))
    LITERAL = "literal"
    # LayerNorm(X' + Dropout(FFN(X'))) with X' = LayerNorm(X + Dropout(MSA(X)))
    BRANCH = "branch"


@attr.s(frozen=True, slots=True)
class ModelConfig:
    num_items = attr.ib(type=int)
    max_len = attr.ib(type=int, default=50)
    hidden_size = attr.ib(type=int, default=64)
    num_layers = attr.ib(type=int, default=2)
    num_heads = attr.ib(type=int, default=1)
    alpha = attr.ib(type=float, default=0.7)
    cutoff = attr.ib(type=int, default=3)
    beta_mode = attr.ib(type=str, default=BetaMode.VECTOR.value)
    dropout = attr.ib(type=float, default=0.5)
    attention_dropout = attr.ib(type=bool, default=True)
    layer_norm_eps = attr.ib(type=float, default=1e-12)
    causal_attention = attr.ib(type=bool, default=True)
    causal_inductive_bias = attr.ib(type=bool, default=False)
    residual_style = attr.ib(type=str, default=ResidualStyle.LITERAL.value)
    init_std = attr.ib(type=float, default=0.02)

    def __attrs_post_init__(self):
        problems = self.problems()
        if problems:
            raise InvalidArgument("; ".join(problems))

    def problems(self) -> List[str]:
        problems = []
        if self.num_items < 1:
            problems.append(f"num_items must be >= 1, got {self.num_items}")
        if self.max_len < 2:
            problems.append(f"max_len must be >= 2, got {self.max_len}")
        if self.num_layers < 0:
            problems.append(f"num_layers must be >= 0, got {self.num_layers}")
        if self.num_heads < 1 or self.hidden_size % self.num_heads:
            problems.append(
                f"hidden_size={self.hidden_size} is not divisible by "
                f"num_heads={self.num_heads}"
            )
        if not 0.0 <= self.alpha <= 1.0:
            problems.append(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 1 <= self.cutoff <= self.max_len // 2:
            problems.append(
                f"cutoff must lie in [1, {self.max_len // 2}] for max_len="
                f"{self.max_len}, got {self.cutoff}"
            )
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.beta_mode not in {m.value for m in BetaMode}:
            problems.append(f"beta_mode must be scalar or vector, got {self.beta_mode}")
        if self.residual_style not in {s.value for s in ResidualStyle}:
            problems.append(
                f"residual_style must be literal or branch, got {self.residual_style}"
            )
        if self.layer_norm_eps <= 0:
            problems.append(f"layer_norm_eps must be > 0, got {self.layer_norm_eps}")
        return problems

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def split(self) -> FrequencySplit:
        return FrequencySplit(self.cutoff)


@attr.s
class ForwardTrace:
    """Activations of one forward pass.

    ``attentions[l]`` is ``[B, h, N, N]`` and holds the attention
    probabilities before attention dropout. ``scores`` stays attached to the
    autograd graph when the pass ran with gradients enabled.
    """

    train_mode = attr.ib(type=bool)
    embedding = attr.ib(type=Optional[torch.Tensor], default=None)
    layer_inputs = attr.ib(type=List[torch.Tensor], factory=list)
    attentions = attr.ib(type=List[torch.Tensor], factory=list)
    blended = attr.ib(type=List[torch.Tensor], factory=list)
    ffn_hidden = attr.ib(type=List[torch.Tensor], factory=list)
    dropout_masks = attr.ib(type=Dict[str, torch.Tensor], factory=dict)
    output = attr.ib(type=Optional[torch.Tensor], default=None)
    scores = attr.ib(type=Optional[torch.Tensor], default=None)

    @property
    def layer_outputs(self) -> List[torch.Tensor]:
        """X^1 .. X^L"""
        assert self.output is not None
        return self.layer_inputs[1:] + [self.output]


def self_attention_head(
    X: torch.Tensor,
    query_weight: torch.Tensor,
    key_weight: torch.Tensor,
    X_head: torch.Tensor,
    allowed: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """One attention head: ``A = softmax(Q K^T / sqrt(d))`` and ``A X_head``.

    ``query_weight``/``key_weight`` are the ``D x d`` column blocks of W_Q and
    W_K owned by the head. ``allowed`` is a boolean ``[..., N, N]`` mask;
    forbidden logits are set to -inf before the softmax. Every row must allow
    at least one position.
    """
    d = query_weight.shape[-1]
    queries = X @ query_weight
    keys = X @ key_weight
    logits = queries @ keys.transpose(-1, -2) / (d ** 0.5)
    if allowed is not None:
        logits = logits.masked_fill(~allowed, float("-inf"))
    attention = torch.softmax(logits, dim=-1)
    return attention, attention @ X_head


def attention_mask(
    sequences: torch.Tensor, causal: bool = True
) -> torch.Tensor:
    """Allowed (query, key) pairs ``[B, N, N]``.

    Padding keys are masked, future keys too when ``causal``. A position
    always attends to itself, so rows of a fully padded prefix are defined.
    """
    n = sequences.shape[-1]
    allowed = (sequences > 0).unsqueeze(-2).expand(*sequences.shape[:-1], n, n)
    if causal:
        allowed = allowed & torch.ones(
            n, n, dtype=torch.bool, device=sequences.device
        ).tril()
    return allowed | torch.eye(n, dtype=torch.bool, device=sequences.device)


class BSALayer(nn.Module):
    """Blended multi-head attention: per head
    ``alpha * (A_IB X)_i + (1 - alpha) * A_i X_i``, then ``W_O``"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        size = config.hidden_size
        self.query = nn.Linear(size, size, bias=False)
        self.key = nn.Linear(size, size, bias=False)
        self.out = nn.Linear(size, size, bias=False)
        self.rescaler = FrequencyRescaler(BetaMode(config.beta_mode), size)


class FeedForward(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        size = config.hidden_size
        self.dense1 = nn.Linear(size, size)
        self.dense2 = nn.Linear(size, size)
        self.layer_norm = nn.LayerNorm(size, eps=config.layer_norm_eps)


class BSABlock(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attention = BSALayer(config)
        self.ffn = FeedForward(config)
        if ResidualStyle(config.residual_style) is ResidualStyle.BRANCH:
            self.attention_norm = nn.LayerNorm(
                config.hidden_size, eps=config.layer_norm_eps
            )


class BSARec(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.item_embeddings = nn.Embedding(
            config.num_items + 1, config.hidden_size, padding_idx=0
        )
        self.position_embeddings = nn.Embedding(config.max_len, config.hidden_size)
        self.embedding_norm = nn.LayerNorm(
            config.hidden_size, eps=config.layer_norm_eps
        )
        self.blocks = nn.ModuleList(BSABlock(config) for _ in range(config.num_layers))
        self.apply(self._init_weights)
        self.reset_padding()

    def _init_weights(self, module: nn.Module) -> None:
        std = self.config.init_std
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.trunc_normal_(module.weight, std=std, a=-2 * std, b=2 * std)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    @torch.no_grad()
    def reset_padding(self) -> None:
        self.item_embeddings.weight[0].zero_()

    def _dropout(
        self,
        x: torch.Tensor,
        site: str,
        train_mode: bool,
        trace: Optional[ForwardTrace],
    ) -> torch.Tensor:
        p = self.config.dropout
        if not train_mode or p == 0.0:
            return x
        keep = (torch.rand_like(x) >= p).to(x.dtype) / (1.0 - p)
        if trace is not None:
            trace.dropout_masks[site] = keep
        return x * keep

    def _check_sequences(self, sequences: torch.Tensor) -> torch.Tensor:
        sequences = torch.as_tensor(sequences, dtype=torch.long)
        if sequences.dim() == 1:
            sequences = sequences.unsqueeze(0)
        if sequences.shape[-1] != self.config.max_len:
            raise InvalidArgument(
                f"sequences have length {sequences.shape[-1]}, "
                f"expected max_len={self.config.max_len}"
            )
        bad = (sequences < 0) | (sequences > self.config.num_items)
        if bad.any():
            row, position = (int(i) for i in bad.nonzero()[0])
            raise InvalidArgument(
                f"item id {int(sequences[row, position])} out of range "
                f"[0, {self.config.num_items}] at sequence {row}, position {position}"
            )
        return sequences

    def embed(
        self,
        sequences: torch.Tensor,
        train_mode: bool = False,
        trace: Optional[ForwardTrace] = None,
    ) -> torch.Tensor:
        """``Dropout(LayerNorm(M[s] + P))``"""
        sequences = self._check_sequences(sequences)
        positions = self.position_embeddings.weight.unsqueeze(0)
        embedded = self.embedding_norm(self.item_embeddings(sequences) + positions)
        return self._dropout(embedded, "embedding", train_mode, trace)

    def bsa_layer(
        self,
        X: torch.Tensor,
        layer: int,
        allowed: torch.Tensor,
        train_mode: bool = False,
        trace: Optional[ForwardTrace] = None,
    ) -> torch.Tensor:
        config = self.config
        attention = self.blocks[layer].attention
        alpha = config.alpha
        biased = attention.rescaler(
            X, config.split, causal=config.causal_inductive_bias
        )
        biased = self._dropout(
            biased, f"blocks.{layer}.inductive_bias", train_mode, trace
        )
        # nn.Linear stores W^T, its transpose gives the D x D matrix of x @ W
        w_query, w_key = attention.query.weight.t(), attention.key.weight.t()
        probabilities, heads = [], []
        for head in range(config.num_heads):
            cols = slice(head * config.head_size, (head + 1) * config.head_size)
            A, mixed = self_attention_head(
                X, w_query[:, cols], w_key[:, cols], X[..., cols], allowed
            )
            if config.attention_dropout:
                dropped = self._dropout(
                    A, f"blocks.{layer}.attention.{head}", train_mode, trace
                )
                if dropped is not A:
                    mixed = dropped @ X[..., cols]
            probabilities.append(A)
            heads.append(alpha * biased[..., cols] + (1.0 - alpha) * mixed)
        blended = torch.cat(heads, dim=-1)
        if trace is not None:
            trace.attentions.append(torch.stack(probabilities, dim=-3))
            trace.blended.append(blended)
        return attention.out(blended)

    def ffn_block(
        self,
        X: Optional[torch.Tensor],
        X_hat: torch.Tensor,
        layer: int,
        train_mode: bool = False,
        trace: Optional[ForwardTrace] = None,
    ) -> torch.Tensor:
        """``LayerNorm(X + X_hat + Dropout(GELU(X_hat W1 + b1) W2 + b2))``

        ``X`` is None when the block input was already folded into ``X_hat``.
        """
        ffn = self.blocks[layer].ffn
        hidden = F.gelu(ffn.dense1(X_hat))
        if trace is not None:
            trace.ffn_hidden.append(hidden)
        transformed = self._dropout(
            ffn.dense2(hidden), f"blocks.{layer}.ffn", train_mode, trace
        )
        if X is not None:
            transformed = X + transformed
        return ffn.layer_norm(X_hat + transformed)

    def encode(
        self,
        sequences: torch.Tensor,
        train_mode: bool = False,
        trace: Optional[ForwardTrace] = None,
    ) -> torch.Tensor:
        """Final hidden states ``X^L``, ``[B, N, D]``"""
        sequences = self._check_sequences(sequences)
        X = self.embed(sequences, train_mode, trace)
        if trace is not None:
            trace.embedding = X
        allowed = attention_mask(sequences, causal=self.config.causal_attention)
        branch = ResidualStyle(self.config.residual_style) is ResidualStyle.BRANCH
        for layer, block in enumerate(self.blocks):
            if trace is not None:
                trace.layer_inputs.append(X)
            X_hat = self.bsa_layer(X, layer, allowed, train_mode, trace)
            if branch:
                X_hat = block.attention_norm(
                    X
                    + self._dropout(X_hat, f"blocks.{layer}.msa", train_mode, trace)
                )
                X = self.ffn_block(None, X_hat, layer, train_mode, trace)
            else:
                X = self.ffn_block(X, X_hat, layer, train_mode, trace)
        if trace is not None:
            trace.output = X
        return X

    def forward(  # type: ignore[override]
        self, sequences: torch.Tensor, train_mode: bool = False
    ) -> Tuple[torch.Tensor, ForwardTrace]:
        """Scores of every item for the most recent position, ``[B, |V|]``"""
        trace = ForwardTrace(train_mode=train_mode)
        X = self.encode(sequences, train_mode, trace)
        trace.scores = X[:, -1, :] @ self.item_embeddings.weight[1:].t()
        return trace.scores, trace

    def score(self, sequences: torch.Tensor) -> torch.Tensor:
        """Eval-mode scores without gradient tracking"""
        with torch.no_grad():
            scores, _ = self.forward(sequences, train_mode=False)
        return scores


def ce_loss(
    scores: torch.Tensor, targets: Union[torch.Tensor, int, List[int]]
) -> torch.Tensor:
    """Cross-entropy of the ground-truth items (ids ``1..|V|``), batch mean"""
    if scores.dim() == 1:
        scores = scores.unsqueeze(0)
    targets = torch.as_tensor(targets, dtype=torch.long, device=scores.device)
    targets = targets.reshape(-1)
    if ((targets < 1) | (targets > scores.shape[-1])).any():
        raise InvalidArgument(
            f"ground truth items must lie in [1, {scores.shape[-1]}], "
            f"got {targets.tolist()}"
        )
    return F.cross_entropy(scores, targets - 1)


def count_parameters(model: BSARec) -> Dict[str, int]:
    groups = {
        "embedding": 0,
        "attention": 0,
        "rescaler": 0,
        "ffn": 0,
        "layer_norm": 0,
    }
    for name, parameter in model.named_parameters():
        if "rescaler" in name:
            group = "rescaler"
        elif "norm" in name:
            group = "layer_norm"
        elif "embeddings" in name:
            group = "embedding"
        elif ".ffn." in name:
            group = "ffn"
        else:
            group = "attention"
        groups[group] += parameter.numel()
    groups["total"] = sum(groups.values())
    return groups


def save_checkpoint(
    path: Union[str, os.PathLike], model: BSARec, extra: Optional[Dict[str, Any]] = None
) -> None:
    """Write the model configuration and every parameter tensor to ``path``"""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": attr.asdict(model.config),
        "parameters": {
            name: tensor.detach().cpu().clone()
            for name, tensor in model.state_dict().items()
        },
        "extra": extra or {},
    }
    torch.save(payload, path)


def read_checkpoint(path: Union[str, os.PathLike]) -> Dict[str, Any]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise InvalidState(f"{path} is not a bsarec checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise InvalidState(
            f"{path}: unsupported checkpoint version {payload.get('version')}"
        )
    return payload


def load_checkpoint(
    path: Union[str, os.PathLike], num_items: Optional[int] = None
) -> BSARec:
    """Rebuild the model stored in ``path``.

    When ``num_items`` is given, it must match the catalog size the
    checkpoint was trained on.
    """
    payload = read_checkpoint(path)
    config = ModelConfig(**payload["config"])
    if num_items is not None and num_items != config.num_items:
        raise CheckpointMismatch(
            [
                f"item_embeddings.weight: checkpoint "
                f"{config.num_items + 1}x{config.hidden_size}, dataset needs "
                f"{num_items + 1}x{config.hidden_size}"
            ]
        )
    model = BSARec(config)
    expected = model.state_dict()
    stored = payload["parameters"]
    differences = []
    for name in sorted(set(expected) | set(stored)):
        if name not in stored:
            differences.append(f"{name}: missing from checkpoint")
        elif name not in expected:
            differences.append(f"{name}: unexpected in checkpoint")
        elif expected[name].shape != stored[name].shape:
            differences.append(
                f"{name}: checkpoint {tuple(stored[name].shape)}, "
                f"model {tuple(expected[name].shape)}"
            )
    if differences:
        raise CheckpointMismatch(differences)
    first = next(iter(stored.values()), None)
    if first is not None:
        model.to(first.dtype)
    model.load_state_dict(stored)
    logger.debug("Loaded checkpoint %s (%s)", path, config)
    return model
