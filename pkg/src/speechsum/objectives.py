"""Modality-alignment losses over response positions.

All three losses are summed over response positions except feature
distillation, whose per-layer term is a mean squared error (mean over
positions and dimensions) summed across connector layers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    lambda_ntp: float = 0.5
    lambda_ld: float = 0.5
    lambda_fd: float = 1.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


PRESET_WEIGHTS = {
    "full": LossWeights(0.5, 0.5, 1.0),
    "ntp_only": LossWeights(0.5, 0.0, 0.0),
    "ntp_ld": LossWeights(0.5, 0.5, 0.0),
    "ntp_fd": LossWeights(0.5, 0.0, 1.0),
}


@dataclass
class LossBundle:
    ntp: torch.Tensor
    ld: torch.Tensor
    fd: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        out = {}
        for k in ("ntp", "ld", "fd", "total"):
            v = getattr(self, k)
            out[k] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out

    def per_token(self, n_response: int) -> dict[str, float]:
        """Length-normalised view for logging; training uses the sums."""
        d = self.as_floats()
        return {k: v / n_response for k, v in d.items()}


def ntp_loss(student_logits: torch.Tensor, response_ids) -> torch.Tensor:
    """Negative log-likelihood of the response, summed over positions."""
    targets = torch.as_tensor(response_ids, dtype=torch.long, device=student_logits.device)
    if student_logits.shape[0] != targets.numel():
        raise ValueError(f"{student_logits.shape[0]} logit rows for {targets.numel()} response tokens")
    vocab = student_logits.shape[-1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"response ids outside vocabulary of size {vocab}")
    return F.cross_entropy(student_logits, targets, reduction="sum")


def logit_distill_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Soft cross-entropy of the student against the softmaxed teacher (temperature 1)."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"logit shape mismatch: student {tuple(student_logits.shape)} vs teacher {tuple(teacher_logits.shape)}"
        )
    teacher_p = F.softmax(teacher_logits, dim=-1)
    return -(teacher_p * F.log_softmax(student_logits, dim=-1)).sum()


def feature_distill_loss(
    student_hiddens: Mapping[int, torch.Tensor], teacher_hiddens: Mapping[int, torch.Tensor]
) -> torch.Tensor:
    if set(student_hiddens) != set(teacher_hiddens):
        raise ValueError(f"layer sets differ: {sorted(student_hiddens)} vs {sorted(teacher_hiddens)}")
    terms = []
    for layer in sorted(student_hiddens):
        s, t = student_hiddens[layer], teacher_hiddens[layer]
        if s.shape != t.shape:
            raise ValueError(f"layer {layer}: shape mismatch {tuple(s.shape)} vs {tuple(t.shape)}")
        terms.append(F.mse_loss(s, t, reduction="mean"))
    if not terms:
        raise ValueError("feature distillation needs at least one layer")
    return torch.stack(terms).sum()


def total_loss(ntp, ld, fd, w: LossWeights):
    return w.lambda_ntp * ntp + w.lambda_ld * ld + w.lambda_fd * fd


def loss_bundle(student, teacher, response_ids: Sequence[int], w: LossWeights) -> LossBundle:
    """Combine the three losses from student/teacher ``LMForwardOutput`` objects.

    Teacher tensors are detached here so only the student path receives gradients.
    """
    ntp = ntp_loss(student.response_logits, response_ids)
    ld = logit_distill_loss(student.response_logits, teacher.response_logits.detach())
    fd = feature_distill_loss(
        student.hidden_states, {k: v.detach() for k, v in teacher.hidden_states.items()}
    )
    return LossBundle(ntp, ld, fd, total_loss(ntp, ld, fd, w))


def response_rows(x: torch.Tensor, boundary_t: int) -> torch.Tensor:
    """Rows ``t+1..T`` of a position-indexed sequence tensor."""
    return x[boundary_t + 1 :]


def entropy(logits: torch.Tensor) -> torch.Tensor:
    """Summed row entropy of softmax(logits); the floor of the distillation loss."""
    logp = F.log_softmax(logits, dim=-1)
    return -(logp.exp() * logp).sum()


# Closed-form gradients, used to cross-check autograd.


def ntp_grad(student_logits: torch.Tensor, response_ids) -> torch.Tensor:
    onehot = F.one_hot(torch.as_tensor(response_ids), student_logits.shape[-1]).to(student_logits.dtype)
    return F.softmax(student_logits, dim=-1) - onehot


def logit_distill_grad(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    # teacher rows sum to one, so d/dz of -sum p log softmax(z) is softmax(z) - p
    return F.softmax(student_logits, dim=-1) - F.softmax(teacher_logits, dim=-1)


def feature_distill_grad(
    student_hiddens: Mapping[int, torch.Tensor], teacher_hiddens: Mapping[int, torch.Tensor]
) -> dict[int, torch.Tensor]:
    return {l: 2.0 * (s - teacher_hiddens[l]) / s.numel() for l, s in student_hiddens.items()}
