from __future__ import annotations

import torch
from torch import nn

CLIP_NORM = 1.0


class Trainer:
    """Adam (0.9, 0.999, 1e-8) with linear warmup, optional linear decay, and norm clipping."""

    def __init__(
        self,
        model: nn.Module,
        lr: float,
        warmup_steps: int = 0,
        total_steps: int | None = None,
        decay: bool = False,
    ):
        self.model = model
        self.base_lr = lr
        self.warmup_steps = max(0, warmup_steps)
        self.total_steps = total_steps
        self.decay = decay and total_steps is not None
        self.opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)
        self.step_count = 0
        self._set_lr()

    def lr_factor(self, step: int) -> float:
        if step < self.warmup_steps:
            return (step + 1) / self.warmup_steps
        if self.decay:
            remaining = self.total_steps - step
            span = max(1, self.total_steps - self.warmup_steps)
            return max(0.0, remaining / span)
        return 1.0

    def _set_lr(self) -> None:
        for group in self.opt.param_groups:
            group["lr"] = self.base_lr * self.lr_factor(self.step_count)

    def step(self, loss: torch.Tensor) -> None:
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(self.model.parameters(), CLIP_NORM)
        self.opt.step()
        self.step_count += 1
        self._set_lr()
