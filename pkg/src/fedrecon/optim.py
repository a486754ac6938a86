"""AdamW optimizer with decoupled weight decay.

The update follows the standard bias-corrected Adam moments; weight decay
is applied directly to the parameter, never through the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter


class OptimizerError(RuntimeError):
    """Raised on non-finite gradients, naming the offending parameter."""


@dataclass
class AdamW:
    """Per-parameter first/second moment state plus hyperparameters.

    Moments are keyed by parameter name; the step counter is shared and
    strictly increasing.
    """

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: list[Parameter], grads: dict[Parameter, np.ndarray]) -> None:
        """Apply one AdamW update to ``params`` in place."""
        for p in params:
            g = grads[p]
            if not np.all(np.isfinite(g)):
                raise OptimizerError(
                    f"non-finite gradient for parameter {p.name!r}"
                )
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p in params:
            g = grads[p]
            m = self.m.get(p.name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[p.name] = np.zeros_like(p.data)
            v = self.v[p.name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[p.name] = m
            self.v[p.name] = v
            p.data = p.data - self.lr * (
                (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            )

    def clone_state(self) -> "AdamW":
        """Deep copy, used when forking deterministic training trajectories."""
        out = AdamW(self.lr, self.betas, self.eps, self.weight_decay, self.step_count)
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        return out
