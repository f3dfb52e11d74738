"""Deterministic error-diffusion drop scheduling.

Each drop-rate consumer owns a slot. Every eligible packet adds the drop
rate to the accumulator; when it reaches 1 the packet is dropped and 1 is
subtracted. Over ``n`` packets at rate ``d`` the drop count is always
``floor(n*d)`` or ``ceil(n*d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

# float slack so that e.g. ten steps of 0.1 still reach 1
_EPS = 1e-9


@dataclass(slots=True)
class DiffusionSlot:
    accumulator: float = 0.0
    dropped: int = 0
    forwarded: int = 0

    def step(self, rate: float) -> bool:
        """Advance by one eligible packet; True means drop it."""
        acc = self.accumulator + rate
        if acc >= 1.0 - _EPS:
            acc -= 1.0
            self.accumulator = acc if acc > 0.0 else 0.0
            self.dropped += 1
            return True
        self.accumulator = acc
        self.forwarded += 1
        return False

    def realized_rate(self) -> float:
        total = self.dropped + self.forwarded
        return self.dropped / total if total else 0.0
