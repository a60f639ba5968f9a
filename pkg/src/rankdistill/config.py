"""Run configuration shared by the trainer, sweeps and the command line."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

from .errors import InvalidParameterError


@dataclass(frozen=True)
class RunConfig:
    tau: float = 0.75
    R: int = 10
    batch_size: int = 1000
    alpha: float = 1.0
    num_bins: int = 20
    lr: float = 1e-4
    lr_decay: float = 0.01
    weight_decay: float = 1e-6
    epochs: int = 30
    snapshot_epochs: tuple[int, ...] = (20, 30)
    seed: int = 0
    student_dim: int = 32
    hidden_dim: int = 0
    init: str = "random"
    no_aug: bool = False
    no_ml: bool = False
    all_grad: bool = False

    def __post_init__(self):
        object.__setattr__(self, "snapshot_epochs", tuple(int(e) for e in self.snapshot_epochs))

    def problems(self) -> list[str]:
        """Every range violation, so all of them can be reported at once."""
        out = []
        if not 0.0 <= self.tau <= 1.0:
            out.append(f"tau must lie in [0, 1] (got {self.tau})")
        if self.R < 1:
            out.append(f"R must be >= 1 (got {self.R})")
        if self.batch_size < 2:
            out.append(f"batch_size must be >= 2 (got {self.batch_size})")
        if not self.alpha > 0:
            out.append(f"alpha must be > 0 (got {self.alpha})")
        if self.num_bins < 2:
            out.append(f"num_bins must be >= 2 (got {self.num_bins})")
        if not self.lr > 0:
            out.append(f"lr must be > 0 (got {self.lr})")
        if self.weight_decay < 0:
            out.append(f"weight_decay must be >= 0 (got {self.weight_decay})")
        if self.epochs < 1:
            out.append(f"epochs must be >= 1 (got {self.epochs})")
        if any(e < 1 for e in self.snapshot_epochs):
            out.append("snapshot epochs are 1-based")
        if self.student_dim < 1:
            out.append(f"student_dim must be >= 1 (got {self.student_dim})")
        if self.hidden_dim < 0:
            out.append(f"hidden_dim must be >= 0 (got {self.hidden_dim})")
        if self.init not in ("random", "identity"):
            out.append(f"init must be 'random' or 'identity' (got {self.init!r})")
        return out

    def validate(self) -> "RunConfig":
        bad = self.problems()
        if bad:
            raise InvalidParameterError("; ".join(bad))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snapshot_epochs"] = list(self.snapshot_epochs)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)
