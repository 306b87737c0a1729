"""Base run configuration and policy interface."""

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class BaseRunConfig(BaseModel):
    """Settings every command shares."""
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, ge=0, lt=2**64)
    output_dir: Path = Path("runs")
    workers: int = Field(default=1, ge=1, le=64)


class BasePolicy(ABC):
    """Base class for driving policies. Implement act()."""

    name: str = "policy"

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self, seed: int) -> None:
        """Re-seed before a new episode."""
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    @abstractmethod
    def act(self, world: Any, scenario: Any) -> tuple[Any, dict]:
        """Return (ControlTuple, diagnostics) for the current world state."""
