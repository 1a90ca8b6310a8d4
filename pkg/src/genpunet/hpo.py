"""Hyperparameter search over latent size, KL weight and mixture settings."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import AnnotatedCase
from .model import ArchConfig, Variant, build_variant
from .training import TrainConfig, TrainingError, arch_from_dict, arch_to_dict, save_checkpoint, train

logger = logging.getLogger(__name__)

BUDGET_RANGE = (4, 24)


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    latent_dims: tuple = (2, 4, 6, 8)
    betas: tuple = (1.0, 10.0, 100.0)
    components_range: tuple = (1, 10)        # inclusive integer range
    temperature_range: tuple = (0.1, 0.5)    # continuous range
    budget: int = 4

    def __post_init__(self):
        if not self.latent_dims or not self.betas:
            raise ValueError("search space has an empty grid dimension")
        lo, hi = self.components_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid components range {self.components_range}")
        tlo, thi = self.temperature_range
        if not 0 < tlo <= thi:
            raise ValueError(f"invalid temperature range {self.temperature_range}")
        if not BUDGET_RANGE[0] <= self.budget <= BUDGET_RANGE[1]:
            raise ValueError(f"budget must lie in {list(BUDGET_RANGE)}, got {self.budget}")

    def grid(self) -> list[tuple[int, float]]:
        return list(itertools.product(self.latent_dims, self.betas))


def _draw(space: SearchSpace, variant: Variant, point: tuple, rng: np.random.Generator,
          base_arch: ArchConfig, base_train: TrainConfig) -> tuple[ArchConfig, TrainConfig]:
    d, beta = point
    comps = temp = None
    if variant.is_mixture:
        comps = int(rng.integers(space.components_range[0], space.components_range[1] + 1))
        temp = float(rng.uniform(*space.temperature_range))
    arch = replace(base_arch, latent_dim=int(d), variant=variant, mixture_components=comps, temperature=temp)
    seed = int(rng.integers(2**31))
    return arch, replace(base_train, beta=float(beta), seed=seed)


def _defaults(variant, base_arch, base_train):
    variant = Variant.parse(variant)
    if base_arch is None:
        base_arch = ArchConfig(latent_dim=2)
    else:
        base_arch = replace(base_arch, variant=Variant.AA, mixture_components=None, temperature=None)
    return variant, base_arch, base_train or TrainConfig()


def sample_config(space: SearchSpace, variant, rng: np.random.Generator,
                  base_arch: Optional[ArchConfig] = None,
                  base_train: Optional[TrainConfig] = None) -> tuple[ArchConfig, TrainConfig]:
    """One configuration: a uniformly drawn grid point plus the variant's random-range parameters."""
    variant, base_arch, base_train = _defaults(variant, base_arch, base_train)
    grid = space.grid()
    return _draw(space, variant, grid[rng.integers(len(grid))], rng, base_arch, base_train)


def sample_configs(space: SearchSpace, variant, rng: np.random.Generator, budget: Optional[int] = None,
                   base_arch: Optional[ArchConfig] = None,
                   base_train: Optional[TrainConfig] = None) -> list[tuple[ArchConfig, TrainConfig]]:
    """``budget`` configurations.

    When the budget covers the grid, every grid point is visited (round-robin
    if the budget exceeds the grid size); otherwise grid points are drawn
    uniformly without replacement.
    """
    variant, base_arch, base_train = _defaults(variant, base_arch, base_train)
    budget = space.budget if budget is None else budget
    if budget < 1:
        raise ValueError("budget must be >= 1")
    grid = space.grid()
    if budget >= len(grid):
        points = [grid[i % len(grid)] for i in range(budget)]
    else:
        points = [grid[i] for i in rng.choice(len(grid), size=budget, replace=False)]
    return [_draw(space, variant, p, rng, base_arch, base_train) for p in points]


# -- running ----------------------------------------------------------------------

@dataclass
class RunRecord:
    run_id: str
    arch: dict
    train: dict
    seed: int
    best_val_loss: float
    best_epoch: int
    checkpoint: Optional[str]
    status: str = "ok"
    diagnostic: str = ""
    metrics: dict = field(default_factory=dict)

    def configs(self) -> tuple[ArchConfig, TrainConfig]:
        """Rebuild the exact configuration this run was trained with."""
        return arch_from_dict(dict(self.arch)), TrainConfig(**self.train)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


def _run_one(run_id: str, arch: ArchConfig, tcfg: TrainConfig, train_set, val_set, run_dir: str) -> RunRecord:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run_dir / "model.ckpt"
    model = build_variant(arch, seed=tcfg.seed)
    try:
        result = train(model, train_set, val_set, tcfg, checkpoint_path=ckpt)
    except TrainingError as exc:
        record = RunRecord(run_id, arch_to_dict(arch), asdict(tcfg), tcfg.seed, math.inf, 0, None,
                           "diverged", str(exc))
    else:
        # relative to the search directory, so records do not depend on where it lives
        record = RunRecord(run_id, arch_to_dict(arch), asdict(tcfg), tcfg.seed, result.state.best_val_loss,
                           result.best_epoch, f"{run_dir.name}/{ckpt.name}",
                           metrics={"stop_epoch": result.stop_epoch,
                                    "final_train_loss": result.history[-1].train_loss})
    (run_dir / "record.json").write_text(record.to_json(), encoding="utf-8")
    return record


@dataclass
class SearchResult:
    best: RunRecord
    leaderboard: list  # RunRecords, ascending by best validation loss


def run_search(space: SearchSpace, variant, train_set: Sequence[AnnotatedCase],
               val_set: Sequence[AnnotatedCase], out_dir, budget: Optional[int] = None, seed: int = 0,
               base_arch: Optional[ArchConfig] = None, base_train: Optional[TrainConfig] = None,
               workers: int = 1) -> SearchResult:
    """Train every sampled configuration to early stop and rank by best validation loss.

    Each run writes to its own ``run_NNN`` directory; the winner's checkpoint
    is copied to ``best.ckpt`` and the ranking to ``leaderboard.csv``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    configs = sample_configs(space, variant, np.random.default_rng(seed), budget, base_arch, base_train)
    jobs = [(f"run_{i:03d}", a, t, str(out_dir / f"run_{i:03d}")) for i, (a, t) in enumerate(configs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, rid, a, t, train_set, val_set, d) for rid, a, t, d in jobs]
            records = [f.result() for f in futures]
    else:
        records = [_run_one(rid, a, t, train_set, val_set, d) for rid, a, t, d in jobs]

    ok = [r for r in records if r.status == "ok"]
    if not ok:
        details = "; ".join(f"{r.run_id}: {r.diagnostic}" for r in records)
        raise SearchError(f"all {len(records)} runs diverged ({details})")
    leaderboard = sorted(records, key=lambda r: (r.best_val_loss, r.run_id))
    best = leaderboard[0]
    shutil.copyfile(out_dir / best.checkpoint, out_dir / "best.ckpt")
    write_leaderboard(leaderboard, out_dir / "leaderboard.csv")
    return SearchResult(best, leaderboard)


def write_leaderboard(records: Sequence[RunRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "run_id", "status", "best_val_loss", "best_epoch", "latent_dim", "beta",
                         "mixture_components", "temperature", "seed"])
        for rank, r in enumerate(records, 1):
            writer.writerow([rank, r.run_id, r.status, repr(r.best_val_loss), r.best_epoch, r.arch["latent_dim"],
                             repr(r.train["beta"]), r.arch["mixture_components"], r.arch["temperature"], r.seed])
