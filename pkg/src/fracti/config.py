"""Configuration management for FRACTI using TOML."""

import logging
import os
import tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

HOME_ENV = "FRACTI_HOME"
DEFAULT_HOME = Path(".fracti")

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


@dataclass
class StoreConfig:
    """Contribution store settings."""
    home: Path | None = None
    principal: str = "local"  # acting principal when none is given
    default_auditor_access: bool = False


@dataclass
class RunConfig:
    """Flow execution defaults."""
    workers: int = 1
    seed: int = 0
    parallel_runs: int = 1  # concurrent experiment runs


@dataclass
class SimulationConfig:
    """Replay settings."""
    realtime: bool = False
    speed: float = 1.0  # replay speed factor when realtime is on


@dataclass
class ShowcaseConfig:
    """Use case settings: prediction task, trainers and the N/D/sigma grid."""
    window: int = 5
    learning_rate: float = 1.0
    max_iterations: int = 2000
    tolerance: float = 1e-10
    walk_steps: int = 256
    walk_seed: int = 1994
    walk_x0: float = 100.0
    n_set: list[int] = field(default_factory=lambda: [1, 2])
    d_set: list[float] = field(default_factory=lambda: [0.0, 0.1])
    sigma_set: list[float] = field(default_factory=lambda: [0.5, 1.0])
    results_dir: Path = Path("results")


@dataclass
class LoggingConfig:
    level: str = "WARNING"


@dataclass
class Config:
    """Main configuration container."""
    store: StoreConfig = field(default_factory=StoreConfig)
    run: RunConfig = field(default_factory=RunConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    showcase: ShowcaseConfig = field(default_factory=ShowcaseConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    data_path: Path | None = None  # directory of the loaded config file

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Config":
        """Create Config from a dictionary (parsed TOML)."""
        config = cls()

        if "store" in data:
            store_data = data["store"]
            home = store_data.get("home")
            config.store = StoreConfig(
                home=Path(home) if home else None,
                principal=store_data.get("principal", config.store.principal),
                default_auditor_access=bool(
                    store_data.get("default_auditor_access", config.store.default_auditor_access)
                ),
            )

        if "run" in data:
            run_data = data["run"]
            # Normalize worker counts to at least one endpoint
            workers = max(1, int(run_data.get("workers", config.run.workers)))
            parallel_runs = max(1, int(run_data.get("parallel_runs", config.run.parallel_runs)))
            config.run = RunConfig(
                workers=workers,
                seed=int(run_data.get("seed", config.run.seed)),
                parallel_runs=parallel_runs,
            )

        if "simulation" in data:
            sim_data = data["simulation"]
            speed = float(sim_data.get("speed", config.simulation.speed))
            if speed <= 0:
                speed = 1.0
            config.simulation = SimulationConfig(
                realtime=bool(sim_data.get("realtime", config.simulation.realtime)),
                speed=speed,
            )

        if "showcase" in data:
            sc_data = data["showcase"]
            defaults = config.showcase
            config.showcase = ShowcaseConfig(
                window=int(sc_data.get("window", defaults.window)),
                learning_rate=float(sc_data.get("learning_rate", defaults.learning_rate)),
                max_iterations=int(sc_data.get("max_iterations", defaults.max_iterations)),
                tolerance=float(sc_data.get("tolerance", defaults.tolerance)),
                walk_steps=int(sc_data.get("walk_steps", defaults.walk_steps)),
                walk_seed=int(sc_data.get("walk_seed", defaults.walk_seed)),
                walk_x0=float(sc_data.get("walk_x0", defaults.walk_x0)),
                n_set=[int(n) for n in sc_data.get("n_set", defaults.n_set)],
                d_set=[float(d) for d in sc_data.get("d_set", defaults.d_set)],
                sigma_set=[float(s) for s in sc_data.get("sigma_set", defaults.sigma_set)],
                results_dir=Path(sc_data.get("results_dir", defaults.results_dir)),
            )

        if "logging" in data:
            level = str(data["logging"].get("level", config.logging.level)).upper()
            if level not in LOG_LEVELS:
                level = "WARNING"
            config.logging = LoggingConfig(level=level)

        return config

    @classmethod
    def load(cls, path: Path) -> "Config":
        """Load configuration from a TOML file."""
        with open(path, "rb") as f:
            data = tomllib.load(f)
        config = cls.from_dict(data)
        config.data_path = path.parent
        return config

    @classmethod
    def load_default(cls) -> "Config":
        """Load default configuration."""
        return cls()

    @property
    def log_level(self) -> int:
        return getattr(logging, self.logging.level, logging.WARNING)


def resolve_home(config: Config | None = None) -> Path:
    """Resolve the store root: $FRACTI_HOME, then [store].home, then ./.fracti.

    A relative [store].home is taken relative to the config file it came from.
    """
    env_home = os.environ.get(HOME_ENV)
    if env_home:
        return Path(env_home)
    if config and config.store.home:
        if config.data_path is not None:
            return config.data_path / config.store.home
        return config.store.home
    return DEFAULT_HOME
