"""
Configuration management for the CroPA workbench.
All settings are loaded from environment variables with sensible defaults.
"""
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Dict
from pathlib import Path


PROMPT_DIR = Path(__file__).resolve().parent / "data" / "prompts"


class Settings(BaseSettings):
    """Workbench settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="CROPA_",
        case_sensitive=False,
        extra="ignore",
        protected_namespaces=("settings_",)
    )

    # Attack defaults (perturbation size and image step from the experimental setup)
    epsilon: float = 16 / 255
    alpha1: float = 1 / 255
    alpha2: float = 0.001
    iterations: int = 2000
    update_interval: int = 10
    num_prompts: int = 10
    target_text: str = "unknown"
    prompt_init: str = "zero"  # zero or gaussian
    prompt_init_sigma: float = 0.01

    # ToyVLM build configuration
    model_seed: int = 0
    pretrain_steps: int = 2000
    pretrain_batch_size: int = 8
    pretrain_learning_rate: float = 3e-3
    max_gen_len: int = 8

    # Prompt suite configuration
    prompt_dir: Path = PROMPT_DIR
    split_seed: int = 0
    holdout_fraction: float = 0.5

    # Evaluation configuration
    defense_max_degrees: float = 30.0

    # Run store configuration
    store_root: Path = Path("./data/store")
    workers: int = 1
    show_progress: bool = True

    # Logging Configuration
    log_level: str = "INFO"
    log_file: Path = Path("./logs/workbench.log")

    @property
    def prompt_paths(self) -> Dict[str, Path]:
        """Map each shipped task name to its prompt file."""
        return {
            task: self.prompt_dir / f"{task}.txt"
            for task in ("vqa_general", "vqa_specific", "classification", "captioning")
        }

    def ensure_directories(self):
        """Create necessary directories if they don't exist."""
        self.store_root.mkdir(parents=True, exist_ok=True)
        self.log_file.parent.mkdir(parents=True, exist_ok=True)


# Global settings instance
settings = Settings()
