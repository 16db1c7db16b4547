"""Application configuration loaded from environment variables / .env."""

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # Runs
    seed: int = 1
    output_dir: str = "outputs"
    log_level: str = "INFO"
    workers: int = 1

    # Traversal
    fanout: int = 3
    traversal_chunk_trees: int = 1024  # trees per canonical work unit
    sampling_tolerance: float = 1e-9

    # Embedding training
    dim: int = 128
    window: int = 5
    negatives: int = 10
    contrastive_samples: int = 5
    learning_rate: float = 0.5
    lr_decay: float = 0.2
    lr_decay_every: int = 50
    epochs: int = 200
    log_every: int = 10

    # Link prediction
    test_fraction: float = 0.2
    eval_negatives_per_edge: int = 1

    # Audits / oracles
    oracle_max_nodes: int = 10_000
    enumeration_limit: int = 1_000_000
    audit_sigma: float = 5.0
    variance_slack: float = 0.15
    audit_runs: int = 10_000

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        env_prefix = "GTTF_"


settings = Settings()
