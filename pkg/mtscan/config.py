"""
Configuration Module
Centralized configuration for the mtscan library and CLI
All configurable parameters are defined here for easy management
"""

import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


class Config:
    """Library configuration - all tunable parameters in one place"""

    # ========================================================================
    # ENVIRONMENT VARIABLES
    # ========================================================================

    # Application Settings
    DEBUG: bool = os.getenv("DEBUG", "False").lower() == "true"
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # Worker cap for chunked scans and data generation
    MTK_THREADS: int = int(os.getenv("MTK_THREADS", "1"))

    # Default dtype for training runs ("f32" or "f64")
    MTK_DTYPE: str = os.getenv("MTK_DTYPE", "f32")

    # ========================================================================
    # NUMERICS
    # ========================================================================

    # Normalization constants (unstated in the source model, fixed here)
    LAYERNORM_EPS: float = 1e-5
    BATCHNORM_EPS: float = 1e-5
    BATCHNORM_MOMENTUM: float = 0.1

    # Softplus switches to the identity branch above this input
    SOFTPLUS_THRESHOLD: float = 20.0

    # Default chunk length for selective_scan_chunked and for the
    # backward recomputation of hidden states
    SCAN_CHUNK_SIZE: int = 64

    # Δ initialization range after softplus
    DT_MIN: float = 1e-3
    DT_MAX: float = 1e-1

    # ========================================================================
    # MODEL DEFAULTS (toy scale)
    # ========================================================================

    BASE_CHANNELS: int = 32
    STATE_SIZE: int = 8
    EXPANSION_FACTOR: int = 2
    ATTENTION_WINDOW: int = 4
    ATTENTION_HEADS: int = 2
    SEMSEG_CLASSES: int = 4

    # ========================================================================
    # TRAINING
    # ========================================================================

    SEED: int = 0
    BATCH_SIZE: int = 4
    IMAGE_SIZE: int = 64
    DATASET_SIZE: int = 64
    EVAL_SIZE: int = 16
    EVAL_INTERVAL: int = 100
    LEARNING_RATE: float = 1e-4
    WEIGHT_DECAY: float = 1e-6
    ADAM_BETAS: tuple = (0.9, 0.999)
    ADAM_EPS: float = 1e-8
    POLY_POWER: float = 0.9

    # Boundary is a 2-class problem with the positive class weighted up
    BOUNDARY_POSITIVE_WEIGHT: float = 0.95

    # ========================================================================
    # VERIFICATION & BENCHMARKS
    # ========================================================================

    GRADCHECK_EPS: float = 1e-5
    GRADCHECK_TOL: float = 1e-4

    # Entries probed per parameter tensor in the finite-difference suites
    GRADCHECK_MAX_ENTRIES: int = 6

    # FLOPs charged per (position, channel, state) element of a selective scan:
    # exp + mul for Abar, mul for Bbar, mul for Bbar*x, mul + add for the
    # recurrence, mul + add for the C readout
    SCAN_FLOPS_PER_STATE: int = 8

    BENCH_LENGTHS: tuple = (256, 512, 1024, 2048, 4096, 8192)
    BENCH_REPEATS: int = 3
    BENCH_CHANNELS: int = 16

    # Logging identifier prefix
    LOGGER_NAME: str = "mtscan"

    @classmethod
    def validate(cls) -> bool:
        """
        Validate environment-driven settings

        Returns:
            True if every setting is usable, False otherwise
        """
        problems = []
        if cls.MTK_THREADS < 1:
            problems.append(f"MTK_THREADS must be >= 1, got {cls.MTK_THREADS}")
        if cls.MTK_DTYPE not in ("f32", "f64"):
            problems.append(f"MTK_DTYPE must be f32 or f64, got {cls.MTK_DTYPE}")
        if cls.LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            problems.append(f"LOG_LEVEL unknown: {cls.LOG_LEVEL}")

        if problems:
            print(f"[ERROR] Invalid environment: {'; '.join(problems)}")
            return False

        print("[OK] Environment settings are valid")
        return True

    @classmethod
    def print_config(cls) -> None:
        """Print configuration"""
        print("\n" + "=" * 70)
        print("  MTSCAN CONFIGURATION")
        print("=" * 70)

        print("\n[ENVIRONMENT]")
        print(f"  Debug Mode: {cls.DEBUG}")
        print(f"  Log Level: {cls.LOG_LEVEL}")
        print(f"  Threads: {cls.MTK_THREADS}")
        print(f"  Training dtype: {cls.MTK_DTYPE}")

        print("\n[NUMERICS]")
        print(f"  LayerNorm eps: {cls.LAYERNORM_EPS}")
        print(f"  BatchNorm eps / momentum: {cls.BATCHNORM_EPS} / {cls.BATCHNORM_MOMENTUM}")
        print(f"  Scan chunk size: {cls.SCAN_CHUNK_SIZE}")
        print(f"  Δ init range: [{cls.DT_MIN}, {cls.DT_MAX}]")

        print("\n[MODEL DEFAULTS]")
        print(f"  Base channels: {cls.BASE_CHANNELS}")
        print(f"  State size: {cls.STATE_SIZE}")
        print(f"  Expansion factor: {cls.EXPANSION_FACTOR}")
        print(f"  Attention window / heads: {cls.ATTENTION_WINDOW} / {cls.ATTENTION_HEADS}")

        print("\n[TRAINING]")
        print(f"  Seed: {cls.SEED}")
        print(f"  Batch size: {cls.BATCH_SIZE}")
        print(f"  Image size: {cls.IMAGE_SIZE}")
        print(f"  Learning rate: {cls.LEARNING_RATE}")
        print(f"  Weight decay: {cls.WEIGHT_DECAY}")
        print(f"  Poly power: {cls.POLY_POWER}")
        print(f"  Eval interval: {cls.EVAL_INTERVAL}")

        print("\n[VERIFICATION]")
        print(f"  Gradcheck eps / tol: {cls.GRADCHECK_EPS} / {cls.GRADCHECK_TOL}")
        print(f"  Bench lengths: {list(cls.BENCH_LENGTHS)}")

        print("=" * 70 + "\n")


# Export config instance
config = Config()


if __name__ == "__main__":
    # Test configuration when run directly
    config.print_config()
    config.validate()
