import os
from dotenv import load_dotenv

load_dotenv()


class Config:
    """Application configuration"""

    # Worker threads for scene rendering and corpus evaluation
    DERAIN_THREADS = int(os.getenv('DERAIN_THREADS', os.cpu_count() or 1))

    # Logging
    LOG_LEVEL = os.getenv('DERAIN_LOG_LEVEL', 'INFO').upper()
    LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

    # Master seed used when a command is run without --seed
    DEFAULT_SEED = int(os.getenv('DERAIN_SEED', 0))

    # Lower bound on any value passed through a reciprocal (1/alpha stays finite)
    EPS_RECIP = 1e-3

    @staticmethod
    def validate():
        """Validate configuration values"""
        if Config.DERAIN_THREADS < 1:
            raise ValueError("DERAIN_THREADS must be a positive integer")
        if Config.LOG_LEVEL not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ValueError(f"DERAIN_LOG_LEVEL is not a logging level: {Config.LOG_LEVEL}")
        if Config.DEFAULT_SEED < 0:
            raise ValueError("DERAIN_SEED must be nonnegative")
