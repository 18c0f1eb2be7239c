import logging
from concurrent_log_handler import ConcurrentRotatingFileHandler
from pathlib import Path
from typing import Optional

from expotwist.config import settings


class LogConfig:
    """Manages logging configuration with dynamic log level"""

    def __init__(self, log_dir: Optional[str] = None, log_file: str = "expotwist.log"):
        self.log_dir = Path(log_dir) if log_dir else None
        self.log_file = log_file
        self.logger = None

    def setup_logging(self, log_level: str = "INFO", to_file: bool = True):
        """Initialize the package logger (rotating file + console)"""
        self.logger = logging.getLogger("expotwist")
        self.logger.setLevel(getattr(logging, log_level.upper()))

        # Remove existing handlers to avoid duplicates
        self.logger.handlers.clear()

        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )

        if to_file:
            log_dir = self.log_dir or settings.log_dir
            log_dir.mkdir(parents=True, exist_ok=True)

            # Rotates at 10MB, keeps 10 backups, file locking so parallel runs
            # sharing one log directory don't clobber each other
            file_handler = ConcurrentRotatingFileHandler(
                filename=str(log_dir / self.log_file),
                maxBytes=10 * 1024 * 1024,  # 10MB
                backupCount=10,
                encoding="utf-8",
                use_gzip=True
            )
            file_handler.setFormatter(formatter)
            self.logger.addHandler(file_handler)

        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        self.logger.addHandler(console_handler)

        return self.logger


# Global log config instance
log_config = LogConfig()
