import logging
import os
import sys
from datetime import datetime
from typing import Optional

from .config import LOG_DIR, LOG_LEVEL

FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logger(name: str = 'longmix', log_dir: Optional[str] = None, level: Optional[str] = None):
    """Set up logger with console (stderr) and optional daily file handlers"""
    logger = logging.getLogger(name)
    resolved_level = getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO)
    logger.setLevel(resolved_level)

    # Reconfiguring replaces our handlers instead of stacking them
    for handler in logger.handlers[:]:
        if getattr(handler, '_longmix', False):
            logger.removeHandler(handler)
            handler.close()

    formatter = logging.Formatter(FORMAT)

    # Reports go to files; the console only ever carries log lines
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(resolved_level)
    console_handler.setFormatter(formatter)
    console_handler._longmix = True
    logger.addHandler(console_handler)

    log_dir = log_dir or LOG_DIR
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        log_file = os.path.join(log_dir, f'longmix_{datetime.now().strftime("%Y%m%d")}.log')
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(resolved_level)
        file_handler.setFormatter(formatter)
        file_handler._longmix = True
        logger.addHandler(file_handler)

    # Library modules log under "src.*"; route them through the same handlers
    if name != 'src':
        package_logger = logging.getLogger('src')
        package_logger.setLevel(resolved_level)
        package_logger.handlers = [h for h in package_logger.handlers if not getattr(h, '_longmix', False)]
        for handler in logger.handlers:
            package_logger.addHandler(handler)
        package_logger.propagate = False

    return logger
