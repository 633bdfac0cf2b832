"""Utility functions for logging configuration and training-run tracking."""
import os
import json
import logging
from logging.handlers import RotatingFileHandler

from constants import LOG_DIR

def setup_logging():
    """Configure logging with both file and console output.

    Sets up rotating file handlers for application logs and errors,
    plus console output for real-time monitoring.

    Returns:
        logging.Logger: Configured logger instance
    """
    root_logger = logging.getLogger()

    # Handlers already attached, keep a single set
    if root_logger.handlers:
        return logging.getLogger(__name__)

    os.makedirs(LOG_DIR, exist_ok=True)

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    file_handler = RotatingFileHandler(
        os.path.join(LOG_DIR, 'convvitmamba_app.log'),
        maxBytes=10*1024*1024,  # 10MB
        backupCount=5,
        encoding='utf-8'
    )
    file_handler.setFormatter(formatter)
    file_handler.setLevel(logging.DEBUG)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    console_handler.setLevel(logging.INFO)

    root_logger.setLevel(logging.DEBUG)
    root_logger.addHandler(file_handler)
    root_logger.addHandler(console_handler)

    # Separate error log for failed runs
    error_handler = RotatingFileHandler(
        os.path.join(LOG_DIR, 'convvitmamba_errors.log'),
        maxBytes=5*1024*1024,  # 5MB
        backupCount=3,
        encoding='utf-8'
    )
    error_handler.setFormatter(formatter)
    error_handler.setLevel(logging.ERROR)
    root_logger.addHandler(error_handler)

    return logging.getLogger(__name__)

def setup_run_logging(output_dir, run_id):
    """Setup a JSON-lines training log for one run.

    Each record is written verbatim, one JSON object per line, so the file
    can be replayed without a log parser.

    Args:
        output_dir (str): Run directory receiving training_log.jsonl
        run_id (str): Identifier keeping loggers of concurrent runs apart

    Returns:
        logging.Logger: Run-specific logger instance
    """
    run_logger = logging.getLogger(f'training_{run_id}')

    # Drop handlers of an earlier run that reused this id
    for handler in list(run_logger.handlers):
        handler.close()
        run_logger.removeHandler(handler)

    os.makedirs(output_dir, exist_ok=True)

    run_handler = logging.FileHandler(
        os.path.join(output_dir, 'training_log.jsonl'),
        mode='w',
        encoding='utf-8'
    )
    run_handler.setFormatter(logging.Formatter('%(message)s'))
    run_logger.addHandler(run_handler)
    run_logger.setLevel(logging.INFO)
    run_logger.propagate = False

    return run_logger

def close_run_logging(run_logger):
    """Flush and detach the file handlers of a run logger."""
    for handler in list(run_logger.handlers):
        handler.close()
        run_logger.removeHandler(handler)

def log_epoch(record, run_logger):
    """Log a single epoch record.

    Args:
        record (dict): {epoch, train_loss, val_oa, lr}
        run_logger: Logger returned by setup_run_logging, or None
    """
    if run_logger is None:
        return
    run_logger.info(json.dumps(record, sort_keys=True))
