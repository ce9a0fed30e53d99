import logging
import logging.handlers
import os
from datetime import datetime
from typing import Any, Mapping, Optional

from pythonjsonlogger import jsonlogger

from config import BaseConfig

OWNED_ATTR = "_trajmask_owned"


def setup_logging(
    level: str = BaseConfig.LOG_LEVEL,
    log_dir: Optional[str] = None,
    json_logs: bool = False
) -> logging.Logger:
    """Configure logging for the toolkit."""

    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    # Drop handlers installed by a previous call; foreign handlers stay
    for handler in list(root_logger.handlers):
        if getattr(handler, OWNED_ATTR, False):
            root_logger.removeHandler(handler)
            handler.close()

    log_format = logging.Formatter(BaseConfig.LOG_FORMAT)

    # Console handler
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(log_format)
    console_handler.setLevel(level)
    setattr(console_handler, OWNED_ATTR, True)
    root_logger.addHandler(console_handler)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        stamp = datetime.now().strftime('%Y%m%d_%H%M%S')

        if json_logs:
            file_format = jsonlogger.JsonFormatter(
                '%(asctime)s %(name)s %(levelname)s %(filename)s %(lineno)d %(message)s'
            )
        else:
            file_format = log_format

        # File handler for all logs
        file_handler = logging.handlers.RotatingFileHandler(
            os.path.join(log_dir, f"trajmask_{stamp}.log"),
            maxBytes=10485760,  # 10MB
            backupCount=5
        )
        file_handler.setFormatter(file_format)
        setattr(file_handler, OWNED_ATTR, True)
        root_logger.addHandler(file_handler)

        # Error log file handler
        error_file_handler = logging.handlers.RotatingFileHandler(
            os.path.join(log_dir, f"error_{stamp}.log"),
            maxBytes=10485760,  # 10MB
            backupCount=5
        )
        error_file_handler.setFormatter(file_format)
        error_file_handler.setLevel(logging.ERROR)
        setattr(error_file_handler, OWNED_ATTR, True)
        root_logger.addHandler(error_file_handler)

    return root_logger


def log_error(logger, error, additional_info=None):
    """Log error information with stack trace."""
    logger.error(f"Error: {str(error)}")
    if additional_info:
        logger.error(f"Additional Information: {additional_info}")
    logger.debug("Stack Trace:", exc_info=error)


# Performance logging
def log_performance_metrics(logger, start_time, end_time, operation_name):
    """Log performance metrics for operations."""
    duration = end_time - start_time
    logger.info(f"Operation '{operation_name}' completed in {duration:.2f} seconds")


# Data processing logging
def log_data_processing(logger, operation, input_size, output_size):
    """Log data processing operations."""
    logger.info(
        f"Data Processing - Operation: {operation}, Input Size: {input_size}, Output Size: {output_size}"
    )


# Training logging
def log_training_step(logger, record: Mapping[str, Any]):
    """Log one loss trace record."""
    logger.info(
        "step %d - loss %.6f (cls %.6f, reg %.6f) - masked cells %d/%d",
        record['step'],
        record['loss_total'],
        record['loss_cls'],
        record['loss_reg'],
        record['masked_state_cells'],
        record['masked_action_cells'],
    )


# Evaluation logging
def log_task_result(logger, row: Mapping[str, Any]):
    """Log the headline metrics of one evaluation task."""
    logger.info(
        f"Task {row['task']}: accuracy {row['accuracy']:.4f}, "
        f"recall range {row['recall_range']:.4f}, bias ratio {row['bias_ratio']:.4f}, "
        f"mse {row['mse']:.5f}"
    )
