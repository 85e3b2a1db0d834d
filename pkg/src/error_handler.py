"""
Error handling and reporting for MeanFlowActions.
Provides the exception hierarchy, user-friendly error messages and error/audit logging.
"""

import os
import sys
import logging
import traceback
import json
from datetime import datetime
from typing import Optional, Dict, Any
from enum import Enum

import appdirs


class ErrorCategory(Enum):
    """Error categories for better organization"""
    CONTRACT = "contract"
    CONFIG = "configuration"
    DIVERGENCE = "training_divergence"
    DATASET = "dataset"
    CHECKPOINT = "checkpoint"
    IO = "io"
    CRITICAL = "critical"


class MeanFlowError(Exception):
    """Base class of every error raised by the package"""

    category = ErrorCategory.CRITICAL
    error_type = "general"

    def __init__(self, message: str, error_type: Optional[str] = None):
        super().__init__(message)
        if error_type is not None:
            self.error_type = error_type


class ContractViolation(MeanFlowError, ValueError):
    """Shape, length or dimension mismatch between operands"""
    category = ErrorCategory.CONTRACT
    error_type = "dimension_mismatch"


class ConfigurationError(MeanFlowError, ValueError):
    """Invalid hyperparameter, config key or precondition"""
    category = ErrorCategory.CONFIG
    error_type = "invalid_value"


class TrainingDivergence(MeanFlowError, ArithmeticError):
    """Non-finite loss during training"""
    category = ErrorCategory.DIVERGENCE
    error_type = "non_finite_loss"

    def __init__(self, step: int, loss: float):
        super().__init__(f"Training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss


class DatasetFormatError(MeanFlowError):
    """Malformed or dimension-inconsistent dataset file"""
    category = ErrorCategory.DATASET
    error_type = "bad_line"

    def __init__(self, message: str, line_no: Optional[int] = None, error_type: Optional[str] = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message, error_type)
        self.line_no = line_no


class CheckpointError(MeanFlowError):
    """Missing or corrupt network checkpoint"""
    category = ErrorCategory.CHECKPOINT
    error_type = "corrupt"


class ErrorReporter:
    """Error reporting with user-friendly messages and solutions"""

    def __init__(self, log_file_path: Optional[str] = None):
        self.error_log = []
        self.log_file_path = log_file_path
        self.logger = logging.getLogger('ErrorReporter')
        self._file_ready = False

        # Error solutions database
        self.error_solutions = {
            ErrorCategory.CONTRACT: {
                "dimension_mismatch": {
                    "message": "Operand dimensions do not match.",
                    "solution": "Check that chunk size, action dimension and observation dimension agree between dataset, config and checkpoint.",
                    "example": "A checkpoint trained with --chunk-h 20 cannot sample chunks of 10"
                },
            },
            ErrorCategory.CONFIG: {
                "unknown_key": {
                    "message": "The configuration file contains unknown keys.",
                    "solution": "Remove or rename the listed keys. Key names match the TrainConfig fields.",
                    "example": "Use 'flow_ratio', not 'flowratio'"
                },
                "invalid_value": {
                    "message": "A configuration value is out of range.",
                    "solution": "Check the allowed ranges: flow_ratio in [0,1], gamma in (0,1], adaptive_c > 0, steps >= 1.",
                    "example": "gamma=0.5 and flow_ratio=0.2 are the defaults"
                },
                "invalid_type": {
                    "message": "A configuration value has the wrong type.",
                    "solution": "Write numbers without quotes, true/false for switches and hidden_dims as a list of integers.",
                    "example": "{\"steps\": 500, \"hidden_dims\": [128, 128], \"normalize\": true}"
                },
                "empty_dataset": {
                    "message": "The dataset is empty.",
                    "solution": "Generate data first with the gen-data command.",
                    "example": "gen-data --task pickplace --episodes 100 --out runs/d1"
                },
            },
            ErrorCategory.DIVERGENCE: {
                "non_finite_loss": {
                    "message": "Training diverged (the loss became NaN or infinite).",
                    "solution": "Lower the learning rate or use the adaptive loss (gamma < 1).",
                    "example": "Try --learn-rate 3e-4"
                },
            },
            ErrorCategory.DATASET: {
                "bad_line": {
                    "message": "A dataset line could not be parsed.",
                    "solution": "The file may be truncated or edited by hand. Regenerate it with gen-data.",
                    "example": "Every line must carry obs/act vectors of the dimensions in dataset.header.json"
                },
                "missing": {
                    "message": "The dataset could not be found.",
                    "solution": "Pass the run directory written by gen-data, or the dataset.jsonl file inside it.",
                    "example": "train --data runs/d1"
                },
            },
            ErrorCategory.CHECKPOINT: {
                "missing": {
                    "message": "The checkpoint file could not be found.",
                    "solution": "Train a model first, or check the --ckpt path.",
                    "example": "eval --ckpt runs/t1/ckpt.json"
                },
                "corrupt": {
                    "message": "The checkpoint file is corrupt.",
                    "solution": "Re-run training to regenerate the checkpoint.",
                    "example": "The manifest next to the checkpoint records the command that produced it"
                },
            },
            ErrorCategory.IO: {
                "unwritable": {
                    "message": "The output location is not writable.",
                    "solution": "Choose a different --out directory or fix its permissions.",
                    "example": "--out runs/my_experiment"
                },
            },
        }

    def _ensure_file_handler(self):
        """Attach the file handler on first use so that importing has no side effects"""
        if self._file_ready:
            return
        self._file_ready = True
        if self.log_file_path is None:
            log_dir = appdirs.user_log_dir("MeanFlowActions")
            self.log_file_path = os.path.join(log_dir, 'meanflow_errors.log')
        try:
            os.makedirs(os.path.dirname(self.log_file_path), exist_ok=True)
            file_handler = logging.FileHandler(self.log_file_path, encoding='utf-8')
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(logging.Formatter(
                '%(asctime)s - %(levelname)s - %(category)s - %(message)s\n'
                'Details: %(details)s\n'
                'Traceback: %(traceback)s\n'
                '---'
            ))
            self.logger.addHandler(file_handler)
            self.logger.setLevel(logging.DEBUG)
            self.logger.propagate = False
        except Exception as e:
            logging.getLogger(__name__).warning(f"Failed to setup error log file: {e}")

    def log_audit(self, action: str, details: Optional[Dict[str, Any]] = None):
        """Log an audit/event entry to the error log file."""
        try:
            self._ensure_file_handler()
            payload = {
                "action": action,
                "details": details or {},
            }
            extra = {
                'category': 'audit',
                'details': json.dumps(payload, indent=2, default=str),
                'traceback': ''
            }
            self.logger.info(f"AUDIT: {action}", extra=extra)
        except Exception:
            # Do not raise from audit logging
            pass

    def report_error(self,
                     error: Exception,
                     category: Optional[ErrorCategory] = None,
                     error_type: Optional[str] = None,
                     context: Optional[Dict[str, Any]] = None,
                     user_message: Optional[str] = None,
                     show_console: bool = True) -> str:
        """
        Report an error with logging and user-friendly feedback

        Returns: User-friendly error message
        """
        if category is None:
            category = getattr(error, 'category', ErrorCategory.CRITICAL)
        if error_type is None:
            error_type = getattr(error, 'error_type', 'general')

        error_details = {
            'timestamp': datetime.now().isoformat(),
            'error_type': str(type(error).__name__),
            'error_message': str(error),
            'category': category.value,
            'specific_type': error_type,
            'context': context or {},
            'traceback': traceback.format_exc()
        }
        self.error_log.append(error_details)

        friendly_message = self._get_friendly_message(category, error_type, error, user_message)

        self._ensure_file_handler()
        extra = {
            'category': category.value,
            'details': json.dumps(error_details, indent=2, default=str),
            'traceback': error_details['traceback']
        }
        if category == ErrorCategory.CRITICAL:
            self.logger.critical(friendly_message, extra=extra)
        else:
            self.logger.error(friendly_message, extra=extra)

        if show_console:
            print(f"ERROR ({category.value}): {friendly_message}", file=sys.stderr)

        return friendly_message

    def _get_friendly_message(self,
                              category: ErrorCategory,
                              error_type: str,
                              error: Exception,
                              user_message: Optional[str] = None) -> str:
        """Generate user-friendly error message"""
        if user_message:
            return user_message

        if category in self.error_solutions and error_type in self.error_solutions[category]:
            error_info = self.error_solutions[category][error_type]
            return (f"{error_info['message']}\n  Details: {error}\n"
                    f"  Solution: {error_info['solution']}\n  Tip: {error_info['example']}")

        generic_messages = {
            ErrorCategory.CONTRACT: "Dimension contract violated.",
            ErrorCategory.CONFIG: "Configuration error occurred.",
            ErrorCategory.DIVERGENCE: "Training diverged.",
            ErrorCategory.DATASET: "Dataset error occurred.",
            ErrorCategory.CHECKPOINT: "Checkpoint error occurred.",
            ErrorCategory.IO: "File system error occurred.",
        }
        base_message = generic_messages.get(category, "An unexpected error occurred.")
        return f"{base_message}\n  Technical details: {str(error)[:200]}"

    def get_error_stats(self) -> Dict[str, int]:
        """Get error statistics"""
        stats = {}
        for error in self.error_log:
            category = error.get('category', 'unknown')
            stats[category] = stats.get(category, 0) + 1
        return stats

    def clear_error_log(self):
        """Clear the error log"""
        self.error_log = []

    def export_error_log(self, file_path: Optional[str] = None) -> str:
        """Export error log to JSON file"""
        if file_path is None:
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            file_path = f"error_log_{timestamp}.json"

        try:
            with open(file_path, 'w', encoding='utf-8') as f:
                json.dump(self.error_log, f, indent=2, default=str)
            return file_path
        except OSError as e:
            raise MeanFlowError(f"Failed to export error log: {e}", "unwritable") from e


# Global error reporter instance
error_reporter = ErrorReporter()


def report_error(error: Exception,
                 category: Optional[ErrorCategory] = None,
                 error_type: Optional[str] = None,
                 context: Optional[Dict[str, Any]] = None,
                 user_message: Optional[str] = None,
                 show_console: bool = True) -> str:
    """Convenience function for reporting errors"""
    return error_reporter.report_error(
        error=error,
        category=category,
        error_type=error_type,
        context=context,
        user_message=user_message,
        show_console=show_console
    )


def log_audit(action: str, details: Optional[Dict[str, Any]] = None) -> None:
    """Convenience function for audit logging without raising."""
    error_reporter.log_audit(action, details)
