import hashlib
import logging
import os
import sys

import yaml


def setup_logging(log_level='INFO'):
    numeric_level = getattr(logging, str(log_level).upper(), logging.INFO)

    formatter = logging.Formatter(
        fmt='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    root_logger = logging.getLogger()
    root_logger.setLevel(numeric_level)

    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(numeric_level)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    return root_logger


def ensure_directory_exists(directory_path):
    if directory_path:
        os.makedirs(directory_path, exist_ok=True)


def config_hash(data):
    """sha256 of the canonical (key-sorted) YAML dump of a config mapping."""
    canonical = yaml.safe_dump(data, sort_keys=True, default_flow_style=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def parse_extended(value):
    """Accept numbers, YAML .inf, and the strings 'inf'/'infinity'."""
    if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "infinity", "∞"):
        return float("inf")
    return float(value)
