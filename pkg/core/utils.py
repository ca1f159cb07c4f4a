"""Utility functions and classes for core functionality."""
import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np
import torch
from colorama import init, Fore, Style

# Initialize colorama for Windows support
init()


class Colors:
    """Color definitions for consistent terminal output."""
    HEADER = Fore.LIGHTBLUE_EX
    TABLE = Fore.CYAN
    ERROR = Fore.RED
    LOG = Fore.YELLOW
    SUCCESS = Fore.GREEN
    WARNING = Fore.YELLOW
    RESET = Style.RESET_ALL

    @classmethod
    def format(cls, text: str, color) -> str:
        """Format text with color and reset."""
        return f"{color}{text}{cls.RESET}"

    @classmethod
    def error(cls, text: str) -> str:
        return cls.format(f"🚫 {text}", cls.ERROR)

    @classmethod
    def success(cls, text: str) -> str:
        return cls.format(f"✓ {text}", cls.SUCCESS)

    @classmethod
    def warning(cls, text: str) -> str:
        return cls.format(f"⚠ {text}", cls.WARNING)

    @classmethod
    def info(cls, text: str) -> str:
        return cls.format(f"ℹ {text}", cls.LOG)

    @classmethod
    def header(cls, text: str) -> str:
        return cls.format(text, cls.HEADER)

    @classmethod
    def table(cls, text: str) -> str:
        return cls.format(text, cls.TABLE)


def parameter_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over a module's state dict, keys in sorted order."""
    sha256_hash = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        sha256_hash.update(name.encode('utf-8'))
        sha256_hash.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return sha256_hash.hexdigest()


def derive_seed(*parts: int) -> int:
    """Stable child seed from a parent seed and integer tags."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)


def read_json(path: Path) -> Any:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)
