"""Bundled public-domain corpus and calibration sampling."""

from __future__ import annotations

from dataclasses import dataclass

from pathlib import Path

import numpy as np

from .model import byte_tokenize

CORPUS_DIR = Path(__file__).parent / "corpus"
BUNDLED = ("train", "calib", "eval", "finetune")


def load_text(source: str | Path) -> bytes:
    """Raw bytes of a bundled split (``"bundled:train"`` or plain ``"train"``) or a file."""
    s = str(source)
    name = s.split(":", 1)[1] if s.startswith("bundled:") else s
    if name in BUNDLED and not Path(s).exists():
        return (CORPUS_DIR / f"{name}.txt").read_bytes()
    path = Path(s)
    if not path.is_file():
        raise FileNotFoundError(f"corpus not found: {s}")
    return path.read_bytes()


def load_tokens(source: str | Path) -> np.ndarray:
    return byte_tokenize(load_text(source))


def sample_windows(tokens: np.ndarray, count: int, length: int,
                   rng: np.random.Generator) -> np.ndarray:
    """``count`` random contiguous windows of ``length`` tokens, shape (count, length)."""
    if len(tokens) < length:
        raise ValueError(f"corpus has {len(tokens)} tokens, need at least {length}")
    starts = rng.integers(0, len(tokens) - length + 1, size=count)
    return np.stack([tokens[s:s + length] for s in starts]) if count else np.zeros((0, length), np.int64)


@dataclass(frozen=True)
class CalibrationSet:
    samples: np.ndarray  # (D, seq_len)
    seq_len: int
    source: str
    seed: int

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[1] != self.seq_len:
            raise ValueError("calibration samples must have shape (D, seq_len)")
        if self.samples.shape[0] < 2:
            raise ValueError(
                "calibration needs D >= 2 samples: the fluctuation indicator uses the "
                "Bessel-corrected variance with divisor D - 1")

    @property
    def count(self) -> int:
        return self.samples.shape[0]


def calibration_set(source: str | Path, count: int = 50, seq_len: int = 128,
                    seed: int = 0) -> CalibrationSet:
    """Random windows from ``source``; each sample is ``seq_len`` tokens."""
    if count < 2:
        raise ValueError(
            "calibration needs D >= 2 samples: the fluctuation indicator uses the "
            "Bessel-corrected variance with divisor D - 1")
    rng = np.random.default_rng(seed)
    windows = sample_windows(load_tokens(source), count, seq_len, rng)
    return CalibrationSet(windows, seq_len, str(source), seed)
