"""Root-seed fan-out: every random stream derives from one root seed
XOR-ed with a CRC32 tag, so runs are reproducible end to end."""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(root: int, tag: str) -> int:
    """Sub-seed for a named component: ``root XOR crc32(tag)``, 32-bit."""
    return (int(root) ^ zlib.crc32(tag.encode("utf-8"))) & 0xFFFFFFFF


def rng_for(root: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, tag))
