import hashlib
import os
from typing import Iterable, List, Sequence, Tuple


def calculate_file_hash(filepath: str) -> str:
    """Calculates SHA-256 hash of a file."""
    sha256_hash = hashlib.sha256()
    with open(filepath, "rb") as f:
        # Read and update hash string value in blocks of 4K
        for byte_block in iter(lambda: f.read(4096), b""):
            sha256_hash.update(byte_block)
    return sha256_hash.hexdigest()


def text_hash(text: str) -> str:
    """SHA-256 of a UTF-8 string (same digest as hashing the file it would be written to)."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def ensure_parent(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# ─── Line-oriented corpora ───────────────────────────────────────────────────

def read_token_lines(path: str) -> List[List[str]]:
    """One sentence per line, tokens separated by single spaces."""
    with open(path, "r", encoding="utf-8") as f:
        return [line.split() for line in f.read().splitlines()]


def write_token_lines(path: str, sentences: Iterable[Sequence[str]]):
    ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for tokens in sentences:
            f.write(" ".join(tokens) + "\n")


# ─── TSV reports ─────────────────────────────────────────────────────────────

def _cell(value) -> str:
    if value is None:
        return "absent"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_tsv(path: str, rows: Iterable[Sequence], header: Sequence[str] = ()):
    """Writes rows as tab-separated text. None is rendered as 'absent'."""
    ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if header:
            f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(_cell(v) for v in row) + "\n")


def read_tsv(path: str, skip_header: bool = False) -> List[Tuple[str, ...]]:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if skip_header and lines:
        lines = lines[1:]
    return [tuple(line.split("\t")) for line in lines if line]
