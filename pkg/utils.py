import hashlib
import json
import logging
import os
import tempfile
from typing import Any, Dict, Iterable, Iterator, Mapping, Tuple

from errors import ParseError

logger = logging.getLogger(__name__)


def iter_jsonl(path: str) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """
    Iterate over a JSON-lines file.

    Blank lines are skipped. Line numbers are 1-based.

    Args:
        path: Path to a UTF-8 JSON-lines file

    Yields:
        Tuple[int, Dict]: Line number and decoded object
    """
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON ({e.msg})", line_no) from e
            if not isinstance(record, dict):
                raise ParseError("expected a JSON object", line_no)
            yield line_no, record


def dumps_jsonl(records: Iterable[Mapping[str, Any]]) -> str:
    return ''.join(json.dumps(record) + '\n' for record in records)


def atomic_write_bytes(path: str, data: bytes) -> None:
    """
    Write bytes to path through a temporary file in the same directory.

    Readers either see the previous file or the complete new one.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, temp_name = tempfile.mkstemp(dir=directory, prefix='.tmp_')
    try:
        with os.fdopen(fd, 'wb') as temp_file:
            temp_file.write(data)
        os.replace(temp_name, path)
    except Exception:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode('utf-8'))


def write_jsonl(path: str, records: Iterable[Mapping[str, Any]]) -> None:
    atomic_write_text(path, dumps_jsonl(records))
    logger.debug(f"Wrote JSON-lines file: {path}")


def write_json(path: str, payload: Any) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + '\n')


def file_sha256(path: str) -> str:
    """Calculate SHA-256 hash of a file."""
    sha256_hash = hashlib.sha256()
    with open(path, "rb") as f:
        for byte_block in iter(lambda: f.read(4096), b""):
            sha256_hash.update(byte_block)
    return sha256_hash.hexdigest()


def text_fingerprint(parts: Iterable[str], length: int = 12) -> str:
    """Short SHA-256 fingerprint of an ordered list of strings."""
    digest = hashlib.sha256('\x1f'.join(parts).encode('utf-8')).hexdigest()
    return digest[:length]
