"""File helpers: atomic writes, JSON/JSONL, digests."""

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Any, Iterator, List, Tuple, Union

PathLike = Union[str, Path]


def _file_mode() -> int:
    """Mode a plain open() would give a new file under the current umask."""
    umask = os.umask(0)
    os.umask(umask)
    return 0o666 & ~umask


def write_atomic(path: PathLike, data: Union[bytes, str]) -> Path:
    """Write data to path via a temp file in the same directory, then rename.

    Args:
        path: Destination file
        data: Bytes, or text written as UTF-8

    Returns:
        The destination path
    """
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data

    with tempfile.NamedTemporaryFile(mode='wb', dir=parent, prefix=f".{path.name}.", delete=False) as tmp:
        tmp.write(payload)
        tmp.flush()
        os.fsync(tmp.fileno())
        tmp_path = tmp.name

    try:
        os.chmod(tmp_path, _file_mode())
        shutil.move(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return path


def dumps_json(obj: Any) -> str:
    """Stable JSON text (sorted keys, trailing newline)."""
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_json(path: PathLike, obj: Any) -> Path:
    return write_atomic(path, dumps_json(obj))


def read_json(path: PathLike) -> Any:
    with open(path, 'r', encoding="utf-8") as f:
        return json.load(f)


def iter_lines(path: PathLike) -> Iterator[Tuple[int, str]]:
    """Yield (1-based line number, line without newline) for non-blank lines."""
    with open(path, 'r', encoding="utf-8") as f:
        for number, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if line.strip():
                yield number, line


def write_lines(path: PathLike, lines: List[str]) -> Path:
    return write_atomic(path, "".join(line + "\n" for line in lines))


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
