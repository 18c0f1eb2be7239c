import hashlib
from pathlib import Path
from typing import Iterable, Optional


def format_float(value: Optional[float]) -> str:
    """17 significant digits: enough for a bit-exact float round trip."""
    if value is None:
        return ""
    return format(float(value), ".17g")


def format_row(values: Iterable) -> list:
    """Floats at full precision, everything else as-is."""
    out = []
    for v in values:
        if isinstance(v, bool) or v is None:
            out.append("" if v is None else str(v).lower())
        elif isinstance(v, float):
            out.append(format_float(v))
        else:
            out.append(v)
    return out


def git_blob_hash(path: Path) -> str:
    """Same digest as ``git hash-object <path>``."""
    data = Path(path).read_bytes()
    header = f"blob {len(data)}\0".encode()
    return hashlib.sha1(header + data).hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
