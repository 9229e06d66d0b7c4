from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Sequence


def ensure_dir(p: Path) -> None:
    p.mkdir(parents=True, exist_ok=True)


def canonical_json(d: Any) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def digest(d: Any, length: int = 12) -> str:
    return hashlib.sha256(canonical_json(d).encode("utf-8")).hexdigest()[:length]


def serialize_json(d: Dict[str, Any]) -> str:
    return json.dumps(d, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def read_json(path: Path) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_json(path: Path, d: Dict[str, Any]) -> None:
    path = Path(path)
    ensure_dir(path.parent)
    path.write_text(serialize_json(d), encoding="utf-8")


def write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    path = Path(path)
    ensure_dir(path.parent)
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(header))
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def stage_dir(base_dir: Path, stage: str, stage_digest: str) -> Path:
    return base_dir / "stages" / f"{stage}-{stage_digest}"

