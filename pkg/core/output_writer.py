"""Output writer for run artifacts: JSONL logs, CSV tables, JSON summaries."""

import csv
import json
from pathlib import Path
from typing import Any, Iterable, Iterator, List, Sequence

from .errors import PlannerError


class OutputWriter:
    """Writes artifacts under one output directory."""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def write_jsonl(self, name: str, records: Iterable[dict]) -> Path:
        return write_jsonl(self.path(name), records)

    def write_csv(self, name: str, rows: Sequence[dict], columns: Sequence[str]) -> Path:
        return write_csv(self.path(name), rows, columns)

    def write_json(self, name: str, data: Any) -> Path:
        return write_json(self.path(name), data)


def _dumps(record: Any) -> str:
    # sorted keys and no whitespace keep reruns byte-identical
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_jsonl(path: Path, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for record in records:
                f.write(_dumps(record))
                f.write("\n")
    except OSError as e:
        raise PlannerError(f"cannot write {path}: {e}") from e
    return path


def read_jsonl(path: Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise PlannerError(f"{path}:{line_no}: invalid JSON ({e.msg})") from e


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _format_cell(row.get(k)) for k in columns})
    except OSError as e:
        raise PlannerError(f"cannot write {path}: {e}") from e
    return path


def read_csv(path: Path) -> List[dict]:
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def _format_cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def write_json(path: Path, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(json.dumps(data, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    except OSError as e:
        raise PlannerError(f"cannot write {path}: {e}") from e
    return path
