"""Report and manifest models shared by the services and the CLI."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence

from pydantic import BaseModel, Field


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.17g}"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


class Report(BaseModel):
    """Base for audit / metric reports rendered as ``key=value`` lines.

    ``passed`` is None when a report carries no verdict. Fields excluded
    from the dump (per-entry arrays) are written separately as tables.
    """

    name: str
    passed: bool | None = None

    def lines(self, prefix: str = "") -> list[str]:
        return [f"{prefix}{key}={_format_value(value)}" for key, value in self.model_dump().items()]

    def render(self, prefix: str = "") -> str:
        return "\n".join(self.lines(prefix)) + "\n"

    def write(self, path: Path | str) -> Path:
        path = Path(path)
        path.write_text(self.render(), encoding="utf-8")
        return path


def write_table(path: Path | str, header: Sequence[str], rows: Sequence[Sequence[Any]], sep: str = "\t") -> Path:
    """Write a header line plus one line per row."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(sep.join(header) + "\n")
        for row in rows:
            handle.write(sep.join(_format_value(v) for v in row) + "\n")
    return path


class RunManifest(BaseModel):
    """One per CLI run; replaying ``command`` with ``flags`` reproduces the outputs."""

    command: str
    flags: dict[str, Any]
    seed: int
    graph: dict[str, int] = Field(default_factory=dict)
    timings: dict[str, float] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)

    def write(self, path: Path | str) -> Path:
        path = Path(path)
        path.write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Path | str) -> RunManifest:
        return cls.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
