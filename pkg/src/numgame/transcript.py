"""Episode-level game logs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence


@dataclass
class Transcript:
    """Append-only list of per-episode records.

    Each record is a dict with at least ``epoch``, ``phase``, ``sender_n``,
    ``sender_i``, ``predicted_n``, ``correct`` and ``eff_len``, plus either
    ``tokens`` and ``key`` (token channel) or ``strokes`` (sketch channel).
    """

    channel: str
    records: List[dict] = field(default_factory=list)
    use_terminator: bool = True
    side: int = 64

    def append(self, record: dict) -> None:
        self.records.append(record)

    def extend(self, records: Iterable[dict]) -> None:
        self.records.extend(records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[dict]:
        return iter(self.records)

    def select(self, classes: Optional[Sequence[int]] = None, correct: Optional[bool] = None,
               phase: Optional[str] = None, epoch: Optional[int] = None) -> "Transcript":
        keep = set(int(c) for c in classes) if classes is not None else None
        out = [
            r for r in self.records
            if (keep is None or r["sender_n"] in keep)
            and (correct is None or bool(r["correct"]) == correct)
            and (phase is None or r.get("phase") == phase)
            and (epoch is None or r.get("epoch") == epoch)
        ]
        return Transcript(self.channel, out, self.use_terminator, self.side)

    def to_jsonl(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_jsonl(cls, path, channel: Optional[str] = None, use_terminator: bool = True,
                   side: int = 64) -> "Transcript":
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if channel is None:
            channel = "sketch" if records and "strokes" in records[0] else "discrete"
        return cls(channel, records, use_terminator, side)
