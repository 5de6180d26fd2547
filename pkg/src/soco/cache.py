"""JSON-lines proposal cache: one ``{"image_id", "width", "height", "boxes"}`` object per line."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from soco.errors import FormatError
from soco.proposals import BBox


@dataclass
class ProposalRecord:
    image_id: str
    width: int
    height: int
    boxes: list[BBox]

    def to_json(self) -> str:
        return json.dumps({"image_id": self.image_id, "width": self.width, "height": self.height,
                           "boxes": [list(map(float, b)) for b in self.boxes]})


def write_cache(path: str | Path, records: Iterable[ProposalRecord]) -> None:
    """Write records sorted by image id so the file does not depend on processing order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [r.to_json() for r in sorted(records, key=lambda r: r.image_id)]
    path.write_text("".join(line + "\n" for line in lines))


def read_cache(path: str | Path) -> list[ProposalRecord]:
    out = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read proposal cache {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            out.append(ProposalRecord(str(d["image_id"]), int(d["width"]), int(d["height"]),
                                      [BBox(*map(float, b)) for b in d["boxes"]]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{n}: bad proposal record ({exc})") from None
    return out
