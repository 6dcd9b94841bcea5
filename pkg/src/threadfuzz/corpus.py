"""On-disk corpus layout and schema-checked JSON reports.

Layout of a campaign directory::

    program.mtir              copy of the fuzzed program
    campaign.json             CampaignReport (wall time only under "timing")
    queue/id_000000           seed bytes
    queue/id_000000.json      seed metadata
    crashes/key_<id>/input    first input that produced each crash key
    crashes/key_<id>/crash.json
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema

from .fuzzer import CampaignReport

SCHEMAS = ("analysis_report", "campaign", "seed_meta", "replay_report", "bench_table")


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("threadfuzz").joinpath(f"data/schemas/{name}.schema.json").read_text()
    return json.loads(text)


def validate_report(doc: dict, schema: str) -> None:
    """Raise ``jsonschema.ValidationError`` if ``doc`` does not match the named schema."""
    jsonschema.validate(doc, load_schema(schema))


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_json(path: Path, doc: dict, schema: str | None = None) -> None:
    if schema is not None:
        validate_report(doc, schema)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(doc))


def strip_timing(doc: dict) -> dict:
    """Copy of a report without its wall-clock fields."""
    return {k: v for k, v in doc.items() if k != "timing"}


@dataclass
class StoredSeed:
    id: int
    data: bytes
    meta: dict


def write_campaign(out: Path, report: CampaignReport, program_text: str) -> None:
    out = Path(out)
    (out / "queue").mkdir(parents=True, exist_ok=True)
    (out / "crashes").mkdir(parents=True, exist_ok=True)
    (out / "program.mtir").write_text(program_text)
    for entry in report.queue:
        name = f"id_{entry['id']:06d}"
        (out / "queue" / name).write_bytes(bytes.fromhex(entry["data_hex"]))
        write_json(out / "queue" / f"{name}.json", entry, "seed_meta")
    for crash in report.crashes:
        d = out / "crashes" / f"key_{crash['key_id']}"
        d.mkdir(parents=True, exist_ok=True)
        (d / "input").write_bytes(bytes.fromhex(crash["data_hex"]))
        write_json(d / "crash.json", crash)
    write_json(out / "campaign.json", report.to_dict(), "campaign")


def load_queue(corpus: Path) -> list[StoredSeed]:
    """Seeds of a campaign directory, in id order. Metadata may be missing."""
    qdir = Path(corpus) / "queue"
    if not qdir.is_dir():
        raise FileNotFoundError(f"{corpus}: no queue/ directory")
    out = []
    for path in sorted(qdir.glob("id_*")):
        if path.suffix == ".json":
            continue
        sid = int(path.name[3:])
        meta_path = path.with_name(path.name + ".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        out.append(StoredSeed(sid, path.read_bytes(), meta))
    return out


def load_seed_inputs(paths: list[Path]) -> list[bytes]:
    """Initial seeds from files or directories (directories are read in name order)."""
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(f.read_bytes() for f in sorted(p.iterdir()) if f.is_file() and f.suffix != ".json")
        else:
            out.append(p.read_bytes())
    return out
