"""Dataset manifests: the image/label availability matrix on disk.

A manifest is a JSON document describing one dataset: subjects, their
timepoints (image + optional white-matter mask and label files), which
label kinds the dataset provides, and the train/test split. Schema:

    {
      "schema": 1,
      "name": str,
      "subjects": [
        {
          "id": str,
          "format": "cross_sectional" | "longitudinal",
          "availability": {"all_t1": bool, "all_t2": bool,
                           "new_t2": bool, "vanishing_t2": bool},
          "split": "train" | "test",
          "timepoints": [
            {"image": path, "wm": path?, "all": path?,
             "new": path?, "vanishing": path?}
          ]
        }
      ]
    }

Validation collects every problem it can find and reports them together;
single-error ping-pong is miserable when debugging a dataset layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ManifestParseError, ValidationError

SCHEMA_VERSION = 1
_FORMATS = ("cross_sectional", "longitudinal")
_SPLITS = ("train", "test")
_FLAG_KEYS = ("all_t1", "all_t2", "new_t2", "vanishing_t2")
_TP_KEYS = ("image", "wm", "all", "new", "vanishing")


@dataclass(frozen=True)
class LabelAvailability:
    all_t1: bool = False
    all_t2: bool = False
    new_t2: bool = False
    vanishing_t2: bool = False

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in _FLAG_KEYS}


@dataclass(frozen=True)
class Timepoint:
    image: str
    wm: str | None = None
    all: str | None = None
    new: str | None = None
    vanishing: str | None = None

    def as_dict(self) -> dict:
        out = {"image": self.image}
        for key in ("wm", "all", "new", "vanishing"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    format: str
    availability: LabelAvailability
    split: str
    timepoints: tuple[Timepoint, ...]

    @property
    def is_longitudinal(self) -> bool:
        return self.format == "longitudinal"

    @property
    def n_timepoints(self) -> int:
        return len(self.timepoints)

    def as_dict(self) -> dict:
        return {
            "id": self.id,
            "format": self.format,
            "availability": self.availability.as_dict(),
            "split": self.split,
            "timepoints": [tp.as_dict() for tp in self.timepoints],
        }

    def invariant_errors(self) -> list[str]:
        """Record-level invariant violations (no file access)."""
        errs = []
        if self.format == "cross_sectional" and self.n_timepoints != 1:
            errs.append(f"subject {self.id}: cross_sectional requires exactly "
                        f"one timepoint, has {self.n_timepoints}")
        if self.format == "longitudinal" and self.n_timepoints < 2:
            errs.append(f"subject {self.id}: longitudinal requires >= 2 "
                        f"timepoints, has {self.n_timepoints}")
        av = self.availability
        if (av.new_t2 or av.vanishing_t2) and self.format != "longitudinal":
            errs.append(f"subject {self.id}: new_t2/vanishing_t2 labels imply "
                        f"a longitudinal subject")
        # declared availability must be backed by files in the record
        if av.all_t1 and self.timepoints and self.timepoints[0].all is None:
            errs.append(f"subject {self.id}: all_t1 declared but timepoint 1 "
                        f"has no 'all' label")
        for k, tp in enumerate(self.timepoints[1:], start=2):
            if av.all_t2 and tp.all is None:
                errs.append(f"subject {self.id}: all_t2 declared but timepoint "
                            f"{k} has no 'all' label")
            if av.new_t2 and tp.new is None:
                errs.append(f"subject {self.id}: new_t2 declared but timepoint "
                            f"{k} has no 'new' label")
            if av.vanishing_t2 and tp.vanishing is None:
                errs.append(f"subject {self.id}: vanishing_t2 declared but "
                            f"timepoint {k} has no 'vanishing' label")
        return errs

    def referenced_paths(self) -> list[str]:
        paths = []
        for tp in self.timepoints:
            for key in _TP_KEYS:
                val = getattr(tp, key)
                if val is not None:
                    paths.append(val)
        return paths


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    subjects: tuple[SubjectRecord, ...] = field(default_factory=tuple)

    def train_subjects(self) -> list[SubjectRecord]:
        return [s for s in self.subjects if s.split == "train"]

    def test_subjects(self) -> list[SubjectRecord]:
        return [s for s in self.subjects if s.split == "test"]

    def subject(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.id == subject_id:
                return s
        raise KeyError(f"no subject {subject_id!r} in manifest {self.name!r}")

    def as_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "subjects": [s.as_dict() for s in self.subjects],
        }


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _expect(cond: bool, pointer: str, message: str):
    if not cond:
        raise ManifestParseError(message, pointer)


def _parse_subject(obj, ptr: str) -> SubjectRecord:
    _expect(isinstance(obj, dict), ptr, "subject must be an object")
    for key in ("id", "format", "availability", "split", "timepoints"):
        _expect(key in obj, f"{ptr}/{key}", "missing required key")
    _expect(isinstance(obj["id"], str) and obj["id"], f"{ptr}/id",
            "id must be a non-empty string")
    _expect(obj["format"] in _FORMATS, f"{ptr}/format",
            f"format must be one of {_FORMATS}")
    _expect(obj["split"] in _SPLITS, f"{ptr}/split",
            f"split must be one of {_SPLITS}")
    av = obj["availability"]
    _expect(isinstance(av, dict), f"{ptr}/availability",
            "availability must be an object")
    flags = {}
    for key in _FLAG_KEYS:
        _expect(key in av, f"{ptr}/availability/{key}", "missing flag")
        _expect(isinstance(av[key], bool), f"{ptr}/availability/{key}",
                "flag must be a boolean")
        flags[key] = av[key]
    tps = obj["timepoints"]
    _expect(isinstance(tps, list) and tps, f"{ptr}/timepoints",
            "timepoints must be a non-empty array")
    parsed_tps = []
    for i, tp in enumerate(tps):
        tptr = f"{ptr}/timepoints/{i}"
        _expect(isinstance(tp, dict), tptr, "timepoint must be an object")
        _expect("image" in tp, f"{tptr}/image", "missing required key")
        kwargs = {}
        for key in _TP_KEYS:
            if key in tp:
                _expect(isinstance(tp[key], str), f"{tptr}/{key}",
                        "path must be a string")
                kwargs[key] = tp[key]
        parsed_tps.append(Timepoint(**kwargs))
    return SubjectRecord(
        id=obj["id"],
        format=obj["format"],
        availability=LabelAvailability(**flags),
        split=obj["split"],
        timepoints=tuple(parsed_tps),
    )


def parse_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest JSON file.

    Schema violations raise ManifestParseError with a JSON pointer.
    Invariant violations and missing files raise ValidationError, with
    every problem listed at once. Relative paths resolve against the
    manifest's directory.
    """
    path = Path(path)
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"invalid JSON: {exc}") from exc

    _expect(isinstance(doc, dict), "", "top level must be an object")
    _expect(doc.get("schema") == SCHEMA_VERSION, "/schema",
            f"schema must be {SCHEMA_VERSION}")
    _expect(isinstance(doc.get("name"), str) and doc["name"], "/name",
            "name must be a non-empty string")
    _expect(isinstance(doc.get("subjects"), list), "/subjects",
            "subjects must be an array")

    subjects = [_parse_subject(s, f"/subjects/{i}")
                for i, s in enumerate(doc["subjects"])]

    base = path.parent
    resolved = []
    for s in subjects:
        tps = tuple(
            Timepoint(**{k: (str(base / v) if v is not None else None)
                         for k, v in ((key, getattr(tp, key)) for key in _TP_KEYS)})
            for tp in s.timepoints)
        resolved.append(replace(s, timepoints=tps))
    manifest = DatasetManifest(name=doc["name"], subjects=tuple(resolved))
    validate_manifest(manifest, check_files=check_files)
    return manifest


def validate_manifest(m: DatasetManifest, check_files: bool = True) -> None:
    """Check all record invariants plus file existence; report everything."""
    errs = []
    seen = set()
    for s in m.subjects:
        if s.id in seen:
            errs.append(f"duplicate subject id {s.id!r}")
        seen.add(s.id)
        errs.extend(s.invariant_errors())
    missing = []
    if check_files:
        for s in m.subjects:
            for p in s.referenced_paths():
                if not Path(p).exists():
                    missing.append(p)
    if missing:
        errs.append("missing files: " + ", ".join(missing))
    if errs:
        raise ValidationError(
            f"manifest {m.name!r}: {len(errs)} problem(s)\n  "
            + "\n  ".join(errs))


def serialize_manifest(m: DatasetManifest, path=None) -> dict:
    """Dump to the schema dict, optionally writing JSON to ``path``."""
    doc = m.as_dict()
    if path is not None:
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
    return doc


def concat_manifests(manifests, name: str = "combined") -> DatasetManifest:
    """Concatenate datasets; subject ids must stay unique overall."""
    subjects = tuple(s for m in manifests for s in m.subjects)
    combined = DatasetManifest(name=name, subjects=subjects)
    ids = [s.id for s in subjects]
    if len(set(ids)) != len(ids):
        raise ValidationError("concatenation produced duplicate subject ids")
    return combined


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

_COUNT_KEYS = (
    "train_subjects", "test_subjects", "train_images", "test_images",
    "cross_sectional", "longitudinal",
    "all_t1", "all_t2", "new_t2", "vanishing_t2",
)


def summarize(m: DatasetManifest) -> dict:
    """Per-dataset counts: subjects and scans per split, formats, flags.

    Scans count timepoints, so a four-timepoint subject contributes four
    images. All counts are additive under manifest concatenation.
    """
    counts = {k: 0 for k in _COUNT_KEYS}
    counts["name"] = m.name
    for s in m.subjects:
        counts[f"{s.split}_subjects"] += 1
        counts[f"{s.split}_images"] += s.n_timepoints
        counts[s.format] += 1
        for key in _FLAG_KEYS:
            if getattr(s.availability, key):
                counts[key] += 1
    return counts


def summarize_table(manifests) -> str:
    """Tab-delimited Table-style summary, one row per manifest plus a total."""
    rows = [summarize(m) for m in manifests]
    total = {k: sum(r[k] for r in rows) for k in _COUNT_KEYS}
    total["name"] = "total"
    rows.append(total)
    header = ("name",) + _COUNT_KEYS
    lines = ["\t".join(header)]
    for r in rows:
        lines.append("\t".join(str(r[k]) for k in header))
    return "\n".join(lines)
