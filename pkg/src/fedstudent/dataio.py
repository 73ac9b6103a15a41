"""CSV ingest and emission for events, student tables, splits, and reports.

events.csv columns: student_id, timestamp, kind, video_index, points, max_points
  (video_index only for watch kinds; points/max_points only when a quiz answer
   was recorded; kind may be the generic "watch", resolved from the outcome).
students.csv columns: student_id, gender, continent, birth_year, label
  (empty demographic cells mean unspecified).
splits.csv columns: student_id, subgroup, role  (role in train/val/test).
"""

from __future__ import annotations

import csv
import logging

from .activity import (
    ActivityEvent,
    ActivityKind,
    Demographics,
    QuizOutcome,
    StudentRecord,
    encode_event,
)
from .splits import DatasetSplit
from .synthgen import DEFAULT_MAX_SEQUENCE

logger = logging.getLogger(__name__)

EVENT_HEADER = ["student_id", "timestamp", "kind", "video_index", "points", "max_points"]
STUDENT_HEADER = ["student_id", "gender", "continent", "birth_year", "label"]
SPLIT_HEADER = ["student_id", "subgroup", "role"]


class IngestError(ValueError):
    """Raised when a CSV file does not match its declared schema."""


def _require_header(row, expected, path):
    if row != expected:
        raise IngestError(f"{path}: expected header {expected}, got {row}")


def write_events_csv(records: list[StudentRecord], path: str) -> None:
    """Emit encoded records back to the raw-event format.

    Kinds and video indices are recovered from the one-hot encoding, which is
    always possible for generated cohorts.
    """
    kinds = list(ActivityKind)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENT_HEADER)
        for record in records:
            timestamp = 0
            for enc in record.sequence:
                slot = enc.kind_slot()
                kind = kinds[slot]
                if kind.is_watch:
                    video = int(enc.bits[:enc.n_videos].argmax())
                    if kind is ActivityKind.WATCH_CORRECT:
                        points, max_points = "1.0", "1.0"
                    elif kind is ActivityKind.WATCH_INCORRECT:
                        points, max_points = "0.0", "1.0"
                    else:
                        points, max_points = "", ""
                    writer.writerow([record.student_id, timestamp, kind.value, video, points, max_points])
                else:
                    writer.writerow([record.student_id, timestamp, kind.value, "", "", ""])
                timestamp += 1


def write_students_csv(records: list[StudentRecord], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(STUDENT_HEADER)
        for record in records:
            demo = record.demographics
            writer.writerow([
                record.student_id,
                demo.gender or "",
                demo.continent or "",
                demo.birth_year if demo.birth_year is not None else "",
                record.label,
            ])


def _parse_kind(raw: str, has_outcome: bool) -> ActivityKind:
    if raw == "watch":
        # Generic watch rows resolve from the recorded outcome; without one the
        # video is treated as quizless.
        return ActivityKind.WATCH_CORRECT if has_outcome else ActivityKind.WATCH_NOQUIZ
    try:
        return ActivityKind(raw)
    except ValueError as exc:
        raise IngestError(f"unknown activity kind {raw!r}") from exc


def read_events_csv(path: str):
    """Yield (ActivityEvent, QuizOutcome | None) pairs in file order."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _require_header(header, EVENT_HEADER, path)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(EVENT_HEADER):
                raise IngestError(f"{path}:{line_no}: expected {len(EVENT_HEADER)} fields")
            sid, ts, kind_raw, video_raw, points_raw, max_raw = row
            has_outcome = points_raw != "" and max_raw != ""
            kind = _parse_kind(kind_raw, has_outcome)
            outcome = QuizOutcome(float(points_raw), float(max_raw)) if has_outcome else None
            video = int(video_raw) if video_raw != "" else None
            try:
                event = ActivityEvent(sid, int(ts), kind, video_index=video)
            except ValueError as exc:
                raise IngestError(f"{path}:{line_no}: {exc}") from exc
            yield event, outcome


def read_students_csv(path: str) -> dict[str, tuple[Demographics, int]]:
    table: dict[str, tuple[Demographics, int]] = {}
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _require_header(header, STUDENT_HEADER, path)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(STUDENT_HEADER):
                raise IngestError(f"{path}:{line_no}: expected {len(STUDENT_HEADER)} fields")
            sid, gender, continent, birth_year, label = row
            try:
                demo = Demographics(
                    gender=gender or None,
                    continent=continent or None,
                    birth_year=int(birth_year) if birth_year else None,
                )
                table[sid] = (demo, int(label))
            except ValueError as exc:
                raise IngestError(f"{path}:{line_no}: {exc}") from exc
    return table


def load_records(
    events_path: str,
    students_path: str,
    n_videos: int,
    max_sequence: int = DEFAULT_MAX_SEQUENCE,
) -> list[StudentRecord]:
    """Assemble student records from the two ingest tables.

    Events are ordered by timestamp with file position breaking ties; sequences
    longer than the cap keep their most recent events. Students with no events
    are dropped with a warning.
    """
    table = read_students_csv(students_path)
    per_student: dict[str, list] = {sid: [] for sid in table}
    for position, (event, outcome) in enumerate(read_events_csv(events_path)):
        if event.student_id not in per_student:
            raise IngestError(f"event for unknown student {event.student_id!r}")
        per_student[event.student_id].append((event.timestamp, position, event, outcome))

    records = []
    for sid, (demo, label) in table.items():
        rows = sorted(per_student[sid], key=lambda item: (item[0], item[1]))
        if not rows:
            logger.warning("student %s has no events; dropped", sid)
            continue
        rows = rows[-max_sequence:]
        sequence = []
        quiz_responses: dict[int, int] = {}
        for _, _, event, outcome in rows:
            sequence.append(encode_event(event, outcome, n_videos))
            if outcome is not None and event.video_index is not None:
                if event.video_index not in quiz_responses:
                    quiz_responses[event.video_index] = outcome.first_attempt_score
        records.append(StudentRecord(sid, demo, sequence, quiz_responses, label))
    return records


def write_split_csv(split: DatasetSplit, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SPLIT_HEADER)
        for key in split.subgroups():
            assignment = split.assignments[key]
            for role, ids in (("train", assignment.train), ("val", assignment.val), ("test", assignment.test)):
                for sid in ids:
                    writer.writerow([sid, str(key), role])
