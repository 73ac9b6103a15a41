"""Clickstream event types and their fixed-length one-hot encodings.

An encoded activity is the concatenation (video id one-hot; 4 watch-type bits;
3 forum-type bits), giving a vector of length n_videos + 7. Watch events set
exactly one video bit and one watch bit; forum events set exactly one forum
bit and nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class EncodingError(ValueError):
    """Raised when an event cannot be encoded under the declared layout."""


class ActivityKind(str, Enum):
    WATCH_NOQUIZ = "watch_noquiz"
    WATCH_CORRECT = "watch_correct"
    WATCH_INCORRECT = "watch_incorrect"
    WATCH_NOANSWER = "watch_noanswer"
    FORUM_POST = "forum_post"
    FORUM_REPLY = "forum_reply"
    FORUM_VIEW = "forum_view"

    @property
    def is_watch(self) -> bool:
        return self in WATCH_KINDS

    @property
    def is_forum(self) -> bool:
        return self in FORUM_KINDS


WATCH_KINDS = (
    ActivityKind.WATCH_NOQUIZ,
    ActivityKind.WATCH_CORRECT,
    ActivityKind.WATCH_INCORRECT,
    ActivityKind.WATCH_NOANSWER,
)
FORUM_KINDS = (
    ActivityKind.FORUM_POST,
    ActivityKind.FORUM_REPLY,
    ActivityKind.FORUM_VIEW,
)
# Position of each kind inside the 7 activity-type slots (4 watch then 3 forum).
KIND_SLOT = {kind: i for i, kind in enumerate(WATCH_KINDS + FORUM_KINDS)}
N_KINDS = 7


def score_first_attempt(points: float, max_points: float) -> int:
    """Binary first-attempt credit: 1 only for full marks."""
    if max_points <= 0:
        raise ValueError(f"max_points must be positive, got {max_points}")
    if points < 0 or points > max_points:
        raise ValueError(f"points must lie in [0, {max_points}], got {points}")
    return 1 if points == max_points else 0


@dataclass(frozen=True)
class QuizOutcome:
    """Recorded end-of-video quiz result for one student/video pair."""

    points: float
    max_points: float

    def __post_init__(self):
        score_first_attempt(self.points, self.max_points)  # validates ranges

    @property
    def first_attempt_score(self) -> int:
        return score_first_attempt(self.points, self.max_points)


@dataclass(frozen=True)
class ActivityEvent:
    """One raw clickstream event: who, when, what, and (for watches) which video."""

    student_id: str
    timestamp: int
    kind: ActivityKind
    video_index: int | None = None

    def __post_init__(self):
        if self.kind.is_watch and self.video_index is None:
            raise ValueError(f"{self.kind.value} event requires a video_index")
        if self.kind.is_forum and self.video_index is not None:
            raise ValueError(f"{self.kind.value} event must not carry a video_index")


@dataclass(frozen=True)
class EncodedActivity:
    """One-hot activity vector of length n_videos + 7."""

    bits: np.ndarray
    n_videos: int

    @property
    def width(self) -> int:
        return self.n_videos + N_KINDS

    def kind_slot(self) -> int:
        """Index (0..6) of the set activity-type bit."""
        return int(np.argmax(self.bits[self.n_videos:]))


def encode_event(event: ActivityEvent, outcome: QuizOutcome | None, n_videos: int) -> EncodedActivity:
    """Encode one event as (video one-hot; watch bits; forum bits).

    A watch event carrying an outcome is resolved to watch_correct or
    watch_incorrect from the recorded score; a watch without an outcome keeps
    its own tag (watch_noanswer stays, anything else means the video had no
    quiz and becomes watch_noquiz).
    """
    bits = np.zeros(n_videos + N_KINDS)
    if event.kind.is_forum:
        if outcome is not None:
            raise EncodingError(f"outcome supplied for forum event of {event.student_id}")
        bits[n_videos + KIND_SLOT[event.kind]] = 1.0
        return EncodedActivity(bits=bits, n_videos=n_videos)

    if event.video_index is None or not 0 <= event.video_index < n_videos:
        raise EncodingError(
            f"video_index {event.video_index} out of range [0, {n_videos}) for {event.student_id}"
        )
    if outcome is not None:
        kind = ActivityKind.WATCH_CORRECT if outcome.first_attempt_score else ActivityKind.WATCH_INCORRECT
    elif event.kind is ActivityKind.WATCH_NOANSWER:
        kind = ActivityKind.WATCH_NOANSWER
    else:
        kind = ActivityKind.WATCH_NOQUIZ
    bits[event.video_index] = 1.0
    bits[n_videos + KIND_SLOT[kind]] = 1.0
    return EncodedActivity(bits=bits, n_videos=n_videos)


@dataclass(frozen=True)
class Demographics:
    """Voluntarily provided attributes; None means the student left it unspecified."""

    gender: str | None = None
    continent: str | None = None
    birth_year: int | None = None

    def __post_init__(self):
        if self.gender is not None and self.gender not in GENDER_GROUPS:
            raise ValueError(f"unknown gender tag {self.gender!r}")
        if self.continent is not None and self.continent not in CONTINENT_GROUPS:
            raise ValueError(f"unknown continent tag {self.continent!r}")


GENDER_GROUPS = ("M", "F")
CONTINENT_GROUPS = ("AS", "AF", "EU", "NA", "SA")
# Birth-year bands: Y <= 1980, 1980 < Y <= 1990, Y > 1990.
YEAR_BANDS = ("le1980", "1981to1990", "gt1990")
UNSPECIFIED = "unspecified"
VARIABLES = ("G", "C", "Y")


def year_band(birth_year: int) -> str:
    if birth_year <= 1980:
        return YEAR_BANDS[0]
    if birth_year <= 1990:
        return YEAR_BANDS[1]
    return YEAR_BANDS[2]


def demographic_group(demo: Demographics, variable: str) -> str | None:
    """Subgroup tag of a student under one demographic variable, or None if unspecified."""
    if variable == "G":
        return demo.gender
    if variable == "C":
        return demo.continent
    if variable == "Y":
        return None if demo.birth_year is None else year_band(demo.birth_year)
    raise ValueError(f"unknown demographic variable {variable!r}, expected one of {VARIABLES}")


@dataclass
class StudentRecord:
    """One student: demographics, timestamp-ordered encoded activities, quiz scores, pass label."""

    student_id: str
    demographics: Demographics
    sequence: list[EncodedActivity]
    quiz_responses: dict[int, int] = field(default_factory=dict)
    label: int = 0

    def __post_init__(self):
        if not self.sequence:
            raise ValueError(f"student {self.student_id} has an empty activity sequence")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    @property
    def length(self) -> int:
        return len(self.sequence)


def sequence_matrix(sequence: list[EncodedActivity]) -> np.ndarray:
    """Stack encoded activities into an (L, n+7) float matrix."""
    return np.stack([e.bits for e in sequence])
