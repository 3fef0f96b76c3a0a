"""
TrainLog - append-only record of a training run.
Events are NEVER updated or removed; curves and best epochs are replayed from it.
"""

import json
from pathlib import Path
from typing import List

from errors import FormatError
from training.events import (
    EVENT_CLASSES,
    EpochEvaluated,
    IterationCompleted,
    TrainingEvent,
    TrainingEventType,
)


class TrainLog:
    """
    In-memory event log of one run, persisted as JSON lines.
    """

    def __init__(self):
        self.events: List[TrainingEvent] = []

    def __len__(self) -> int:
        return len(self.events)

    def append_event(self, event: TrainingEvent) -> int:
        """
        Append an event to the log.

        Args:
            event: Training event to store

        Returns:
            sequence_number: Position of the stored event, starting at 1
        """
        sequence_number = len(self.events) + 1
        self.events.append(event.model_copy(update={"sequence_number": sequence_number}))
        return sequence_number

    def get_events_by_type(self, event_type: TrainingEventType) -> List[TrainingEvent]:
        return [e for e in self.events if e.event_type == event_type]

    def iterations(self) -> List[IterationCompleted]:
        return self.get_events_by_type(TrainingEventType.ITERATION_COMPLETED)

    def epochs(self) -> List[EpochEvaluated]:
        return self.get_events_by_type(TrainingEventType.EPOCH_EVALUATED)

    def loss_curve(self) -> List[float]:
        """Per-iteration training loss"""
        return [e.loss for e in self.iterations()]

    def write_jsonl(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for event in self.events:
                f.write(event.model_dump_json() + "\n")

    @classmethod
    def read_jsonl(cls, path: Path) -> "TrainLog":
        log = cls()
        with open(path, encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                    event_class = EVENT_CLASSES[TrainingEventType(raw["event_type"])]
                    log.events.append(event_class.model_validate(raw))
                except (KeyError, ValueError) as e:
                    raise FormatError(f"{path}:{line_number}: invalid training event ({e})")
        return log
