"""
Training events.
Every event is an immutable record of something that happened during a run.
"""

from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class TrainingEventType(str, Enum):
    """Types of training events"""

    ITERATION_COMPLETED = "iteration_completed"
    EPOCH_EVALUATED = "epoch_evaluated"
    SNAPSHOT_TAKEN = "snapshot_taken"
    TRAINING_ABORTED = "training_aborted"


class TrainingEvent(BaseModel):
    """Base class for all training events"""

    model_config = ConfigDict(frozen=True)

    event_type: TrainingEventType
    # Assigned by the log on append; no clocks or random ids so logs are reproducible
    sequence_number: int = 0
    epoch: int = Field(..., ge=0)
    iteration: int = Field(..., ge=0, description="Completed iterations so far")


class IterationCompleted(TrainingEvent):
    """One SGD step on one mini-batch"""

    event_type: TrainingEventType = TrainingEventType.ITERATION_COMPLETED

    loss: float
    batch_size: int


class EpochEvaluated(TrainingEvent):
    """End of an epoch, with validation metric means when a validation set exists"""

    event_type: TrainingEventType = TrainingEventType.EPOCH_EVALUATED

    train_loss: float
    metrics: Dict[str, float] = Field(default_factory=dict)


class SnapshotTaken(TrainingEvent):
    """Response map of the probe image after `iteration` steps"""

    event_type: TrainingEventType = TrainingEventType.SNAPSHOT_TAKEN

    probe: int = 0
    cc: Optional[float] = None
    response: List[List[float]]


class TrainingAborted(TrainingEvent):
    event_type: TrainingEventType = TrainingEventType.TRAINING_ABORTED

    reason: str


EVENT_CLASSES = {
    TrainingEventType.ITERATION_COMPLETED: IterationCompleted,
    TrainingEventType.EPOCH_EVALUATED: EpochEvaluated,
    TrainingEventType.SNAPSHOT_TAKEN: SnapshotTaken,
    TrainingEventType.TRAINING_ABORTED: TrainingAborted,
}
