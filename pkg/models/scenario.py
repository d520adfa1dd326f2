from typing import List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from models.cost import CostComparison, CostParams
from models.estimate import EstimateResult
from models.mechanism import MechanismSpec

DAY_START = 8 * 3600  # 08:00 of day 0


class Poi(BaseModel):
    poi_id: str = Field(min_length=1)
    name: str
    capacity: int = Field(ge=1)
    attraction_profile: List[float]  # visit intensity per hour of day

    @field_validator("attraction_profile")
    @classmethod
    def _hourly_probabilities(cls, values: List[float]) -> List[float]:
        if len(values) != 24:
            raise ValueError(f"attraction_profile needs 24 hourly entries, got {len(values)}")
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("attraction_profile values must lie in [0, 1]")
        return values


class ScenarioConfig(BaseModel):
    total_population: int = Field(ge=1)
    n_private_participants: int = Field(ge=0)
    n_nonprivate: int = Field(ge=0)
    pois: List[Poi] = Field(min_length=1)
    epoch_length: int = Field(ge=1)  # seconds
    horizon: int = Field(ge=1)  # epochs
    mechanism: MechanismSpec
    cost_params: CostParams = CostParams()
    seed: int = Field(default=0, ge=0, le=2**64 - 1)
    start_time: int = DAY_START
    w_max: Optional[float] = Field(default=None, ge=0.0)  # defaults to cost_params W
    strict_epsilon: bool = False
    grace_seconds: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _cohorts_fit_population(self):
        if self.n_private_participants + self.n_nonprivate > self.total_population:
            raise ValueError(
                f"n_private_participants + n_nonprivate ({self.n_private_participants} + "
                f"{self.n_nonprivate}) exceeds total_population ({self.total_population})"
            )
        ids = [poi.poi_id for poi in self.pois]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate poi_id in {ids}")
        return self

    @property
    def wait_cap(self) -> float:
        return self.cost_params.worst_case_wait_w if self.w_max is None else self.w_max


class OwnerState(BaseModel):
    owner_index: int = Field(ge=0)
    participates: bool
    presence_trace: List[Optional[str]]  # poi_id per epoch, None when absent


class EpochRecord(BaseModel):
    epoch_index: int
    poi_id: str
    true_count: int  # participants present at the POI
    population_count: int  # everyone present at the POI
    n_responses: int
    estimate: Optional[EstimateResult] = None
    crowd_estimate: Optional[float] = None
    wait_estimate_minutes: Optional[float] = None


class SimulationReport(BaseModel):
    per_epoch: List[EpochRecord]
    coverage_fraction: float = Field(ge=0.0, le=1.0)
    cost_comparison: CostComparison
