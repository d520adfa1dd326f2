from typing import Optional

from pydantic import BaseModel, ConfigDict, Field


class CostParams(BaseModel):
    """Participation cost inputs. Costs come out in person-minutes."""
    model_config = ConfigDict(frozen=True)

    worst_case_wait_w: float = Field(default=60.0, ge=0.0)  # W, minutes
    # probability the study's congestion estimate fails the individual (not the coin bias p)
    congestion_error_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    deanon_fraction_phi: float = Field(default=0.8, ge=0.0, le=1.0)
    n_nonprivate: int = Field(default=2000, ge=1)
    n_private: int = Field(default=5000, ge=1)


class CostCurvePoint(BaseModel):
    epsilon: float = Field(ge=0.0)
    private_cost: float = Field(ge=0.0)
    nonprivate_cost: float = Field(ge=0.0)
    participation_favored: bool


class CostComparison(BaseModel):
    epsilon: Optional[float] = None  # None: the mechanism gives no finite epsilon
    nonprivate_cost: float
    private_cost: Optional[float] = None
    breakeven_epsilon: Optional[float] = None
    participation_favored: bool


class MechanismCost(BaseModel):
    mechanism: str
    epsilon: Optional[float] = None
    private_cost: Optional[float] = None
    participation_favored: bool
