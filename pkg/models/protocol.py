import base64
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator

from models.estimate import EstimateResult
from models.mechanism import MechanismSpec


class Query(BaseModel):
    """A standing query: 'are you at poi_id?' answered once per epoch until end_time."""
    model_config = ConfigDict(frozen=True)

    query_id: str = Field(min_length=1)
    analyst_id: str = Field(min_length=1)
    poi_id: str = Field(min_length=1)
    start_time: int
    end_time: int  # QueryEndTime
    epoch_length: int = Field(ge=1)
    mechanism: MechanismSpec

    @model_validator(mode="after")
    def _has_epochs(self):
        if self.start_time >= self.end_time:
            raise ValueError(f"start_time ({self.start_time}) must precede end_time ({self.end_time})")
        if self.n_epochs < 1:
            raise ValueError(
                f"window {self.end_time - self.start_time}s is shorter than one epoch ({self.epoch_length}s)"
            )
        return self

    @property
    def n_epochs(self) -> int:
        return (self.end_time - self.start_time) // self.epoch_length

    def epoch_index(self, t: int) -> int:
        return (t - self.start_time) // self.epoch_length

    def epoch_window(self, index: int):
        start = self.start_time + index * self.epoch_length
        return start, start + self.epoch_length


class SignedQuery(BaseModel):
    model_config = ConfigDict(frozen=True)

    query: Query
    public_key_id: str = Field(min_length=1)
    signature: bytes

    @field_validator("signature", mode="before")
    @classmethod
    def _decode_signature(cls, value):
        if isinstance(value, str):
            return base64.b64decode(value, validate=True)
        return value

    @field_serializer("signature")
    def _encode_signature(self, value: bytes) -> str:
        return base64.b64encode(value).decode("ascii")


class BitPayload(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["bit"] = "bit"
    value: int = Field(ge=0, le=1)


class RealPayload(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["real"] = "real"
    value: float


Payload = Annotated[Union[BitPayload, RealPayload], Field(discriminator="kind")]


class Response(BaseModel):
    """One privatized answer. Carries no respondent identity; the nonce is uniformly random."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    query_id: str = Field(min_length=1)
    epoch_index: int = Field(ge=0)
    payload: Payload
    nonce: str = Field(pattern=r"^[0-9a-f]{32}$")  # 128 bits, hex


class EpochAggregate(BaseModel):
    model_config = ConfigDict(frozen=True)

    query_id: str
    epoch_index: int
    mechanism_kind: str
    n_responses: int = Field(ge=0)
    raw_sum: float  # Y-hat for randomized response, noisy sum for Laplace
    estimate: Optional[EstimateResult] = None  # None when no responses arrived
    estimate_defined: bool
    closed: bool = True

    @model_validator(mode="after")
    def _yes_count_bounded(self):
        if self.mechanism_kind == "randomized_response" and not 0 <= self.raw_sum <= self.n_responses:
            raise ValueError(f"raw_sum {self.raw_sum} outside [0, {self.n_responses}]")
        return self


class SubmitOutcome(BaseModel):
    accepted: bool
    error: Optional[str] = None
    detail: Optional[str] = None


class KeyringEntry(BaseModel):
    analyst_id: str
    public_key_id: str
    public_key_base64: str
