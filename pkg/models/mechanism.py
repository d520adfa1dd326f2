from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field


class CoinPair(BaseModel):
    """Coin biases of two-coin randomized response: p = truth-telling, q = forced 'yes'."""
    model_config = ConfigDict(frozen=True)

    p: float = Field(ge=0.0, le=1.0)
    q: float = Field(ge=0.0, le=1.0)


class RandomizedResponseSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["randomized_response"] = "randomized_response"
    coins: CoinPair


class LaplaceSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["laplace"] = "laplace"
    epsilon: float = Field(gt=0.0)
    sensitivity: float = Field(default=1.0, gt=0.0)

    @property
    def scale(self) -> float:
        return self.sensitivity / self.epsilon

    @property
    def contribution_unit(self) -> float:
        """What a present owner contributes to the sum; never above sensitivity."""
        return min(1.0, self.sensitivity)


MechanismSpec = Annotated[Union[RandomizedResponseSpec, LaplaceSpec], Field(discriminator="kind")]


class PrivacyLevel(BaseModel):
    model_config = ConfigDict(frozen=True)

    epsilon_paper: float = Field(ge=0.0)  # yes-direction log-likelihood ratio
    epsilon_strict: float = Field(ge=0.0)  # max over both response symbols


class DpRatioCheck(BaseModel):
    max_observed_ratio: float
    satisfies: bool
