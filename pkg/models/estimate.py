from pydantic import BaseModel, ConfigDict, Field, model_validator

from models.mechanism import CoinPair


class AggregateCounts(BaseModel):
    yes_randomized: int = Field(ge=0)  # Y-hat
    n_respondents: int = Field(gt=0)  # N

    @model_validator(mode="after")
    def _yes_within_respondents(self):
        if self.yes_randomized > self.n_respondents:
            raise ValueError(
                f"yes_randomized ({self.yes_randomized}) exceeds n_respondents ({self.n_respondents})"
            )
        return self


class EstimateResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    y_a_raw: float  # unbiased, may leave [0, N]
    y_a_clamped: float = Field(ge=0.0)
    std_plugin: float = Field(ge=0.0)
    ci95_low: float
    ci95_high: float


class ErrorTrialConfig(BaseModel):
    n: int = Field(gt=0)
    true_yes: int = Field(ge=0)
    coins: CoinPair
    runs: int = Field(ge=1)
    seed: int = Field(ge=0, le=2**64 - 1)

    @model_validator(mode="after")
    def _true_yes_within_n(self):
        if self.true_yes > self.n:
            raise ValueError(f"true_yes ({self.true_yes}) exceeds n ({self.n})")
        return self


class ErrorOracle(BaseModel):
    std_exact: float
    expected_abs_rel_error: float


class UtilityPrivacyRow(BaseModel):
    p: float
    q: float
    eta_mc: float
    eta_analytic: float
    epsilon_paper: float
    epsilon_strict: float
