import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional

import numpy as np
import requests
from pydantic import BaseModel, Field, model_validator

from aggregator import Aggregator
from errors import DuplicateNonce, ProtocolError, protocol_error_from_name
from logger import setup_logger
from mechanisms import rr_randomize, rr_randomize_many
from models.mechanism import LaplaceSpec, RandomizedResponseSpec
from models.protocol import (
    BitPayload, EpochAggregate, Query, RealPayload, Response, SignedQuery, SubmitOutcome,
)
from utils.random_source import RandomSource
from utils.signing import Keyring, sign_query, verify_signed_query

logger = setup_logger()


# -- bindings ---------------------------------------------------------------
# Both bindings expose the same operations and raise the same ProtocolError classes.

class InProcessBinding:
    def __init__(self, aggregator: Aggregator):
        self.aggregator = aggregator

    def register_query(self, sq: SignedQuery, now: int) -> str:
        return self.aggregator.register_query(sq, now)

    def fetch_queries(self, now: int) -> List[SignedQuery]:
        return self.aggregator.fetch_queries(now)

    def submit_response(self, response: Response, now: Optional[int] = None) -> bool:
        return self.aggregator.submit_response(response, now)

    def submit_batch(self, responses: List[Response], now: Optional[int] = None) -> List[SubmitOutcome]:
        return self.aggregator.submit_batch(responses, now)

    def close_epoch(self, query_id: str, epoch_index: int, now: int) -> EpochAggregate:
        return self.aggregator.close_epoch(query_id, epoch_index, now)

    def get_aggregate(self, query_id: str, epoch_index: int) -> EpochAggregate:
        return self.aggregator.get_aggregate(query_id, epoch_index)

    def list_aggregates(self, query_id: str) -> List[EpochAggregate]:
        return self.aggregator.list_aggregates(query_id)


class HttpBinding:
    """
    Client of the aggregator's HTTP service.
    session may be a requests.Session or anything with the same get/post API
    (FastAPI's TestClient in tests).
    """

    def __init__(self, base_url: str = "", session=None, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.session = session if session is not None else requests.Session()
        self.timeout = timeout

    def _request(self, method: str, path: str, expected: int, now: Optional[int] = None, **kwargs):
        if now is not None:
            kwargs["params"] = {"now": now}
        if isinstance(self.session, requests.Session):
            kwargs["timeout"] = self.timeout
        resp = getattr(self.session, method)(f"{self.base_url}{path}", **kwargs)
        if resp.status_code == expected:
            return resp.json()
        try:
            body = resp.json()
        except ValueError:
            body = None
        if isinstance(body, dict) and "error" in body:
            raise protocol_error_from_name(body["error"], body.get("detail", ""))
        raise ProtocolError(f"HTTP {resp.status_code} from {path}: {resp.text[:200]}")

    def register_query(self, sq: SignedQuery, now: Optional[int] = None) -> str:
        return self._request("post", "/queries", 201, now, json=sq.model_dump(mode="json"))["query_id"]

    def fetch_queries(self, now: Optional[int] = None) -> List[SignedQuery]:
        return [SignedQuery.model_validate(item) for item in self._request("get", "/queries", 200, now)]

    def submit_response(self, response: Response, now: Optional[int] = None) -> bool:
        return self._request("post", "/responses", 202, now, json=response.model_dump(mode="json"))["accepted"]

    def submit_batch(self, responses: List[Response], now: Optional[int] = None) -> List[SubmitOutcome]:
        body = [r.model_dump(mode="json") for r in responses]
        return [SubmitOutcome.model_validate(item)
                for item in self._request("post", "/responses/batch", 202, now, json=body)]

    def close_epoch(self, query_id: str, epoch_index: int, now: Optional[int] = None) -> EpochAggregate:
        data = self._request("post", f"/epochs/{query_id}/{epoch_index}/close", 200, now)
        return EpochAggregate.model_validate(data)

    def get_aggregate(self, query_id: str, epoch_index: int) -> EpochAggregate:
        return EpochAggregate.model_validate(self._request("get", f"/aggregates/{query_id}/{epoch_index}", 200))

    def list_aggregates(self, query_id: str) -> List[EpochAggregate]:
        return [EpochAggregate.model_validate(item)
                for item in self._request("get", f"/aggregates/{query_id}", 200)]


# -- analysts ---------------------------------------------------------------

class AnalystClient:
    def __init__(self, analyst_id: str, public_key_id: str, signing_key):
        self.analyst_id = analyst_id
        self.public_key_id = public_key_id
        self.signing_key = signing_key

    def sign(self, query: Query) -> SignedQuery:
        if query.analyst_id != self.analyst_id:
            raise ValueError(f"query {query.query_id} belongs to analyst {query.analyst_id}")
        return sign_query(query, self.signing_key, self.public_key_id)

    def publish(self, binding, query: Query, now: int) -> str:
        return binding.register_query(self.sign(query), now)


# -- data owners ------------------------------------------------------------

def new_nonce(rng: RandomSource) -> str:
    return rng.random_bytes(16).hex()


def privatize(query: Query, truth: int, epoch_index: int, rng: RandomSource) -> Response:
    """One owner's response: randomized bit, or the weighted true bit for the central Laplace path."""
    mech = query.mechanism
    if isinstance(mech, RandomizedResponseSpec):
        payload = BitPayload(value=rr_randomize(truth, mech.coins, rng))
    elif isinstance(mech, LaplaceSpec):
        payload = RealPayload(value=truth * mech.contribution_unit)
    else:
        raise TypeError(f"Unknown mechanism: {mech!r}")
    return Response(query_id=query.query_id, epoch_index=epoch_index, payload=payload, nonce=new_nonce(rng))


def privatize_cohort(query: Query, truths: np.ndarray, epoch_index: int, rng: RandomSource) -> List[Response]:
    """Vectorized privatize for a whole cohort sharing one source (simulation driver)."""
    truths = np.asarray(truths, dtype=np.int8)
    mech = query.mechanism
    if isinstance(mech, RandomizedResponseSpec):
        payloads = [BitPayload(value=int(b)) for b in rr_randomize_many(truths, mech.coins, rng)]
    elif isinstance(mech, LaplaceSpec):
        payloads = [RealPayload(value=float(t) * mech.contribution_unit) for t in truths]
    else:
        raise TypeError(f"Unknown mechanism: {mech!r}")
    nonce_hex = rng.random_bytes(16 * len(payloads)).hex()
    return [
        Response(query_id=query.query_id, epoch_index=epoch_index, payload=payload,
                 nonce=nonce_hex[32 * i:32 * (i + 1)])
        for i, payload in enumerate(payloads)
    ]


class QueryCache:
    """
    Standing queries held by a data owner: fetched once, dropped after QueryEndTime.
    With a keyring, queries whose signature does not verify are never cached.
    """

    def __init__(self, keyring: Optional[Keyring] = None):
        self.keyring = keyring
        self._queries: Dict[str, SignedQuery] = {}

    def refresh(self, fetched: List[SignedQuery], now: int) -> None:
        for sq in fetched:
            if self.keyring is not None and not self._trusted(sq):
                logger.warning(f"Dropping unverifiable query {sq.query.query_id} (key {sq.public_key_id})")
                continue
            self._queries[sq.query.query_id] = sq
        self.purge(now)

    def _trusted(self, sq: SignedQuery) -> bool:
        entry = self.keyring.lookup(sq.public_key_id)
        return entry is not None and entry[0] == sq.query.analyst_id and verify_signed_query(sq, entry[1])

    def purge(self, now: int) -> None:
        for query_id in [qid for qid, sq in self._queries.items() if sq.query.end_time <= now]:
            del self._queries[query_id]

    def active(self, now: int) -> List[Query]:
        self.purge(now)
        return sorted((sq.query for sq in self._queries.values()), key=lambda q: q.query_id)

    def __len__(self) -> int:
        return len(self._queries)


class DataOwner:
    def __init__(self, rng: RandomSource, present: bool):
        self.rng = rng
        self.present = present

    def answer(self, query: Query, epoch_index: int) -> Response:
        return privatize(query, int(self.present), epoch_index, self.rng)


class RespondSettings(BaseModel):
    n_owners: int = Field(default=1000, ge=1)
    true_yes: int = Field(default=800, ge=0)
    seed: int = Field(default=0, ge=0, le=2**64 - 1)
    workers: int = Field(default=8, ge=1)
    realtime: bool = True
    duplicate_nonce_fault: bool = False

    @model_validator(mode="after")
    def _true_yes_within_owners(self):
        if self.true_yes > self.n_owners:
            raise ValueError(f"true_yes ({self.true_yes}) exceeds n_owners ({self.n_owners})")
        return self


class RespondSummary(BaseModel):
    queries: int = 0
    submitted: int = 0
    accepted: int = 0
    duplicates_rejected: int = 0
    unexpected_errors: List[str] = []


def run_respondents(binding, settings: RespondSettings,
                    clock: Callable[[], float] = time.time,
                    sleep: Callable[[float], None] = time.sleep) -> RespondSummary:
    """
    Simulated data owners: fetch the standing queries once, then send one privatized
    response per owner per epoch until each query's end time.
    Owner i is at the POI when i < true_yes.
    """
    summary = RespondSummary()
    now = int(clock())
    cache = QueryCache()
    cache.refresh(binding.fetch_queries(now), now)
    queries = cache.active(now)
    summary.queries = len(queries)
    if not queries:
        logger.info("No active queries; nothing to answer.")
        return summary

    owners = [DataOwner(rng, present=i < settings.true_yes)
              for i, rng in enumerate(RandomSource(settings.seed).spawn(settings.n_owners))]

    schedule = []
    for query in queries:
        for idx in range(max(0, query.epoch_index(now)), query.n_epochs):
            schedule.append((query.epoch_window(idx)[0], query.query_id, idx, query))
    schedule.sort(key=lambda item: item[:3])
    logger.info(f"RESPOND: owners={settings.n_owners} queries={len(queries)} submissions_planned="
                f"{len(schedule) * settings.n_owners}")

    fault_injected = False
    for window_start, _, idx, query in schedule:
        if settings.realtime:
            wait = window_start - clock()
            if wait > 0:
                sleep(wait)
            at = None
        else:
            at = window_start

        def send(owner: DataOwner):
            response = owner.answer(query, idx)
            try:
                binding.submit_response(response, at)
                return response, None
            except ProtocolError as e:
                return response, e

        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            results = list(pool.map(send, owners))

        for _, error in results:
            summary.submitted += 1
            if error is None:
                summary.accepted += 1
            else:
                summary.unexpected_errors.append(f"{error.__class__.__name__}: {error.detail}")

        if settings.duplicate_nonce_fault and not fault_injected:
            fault_injected = True
            replay = results[0][0]
            summary.submitted += 1
            try:
                binding.submit_response(replay, at)
                summary.accepted += 1
                summary.unexpected_errors.append("replayed nonce was accepted")
            except DuplicateNonce:
                summary.duplicates_rejected += 1
            except ProtocolError as e:
                summary.unexpected_errors.append(f"{e.__class__.__name__}: {e.detail}")

        logger.info(f"EPOCH SENT: query_id={query.query_id} epoch={idx} accepted={summary.accepted}")

    return summary
