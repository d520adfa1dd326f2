import threading
from typing import Dict, List, Optional, Set, Tuple, Union

from pydantic import ValidationError

from errors import (
    AggregateNotFound, DegenerateMechanism, DuplicateNonce, EpochClosed, EpochOutOfRange,
    EpochStillOpen, ExpiredQuery, InvalidSignature, MalformedQuery, PayloadMismatch, ProtocolError,
    UnknownAnalyst, UnknownQuery,
)
from estimation import estimate_laplace_count, estimate_true_yes
from logger import setup_logger
from mechanisms import laplace_sample
from models.estimate import AggregateCounts
from models.mechanism import LaplaceSpec, RandomizedResponseSpec
from models.protocol import (
    BitPayload, EpochAggregate, Query, RealPayload, Response, SignedQuery, SubmitOutcome,
)
from utils.random_source import RandomSource
from utils.signing import Keyring, verify_signed_query

logger = setup_logger()


class EpochAccumulator:
    """Counters of one (query, epoch). All access goes through lock."""

    def __init__(self):
        self.lock = threading.Lock()
        self.n_responses = 0
        self.raw_sum = 0.0
        self.nonces: Set[str] = set()
        self.closed: Optional[EpochAggregate] = None


class Aggregator:
    """
    In-memory aggregator (the proxy between analysts and data owners).
    Honest-but-curious: it sees every response but never learns who sent it.
    """

    def __init__(self, keyring: Keyring, seed: int = 0, grace_epochs: float = 0.0,
                 retention_seconds: Optional[float] = None):
        self.keyring = keyring
        self.seed = seed
        self.grace_epochs = grace_epochs
        self.retention_seconds = retention_seconds  # None keeps ended queries forever
        self._lock = threading.Lock()
        self._queries: Dict[str, SignedQuery] = {}
        self._accumulators: Dict[Tuple[str, int], EpochAccumulator] = {}
        self._next_due: Dict[str, int] = {}

    # -- analysts ---------------------------------------------------------

    def register_query(self, sq: Union[SignedQuery, dict], now: int) -> str:
        if not isinstance(sq, SignedQuery):
            try:
                sq = SignedQuery.model_validate(sq)
            except (ValidationError, ValueError) as e:
                raise MalformedQuery(f"invalid signed query: {e}")
        query = sq.query

        entry = self.keyring.lookup(sq.public_key_id)
        if entry is None:
            raise UnknownAnalyst(f"no public key {sq.public_key_id}")
        analyst_id, public_key = entry
        if analyst_id != query.analyst_id:
            raise UnknownAnalyst(f"key {sq.public_key_id} does not belong to analyst {query.analyst_id}")
        if not verify_signed_query(sq, public_key):
            raise InvalidSignature(f"signature of query {query.query_id} does not verify")
        if query.end_time <= now:
            raise ExpiredQuery(f"query {query.query_id} ended at {query.end_time} (now={now})")

        with self._lock:
            existing = self._queries.get(query.query_id)
            if existing is not None:
                if existing == sq:
                    return query.query_id
                raise MalformedQuery(f"query_id {query.query_id} already registered with other content")
            self._queries[query.query_id] = sq
            self._next_due[query.query_id] = 0

        logger.info(f"REGISTER: query_id={query.query_id} analyst={query.analyst_id} poi={query.poi_id} "
                    f"epochs={query.n_epochs} epoch_length={query.epoch_length}s "
                    f"mechanism={query.mechanism.kind}")
        return query.query_id

    def get_aggregate(self, query_id: str, epoch_index: int) -> EpochAggregate:
        query = self._query(query_id)
        self._check_epoch(query, epoch_index)
        with self._lock:
            acc = self._accumulators.get((query_id, epoch_index))
        if acc is None or acc.closed is None:
            raise AggregateNotFound(f"epoch {epoch_index} of {query_id} is not closed")
        return acc.closed

    def list_aggregates(self, query_id: str) -> List[EpochAggregate]:
        self._query(query_id)
        with self._lock:
            accs = [(idx, acc) for (qid, idx), acc in self._accumulators.items() if qid == query_id]
        return [acc.closed for idx, acc in sorted(accs, key=lambda item: item[0]) if acc.closed is not None]

    # -- data owners ------------------------------------------------------

    def fetch_queries(self, now: int) -> List[SignedQuery]:
        with self._lock:
            queries = sorted(self._queries.values(), key=lambda sq: sq.query.query_id)
        return [sq for sq in queries if sq.query.start_time <= now < sq.query.end_time]

    def submit_response(self, response: Response, now: Optional[int] = None) -> bool:
        query = self._query(response.query_id)
        self._check_epoch(query, response.epoch_index)
        value = self._payload_value(query, response)

        acc = self._accumulator(response.query_id, response.epoch_index)
        with acc.lock:
            if acc.closed is not None:
                raise EpochClosed(f"epoch {response.epoch_index} of {response.query_id} is closed")
            if response.nonce in acc.nonces:
                raise DuplicateNonce(f"nonce already seen in epoch {response.epoch_index} of {response.query_id}")
            acc.nonces.add(response.nonce)
            acc.n_responses += 1
            acc.raw_sum += value
        logger.debug(f"ACCEPT: query_id={response.query_id} epoch={response.epoch_index} nonce={response.nonce}")
        return True

    def submit_batch(self, responses: List[Response], now: Optional[int] = None) -> List[SubmitOutcome]:
        outcomes = []
        for response in responses:
            try:
                self.submit_response(response, now)
                outcomes.append(SubmitOutcome(accepted=True))
            except ProtocolError as e:
                logger.warning(f"REJECT: query_id={response.query_id} epoch={response.epoch_index} "
                               f"error={e.__class__.__name__} detail=\"{e.detail}\"")
                outcomes.append(SubmitOutcome(accepted=False, error=e.__class__.__name__, detail=e.detail))
        return outcomes

    # -- epochs -----------------------------------------------------------

    def close_epoch(self, query_id: str, epoch_index: int, now: int) -> EpochAggregate:
        query = self._query(query_id)
        self._check_epoch(query, epoch_index)
        _, window_end = query.epoch_window(epoch_index)
        due = window_end + self.grace_epochs * query.epoch_length

        acc = self._accumulator(query_id, epoch_index)
        with acc.lock:
            if acc.closed is not None:
                return acc.closed
            if now < due:
                raise EpochStillOpen(f"epoch {epoch_index} of {query_id} closes at {due} (now={now})")
            acc.closed = self._publish(query, epoch_index, acc)
            acc.nonces = set()

        logger.info(f"CLOSE: query_id={query_id} epoch={epoch_index} n={acc.closed.n_responses} "
                    f"raw_sum={acc.closed.raw_sum:.4f} defined={acc.closed.estimate_defined}")
        return acc.closed

    def close_due_epochs(self, now: int) -> List[EpochAggregate]:
        """Closes every epoch whose window (plus grace) has ended."""
        with self._lock:
            pending = [(sq.query, self._next_due[qid]) for qid, sq in self._queries.items()]
        closed = []
        for query, first in sorted(pending, key=lambda item: item[0].query_id):
            idx = first
            while idx < query.n_epochs:
                _, window_end = query.epoch_window(idx)
                if now < window_end + self.grace_epochs * query.epoch_length:
                    break
                closed.append(self.close_epoch(query.query_id, idx, now))
                idx += 1
            with self._lock:
                self._next_due[query.query_id] = max(self._next_due[query.query_id], idx)
        self._expire(now)
        return closed

    def _expire(self, now: int) -> None:
        """Forgets ended queries whose epochs are all closed and whose retention has run out."""
        if self.retention_seconds is None:
            return
        with self._lock:
            expired = [
                qid for qid, sq in self._queries.items()
                if self._next_due[qid] >= sq.query.n_epochs
                and sq.query.end_time + self.grace_epochs * sq.query.epoch_length + self.retention_seconds <= now
            ]
            for qid in expired:
                del self._queries[qid]
                del self._next_due[qid]
                for key in [key for key in self._accumulators if key[0] == qid]:
                    del self._accumulators[key]
        for qid in expired:
            logger.info(f"EXPIRE: query_id={qid} retention={self.retention_seconds}s")

    def peek_counters(self, query_id: str, epoch_index: int) -> Tuple[int, float]:
        """Current (n_responses, raw_sum) of an epoch, closed or not."""
        acc = self._accumulator(query_id, epoch_index)
        with acc.lock:
            return acc.n_responses, acc.raw_sum

    def snapshot(self) -> dict:
        with self._lock:
            queries = sorted(self._queries.values(), key=lambda sq: sq.query.query_id)
            accs = sorted(self._accumulators.items())
        closed, open_epochs = [], []
        for (qid, idx), acc in accs:
            with acc.lock:
                if acc.closed is not None:
                    closed.append(acc.closed.model_dump(mode="json"))
                else:
                    # open Laplace sums are not yet privatized, so only counts leave memory
                    open_epochs.append({"query_id": qid, "epoch_index": idx, "n_responses": acc.n_responses})
        return {
            "queries": [sq.model_dump(mode="json") for sq in queries],
            "aggregates": closed,
            "open_epochs": open_epochs,
        }

    # -- internals --------------------------------------------------------

    def _query(self, query_id: str) -> Query:
        with self._lock:
            sq = self._queries.get(query_id)
        if sq is None:
            raise UnknownQuery(f"unknown query {query_id}")
        return sq.query

    @staticmethod
    def _check_epoch(query: Query, epoch_index: int) -> None:
        if not 0 <= epoch_index < query.n_epochs:
            raise EpochOutOfRange(
                f"epoch {epoch_index} outside 0..{query.n_epochs - 1} of {query.query_id}"
            )

    def _accumulator(self, query_id: str, epoch_index: int) -> EpochAccumulator:
        key = (query_id, epoch_index)
        with self._lock:
            acc = self._accumulators.get(key)
            if acc is None:
                acc = self._accumulators[key] = EpochAccumulator()
            return acc

    @staticmethod
    def _payload_value(query: Query, response: Response) -> float:
        mech = query.mechanism
        payload = response.payload
        if isinstance(mech, RandomizedResponseSpec):
            if not isinstance(payload, BitPayload):
                raise PayloadMismatch(f"query {query.query_id} expects a bit payload")
            return payload.value
        if isinstance(mech, LaplaceSpec):
            if not isinstance(payload, RealPayload):
                raise PayloadMismatch(f"query {query.query_id} expects a real payload")
            if not 0.0 <= payload.value <= mech.sensitivity:
                raise PayloadMismatch(f"contribution {payload.value} outside [0, {mech.sensitivity}]")
            return payload.value
        raise PayloadMismatch(f"unsupported mechanism {mech.kind}")

    def _publish(self, query: Query, epoch_index: int, acc: EpochAccumulator) -> EpochAggregate:
        mech = query.mechanism
        n = acc.n_responses
        if n == 0:
            return EpochAggregate(
                query_id=query.query_id, epoch_index=epoch_index, mechanism_kind=mech.kind,
                n_responses=0, raw_sum=0.0, estimate=None, estimate_defined=False,
            )

        if isinstance(mech, RandomizedResponseSpec):
            raw_sum = acc.raw_sum
            try:
                estimate = estimate_true_yes(
                    AggregateCounts(yes_randomized=int(round(raw_sum)), n_respondents=n), mech.coins
                )
            except DegenerateMechanism as e:
                logger.warning(f"ESTIMATE: query_id={query.query_id} epoch={epoch_index} undefined ({e})")
                estimate = None
        else:
            rng = RandomSource.for_key(self.seed, query.query_id, epoch_index)
            raw_sum = acc.raw_sum + laplace_sample(mech.scale, rng)
            unit = mech.contribution_unit
            estimate = estimate_laplace_count(raw_sum / unit, n, mech.epsilon, mech.sensitivity / unit)

        return EpochAggregate(
            query_id=query.query_id, epoch_index=epoch_index, mechanism_kind=mech.kind,
            n_responses=n, raw_sum=float(raw_sum), estimate=estimate, estimate_defined=estimate is not None,
        )
