import threading
import time
from typing import Dict, List, Optional

from fastapi import Body, FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from aggregator import Aggregator
from errors import (
    EpochOutOfRange, MalformedQuery, PayloadMismatch, ProtocolError, UnknownAnalyst,
)
from logger import setup_logger
from models.mechanism import MechanismSpec
from models.protocol import EpochAggregate, Query, Response, SignedQuery, SubmitOutcome
from owners import AnalystClient, InProcessBinding
from utils.signing import Keyring, load_keyring

logger = setup_logger()


def _validation_error(request: Request, exc: RequestValidationError) -> ProtocolError:
    """Names the protocol error a schema failure stands for."""
    fields = {str(part) for error in exc.errors() for part in error.get("loc", ())}
    detail = "; ".join(
        f"{'.'.join(str(p) for p in error.get('loc', ()))}: {error.get('msg', '')}" for error in exc.errors()
    )
    if "epoch_index" in fields:
        return EpochOutOfRange(detail)
    if request.url.path.startswith("/responses"):
        return PayloadMismatch(detail)
    return MalformedQuery(detail)


def create_app(aggregator: Aggregator, virtual_time: bool = False) -> FastAPI:
    """
    HTTP/JSON surface of the aggregator. Binary fields are base64, timestamps epoch-seconds.
    The now query parameter is honored only with virtual_time; otherwise the server clock rules.
    """
    app = FastAPI(title="crowd-gauge aggregator")
    app.state.aggregator = aggregator

    def _clock(now: Optional[int]) -> int:
        if virtual_time and now is not None:
            return now
        return int(time.time())

    def _render(request: Request, exc: ProtocolError) -> JSONResponse:
        logger.warning(f"REJECT: {request.method} {request.url.path} "
                       f"error={exc.__class__.__name__} detail=\"{exc.detail}\"")
        return JSONResponse(status_code=exc.http_status,
                            content={"error": exc.__class__.__name__, "detail": exc.detail})

    @app.exception_handler(ProtocolError)
    async def _protocol_error(request: Request, exc: ProtocolError):
        return _render(request, exc)

    @app.exception_handler(RequestValidationError)
    async def _request_invalid(request: Request, exc: RequestValidationError):
        return _render(request, _validation_error(request, exc))

    @app.post("/queries", status_code=201)
    def register_query(body: dict = Body(...), now: Optional[int] = None):
        query_id = aggregator.register_query(body, _clock(now))
        return {"query_id": query_id}

    @app.get("/queries", response_model=List[SignedQuery])
    def fetch_queries(now: Optional[int] = None):
        return aggregator.fetch_queries(_clock(now))

    @app.post("/responses", status_code=202)
    def submit_response(response: Response, now: Optional[int] = None):
        aggregator.submit_response(response, _clock(now))
        return {"accepted": True}

    @app.post("/responses/batch", status_code=202, response_model=List[SubmitOutcome])
    def submit_batch(responses: List[Response], now: Optional[int] = None):
        return aggregator.submit_batch(responses, _clock(now))

    @app.post("/epochs/{query_id}/{epoch_index}/close", response_model=EpochAggregate)
    def close_epoch(query_id: str, epoch_index: int, now: Optional[int] = None):
        return aggregator.close_epoch(query_id, epoch_index, _clock(now))

    @app.get("/aggregates/{query_id}/{epoch_index}", response_model=EpochAggregate)
    def get_aggregate(query_id: str, epoch_index: int):
        return aggregator.get_aggregate(query_id, epoch_index)

    @app.get("/aggregates/{query_id}", response_model=List[EpochAggregate])
    def list_aggregates(query_id: str):
        return aggregator.list_aggregates(query_id)

    return app


class EpochCloser(threading.Thread):
    """Background thread closing elapsed epochs on the wall clock."""

    def __init__(self, aggregator: Aggregator, interval: float = 1.0):
        super().__init__(name="epoch-closer", daemon=True)
        self.aggregator = aggregator
        self.interval = interval
        self._stop_event = threading.Event()

    def run(self):
        while not self._stop_event.wait(self.interval):
            try:
                self.aggregator.close_due_epochs(int(time.time()))
            except Exception as e:
                logger.error(f"Epoch closer error: {e}")

    def stop(self):
        self._stop_event.set()


class BootstrapQuery(BaseModel):
    """A query the service registers at startup on behalf of a seeded analyst."""
    analyst_id: str
    query_id: str
    poi_id: str
    epoch_length: int = Field(ge=1)
    n_epochs: int = Field(ge=1)
    mechanism: MechanismSpec


class SeededAnalyst(BaseModel):
    analyst_id: str
    public_key_id: str
    seed: int = Field(ge=0, le=2**64 - 1)


class ServeSettings(BaseModel):
    listen: str = "127.0.0.1:8080"
    keyring_path: str = ""
    seed: int = Field(default=0, ge=0, le=2**64 - 1)
    grace_epochs: float = Field(default=1.0, ge=0.0)
    auto_close: bool = True
    virtual_time: bool = False  # honor the now parameter (simulate --server)
    retention_seconds: Optional[int] = Field(default=86400, ge=0)  # after a query ends; None keeps it
    snapshot_path: str = ""
    seeded_analysts: List[SeededAnalyst] = []
    bootstrap_queries: List[BootstrapQuery] = []


def build_aggregator(settings: ServeSettings, now: int) -> Aggregator:
    """Keyring from file plus seeded analysts; bootstrap queries start at now."""
    keyring = load_keyring(settings.keyring_path) if settings.keyring_path else Keyring()
    analysts: Dict[str, AnalystClient] = {}
    for entry in settings.seeded_analysts:
        signing_key = keyring.add_seeded(entry.analyst_id, entry.public_key_id, entry.seed)
        analysts[entry.analyst_id] = AnalystClient(entry.analyst_id, entry.public_key_id, signing_key)
    logger.info(f"Keyring loaded: {len(keyring)} analyst key(s)")

    aggregator = Aggregator(keyring, seed=settings.seed, grace_epochs=settings.grace_epochs,
                            retention_seconds=settings.retention_seconds)
    binding = InProcessBinding(aggregator)
    for item in settings.bootstrap_queries:
        analyst = analysts.get(item.analyst_id)
        if analyst is None:
            raise UnknownAnalyst(f"bootstrap query {item.query_id}: no seeded analyst {item.analyst_id}")
        query = Query(
            query_id=item.query_id, analyst_id=item.analyst_id, poi_id=item.poi_id,
            start_time=now, end_time=now + item.n_epochs * item.epoch_length,
            epoch_length=item.epoch_length, mechanism=item.mechanism,
        )
        analyst.publish(binding, query, now)
    return aggregator
