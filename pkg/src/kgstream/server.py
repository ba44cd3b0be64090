"""The service host: one process running the gateway, monitoring, historical
query and pipeline services over a local socket.

Requests and responses are JSON documents, one per line:
``{"type": <request type>, "message": {...}}``. Every request other than
``ping``, ``shutdown``, ``login`` and ``refresh`` carries ``token`` inside its
message and passes the gateway before reaching a service.
"""
import json
import logging
import select
import socket
import threading
import time
from pathlib import Path
from typing import Any, Callable, Dict

import yaml

from .access import cache_stats
from .broker import Broker
from .config import Config, load_config
from .errors import BadRequestError, KGStreamError, NotFoundError, ServiceError
from .executor import RunningPipeline, deploy
from .federation import HistoricalQuery, historical_query
from .formats import load_ntriples, load_rules, parse_ntriples, save_ntriples
from .gateway import CredentialStore, Gateway
from .kg import GraphStore, Triple, term_key
from .monitoring import MonitoringRequest, MonitoringService
from .pipeline import PipelineSpec, from_kg, spec_from_dict, spec_to_dict
from .preprocess import Ingestor
from .storage import Storage

METADATA_FILE: Path = Path(".kgstream.json")
ACCEPT_TIMEOUT: float = 0.1
FEED_POLL: float = 0.2


# -- persisted state ----------------------------------------------------------

def rules_file(config: Config) -> Path:
    return config.data_dir / "rules.txt"


def load_store(config: Config) -> GraphStore:
    """The graph saved in the data directory, with its rules installed and its
    materialization restored."""
    store = GraphStore()
    custom = rules_file(config)
    load_rules(custom if custom.is_file() else None).install(store)
    if config.graph_file.is_file():
        count = load_ntriples(store, config.graph_file)
        logging.info(f"Loaded {count} asserted triples from {config.graph_file}.")
    if config.inferred_file.is_file():
        contents = config.inferred_file.read_text(encoding="utf-8")
        count = store.insert_inferred(parse_ntriples(contents, store.fresh_blank, source=str(config.inferred_file)))
        logging.info(f"Restored {count} inferred triples from {config.inferred_file}.")
    return store


def triple_key(t: Triple) -> tuple:
    return tuple(term_key(x) for x in t)


def save_store(store: GraphStore, config: Config) -> None:
    with store.lock.read():
        asserted = sorted(store.asserted, key=triple_key)
        inferred = sorted(store.inferred, key=triple_key)
    save_ntriples(asserted, config.graph_file)
    if inferred or config.inferred_file.exists():
        save_ntriples(inferred, config.inferred_file)
    logging.debug(f"Saved {len(asserted)} asserted and {len(inferred)} inferred triples to {config.data_dir}.")


def save_pipeline(spec: PipelineSpec, config: Config) -> Path:
    path = config.pipelines_dir / f"{spec.id}.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(spec_to_dict(spec), sort_keys=False), encoding="utf-8")
    return path


def saved_pipelines(config: Config) -> list[PipelineSpec]:
    if not config.pipelines_dir.is_dir():
        return []
    specs = []
    for path in sorted(config.pipelines_dir.glob("*.yaml")):
        specs.append(spec_from_dict(yaml.safe_load(path.read_text(encoding="utf-8"))))
    return specs


# -- services -----------------------------------------------------------------

class Services:
    """Everything ``serve`` runs, wired from one config."""

    def __init__(self, config: Config, store: GraphStore | None = None, clock: Callable[[], int] | None = None):
        self.config = config
        self.store = store if store is not None else load_store(config)
        b = config.broker
        self.broker = Broker(b.queue_size, b.policy, b.retain, b.max_payload_bytes, b.delivery_workers)
        s = config.storage
        self.storage = Storage(config.storage_dir, s.backends, s.partition, s.retention, broker=self.broker)
        g = config.gateway
        gateway_options = {"clock": clock} if clock is not None else {}
        self.gateway = Gateway(
            self.store,
            CredentialStore(config.credentials_file),
            g.access_ttl,
            g.refresh_ttl,
            g.login_limit,
            **gateway_options,
        )
        self.monitoring = MonitoringService(
            self.broker,
            self.store,
            interval=config.monitoring.revalidate_interval / 1000,
            queue_size=config.monitoring.feed_queue_size,
            token_valid=self.gateway.token_valid,
            clock=clock,
        )
        self.ingestor = Ingestor.from_store(self.broker, self.store)
        self.pipelines: dict[str, RunningPipeline] = {}
        self._lock = threading.Lock()
        self.started = False

    def start(self) -> "Services":
        self.storage.attach(self.broker, self.store)
        self.monitoring.start()
        for spec in saved_pipelines(self.config):
            try:
                self.run_pipeline(spec, persist=False)
            except KGStreamError as e:
                logging.error(f"Saved pipeline {spec.id} could not start: {e.describe()}")
        self.started = True
        logging.info(f"Services started: {len(self.pipelines)} pipeline(s), {len(self.storage.backends)} backend(s).")
        return self

    def run_pipeline(self, spec: PipelineSpec, persist: bool = True) -> RunningPipeline:
        p = self.config.pipeline
        with self._lock:
            if spec.id in self.pipelines:
                raise BadRequestError(f"pipeline {spec.id} is already running")
            running = deploy(
                spec,
                self.store,
                self.broker,
                lateness=p.lateness,
                bundle_size=p.bundle_size,
                bundle_time=p.bundle_time,
            )
            self.pipelines[spec.id] = running
        # derived streams may carry storage specs or new topics
        self.storage.refresh_routes(self.store)
        if persist:
            save_pipeline(spec, self.config)
        return running

    def stop_pipeline(self, pipeline_id: str) -> dict:
        with self._lock:
            running = self.pipelines.pop(pipeline_id, None)
        if running is None:
            raise NotFoundError(f"pipeline {pipeline_id} is not running")
        running.stop()
        return running.stats()

    def stats(self) -> dict[str, Any]:
        with self._lock:
            pipelines = {pid: p.stats() for pid, p in self.pipelines.items()}
        return {
            "graph": {
                "asserted": len(self.store.asserted),
                "inferred": len(self.store.inferred),
                "epoch": self.store.epoch,
            },
            "broker": self.broker.stats(),
            "storage": self.storage.describe(),
            "pipelines": pipelines,
            "feeds": {fid: f.describe() for fid, f in list(self.monitoring.feeds.items())},
            "access_cache": cache_stats(),
        }

    def close(self) -> None:
        with self._lock:
            running = list(self.pipelines.values())
            self.pipelines.clear()
        for pipeline in running:
            pipeline.stop()
        self.monitoring.stop()
        sealed = self.storage.seal()
        self.storage.close()
        self.broker.close()
        save_store(self.store, self.config)
        logging.info(f"Services stopped, {sealed} partition(s) sealed.")


# -- protocol -------------------------------------------------------------------

def find_open_port() -> int:
    """Finds an available port by attempting to create a socket."""
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind(("", 0))
        return s.getsockname()[1]


def save_metadata(port: int, host: str) -> None:
    """Saves the assigned port to a metadata file."""
    metadata: Dict[str, Any] = {"port": port, "host": host}
    with METADATA_FILE.open("w") as f:
        json.dump(metadata, f, indent=4)


def send_response(connection: socket.socket, message: Any, message_type: str) -> None:
    """Sends one JSON-encoded response line to the client."""
    response: str = json.dumps({"message": message, "type": message_type}, default=str)
    connection.sendall(response.encode("utf-8") + b"\n")


def send_error(connection: socket.socket, error: KGStreamError) -> None:
    response = {"type": "error", "code": error.code, "message": error.message}
    if getattr(error, "denied", None):
        response["denied"] = error.denied
    connection.sendall(json.dumps(response).encode("utf-8") + b"\n")


def _body(message: Dict) -> Dict:
    body = message.get("message")
    if body is None:
        return {}
    if not isinstance(body, dict):
        raise BadRequestError("the request message must be a JSON object")
    return body


def ping_handler(services: Services, connection: socket.socket, message: Dict) -> bool:
    send_response(connection, "pong", "ping")
    return True


def shutdown_handler(services: Services, connection: socket.socket, message: Dict) -> bool:
    logging.info("Received shutdown signal. Shutting down server.")
    send_response(connection, "Shutting down server.", "shutdown")
    return False


def login_handler(services: Services, connection: socket.socket, message: Dict) -> bool:
    body = _body(message)
    if "agent" not in body or "secret" not in body:
        raise BadRequestError("login needs an agent and a secret")
    access, refresh = services.gateway.login(str(body["agent"]), str(body["secret"]))
    send_response(connection, {"access": access.to_dict(), "refresh": refresh.to_dict()}, "login")
    return True


def refresh_handler(services: Services, connection: socket.socket, message: Dict) -> bool:
    body = _body(message)
    access = services.gateway.refresh(str(body.get("refresh", "")))
    send_response(connection, {"access": access.to_dict()}, "refresh")
    return True


def logout_handler(services: Services, connection: socket.socket, message: Dict) -> bool:
    services.gateway.logout(str(_body(message).get("token", "")))
    send_response(connection, "Logged out.", "logout")
    return True


def _client_gone(connection: socket.socket) -> bool:
    readable, _, _ = select.select([connection], [], [], 0)
    if not readable:
        return False
    try:
        return connection.recv(1, socket.MSG_PEEK) == b""
    except OSError:
        return True


def monitor_handler(services: Services, connection: socket.socket, message: Dict) -> bool:
    """Streams feed records until the client disconnects or the feed closes."""
    received_at = time.monotonic()
    body = _body(message)
    ctx = services.gateway.authorize_service(body.get("token"), "monitor")
    request = MonitoringRequest.from_document(body)
    feed = services.monitoring.open(request, ctx, received_at)
    send_response(connection, feed.describe(), "feed")
    limit = body.get("limit")
    sent = 0
    try:
        while True:
            record = feed.next(timeout=FEED_POLL)
            if record is None:
                if feed.closed or _client_gone(connection):
                    break
                continue
            send_response(connection, record, record["type"])
            sent += 1
            if record["type"] == "auth-expired" or (limit is not None and sent >= limit):
                break
    except OSError:
        logging.debug(f"Client of {feed.id} disconnected.")
    finally:
        services.monitoring.close(feed.id)
    return True


def query_handler(services: Services, connection: socket.socket, message: Dict) -> bool:
    body = _body(message)
    ctx = services.gateway.authorize_service(body.get("token"), "query")
    result = historical_query(HistoricalQuery.from_document(body), ctx, services.store, services.storage)
    send_response(connection, result.to_dict(), "query")
    return True


def pipeline_handler(services: Services, connection: socket.socket, message: Dict) -> bool:
    body = _body(message)
    services.gateway.authorize_service(body.get("token"), "pipeline")
    action = body.get("action", "deploy")
    if action == "deploy":
        if not isinstance(body.get("spec"), dict):
            raise BadRequestError("pipeline deploy needs a spec document")
        running = services.run_pipeline(spec_from_dict(body["spec"]))
        send_response(connection, running.stats(), "pipeline")
    elif action == "run":
        running = services.run_pipeline(from_kg(str(body.get("pipeline", "")), services.store), persist=False)
        send_response(connection, running.stats(), "pipeline")
    elif action == "stop":
        send_response(connection, services.stop_pipeline(str(body.get("pipeline", ""))), "pipeline")
    elif action == "list":
        send_response(connection, sorted(services.pipelines), "pipeline")
    else:
        raise BadRequestError(f"unknown pipeline action {action}")
    return True


def stats_handler(services: Services, connection: socket.socket, message: Dict) -> bool:
    services.gateway.authorize_service(_body(message).get("token"), "stats")
    send_response(connection, services.stats(), "stats")
    return True


def publish_handler(services: Services, connection: socket.socket, message: Dict) -> bool:
    """Ingests raw messages for a registered source."""
    body = _body(message)
    services.gateway.authorize_service(body.get("token"), "publish")
    source = str(body.get("source", ""))
    messages = body.get("messages")
    if not isinstance(messages, list):
        raise BadRequestError("publish needs a list of messages")
    ingested = failed = 0
    for raw in messages:
        try:
            services.ingestor.ingest(raw if isinstance(raw, str) else json.dumps(raw), source)
            ingested += 1
        except KGStreamError as e:
            if isinstance(e, BadRequestError):
                raise
            failed += 1
    send_response(connection, {"ingested": ingested, "dead_lettered": failed}, "publish")
    return True


handlers = {
    "ping": ping_handler,
    "shutdown": shutdown_handler,
    "login": login_handler,
    "refresh": refresh_handler,
    "logout": logout_handler,
    "monitor": monitor_handler,
    "query": query_handler,
    "pipeline": pipeline_handler,
    "stats": stats_handler,
    "publish": publish_handler,
}


def handle_client(services: Services, connection: socket.socket, listening: threading.Event) -> None:
    """Handles one request line from a connected client."""
    continue_listening = True
    try:
        with connection.makefile("rb") as reader:
            data = reader.readline()
        if not data:
            return
        message: Dict[str, Any] = json.loads(data.decode("utf-8"))
        if not isinstance(message, dict):
            raise BadRequestError("a request must be a JSON object")
        message_type = message.get("type")
        logging.debug(f"Received message of type: {message_type}")
        handler = handlers.get(message_type)
        if handler is None:
            raise BadRequestError(f"Invalid message type `{message_type}`")
        continue_listening = handler(services, connection, message)
    except json.JSONDecodeError:
        send_error(connection, BadRequestError("Invalid JSON"))
    except KGStreamError as e:
        logging.debug(f"Request failed: {e.describe()}")
        send_error(connection, e)
    except OSError as e:
        logging.debug(f"Connection dropped: {e}")
    except Exception as e:
        logging.exception(e)
        try:
            send_error(connection, ServiceError(str(e)))
        except OSError:
            pass
    finally:
        connection.close()
        if not continue_listening:
            listening.set()


def serve(config: Config, services: Services | None = None, ready: threading.Event | None = None) -> None:
    """Run the services and accept clients until shutdown or idle timeout."""
    services = (services or Services(config)).start()
    host = config.server.host
    port: int = find_open_port()

    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as server_socket:
        server_socket.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server_socket.bind((host, port))
        server_socket.listen(16)
        server_socket.settimeout(ACCEPT_TIMEOUT)
        save_metadata(port, host)
        logging.info(f"Server listening on {host}:{port}")
        if ready is not None:
            ready.set()

        listening = threading.Event()
        idle_since = time.monotonic()
        timeout = config.server.timeout / 1000
        try:
            while not listening.is_set():
                try:
                    conn, addr = server_socket.accept()
                except socket.timeout:
                    if timeout and time.monotonic() - idle_since > timeout:
                        logging.info("Server timed out. Shutting down.")
                        break
                    continue
                idle_since = time.monotonic()
                conn.settimeout(None)
                client_thread = threading.Thread(
                    target=handle_client, args=(services, conn, listening), daemon=True
                )
                logging.debug(f"Starting new thread to handle client from {addr}")
                client_thread.start()
        except KeyboardInterrupt:
            logging.info("Interrupted. Shutting down.")
        finally:
            services.close()
            try:
                METADATA_FILE.unlink()
            except FileNotFoundError:
                pass
    if listening.is_set():
        logging.info("Server shutting down due to shutdown signal")


def main(config_path: str | None = None) -> None:
    # if no logging is set up, log to kgstream.server.log
    if not logging.root.handlers:
        logging.basicConfig(
            filename="kgstream.server.log",
            level=logging.DEBUG,
            format="%(asctime)s - %(levelname)s - %(message)s",
            filemode="a",
        )
    serve(load_config(config_path))


if __name__ == "__main__":
    main()
