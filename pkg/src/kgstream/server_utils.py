import json
import logging
import socket
from pathlib import Path
from typing import Any, Dict, Iterator

from .errors import KGStreamError, ServiceError, error_for_code

HOST = "127.0.0.1"
METADATA_FILE = Path(".kgstream.json")


def send_request(connection: socket.socket, message: Any, message_type: str) -> None:
    """Sends one JSON-encoded request line to the server."""
    request: str = json.dumps({"message": message, "type": message_type})
    connection.sendall(request.encode("utf-8") + b"\n")


def check_response(response: Dict) -> Dict:
    """Raises the error a response carries, or returns it unchanged."""
    if response.get("type") == "error":
        raise error_for_code(response.get("code", "error"), response.get("message", ""))
    return response


def _lines(connection: socket.socket) -> Iterator[Dict]:
    with connection.makefile("rb") as reader:
        for line in reader:
            if line.strip():
                yield json.loads(line.decode("utf-8"))


def create_socket_and_send_request(
    port: int, message: Any, message_type: str, timeout: float | None = 5, host: str = HOST
) -> Dict:
    """Creates a socket, sends a request to the server, and returns the response."""
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.settimeout(timeout)
        s.connect((host, port))
        send_request(s, message, message_type)
        for response in _lines(s):
            return check_response(response)
    raise ServiceError("the server closed the connection without answering")


def stream_request(
    port: int, message: Any, message_type: str, timeout: float | None = None, host: str = HOST
) -> Iterator[Dict]:
    """Sends a request and yields every response line until the server closes."""
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.settimeout(timeout)
        s.connect((host, port))
        send_request(s, message, message_type)
        for response in _lines(s):
            yield check_response(response)


def ping_server(port: int, timeout: int = 5, host: str = HOST) -> bool:
    """Pings the server to check if it is running."""
    try:
        response = create_socket_and_send_request(port, "ping", "ping", timeout=timeout, host=host)
        return response["message"] == "pong"
    except ConnectionRefusedError:
        return False
    except (OSError, KGStreamError, ValueError) as e:
        logging.error(e)
        return False


def read_metadata() -> Dict:
    if not METADATA_FILE.exists():
        return {}
    with METADATA_FILE.open("r") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError:
            # the server may be halfway through writing it
            return {}


def get_active_server() -> tuple[str, int] | None:
    """Returns (host, port) of the active server, or None if no server is running."""
    metadata = read_metadata()
    if not metadata:
        return None
    logging.debug(f"Metadata: {metadata}")
    port = metadata.get("port", None)
    host = metadata.get("host", HOST)
    if port is not None:
        logging.debug(f"Attempting to ping server on port {port}...")
        if ping_server(port, host=host):
            logging.debug(f"Server is running on port {port}.")
            return host, port
        logging.warning(f"Metadata file exists, but server is not responding on port {port}.")
    return None


def stop_server(port: int, host: str = HOST) -> None:
    """Stops the server."""
    if port is not None:
        create_socket_and_send_request(port, "shutdown", "shutdown", host=host)


class Client:
    """Talks to a running server on behalf of one agent session."""

    def __init__(self, port: int, host: str = HOST, token: str | None = None, timeout: float | None = 30):
        self.port = port
        self.host = host
        self.token = token
        self.timeout = timeout

    def request(self, message_type: str, **body) -> Any:
        if self.token is not None:
            body.setdefault("token", self.token)
        return create_socket_and_send_request(self.port, body, message_type, self.timeout, self.host)["message"]

    def login(self, agent: str, secret: str) -> Dict:
        tokens = self.request("login", agent=agent, secret=secret)
        self.token = tokens["access"]["token_id"]
        return tokens

    def monitor(self, constraints: list[dict], limit: int | None = None) -> Iterator[Dict]:
        body: Dict[str, Any] = {"constraints": constraints, "token": self.token}
        if limit is not None:
            body["limit"] = limit
        yield from stream_request(self.port, body, "monitor", host=self.host)
