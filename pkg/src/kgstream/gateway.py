"""Authentication and service-level authorization.

Agents log in with a secret checked against a salted PBKDF2 hash and receive
an access and a refresh token. Every other request carries the access token;
``authorize_service`` checks it, checks that the agent's role is granted the
service and returns the agent's current context read from the graph.
"""
import hashlib
import hmac
import logging
import secrets
import threading
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable

import yaml

from .access import AgentContext, load_context
from .broker import now_ms
from .errors import AuthFailedError, RateLimitedError, ServiceForbiddenError, TokenExpiredError
from .graphs import IOE, KGS, data_iri, local_id
from .kg import GraphStore, Term
from .units import parse_duration

DEFAULT_SERVICES = frozenset({"monitor", "query"})

PBKDF2_ITERATIONS = 120_000


class TokenKind(Enum):
    ACCESS = "access"
    REFRESH = "refresh"


@dataclass(frozen=True)
class SessionToken:
    token_id: str
    agent: str
    issued: int
    expires: int
    kind: TokenKind

    def to_dict(self) -> dict:
        out = asdict(self)
        out["kind"] = self.kind.value
        return out


def hash_secret(secret: str, salt: bytes | None = None, iterations: int = PBKDF2_ITERATIONS) -> dict:
    salt = salt or secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", secret.encode("utf-8"), salt, iterations)
    return {"salt": salt.hex(), "hash": digest.hex(), "iterations": iterations}


class CredentialStore:
    """Salted hashes per agent id, persisted as YAML when a path is given."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, dict] = {}
        self._lock = threading.Lock()
        self._dummy = hash_secret(secrets.token_hex(8))
        if self.path is not None and self.path.exists():
            data = yaml.safe_load(self.path.read_text()) or {}
            self._entries = {str(k): dict(v) for k, v in data.items()}

    def __contains__(self, agent: str) -> bool:
        return agent in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def set(self, agent: str, secret: str) -> None:
        with self._lock:
            self._entries[agent] = hash_secret(secret)
        self.save()

    def update(self, credentials: dict[str, str]) -> None:
        with self._lock:
            for agent, secret in credentials.items():
                self._entries[agent] = hash_secret(secret)
        self.save()

    def verify(self, agent: str, secret: str) -> bool:
        entry = self._entries.get(agent)
        # unknown agents are hashed too
        candidate = entry or self._dummy
        digest = hashlib.pbkdf2_hmac(
            "sha256", secret.encode("utf-8"), bytes.fromhex(candidate["salt"]), int(candidate["iterations"])
        )
        return hmac.compare_digest(digest.hex(), candidate["hash"]) and entry is not None

    def save(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            self.path.write_text(yaml.safe_dump(self._entries, sort_keys=True))


class RateLimiter:
    """Fixed-window counter per key."""

    def __init__(self, limit: int, window: int, clock: Callable[[], int] = now_ms):
        self.limit = limit
        self.window = window
        self.clock = clock
        self._lock = threading.Lock()
        self._counts: dict[str, tuple[int, int]] = {}

    def hit(self, key: str) -> bool:
        now = self.clock()
        start = (now // self.window) * self.window
        with self._lock:
            window_start, count = self._counts.get(key, (start, 0))
            if window_start != start:
                window_start, count = start, 0
            if count >= self.limit:
                return False
            self._counts[key] = (window_start, count + 1)
            return True


def granted_services(store: GraphStore, role: Term | None) -> set[str]:
    if role is None:
        return set()
    explicit = {str(t) for t in store.objects(role, KGS.grantsService)}
    return explicit or set(DEFAULT_SERVICES)


class Gateway:
    def __init__(
        self,
        store: GraphStore,
        credentials: CredentialStore | None = None,
        access_ttl: int | str = "15 min",
        refresh_ttl: int | str = "12 hour",
        login_limit: int = 10,
        clock: Callable[[], int] = now_ms,
    ):
        self.store = store
        self.credentials = credentials or CredentialStore()
        self.access_ttl = parse_duration(access_ttl)
        self.refresh_ttl = parse_duration(refresh_ttl)
        if not 0 < self.access_ttl < self.refresh_ttl:
            raise ValueError("access tokens must be shorter-lived than refresh tokens")
        self.clock = clock
        self.limiter = RateLimiter(login_limit, 60_000, clock)
        self._tokens: dict[str, SessionToken] = {}
        self._lock = threading.Lock()

    def _issue(self, agent: str, kind: TokenKind) -> SessionToken:
        now = self.clock()
        ttl = self.access_ttl if kind is TokenKind.ACCESS else self.refresh_ttl
        token = SessionToken(secrets.token_urlsafe(24), agent, now, now + ttl, kind)
        with self._lock:
            self._tokens[token.token_id] = token
        return token

    def login(self, agent: str, secret: str) -> tuple[SessionToken, SessionToken]:
        if not self.limiter.hit(agent):
            raise RateLimitedError(f"too many login attempts for {agent}")
        if not self.credentials.verify(agent, secret):
            logging.warning(f"Failed login for {agent}.")
            raise AuthFailedError("invalid agent or credential")
        logging.info(f"Agent {agent} logged in.")
        return self._issue(agent, TokenKind.ACCESS), self._issue(agent, TokenKind.REFRESH)

    def check(self, token_id: str, kind: TokenKind = TokenKind.ACCESS) -> SessionToken:
        with self._lock:
            token = self._tokens.get(token_id or "")
        if token is None or token.kind is not kind:
            raise AuthFailedError("unknown token")
        if self.clock() >= token.expires:
            with self._lock:
                self._tokens.pop(token_id, None)
            raise TokenExpiredError(f"{token.kind.value} token expired")
        return token

    def token_valid(self, token_id: str) -> bool:
        try:
            self.check(token_id)
            return True
        except (AuthFailedError, TokenExpiredError):
            return False

    def refresh(self, refresh_token: str) -> SessionToken:
        token = self.check(refresh_token, TokenKind.REFRESH)
        return self._issue(token.agent, TokenKind.ACCESS)

    def logout(self, token_id: str) -> None:
        with self._lock:
            self._tokens.pop(token_id, None)

    def evict(self) -> int:
        """Drop expired tokens; returns how many were dropped."""
        now = self.clock()
        with self._lock:
            expired = [k for k, t in self._tokens.items() if now >= t.expires]
            for k in expired:
                del self._tokens[k]
        return len(expired)

    def authorize_service(self, token_id: str, service: str) -> AgentContext:
        token = self.check(token_id)
        agent = data_iri(token.agent)
        ctx = load_context(agent, self.store, self.clock())
        if service not in granted_services(self.store, ctx.role):
            role = local_id(ctx.role) if ctx.role is not None else "no role"
            raise ServiceForbiddenError(f"{token.agent} ({role}) may not use {service}")
        return ctx

    def agents(self) -> Iterable[str]:
        return sorted(local_id(t.subject) for t in self.store.triples(None, IOE.hasRole, None))
