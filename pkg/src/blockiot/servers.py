"""Socket listeners for the three ingest transports plus the FHIR read API.

Each listener runs on its own thread and hands decoded requests to the
framing-neutral handlers in :mod:`blockiot.gateway`. TLS/DTLS is expected to
be terminated in front of these listeners; they speak plain TCP/UDP.
"""

from __future__ import annotations

import asyncio
import logging
import threading
import urllib.parse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional

from .core import canonical_json
from .errors import AuthError, AuthorizationError, StartupError
from .fhir import FhirService, SearchError, capability_statement
from .gateway import IngestPipeline, receive_coap, receive_http, receive_mqtt

logger = logging.getLogger(__name__)

FHIR_JSON = "application/fhir+json"


def split_address(address: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    """``host:port`` or ``:port`` -> (host, port)."""
    host, sep, port = address.rpartition(":")
    if not sep:
        raise ValueError(f"address {address!r} lacks a port")
    return (host or default_host).strip("[]"), int(port)


# --------------------------------------------------------------------------
# HTTP: ingest, health and FHIR


class _Handler(BaseHTTPRequestHandler):
    server_version = "blockiot"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route through logging, not stderr
        logger.debug("http %s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: bytes = b"", content_type: str = "application/json", headers: Optional[dict] = None):
        self.send_response(status)
        if body:
            self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        for k, v in (headers or {}).items():
            if k.lower() not in ("content-type", "content-length"):
                self.send_header(k, v)
        self.end_headers()
        if body:
            self.wfile.write(body)

    def do_POST(self):
        app: HttpApp = self.server.app
        path = urllib.parse.urlsplit(self.path).path
        if path != "/ingest/observations":
            self._send(404, canonical_json({"error": f"no route for POST {path}"}))
            return
        length = int(self.headers.get("Content-Length") or 0)
        if length > app.max_body:
            self._send(413, canonical_json({"error": f"body of {length} bytes exceeds {app.max_body}"}))
            self.close_connection = True
            return
        body = self.rfile.read(length)
        resp = receive_http(app.pipeline, dict(self.headers.items()), body)
        self._send(resp.status, resp.body, headers=resp.headers)

    def do_GET(self):
        app: HttpApp = self.server.app
        parts = urllib.parse.urlsplit(self.path)
        if parts.path == "/healthz":
            ready = app.ready()
            self._send(200 if ready else 503, canonical_json({"status": "ready" if ready else "starting"}))
            return
        if parts.path.startswith("/fhir") and app.fhir is not None:
            status, body = app.fhir_get(parts.path[len("/fhir"):], parts.query, self.headers.get("Authorization", ""))
            self._send(status, body, FHIR_JSON)
            return
        self._send(404, canonical_json({"error": f"no route for GET {parts.path}"}))


class HttpApp:
    def __init__(
        self,
        pipeline: Optional[IngestPipeline],
        fhir: Optional[FhirService],
        authenticate_reader: Callable,
        ready: Callable[[], bool],
        max_body: int = 16 * 1024 * 1024,
    ):
        self.pipeline = pipeline
        self.fhir = fhir
        self.authenticate_reader = authenticate_reader
        self.ready = ready
        self.max_body = max_body

    def fhir_get(self, path: str, query: str, authorization: str) -> tuple[int, bytes]:
        path = path.strip("/")
        if path == "metadata":
            return 200, canonical_json(capability_statement())
        token = authorization[7:].strip() if authorization.lower().startswith("bearer ") else None
        try:
            principal = self.authenticate_reader(token)
        except AuthError:
            return 401, b""
        try:
            params = urllib.parse.parse_qsl(query, keep_blank_values=True)
            bundle = self.fhir.search(path, params, principal)
        except AuthorizationError:
            # no resource leakage: empty body
            return 403, b""
        except SearchError as exc:
            outcome = {
                "resourceType": "OperationOutcome",
                "issue": [{"severity": "error", "code": "not-supported", "diagnostics": str(exc), "expression": [exc.parameter]}],
            }
            return 400, canonical_json(outcome)
        return 200, canonical_json(bundle)


class HttpListener:
    def __init__(self, address: str, app: HttpApp):
        host, port = split_address(address)
        try:
            self.server = ThreadingHTTPServer((host, port), _Handler)
        except OSError as exc:
            raise StartupError("http", f"cannot bind {address}: {exc}") from exc
        self.server.daemon_threads = True
        self.server.app = app
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> str:
        host, port = self.server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self.server.serve_forever, name="http-listener", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        if self._thread:
            self._thread.join(5)


# --------------------------------------------------------------------------
# CoAP


class CoapListener:
    """aiocoap server on a private event loop thread.

    Authentication rides in the URI query: ``psk_id=<id>&mac=<hex>`` where
    ``mac`` is HMAC-SHA256 of the (reassembled) payload under the PSK.
    """

    def __init__(self, address: str, pipeline: IngestPipeline):
        self.host, self.port = split_address(address)
        self.pipeline = pipeline
        self._loop = asyncio.new_event_loop()
        self._thread: Optional[threading.Thread] = None
        self._context = None
        self._started = threading.Event()
        self._error: Optional[BaseException] = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def _site(self):
        import aiocoap
        import aiocoap.resource as resource

        pipeline = self.pipeline

        class Observations(resource.Resource, resource.PathCapable):
            async def render_post(self, request):
                query = dict(q.split("=", 1) for q in request.opt.uri_query if "=" in q)
                path = "/obs/" + "/".join(request.opt.uri_path)
                loop = asyncio.get_running_loop()
                code, body = await loop.run_in_executor(
                    None, receive_coap, pipeline, path, request.payload, query.get("psk_id"), query.get("mac")
                )
                return aiocoap.Message(
                    code=aiocoap.Code(code[0] * 32 + code[1]),
                    payload=body,
                    content_format=aiocoap.numbers.ContentFormat.JSON,
                )

        site = resource.Site()
        site.add_resource(["obs"], Observations())
        return site

    def _run(self) -> None:
        import aiocoap

        asyncio.set_event_loop(self._loop)

        async def boot():
            self._context = await aiocoap.Context.create_server_context(
                self._site(), bind=(self.host, self.port)
            )

        try:
            self._loop.run_until_complete(boot())
        except BaseException as exc:  # noqa: BLE001 - reported to start()
            self._error = exc
            self._started.set()
            return
        self._started.set()
        self._loop.run_forever()
        self._loop.run_until_complete(self._context.shutdown())
        self._loop.close()

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="coap-listener", daemon=True)
        self._thread.start()
        self._started.wait(10)
        if self._error is not None:
            raise StartupError("coap", f"cannot bind {self.address}: {self._error}") from self._error

    def stop(self) -> None:
        if self._thread and self._thread.is_alive():
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(5)


# --------------------------------------------------------------------------
# MQTT


class MqttListener:
    """Subscribes to ``blockiot/+/+/obs`` on an external broker (QoS 1)."""

    def __init__(self, broker: str, pipeline: IngestPipeline, client_id: str = "blockiot-gateway"):
        self.host, self.port = split_address(broker)
        self.pipeline = pipeline
        self.client_id = client_id
        self._client = None
        self._subscribed = threading.Event()

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self, timeout: float = 10.0) -> None:
        import paho.mqtt.client as mqtt

        client = mqtt.Client(mqtt.CallbackAPIVersion.VERSION2, client_id=self.client_id, clean_session=False)

        def on_connect(c, userdata, flags, reason_code, properties):
            c.subscribe("blockiot/+/+/obs", qos=1)

        def on_subscribe(c, userdata, mid, reason_codes, properties):
            self._subscribed.set()

        def on_message(c, userdata, msg):
            reply_topic, body = receive_mqtt(self.pipeline, msg.topic, msg.payload)
            c.publish(reply_topic, body, qos=1)

        client.on_connect = on_connect
        client.on_subscribe = on_subscribe
        client.on_message = on_message
        try:
            client.connect(self.host, self.port, keepalive=30)
        except OSError as exc:
            raise StartupError("mqtt", f"cannot reach broker {self.address}: {exc}") from exc
        client.loop_start()
        self._client = client
        if not self._subscribed.wait(timeout):
            self.stop()
            raise StartupError("mqtt", f"no subscription acknowledgement from {self.address}")

    def stop(self) -> None:
        if self._client is not None:
            self._client.disconnect()
            self._client.loop_stop()
            self._client = None
