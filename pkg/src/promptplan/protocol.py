"""Wire-protocol client for external detector/segmenter backends.

The protocol is newline-delimited JSON over a child process's standard
streams or a TCP socket. One request is in flight at a time per
connection; responses echo the request id and never reorder. Malformed
frames raise :class:`ProtocolError`; timeouts and closed transports raise
:class:`BackendUnavailable`. Both abort only the current image.
"""

from __future__ import annotations

import json
import queue
import shlex
import socket
import subprocess
import threading
from dataclasses import dataclass

from .backends import Detection, SegmentResult
from .mask import Box, MalformedRle, RleMask, decode_rle
from .prompts import BoxPrompt, PointPrompt

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = 30.0
CAPABILITIES = ("detect", "segment_box", "segment_point")


class ProtocolError(RuntimeError):
    """The backend sent a frame that violates the wire schema."""


class BackendUnavailable(RuntimeError):
    """The backend timed out, closed its stream, or could not be reached."""


@dataclass(frozen=True)
class ImageRef:
    """Handle for an image only the external backend can interpret."""

    image_id: str
    width: int
    height: int


class ExternalBackend:
    """Client for one backend process or socket; detect + segment calls.

    Satisfies the same detector/segmenter interface as the oracle backends,
    so pipelines run unchanged against a real model server.
    """

    def __init__(
        self,
        command: str | None = None,
        tcp: tuple[str, int] | None = None,
        timeout: float = DEFAULT_TIMEOUT,
    ):
        if (command is None) == (tcp is None):
            raise ValueError("exactly one of command/tcp must be given")
        self._command = command
        self._tcp = tcp
        self._timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._sock: socket.socket | None = None
        self._writer = None
        self._lines: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self._next_id = 0
        self._closed = False
        self.capabilities: tuple[str, ...] = ()
        self._connect()
        self._handshake()

    def _connect(self) -> None:
        if self._command is not None:
            try:
                self._proc = subprocess.Popen(
                    shlex.split(self._command),
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    text=True,
                    bufsize=1,
                )
            except OSError as exc:
                raise BackendUnavailable(f"cannot launch backend: {exc}") from exc
            self._writer = self._proc.stdin
            reader = self._proc.stdout
        else:
            host, port = self._tcp
            try:
                self._sock = socket.create_connection((host, port), timeout=self._timeout)
            except OSError as exc:
                raise BackendUnavailable(f"cannot connect to {host}:{port}: {exc}") from exc
            self._writer = self._sock.makefile("w", encoding="utf-8", newline="\n")
            reader = self._sock.makefile("r", encoding="utf-8")
        thread = threading.Thread(target=self._pump, args=(reader,), daemon=True)
        thread.start()

    def _pump(self, reader) -> None:
        # Reader thread: forwards lines until EOF, then posts a sentinel.
        try:
            for line in reader:
                self._lines.put(line)
        except (OSError, ValueError):
            pass
        self._lines.put(None)

    def _handshake(self) -> None:
        self._send({"type": "hello", "version": PROTOCOL_VERSION})
        ack = self._recv()
        if ack.get("type") != "hello_ack" or ack.get("version") != PROTOCOL_VERSION:
            raise ProtocolError(f"bad handshake response: {ack!r}")
        self.capabilities = tuple(ack.get("capabilities", ()))

    def _send(self, obj: dict) -> None:
        if self._closed:
            raise BackendUnavailable("backend already closed")
        try:
            self._writer.write(json.dumps(obj) + "\n")
            self._writer.flush()
        except (OSError, ValueError, BrokenPipeError) as exc:
            raise BackendUnavailable(f"write failed: {exc}") from exc

    def _recv(self) -> dict:
        try:
            line = self._lines.get(timeout=self._timeout)
        except queue.Empty:
            raise BackendUnavailable(f"no response within {self._timeout}s") from None
        if line is None:
            raise BackendUnavailable("backend closed its stream")
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed frame: {line!r}") from exc
        if not isinstance(obj, dict):
            raise ProtocolError(f"frame is not an object: {obj!r}")
        return obj

    def _request(self, obj: dict) -> dict:
        with self._lock:
            request_id = self._next_id
            self._next_id += 1
            obj["id"] = request_id
            self._send(obj)
            response = self._recv()
        if response.get("id") != request_id:
            raise ProtocolError(
                f"response id {response.get('id')!r} does not echo request id {request_id}"
            )
        if response.get("type") == "error":
            raise ProtocolError(f"backend error: {response.get('message', '<no message>')}")
        return response

    def detect(self, image) -> list[Detection]:
        response = self._request({"type": "detect", "image": str(image.image_id)})
        if response.get("type") != "detections":
            raise ProtocolError(f"expected detections frame, got {response.get('type')!r}")
        items = response.get("items")
        if not isinstance(items, list):
            raise ProtocolError("detections frame without items list")
        detections = []
        for item in items:
            try:
                x0, y0, x1, y1 = item["box"]
                detections.append(
                    Detection(
                        box=Box(int(x0), int(y0), int(x1), int(y1)),
                        category_id=int(item["category_id"]),
                        score=float(item["score"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ProtocolError(f"bad detection item {item!r}: {exc}") from exc
        return detections

    def segment_box(self, image, prompt: BoxPrompt) -> SegmentResult:
        return self._segment(image, {"kind": "box", "box": prompt.box.as_list()})

    def segment_point(self, image, prompt: PointPrompt) -> SegmentResult:
        return self._segment(image, {"kind": "point", "point": [prompt.x, prompt.y]})

    def _segment(self, image, prompt_obj: dict) -> SegmentResult:
        response = self._request(
            {"type": "segment", "image": str(image.image_id), "prompt": prompt_obj}
        )
        if response.get("type") != "mask":
            raise ProtocolError(f"expected mask frame, got {response.get('type')!r}")
        try:
            rle = RleMask.from_coco(response["rle"])
        except (KeyError, MalformedRle) as exc:
            raise ProtocolError(f"invalid mask RLE: {exc}") from exc
        if rle.width != image.width or rle.height != image.height:
            raise ProtocolError(
                f"mask is {rle.width}x{rle.height}, image is {image.width}x{image.height}"
            )
        try:
            score = float(response["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad mask score: {exc}") from exc
        if not 0.0 <= score <= 1.0:
            raise ProtocolError(f"mask score {score} outside [0, 1]")
        return SegmentResult(mask=decode_rle(rle), score=score)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass

    def __enter__(self) -> "ExternalBackend":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def parse_tcp_spec(spec: str) -> tuple[str, int]:
    """Split a HOST:PORT flag value."""
    host, sep, port = spec.rpartition(":")
    if not sep or not host:
        raise ValueError(f"expected HOST:PORT, got {spec!r}")
    return host, int(port)
