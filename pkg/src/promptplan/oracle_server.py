"""Ground-truth oracle served over the external-backend wire protocol.

Lets the external transport be exercised end to end without any real
model: answers detect/segment requests from a scene fixture directory,
over stdio (default) or a TCP socket (``--listen PORT``).

    python3 -m promptplan.oracle_server FIXTURES [--recall R] [--seed S]
"""

from __future__ import annotations

import argparse
import json
import socketserver
import sys

from .backends import (
    SceneAnnotation,
    load_fixtures,
    oracle_detect,
    oracle_segment_box,
    oracle_segment_point,
)
from .mask import Box, encode_rle
from .prompts import BoxPrompt, PointPrompt
from .protocol import CAPABILITIES, PROTOCOL_VERSION


class OracleServer:
    def __init__(self, scenes: list[SceneAnnotation], recall: float, seed: int):
        self.scenes = {str(s.image_id): s for s in scenes}
        self.recall = recall
        self.seed = seed

    def handle_line(self, line: str) -> dict | None:
        try:
            request = json.loads(line)
        except json.JSONDecodeError:
            return {"type": "error", "id": None, "message": "malformed JSON frame"}
        kind = request.get("type")
        if kind == "hello":
            return {
                "type": "hello_ack",
                "version": PROTOCOL_VERSION,
                "capabilities": list(CAPABILITIES),
            }
        request_id = request.get("id")
        try:
            if kind == "detect":
                scene = self._scene(request)
                items = [
                    {"box": det.box.as_list(), "category_id": det.category_id, "score": det.score}
                    for det in oracle_detect(scene, self.recall, self.seed)
                ]
                return {"type": "detections", "id": request_id, "items": items}
            if kind == "segment":
                scene = self._scene(request)
                prompt = request.get("prompt", {})
                if prompt.get("kind") == "box":
                    x0, y0, x1, y1 = prompt["box"]
                    result = oracle_segment_box(
                        scene, BoxPrompt(box=Box(int(x0), int(y0), int(x1), int(y1)))
                    )
                elif prompt.get("kind") == "point":
                    x, y = prompt["point"]
                    result = oracle_segment_point(scene, PointPrompt(float(x), float(y)))
                else:
                    raise ValueError(f"unknown prompt kind {prompt.get('kind')!r}")
                return {
                    "type": "mask",
                    "id": request_id,
                    "rle": encode_rle(result.mask).to_coco(),
                    "score": result.score,
                }
            raise ValueError(f"unknown request type {kind!r}")
        except Exception as exc:  # per-request failure becomes an error frame
            return {"type": "error", "id": request_id, "message": str(exc)}

    def _scene(self, request: dict) -> SceneAnnotation:
        image_id = str(request.get("image"))
        if image_id not in self.scenes:
            raise KeyError(f"unknown image {image_id!r}")
        return self.scenes[image_id]

    def serve_stream(self, reader, writer) -> None:
        for line in reader:
            if not line.strip():
                continue
            response = self.handle_line(line)
            if response is not None:
                writer.write(json.dumps(response) + "\n")
                writer.flush()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("fixtures", help="scene fixture file or directory")
    parser.add_argument("--recall", type=float, default=1.0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--listen", type=int, metavar="PORT",
                        help="serve one TCP connection at a time instead of stdio")
    args = parser.parse_args(argv)

    server = OracleServer(load_fixtures(args.fixtures), args.recall, args.seed)
    if args.listen is None:
        server.serve_stream(sys.stdin, sys.stdout)
        return 0

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            reader = self.rfile.detach()
            import io

            server.serve_stream(
                io.TextIOWrapper(reader, encoding="utf-8"),
                io.TextIOWrapper(self.wfile, encoding="utf-8", write_through=True),
            )

    with socketserver.TCPServer(("127.0.0.1", args.listen), Handler) as srv:
        # announce the bound port so callers can pass --listen 0
        print(f"listening on {srv.server_address[0]}:{srv.server_address[1]}", file=sys.stderr, flush=True)
        srv.serve_forever()
    return 0


if __name__ == "__main__":
    sys.exit(main())
