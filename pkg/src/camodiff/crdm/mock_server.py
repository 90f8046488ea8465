"""Deterministic in-process mock of the chat-completions wire format.

Replies are a pure function of the request (image bytes, dialogue position,
system messages), so dialogue tests and the offline annotation path are
fully hermetic. A scripted replier can be swapped in to exercise failure
paths. The server also answers /v1/embeddings for the external metrics
provider.
"""

import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .templates import PROHIBITION_CLAUSE

_CREATURES = ("moth", "lizard", "frog", "octopus", "owl", "crab", "mantis",
              "snake", "toad", "spider")
_SURFACES = ("lichen-crusted bark", "dry leaf litter", "mossy stone",
             "rippled sand", "gravel scree", "reed thicket", "algae-slick rock")
_TONES = ("ochre and umber", "ash gray", "olive green", "rust brown",
          "sandy beige", "slate blue")
_PATTERNS = ("mottled", "banded", "speckled", "reticulated", "streaked")


def _seed_from(parts: list[str]) -> int:
    digest = hashlib.sha256("||".join(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _flatten_text(content) -> str:
    if isinstance(content, str):
        return content
    return " ".join(part.get("text", "") for part in content
                    if part.get("type") == "text")


def _first_image(messages) -> str:
    for msg in messages:
        if msg["role"] != "user" or isinstance(msg["content"], str):
            continue
        for part in msg["content"]:
            if part.get("type") == "image_url":
                return part["image_url"]["url"]
    return ""


class CannedVlmReplier:
    """Default deterministic replies keyed by image hash and dialogue position.

    When the system messages do not carry the outline prohibition, one in
    three images gets prompts that mention the annotated outline, mirroring
    what an unconstrained assistant tends to produce.
    """

    def __call__(self, body: dict) -> str:
        messages = body["messages"]
        system_text = " ".join(_flatten_text(m["content"]) for m in messages
                               if m["role"] == "system")
        prohibited = PROHIBITION_CLAUSE in system_text
        n_assistant = sum(1 for m in messages if m["role"] == "assistant")
        user_texts = [_flatten_text(m["content"]) for m in messages
                      if m["role"] == "user"]
        image_url = _first_image(messages)

        rng = np.random.default_rng(_seed_from([image_url, str(prohibited)]))
        creature = rng.choice(_CREATURES)
        surface = rng.choice(_SURFACES)
        tone = rng.choice(_TONES)
        pattern = rng.choice(_PATTERNS)
        mentions_outline = (not prohibited) and rng.integers(3) == 0
        corrective = bool(user_texts) and (
            "forbidden words" in user_texts[-1] or "avoiding the words" in user_texts[-1])
        imagined = any("imagine an ideal scenery" in t for t in user_texts)

        detail_subject = f"the outlined {creature}" if mentions_outline else f"a {creature}"
        if corrective:
            detail_subject = f"a {creature}"

        if n_assistant == 0:
            return (f"The image shows a {creature} with {pattern} skin in "
                    f"{tone} tones, resting motionless.")
        if n_assistant == 1:
            setting = "an imagined" if imagined else "the surrounding"
            return (f"In {setting} scene of {surface}, the {tone} palette and "
                    f"{pattern} texture of the {creature} repeat the ground "
                    "pattern around it.")
        if n_assistant == 2 or (corrective and "forbidden words" in user_texts[-1]):
            return (f"A photorealistic scene of {detail_subject} resting on "
                    f"{surface}. Its {pattern} skin repeats the {tone} tones of "
                    "the ground, and soft natural light flattens the boundary "
                    "between body and background.")
        return f"A {pattern} {creature} disappears into {surface} of matching {tone} tones."


class ScriptedReplier:
    """Returns canned replies in order; repeats the last one when exhausted."""

    def __init__(self, replies: list[str]):
        self.replies = list(replies)
        self.calls = 0

    def __call__(self, body: dict) -> str:
        reply = self.replies[min(self.calls, len(self.replies) - 1)]
        self.calls += 1
        return reply


def _embedding_for(item: str, dim: int = 192) -> list[float]:
    rng = np.random.default_rng(_seed_from(["embed", item]))
    return rng.normal(0.0, 1.0, size=dim).tolist()


class MockVlmServer:
    """Threaded local HTTP server speaking the chat-completions JSON dialect."""

    def __init__(self, replier=None, fail_first: int = 0):
        self.replier = replier or CannedVlmReplier()
        self.requests: list[dict] = []
        self.fail_first = fail_first
        self._failures = 0
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                outer.requests.append({"path": self.path, "body": body})
                if outer._failures < outer.fail_first:
                    outer._failures += 1
                    self.send_error(503, "injected failure")
                    return
                if self.path.rstrip("/").endswith("chat/completions"):
                    reply = outer.replier(body)
                    payload = {"id": "mock-0", "object": "chat.completion",
                               "model": body.get("model", "mock-vlm"),
                               "choices": [{"index": 0, "finish_reason": "stop",
                                            "message": {"role": "assistant",
                                                        "content": reply}}]}
                elif self.path.rstrip("/").endswith("embeddings"):
                    data = [{"index": i, "embedding": _embedding_for(item)}
                            for i, item in enumerate(body.get("input", []))]
                    payload = {"object": "list", "data": data}
                else:
                    self.send_error(404, "unknown route")
                    return
                raw = json.dumps(payload).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def start(self) -> "MockVlmServer":
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "MockVlmServer":
        return self.start()

    def __exit__(self, *exc):
        self.stop()
