from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest

from smr.core import Document
from smr.retrieval import Bm25Retriever, build_index

DATA_DIR = Path(__file__).resolve().parent.parent / "data" / "toy"


def refine_json(query: str, reason: str | None = None) -> str:
    obj = {"action": "refine query", "refined_query": query}
    if reason is not None:
        obj["reason"] = reason
    return json.dumps(obj)


def rerank_json(ids: list[str], reason: str | None = None) -> str:
    obj = {"action": "re-rank", "reranked": ids}
    if reason is not None:
        obj["reason"] = reason
    return json.dumps(obj)


def stop_json() -> str:
    return json.dumps({"action": "stop"})


@pytest.fixture(scope="session")
def toy_corpus() -> list[Document]:
    docs = []
    with open(DATA_DIR / "corpus.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                record = json.loads(line)
                docs.append(Document(doc_id=record["doc_id"], text=record["text"]))
    return docs


@pytest.fixture(scope="session")
def toy_retriever(toy_corpus) -> Bm25Retriever:
    return Bm25Retriever(build_index(toy_corpus))


class LocalEndpoint:
    """Tiny chat-completions double running on a loopback port.

    Responses are scripted with push(); each POST consumes one.  When the
    script is empty the server answers with a stop decision.  Received
    request payloads are recorded for assertions.
    """

    def __init__(self):
        self.responses: list[tuple[int, bytes]] = []
        self.received: list[dict] = []
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = self.rfile.read(length)
                with outer._lock:
                    try:
                        outer.received.append(json.loads(body))
                    except json.JSONDecodeError:
                        outer.received.append({"raw": body.decode("utf-8", "replace")})
                    if outer.responses:
                        status, payload = outer.responses.pop(0)
                    else:
                        status, payload = 200, json.dumps(
                            {
                                "choices": [{"message": {"content": '{"action": "stop"}'}}],
                                "usage": {"completion_tokens": 3},
                            }
                        ).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self._server = HTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        self.url = f"http://127.0.0.1:{self._server.server_port}/v1/chat/completions"

    def push(self, body: dict | bytes, status: int = 200) -> None:
        payload = body if isinstance(body, bytes) else json.dumps(body).encode()
        with self._lock:
            self.responses.append((status, payload))

    def push_chat(self, text: str, completion_tokens: int | None = None) -> None:
        message: dict = {"choices": [{"message": {"content": text}}]}
        if completion_tokens is not None:
            message["usage"] = {"completion_tokens": completion_tokens}
        self.push(message)

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def endpoint():
    server = LocalEndpoint()
    yield server
    server.close()
