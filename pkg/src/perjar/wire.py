"""Flat key-value wire contract for remote model backends.

Requests and responses are flat dicts of scalars, so any reliable byte
transport (a socket, a pipe, an HTTP body) can carry them after the
obvious serialization. Structured fields (examples, configs) travel as
JSON-encoded strings to keep records flat. ``WireServer`` adapts any
in-process ModelBackend to the record protocol; ``WireBackend`` is the
client side and satisfies the ModelBackend interface, with retry/timeout
behavior driven by config keys.
"""

from __future__ import annotations

import json
import logging

from perjar.errors import BackendError
from perjar.prompting import AlpacaExample
from perjar.training import (AdapterHandle, FineTuneConfig, ModelBackend,
                             _config_dict, stable_digest)

log = logging.getLogger("perjar.wire")


def _encode_config(config: FineTuneConfig) -> str:
    return json.dumps(_config_dict(config), sort_keys=True)


def _decode_config(blob: str) -> FineTuneConfig:
    data = json.loads(blob)
    data["target_modules"] = tuple(data["target_modules"])
    return FineTuneConfig(**data)


class WireServer:
    """Dispatch wire records onto a wrapped ModelBackend."""

    def __init__(self, backend: ModelBackend):
        self.backend = backend
        self._handles: dict[str, AdapterHandle] = {}

    def handle(self, request: dict) -> dict:
        op = request.get("op")
        try:
            if op == "generate":
                text = self.backend.generate(request["prompt"],
                                             max_new_tokens=int(request["max_new_tokens"]),
                                             temperature=float(request["temperature"]))
                return {"ok": 1, "text": text}
            if op == "finetune":
                return {"ok": 1, "adapter_id": self._finetune(request)}
            if op == "activate":
                handle = self._handles.get(request["adapter_id"])
                if handle is None:
                    return {"ok": 0, "error": f"unknown adapter {request['adapter_id']!r}"}
                self.backend.activate(handle)
                return {"ok": 1}
            return {"ok": 0, "error": f"unknown op {op!r}"}
        except Exception as exc:
            log.warning("wire request %s failed: %s", request.get("request_id"), exc)
            return {"ok": 0, "error": str(exc)}

    def _finetune(self, request: dict) -> str:
        config = _decode_config(request["config"])
        mode = request["mode"]
        if mode == "sft":
            examples = [AlpacaExample(*fields) for fields in json.loads(request["payload"])]
            base = self._handles.get(request["base_adapter"]) if request.get("base_adapter") else None
            handle = self.backend.finetune_sft(examples, config, base=base)
        elif mode == "clm":
            handle = self.backend.finetune_clm(json.loads(request["payload"]), config)
        else:
            raise BackendError(f"unknown finetune mode {mode!r}")
        self._handles[handle.id] = handle
        return handle.id


def loopback(server: WireServer):
    """In-process transport: a callable that hands records to the server."""
    return server.handle


class WireBackend(ModelBackend):
    """Client side of the wire contract.

    ``transport`` is any callable taking a request record and returning a
    response record; transport exceptions are retried up to ``retries``
    times before a BackendError carrying the request id is raised.
    """

    def __init__(self, transport, retries: int = 2, timeout_seconds: float = 60.0):
        self.transport = transport
        self.retries = retries
        self.timeout_seconds = timeout_seconds
        self._counter = 0

    def _call(self, record: dict) -> dict:
        self._counter += 1
        request_id = f"req-{self._counter:06d}"
        record = {"request_id": request_id,
                  "timeout_seconds": self.timeout_seconds, **record}
        last = None
        for attempt in range(self.retries + 1):
            try:
                response = self.transport(record)
                break
            except Exception as exc:
                last = exc
                log.warning("transport failure on %s (attempt %d): %s",
                            request_id, attempt + 1, exc)
        else:
            raise BackendError(f"transport failed for {request_id}: {last}")
        if not response.get("ok"):
            raise BackendError(f"backend error for {request_id}: {response.get('error')}")
        return response

    def generate(self, prompt: str, max_new_tokens: int, temperature: float) -> str:
        response = self._call({"op": "generate", "prompt": prompt,
                               "max_new_tokens": max_new_tokens,
                               "temperature": temperature})
        return response["text"]

    def finetune_sft(self, examples, config: FineTuneConfig,
                     base: AdapterHandle | None = None) -> AdapterHandle:
        payload = json.dumps([[ex.instruction, ex.input, ex.response] for ex in examples])
        response = self._call({"op": "finetune", "mode": "sft", "payload": payload,
                               "config": _encode_config(config),
                               "base_adapter": base.id if base else ""})
        return AdapterHandle(id=response["adapter_id"], annotator_id="", strategy="",
                             config_hash="")

    def finetune_clm(self, texts, config: FineTuneConfig) -> AdapterHandle:
        response = self._call({"op": "finetune", "mode": "clm",
                               "payload": json.dumps(list(texts)),
                               "config": _encode_config(config)})
        return AdapterHandle(id=response["adapter_id"], annotator_id="", strategy="",
                             config_hash="")

    def activate(self, handle: AdapterHandle | None):
        if handle is not None:
            self._call({"op": "activate", "adapter_id": handle.id})
