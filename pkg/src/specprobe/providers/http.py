"""Chat-completions client for the model-backed roles."""
from __future__ import annotations

import json
import os
import re
import time
from typing import Optional

import httpx

from ..model import Category, Confidence, JudgeAnswer, Probe, ValidationError
from .base import (ProviderError, ResponseCache, RetriableError, RoleBinding, UsageLedger,
                   load_prompt, render_prompt)
from .template import LABELS

RETRIABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


def _json_block(text: str):
    """First JSON object or array in a reply, tolerating code fences and chatter."""
    text = text.strip()
    fence = re.search(r"```(?:json)?\s*(.*?)```", text, re.DOTALL)
    if fence:
        text = fence.group(1).strip()
    for opener, closer in (("{", "}"), ("[", "]")):
        start = text.find(opener)
        end = text.rfind(closer)
        if start != -1 and end > start:
            try:
                return json.loads(text[start:end + 1])
            except json.JSONDecodeError:
                continue
    raise ValueError("no JSON in model reply")


def http_call(binding: RoleBinding, prompt: str, ledger: Optional[UsageLedger] = None,
              cache: Optional[ResponseCache] = None, client: Optional[httpx.Client] = None) -> str:
    """One chat-completions request; cached by (role, prompt, model) when a cache is given."""
    if cache is not None:
        hit = cache.get(binding.role, prompt, binding.model)
        if hit is not None:
            if ledger is not None:
                ledger.record(binding.role, hit.get("input_tokens", 0), hit.get("output_tokens", 0),
                              0.0, cached=True)
            return hit["text"]
    headers = {"Content-Type": "application/json"}
    if binding.api_key_env:
        key = os.environ.get(binding.api_key_env)
        if not key:
            raise ProviderError(f"environment variable {binding.api_key_env} is not set")
        headers["Authorization"] = f"Bearer {key}"
    body = {"model": binding.model, "temperature": binding.temperature,
            "messages": [{"role": "user", "content": prompt}]}
    body.update(binding.params.get("extra_body", {}))
    own = client is None
    client = client or httpx.Client(timeout=binding.timeout)
    t0 = time.monotonic()
    try:
        resp = client.post(binding.endpoint, json=body, headers=headers)
    except (httpx.TimeoutException, httpx.TransportError) as exc:
        raise RetriableError(f"{binding.role}: {exc!r}") from exc
    finally:
        if own:
            client.close()
    elapsed = time.monotonic() - t0
    if resp.status_code in RETRIABLE_STATUS:
        raise RetriableError(f"{binding.role}: HTTP {resp.status_code}")
    if resp.status_code >= 400:
        raise ProviderError(f"{binding.role}: HTTP {resp.status_code}: {resp.text[:200]}")
    try:
        data = resp.json()
        text = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise RetriableError(f"{binding.role}: malformed response body") from exc
    usage = data.get("usage") or {}
    tin, tout = int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))
    if ledger is not None:
        ledger.record(binding.role, tin, tout, elapsed)
    if cache is not None:
        cache.put(binding.role, prompt, binding.model,
                  {"text": text, "input_tokens": tin, "output_tokens": tout})
    return text


class HttpBackend:
    name = "http"

    def __init__(self, binding: RoleBinding, ledger: Optional[UsageLedger] = None,
                 cache: Optional[ResponseCache] = None, transport=None):
        self.binding = binding
        self.ledger = ledger
        self.cache = cache
        self.client = httpx.Client(timeout=binding.timeout, transport=transport)
        self.template = load_prompt(binding.prompt or binding.role)

    def call(self, **values) -> str:
        prompt = render_prompt(self.template, **values)
        return http_call(self.binding, prompt, self.ledger, self.cache, self.client)

    def phrase(self, fact, attempt: int = 0) -> str:
        text = self.call(fact=fact.describe(), category=fact.category.value)
        q = text.strip().strip('"').strip()
        if not q or "\n" in q or not q.endswith("?"):
            raise ValueError("malformed informalizer output")
        return q

    def generate(self, n: int, seed: int, spec_text: Optional[str] = None,
                 purpose: str = "train") -> list[Probe]:
        source = self.binding.params.get("source_code", "")
        program = self.binding.params.get("program", "PROGRAM")
        raw = _json_block(self.call(source_code=source, num_questions=n,
                                    categories=", ".join(c.value for c in Category)))
        items = raw.get("questions", raw) if isinstance(raw, dict) else raw
        probes = []
        for j, it in enumerate(items[:n]):
            try:
                probes.append(Probe(f"gen-{j:05d}", it["question"], it["answer"],
                                    it.get("category", "computation"), "llm", program,
                                    {"difficulty": it.get("difficulty")} if it.get("difficulty") else {}))
            except (KeyError, ValueError, TypeError):
                continue
        if not probes:
            raise RetriableError("generator returned no usable probes")
        return probes

    def answer(self, spec_text: str, probe: Probe) -> JudgeAnswer:
        raw = _json_block(self.call(spec=spec_text, question=probe.question))
        answer = raw.get("answer")
        conf = raw.get("confidence", "confirmed")
        if answer in (None, "", "SILENT") or conf == "not_addressed":
            return JudgeAnswer.silent_answer()
        try:
            return JudgeAnswer(str(answer), tuple(raw.get("evidence") or ()), conf)
        except (ValidationError, ValueError):
            return JudgeAnswer(str(answer), tuple(raw.get("evidence") or ()), Confidence.CONFIRMED)

    def compare(self, truth: str, answer: str) -> str:
        text = self.call(truth=truth, answer=answer).strip().lower()
        for label in LABELS:
            if label in text:
                return label
        raise RetriableError(f"comparator reply has no label: {text[:80]!r}")

    def revise(self, spec_text: str, actions, seed: int = 0) -> str:
        payload = json.dumps([a.to_dict() for a in actions], indent=2)
        return self.call(spec=spec_text, actions=payload)
