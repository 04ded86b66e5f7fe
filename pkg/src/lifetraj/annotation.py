"""LLM-assisted positive labelling: sampled extraction followed by a deterministic verification pass.

The chat backend is any callable ``chat(prompt, temperature) -> str``, so the
protocol can run against a local mock. :class:`ChatCompletionClient` talks to
an OpenAI-style ``/chat/completions`` endpoint.
"""
from __future__ import annotations

import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import requests
import yaml

from .context import Example, example_from_record
from .ingest import collapse_ws

logger = logging.getLogger(__name__)

API_KEY_ENV = "LIFETRAJ_LLM_API_KEY"
ENDPOINT_ENV = "LIFETRAJ_LLM_ENDPOINT"

Chat = Callable[[str, float], str]


class ChatError(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptSet:
    extraction_template: str
    verification_template: str
    extraction_temperature: float
    verification_temperature: float
    trials: int
    triplet_re: re.Pattern
    accept_re: re.Pattern
    reject_re: re.Pattern

    @classmethod
    def load(cls, path: str | Path | None = None) -> "PromptSet":
        if path is None:
            text = resources.files("lifetraj").joinpath("data/prompts.yaml").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        cfg = yaml.safe_load(text)
        ext, ver, gram = cfg["extraction"], cfg["verification"], cfg["grammar"]
        flags = re.IGNORECASE | re.MULTILINE
        return cls(
            extraction_template=ext["template"],
            verification_template=ver["template"],
            extraction_temperature=float(ext.get("temperature", 0.8)),
            verification_temperature=float(ver.get("temperature", 0.0)),
            trials=int(ext.get("trials", 3)),
            triplet_re=re.compile(gram["triplet"], flags),
            accept_re=re.compile(gram["accept"], flags),
            reject_re=re.compile(gram["reject"], flags),
        )


class ChatCompletionClient:
    """Minimal chat-completion HTTP client; the API key is read from the environment."""

    def __init__(self, endpoint: str | None = None, model: str = "gpt-4", api_key: str | None = None,
                 timeout: float = 60.0, session: requests.Session | None = None):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint:
            raise ValueError(f"no chat endpoint given and {ENDPOINT_ENV} is unset")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self.session = session or requests.Session()

    def __call__(self, prompt: str, temperature: float) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.model,
            "temperature": temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        try:
            resp = self.session.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (requests.RequestException, ValueError, KeyError, IndexError, TypeError) as exc:
            raise ChatError(f"chat request failed: {exc}") from exc


def _norm(text: str) -> str:
    return collapse_ws(text).casefold()


def parse_triplets(response: str, prompts: PromptSet) -> list[tuple[str, str, str]]:
    return [
        (m.group("person").strip(), m.group("time").strip(), m.group("location").strip())
        for m in prompts.triplet_re.finditer(response)
    ]


def parse_verdict(response: str, prompts: PromptSet) -> bool | None:
    text = response.strip()
    if prompts.accept_re.search(text):
        return True
    if prompts.reject_re.search(text):
        return False
    return None


class Annotator:
    def __init__(self, chat: Chat, prompts: PromptSet | None = None, *, retries: int = 3,
                 backoff: float = 1.0, concurrency: int = 4, sleep: Callable[[float], None] = time.sleep):
        self.chat = chat
        self.prompts = prompts or PromptSet.load()
        self.retries = retries
        self.backoff = backoff
        self.concurrency = max(1, concurrency)
        self.sleep = sleep

    def _call(self, prompt: str, temperature: float) -> str:
        for attempt in range(self.retries + 1):
            try:
                return self.chat(prompt, temperature)
            except (ChatError, requests.RequestException, OSError) as exc:
                if attempt == self.retries:
                    raise ChatError(f"giving up after {attempt + 1} attempts: {exc}") from exc
                delay = self.backoff * 2 ** attempt
                logger.warning("chat call failed (%s); retrying in %.1fs", exc, delay)
                self.sleep(delay)
        raise AssertionError("unreachable")

    def propose(self, sentence: str) -> list[tuple[str, str, str]]:
        """Union of triplets over the sampled extraction trials, in first-seen order."""
        p = self.prompts
        seen, out = set(), []
        for _ in range(p.trials):
            reply = self._call(p.extraction_template.format(sentence=sentence), p.extraction_temperature)
            for trip in parse_triplets(reply, p):
                key = tuple(_norm(x) for x in trip)
                if key not in seen:
                    seen.add(key)
                    out.append(trip)
        return out

    def verify(self, sentence: str, triplet: tuple[str, str, str]) -> bool | None:
        p = self.prompts
        person, when, where = triplet
        prompt = p.verification_template.format(sentence=sentence, person=person, time=when, location=where)
        return parse_verdict(self._call(prompt, p.verification_temperature), p)

    def annotate_sentence(self, row: dict) -> list[Example]:
        """Verified positives for one sentence row (ingest output schema).

        Without a ``paragraph`` field the sentence stands in for its paragraph.
        """
        text = row["text"]
        paragraph = row.get("paragraph") or text
        out = []
        for trip in self.propose(text):
            verdict = self.verify(text, trip)
            if verdict is None:
                logger.warning("unparseable verification for %s; discarded", trip)
                continue
            if not verdict:
                continue
            record = {
                "page_id": row.get("page_id", ""),
                "paragraph_index": row.get("paragraph_index", 0),
                "sentence_index": row.get("sentence_index", 0) if row.get("paragraph") else 0,
                "person": trip[0],
                "time": trip[1],
                "location": trip[2],
                "paragraph": paragraph,
                "label": 1,
                "source": "llm",
            }
            try:
                out.append(example_from_record(record))
            except ValueError as exc:
                logger.warning("triplet %s not locatable in sentence: %s", trip, exc)
        return out

    def annotate(self, rows: Iterable[dict], errors: list | None = None) -> list[Example]:
        rows = list(rows)

        def job(row):
            try:
                return self.annotate_sentence(row), None
            except ChatError as exc:
                return [], exc

        out: list[Example] = []
        with ThreadPoolExecutor(max_workers=self.concurrency) as pool:
            for row, (examples, exc) in zip(rows, pool.map(job, rows)):
                if exc is not None:
                    key = (row.get("page_id"), row.get("paragraph_index"), row.get("sentence_index"))
                    logger.error("annotation failed for sentence %s: %s", key, exc)
                    if errors is not None:
                        errors.append((key, str(exc)))
                out.extend(examples)
        return out


def annotate(sentences: Sequence[dict], chat: Chat, prompts: PromptSet | None = None, **kwargs) -> list[Example]:
    return Annotator(chat, prompts, **kwargs).annotate(sentences)
