"""Pluggable external-model clients for the annotation pipeline.

Four roles: parser (image -> raw property list), grounder (image + phrase
-> scored boxes), verifier (image + region + checklist or expression ->
verdict), generator (object + task -> candidate expressions).

Wire contract for HTTP clients: POST JSON {"image_ref": ..., "payload":
{...}} to the role endpoint; the response body is role-specific (see each
client's docstring). Mock clients implement the same role interfaces from
an on-disk script file, including scripted transient failures.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import requests


class ClientError(Exception):
    """Transient client failure; the orchestrator retries these."""


class ClientSchemaError(Exception):
    """Malformed client payload; not retriable."""

    def __init__(self, field: str, message: str):
        super().__init__(f"bad client payload field {field!r}: {message}")
        self.field = field


@dataclass(frozen=True)
class Detection:
    box: list[float]
    score: float


class ParserClient:
    """image -> list of raw object property dicts
    {category, attributes, relations, description}."""

    def parse(self, image_ref: str) -> list[dict]:
        raise NotImplementedError


class GrounderClient:
    """image + phrase -> list of Detection, best first."""

    def ground(self, image_ref: str, phrase: str) -> list[Detection]:
        raise NotImplementedError


class VerifierClient:
    """image + region -> checklist verdict or expression-consistency bit."""

    def verify_checklist(self, image_ref: str, box: list[float], checklist: dict) -> dict:
        raise NotImplementedError

    def verify_expression(self, image_ref: str, box: list[float], expression: str) -> bool:
        raise NotImplementedError


class GeneratorClient:
    """object properties + task -> candidate expression texts."""

    def generate(self, image_ref: str, obj: dict, task: str, count: int) -> list[str]:
        raise NotImplementedError


@dataclass
class ClientSuite:
    parser: ParserClient
    grounder: GrounderClient
    verifier: VerifierClient
    generator: GeneratorClient


# ---------------------------------------------------------------------------
# HTTP clients

class _HttpBase:
    def __init__(self, url: str, timeout: float = 30.0, prompt: str | None = None):
        self.url = url
        self.timeout = timeout
        self.prompt = prompt  # opaque prompt asset forwarded verbatim

    def _post(self, image_ref: str, payload: dict) -> dict:
        if self.prompt is not None:
            payload = {**payload, "prompt": self.prompt}
        try:
            resp = requests.post(
                self.url,
                json={"image_ref": image_ref, "payload": payload},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            return resp.json()
        except (requests.RequestException, ValueError) as e:
            raise ClientError(f"{self.url}: {e}") from e


class HttpParserClient(_HttpBase, ParserClient):
    """Response: {"objects": [{category, attributes, relations, description}]}."""

    def parse(self, image_ref):
        data = self._post(image_ref, {})
        objects = data.get("objects")
        if not isinstance(objects, list):
            raise ClientSchemaError("objects", "expected a list")
        return objects


class HttpGrounderClient(_HttpBase, GrounderClient):
    """Response: {"detections": [{"box": [x1,y1,x2,y2], "score": s}]}."""

    def ground(self, image_ref, phrase):
        data = self._post(image_ref, {"phrase": phrase})
        return _parse_detections(data)


class HttpVerifierClient(_HttpBase, VerifierClient):
    """Response: {"verdict": {category, attributes, relations, description}}
    for checklists, {"consistent": bool} for expressions."""

    def verify_checklist(self, image_ref, box, checklist):
        data = self._post(image_ref, {"box": box, "checklist": checklist})
        verdict = data.get("verdict")
        if not isinstance(verdict, dict):
            raise ClientSchemaError("verdict", "expected an object")
        return verdict

    def verify_expression(self, image_ref, box, expression):
        data = self._post(image_ref, {"box": box, "expression": expression})
        if "consistent" not in data:
            raise ClientSchemaError("consistent", "missing")
        return bool(data["consistent"])


class HttpGeneratorClient(_HttpBase, GeneratorClient):
    """Response: {"expressions": [str, ...]}."""

    def generate(self, image_ref, obj, task, count):
        data = self._post(image_ref, {"object": obj, "task": task, "count": count})
        exprs = data.get("expressions")
        if not isinstance(exprs, list):
            raise ClientSchemaError("expressions", "expected a list")
        return [str(e) for e in exprs]


def _parse_detections(data: dict) -> list[Detection]:
    dets = data.get("detections")
    if not isinstance(dets, list):
        raise ClientSchemaError("detections", "expected a list")
    out = []
    for d in dets:
        try:
            out.append(Detection(box=[float(c) for c in d["box"]], score=float(d["score"])))
        except (KeyError, TypeError, ValueError) as e:
            raise ClientSchemaError("detections", str(e)) from e
    return out


# ---------------------------------------------------------------------------
# Scripted mocks

class _ScriptState:
    """Shared failure budget so scripted transient failures are consumed
    across retries."""

    def __init__(self, script: dict):
        self.script = script
        self.fail_budget = {
            k: int(v) for k, v in script.get("fail_times", {}).items()
        }

    def maybe_fail(self, key: str):
        left = self.fail_budget.get(key, 0)
        if left > 0:
            self.fail_budget[key] = left - 1
            raise ClientError(f"scripted failure for {key!r} ({left} left)")


class MockParserClient(ParserClient):
    def __init__(self, state: _ScriptState):
        self.state = state

    def parse(self, image_ref):
        self.state.maybe_fail(f"parser|{image_ref}")
        table = self.state.script.get("parser", {})
        if image_ref not in table:
            raise ClientSchemaError("objects", f"no script entry for {image_ref!r}")
        return table[image_ref]


class MockGrounderClient(GrounderClient):
    def __init__(self, state: _ScriptState):
        self.state = state

    def ground(self, image_ref, phrase):
        key = f"{image_ref}|{phrase}"
        self.state.maybe_fail(f"grounder|{key}")
        table = self.state.script.get("grounder", {})
        if key not in table:
            return []
        return _parse_detections({"detections": table[key]})


class MockVerifierClient(VerifierClient):
    def __init__(self, state: _ScriptState):
        self.state = state

    def verify_checklist(self, image_ref, box, checklist):
        key = f"{image_ref}|checklist|{checklist['description']}"
        self.state.maybe_fail(f"verifier|{key}")
        table = self.state.script.get("verifier", {})
        entry = table.get(key)
        if entry is None:
            # Unscripted objects pass; fixtures script the failures.
            return {"category": True, "attributes": True, "relations": True,
                    "description": True}
        return dict(entry)

    def verify_expression(self, image_ref, box, expression):
        key = f"{image_ref}|expression|{expression}"
        self.state.maybe_fail(f"verifier|{key}")
        table = self.state.script.get("verifier", {})
        entry = table.get(key)
        if entry is None:
            return True
        return bool(entry.get("consistent", False))


class MockGeneratorClient(GeneratorClient):
    def __init__(self, state: _ScriptState):
        self.state = state

    def generate(self, image_ref, obj, task, count):
        key = f"{image_ref}|{obj['description']}|{task}"
        self.state.maybe_fail(f"generator|{key}")
        table = self.state.script.get("generator", {})
        if key in table:
            return [str(e) for e in table[key]][:count]
        return [f"the {obj['description']}"]


def mock_suite_from_script(script: dict | str | Path) -> ClientSuite:
    """Build a full mock suite from one script dict or JSON file."""
    if not isinstance(script, dict):
        script = json.loads(Path(script).read_text())
    state = _ScriptState(script)
    return ClientSuite(
        parser=MockParserClient(state),
        grounder=MockGrounderClient(state),
        verifier=MockVerifierClient(state),
        generator=MockGeneratorClient(state),
    )


def suite_from_config(path: str | Path) -> ClientSuite:
    """Build a suite from a clients config file.

    {"type": "mock", "script": "..."} or
    {"type": "http", "parser_url": ..., "grounder_url": ...,
     "verifier_url": ..., "generator_url": ..., "prompts": {role: path}}
    """
    path = Path(path)
    cfg = json.loads(path.read_text())
    kind = cfg.get("type")
    if kind == "mock":
        script = path.parent / cfg["script"]
        return mock_suite_from_script(script)
    if kind == "http":
        prompts = {}
        for role, p in cfg.get("prompts", {}).items():
            prompts[role] = (path.parent / p).read_text()
        return ClientSuite(
            parser=HttpParserClient(cfg["parser_url"], prompt=prompts.get("parser")),
            grounder=HttpGrounderClient(cfg["grounder_url"]),
            verifier=HttpVerifierClient(cfg["verifier_url"], prompt=prompts.get("verifier")),
            generator=HttpGeneratorClient(cfg["generator_url"], prompt=prompts.get("generator")),
        )
    raise ValueError(f"unknown clients config type {kind!r} in {path}")
