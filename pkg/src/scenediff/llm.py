"""Natural-language query -> GuideLang program through a chat-completion endpoint.

The prompt has three system messages (loss contract plus helper API, and two
paired examples) followed by one user message.  Offline mode reads canned
responses from a content-addressed fixture store instead of the network.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import urlparse

from .guidelang import GuideLangError, parse, typecheck_shapes
from .guidelang.syntax import __doc__ as _SYNTAX_DOC

API_KEY_ENV = "CTGPP_LLM_API_KEY"
FIXTURE_DIR = Path(__file__).parent / "fixtures"
LLM_FIXTURE_DIR = FIXTURE_DIR / "llm"

_PREFIX = re.compile(r"^\s*generate a loss (?:class|program) such that,?\s*", re.IGNORECASE)


class LlmError(Exception):
    pass


class LlmConfigError(LlmError):
    pass


class LlmTransportError(LlmError):
    pass


class MissingFixtureError(LlmError):
    pass


def normalize_query(query: str) -> str:
    """Strip the boilerplate lead-in and trailing period so short and long
    phrasings of the same request share a fixture."""
    q = " ".join(query.split())
    q = _PREFIX.sub("", q).rstrip(".").strip()
    if not q:
        raise ValueError("query must be nonempty")
    return q


def query_hash(query: str) -> str:
    return hashlib.sha256(normalize_query(query).encode()).hexdigest()


# ---------------------------------------------------------------- prompt

def _grammar_excerpt() -> str:
    doc = _SYNTAX_DOC or ""
    start = doc.find("program  =")
    end = doc.find("Comments start")
    return doc[start:end].rstrip() if start >= 0 else ""


LOSS_CONTRACT = """Write the loss as a GuideLang program. A program looks like
`loss NAME(param = value, ...) { let a = expr; ... return expr; }` and may only call the builtins listed below.
x is the current trajectory with shape (B, N, T, 6) where B is the number of vehicles (vehicle 0 to B-1), N is the number of samples for each vehicle, T is the number of timesteps (each represents 0.1s), and 6 represents (x, y, vel, yaw, acc, yawvel) in the agent coordinate of each vehicle. The scene is implicit and never passed. The constants pi, B, N and T are available. The program must return a loss for every sample of every vehicle with shape (B, N) or a loss for every sample with shape (N).
Helper functions:
1. transform_coord_agents_to_world(pos, yaw). pos is the position trajectory in agent coordinate with shape (B, N, T, 2); yaw has shape (B, N, T, 1). Returns position and yaw in the world coordinate, shapes (B, N, T, 2) and (B, N, T, 1). Bind both results: `let p, h = ...;`.
2. transform_coord_world_to_agent_i(pos_world, yaw_world, i). Transforms world position and yaw into the coordinate of agent i. Returns (B, N, T, 2) and (B, N, T, 1).
3. select_agent_ind(v, i). v has shape (B, ...). Returns the slice of v with index i, shape (...). With a list of indices it returns the stacked slices, shape (len, ...).
4. get_current_lane_projection(pos, yaw). pos and yaw are in agent coordinate with shapes (B, N, T, 2) and (B, N, T, 1). Returns the projection of each vehicle trajectory on its current lane in agent coordinate, shape (B, N, T, 3) where 3 is (x, y, yaw).
5. get_left_lane_projection(pos, yaw). Like get_current_lane_projection but for the left lane. If there is no left lane the original trajectory is returned.
6. get_right_lane_projection(pos, yaw). Like get_current_lane_projection but for the right lane. If there is no right lane the original trajectory is returned.
Other builtins: pos(x), vel(x), yaw(x), acc(x), yawvel(x) select channels and keep the last dim; mean, sum, min, max, norm, squeeze and softmin take (value, dim) where dim is an integer or a list; abs, sqrt, sin, cos, exp, sigmoid; clip_min(v, lo), clip_max(v, hi), fmod, minimum, maximum; where(mask, a, b) with a mask built from comparisons (<, <=, >, >=) joined by &; decay_weights(rate, T) gives normalized weights rate**t.
Grammar:
"""

PAIRED_EXAMPLES = (
    ("vehicle 1 should always drive with acceleration below acc_limit", "acc_limit.gl"),
    ("vehicle 20 should always stay on the left side of vehicle 13", "stay_on_left.gl"),
)


def user_text(query: str) -> str:
    return f"Generate a loss program such that {normalize_query(query)}."


def _fence(program_text: str) -> str:
    return f"```guidelang\n{program_text.rstrip()}\n```"


@dataclass(frozen=True)
class PromptBundle:
    messages: tuple  # ({"role", "content"}, ...)

    def to_list(self) -> list:
        return [dict(m) for m in self.messages]


def build_prompt(query: str) -> PromptBundle:
    system = [LOSS_CONTRACT + _grammar_excerpt()]
    for q, fname in PAIRED_EXAMPLES:
        prog = (FIXTURE_DIR / fname).read_text()
        system.append(f"Query: {user_text(q)}\nResponse:\n{_fence(prog)}")
    msgs = [{"role": "system", "content": s} for s in system]
    msgs.append({"role": "user", "content": user_text(query)})
    return PromptBundle(tuple(msgs))


# ---------------------------------------------------------------- transport

@dataclass
class LlmConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4"
    temperature: float = 0.0
    timeout: float = 60.0
    attempts: int = 3
    backoff: float = 1.0
    offline: bool = False
    fixture_dir: Path = LLM_FIXTURE_DIR


@dataclass
class LlmResponse:
    raw: str
    extracted: str
    status: str = "unvalidated"  # parsed | parse-failed | shape-failed after validation
    fixture: dict | None = None


def extract_program_text(raw: str) -> str:
    """First fenced code block, else the whole body."""
    m = re.search(r"```[^\n]*\n(.*?)```", raw, re.DOTALL)
    return m.group(1) if m else raw


def _check_endpoint(url: str):
    u = urlparse(url)
    if u.scheme not in ("http", "https") or not u.netloc:
        raise LlmConfigError(f"malformed endpoint URL {url!r}")


def load_fixture(query: str, fixture_dir=LLM_FIXTURE_DIR) -> dict:
    path = Path(fixture_dir) / f"{query_hash(query)}.json"
    if not path.exists():
        raise MissingFixtureError(f"no offline fixture for query {normalize_query(query)!r} (expected {path.name})")
    return json.loads(path.read_text())


def request(bundle: PromptBundle, config: LlmConfig | None = None, query: str | None = None, client=None) -> LlmResponse:
    """Send the bundle and capture the reply verbatim.  Offline mode needs
    ``query`` to locate the fixture."""
    config = config or LlmConfig()
    if config.offline:
        q = query if query is not None else bundle.messages[-1]["content"]
        fx = load_fixture(q, config.fixture_dir)
        return LlmResponse(fx["response"], extract_program_text(fx["response"]), fixture=fx)
    _check_endpoint(config.endpoint)
    key = os.environ.get(API_KEY_ENV)
    if not key:
        raise LlmConfigError(f"online mode needs the {API_KEY_ENV} environment variable")
    import httpx

    body = {"model": config.model, "messages": bundle.to_list(), "temperature": config.temperature}
    headers = {"Authorization": f"Bearer {key}"}
    own = client is None
    client = client or httpx.Client(timeout=config.timeout)
    err = None
    try:
        for attempt in range(config.attempts):
            try:
                r = client.post(config.endpoint, json=body, headers=headers)
                r.raise_for_status()
                text = r.json()["choices"][0]["message"]["content"]
                return LlmResponse(text, extract_program_text(text))
            except httpx.HTTPStatusError as e:
                code = e.response.status_code
                if code < 500 and code != 429:
                    raise LlmTransportError(f"endpoint returned HTTP {code}") from None
                err = f"HTTP {code}"
            except httpx.TransportError as e:
                # class name only: messages may echo request details
                err = type(e).__name__
            except (KeyError, IndexError, ValueError) as e:
                raise LlmTransportError(f"unexpected response body: {type(e).__name__}") from None
            if attempt + 1 < config.attempts:
                time.sleep(config.backoff * 2**attempt)
    finally:
        if own:
            client.close()
    raise LlmTransportError(f"request failed after {config.attempts} attempts ({err})")


# ---------------------------------------------------------------- validation

@dataclass
class Diagnostic:
    stage: str  # extract | parse | shape
    message: str
    line: int | None = None
    col: int | None = None

    def __str__(self):
        where = f" at {self.line}:{self.col}" if self.line is not None else ""
        return f"[{self.stage}]{where} {self.message}"


@dataclass
class Validation:
    status: str
    program: object = None
    shape: tuple | None = None
    report: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "parsed"

    def repair_hint(self) -> str:
        """Text for a follow-up prompt asking the model to fix the program."""
        return "The program has errors:\n" + "\n".join(str(d) for d in self.diagnostics)


def needed_agents(program) -> int:
    n = 1
    for name, v in program.params:
        if not name.endswith(("_ind", "_inds")):
            continue
        vals = v if isinstance(v, tuple) else (v,)
        for i in vals:
            if isinstance(i, int):
                n = max(n, i + 1)
    return max(n, 2)


def extract_and_validate(response, B: int | None = None, T: int = 20) -> Validation:
    """Parse and shape-check the extracted program; never raises on bad input."""
    text = response.extracted if isinstance(response, LlmResponse) else extract_program_text(str(response))
    if not text.strip():
        return Validation("parse-failed", diagnostics=[Diagnostic("extract", "response contains no program text")])
    try:
        prog = parse(text)
    except GuideLangError as e:
        return Validation("parse-failed", diagnostics=[Diagnostic("parse", e.message, e.line, e.col)])
    try:
        shape, report = typecheck_shapes(prog, B or needed_agents(prog), T)
    except GuideLangError as e:
        return Validation("shape-failed", prog, diagnostics=[Diagnostic("shape", e.message, e.line, e.col)])
    return Validation("parsed", prog, shape, report)


def translate(query: str, config: LlmConfig | None = None, B: int | None = None, T: int = 20):
    """Full query -> (response, validation) path."""
    bundle = build_prompt(query)
    resp = request(bundle, config, query=query)
    val = extract_and_validate(resp, B, T)
    resp.status = val.status
    return resp, val


def make_fixture(query: str, program_text: str, annotation: str = "", native: str | None = None, expect: str = "success") -> dict:
    """Fixture record for the offline store; ``write_fixture`` persists it."""
    return {
        "query": normalize_query(query),
        "bundle": build_prompt(query).to_list(),
        "response": _fence(program_text),
        "expect": expect,
        "annotation": annotation,
        "native": native,
    }


def write_fixture(record: dict, fixture_dir=LLM_FIXTURE_DIR) -> Path:
    path = Path(fixture_dir) / f"{query_hash(record['query'])}.json"
    path.write_text(json.dumps(record, indent=2) + "\n")
    return path
