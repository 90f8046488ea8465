"""Four-question dialogue protocol against a chat-completions endpoint.

Each image is interrogated with four fixed questions (object, environment
or imagined environment, detailed prompt, one-sentence summary); replies
three and four become the detailed/simple prompt pair. Under the silent
outline policy a corrective re-ask fires once before validation fails.
"""

import base64
import io
import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import (ConfigurationError, EndpointError, LexiconViolationError,
                      ProtocolError)
from . import templates
from .templates import (DEFAULT_BANNED_LEXICON, MODES, OUTLINE_POLICIES,
                        question_text, system_messages)


@dataclass(frozen=True)
class VlmEndpoint:
    base_url: str
    model_name: str = "mock-vlm"
    temperature: float = 0.2
    timeout: float = 30.0
    max_retries: int = 2

    def __post_init__(self):
        if self.max_retries < 0:
            raise ConfigurationError(f"max_retries={self.max_retries} must be >= 0")
        if self.temperature < 0:
            raise ConfigurationError(f"temperature={self.temperature} must be >= 0")


@dataclass
class DialogueTurn:
    role: str  # "user" | "assistant"
    content: str
    image_b64: str | None = None


@dataclass
class DialogueTranscript:
    system_messages: list[str]
    turns: list[DialogueTurn]
    mode: str
    policy: str = "silent"
    source_image: str = ""
    vlm_id: str = ""
    corrections: int = 0

    def assistant_texts(self) -> list[str]:
        return [t.content for t in self.turns if t.role == "assistant"]


@dataclass
class PromptPair:
    t_detail: str
    t_simple: str
    source_image: str
    mode: str
    outline_policy: str
    vlm_id: str

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "PromptPair":
        return cls(**json.loads(line))


def write_prompt_pairs(pairs, path):
    with open(path, "w") as fh:
        for pair in pairs:
            fh.write(pair.to_json() + "\n")


def read_prompt_pairs(path) -> list[PromptPair]:
    with open(path) as fh:
        return [PromptPair.from_json(line) for line in fh if line.strip()]


# -- wire helpers --------------------------------------------------------------

def image_to_b64(image) -> str:
    """PNG-encode an image (array, path, or raw PNG bytes) as base64."""
    if isinstance(image, (str, Path)):
        data = Path(image).read_bytes()
    elif isinstance(image, bytes):
        data = image
    else:
        buf = io.BytesIO()
        Image.fromarray(np.asarray(image)).save(buf, format="PNG")
        data = buf.getvalue()
    return base64.b64encode(data).decode("ascii")


def _wire_messages(system_msgs, turns):
    messages = [{"role": "system", "content": [{"type": "text", "text": m}]}
                for m in system_msgs]
    for turn in turns:
        content = [{"type": "text", "text": turn.content}]
        if turn.image_b64 is not None:
            content.append({"type": "image_url", "image_url": {
                "url": f"data:image/png;base64,{turn.image_b64}"}})
        messages.append({"role": turn.role, "content": content})
    return messages


def _post_chat(endpoint: VlmEndpoint, messages, turn_index: int,
               session=None) -> str:
    import requests

    url = endpoint.base_url.rstrip("/") + "/v1/chat/completions"
    payload = {"model": endpoint.model_name, "messages": messages,
               "temperature": endpoint.temperature}
    post = (session or requests).post
    last_error = None
    for attempt in range(endpoint.max_retries + 1):
        try:
            resp = post(url, json=payload, timeout=endpoint.timeout)
            if resp.status_code >= 500:
                raise requests.RequestException(f"server error {resp.status_code}")
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (requests.RequestException, KeyError, ValueError) as exc:
            last_error = exc
            if attempt < endpoint.max_retries:
                time.sleep(0.05 * (attempt + 1))
    raise EndpointError(f"chat request failed after {endpoint.max_retries + 1} "
                        f"attempts: {last_error}", turn_index=turn_index)


def _ask(transcript: DialogueTranscript, endpoint: VlmEndpoint, text: str,
         image_b64: str | None = None, session=None) -> str:
    transcript.turns.append(DialogueTurn("user", text, image_b64))
    turn_index = sum(1 for t in transcript.turns if t.role == "user") - 1
    reply = _post_chat(endpoint,
                       _wire_messages(transcript.system_messages, transcript.turns),
                       turn_index, session)
    if not reply or not reply.strip():
        raise ProtocolError(f"assistant reply at turn {turn_index} is empty")
    transcript.turns.append(DialogueTurn("assistant", reply))
    return reply


# -- the protocol ---------------------------------------------------------------

def run_dialogue(image, mode: str, endpoint: VlmEndpoint,
                 policy: str = "silent", source_image: str = "",
                 session=None) -> DialogueTranscript:
    """Issue the four questions in order and collect the transcript.

    The image rides only on the first user turn. ``mode`` switches the
    second question between describing the real surroundings and imagining
    an ideal camouflaging scenery.
    """
    if mode not in MODES:
        raise ConfigurationError(f"mode={mode!r} not one of {MODES}")
    if policy not in OUTLINE_POLICIES:
        raise ConfigurationError(f"policy={policy!r} not one of {OUTLINE_POLICIES}")

    transcript = DialogueTranscript(
        system_messages=system_messages(policy), turns=[], mode=mode,
        policy=policy, source_image=str(source_image),
        vlm_id=endpoint.model_name)
    b64 = image_to_b64(image)
    for q in range(4):
        _ask(transcript, endpoint, question_text(q, mode),
             image_b64=b64 if q == 0 else None, session=session)
    return transcript


def scan_lexicon(text: str, banned=DEFAULT_BANNED_LEXICON) -> list[str]:
    """Banned words present in the text (whole-word, case-insensitive)."""
    found = []
    lowered = text.lower()
    for word in banned:
        if re.search(rf"\b{re.escape(word)}\b", lowered):
            found.append(word)
    return found


def _normalize(text: str) -> str:
    return " ".join(text.split())


def is_single_sentence(text: str) -> bool:
    stripped = text.strip()
    return stripped.endswith(".") and stripped.count(".") == 1


def extract_prompts(transcript: DialogueTranscript,
                    endpoint: VlmEndpoint | None = None,
                    banned=DEFAULT_BANNED_LEXICON,
                    session=None) -> PromptPair:
    """Pull the detailed/simple prompts from assistant turns 3 and 4.

    Violations (banned lexicon under the silent policy, or a multi-sentence
    summary) trigger one corrective re-ask when an endpoint is available,
    then fail. Corrected replies overwrite the original turns so the
    transcript keeps its four question/answer shape.
    """
    replies = transcript.assistant_texts()
    if len(replies) != 4 or sum(1 for t in transcript.turns if t.role == "user") != 4:
        raise ProtocolError(
            f"transcript has {len(replies)} assistant turns, expected 4")

    def current_pair() -> PromptPair:
        texts = transcript.assistant_texts()
        return PromptPair(t_detail=_normalize(texts[2]),
                          t_simple=_normalize(texts[3]),
                          source_image=transcript.source_image,
                          mode=transcript.mode,
                          outline_policy=transcript.policy,
                          vlm_id=transcript.vlm_id)

    def violations(pair: PromptPair):
        words = []
        if transcript.policy == "silent":
            words = sorted(set(scan_lexicon(pair.t_detail, banned)
                               + scan_lexicon(pair.t_simple, banned)))
        return words, not is_single_sentence(pair.t_simple)

    pair = current_pair()
    words, bad_sentence = violations(pair)
    if (words or bad_sentence) and endpoint is not None:
        _reask(transcript, endpoint, words, bad_sentence, banned, session)
        pair = current_pair()
        words, bad_sentence = violations(pair)

    if words:
        raise LexiconViolationError(
            f"banned words persisted after re-ask: {words}", offending_words=words)
    if bad_sentence:
        raise ProtocolError(
            f"summary is not a single sentence after re-ask: {pair.t_simple!r}")
    return pair


def _reask(transcript, endpoint, words, bad_sentence, banned, session):
    """One corrective round: redo Q3 on lexicon violations, then Q4."""
    transcript.corrections += 1
    word_list = ", ".join(words) if words else ", ".join(banned)
    assistant_idx = [i for i, t in enumerate(transcript.turns)
                     if t.role == "assistant"]
    if words:
        reply = _ask(transcript, endpoint,
                     templates.REASK_QUESTION_3.format(words=word_list),
                     session=session)
        del transcript.turns[-2:]
        transcript.turns[assistant_idx[2]].content = reply
    reply = _ask(transcript, endpoint,
                 templates.REASK_QUESTION_4.format(words=word_list),
                 session=session)
    del transcript.turns[-2:]
    transcript.turns[assistant_idx[3]].content = reply


# -- corpus helper --------------------------------------------------------------

def annotate_corpus(items, mode: str, endpoint: VlmEndpoint,
                    policy: str = "silent", max_in_flight: int = 4,
                    banned=DEFAULT_BANNED_LEXICON) -> list[PromptPair]:
    """Run dialogues for (image, source_path) pairs, a few in flight at a time."""

    def one(item):
        image, source = item
        transcript = run_dialogue(image, mode, endpoint, policy=policy,
                                  source_image=source)
        return extract_prompts(transcript, endpoint=endpoint, banned=banned)

    items = list(items)
    if max_in_flight <= 1:
        return [one(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(one, items))
