"""Grammar-error injection through a text-completion client.

The client is prompted to corrupt a clean sentence with plausible grammar
mistakes, describe each mistake, and then correct the corrupted sentence
back. A pair is kept only if the client's own correction reproduces the
original clean text exactly (roundtrip filtration); that self-consistency
check is what makes the synthesized pairs trustworthy at scale.

Responses are parsed from a fixed marker format:

    **Ungrammatical sentences**: <corrupted text>
    **Error 1: <error name>**: <explanation>
    ...
    **Corrected sentences**: <corrected text>

Two clients are provided: an HTTP client (POST {"prompt": ...} returning
{"text": ...}) and a deterministic rule-based mock that exercises the full
render/parse/filter path without any external service.
"""

from __future__ import annotations

import json
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .records import Document, ECExample, ErrorAnnotation
from .util import derive_seed, nfc

# the sentence slot is fenced so clients (and the mock) can recover it exactly
_SLOT_OPEN = "<<<"
_SLOT_CLOSE = ">>>"

# literal "**" inside user text would collide with the marker format
_ESCAPED_STARS = "*\\*"

ERROR_CATALOG = (
    "Subject-verb agreement error",
    "Verb tense error",
    "Pluralization error",
    "Missing word error",
    "Capitalization error",
    "Word order error",
    "Article error",
    "Preposition error",
    "Spelling error",
    "Run-on sentence error",
)

PROMPT_TEMPLATE = """\
You are an English teacher preparing error-correction practice material.
Here is a catalog of common grammatical mistakes your students make:

{catalog}

Given the following sentence(s):
{slot_open}
{text}
{slot_close}

Which of the cataloged mistakes would a student plausibly make when writing
this? Apply one or more of them to the original sentence(s) to produce the
ungrammatical sentence(s). Do not modify the original sentence(s) except
applying the grammatical errors.

Then describe every error you introduced, and finally correct the
ungrammatical sentence(s). Do not modify the sentence(s) except correcting
the grammatical errors.

Reply in exactly this format, with nothing before or after:
**Ungrammatical sentences**: <the ungrammatical sentence(s)>
**Error 1: <error name>**: <what is wrong and why>
**Error 2: <error name>**: <one such line per introduced error>
**Corrected sentences**: <the corrected sentence(s)>
"""


class ParseError(ValueError):
    """A required response section is missing or empty."""

    def __init__(self, section: str, detail: str = ""):
        self.section = section
        super().__init__(f"missing or invalid section {section!r}" + (f": {detail}" if detail else ""))


class InjectionError(RuntimeError):
    """The client failed to produce a usable completion within its budget."""


class SkipExample(Exception):
    """The input cannot be corrupted (e.g. too short to tokenize)."""


@dataclass(frozen=True)
class InjectionRequest:
    example_id: str
    clean_text: str
    prompt: str

    def __post_init__(self) -> None:
        escaped = _escape(nfc(self.clean_text))
        if self.prompt.count(escaped) != 1:
            raise ValueError(
                f"request {self.example_id!r}: prompt must contain the clean text exactly once"
            )


@dataclass(frozen=True)
class InjectionResponse:
    ungrammatical: str
    errors: tuple[ErrorAnnotation, ...]
    corrected: str
    raw: str


class InjectorClient(Protocol):
    def complete(self, prompt: str) -> str: ...


def _escape(text: str) -> str:
    return text.replace("**", _ESCAPED_STARS)


def _unescape(text: str) -> str:
    return text.replace(_ESCAPED_STARS, "**")


def render_prompt(clean_text: str) -> str:
    """Fill the injection prompt template with one clean example."""
    if not clean_text.strip():
        raise ValueError("render_prompt: empty text")
    catalog = "\n".join(f"{i + 1}. {name}" for i, name in enumerate(ERROR_CATALOG))
    return PROMPT_TEMPLATE.format(
        catalog=catalog,
        slot_open=_SLOT_OPEN,
        text=_escape(nfc(clean_text)),
        slot_close=_SLOT_CLOSE,
    )


def make_request(example_id: str, clean_text: str) -> InjectionRequest:
    return InjectionRequest(
        example_id=example_id, clean_text=clean_text, prompt=render_prompt(clean_text)
    )


def extract_slot(prompt: str) -> str:
    """Recover the clean text from a rendered prompt (used by the mock client)."""
    m = re.search(
        re.escape(_SLOT_OPEN) + r"\n(.*?)\n" + re.escape(_SLOT_CLOSE), prompt, re.DOTALL
    )
    if m is None:
        raise InjectionError("prompt does not carry a fenced sentence slot")
    return _unescape(m.group(1))


# ordered keyword table; first match wins
_CATEGORY_KEYWORDS = (
    ("agreement", "verb"),
    ("verb", "verb"),
    ("plur", "plural"),
    ("missing", "missing_word"),
    ("capital", "capitalization"),
    ("order", "word_order"),
    ("article", "article"),
    ("preposition", "preposition"),
    ("spell", "spelling"),
    ("typo", "spelling"),
)


def categorize_error_label(label: str) -> str:
    low = label.lower()
    for keyword, category in _CATEGORY_KEYWORDS:
        if keyword in low:
            return category
    return "other"


_MARKER_RE = re.compile(r"^\*\*(?P<label>[^*\n]+)\*\*\s*:\s*", re.MULTILINE)
_ERROR_LABEL_RE = re.compile(r"^error\s*\d+\s*:\s*(?P<name>.+)$", re.IGNORECASE)


def parse_response(raw: str) -> InjectionResponse:
    """Split a completion into its marker sections.

    Raises ParseError naming the missing section; a response listing zero
    errors is also rejected.
    """
    sections: list[tuple[str, str]] = []
    matches = list(_MARKER_RE.finditer(raw))
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(raw)
        sections.append((m.group("label").strip(), raw[m.end() : end].strip()))

    ungrammatical: str | None = None
    corrected: str | None = None
    errors: list[ErrorAnnotation] = []
    for label, content in sections:
        low = label.lower()
        if low.startswith("ungrammatical sentence"):
            ungrammatical = content
        elif low.startswith("corrected sentence"):
            corrected = content
        else:
            m = _ERROR_LABEL_RE.match(label)
            if m:
                name = m.group("name").strip()
                errors.append(
                    ErrorAnnotation(category=categorize_error_label(name), description=name)
                )
    if ungrammatical is None or not ungrammatical:
        raise ParseError("ungrammatical")
    if corrected is None or not corrected:
        raise ParseError("corrected")
    if not errors:
        raise ParseError("errors", "no error descriptions listed")
    return InjectionResponse(
        ungrammatical=nfc(_unescape(ungrammatical)),
        errors=tuple(errors),
        corrected=nfc(_unescape(corrected)),
        raw=raw,
    )


# -- deterministic mock client --


_AGREEMENT_PAIRS = {
    "is": "are", "are": "is",
    "has": "have", "have": "has",
    "was": "were", "were": "was",
    "does": "do", "do": "does",
}
_ARTICLES = {"a", "an", "the"}
_PLURAL_STOP = {
    "is", "are", "has", "have", "was", "were", "does", "do", "this", "that",
    "these", "those", "its", "his", "hers", "as", "us", "yes",
}


def _strip_punct(word: str) -> tuple[str, str]:
    core = word.rstrip(".,!?;:")
    return core, word[len(core):]


class MockInjector:
    """Seeded rule-based stand-in for the external model.

    Applies 1..3 corruptions (verb agreement swap, plural toggle, dropped
    article, lowercased sentence start) and emits a completion in the marker
    format, so the full parse/filter path is exercised. With probability
    failure_rate the corrected section is deliberately wrong, which the
    roundtrip filter must catch.
    """

    def __init__(
        self,
        failure_rate: float = 0.0,
        seed: int = 0,
        min_errors: int = 1,
        max_errors: int = 3,
        category_weights: dict[str, float] | None = None,
    ):
        if not 0.0 <= failure_rate <= 1.0:
            raise ValueError(f"failure_rate must be in [0, 1], got {failure_rate}")
        if not 1 <= min_errors <= max_errors:
            raise ValueError("need 1 <= min_errors <= max_errors")
        self.failure_rate = failure_rate
        self.seed = seed
        self.min_errors = min_errors
        self.max_errors = max_errors
        self.category_weights = dict(category_weights) if category_weights else None

    # each rule: name -> (applicable?, apply) over the token list
    def _rules(self, words: list[str]):
        def agreement_ok() -> bool:
            return any(_strip_punct(w)[0].lower() in _AGREEMENT_PAIRS for w in words)

        def agreement(ws: list[str]) -> tuple[list[str], str, str]:
            for i, w in enumerate(ws):
                core, punct = _strip_punct(w)
                if core.lower() in _AGREEMENT_PAIRS:
                    swapped = _AGREEMENT_PAIRS[core.lower()]
                    if core[0].isupper():
                        swapped = swapped.capitalize()
                    ws = ws[:i] + [swapped + punct] + ws[i + 1 :]
                    return ws, "Subject-verb agreement error", (
                        f'"{core}" was replaced with "{swapped}", breaking agreement'
                    )
            raise AssertionError("agreement rule applied without a verb")

        def plural_candidates() -> list[int]:
            out = []
            for i, w in enumerate(words):
                core, _ = _strip_punct(w)
                if len(core) >= 3 and core.isalpha() and core.lower() not in _PLURAL_STOP:
                    out.append(i)
            return out

        def plural(ws: list[str]) -> tuple[list[str], str, str]:
            idx = plural_candidates()[-1]
            core, punct = _strip_punct(ws[idx])
            toggled = core[:-1] if core.lower().endswith("s") else core + "s"
            ws = ws[:idx] + [toggled + punct] + ws[idx + 1 :]
            return ws, "Pluralization error", f'"{core}" was replaced with "{toggled}"'

        def article_ok() -> bool:
            return any(_strip_punct(w)[0].lower() in _ARTICLES and not _strip_punct(w)[1] for w in words)

        def article(ws: list[str]) -> tuple[list[str], str, str]:
            for i, w in enumerate(ws):
                core, punct = _strip_punct(w)
                if core.lower() in _ARTICLES and not punct:
                    removed = ws[i]
                    ws = ws[:i] + ws[i + 1 :]
                    return ws, "Missing word error", f'the article "{removed}" was dropped'
            raise AssertionError("article rule applied without an article")

        def capitalization_ok() -> bool:
            return bool(words) and words[0][:1].isupper()

        def capitalization(ws: list[str]) -> tuple[list[str], str, str]:
            ws = [ws[0][0].lower() + ws[0][1:]] + ws[1:]
            return ws, "Capitalization error", "the sentence start was lowercased"

        return [
            ("verb", agreement_ok(), agreement),
            ("plural", bool(plural_candidates()), plural),
            ("missing_word", article_ok(), article),
            ("capitalization", capitalization_ok(), capitalization),
        ]

    def inject(self, clean: str, seed: int | None = None) -> InjectionResponse:
        """Corrupt one clean example; raises SkipExample when untokenizable."""
        clean = nfc(clean)
        words = clean.split()
        if len(words) < 2:
            raise SkipExample(f"need at least 2 words, got {len(words)}")
        rng = np.random.default_rng(derive_seed(self.seed, clean) if seed is None else seed)

        rules = [(name, fn) for name, ok, fn in self._rules(words) if ok]
        if not rules:
            raise SkipExample("no corruption rule applies")
        n_errors = int(rng.integers(self.min_errors, self.max_errors + 1))
        n_errors = min(n_errors, len(rules))
        if self.category_weights is not None:
            probs = np.array([self.category_weights.get(name, 0.0) for name, _ in rules])
            if probs.sum() <= 0:
                raise SkipExample("no applicable rule has positive weight")
            probs = probs / probs.sum()
            n_errors = min(n_errors, int((probs > 0).sum()))
            picks = rng.choice(len(rules), size=n_errors, replace=False, p=probs)
        else:
            picks = rng.choice(len(rules), size=n_errors, replace=False)

        ws = list(words)
        annotations: list[tuple[str, str]] = []
        for idx in sorted(int(i) for i in picks):
            name, fn = rules[idx]
            ws, label, detail = fn(ws)
            annotations.append((label, detail))
        ungrammatical = " ".join(ws)

        corrected = clean
        if self.failure_rate > 0 and rng.random() < self.failure_rate:
            # deliberately bad self-correction, to be caught by filtration
            corrected = (
                clean[:-1] + " indeed." if clean.endswith(".") else clean + " indeed"
            )

        lines = [f"**Ungrammatical sentences**: {_escape(ungrammatical)}"]
        for i, (label, detail) in enumerate(annotations, start=1):
            lines.append(f"**Error {i}: {label}**: {detail}")
        lines.append(f"**Corrected sentences**: {_escape(corrected)}")
        raw = "\n".join(lines)
        return parse_response(raw)

    def complete(self, prompt: str) -> str:
        clean = extract_slot(prompt)
        return self.inject(clean).raw


class HttpInjector:
    """External completion endpoint: POST {"prompt": ...} -> {"text": ...}.

    Honors a per-request timeout and a bounded retry budget; when the budget
    is exhausted the request fails with InjectionError so callers can drop
    and count the example rather than silently skip it.
    """

    def __init__(
        self,
        endpoint: str,
        token: str = "",
        timeout: float = 30.0,
        max_retries: int = 2,
        retry_backoff: float = 0.2,
    ):
        self.endpoint = endpoint
        self.token = token
        self.timeout = timeout
        self.max_retries = max_retries
        self.retry_backoff = retry_backoff

    def complete(self, prompt: str) -> str:
        payload = json.dumps({"prompt": prompt}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                req = urllib.request.Request(self.endpoint, data=payload, headers=headers)
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    body = json.loads(resp.read().decode("utf-8"))
                return body["text"]
            except (urllib.error.URLError, TimeoutError, OSError, KeyError, ValueError) as e:
                last_error = e
                if attempt < self.max_retries:
                    time.sleep(self.retry_backoff * (attempt + 1))
        raise InjectionError(
            f"injection failed after {self.max_retries + 1} attempts: {last_error}"
        ) from last_error


@dataclass(frozen=True)
class InjectionRun:
    pairs: tuple[tuple[Document, InjectionResponse], ...]
    failed: int   # client errors after retry budget, or unparseable output
    skipped: int  # inputs no rule/client could corrupt


def inject_corpus(
    docs: Sequence[Document],
    client: InjectorClient,
    concurrency: int = 1,
) -> InjectionRun:
    """Render, complete, and parse every document; results follow input order."""

    def one(doc: Document) -> tuple[Document, InjectionResponse | None, str]:
        try:
            raw = client.complete(render_prompt(doc.text))
            return doc, parse_response(raw), ""
        except SkipExample:
            return doc, None, "skipped"
        except (InjectionError, ParseError):
            return doc, None, "failed"

    if concurrency > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            results = list(pool.map(one, docs))
    else:
        results = [one(doc) for doc in docs]

    pairs = []
    failed = skipped = 0
    for doc, resp, status in results:
        if resp is not None:
            pairs.append((doc, resp))
        elif status == "skipped":
            skipped += 1
        else:
            failed += 1
    return InjectionRun(pairs=tuple(pairs), failed=failed, skipped=skipped)


@dataclass(frozen=True)
class FilterResult:
    kept: tuple[ECExample, ...]
    dropped_count: int


def roundtrip_filter(
    pairs: Sequence[tuple[str | Document, InjectionResponse]],
    ids: Sequence[str] | None = None,
) -> FilterResult:
    """Keep a pair only when the client's own correction equals the clean text.

    Comparison is byte equality after NFC (records normalize at
    construction). Kept pairs become synthetic EC examples whose target is
    the original clean text.
    """
    kept: list[ECExample] = []
    dropped = 0
    for i, (clean, resp) in enumerate(pairs):
        if isinstance(clean, Document):
            clean_text, ex_id = clean.text, clean.id
        else:
            clean_text, ex_id = nfc(clean), f"ec-{i:06d}"
        if ids is not None:
            ex_id = ids[i]
        if resp.corrected == clean_text:
            kept.append(
                ECExample(
                    id=ex_id,
                    source=resp.ungrammatical,
                    target=clean_text,
                    provenance="synthetic",
                    error_annotations=resp.errors,
                )
            )
        else:
            dropped += 1
    return FilterResult(kept=tuple(kept), dropped_count=dropped)


@dataclass(frozen=True)
class ErrorStats:
    category_fractions: dict[str, float]
    errors_per_example: dict[int, float]


def error_stats(examples: Sequence[ECExample]) -> ErrorStats:
    """Fractions of annotation categories and of per-example error counts.

    Each histogram sums to 1 over the annotated examples.
    """
    annotated = [ex for ex in examples if ex.error_annotations]
    if not annotated:
        return ErrorStats(category_fractions={}, errors_per_example={})
    cat_counts: dict[str, int] = {}
    n_counts: dict[int, int] = {}
    total_annotations = 0
    for ex in annotated:
        n = len(ex.error_annotations)
        n_counts[n] = n_counts.get(n, 0) + 1
        total_annotations += n
        for a in ex.error_annotations:
            cat_counts[a.category] = cat_counts.get(a.category, 0) + 1
    return ErrorStats(
        category_fractions={c: k / total_annotations for c, k in sorted(cat_counts.items())},
        errors_per_example={n: k / len(annotated) for n, k in sorted(n_counts.items())},
    )
