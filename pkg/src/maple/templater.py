"""Fixed-grammar rendering and parsing of prompt sentences.

The pipeline talks to its predictors in natural language: structured context
is rendered into sentences with a fixed surface form, and generated sentences
are parsed back into structure. Rendering and parsing share one grammar, so
``parse(render(x)) == x`` for every renderable ``x``. The exact surface forms
and their reserved substrings are documented in docs/grammar.md.

All functions here are pure and stateless; they never touch a vocabulary.
App ids are rendered as decimal integers, categories and place labels as the
strings the caller supplies.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import TYPE_CHECKING, Mapping, Sequence

if TYPE_CHECKING:  # pragma: no cover - import cycle guard, typing only
    from maple.pipeline import AblationFlags
    from maple.typeprompt import TypeDistribution

__all__ = [
    "CANONICAL",
    "ContextBundle",
    "ParseFailure",
    "ParsedContext",
    "PromptSentence",
    "TemplateSet",
    "WEEKDAY_NAMES",
    "parse_context",
    "parse_prediction",
    "parse_type_result",
    "render_context",
    "render_history",
    "render_installed",
    "render_poi",
    "render_prediction_time",
    "render_target",
    "render_type_result",
]

WEEKDAY_NAMES = (
    "Monday",
    "Tuesday",
    "Wednesday",
    "Thursday",
    "Friday",
    "Saturday",
    "Sunday",
)

MAX_HISTORY = 15
MAX_POI_LABELS = 3

# Substrings that act as delimiters somewhere in the grammar. Category and
# place names containing any of these would make sentences ambiguous, so
# rendering rejects them outright (see docs/grammar.md).
RESERVED_SUBSTRINGS = (", ", " and ", " or ", " apps : ", ".", "(", ")", "%", "\t", "\n")

SENTENCE_KINDS = frozenset(
    {
        "history_apps",
        "installed_apps",
        "history_categories",
        "prediction_time",
        "poi",
        "stage1_result",
        "stage2_target",
        "stage1_input",
        "stage2_input",
    }
)


class ParseFailure(ValueError):
    """Text does not match the grammar it was parsed against.

    Signals "discard this candidate"; callers catch it and continue.
    """


@dataclass(frozen=True)
class PromptSentence:
    """A rendered sentence plus the grammar tag that produced it."""

    text: str
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in SENTENCE_KINDS:
            raise ValueError(f"unknown sentence kind: {self.kind!r}")


@dataclass(frozen=True)
class ContextBundle:
    """Structured context for one prediction point.

    ``app_history`` and ``category_history`` are index-aligned, oldest first,
    at most 15 entries each. ``prediction_time`` is ``(weekday, hour)`` with
    Monday = 0 and a 0-23 hour. ``installed_apps`` maps a category name to
    the app ids installed in it.
    """

    app_history: tuple[int, ...]
    category_history: tuple[str, ...]
    prediction_time: tuple[int, int]
    poi_labels: tuple[str, ...] = ()
    installed_apps: Mapping[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "app_history", tuple(self.app_history))
        object.__setattr__(self, "category_history", tuple(self.category_history))
        object.__setattr__(self, "poi_labels", tuple(self.poi_labels))
        object.__setattr__(
            self,
            "installed_apps",
            {name: tuple(ids) for name, ids in self.installed_apps.items()},
        )
        if len(self.app_history) != len(self.category_history):
            raise ValueError("app and category histories must be index-aligned")
        if len(self.app_history) > MAX_HISTORY:
            raise ValueError(f"history longer than {MAX_HISTORY}")
        weekday, hour = self.prediction_time
        if not (0 <= weekday <= 6 and 0 <= hour <= 23):
            raise ValueError(f"bad prediction time {self.prediction_time!r}")


@dataclass(frozen=True)
class TemplateSet:
    """The literal fragments of one phrasing of the grammar.

    ``CANONICAL`` is the wired-in set; alternates with the same slot
    structure can be swapped in via the ``template`` argument of every
    render/parse function (docs/grammar.md lists the documented alternates).
    """

    history_prefix: str = "The apps "
    history_suffix: str = " are used prior to the prediction."
    installed_infix: str = " apps : "
    time_prefix: str = "On "
    poi_prefix: str = "The user is close to "
    poi_suffix: str = "."
    type_prefix: str = "Based on the global information, the next app will be a "
    type_app_word: str = " app "
    target_prefix: str = "This user will use App "
    target_suffix: str = "."


CANONICAL = TemplateSet()

_INT = r"(?:0|[1-9]\d*)"


@lru_cache(maxsize=8)
def _patterns(template: TemplateSet) -> dict[str, re.Pattern[str]]:
    esc = re.escape
    return {
        "history": re.compile(
            esc(template.history_prefix) + r"(?P<body>.+?)" + esc(template.history_suffix)
        ),
        "installed": re.compile(
            r"(?P<name>\S(?:.*?\S)?)"
            + esc(template.installed_infix)
            + rf"(?P<ids>{_INT}(?:,{_INT})*)"
        ),
        "time": re.compile(
            esc(template.time_prefix)
            + r"(?P<day>"
            + "|".join(WEEKDAY_NAMES)
            + r") (?P<hh>\d{2}) (?P<half>AM|PM)"
        ),
        "poi": re.compile(
            esc(template.poi_prefix) + r"(?P<body>.+?)" + esc(template.poi_suffix)
        ),
        "type": re.compile(esc(template.type_prefix) + r"(?P<body>.+)"),
        "type_entry": re.compile(
            r"(?P<name>.+)" + esc(template.type_app_word) + r"\((?P<pct>[1-9]\d*)%\)\Z"
        ),
        "target": re.compile(
            esc(template.target_prefix)
            + rf"(?P<app>{_INT})"
            + esc(template.target_suffix)
            + r"?\Z"
        ),
    }


def _check_name(name: str, what: str) -> None:
    if not name or name != name.strip():
        raise ValueError(f"{what} must be non-empty without surrounding spaces: {name!r}")
    for sub in RESERVED_SUBSTRINGS:
        if sub in name:
            raise ValueError(f"{what} {name!r} contains reserved substring {sub!r}")


def _oxford_list(items: Sequence[str]) -> str:
    # "1", "1 and 4", "1, 4, and 9" -- serial comma before the final "and".
    if len(items) == 1:
        return items[0]
    if len(items) == 2:
        return f"{items[0]} and {items[1]}"
    return ", ".join(items[:-1]) + f", and {items[-1]}"


def _plain_list(items: Sequence[str]) -> str:
    # "a", "a and b", "a, b and c" -- no serial comma.
    if len(items) == 1:
        return items[0]
    if len(items) == 2:
        return f"{items[0]} and {items[1]}"
    return ", ".join(items[:-1]) + f" and {items[-1]}"


def _check_items(items: tuple[str, ...], body: str) -> tuple[str, ...]:
    for item in items:
        if not item or item != item.strip() or ", " in item or " and " in item:
            raise ParseFailure(f"malformed list body: {body!r}")
    return items


def _split_oxford(body: str) -> tuple[str, ...]:
    if ", and " in body:
        head, tail = body.rsplit(", and ", 1)
        items = tuple(head.split(", ")) + (tail,)
        if len(items) < 3:
            raise ParseFailure(f"malformed list body: {body!r}")
    elif " and " in body:
        parts = body.split(" and ")
        if len(parts) != 2:
            raise ParseFailure(f"malformed list body: {body!r}")
        items = tuple(parts)
    else:
        items = (body,)
    return _check_items(items, body)


def _split_plain(body: str) -> tuple[str, ...]:
    if ", " in body:
        parts = body.split(", ")
        if " and " not in parts[-1]:
            raise ParseFailure(f"malformed list body: {body!r}")
        left, right = parts[-1].rsplit(" and ", 1)
        items = tuple(parts[:-1]) + (left, right)
        if len(items) < 3:
            raise ParseFailure(f"malformed list body: {body!r}")
    elif " and " in body:
        parts = body.split(" and ")
        if len(parts) != 2:
            raise ParseFailure(f"malformed list body: {body!r}")
        items = tuple(parts)
    else:
        items = (body,)
    return _check_items(items, body)


def render_history(
    items: Sequence[str], *, categories: bool = False, template: TemplateSet = CANONICAL
) -> PromptSentence:
    """Render the usage-history sentence, e.g. the 1-4-9 example sentence."""
    if not items:
        raise ValueError("history must be non-empty")
    if len(items) > MAX_HISTORY:
        raise ValueError(f"history longer than {MAX_HISTORY}")
    for item in items:
        _check_name(item, "history item")
    text = template.history_prefix + _oxford_list(list(items)) + template.history_suffix
    return PromptSentence(text, "history_categories" if categories else "history_apps")


def render_installed(
    installed: Mapping[str, Sequence[int]], *, template: TemplateSet = CANONICAL
) -> PromptSentence:
    """Render the installed-apps block, one ``<category> apps : ids`` group per
    category, categories sorted by name."""
    if not installed:
        raise ValueError("installed-apps map must be non-empty")
    groups = []
    for name in sorted(installed):
        _check_name(name, "category name")
        ids = list(installed[name])
        if not ids:
            raise ValueError(f"category {name!r} has no installed apps")
        if any(not isinstance(a, int) or isinstance(a, bool) or a < 0 for a in ids):
            raise ValueError(f"app ids for {name!r} must be non-negative integers")
        groups.append(name + template.installed_infix + ",".join(str(a) for a in ids))
    return PromptSentence(" ".join(groups), "installed_apps")


def render_prediction_time(
    weekday: int, hour: int, *, template: TemplateSet = CANONICAL
) -> PromptSentence:
    """Render the prediction-time fragment on a zero-padded 12-hour clock."""
    if not (0 <= weekday <= 6 and 0 <= hour <= 23):
        raise ValueError(f"bad prediction time ({weekday}, {hour})")
    half = "AM" if hour < 12 else "PM"
    clock = hour % 12
    if clock == 0:
        clock = 12
    text = f"{template.time_prefix}{WEEKDAY_NAMES[weekday]} {clock:02d} {half}"
    return PromptSentence(text, "prediction_time")


def render_poi(labels: Sequence[str], *, template: TemplateSet = CANONICAL) -> PromptSentence:
    """Render the place-context sentence from up to three labels."""
    if not labels:
        raise ValueError("poi labels must be non-empty")
    if len(labels) > MAX_POI_LABELS:
        raise ValueError(f"at most {MAX_POI_LABELS} poi labels are renderable")
    for label in labels:
        _check_name(label, "poi label")
    text = template.poi_prefix + _plain_list(list(labels)) + template.poi_suffix
    return PromptSentence(text, "poi")


def render_type_result(
    dist: "TypeDistribution", *, template: TemplateSet = CANONICAL
) -> PromptSentence:
    """Render a ranked category distribution as the first-stage result sentence.

    Three entries produce the full ``a X app (p%), Y app (q%) or Z app (r%)``
    form; shorter distributions drop the unused slots grammatically. Percents
    must be positive integers no larger than 100.
    """
    if not dist.entries:
        raise ValueError("cannot render an empty distribution")
    chunks = []
    for entry in dist.entries:
        _check_name(entry.category, "category name")
        if not isinstance(entry.percent, int) or not (1 <= entry.percent <= 100):
            raise ValueError(f"percent out of range: {entry.percent!r}")
        chunks.append(f"{entry.category}{template.type_app_word}({entry.percent}%)")
    if len(chunks) == 1:
        body = chunks[0]
    else:
        body = ", ".join(chunks[:-1]) + f" or {chunks[-1]}"
    return PromptSentence(template.type_prefix + body, "stage1_result")


def render_target(app_id: int, *, template: TemplateSet = CANONICAL) -> PromptSentence:
    """Render the second-stage target sentence for one app id."""
    if not isinstance(app_id, int) or isinstance(app_id, bool) or app_id < 0:
        raise ValueError(f"app id must be a non-negative integer: {app_id!r}")
    return PromptSentence(
        f"{template.target_prefix}{app_id}{template.target_suffix}", "stage2_target"
    )


def render_context(
    bundle: ContextBundle,
    stage: int,
    flags: "AblationFlags | None" = None,
    *,
    template: TemplateSet = CANONICAL,
) -> PromptSentence:
    """Concatenate the enabled context sentences for one stage.

    Component order is fixed: history (categories for stage 1, apps for
    stage 2), installed apps (stage 2 only), prediction time, then place
    context. The first-stage result sentence is appended by the pipeline,
    not here. Disabled or empty components are omitted.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage!r}")
    use_history = flags.use_app_history if flags is not None else True
    use_installed = flags.use_installed_apps if flags is not None else True
    use_optional = flags.use_optional_context if flags is not None else True

    parts: list[str] = []
    if use_history:
        if stage == 2 and bundle.app_history:
            items = [str(a) for a in bundle.app_history]
            parts.append(render_history(items, template=template).text)
        elif stage == 1 and bundle.category_history:
            parts.append(
                render_history(
                    bundle.category_history, categories=True, template=template
                ).text
            )
    if stage == 2 and use_installed and bundle.installed_apps:
        parts.append(render_installed(bundle.installed_apps, template=template).text)
    parts.append(render_prediction_time(*bundle.prediction_time, template=template).text)
    if use_optional and bundle.poi_labels:
        parts.append(render_poi(bundle.poi_labels, template=template).text)
    if not parts:
        raise ValueError("empty prompt")
    return PromptSentence(" ".join(parts), f"stage{stage}_input")


@dataclass(frozen=True)
class ParsedContext:
    """Structured view of a context prompt, one field per grammar component.

    Components absent from the prompt parse as ``None``. History items stay
    strings; whether they are app ids or category names depends on the stage
    the prompt was rendered for.
    """

    history: tuple[str, ...] | None = None
    installed: tuple[tuple[str, tuple[int, ...]], ...] | None = None
    time: tuple[int, int] | None = None
    poi: tuple[str, ...] | None = None
    type_result: "TypeDistribution | None" = None


def _try_component(
    pattern: re.Pattern[str], text: str, pos: int
) -> tuple[re.Match[str] | None, int]:
    start = pos
    if pos > 0:
        if pos >= len(text) or text[pos] != " ":
            return None, pos
        start = pos + 1
    match = pattern.match(text, start)
    if match is None:
        return None, pos
    return match, match.end()


def _parse_time_match(match: re.Match[str]) -> tuple[int, int]:
    weekday = WEEKDAY_NAMES.index(match["day"])
    clock = int(match["hh"])
    if not (1 <= clock <= 12):
        raise ParseFailure(f"clock hour out of range: {match['hh']}")
    hour = clock % 12
    if match["half"] == "PM":
        hour += 12
    return weekday, hour


def parse_context(text: str, *, template: TemplateSet = CANONICAL) -> ParsedContext:
    """Parse a concatenated context prompt back into its components.

    Accepts any subset of components in the canonical order, separated by
    single spaces, with nothing left over. Raises :class:`ParseFailure`
    otherwise.
    """
    pats = _patterns(template)
    pos = 0
    history: tuple[str, ...] | None = None
    installed: tuple[tuple[str, tuple[int, ...]], ...] | None = None
    time: tuple[int, int] | None = None
    poi: tuple[str, ...] | None = None
    type_result = None

    match, pos = _try_component(pats["history"], text, pos)
    if match:
        history = _split_oxford(match["body"])

    blocks: list[tuple[str, tuple[int, ...]]] = []
    while True:
        match, pos = _try_component(pats["installed"], text, pos)
        if not match:
            break
        blocks.append((match["name"], tuple(int(x) for x in match["ids"].split(","))))
    if blocks:
        installed = tuple(blocks)

    match, pos = _try_component(pats["time"], text, pos)
    if match:
        time = _parse_time_match(match)

    match, pos = _try_component(pats["poi"], text, pos)
    if match:
        poi = _split_plain(match["body"])

    match, pos = _try_component(pats["type"], text, pos)
    if match:
        type_result = _parse_type_body(match["body"], template)

    if pos != len(text):
        raise ParseFailure(f"unparseable context prompt at offset {pos}: {text!r}")
    if history is None and installed is None and time is None and poi is None and type_result is None:
        raise ParseFailure(f"no grammar component found: {text!r}")
    return ParsedContext(history, installed, time, poi, type_result)


def _parse_type_body(body: str, template: TemplateSet) -> "TypeDistribution":
    from maple.typeprompt import TypeDistribution, TypeEntry

    if " or " in body:
        head, last = body.rsplit(" or ", 1)
        chunks = head.split(", ") + [last]
    else:
        chunks = [body]
    entry_pat = _patterns(template)["type_entry"]
    entries = []
    for chunk in chunks:
        match = entry_pat.match(chunk)
        if match is None:
            raise ParseFailure(f"malformed distribution entry: {chunk!r}")
        pct = int(match["pct"])
        if pct > 100:
            raise ParseFailure(f"percent out of range: {chunk!r}")
        entries.append(TypeEntry(match["name"], pct / 100.0, pct))
    return TypeDistribution(key=(), entries=tuple(entries), support_count=0)


def parse_type_result(text: str, *, template: TemplateSet = CANONICAL) -> "TypeDistribution":
    """Parse a first-stage result sentence; exact inverse of
    :func:`render_type_result`."""
    match = _patterns(template)["type"].fullmatch(text)
    if match is None:
        raise ParseFailure(f"not a first-stage result sentence: {text!r}")
    return _parse_type_body(match["body"], template)


def parse_prediction(text: str, *, template: TemplateSet = CANONICAL) -> int:
    """Extract the app id from a second-stage target sentence.

    Tolerates surrounding whitespace and a missing final period; anything
    else raises :class:`ParseFailure`.
    """
    match = _patterns(template)["target"].fullmatch(text.strip())
    if match is None:
        raise ParseFailure(f"not a target sentence: {text!r}")
    return int(match["app"])
