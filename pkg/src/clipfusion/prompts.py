"""Text prompt construction for both backends.

Prompts are rendered from templates with ``[object]`` and ``[state]``
placeholders. The abnormal-state ensemble for the attention backend defaults
to crack / hole / residue / damage; contrastive-encoder prompts use a single
perfect/damaged pair. The character span of the substituted state word is
recorded so the attention backend can locate the state token(s).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import PromptFormatError

OBJECT_SLOT = "[object]"
STATE_SLOT = "[state]"

DEFAULT_STATES = ("crack", "hole", "residue", "damage")
CLIP_NORMAL_STATE = "perfect"
CLIP_ABNORMAL_STATE = "damaged"

DEFAULT_CLIP_TEMPLATE = "a good, cropped picture of the [state] [object] for classification"
DEFAULT_DIFFUSION_QUERY_TEMPLATE = (
    "a close-up cropped png photo of a [object] with [state] for anomaly segmentation"
)
DEFAULT_DIFFUSION_REFERENCE_TEMPLATE = "a photo of a perfect [object]"


def default_states() -> List[str]:
    """The built-in abnormal-state ensemble."""
    return list(DEFAULT_STATES)


@dataclass(frozen=True)
class RenderedPrompt:
    """A rendered prompt plus the character span of its state word."""

    text: str
    state: str
    state_span: Tuple[int, int]

    def __post_init__(self) -> None:
        a, b = self.state_span
        if self.text[a:b] != self.state:
            raise PromptFormatError(
                f"state span {self.state_span} does not cover {self.state!r}"
            )


@dataclass(frozen=True)
class PromptSpec:
    """Object word, state ensemble, and the templates that render prompts."""

    object_word: str
    states: Tuple[str, ...] = DEFAULT_STATES
    clip_template_normal: str = DEFAULT_CLIP_TEMPLATE
    clip_template_abnormal: str = DEFAULT_CLIP_TEMPLATE
    diffusion_query_template: str = DEFAULT_DIFFUSION_QUERY_TEMPLATE
    diffusion_reference_template: str = DEFAULT_DIFFUSION_REFERENCE_TEMPLATE

    def __post_init__(self) -> None:
        if not self.object_word or not self.object_word.strip():
            raise PromptFormatError("object word must be non-empty")
        object.__setattr__(self, "states", tuple(self.states))
        if len(self.states) == 0:
            raise PromptFormatError("state list must be non-empty")
        if len(set(self.states)) != len(self.states):
            raise PromptFormatError(f"duplicate states in {self.states}")
        if any(not s or not s.strip() for s in self.states):
            raise PromptFormatError("states must be non-empty strings")
        for name, template, needs_state in (
            ("clip_template_normal", self.clip_template_normal, True),
            ("clip_template_abnormal", self.clip_template_abnormal, True),
            ("diffusion_query_template", self.diffusion_query_template, True),
            ("diffusion_reference_template", self.diffusion_reference_template, False),
        ):
            if OBJECT_SLOT not in template:
                raise PromptFormatError(f"{name} is missing the {OBJECT_SLOT} placeholder")
            if needs_state and STATE_SLOT not in template:
                raise PromptFormatError(f"{name} is missing the {STATE_SLOT} placeholder")


def _render(template: str, object_word: str, state: Optional[str]) -> str:
    text = template.replace(OBJECT_SLOT, object_word)
    if state is not None:
        text = text.replace(STATE_SLOT, state)
    if OBJECT_SLOT in text or STATE_SLOT in text:
        raise PromptFormatError(f"unresolved placeholder in rendered prompt: {text!r}")
    return text


def _render_with_span(template: str, object_word: str, state: str) -> RenderedPrompt:
    # Substitute the object first so the recorded span is valid in the final text.
    with_object = template.replace(OBJECT_SLOT, object_word)
    idx = with_object.find(STATE_SLOT)
    if idx < 0:
        raise PromptFormatError(f"template has no {STATE_SLOT} placeholder: {template!r}")
    text = with_object.replace(STATE_SLOT, state)
    if OBJECT_SLOT in text or STATE_SLOT in text:
        raise PromptFormatError(f"unresolved placeholder in rendered prompt: {text!r}")
    return RenderedPrompt(text=text, state=state, state_span=(idx, idx + len(state)))


def render_clip_prompts(spec: PromptSpec) -> Tuple[str, str]:
    """(normal_prompt, abnormal_prompt) for the contrastive encoder."""
    normal = _render(spec.clip_template_normal, spec.object_word, CLIP_NORMAL_STATE)
    abnormal = _render(spec.clip_template_abnormal, spec.object_word, CLIP_ABNORMAL_STATE)
    return normal, abnormal


def render_diffusion_prompts(spec: PromptSpec) -> Tuple[List[RenderedPrompt], str]:
    """One query prompt per state, plus the normal reference prompt."""
    queries = [
        _render_with_span(spec.diffusion_query_template, spec.object_word, s)
        for s in spec.states
    ]
    reference = _render(spec.diffusion_reference_template, spec.object_word, None)
    return queries, reference


# ---------------------------------------------------------------------------
# Per-category overrides: {category: {"states": [...], "templates": {...}}}
# ---------------------------------------------------------------------------

_TEMPLATE_KEYS = {
    "clip_normal": "clip_template_normal",
    "clip_abnormal": "clip_template_abnormal",
    "diffusion_query": "diffusion_query_template",
    "diffusion_reference": "diffusion_reference_template",
}


def load_prompt_overrides(path: Path) -> Dict[str, dict]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise PromptFormatError("prompt override file must map category -> overrides")
    return data


def spec_for_category(
    category: str,
    states: Optional[Sequence[str]] = None,
    overrides: Optional[Dict[str, dict]] = None,
) -> PromptSpec:
    """Build a PromptSpec for a dataset category, applying any overrides.

    The object word is the category name with underscores as spaces. Explicit
    ``states`` win over per-category overrides, which win over the defaults.
    """
    object_word = category.replace("_", " ").strip()
    entry = (overrides or {}).get(category, {})
    kwargs: dict = {}
    chosen_states = states if states is not None else entry.get("states")
    if chosen_states is not None:
        kwargs["states"] = tuple(chosen_states)
    for key, value in entry.get("templates", {}).items():
        if key not in _TEMPLATE_KEYS:
            raise PromptFormatError(f"unknown template key {key!r} for category {category!r}")
        kwargs[_TEMPLATE_KEYS[key]] = value
    return PromptSpec(object_word=object_word, **kwargs)
