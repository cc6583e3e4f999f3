"""Deterministic description corpus: rendering, validation, and JSONL serialization."""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .lexicon import (
    ATTRIBUTE_TYPES,
    CLOTHES_PREFIXES,
    POST_ATTRIBUTES,
    PRE_ATTRIBUTES,
    AttributeLexicon,
    build_lexicon,
    choose_article,
)

ATTRIBUTE_PROBABILITY = 0.5
MAX_REROLLS = 50
EXTERNAL_TEMPLATE_ID = -1


class Category(str, Enum):
    PEDESTRIAN = "Pedestrian"
    BACKGROUND = "Background"


class DuplicateExhaustionError(RuntimeError):
    """The grammar could not produce the requested number of distinct strings."""


@dataclass(frozen=True)
class Description:
    id: int
    text: str
    category: Category
    attributes: dict[str, str]
    template_id: int
    rng_seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "text": self.text,
                "category": self.category.value,
                "attributes": self.attributes,
                "template_id": self.template_id,
                "rng_seed": self.rng_seed,
            },
            ensure_ascii=False,
        )

    @staticmethod
    def from_json(line: str) -> "Description":
        obj = json.loads(line)
        return Description(
            id=obj["id"],
            text=obj["text"],
            category=Category(obj["category"]),
            attributes=dict(obj["attributes"]),
            template_id=obj["template_id"],
            rng_seed=obj["rng_seed"],
        )


@dataclass(frozen=True)
class GenerationConfig:
    n_ped: int = 5000
    n_bg: int = 5000
    seed: int = 0
    external_bg_file: str | None = None


@dataclass
class Corpus:
    descriptions: list[Description]
    config: GenerationConfig
    skipped_external: int = 0

    @property
    def counts(self) -> dict[Category, int]:
        out = {Category.PEDESTRIAN: 0, Category.BACKGROUND: 0}
        for d in self.descriptions:
            out[d.category] += 1
        return out

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for d in self.descriptions:
                fh.write(d.to_json())
                fh.write("\n")

    @staticmethod
    def load_jsonl(path: str | Path, config: GenerationConfig | None = None) -> "Corpus":
        descs = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    descs.append(Description.from_json(line))
        return Corpus(descs, config or GenerationConfig())


def derive_seed(master_seed: int, *parts: object) -> int:
    """Stable 64-bit stream seed from the master seed and identifying parts."""
    key = "|".join([str(master_seed), *map(str, parts)])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int) -> np.random.Generator:
    # Philox is counter-based and platform-stable.
    return np.random.Generator(np.random.Philox(key=seed))


def _pick(rng: np.random.Generator, items: list[str]) -> str:
    return items[int(rng.integers(len(items)))]


def _flip(rng: np.random.Generator) -> bool:
    return rng.random() < ATTRIBUTE_PROBABILITY


def _render_template(template: str, noun_phrase: str) -> str:
    if "{article}" in template:
        article = choose_article(noun_phrase.split()[0])
        return template.replace("{article}", article).replace("{class}", noun_phrase)
    return template.replace("{class}", noun_phrase)


def render_pedestrian(rng: np.random.Generator, lexicon: AttributeLexicon) -> tuple[str, dict[str, str], int]:
    """Render one pedestrian description; returns (text, attributes, template_id).

    Format: {template} {article} {age/body/expression} {class} {clothes/color/pose/direction/action}.
    Each attribute type is included independently with probability 0.5.
    """
    template_id = int(rng.integers(len(lexicon.templates)))
    template = lexicon.templates[template_id]
    cls = _pick(rng, lexicon.pedestrian_synonyms)

    attrs: dict[str, str] = {}
    for attr_type in ATTRIBUTE_TYPES:
        if _flip(rng):
            attrs[attr_type] = _pick(rng, lexicon.attributes[attr_type])

    pre = [attrs[t] for t in PRE_ATTRIBUTES if t in attrs]
    post: list[str] = []
    clothes = attrs.get("clothes")
    color = attrs.get("color")
    if clothes is not None:
        prefix = CLOTHES_PREFIXES[int(rng.integers(len(CLOTHES_PREFIXES)))]
        inner = f"{color} {clothes}" if color is not None else clothes
        post.append(f"{prefix} {choose_article(inner.split()[0])} {inner}")
    elif color is not None:
        post.append(f"in {choose_article(color)} {color}")
    for attr_type in ("pose", "direction", "action"):
        if attr_type in attrs:
            post.append(attrs[attr_type])

    noun_phrase = " ".join(pre + [cls] + post)
    return _render_template(template, noun_phrase), attrs, template_id


def render_background(rng: np.random.Generator, lexicon: AttributeLexicon) -> tuple[str, dict[str, str], int]:
    """Render one background description: uncurated templates, color prefix only."""
    template_id = int(rng.integers(len(lexicon.background_templates)))
    template = lexicon.background_templates[template_id]
    cls = _pick(rng, lexicon.background_classes)

    attrs: dict[str, str] = {}
    if _flip(rng):
        attrs["color"] = _pick(rng, lexicon.attributes["color"])

    noun_phrase = f"{attrs['color']} {cls}" if "color" in attrs else cls
    return _render_template(template, noun_phrase), attrs, template_id


def contains_pedestrian_word(text: str, lexicon: AttributeLexicon) -> bool:
    words = set(re.findall(r"[a-z]+", text.lower()))
    return any(syn in words for syn in lexicon.pedestrian_synonyms)


def generate_corpus(config: GenerationConfig, lexicon: AttributeLexicon | None = None) -> Corpus:
    """Generate n_ped + n_bg distinct descriptions, optionally appending external
    background lines (pedestrian-related lines filtered out)."""
    if config.n_ped < 1 or config.n_bg < 1:
        raise ValueError(f"n_ped and n_bg must be >= 1, got {config.n_ped}, {config.n_bg}")
    lexicon = lexicon or build_lexicon()

    seen: set[str] = set()
    descriptions: list[Description] = []

    def emit(idx: int, category: Category) -> None:
        render = render_pedestrian if category is Category.PEDESTRIAN else render_background
        for retry in range(MAX_REROLLS + 1):
            seed = derive_seed(config.seed, category.value, idx, retry)
            text, attrs, template_id = render(make_rng(seed), lexicon)
            if text.lower() not in seen:
                seen.add(text.lower())
                descriptions.append(Description(idx, text, category, attrs, template_id, seed))
                return
        raise DuplicateExhaustionError(
            f"could not render a distinct {category.value} description for id {idx} "
            f"after {MAX_REROLLS} re-rolls"
        )

    for i in range(config.n_ped):
        emit(i, Category.PEDESTRIAN)
    for i in range(config.n_bg):
        emit(config.n_ped + i, Category.BACKGROUND)

    skipped = 0
    if config.external_bg_file is not None:
        next_id = len(descriptions)
        with open(config.external_bg_file, encoding="utf-8", errors="replace") as fh:
            for raw in fh:
                line = raw.strip()
                if not line or len(line) > 500:
                    skipped += 1
                    continue
                if contains_pedestrian_word(line, lexicon):
                    continue
                if not line.endswith("."):
                    line += "."
                if line.lower() in seen:
                    continue
                seen.add(line.lower())
                seed = derive_seed(config.seed, "external", next_id)
                descriptions.append(
                    Description(next_id, line, Category.BACKGROUND, {}, EXTERNAL_TEMPLATE_ID, seed)
                )
                next_id += 1

    return Corpus(descriptions, config, skipped_external=skipped)


# ---------------------------------------------------------------------------
# Grammar validation


@dataclass(frozen=True)
class ConformanceReport:
    conforms: bool
    template_id: int | None = None
    class_word: str | None = None
    category: Category | None = None
    attributes: dict[str, str] = field(default_factory=dict)
    reason: str | None = None


def _template_regex(template: str) -> re.Pattern:
    pattern = re.escape(template)
    pattern = pattern.replace(re.escape("{article}"), "(?:a|an)")
    pattern = pattern.replace(re.escape("{class}"), "(?P<np>.+?)")
    return re.compile("^" + pattern + "$")


class GrammarValidator:
    """Parses descriptions back against the closed template/attribute grammar."""

    def __init__(self, lexicon: AttributeLexicon | None = None):
        self.lexicon = lexicon or build_lexicon()
        templates = self.lexicon.all_templates()
        # Longer literal templates first so e.g. "...the hard to see {class}."
        # wins over "...the {class}.".
        order = sorted(range(len(templates)), key=lambda i: -len(templates[i]))
        curated = set(self.lexicon.templates)
        # Templates outside the curated list only ever wrap background classes.
        self._matchers = [
            (i, templates[i] in curated, _template_regex(templates[i])) for i in order
        ]
        self._template_index = {t: i for i, t in enumerate(self.lexicon.templates)}
        lex = self.lexicon
        self._pre_values = {
            v: t for t in PRE_ATTRIBUTES for v in lex.attributes[t]
        }
        self._classes = sorted(
            lex.pedestrian_synonyms + lex.background_classes, key=lambda c: -len(c.split())
        )
        colors = "|".join(map(re.escape, lex.attributes["color"]))
        clothes = "|".join(map(re.escape, lex.attributes["clothes"]))
        prefixes = "|".join(CLOTHES_PREFIXES)
        self._clothes_re = re.compile(
            rf"^(?:{prefixes}) (?:a|an) (?:(?P<color>{colors}) )?(?P<clothes>{clothes})\b"
        )
        self._color_only_re = re.compile(rf"^in (?:a|an) (?P<color>{colors})\b")

    def validate(self, text: str) -> ConformanceReport:
        for tid, allows_pedestrian, rx in self._matchers:
            m = rx.match(text)
            if m is None:
                continue
            report = self._parse_noun_phrase(m.group("np"), tid, allows_pedestrian)
            if report is not None:
                return report
        return ConformanceReport(False, reason="no template/grammar match")

    def _parse_noun_phrase(
        self, np_text: str, template_id: int, allows_pedestrian: bool = True
    ) -> ConformanceReport | None:
        tokens = np_text.split()
        attrs: dict[str, str] = {}
        i = 0
        while i < len(tokens) and tokens[i] in self._pre_values:
            attr_type = self._pre_values[tokens[i]]
            if attr_type in attrs:
                return None
            attrs[attr_type] = tokens[i]
            i += 1

        class_word = None
        category = None
        # Background renders may prefix a single color before the class.
        if i < len(tokens) and tokens[i] in self.lexicon.attributes["color"]:
            color_prefix = tokens[i]
            rest = " ".join(tokens[i + 1:])
            for cls in self._classes:
                if rest == cls and cls in self.lexicon.background_classes and not attrs:
                    return ConformanceReport(
                        True, template_id, cls, Category.BACKGROUND, {"color": color_prefix}
                    )
        for cls in self._classes:
            n = len(cls.split())
            if tokens[i : i + n] == cls.split():
                class_word = cls
                i += n
                break
        if class_word is None:
            return None
        category = (
            Category.PEDESTRIAN
            if class_word in self.lexicon.pedestrian_synonyms
            else Category.BACKGROUND
        )
        if category is Category.PEDESTRIAN and not allows_pedestrian:
            return None
        remainder = " ".join(tokens[i:])
        if category is Category.BACKGROUND:
            # Background renders carry no pre-attributes and no trailing phrases.
            if remainder or attrs:
                return None
            return ConformanceReport(True, template_id, class_word, category, attrs)

        while remainder:
            m = self._clothes_re.match(remainder)
            if m and "clothes" not in attrs:
                attrs["clothes"] = m.group("clothes")
                if m.group("color"):
                    attrs["color"] = m.group("color")
                remainder = remainder[m.end():].strip()
                continue
            m = self._color_only_re.match(remainder)
            if m and "color" not in attrs and "clothes" not in attrs:
                attrs["color"] = m.group("color")
                remainder = remainder[m.end():].strip()
                continue
            # Longest match across the verbatim trailing attributes, so
            # "walking a dog" (action) beats "walking" (pose).
            best: tuple[str, str] | None = None
            for attr_type in ("pose", "direction", "action"):
                if attr_type in attrs:
                    continue
                for value in self.lexicon.attributes[attr_type]:
                    if remainder == value or remainder.startswith(value + " "):
                        if best is None or len(value) > len(best[1]):
                            best = (attr_type, value)
            if best is None:
                return None
            attrs[best[0]] = best[1]
            remainder = remainder[len(best[1]):].strip()
        return ConformanceReport(True, template_id, class_word, category, attrs)


def validate_description(text: str, lexicon: AttributeLexicon | None = None) -> ConformanceReport:
    return GrammarValidator(lexicon).validate(text)
