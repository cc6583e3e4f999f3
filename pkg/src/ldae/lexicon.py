"""Attribute lexicon: templates, attribute vocabularies, and class-name synonyms.

The lexicon is embedded and versioned rather than pulled from WordNet, so corpus
generation has no external dependencies and is reproducible byte-for-byte.
"""
from __future__ import annotations

from dataclasses import dataclass, field

LEXICON_VERSION = 1

# Attribute types that may appear before the class word.
PRE_ATTRIBUTES = ("age", "body", "expression")
# Attribute types that may appear after the class word.
POST_ATTRIBUTES = ("clothes", "color", "pose", "direction", "action")
ATTRIBUTE_TYPES = PRE_ATTRIBUTES + POST_ATTRIBUTES

# Curated photo-caption templates. Ambiguous adjectives ("nice", "cool") and
# unreal-object forms ("plastic", "toy") are deliberately absent.
_CURATED_TEMPLATES = [
    "A photo of {article} {class}.",
    "A photo of the {class}.",
    "A cropped photo of {article} {class}.",
    "A cropped picture of {article} {class}.",
    "A cropped painting of {article} {class}.",
    "A picture of {article} {class}.",
    "A picture of {article} {class} in the scene.",
    "A picture of the {class}.",
    "There is {article} {class} in the scene.",
    "A rendering of {article} {class}.",
    "A rendering of the {class}.",
    "A blurry rendering of {article} {class}.",
    "A dark rendering of {article} {class}.",
    "A close-up rendering of {article} {class}.",
    "A low resolution rendering of {article} {class}.",
    "A blurry photo of {article} {class}.",
    "A blurry picture of {article} {class}.",
    "A low resolution photo of {article} {class}.",
    "A bright photo of {article} {class}.",
    "A dark photo of {article} {class}.",
    "A close-up photo of {article} {class}.",
    "A black and white photo of the {class}.",
    "A painting of {article} {class}.",
    "A painting of the {class}.",
    "A bright painting of {article} {class}.",
    "A close-up painting of {article} {class}.",
    "A photo of the hard to see {class}.",
    "itap of {article} {class}.",
]

# Basic forms kept only for background rendering: no curation applied, so the
# unreal-object and ambiguous variants stay in.
_BASIC_EXTRA_TEMPLATES = [
    "A photo of a nice {class}.",
    "A photo of a cool {class}.",
    "The plastic {class}.",
    "A toy {class}.",
    "A photo of the small {class}.",
    "A photo of the large {class}.",
    "The {class}.",
]

_PEDESTRIAN_SYNONYMS = [
    "pedestrian",
    "person",
    "man",
    "woman",
    "boy",
    "girl",
    "lady",
    "guy",
    "child",
    "stroller",
    "hiker",
    "commuter",
    "player",
    "walker",
    "jogger",
]

# Pedestrian-irrelevant classes, drawn from the COCO category list.
_BACKGROUND_CLASSES = [
    "car",
    "truck",
    "bus",
    "motorcycle",
    "bicycle",
    "train",
    "boat",
    "dog",
    "cat",
    "horse",
    "bird",
    "cow",
    "sheep",
    "tree",
    "bench",
    "umbrella",
    "backpack",
    "street lamp",
    "fire hydrant",
    "traffic light",
    "stop sign",
    "potted plant",
    "parking meter",
    "vehicle",
    "suitcase",
    "kite",
    "airplane",
    "elephant",
    "bear",
    "zebra",
    "giraffe",
    "handbag",
    "bottle",
    "chair",
    "couch",
    "clock",
    "vase",
    "laptop",
    "television",
    "refrigerator",
    "microwave",
    "sink",
    "skateboard",
    "surfboard",
    "snowboard",
    "frisbee",
    "tennis racket",
    "dining table",
    "teddy bear",
]

_ATTRIBUTES = {
    "age": ["young", "old", "little", "elderly"],
    "body": ["tall", "short", "big", "small", "slim", "fat", "thin"],
    "expression": ["smiling", "crying", "displeased", "laughing", "frowning"],
    "clothes": [
        "t-shirt",
        "dress",
        "jeans",
        "hat",
        "jacket",
        "coat",
        "backpack",
        "pants",
        "sunglasses",
        "eyeglasses",
        "scarf",
        "hoodie",
        "uniform",
        "suit",
    ],
    "color": ["white", "black", "red", "blue", "green", "yellow", "gray", "brown", "orange", "purple"],
    "pose": ["standing", "walking", "sitting", "crouching", "running", "leaning", "bending"],
    "direction": ["in front", "in profile", "from behind", "from the side", "facing away"],
    "action": [
        "riding a bicycle",
        "playing a baseball",
        "playing a basketball",
        "playing a guitar",
        "playing a tennis",
        "riding a bike",
        "pushing a cart",
        "walking a dog",
        "crossing the street",
        "holding a phone",
        "carrying a bag",
        "exercising",
    ],
}

# Connectors allowed in front of a clothes item.
CLOTHES_PREFIXES = ("wearing", "in", "with")


@dataclass(frozen=True)
class AttributeLexicon:
    """Closed vocabulary the generator and validator share."""

    attributes: dict[str, list[str]]
    pedestrian_synonyms: list[str]
    background_classes: list[str]
    templates: list[str]
    background_templates: list[str]
    version: int = LEXICON_VERSION

    def all_templates(self) -> list[str]:
        """Curated templates plus the background-only basics, deduplicated."""
        seen = dict.fromkeys(self.templates)
        seen.update(dict.fromkeys(self.background_templates))
        return list(seen)


def build_lexicon() -> AttributeLexicon:
    """Return the embedded lexicon with curation applied to pedestrian templates."""
    return AttributeLexicon(
        attributes={k: list(v) for k, v in _ATTRIBUTES.items()},
        pedestrian_synonyms=list(_PEDESTRIAN_SYNONYMS),
        background_classes=list(_BACKGROUND_CLASSES),
        templates=list(_CURATED_TEMPLATES),
        background_templates=list(_CURATED_TEMPLATES) + list(_BASIC_EXTRA_TEMPLATES),
    )


def choose_article(following: str) -> str:
    """'an' before a vowel-initial word, 'a' otherwise."""
    return "an" if following[:1].lower() in "aeiou" else "a"
