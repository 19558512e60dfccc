"""Seeded synthetic datasets for scenarios, benchmarks and tests."""

from __future__ import annotations

import random
from typing import Optional

ENGAGING = (
    "amazing", "secret", "ultimate", "incredible", "revealed", "shocking",
    "best", "hilarious", "unbelievable", "epic", "genius", "wholesome",
)
DULL = (
    "minutes", "quarterly", "notice", "update", "procedure", "memo",
    "schedule", "routine", "maintenance", "agenda", "policy", "bylaws",
)
NEUTRAL = (
    "cat", "city", "garden", "phone", "recipe", "river", "game", "school",
    "music", "coffee", "bike", "market", "winter", "forest", "train", "camera",
    "library", "beach", "kitchen", "museum", "street", "dog", "movie", "tea",
)
BRANDS = ("Acme", "Globex", "Initech", "Umbrella", "Hooli", "Stark Industries")
FILLER = (
    "today", "went", "to", "the", "with", "my", "friend", "and", "loved", "it",
    "new", "store", "near", "downtown", "really", "think", "about", "again",
)


def synthetic_titles(n: int, seed: int = 0, noise: float = 0.0) -> list[dict]:
    """``labeled_title.v1`` items: engaged titles carry an engaging cue word.

    Each title has two cue words from its class and three neutral words, so
    the classes are linearly separable in a bag-of-words space. ``noise``
    flips that fraction of labels.
    """
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        engaged = rng.random() < 0.5
        cues = rng.sample(ENGAGING if engaged else DULL, 2)
        words = cues + rng.sample(NEUTRAL, 3)
        rng.shuffle(words)
        if noise and rng.random() < noise:
            engaged = not engaged
        out.append({"title": " ".join(words), "engaged": engaged})
    return out


def synthetic_posts(n: int, seed: int = 0, brands: tuple[str, ...] = BRANDS) -> list[dict]:
    """``post.v1`` items mentioning brands at random."""
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        words = rng.choices(FILLER, k=rng.randint(6, 14))
        for _ in range(rng.randint(0, 2)):
            words.insert(rng.randrange(len(words) + 1), rng.choice(brands))
        title = " ".join(rng.choices(NEUTRAL, k=3))
        out.append({"title": title, "body": " ".join(words), "liked": rng.random() < 0.5})
    return out


def random_text(rng: random.Random, length: int = 24) -> str:
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789"
    return "".join(rng.choice(alphabet) for _ in range(length))


def random_posts(n: int, seed: int = 0, min_len: int = 16, rng: Optional[random.Random] = None) -> list[dict]:
    """Posts whose text fields are random strings of at least ``min_len`` characters."""
    rng = rng or random.Random(seed)
    return [
        {
            "title": random_text(rng, rng.randint(min_len, 2 * min_len)),
            "body": random_text(rng, rng.randint(min_len, 4 * min_len)),
            "liked": rng.random() < 0.5,
        }
        for _ in range(n)
    ]
