#!/usr/bin/env python3
"""Regenerates data/corpus.txt.

Deterministic synthetic English-like text: Zipf-weighted word choice from a
fixed vocabulary, simple sentence templates, paragraph breaks. Byte-level
models pick up the letter and word statistics quickly, which is all the
training and calibration pipeline needs.
"""

import random

TARGET_BYTES = 768 * 1024
SEED = 20240601

NOUNS = [
    "river", "stone", "forest", "lantern", "harbor", "meadow", "signal",
    "ledger", "garden", "engine", "valley", "window", "compass", "anchor",
    "bridge", "market", "letter", "winter", "summer", "autumn", "machine",
    "village", "thread", "needle", "mirror", "shadow", "road", "mountain",
    "train", "paper", "bottle", "candle", "orchard", "island", "tower",
]
VERBS = [
    "carries", "follows", "crosses", "gathers", "measures", "repairs",
    "records", "reaches", "returns", "settles", "signals", "shelters",
    "traces", "turns", "weaves", "holds", "guides", "covers", "opens",
    "closes", "remembers", "collects", "answers", "divides", "joins",
]
ADJS = [
    "quiet", "bright", "narrow", "steady", "distant", "early", "late",
    "gentle", "rough", "pale", "deep", "broad", "simple", "sudden",
    "patient", "hollow", "warm", "cold", "clear", "heavy",
]
CONNECT = ["and", "but", "while", "because", "until", "before", "after", "so"]


def zipf_choice(rng, items):
    n = len(items)
    weights = [1.0 / (k + 1) for k in range(n)]
    total = sum(weights)
    x = rng.random() * total
    for k, w in enumerate(weights):
        x -= w
        if x <= 0:
            return items[k]
    return items[-1]


def clause(rng):
    words = ["the", zipf_choice(rng, ADJS), zipf_choice(rng, NOUNS),
             zipf_choice(rng, VERBS), "the", zipf_choice(rng, NOUNS)]
    if rng.random() < 0.3:
        words.insert(3, zipf_choice(rng, ADJS))
    return " ".join(words)


def sentence(rng):
    text = clause(rng)
    while rng.random() < 0.35:
        text += " " + zipf_choice(rng, CONNECT) + " " + clause(rng)
    return text[0].upper() + text[1:] + "."


def main():
    rng = random.Random(SEED)
    parts = []
    size = 0
    sentences_in_paragraph = 0
    while size < TARGET_BYTES:
        s = sentence(rng)
        sep = " "
        sentences_in_paragraph += 1
        if sentences_in_paragraph >= rng.randint(4, 9):
            sep = "\n\n"
            sentences_in_paragraph = 0
        parts.append(s + sep)
        size += len(s) + len(sep)
    with open("data/corpus.txt", "w", encoding="ascii") as f:
        f.write("".join(parts))
    print(f"wrote data/corpus.txt ({size} bytes)")


if __name__ == "__main__":
    main()
