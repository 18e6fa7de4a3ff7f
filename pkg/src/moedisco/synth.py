"""Synthetic corpora whose sentences come from disjoint character vocabularies.

Each group owns its own alphabet and a sparse second-order Markov chain over
it, so a sentence's group is recoverable from any of its characters while the
next-character distribution still takes context to learn.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

ALPHABET = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"


def group_alphabets(n_groups: int, letters_per_group: int = 12) -> list[str]:
    if n_groups * letters_per_group > len(ALPHABET):
        raise ValueError("not enough distinct characters for that many groups")
    return [ALPHABET[g * letters_per_group:(g + 1) * letters_per_group] for g in range(n_groups)]


def _chain(alphabet_size, branching, rng):
    """Transition table [a, b] -> probability over the next symbol."""
    m = alphabet_size
    probs = np.zeros((m, m, m))
    for a in range(m):
        for b in range(m):
            nxt = rng.choice(m, size=branching, replace=False)
            probs[a, b, nxt] = rng.dirichlet(np.full(branching, 2.0))
    return probs


def generate_lines(n_groups=2, n_tokens=200_000, letters_per_group=12, branching=3,
                   min_len=40, max_len=90, seed=0):
    """Return (lines, group_of_line).  Lines alternate groups in random order."""
    rng = np.random.default_rng(seed)
    alphabets = group_alphabets(n_groups, letters_per_group)
    cdfs = [_chain(letters_per_group, branching, rng).cumsum(axis=-1) for _ in range(n_groups)]
    lines, groups, total = [], [], 0
    while total < n_tokens:
        g = int(rng.integers(n_groups))
        length = int(rng.integers(min_len, max_len + 1))
        a, b = rng.integers(letters_per_group, size=2)
        seq = [int(a), int(b)]
        cdf = cdfs[g]
        for u in rng.random(length - 2):
            row = cdf[seq[-2], seq[-1]]
            seq.append(min(int(np.searchsorted(row, u * row[-1], side="right")), letters_per_group - 1))
        lines.append("".join(alphabets[g][i] for i in seq))
        groups.append(g)
        total += length + 1
    return lines, np.array(groups)


def write_corpus(path, **kwargs):
    lines, groups = generate_lines(**kwargs)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")
    return lines, groups
