"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .model import CLS, IGNORE, PAD


def check_token_sequences(X, vocab_size: int, max_len: int) -> list:
    """List of 1-D int64 arrays, each starting with CLS, no PAD, ids in range."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [row[row != PAD] for row in X]
    try:
        seqs = [np.asarray(x) for x in X]
    except TypeError:
        raise TypeError(f"expected a sequence of token-id sequences, got {type(X).__name__}") from None
    if not seqs:
        raise ValueError("no sequences given")
    out = []
    for i, s in enumerate(seqs):
        if s.ndim != 1 or s.size == 0:
            raise ValueError(f"sequence {i}: expected a non-empty 1-D array, got shape {s.shape}")
        if not np.issubdtype(s.dtype, np.integer):
            if not np.all(np.mod(s, 1) == 0):
                raise ValueError(f"sequence {i}: token ids must be integers")
        s = s.astype(np.int64)
        if s[0] != CLS:
            raise ValueError(f"sequence {i}: must start with the CLS token ({CLS})")
        if len(s) > max_len:
            raise ValueError(f"sequence {i}: length {len(s)} exceeds max_len {max_len}")
        if s.min() < 0 or s.max() >= vocab_size:
            raise ValueError(f"sequence {i}: token ids must lie in [0, {vocab_size})")
        if np.any(s == PAD):
            raise ValueError(f"sequence {i}: contains the padding id {PAD}")
        out.append(s)
    return out


def check_class_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1-D, got shape {y.shape}")
    if len(y) != n_samples:
        raise ValueError(f"X has {n_samples} samples but y has {len(y)}")
    return y


def check_tag_labels(y, seqs: Sequence[np.ndarray], n_tags: Optional[int] = None) -> list:
    """Per-token tag arrays aligned with ``seqs``; IGNORE marks unscored positions."""
    if len(y) != len(seqs):
        raise ValueError(f"X has {len(seqs)} samples but y has {len(y)}")
    out = []
    for i, (tags, s) in enumerate(zip(y, seqs)):
        tags = np.asarray(tags, dtype=np.int64)
        if tags.shape != s.shape:
            raise ValueError(f"sample {i}: {len(tags)} tags for {len(s)} tokens")
        valid = tags[tags != IGNORE]
        if valid.size and (valid.min() < 0 or (n_tags is not None and valid.max() >= n_tags)):
            raise ValueError(f"sample {i}: tag ids must lie in [0, {n_tags})")
        out.append(tags)
    return out


def check_languages(languages, n_samples: int) -> np.ndarray:
    if languages is None:
        return np.zeros(n_samples, dtype=np.int64)
    lang = np.asarray(languages, dtype=np.int64)
    if lang.shape != (n_samples,):
        raise ValueError(f"languages must have shape ({n_samples},), got {lang.shape}")
    return lang
