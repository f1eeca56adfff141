"""Subject-level stratified hold-out plus k-fold splitting."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import Dataset


@dataclass
class SplitPlan:
    test_subject_ids: list[str]
    folds: list[tuple[list[str], list[str]]]
    seed: int

    def check(self, all_ids=None) -> None:
        """Raise AssertionError if any partition invariant is broken."""
        test = set(self.test_subject_ids)
        seen_val = []
        for k, (train, val) in enumerate(self.folds):
            assert not test & set(train), f"fold {k}: test subject in train"
            assert not test & set(val), f"fold {k}: test subject in val"
            assert not set(train) & set(val), f"fold {k}: train/val overlap"
            seen_val.extend(val)
        assert len(seen_val) == len(set(seen_val)), "subject in more than one val set"
        if all_ids is not None:
            assert set(seen_val) == set(all_ids) - test, "val sets do not cover non-test subjects"

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "test": self.test_subject_ids,
            "folds": [{"train": tr, "val": va} for tr, va in self.folds],
        }
        return json.dumps(payload, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        raw = json.loads(text)
        folds = [(f["train"], f["val"]) for f in raw["folds"]]
        return cls(raw["test"], folds, raw["seed"])


def subject_split(ds: Dataset, test_frac: float = 0.1, k: int = 5, seed: int = 0) -> SplitPlan:
    """Stratified split: hold out ``test_frac`` of each class, then k folds over the rest."""
    if not 0 < test_frac < 1:
        raise ValueError(f"test_frac must be in (0, 1), got {test_frac}")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    test, chunks = [], []
    for label in (0, 1):
        ids = sorted(s.id for s in ds.subjects if s.label == label)
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_test = max(1, int(np.floor(test_frac * len(ids) + 0.5)))
        rest = ids[n_test:]
        if k > len(rest):
            raise ValueError(f"class {label}: {len(rest)} non-test subjects cannot fill {k} folds")
        test.extend(ids[:n_test])
        chunks.append([list(c) for c in np.array_split(np.array(rest, dtype=object), k)])
    folds = []
    for i in range(k):
        val = chunks[0][i] + chunks[1][i]
        train = [sid for j in range(k) if j != i for c in (chunks[0][j], chunks[1][j]) for sid in c]
        folds.append((train, val))
    plan = SplitPlan(test, folds, seed)
    plan.check([s.id for s in ds.subjects])
    return plan
