"""Symbolic Raven-matrices-style compositional task generator.

A task instance is a 3x3 grid of panels; each panel is a length-M integer
vector. Attribute i of every row follows rule ``tuple[i]``, drawn from a
pool of R=8 concrete rules over Z_p. The model sees the first 8 panels and
predicts all M entries of the 9th; an instance counts as correct only if
every entry matches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .common import ConfigError, derive_seed

RULE_NAMES = ("CONST", "INC1", "INC2", "DEC1", "ADD", "SUB", "MAX", "MIN")
NUM_RULES = len(RULE_NAMES)

# token layout: value tokens 0..p-1, then BOS, SEP, QUERY
NUM_SPECIAL_TOKENS = 3


def rule_name(rule_id: int) -> str:
    return RULE_NAMES[rule_id]


@dataclass(frozen=True)
class SravenInstance:
    context: np.ndarray   # (8, M) ints in [0, p)
    target: np.ndarray    # (M,) ints in [0, p)
    rule_tuple: tuple[int, ...]


def enumerate_rule_tuples(R: int, M: int) -> list[tuple[int, ...]]:
    """All ordered M-tuples of distinct rule ids, lexicographically sorted.

    Count is R!/(R-M)!; attribute position i always follows rules[i].
    """
    if not (1 <= M <= R):
        raise ConfigError(f"need 1 <= M <= R, got M={M}, R={R}")
    import itertools
    return list(itertools.permutations(range(R), M))


@dataclass(frozen=True)
class SplitSpec:
    train_tuples: tuple[tuple[int, ...], ...]
    ood_tuples: tuple[tuple[int, ...], ...]
    ood_fraction: float
    seed: int


def split_combinations(tuples, ood_fraction: float = 0.25,
                       seed: int = 0) -> SplitSpec:
    """Seeded shuffle, then hold out a round(fraction * count) prefix as OOD."""
    tuples = [tuple(t) for t in tuples]
    if len(tuples) < 2:
        raise ConfigError("need at least 2 tuples to split")
    if not (0.0 < ood_fraction < 1.0):
        raise ConfigError(f"ood_fraction must be in (0,1), got {ood_fraction}")
    rng = np.random.default_rng(derive_seed(seed, "split"))
    order = rng.permutation(len(tuples))
    n_ood = int(round(ood_fraction * len(tuples)))
    ood = tuple(tuples[i] for i in order[:n_ood])
    train = tuple(tuples[i] for i in order[n_ood:])
    return SplitSpec(train, ood, ood_fraction, seed)


def _fill_row(rule: int, p: int, rng) -> np.ndarray:
    """One grid row (a1, a2, a3) for a single attribute under ``rule``."""
    name = RULE_NAMES[rule]
    if name == "CONST":
        a = int(rng.integers(p))
        return np.array([a, a, a])
    if name in ("INC1", "INC2", "DEC1"):
        step = {"INC1": 1, "INC2": 2, "DEC1": -1}[name]
        a = int(rng.integers(p))
        return np.array([a, (a + step) % p, (a + 2 * step) % p])
    a1, a2 = int(rng.integers(p)), int(rng.integers(p))
    if name == "ADD":
        return np.array([a1, a2, (a1 + a2) % p])
    if name == "SUB":
        return np.array([a1, a2, (a1 - a2) % p])
    if name == "MAX":
        return np.array([a1, a2, max(a1, a2)])
    if name == "MIN":
        return np.array([a1, a2, min(a1, a2)])
    raise AssertionError(f"unhandled rule {name}")


def sample_instance(rule_tuple, p: int, rng) -> SravenInstance:
    """Draw one instance of the task defined by ``rule_tuple`` over Z_p."""
    if p < 4:
        raise ConfigError(f"value range p must be >= 4, got {p}")
    rule_tuple = tuple(rule_tuple)
    M = len(rule_tuple)
    grid = np.empty((3, 3, M), dtype=np.int64)
    for i, rule in enumerate(rule_tuple):
        for r in range(3):
            grid[r, :, i] = _fill_row(rule, p, rng)
    panels = grid.reshape(9, M)
    return SravenInstance(context=panels[:8].copy(), target=panels[8].copy(),
                          rule_tuple=rule_tuple)


def row_satisfies(rule: int, row, p: int) -> bool:
    """Independent predicate: does (a1, a2, a3) satisfy ``rule`` over Z_p?

    Written against the rule definitions, not the sampling code, so it can
    serve as an oracle for the generator.
    """
    a1, a2, a3 = (int(v) for v in row)
    name = RULE_NAMES[rule]
    if name == "CONST":
        return a1 == a2 == a3
    if name == "INC1":
        return a2 == (a1 + 1) % p and a3 == (a2 + 1) % p
    if name == "INC2":
        return a2 == (a1 + 2) % p and a3 == (a2 + 2) % p
    if name == "DEC1":
        return a2 == (a1 - 1) % p and a3 == (a2 - 1) % p
    if name == "ADD":
        return a3 == (a1 + a2) % p
    if name == "SUB":
        return a3 == (a1 - a2) % p
    if name == "MAX":
        return a3 == max(a1, a2)
    if name == "MIN":
        return a3 == min(a1, a2)
    raise AssertionError(f"unhandled rule {name}")


def instance_is_valid(inst: SravenInstance, p: int) -> bool:
    """Check every row of the implied 3x3 grid against the rule tuple."""
    panels = np.concatenate([inst.context, inst.target[None, :]], axis=0)
    grid = panels.reshape(3, 3, -1)
    for i, rule in enumerate(inst.rule_tuple):
        for r in range(3):
            if not row_satisfies(rule, grid[r, :, i], p):
                return False
    return True


# ---------------------------------------------------------------------------
# token encoding


def vocab_size(p: int) -> int:
    return p + NUM_SPECIAL_TOKENS


def special_tokens(p: int) -> tuple[int, int, int]:
    """(BOS, SEP, QUERY) token ids for value range p."""
    return p, p + 1, p + 2


def sequence_length(M: int) -> int:
    return 1 + 8 * (M + 1) + 1


def encode(inst: SravenInstance, p: int) -> np.ndarray:
    """[BOS] then 8 panels as M value tokens + [SEP] each, then [QUERY]."""
    bos, sep, query = special_tokens(p)
    M = inst.context.shape[1]
    out = np.empty(sequence_length(M), dtype=np.int64)
    out[0] = bos
    pos = 1
    for panel in inst.context:
        out[pos:pos + M] = panel
        out[pos + M] = sep
        pos += M + 1
    out[pos] = query
    return out


def decode_panels(tokens: np.ndarray, M: int, p: int) -> np.ndarray:
    """Recover the 8 context panels from an encoded sequence."""
    bos, sep, query = special_tokens(p)
    if tokens[0] != bos or tokens[-1] != query:
        raise ValueError("not a valid encoded instance")
    panels = np.empty((8, M), dtype=np.int64)
    pos = 1
    for i in range(8):
        panels[i] = tokens[pos:pos + M]
        if tokens[pos + M] != sep:
            raise ValueError("malformed panel separator")
        pos += M + 1
    return panels


def exact_match_accuracy(predictions, targets) -> float:
    """Fraction of instances whose predicted vectors match in every entry."""
    pred = np.asarray(predictions)
    tgt = np.asarray(targets)
    if pred.shape != tgt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {tgt.shape}")
    if pred.ndim == 1:
        pred, tgt = pred[:, None], tgt[:, None]
    return float((pred == tgt).all(axis=1).mean())


# ---------------------------------------------------------------------------
# snapshots and dataset dumps


def make_snapshot(tuples, p: int, num_instances: int,
                  seed: int, label: str = "snapshot") -> list[SravenInstance]:
    """A frozen evaluation set: ``num_instances`` instances drawn round-robin
    over ``tuples`` with a dedicated seeded generator."""
    if not tuples:
        raise ConfigError("cannot snapshot an empty tuple list")
    rng = np.random.default_rng(derive_seed(seed, f"snapshot:{label}"))
    out = []
    for i in range(num_instances):
        out.append(sample_instance(tuples[i % len(tuples)], p, rng))
    return out


def dump_instances(path, instances, p: int, M: int, seed: int,
                   split_name: str, R: int = NUM_RULES) -> None:
    """One JSON object per line; first line is a header with the generator
    parameters."""
    with open(path, "w") as fh:
        header = {"p": p, "M": M, "R": R, "seed": seed, "split": split_name}
        fh.write(json.dumps(header) + "\n")
        for inst in instances:
            rec = {
                "tuple": list(inst.rule_tuple),
                "context": inst.context.tolist(),
                "target": inst.target.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_instances(path) -> tuple[dict, list[SravenInstance]]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        out = []
        for line in fh:
            rec = json.loads(line)
            out.append(SravenInstance(
                context=np.array(rec["context"], dtype=np.int64),
                target=np.array(rec["target"], dtype=np.int64),
                rule_tuple=tuple(rec["tuple"]),
            ))
    return header, out
