"""Deterministic synthetic corpus: byte-level tokens, phase-dependent mixtures.

Every sequence is a pure function of (seed, stream, step, index) through a
counter-based Philox generator, so batches are reproducible regardless of
execution order and the train / held-out streams are disjoint by key
construction rather than by bookkeeping.

Domains are chosen so "high-quality SFT" is operationally meaningful at desk
scale: the sft-tagged domains (arithmetic, copy) are low-entropy and
structured, so re-blending them during decay measurably drops the training
loss. The long-range recall domain buries a key-value binding early in the
sequence and queries it at the end, so solving it needs the extended window.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

VOCAB_BYTES = 256
BOS, EOS = 256, 257
VOCAB_SIZE = 258

TRAIN_STREAM, HELDOUT_STREAM = 0, 1

PRETRAIN, SFT = "pretrain", "sft"


@dataclass(frozen=True)
class Domain:
    id: str
    generator: str   # uniform-bytes | arithmetic-expressions | copy-task | key-value-recall
    quality: str     # pretrain | sft


DOMAINS = {
    "uniform": Domain("uniform", "uniform-bytes", PRETRAIN),
    "arith": Domain("arith", "arithmetic-expressions", SFT),
    "copy": Domain("copy", "copy-task", SFT),
    "kv": Domain("kv", "key-value-recall", PRETRAIN),
    "kv_long": Domain("kv_long", "key-value-recall", PRETRAIN),
}


@dataclass(frozen=True)
class Mixture:
    id: str
    weights: dict[str, float]

    def __post_init__(self):
        total = sum(self.weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mixture {self.id}: weights sum to {total}, not 1")
        for d in self.weights:
            if d not in DOMAINS:
                raise KeyError(f"mixture {self.id}: unknown domain {d!r}")

    def sft_fraction(self) -> float:
        return sum(w for d, w in self.weights.items()
                   if DOMAINS[d].quality == SFT)


SFT_BLEND_FRACTION = 0.669

MIXTURES = {
    # stable phases: broad diversity, zero sft weight; recall is heavy
    # enough that the circuit is solid before the long-context stretch
    "pretrain": Mixture("pretrain", {"uniform": 0.65, "kv": 0.35}),
    # decay: 66.9% of the stream from sft-tagged domains
    "sft_blend": Mixture("sft_blend",
                         {"arith": 0.35, "copy": 0.319, "uniform": 0.231, "kv": 0.1}),
    # long-context: same sft fraction, recall domain stretched past the old window
    "sft_blend_long": Mixture("sft_blend_long",
                              {"arith": 0.35, "copy": 0.319, "kv_long": 0.331}),
}


def tokenize(data: bytes) -> np.ndarray:
    """Identity byte-level mapping into [0, 256)."""
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        raise ValueError("token id outside vocab")
    return bytes(int(i) for i in ids if i < VOCAB_BYTES)


def _rng(seed: int, stream: int, step: int, index: int) -> np.random.Generator:
    """Counter-based generator keyed by position in the stream, not by order."""
    key = (np.uint64(seed),
           (np.uint64(stream) << np.uint64(62))
           ^ (np.uint64(step) << np.uint64(24)) ^ np.uint64(index))
    return np.random.Generator(np.random.Philox(key=key))


# -- sequence generators ----------------------------------------------------
# Each returns exactly `length` tokens and is a pure function of its rng.

def _gen_uniform(rng: np.random.Generator, length: int) -> np.ndarray:
    return rng.integers(0, VOCAB_BYTES, size=length, dtype=np.int64)


def _gen_arith(rng: np.random.Generator, length: int) -> np.ndarray:
    parts: list[bytes] = []
    n = 0
    while n < length:
        a, b = int(rng.integers(0, 50)), int(rng.integers(0, 50))
        expr = f"{a}+{b}={a + b};".encode()
        parts.append(expr)
        n += len(expr)
    return tokenize(b"".join(parts))[:length]


def _gen_copy(rng: np.random.Generator, length: int) -> np.ndarray:
    parts: list[np.ndarray] = []
    n = 0
    while n < length:
        seg_len = int(rng.integers(4, 13))
        seg = rng.integers(ord("a"), ord("z") + 1, size=seg_len, dtype=np.int64)
        rec = np.concatenate([seg, [ord("|")], seg, [ord(";")]])
        parts.append(rec)
        n += len(rec)
    return np.concatenate(parts)[:length]


def _gen_kv(rng: np.random.Generator, length: int) -> np.ndarray:
    """Key-value bindings amid random-byte filler, recall queries after.

    The binding block "Kx=Vy;Kz=Vw;..." lands at a random offset inside the
    first half. Queries "?K=V." echo a binding: a few at random positions
    after the block (training signal at varied recall distances) and always
    one flush at the end, whose distance to the block exceeds half the
    sequence; a trailing window shorter than length/2 sees that query but
    never its binding. kv and kv_long share this generator and differ only
    in the sequence length the phase hands them.
    """
    keys = rng.permutation(np.arange(ord("A"), ord("Z") + 1))[:6]
    vals = rng.integers(ord("0"), ord("9") + 1, size=6, dtype=np.int64)
    head: list[int] = []
    for k, v in zip(keys, vals):
        head += [int(k), ord("="), int(v), ord(";")]

    def query(i: int) -> np.ndarray:
        return np.asarray([ord("?"), int(keys[i]), ord("="), int(vals[i]),
                           ord(".")], dtype=np.int64)

    seq = rng.integers(0, VOCAB_BYTES, size=length, dtype=np.int64)
    offset = int(rng.integers(0, max(1, length // 2 - len(head))))
    offset = min(offset, max(0, length - len(head)))
    seq[offset:offset + len(head)] = head[:max(0, length - offset)]
    head_end = offset + len(head)

    n_mid = min(3, max(0, (length - head_end - 10) // 20))
    if n_mid > 0:
        starts = sorted(rng.integers(head_end, length - 10, size=n_mid))
        prev_end = head_end
        for s in starts:
            s = max(s, prev_end)
            if s + 5 > length - 6:
                break
            seq[s:s + 5] = query(int(rng.integers(0, 6)))
            prev_end = s + 5
    if length >= len(head) + 5:
        seq[length - 5:] = query(int(rng.integers(0, 6)))
    return seq


def generate_sequence(domain_id: str, rng: np.random.Generator,
                      length: int) -> np.ndarray:
    d = DOMAINS[domain_id]
    if d.generator == "uniform-bytes":
        return _gen_uniform(rng, length)
    if d.generator == "arithmetic-expressions":
        return _gen_arith(rng, length)
    if d.generator == "copy-task":
        return _gen_copy(rng, length)
    if d.generator == "key-value-recall":
        return _gen_kv(rng, length)
    raise KeyError(f"unknown generator {d.generator!r}")


def sample_sequence(seed: int, stream: int, step: int, index: int,
                    mixture: Mixture, length: int) -> np.ndarray:
    """One deterministic sequence: domain drawn per mixture weights."""
    rng = _rng(seed, stream, step, index)
    names = sorted(mixture.weights)
    probs = np.array([mixture.weights[n] for n in names])
    domain = names[int(rng.choice(len(names), p=probs))]
    return generate_sequence(domain, rng, length)


def sample_batch(step: int, sequences: int, seq_len: int, mixture: Mixture,
                 seed: int, stream: int = TRAIN_STREAM) -> np.ndarray:
    """Token block [sequences, seq_len + 1]; column 0 starts each row at BOS.

    The +1 column lets the trainer slice inputs [:, :-1] against targets
    [:, 1:] so every generated token is predicted once.
    """
    block = np.empty((sequences, seq_len + 1), dtype=np.int64)
    block[:, 0] = BOS
    for i in range(sequences):
        block[i, 1:] = sample_sequence(seed, stream, step, i, mixture, seq_len)
    return block


def batch_hash(block: np.ndarray) -> str:
    """Stable content hash of a token block (for stream-identity checks)."""
    return hashlib.sha256(np.ascontiguousarray(block).tobytes()).hexdigest()


def heldout_perplexity(loss_fn, steps: int, sequences: int, seq_len: int,
                       mixture: Mixture, seed: int) -> float:
    """exp(mean NLL) over a held-out stream disjoint from training by key.

    ``loss_fn(block) -> float`` returns mean next-token NLL for one block.
    """
    losses = []
    for step in range(steps):
        block = sample_batch(step, sequences, seq_len, mixture, seed,
                             stream=HELDOUT_STREAM)
        losses.append(float(loss_fn(block)))
    return float(np.exp(np.mean(losses)))


def value_token_positions(block: np.ndarray) -> list[tuple[int, int]]:
    """(row, col) of each recall query's value token ('?K=V.' pattern)."""
    hits = []
    q, eq, dot = ord("?"), ord("="), ord(".")
    for r in range(block.shape[0]):
        row = block[r]
        for c in range(len(row) - 4):
            if row[c] == q and row[c + 2] == eq and row[c + 4] == dot:
                hits.append((r, c + 3))
    return hits
