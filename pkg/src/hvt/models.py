"""Language-model interface and desk-scale synthetic models.

Models map a token prefix to a next-token distribution. Two concrete families
are provided: :class:`TableModel`, an n-gram style lookup table with suffix
backoff, and :class:`SoftmaxModel`, a tiny one-layer network whose weights are
generated from a splitmix64 stream so that its outputs are reproducible from
``(seed, embed_dim, temperature, order)`` alone. :class:`InterpolatedModel`
mixes any model with the uniform distribution and is how a draft model of
controlled divergence is derived from a target model.

Cost accounting: every call to :meth:`LanguageModel.next_distribution` is one
forward pass. :meth:`LanguageModel.batch_distributions` scores every position
of a continuation in a single pass, the way a transformer scores a whole
draft at once.

Model file format (JSON)::

    {"type": "table", "vocab_size": 3, "eos": 2, "order": 1,
     "fallback": [0.5, 0.3, 0.2],
     "table": [{"context": [0], "probs": [0.1, 0.1, 0.8]}]}
    {"type": "softmax", "vocab_size": 8, "eos": 7, "seed": 42,
     "embed_dim": 4, "temperature": 1.0, "order": 2}
    {"type": "interpolated", "weight": 0.2, "base": {...}}

``eos`` may be ``null`` for a model without an end-of-sequence token.
"""

from __future__ import annotations

import json
import math
import threading
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import InvalidPrefixError, ValidationError
from .sampling import RandomSource, as_source

#: Finite stand-in for log(0); keeps queue ordering total and NaN-free.
LOG_ZERO = -1e12

DIST_TOL = 1e-9
SPEC_TOL = 1e-6

Distribution = np.ndarray
TokenSeq = tuple[int, ...]


def safe_log(prob: float) -> float:
    """``log(prob)`` with zero mapped to :data:`LOG_ZERO`."""
    if prob <= 0.0:
        return LOG_ZERO
    return max(math.log(prob), LOG_ZERO)


def is_log_zero(logp: float) -> bool:
    """True when ``logp`` carries the zero-probability floor."""
    return logp <= LOG_ZERO


def validate_distribution(probs: Sequence[float] | np.ndarray, vocab_size: int, tol: float = DIST_TOL) -> np.ndarray:
    arr = np.asarray(probs, dtype=np.float64)
    if arr.shape != (vocab_size,):
        raise ValidationError(f"distribution has shape {arr.shape}, expected ({vocab_size},)")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ValidationError("distribution has negative or non-finite entries")
    total = float(arr.sum())
    if abs(total - 1.0) > tol:
        raise ValidationError(f"distribution sums to {total!r}, not 1 (tolerance {tol})")
    return arr


class LanguageModel(ABC):
    """Conditional next-token distribution provider with a forward counter.

    Subclasses implement :meth:`_compute`, which must be a pure function of
    the prefix. Results are cached per prefix; the cache does not affect the
    forward counter.
    """

    def __init__(self, vocab_size: int, eos: int | None):
        if vocab_size < 1:
            raise ValidationError("vocab_size must be >= 1")
        if eos is not None and not 0 <= eos < vocab_size:
            raise ValidationError(f"eos {eos} outside vocabulary of size {vocab_size}")
        self.vocab_size = int(vocab_size)
        self.eos = None if eos is None else int(eos)
        self._forward_count = 0
        self._lock = threading.Lock()
        self._cache: dict[TokenSeq, np.ndarray] = {}

    @property
    def forward_count(self) -> int:
        return self._forward_count

    def reset_counter(self) -> None:
        with self._lock:
            self._forward_count = 0

    def _count(self, n: int = 1) -> None:
        with self._lock:
            self._forward_count += n

    @abstractmethod
    def _compute(self, prefix: TokenSeq) -> np.ndarray:
        """Return the (uncounted) next-token distribution for ``prefix``."""

    def check_prefix(self, prefix: Iterable[int]) -> TokenSeq:
        prefix = tuple(int(t) for t in prefix)
        for t in prefix:
            if not 0 <= t < self.vocab_size:
                raise InvalidPrefixError(f"token {t} outside vocabulary of size {self.vocab_size}")
            if t == self.eos:
                raise InvalidPrefixError("prefix contains EOS")
        return prefix

    def distribution(self, prefix: Iterable[int]) -> np.ndarray:
        """Uncounted lookup; for oracles and composite models only."""
        prefix = self.check_prefix(prefix)
        dist = self._cache.get(prefix)
        if dist is None:
            dist = np.array(self._compute(prefix), dtype=np.float64)
            dist.setflags(write=False)
            self._cache[prefix] = dist
        return dist

    def next_distribution(self, prefix: Iterable[int]) -> np.ndarray:
        """One forward pass: the distribution of the token following ``prefix``."""
        dist = self.distribution(prefix)
        self._count()
        return dist

    def batch_distributions(self, prefix: Iterable[int], continuation: Iterable[int]) -> list[np.ndarray]:
        """One forward pass over ``prefix ⧺ continuation``.

        Returns ``len(continuation) + 1`` distributions: the conditional at
        every position from just after ``prefix`` to just after the last
        continuation token.
        """
        prefix = self.check_prefix(prefix)
        continuation = self.check_prefix(continuation)
        dists = [self.distribution(prefix + continuation[:j]) for j in range(len(continuation) + 1)]
        self._count()
        return dists

    def to_spec(self) -> dict[str, Any]:
        raise NotImplementedError


def next_distribution(model: LanguageModel, prefix: Iterable[int]) -> np.ndarray:
    return model.next_distribution(prefix)


def sequence_logprob(model: LanguageModel, prefix: Iterable[int], continuation: Sequence[int]) -> float:
    """Sum of per-token conditional log-probabilities of ``continuation``.

    One forward pass per continuation token. A zero-probability token
    contributes :data:`LOG_ZERO`, so any result ``<= LOG_ZERO`` means the
    continuation is impossible under ``model``.
    """
    if len(continuation) == 0:
        raise ValueError("continuation must be non-empty")
    context = list(prefix)
    total = 0.0
    for tok in continuation:
        dist = model.next_distribution(context)
        total += safe_log(float(dist[tok]))
        if tok == model.eos:
            break
        context.append(tok)
    return total


def perplexity(model: LanguageModel, corpus: Sequence[Sequence[int]]) -> float:
    """``exp(-total logprob / total tokens)``; ``inf`` if any token has zero probability."""
    total_logp = 0.0
    n_tokens = 0
    for seq in corpus:
        if len(seq) == 0:
            raise ValueError("corpus sequences must be non-empty")
        lp = sequence_logprob(model, (), seq)
        if is_log_zero(lp):
            return math.inf
        total_logp += lp
        n_tokens += len(seq)
    return math.exp(-total_logp / n_tokens)


class TableModel(LanguageModel):
    """Lookup-table model of context order ``m``.

    The distribution for a prefix is the table entry for its longest suffix
    (at most ``m`` tokens) present in the table, falling back to ``fallback``.
    """

    def __init__(
        self,
        vocab_size: int,
        eos: int | None,
        order: int,
        fallback: Sequence[float],
        table: dict[Sequence[int], Sequence[float]] | None = None,
    ):
        super().__init__(vocab_size, eos)
        if order < 0:
            raise ValidationError("order must be >= 0")
        self.order = int(order)
        self._raw_fallback = [float(x) for x in fallback]
        self.fallback = _normalized(validate_distribution(self._raw_fallback, self.vocab_size, SPEC_TOL))
        self._raw_table: dict[TokenSeq, list[float]] = {}
        self.table: dict[TokenSeq, np.ndarray] = {}
        for ctx, probs in (table or {}).items():
            ctx = tuple(int(t) for t in ctx)
            if len(ctx) > self.order:
                raise ValidationError(f"context {list(ctx)} longer than order {self.order}")
            if any(not 0 <= t < self.vocab_size for t in ctx):
                raise ValidationError(f"context {list(ctx)} has out-of-vocabulary ids")
            self._raw_table[ctx] = [float(x) for x in probs]
            try:
                self.table[ctx] = _normalized(validate_distribution(probs, self.vocab_size, SPEC_TOL))
            except ValidationError as exc:
                raise ValidationError(f"context {list(ctx)}: {exc}") from None

    def _compute(self, prefix: TokenSeq) -> np.ndarray:
        for n in range(min(self.order, len(prefix)), -1, -1):
            ctx = prefix[len(prefix) - n:] if n else ()
            hit = self.table.get(ctx)
            if hit is not None:
                return hit
        return self.fallback

    def to_spec(self) -> dict[str, Any]:
        return {
            "type": "table",
            "vocab_size": self.vocab_size,
            "eos": self.eos,
            "order": self.order,
            "fallback": list(self._raw_fallback),
            "table": [{"context": list(ctx), "probs": list(p)} for ctx, p in self._raw_table.items()],
        }

    @classmethod
    def uniform(cls, vocab_size: int, eos: int | None = None) -> TableModel:
        return cls(vocab_size, eos, 0, [1.0 / vocab_size] * vocab_size)


def _normalized(arr: np.ndarray) -> np.ndarray:
    out = arr / arr.sum()
    out.setflags(write=False)
    return out


# splitmix64 constants
_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def splitmix64(seed: int) -> Iterable[int]:
    """Infinite splitmix64 stream of 64-bit integers."""
    state = seed & _MASK64
    while True:
        state = (state + _GOLDEN) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


def splitmix_uniforms(seed: int, n: int) -> np.ndarray:
    """``n`` floats in [-1, 1) from the top 53 bits of splitmix64 outputs."""
    stream = splitmix64(seed)
    return np.array([((next(stream) >> 11) * 2.0**-53) * 2.0 - 1.0 for _ in range(n)])


class SoftmaxModel(LanguageModel):
    """One-hidden-layer softmax model with deterministic weights.

    Weight generation: a single splitmix64 stream seeded with ``seed`` fills,
    in order and row-major, the position embeddings ``E`` (shape
    ``order x vocab_size x embed_dim``; position 0 is the most recent token),
    the hidden bias ``b`` (``embed_dim``), the output matrix ``U``
    (``embed_dim x vocab_size``) and the output bias ``c`` (``vocab_size``).
    Each 64-bit output ``z`` maps to ``(z >> 11) * 2**-53 * 2 - 1``.

    For prefix ``x``: ``h = tanh(b + sum_j E[j, x[-1-j]])`` over the last
    ``min(order, len(x))`` tokens, logits ``(h @ U + c) / temperature``.
    """

    def __init__(
        self,
        vocab_size: int,
        eos: int | None,
        seed: int,
        embed_dim: int = 4,
        temperature: float = 1.0,
        order: int = 2,
    ):
        super().__init__(vocab_size, eos)
        if embed_dim < 1:
            raise ValidationError("embed_dim must be >= 1")
        if not temperature > 0:
            raise ValidationError("temperature must be > 0")
        if order < 0:
            raise ValidationError("order must be >= 0")
        self.seed = int(seed)
        self.embed_dim = int(embed_dim)
        self.temperature = float(temperature)
        self.order = int(order)
        v, d, m = self.vocab_size, self.embed_dim, self.order
        w = splitmix_uniforms(self.seed, m * v * d + d + d * v + v)
        i = 0
        self.embed = w[i:i + m * v * d].reshape(m, v, d)
        i += m * v * d
        self.hidden_bias = w[i:i + d]
        i += d
        self.out_weight = w[i:i + d * v].reshape(d, v)
        i += d * v
        self.out_bias = w[i:i + v]

    def _compute(self, prefix: TokenSeq) -> np.ndarray:
        pre = self.hidden_bias.copy()
        for j in range(min(self.order, len(prefix))):
            pre += self.embed[j, prefix[-1 - j]]
        h = np.tanh(pre)
        logits = (h @ self.out_weight + self.out_bias) / self.temperature
        z = np.exp(logits - logits.max())
        return z / z.sum()

    def distribution(self, prefix: Iterable[int]) -> np.ndarray:
        prefix = self.check_prefix(prefix)
        # only the last `order` tokens matter; share cache entries
        return super().distribution(prefix[-self.order:] if self.order else ())

    def to_spec(self) -> dict[str, Any]:
        return {
            "type": "softmax",
            "vocab_size": self.vocab_size,
            "eos": self.eos,
            "seed": self.seed,
            "embed_dim": self.embed_dim,
            "temperature": self.temperature,
            "order": self.order,
        }


class InterpolatedModel(LanguageModel):
    """``(1 - weight) * base + weight * uniform``.

    ``weight`` is the divergence knob: 0 reproduces ``base`` bit for bit,
    1 is the uniform model. Evaluating this model does not touch the base
    model's counter.
    """

    def __init__(self, base: LanguageModel, weight: float):
        super().__init__(base.vocab_size, base.eos)
        if not 0.0 <= weight <= 1.0:
            raise ValidationError("interpolation weight must lie in [0, 1]")
        self.base = base
        self.weight = float(weight)

    def _compute(self, prefix: TokenSeq) -> np.ndarray:
        p = self.base.distribution(prefix)
        if self.weight == 0.0:
            return p
        return (1.0 - self.weight) * p + self.weight / self.vocab_size

    def to_spec(self) -> dict[str, Any]:
        return {"type": "interpolated", "weight": self.weight, "base": self.base.to_spec()}


def generate_model(spec: dict[str, Any]) -> LanguageModel:
    """Build a model from its JSON description (see module docstring)."""
    if not isinstance(spec, dict):
        raise ValidationError("model description must be a JSON object")
    kind = spec.get("type")
    try:
        if kind == "table":
            table = {}
            for row in spec.get("table", []):
                ctx = tuple(row["context"])
                if ctx in table:
                    raise ValidationError(f"duplicate context {list(ctx)}")
                table[ctx] = row["probs"]
            return TableModel(spec["vocab_size"], spec.get("eos"), spec.get("order", 0), spec["fallback"], table)
        if kind == "softmax":
            return SoftmaxModel(
                spec["vocab_size"],
                spec.get("eos"),
                spec["seed"],
                spec.get("embed_dim", 4),
                spec.get("temperature", 1.0),
                spec.get("order", 2),
            )
        if kind == "interpolated":
            return InterpolatedModel(generate_model(spec["base"]), spec["weight"])
    except KeyError as exc:
        raise ValidationError(f"{kind} model description missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed {kind} model description: {exc}") from None
    raise ValidationError(f"unknown model type {kind!r}")


def load_model(path: str | Path) -> LanguageModel:
    try:
        spec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    return generate_model(spec)


def save_model(model: LanguageModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_spec(), indent=2) + "\n")


def random_table_model(
    vocab_size: int,
    seed: int,
    order: int = 1,
    eos: int | None = None,
    concentration: float = 1.0,
    point_mass: bool = False,
) -> TableModel:
    """Table model with a Dirichlet row for every context of length ``order``.

    With ``point_mass`` every row is a one-hot vector, giving a deterministic
    chain. Rows are rounded to 12 decimals so the JSON form is exact.
    """
    rng = np.random.default_rng(seed)

    def row() -> list[float]:
        if point_mass:
            out = [0.0] * vocab_size
            out[int(rng.integers(vocab_size))] = 1.0
            return out
        p = rng.dirichlet([concentration] * vocab_size)
        p = np.round(p, 12)
        p[int(np.argmax(p))] += 1.0 - p.sum()
        return [float(x) for x in p]

    fallback = row()
    table: dict[TokenSeq, list[float]] = {}
    contexts: list[TokenSeq] = [()]
    for _ in range(order):
        contexts = [c + (t,) for c in contexts for t in range(vocab_size) if t != eos]
    if order > 0:
        for ctx in contexts:
            table[ctx] = row()
    return TableModel(vocab_size, eos, order, fallback, table)


def sample_sequence(
    model: LanguageModel,
    prefix: Sequence[int],
    length: int,
    rng: RandomSource | np.random.Generator | int | None,
) -> list[int]:
    """Ancestral sample of up to ``length`` tokens; stops after EOS."""
    source = as_source(rng)
    context = list(prefix)
    out: list[int] = []
    for _ in range(length):
        tok = source.token(model.next_distribution(context))
        out.append(tok)
        if tok == model.eos:
            break
        context.append(tok)
    return out


def read_corpus(path: str | Path) -> list[list[int]]:
    """One whitespace-separated token-id sequence per non-blank line."""
    corpus = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            corpus.append([int(t) for t in line.split()])
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: non-integer token") from None
    return corpus


def write_corpus(corpus: Iterable[Sequence[int]], path: str | Path) -> None:
    Path(path).write_text("".join(" ".join(str(t) for t in seq) + "\n" for seq in corpus))
