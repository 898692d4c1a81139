"""Corpus ingestion: messages, reply edges, embeddings, sentiment scores, splits.

File formats (also documented in the README):

* messages: JSON lines, one object per message with keys ``node_id``,
  ``user_id``, ``school``, ``year`` and optional ``text`` / ``label``.
* edges: headerless 2-column CSV ``replier_id,target_id`` in the original
  (pre-densification) id space.
* embeddings: binary container, magic ``GSEM``, little-endian u32 ``n`` and
  ``d``, then ``n*d`` little-endian float64 values row-major.  A plain CSV
  with n rows and d columns is accepted as a fallback.
* scores: 3-column CSV ``negative,neutral,positive`` per node (optional
  header row), each row a probability triple summing to 1 within 1e-4.

Splits are drawn with SplitMix64 + Fisher-Yates so that the index sets are
bit-reproducible across platforms and implementations; the exact procedure
is part of the file-format contract (see README and `make_splits`).
"""

import csv
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import InputError
from .validation import check_embeddings

GSEM_MAGIC = b"GSEM"

SCORE_SUM_TOL = 1e-4


class SentimentLabel(Enum):
    NEGATIVE = "Negative"
    NON_NEGATIVE = "NonNegative"

    @classmethod
    def from_token(cls, token):
        token = str(token).strip()
        if token == "Negative":
            return cls.NEGATIVE
        if token in ("NonNegative", "non-Negative", "Non-Negative"):
            return cls.NON_NEGATIVE
        raise InputError(f"unknown sentiment label token {token!r}")

    def to_binary(self):
        """1 for non-negative, 0 for negative (the y coding used package-wide)."""
        return 1 if self is SentimentLabel.NON_NEGATIVE else 0


class School(Enum):
    """The eight study schools with their fixed group-level covariates."""

    UCLA = ("UCLA", 0, 0, 0)
    UCSD = ("UCSD", 0, 0, 1)
    UCB = ("UCB", 0, 1, 0)
    UMICH = ("UMich", 0, 1, 1)
    HARVARD = ("Harvard", 1, 0, 0)
    COLUMBIA = ("Columbia", 1, 0, 1)
    DARTMOUTH = ("Dartmouth", 1, 1, 0)
    ND = ("ND", 1, 1, 1)

    def __init__(self, token, type_private, location_small, in_person_2020):
        self.token = token
        self.type_private = type_private
        self.location_small = location_small
        self.in_person_2020 = in_person_2020

    @classmethod
    def from_token(cls, token):
        token = str(token).strip()
        for school in cls:
            if school.token == token:
                return school
        raise InputError(f"unknown school token {token!r}")


VALID_YEARS = (2019, 2020)


@dataclass(frozen=True)
class Message:
    node_id: int
    user_id: int
    school: School
    year: int
    text: str | None = None
    gold_label: SentimentLabel | None = None


def _parse_message(obj, line_no):
    try:
        orig_id = int(obj["node_id"])
        user_id = int(obj["user_id"])
        school = School.from_token(obj["school"])
        year = int(obj["year"])
    except KeyError as exc:
        raise InputError(f"messages line {line_no}: missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        raise InputError(f"messages line {line_no}: {exc}") from None
    if year not in VALID_YEARS:
        raise InputError(f"messages line {line_no}: unknown year {year}")
    label = obj.get("label")
    gold = SentimentLabel.from_token(label) if label is not None else None
    text = obj.get("text")
    if text is not None:
        text = str(text)
    return orig_id, user_id, school, year, text, gold


def load_messages(path):
    """Load a JSON-lines message file.

    Returns ``(messages, id_map)``: messages in file order with node ids
    re-densified to 0..n-1, and the original-id -> dense-id mapping.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"messages file not found: {path}")
    messages = []
    id_map = {}
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"messages line {line_no}: malformed JSON ({exc.msg})") from None
            orig_id, user_id, school, year, text, gold = _parse_message(obj, line_no)
            if orig_id in id_map:
                raise InputError(f"messages line {line_no}: duplicate node_id {orig_id}")
            dense = len(id_map)
            id_map[orig_id] = dense
            messages.append(Message(dense, user_id, school, year, text, gold))
    return messages, id_map


def write_messages(path, messages, id_map=None):
    """Write messages as JSON lines (inverse of `load_messages`)."""
    inverse = None
    if id_map is not None:
        inverse = {dense: orig for orig, dense in id_map.items()}
    with Path(path).open("w", encoding="utf-8") as fh:
        for msg in messages:
            obj = {
                "node_id": inverse[msg.node_id] if inverse else msg.node_id,
                "user_id": msg.user_id,
                "school": msg.school.token,
                "year": msg.year,
            }
            if msg.text is not None:
                obj["text"] = msg.text
            if msg.gold_label is not None:
                obj["label"] = msg.gold_label.value
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def load_edges(path, id_map):
    """Load reply edges (replier_id, target_id) mapped into dense node space.

    Duplicate rows are preserved; deduplication happens in `graph.build_graph`.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"edges file not found: {path}")
    edges = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise InputError(f"edges line {line_no}: expected 2 columns, got {len(row)}")
            try:
                replier, target = int(row[0]), int(row[1])
            except ValueError:
                raise InputError(f"edges line {line_no}: non-integer id") from None
            try:
                edges.append((id_map[replier], id_map[target]))
            except KeyError as exc:
                raise InputError(f"edges line {line_no}: unknown node id {exc}") from None
    return edges


def write_edges(path, edges, id_map=None):
    inverse = None
    if id_map is not None:
        inverse = {dense: orig for orig, dense in id_map.items()}
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        for a, b in edges:
            if inverse:
                a, b = inverse[a], inverse[b]
            writer.writerow([a, b])


def load_embeddings(path, n=None, d=None):
    """Load an embedding matrix from a GSEM binary file (or CSV fallback).

    ``n`` / ``d``, when given, are cross-checked against the file header.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"embeddings file not found: {path}")
    with path.open("rb") as fh:
        magic = fh.read(4)
        if magic == GSEM_MAGIC:
            header = fh.read(8)
            if len(header) != 8:
                raise InputError(f"{path}: truncated GSEM header")
            file_n, file_d = struct.unpack("<II", header)
            payload = fh.read()
            expected = 8 * file_n * file_d
            if len(payload) != expected:
                raise InputError(
                    f"{path}: GSEM payload holds {len(payload) // 8} floats, "
                    f"header announces {file_n * file_d}"
                )
            values = np.frombuffer(payload, dtype="<f8").reshape(file_n, file_d)
        else:
            values = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
            file_n, file_d = values.shape
    if n is not None and file_n != n:
        raise InputError(f"{path}: expected {n} embedding rows, file has {file_n}")
    if d is not None and file_d != d:
        raise InputError(f"{path}: expected dimension {d}, file has {file_d}")
    return check_embeddings(values, n=file_n, d=file_d)


def write_embeddings(path, values):
    """Write an embedding matrix in the GSEM binary format."""
    values = check_embeddings(values)
    n, d = values.shape
    with Path(path).open("wb") as fh:
        fh.write(GSEM_MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_scores(path, n=None):
    """Load the 3-column (negative, neutral, positive) score table."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"scores file not found: {path}")
    rows = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if line_no == 1 and not _is_number(row[0]):
                continue  # optional header row
            if len(row) != 3:
                raise InputError(f"scores line {line_no}: expected 3 columns, got {len(row)}")
            try:
                triple = [float(v) for v in row]
            except ValueError:
                raise InputError(f"scores line {line_no}: non-numeric value") from None
            rows.append(triple)
    scores = np.asarray(rows, dtype=np.float64)
    if scores.size == 0:
        scores = scores.reshape(0, 3)
    return validate_scores(scores, n=n)


def _is_number(token):
    try:
        float(token)
        return True
    except ValueError:
        return False


def validate_scores(scores, n=None):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != 3:
        raise InputError("scores: expected an (n, 3) table")
    if n is not None and scores.shape[0] != n:
        raise InputError(f"scores: expected {n} rows, got {scores.shape[0]}")
    if scores.size:
        if not np.all(np.isfinite(scores)):
            raise InputError("scores: non-finite entry")
        if scores.min() < 0:
            bad = int(np.argwhere(scores < 0)[0][0])
            raise InputError(f"scores row {bad}: negative probability")
        sums = scores.sum(axis=1)
        off = np.abs(sums - 1.0) > SCORE_SUM_TOL
        if off.any():
            bad = int(np.argmax(off))
            raise InputError(f"scores row {bad}: probabilities sum to {sums[bad]:.6f}, not 1")
    return scores


def write_scores(path, scores):
    scores = validate_scores(scores)
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["negative", "neutral", "positive"])
        for row in scores:
            writer.writerow([repr(float(v)) for v in row])


def collapse_scores(scores):
    """Non-negative probability per node: neutral + positive, clamped to [0, 1]."""
    scores = validate_scores(scores)
    return np.clip(scores[:, 1] + scores[:, 2], 0.0, 1.0)


# ---------------------------------------------------------------------------
# Deterministic splits


class SplitMix64:
    """SplitMix64 PRNG (Steele et al.); the split-reproducibility contract.

    The 64-bit output stream for a given seed is fixed by construction, so
    split index sets replicate bit-for-bit across platforms and languages.
    """

    MASK = (1 << 64) - 1

    def __init__(self, seed):
        self._state = int(seed) & self.MASK

    def next_u64(self):
        self._state = (self._state + 0x9E3779B97F4A7C15) & self.MASK
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self.MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self.MASK
        return z ^ (z >> 31)

    def next_below(self, bound):
        # plain modulo; the bias is immaterial here and keeps the contract simple
        return self.next_u64() % bound

    def shuffle(self, items):
        """In-place Fisher-Yates, descending index order."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


@dataclass(frozen=True)
class SplitSpec:
    """Stratified per-class sampling plan for the three pipeline index sets.

    ``test`` and ``stack_train`` map stratum keys to per-class counts; a key
    is ``(school, year)`` or ``(school, None)`` for a years-combined pool.
    ``gat_train`` counts are drawn from the ``train_school`` combined pool.
    """

    seed: int
    gat_train: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)
    stack_train: dict = field(default_factory=dict)
    train_school: School = School.DARTMOUTH
    train_takes_all_2020: bool = False

    @classmethod
    def paper_default(cls, seed, gat_train_nonneg=601, gat_train_neg=94,
                      test_per_class=25, stack_per_class=25,
                      train_school=School.DARTMOUTH):
        """The study's plan: Dartmouth-pool training, 25+25 per test/stack cell.

        All labeled train-school year-2020 cases go to gat_train, so the
        train-school test cases come from 2019 only.
        """
        strata = [
            (school, year)
            for school in School
            if school is not train_school
            for year in VALID_YEARS
        ]
        strata.append((train_school, None))
        per_class_test = {
            key: {SentimentLabel.NON_NEGATIVE: test_per_class,
                  SentimentLabel.NEGATIVE: test_per_class}
            for key in strata
        }
        per_class_stack = {
            key: {SentimentLabel.NON_NEGATIVE: stack_per_class,
                  SentimentLabel.NEGATIVE: stack_per_class}
            for key in strata
        }
        return cls(
            seed=seed,
            gat_train={SentimentLabel.NON_NEGATIVE: gat_train_nonneg,
                       SentimentLabel.NEGATIVE: gat_train_neg},
            test=per_class_test,
            stack_train=per_class_stack,
            train_school=train_school,
            train_takes_all_2020=True,
        )


@dataclass(frozen=True)
class Splits:
    gat_train: np.ndarray
    stack_train: np.ndarray
    test: np.ndarray


def _stratum_name(key):
    school, year = key
    return f"{school.token}/{year if year is not None else 'combined'}"


def _labeled_pools(messages):
    pools = {}
    for msg in messages:
        if msg.gold_label is None:
            continue
        pools.setdefault((msg.school, msg.year, msg.gold_label), []).append(msg.node_id)
    return pools


def _pool_ids(pools, school, year, label, taken):
    years = VALID_YEARS if year is None else (year,)
    ids = []
    for y in years:
        ids.extend(pools.get((school, y, label), ()))
    return sorted(i for i in ids if i not in taken)


def _draw(rng, available, count, stratum, label, taken, out):
    if count > len(available):
        raise InputError(
            f"split stratum {stratum} ({label.value}): requested {count} cases, "
            f"only {len(available)} available"
        )
    rng.shuffle(available)
    chosen = available[:count]
    taken.update(chosen)
    out.extend(chosen)


def make_splits(messages, spec):
    """Draw the gat_train / test / stack_train node-id sets for `spec`.

    Deterministic procedure (one SplitMix64 stream seeded with ``spec.seed``,
    consumed in this exact order):

    1. gat_train, class order [NonNegative, Negative], from the train-school
       years-combined pool.  With ``train_takes_all_2020`` the year-2020
       members are all taken first (no randomness) and only the remainder is
       drawn from 2019 by Fisher-Yates shuffle of the ascending id list.
    2. test strata in ``spec.test`` insertion order, same class order,
       shuffling the ascending list of still-unassigned ids.
    3. stack_train strata likewise.
    """
    pools = _labeled_pools(messages)
    rng = SplitMix64(spec.seed)
    taken = set()
    class_order = (SentimentLabel.NON_NEGATIVE, SentimentLabel.NEGATIVE)

    gat_train = []
    for label in class_order:
        count = spec.gat_train.get(label, 0)
        stratum = _stratum_name((spec.train_school, None))
        if spec.train_takes_all_2020:
            fixed = _pool_ids(pools, spec.train_school, 2020, label, taken)
            if len(fixed) > count:
                raise InputError(
                    f"split stratum {stratum} ({label.value}): gat_train count {count} "
                    f"is below the {len(fixed)} mandatory year-2020 cases"
                )
            taken.update(fixed)
            gat_train.extend(fixed)
            rest = _pool_ids(pools, spec.train_school, 2019, label, taken)
            _draw(rng, rest, count - len(fixed), stratum, label, taken, gat_train)
        else:
            available = _pool_ids(pools, spec.train_school, None, label, taken)
            _draw(rng, available, count, stratum, label, taken, gat_train)

    test = []
    for key, counts in spec.test.items():
        school, year = key
        for label in class_order:
            available = _pool_ids(pools, school, year, label, taken)
            _draw(rng, available, counts.get(label, 0), _stratum_name(key), label, taken, test)

    stack_train = []
    for key, counts in spec.stack_train.items():
        school, year = key
        for label in class_order:
            available = _pool_ids(pools, school, year, label, taken)
            _draw(rng, available, counts.get(label, 0), _stratum_name(key), label, taken,
                  stack_train)

    return Splits(
        gat_train=np.array(sorted(gat_train), dtype=np.int64),
        stack_train=np.array(sorted(stack_train), dtype=np.int64),
        test=np.array(sorted(test), dtype=np.int64),
    )


def gold_label_vector(messages):
    """Dense y vector: 1 non-negative, 0 negative, -1 unlabeled."""
    y = np.full(len(messages), -1, dtype=np.int64)
    for msg in messages:
        if msg.gold_label is not None:
            y[msg.node_id] = msg.gold_label.to_binary()
    return y


def labeled_counts(messages):
    """Per (school, year) counts of labeled cases: {key: {label: count}}."""
    counts = {}
    for msg in messages:
        if msg.gold_label is None:
            continue
        cell = counts.setdefault((msg.school, msg.year), {
            SentimentLabel.NON_NEGATIVE: 0, SentimentLabel.NEGATIVE: 0})
        cell[msg.gold_label] += 1
    return counts
