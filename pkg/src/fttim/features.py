"""Feature ingestion, normalization, synthetic task generation, and episodic sampling.

Feature banks live on disk as a small text table: one header line
``d=<dim> n=<rows>`` followed by ``n`` lines of ``<class_id>,<f1>,...,<fd>``
with ``.``-decimal floats, LF line endings, UTF-8, no padding. Floats are
written with the shortest round-tripping decimal form, so
``write_feature_bank(load_feature_bank(path)) == path`` byte for byte on
canonical files.

Everything downstream consumes :class:`Episode` objects produced here. An
episode's query labels are hidden: solvers read their inputs through
:meth:`Episode.solver_inputs`, which exposes no query labels, and only the
scoring layer touches ``query_hidden_labels``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

UNIT_NORM_TOL = 1e-9

_HEADER_RE = re.compile(r"^d=(\d+) n=(\d+)$")


class FeatureFormatError(ValueError):
    """A feature-table file violates the on-disk format."""


class DegenerateVectorError(ValueError):
    """An operation would have to normalize a zero vector."""


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit Euclidean length, preserving its direction.

    Raises:
        ValueError: if ``v`` has non-finite components.
        DegenerateVectorError: if ``v`` is the zero vector.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite components")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateVectorError("cannot normalize a zero vector")
    return v / norm


def l2_normalize_rows(X: np.ndarray) -> np.ndarray:
    """Row-wise unit normalization of a 2-D array."""
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("matrix has non-finite entries")
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateVectorError(f"row {int(zero[0])} has zero norm")
    return X / norms[:, None]


@dataclass
class FeatureBank:
    """In-memory store of (class_id, vector) embedding records.

    Treated as immutable after construction; safe to share across episode
    workers. ``class_index`` maps each class id to the indices of its records.
    """

    dim: int
    class_ids: np.ndarray
    vectors: np.ndarray
    class_index: dict[int, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != self.dim:
            raise ValueError(
                f"vectors must be (n, {self.dim}), got {self.vectors.shape}"
            )
        if self.class_ids.shape != (self.vectors.shape[0],):
            raise ValueError("class_ids length must match number of vectors")
        if np.any(self.class_ids < 0):
            raise ValueError("class ids must be non-negative")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("bank vectors must be finite")
        self.class_index = {
            int(cid): np.flatnonzero(self.class_ids == cid)
            for cid in np.unique(self.class_ids)
        }

    @property
    def num_records(self) -> int:
        return self.vectors.shape[0]

    def classes(self) -> list[int]:
        return sorted(self.class_index)


def load_feature_bank(path: str | Path, format: str = "csv") -> FeatureBank:
    """Parse a feature-table file into a :class:`FeatureBank`.

    Every format violation is reported with the 1-based line number of the
    offending line.
    """
    if format != "csv":
        raise ValueError(f"unsupported format {format!r}")
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if text == "":
        raise FeatureFormatError(f"{path}: empty file (line 1)")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()  # trailing LF
    header = _HEADER_RE.match(lines[0])
    if header is None:
        raise FeatureFormatError(
            f"{path}: line 1: malformed header {lines[0]!r}, expected 'd=<int> n=<int>'"
        )
    dim, n = int(header.group(1)), int(header.group(2))
    if dim < 1:
        raise FeatureFormatError(f"{path}: line 1: dimension must be positive")
    if len(lines) - 1 != n:
        raise FeatureFormatError(
            f"{path}: header declares n={n} rows but file has {len(lines) - 1} "
            f"(line {min(len(lines), n + 1) + 1})"
        )
    class_ids = np.empty(n, dtype=np.int64)
    vectors = np.empty((n, dim), dtype=np.float64)
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        parts = line.split(",")
        if len(parts) != dim + 1:
            raise FeatureFormatError(
                f"{path}: line {lineno}: expected {dim + 1} fields, got {len(parts)}"
            )
        try:
            cid = int(parts[0])
        except ValueError:
            raise FeatureFormatError(
                f"{path}: line {lineno}: class id {parts[0]!r} is not an integer"
            ) from None
        if cid < 0:
            raise FeatureFormatError(
                f"{path}: line {lineno}: class id must be non-negative"
            )
        try:
            row = [float(p) for p in parts[1:]]
        except ValueError:
            raise FeatureFormatError(
                f"{path}: line {lineno}: non-numeric feature field"
            ) from None
        if not all(math.isfinite(x) for x in row):
            raise FeatureFormatError(
                f"{path}: line {lineno}: non-finite feature value"
            )
        class_ids[i] = cid
        vectors[i] = row
    return FeatureBank(dim=dim, class_ids=class_ids, vectors=vectors)


def write_feature_bank(bank: FeatureBank, path: str | Path) -> None:
    """Serialize a bank in the canonical feature-table form (LF, UTF-8)."""
    out = [f"d={bank.dim} n={bank.num_records}"]
    for cid, vec in zip(bank.class_ids, bank.vectors):
        out.append(f"{int(cid)}," + ",".join(repr(float(x)) for x in vec))
    Path(path).write_bytes(("\n".join(out) + "\n").encode("utf-8"))


@dataclass
class Episode:
    """One few-shot task: labeled support, unlabeled queries, optional held-out split.

    Hidden labels exist for scoring only. Solver code must take its
    inputs from :meth:`solver_inputs`.
    """

    num_classes: int
    dim: int
    support_labels: np.ndarray
    support_vectors: np.ndarray
    query_vectors: np.ndarray
    query_hidden_labels: np.ndarray
    heldout_vectors: np.ndarray | None = None
    heldout_hidden_labels: np.ndarray | None = None

    def solver_inputs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Label-stripped solver view: (support_vectors, support_labels, query_vectors)."""
        return self.support_vectors, self.support_labels, self.query_vectors

    @property
    def num_queries(self) -> int:
        return self.query_vectors.shape[0]

    def validate(self) -> None:
        """Check the episode invariants (label coverage, unit norms, shapes)."""
        C = self.num_classes
        if sorted(set(int(c) for c in self.support_labels)) != list(range(C)):
            raise ValueError("support labels must cover 0..C-1")
        for name, arr in (
            ("support", self.support_vectors),
            ("query", self.query_vectors),
            ("heldout", self.heldout_vectors),
        ):
            if arr is None:
                continue
            if arr.shape[1] != self.dim:
                raise ValueError(f"{name} vectors have wrong dimension")
            norms = np.linalg.norm(arr, axis=1)
            if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
                raise ValueError(f"{name} vectors are not unit-normalized")
        for labels, n in (
            (self.query_hidden_labels, self.query_vectors.shape[0]),
            (self.heldout_hidden_labels,
             None if self.heldout_vectors is None else self.heldout_vectors.shape[0]),
        ):
            if labels is None:
                continue
            if len(labels) != n or np.any(labels < 0) or np.any(labels >= C):
                raise ValueError("hidden labels out of range")


def sample_episode(
    bank: FeatureBank,
    num_classes: int,
    queries_per_class: int,
    heldout_per_class: int,
    seed: int,
) -> Episode:
    """Draw a one-shot episode from a bank without replacement.

    Chosen class ids are remapped to labels 0..C-1 by ascending original id,
    and all vectors are unit-normalized. The same (bank, parameters, seed)
    always yields the same episode.
    """
    need = 1 + queries_per_class + heldout_per_class
    eligible = [cid for cid in bank.classes() if bank.class_index[cid].size >= need]
    if len(eligible) < num_classes:
        raise ValueError(
            f"need {num_classes} classes with >= {need} records each, "
            f"bank has {len(eligible)} eligible of {len(bank.classes())} total"
        )
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(np.asarray(eligible, dtype=np.int64),
                                size=num_classes, replace=False))
    support, squery, sheld = [], [], []
    for cid in chosen:
        picked = rng.choice(bank.class_index[int(cid)], size=need, replace=False)
        support.append(picked[0])
        squery.extend(picked[1:1 + queries_per_class])
        sheld.extend(picked[1 + queries_per_class:])
    support = np.asarray(support)
    squery = np.asarray(squery, dtype=np.int64)
    labels_of = {int(cid): lab for lab, cid in enumerate(chosen)}
    q_labels = np.asarray([labels_of[int(bank.class_ids[i])] for i in squery])
    episode = Episode(
        num_classes=num_classes,
        dim=bank.dim,
        support_labels=np.arange(num_classes, dtype=np.int64),
        support_vectors=l2_normalize_rows(bank.vectors[support]),
        query_vectors=l2_normalize_rows(bank.vectors[squery]),
        query_hidden_labels=q_labels,
    )
    if heldout_per_class > 0:
        sheld = np.asarray(sheld, dtype=np.int64)
        episode.heldout_vectors = l2_normalize_rows(bank.vectors[sheld])
        episode.heldout_hidden_labels = np.asarray(
            [labels_of[int(bank.class_ids[i])] for i in sheld]
        )
    episode.validate()
    return episode


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Parameters of a generated one-shot task.

    Class means sit at scaled one-hot directions inside the first
    ``relevant_dims`` coordinates; all remaining dimensions carry shared
    isotropic noise only. Identical specs produce bit-identical episodes.
    """

    num_classes: int
    dim: int
    intra_class_stddev: float
    inter_class_separation: float
    relevant_dims: int
    queries_per_class: int
    heldout_per_class: int = 0
    seed: int = 0


def _synthetic_means(spec: SyntheticTaskSpec) -> np.ndarray:
    # pairwise distance between means is exactly inter_class_separation
    # when num_classes <= relevant_dims; extra classes reuse axes at
    # staggered radii.
    scale = spec.inter_class_separation / math.sqrt(2.0)
    means = np.zeros((spec.num_classes, spec.dim))
    for c in range(spec.num_classes):
        axis = c % spec.relevant_dims
        tier = 1 + c // spec.relevant_dims
        means[c, axis] = scale * tier
    return means


def generate_synthetic_episode(spec: SyntheticTaskSpec) -> Episode:
    """Build a reproducible synthetic episode from a :class:`SyntheticTaskSpec`."""
    if spec.relevant_dims < 1:
        raise ValueError("relevant_dims must be >= 1")
    if spec.relevant_dims > spec.dim:
        raise ValueError(
            f"relevant_dims ({spec.relevant_dims}) exceeds dim ({spec.dim})"
        )
    if spec.num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if spec.queries_per_class < 1:
        raise ValueError("queries_per_class must be >= 1")
    if spec.intra_class_stddev < 0 or spec.inter_class_separation < 0:
        raise ValueError("stddev and separation must be non-negative")
    rng = np.random.default_rng(spec.seed)
    means = _synthetic_means(spec)
    per_class = 1 + spec.queries_per_class + spec.heldout_per_class
    support, query, heldout, q_labels, h_labels = [], [], [], [], []
    for c in range(spec.num_classes):
        block = means[c] + spec.intra_class_stddev * rng.standard_normal(
            (per_class, spec.dim)
        )
        support.append(block[0])
        query.append(block[1:1 + spec.queries_per_class])
        q_labels.extend([c] * spec.queries_per_class)
        if spec.heldout_per_class:
            heldout.append(block[1 + spec.queries_per_class:])
            h_labels.extend([c] * spec.heldout_per_class)
    episode = Episode(
        num_classes=spec.num_classes,
        dim=spec.dim,
        support_labels=np.arange(spec.num_classes, dtype=np.int64),
        support_vectors=l2_normalize_rows(np.asarray(support)),
        query_vectors=l2_normalize_rows(np.vstack(query)),
        query_hidden_labels=np.asarray(q_labels, dtype=np.int64),
    )
    if spec.heldout_per_class:
        episode.heldout_vectors = l2_normalize_rows(np.vstack(heldout))
        episode.heldout_hidden_labels = np.asarray(h_labels, dtype=np.int64)
    episode.validate()
    return episode


def class_separation_ratio(vectors: np.ndarray, labels: np.ndarray) -> float:
    """Mean inter-class pairwise distance divided by mean intra-class distance.

    Larger is better separated. Requires at least one same-class pair.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    diffs = vectors[:, None, :] - vectors[None, :, :]
    dist = np.sqrt(np.sum(diffs * diffs, axis=2))
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(same, dtype=bool), k=1)
    intra = dist[same & upper]
    inter = dist[~same & upper]
    if intra.size == 0 or inter.size == 0:
        raise ValueError("need both intra-class and inter-class pairs")
    denom = float(np.mean(intra))
    if denom == 0.0:
        raise ValueError("intra-class distances are all zero")
    return float(np.mean(inter)) / denom
