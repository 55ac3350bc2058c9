"""Datasets, problem files, synthetic recipes and persistence of models and reports."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .consistency import DiscreteProblem, random_simplex
from .losses import check_cost
from .models import Model

MODEL_FORMAT = "abstention-model"
MODEL_FORMAT_VERSION = 1
REPORT_SCHEMA_VERSION = 1


class ChecksumError(ValueError):
    """Stored checksum does not match the file contents (corrupt or truncated file)."""


class FormatVersionError(ValueError):
    """File was written by a newer, unsupported format version."""


# --------------------------------------------------------------------------
# Tabular data
# --------------------------------------------------------------------------


@dataclass
class TabularDataset:
    """Feature matrix with 0-based integer labels.

    ``label_names[k]`` is the original label that was mapped to ``k``.
    """

    features: np.ndarray
    labels: np.ndarray
    n: int
    label_names: list = field(default_factory=list)
    feature_names: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.size:
            raise ValueError("features and labels disagree on the number of rows")
        if self.labels.size < 1:
            raise ValueError("a dataset needs at least one row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.n < 2 or np.any(self.labels < 0) or np.any(self.labels >= self.n):
            raise ValueError(f"labels must lie in [0, {self.n})")
        if not self.label_names:
            self.label_names = [str(k) for k in range(self.n)]

    @property
    def m(self) -> int:
        return self.labels.size

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def original_labels(self) -> list:
        return [self.label_names[k] for k in self.labels]


def _label_sort_key(values):
    try:
        return sorted(values, key=float)
    except ValueError:
        return sorted(values)


def load_csv(path, label_column: str, label_names: list | None = None) -> TabularDataset:
    """Read a headed CSV; every column except ``label_column`` is a feature.

    Labels are mapped to ``0..n-1`` in sorted order of their original
    values, unless ``label_names`` fixes the mapping, in which case a label
    outside it is an error.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: missing header row") from None
        if label_column not in header:
            raise ValueError(f"{path}: no column named {label_column!r} (columns: {header})")
        li = header.index(label_column)
        feat_names = [h for i, h in enumerate(header) if i != li]
        rows, raw_labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            vals = []
            for i, cell in enumerate(row):
                if i == li:
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ValueError(f"{path}: row {lineno}, column {header[i]!r}: non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise ValueError(f"{path}: row {lineno}, column {header[i]!r}: value {cell!r} is not finite")
                vals.append(v)
            rows.append(vals)
            raw_labels.append((lineno, row[li].strip()))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    if label_names is None:
        label_names = _label_sort_key({lab for _, lab in raw_labels})
    index = {name: k for k, name in enumerate(label_names)}
    labels = []
    for lineno, lab in raw_labels:
        if lab not in index:
            raise ValueError(f"{path}: row {lineno}: label {lab!r} is not in the label mapping {label_names}")
        labels.append(index[lab])
    if len(label_names) < 2:
        raise ValueError(f"{path}: need at least two distinct labels")
    return TabularDataset(np.array(rows), np.array(labels), len(label_names), list(label_names), feat_names)


def save_csv(path, data: TabularDataset, label_column: str = "y"):
    names = data.feature_names or [f"f{i + 1}" for i in range(data.d)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names + [label_column])
        for x, lab in zip(data.features, data.original_labels()):
            w.writerow([repr(float(v)) for v in x] + [lab])


# --------------------------------------------------------------------------
# Problem files
# --------------------------------------------------------------------------


def _renormalize(v):
    # values already summing to 1 at working precision are kept bit-for-bit
    return v if abs(v.sum() - 1.0) <= 1e-12 else v / v.sum()


def parse_problem_spec(text: str, source: str = "<string>") -> DiscreteProblem:
    """Parse the line format ``n=<int> c=<real>`` then ``w p1 .. pn [| f1 .. fd]``."""
    header = None
    weights, probs, feats = [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if header is None:
            try:
                fields = dict(tok.split("=", 1) for tok in line.split())
                header = (int(fields["n"]), float(fields["c"]))
            except (KeyError, ValueError):
                raise ValueError(f"{source}:{lineno}: header must read 'n=<int> c=<real>'") from None
            if header[0] < 2:
                raise ValueError(f"{source}:{lineno}: n must be at least 2")
            continue
        left, _, right = line.partition("|")
        try:
            nums = [float(v) for v in left.split()]
            f = [float(v) for v in right.split()] if right.strip() else None
        except ValueError:
            raise ValueError(f"{source}:{lineno}: non-numeric entry") from None
        n = header[0]
        if len(nums) != n + 1:
            raise ValueError(f"{source}:{lineno}: expected a weight and {n} probabilities")
        p = np.array(nums[1:])
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"{source}:{lineno}: probabilities must be non-negative and sum to 1 (sum={p.sum():.12g})")
        if nums[0] <= 0:
            raise ValueError(f"{source}:{lineno}: atom weight must be positive")
        weights.append(nums[0])
        probs.append(_renormalize(p))
        feats.append(f)
    if header is None:
        raise ValueError(f"{source}: missing header line")
    if not weights:
        raise ValueError(f"{source}: no atoms")
    w = np.array(weights)
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"{source}: atom weights sum to {w.sum():.12g}, expected 1")
    check_cost(header[1])
    features = None
    if any(f is not None for f in feats):
        if any(f is None for f in feats) or len({len(f) for f in feats}) != 1:
            raise ValueError(f"{source}: feature vectors must be given for every atom with a common length")
        features = np.array(feats)
        if len({tuple(f) for f in feats}) != len(feats):
            raise ValueError(f"{source}: feature vectors must be distinct across atoms")
    return DiscreteProblem(_renormalize(w), np.array(probs), header[1], features)


def load_problem_spec(path) -> DiscreteProblem:
    path = Path(path)
    return parse_problem_spec(path.read_text(encoding="utf-8"), str(path))


def format_problem_spec(problem: DiscreteProblem) -> str:
    lines = [f"n={problem.n} c={problem.c!r}"]
    for i in range(problem.size):
        row = " ".join(repr(float(v)) for v in [problem.weights[i], *problem.probs[i]])
        if problem.features is not None:
            row += " | " + " ".join(repr(float(v)) for v in problem.features[i])
        lines.append(row)
    return "\n".join(lines) + "\n"


def save_problem_spec(path, problem: DiscreteProblem):
    Path(path).write_text(format_problem_spec(problem), encoding="utf-8")


# --------------------------------------------------------------------------
# Synthetic problems
# --------------------------------------------------------------------------

RECIPE_KINDS = ("separable_margin", "label_noise", "chow_stress")


@dataclass
class SyntheticRecipe:
    """Description of a synthetic discrete problem.

    ``margin`` is the geometric margin of the separable construction, also
    used as the clean base of ``label_noise``; ``rho`` is the label-noise
    rate; ``radius`` bounds the feature vectors of those two kinds.
    """

    kind: str
    n: int = 3
    d: int = 2
    c: float = 0.2
    margin: float = 0.5
    rho: float = 0.0
    atoms: int = 60
    seed: int = 0
    radius: float = 2.0

    def __post_init__(self):
        if self.kind not in RECIPE_KINDS:
            raise ValueError(f"recipe kind must be one of {RECIPE_KINDS}")
        if self.n < 2 or self.d < 1 or self.atoms < 1:
            raise ValueError("n >= 2, d >= 1 and atoms >= 1 are required")
        check_cost(self.c)
        if self.kind in ("separable_margin", "label_noise") and not self.margin > 0:
            raise ValueError("the separable construction needs a positive margin")
        if not (0.0 <= self.rho <= 0.5):
            raise ValueError("noise rate must lie in [0, 0.5]")


class Sampler:
    """Draws i.i.d. labeled samples from a discrete problem with features."""

    def __init__(self, problem: DiscreteProblem, seed: int = 0):
        if problem.features is None:
            raise ValueError("sampling needs feature vectors on the atoms")
        self.problem = problem
        self.seed = seed

    def sample(self, m: int, stream: int = 0) -> TabularDataset:
        if m < 1:
            raise ValueError("sample size must be positive")
        rng = np.random.default_rng([self.seed, stream])
        atoms = rng.choice(self.problem.size, size=m, p=self.problem.weights)
        cum = np.cumsum(self.problem.probs[atoms], axis=1)
        u = rng.uniform(size=(m, 1))
        labels = np.minimum((u >= cum).sum(axis=1), self.problem.n - 1)
        return TabularDataset(self.problem.features[atoms], labels, self.problem.n)


def pairwise_margin(W, b, X, y) -> float:
    """Smallest geometric pairwise margin of the linear rule ``argmax W x + b``."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scores = X @ W.T + b
    worst = math.inf
    for k in range(W.shape[0]):
        diff = scores[np.arange(len(y)), y] - scores[:, k]
        norms = np.linalg.norm(W[y] - W[k], axis=1)
        mask = y != k
        if np.any(mask):
            worst = min(worst, float(np.min(diff[mask] / norms[mask])))
    return worst


def _separable_points(recipe: SyntheticRecipe, rng):
    n, d, gamma = recipe.n, recipe.d, recipe.margin
    for _ in range(50):
        W = rng.normal(size=(n, d))
        W /= np.linalg.norm(W, axis=1, keepdims=True)
        b = rng.uniform(-0.1, 0.1, size=n)
        X, Y = [], []
        for _ in range(200):
            cand = rng.normal(size=(4 * recipe.atoms, d))
            cand *= (recipe.radius * rng.uniform(size=(len(cand), 1)) ** (1.0 / d)) / np.linalg.norm(
                cand, axis=1, keepdims=True
            )
            s = cand @ W.T + b
            y = np.argmax(s, axis=1)
            ok = np.ones(len(cand), dtype=bool)
            for k in range(n):
                nk = np.linalg.norm(W[y] - W[k], axis=1)
                with np.errstate(divide="ignore", invalid="ignore"):
                    m = (s[np.arange(len(y)), y] - s[:, k]) / nk
                ok &= (y == k) | (m >= gamma)
            X.extend(cand[ok])
            Y.extend(y[ok])
            if len(X) >= recipe.atoms * 3:
                break
        if len(X) < recipe.atoms:
            continue
        X, Y = np.array(X), np.array(Y)
        if len(set(Y.tolist())) < n:
            continue
        # round-robin over classes so that every class is present
        per = [list(np.flatnonzero(Y == k)) for k in range(n)]
        pick = []
        while len(pick) < recipe.atoms:
            for k in range(n):
                if per[k] and len(pick) < recipe.atoms:
                    pick.append(per[k].pop(0))
        X, Y = X[pick], Y[pick]
        if len(np.unique(X, axis=0)) < len(X):
            continue
        return X, Y, W, b
    raise ValueError(
        f"could not build a separable problem with margin {gamma} for n={n}, d={d}, "
        f"radius {recipe.radius}: the recipe looks infeasible"
    )


def _chow_stress(recipe: SyntheticRecipe, rng):
    n, c, A = recipe.n, recipe.c, recipe.atoms
    target = 1.0 - c
    probs = np.zeros((A, n))
    stressed = np.zeros(A, dtype=bool)
    stressed[rng.permutation(A)[: A // 2]] = True
    for i in range(A):
        for _ in range(10_000):
            if stressed[i]:
                delta = rng.uniform(0.01, 0.05) * rng.choice([-1.0, 1.0])
                top = target + delta
            else:
                top = rng.uniform(1.0 / n, 1.0)
                if abs(top - target) <= 0.05 + 1e-9:
                    continue
            if not (1.0 / n < top <= 1.0):
                continue
            rest = (1.0 - top) * random_simplex(rng, (), n - 1)
            if np.all(rest < top):
                break
        else:
            raise ValueError(f"cannot place atoms near 1 - c = {target} with n = {n}")
        k = rng.integers(n)
        probs[i] = np.insert(rest, k, top)
    X = rng.normal(size=(A, recipe.d))
    return X, probs, stressed


def generate(recipe: SyntheticRecipe):
    """Build the discrete problem of a recipe and an i.i.d. sampler for it.

    Returns ``(problem, sampler, info)``; ``info`` carries the margin
    certificate for the separable kinds and the stressed-atom mask for
    ``chow_stress``.
    """
    rng = np.random.default_rng(recipe.seed)
    info = {"recipe": dataclasses.asdict(recipe)}
    if recipe.kind == "chow_stress":
        X, probs, stressed = _chow_stress(recipe, rng)
        info["stressed"] = stressed
    else:
        X, Y, W, b = _separable_points(recipe, rng)
        cert = pairwise_margin(W, b, X, Y)
        if cert < recipe.margin - 1e-12:
            raise ValueError("margin certificate failed")
        info.update(separator_W=W, separator_b=b, certified_margin=cert, clean_labels=Y)
        probs = np.full((len(Y), recipe.n), recipe.rho / (recipe.n - 1))
        probs[np.arange(len(Y)), Y] = 1.0 - recipe.rho
    weights = np.full(recipe.atoms, 1.0 / recipe.atoms)
    problem = DiscreteProblem(weights, probs, recipe.c, X)
    return problem, Sampler(problem, recipe.seed), info


# --------------------------------------------------------------------------
# Models
# --------------------------------------------------------------------------


def _param_block(model: Model) -> str:
    lines = []
    for name in sorted(model.params):
        flat = np.ascontiguousarray(model.params[name]).reshape(-1)
        lines.append(name + " " + " ".join(repr(float(v)) for v in flat))
    return "\n".join(lines) + "\n"


def save_model(path, model: Model):
    """Write a JSON header line followed by the parameters in decimal text."""
    block = _param_block(model)
    header = {
        "format": MODEL_FORMAT,
        "format_version": MODEL_FORMAT_VERSION,
        "kind": model.kind,
        "in_dim": model.in_dim,
        "out_dim": model.out_dim,
        "clamp": model.clamp,
        "meta": model.meta,
        "shapes": {k: list(v.shape) for k, v in sorted(model.params.items())},
        "checksum": hashlib.sha256(block.encode()).hexdigest(),
    }
    Path(path).write_text(json.dumps(header, sort_keys=True) + "\n" + block, encoding="utf-8")


def load_model(path) -> Model:
    text = Path(path).read_text(encoding="utf-8")
    head, _, block = text.partition("\n")
    try:
        header = json.loads(head)
    except json.JSONDecodeError:
        raise ChecksumError(f"{path}: unreadable model header") from None
    if header.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a model file")
    version = header.get("format_version")
    if not isinstance(version, int) or version > MODEL_FORMAT_VERSION:
        raise FormatVersionError(
            f"{path}: format version {version} is newer than supported version {MODEL_FORMAT_VERSION}"
        )
    if hashlib.sha256(block.encode()).hexdigest() != header.get("checksum"):
        raise ChecksumError(f"{path}: parameter checksum mismatch (file truncated or modified)")
    params = {}
    for line in block.splitlines():
        name, *vals = line.split()
        shape = header["shapes"][name]
        params[name] = np.array([float(v) for v in vals], dtype=np.float64).reshape(shape)
    if set(params) != set(header["shapes"]):
        raise ChecksumError(f"{path}: parameter set does not match the header")
    return Model(header["kind"], header["in_dim"], header["out_dim"], params, header["clamp"], header["meta"])


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def _report_classes():
    from .consistency import ApproxGapRecord, BoundCheckReport, CalibrationCurve, GapReport
    from .finite_sample import CoverageRecord, RademacherEstimate
    from .models import Metrics

    return {
        cls.__name__: cls
        for cls in (
            ApproxGapRecord,
            BoundCheckReport,
            CalibrationCurve,
            CoverageRecord,
            GapReport,
            Metrics,
            RademacherEstimate,
            Table,
        )
    }


@dataclass
class Table:
    """Generic list of flat records (sweeps, summaries)."""

    name: str
    rows: list
    meta: dict = field(default_factory=dict)


def _plain(x):
    if dataclasses.is_dataclass(x) and not isinstance(x, type):
        return {f.name: _plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    return x


def report_to_dict(report) -> dict:
    kind = type(report).__name__
    if kind not in _report_classes():
        raise TypeError(f"unsupported report type {kind}")
    return {"schema_version": REPORT_SCHEMA_VERSION, "kind": kind, "report": _plain(report)}


def _flat_row(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flat_row(v, key + "."))
        elif isinstance(v, list):
            if all(not isinstance(e, (dict, list)) for e in v) and len(v) <= 8:
                for i, e in enumerate(v):
                    out[f"{key}.{i}"] = e
            else:
                out[f"{key}.count"] = len(v)
        else:
            out[key] = v
    return out


def write_report(path, report) -> tuple[Path, Path]:
    """Write ``<path>`` as JSON and a CSV sidecar next to it.

    A :class:`Table` produces one CSV row per record; every other report is
    flattened into a single row with one column per scalar metric.
    """
    path = Path(path)
    doc = report_to_dict(report)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    csv_path = path.with_suffix(".csv")
    body = doc["report"]
    rows = [_flat_row(r) for r in body["rows"]] if isinstance(report, Table) else [_flat_row(body)]
    columns = []
    for r in rows:
        columns.extend(k for k in r if k not in columns)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})
    return path, csv_path


def read_report(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    version = doc.get("schema_version")
    if not isinstance(version, int) or version > REPORT_SCHEMA_VERSION:
        raise FormatVersionError(f"{path}: report schema version {version} is not supported")
    classes = _report_classes()
    cls = classes.get(doc.get("kind"))
    if cls is None:
        raise ValueError(f"{path}: unknown report kind {doc.get('kind')!r}")
    names = {f.name for f in dataclasses.fields(cls)}
    return cls(**{k: v for k, v in doc["report"].items() if k in names})
