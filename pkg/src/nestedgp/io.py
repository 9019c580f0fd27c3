"""Datasets, CSV ingestion, the step-function generator, model files and run configs."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from .deep import AUTOENCODER, REGRESSION, DeepGpModel
from .errors import ConfigError, EmptyFile, ModelFileError, ParseError, RaggedRows
from .kernels import KernelSpec, family_name
from .optim import LayerSpec, OptimizerConfig
from .sparse import VariationalLayer

FORMAT_VERSION = "nestedgp-model/1"


@dataclass
class Normalization:
    """Per-column affine map ``(A - mean) / scale`` and its inverse."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, A) -> "Normalization":
        A = np.asarray(A, dtype=float)
        sd = A.std(0)
        return cls(A.mean(0), np.where(sd > 0, sd, 1.0))

    @classmethod
    def identity(cls, dim: int) -> "Normalization":
        return cls(np.zeros(dim), np.ones(dim))

    def apply(self, A):
        return (np.asarray(A, dtype=float) - self.mean) / self.scale

    def invert(self, A):
        return np.asarray(A, dtype=float) * self.scale + self.mean

    def invert_variance(self, V):
        return np.asarray(V, dtype=float) * self.scale**2

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Normalization":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["scale"], dtype=float))


@dataclass
class Dataset:
    X: np.ndarray | None
    Y: np.ndarray
    x_names: list
    y_names: list
    x_norm: Normalization | None = None
    y_norm: Normalization | None = None
    note: str = ""

    @property
    def n(self) -> int:
        return self.Y.shape[0]


# -- CSV --------------------------------------------------------------------------


def _read_rows(path):
    """Non-comment rows with their 1-based file line numbers, plus any leading comment."""
    rows, note = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if row[0].lstrip().startswith("#"):
                note.append(",".join(row).lstrip("# ").rstrip())
                continue
            rows.append((lineno, row))
    return rows, " ".join(note)


def _resolve_cols(spec, names, default):
    if spec is None:
        return list(default)
    out = []
    for c in spec:
        if isinstance(c, str) and not c.lstrip("-").isdigit():
            if c not in names:
                raise ConfigError(f"unknown column {c!r}; have {names}")
            out.append(names.index(c))
        else:
            j = int(c)
            if not -len(names) <= j < len(names):
                raise ConfigError(f"column index {j} out of range for {len(names)} columns")
            out.append(j % len(names))
    return out


def load_csv(path, has_header=True, x_cols=None, y_cols=None, normalize=False) -> Dataset:
    """Read a numeric CSV.

    By default the last column is the output and the rest are inputs.
    ``x_cols=[]`` selects autoencoder data (no inputs). Columns may be given
    by name or index.
    """
    rows, note = _read_rows(path)
    if has_header:
        if not rows:
            raise EmptyFile(f"{path}: no header row")
        names = [c.strip() for c in rows[0][1]]
        rows = rows[1:]
    else:
        names = None
    if not rows:
        raise EmptyFile(f"{path}: no data rows")
    width = len(rows[0][1]) if names is None else len(names)
    names = names or [f"c{j}" for j in range(width)]
    data = np.empty((len(rows), width))
    for i, (lineno, row) in enumerate(rows):
        if len(row) != width:
            raise RaggedRows(f"{path}: line {lineno} has {len(row)} fields, expected {width}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(lineno, j + 1, cell) from None
            if not np.isfinite(v):
                raise ParseError(lineno, j + 1, cell)
            data[i, j] = v
    yc = _resolve_cols(y_cols, names, [width - 1])
    xc = _resolve_cols(x_cols, names, [j for j in range(width) if j not in yc])
    X = data[:, xc] if xc else None
    Y = data[:, yc]
    ds = Dataset(X, Y, [names[j] for j in xc], [names[j] for j in yc], note=note)
    if normalize:
        ds.y_norm = Normalization.fit(Y)
        ds.Y = ds.y_norm.apply(Y)
        if X is not None:
            ds.x_norm = Normalization.fit(X)
            ds.X = ds.x_norm.apply(X)
    return ds


def write_csv(path, header, columns, note=None):
    """Write columns with round-trip float formatting."""
    A = np.column_stack([np.asarray(c, dtype=float).reshape(len(c), -1) for c in columns])
    with open(path, "w", newline="") as fh:
        if note:
            fh.write(f"# {note}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in A:
            w.writerow([repr(float(v)) for v in row])


def gen_step(n=100, noise_sd=0.1, seed=0) -> Dataset:
    """Noisy step: sorted ``x ~ U[-1, 1]``, ``y = 1[x >= 0] + N(0, noise_sd^2)``."""
    if n < 2:
        raise ValueError("gen_step needs n >= 2")
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(-1.0, 1.0, n))
    y = (x >= 0).astype(float) + noise_sd * rng.standard_normal(n)
    note = f"gen_step n={n} noise_sd={noise_sd} seed={seed} domain=[-1,1] step_at=0"
    return Dataset(x[:, None], y[:, None], ["x"], ["y"], note=note)


# -- model files --------------------------------------------------------------------


def _layer_to_dict(layer: VariationalLayer) -> dict:
    k = layer.kernel
    return {
        "kernel": {"family": k.family, "variance": k.variance,
                   "lengthscales": np.asarray(k.lengthscales).tolist(), "tied": k.tied},
        "Z": layer.Z.tolist(),
        "M": layer.M.tolist(),
        "L": layer.L.tolist(),
        "noise_var": layer.noise_var,
    }


def _layer_from_dict(d) -> VariationalLayer:
    k = d["kernel"]
    kernel = KernelSpec(k["family"], k["variance"], np.asarray(k["lengthscales"], dtype=float), k["tied"])
    return VariationalLayer(np.asarray(d["Z"], dtype=float), np.asarray(d["M"], dtype=float),
                            np.asarray(d["L"], dtype=float), d["noise_var"], kernel)


@dataclass
class ModelFile:
    model: DeepGpModel
    x_norm: Normalization | None = None
    y_norm: Normalization | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        m = self.model
        return {
            "format_version": FORMAT_VERSION,
            "architecture": {
                "mode": m.mode,
                "layers": [{"kernel": l.kernel.family, "m": l.m, "input_dim": l.input_dim,
                            "output_dim": l.output_dim} for l in m.layers],
            },
            "layers": [_layer_to_dict(l) for l in m.layers],
            "normalization": {
                "x": self.x_norm.to_dict() if self.x_norm else None,
                "y": self.y_norm.to_dict() if self.y_norm else None,
            },
            "metadata": self.metadata,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "ModelFile":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ModelFileError(f"model file is not valid JSON: {e}") from None
        version = d.get("format_version") if isinstance(d, dict) else None
        if version != FORMAT_VERSION:
            raise ModelFileError(f"unsupported model format {version!r}; expected {FORMAT_VERSION!r}")
        try:
            layers = tuple(_layer_from_dict(l) for l in d["layers"])
            model = DeepGpModel(layers, d["architecture"]["mode"])
            norm = d["normalization"]
            xn = Normalization.from_dict(norm["x"]) if norm["x"] else None
            yn = Normalization.from_dict(norm["y"]) if norm["y"] else None
        except (KeyError, TypeError) as e:
            raise ModelFileError(f"model file is missing or has malformed field: {e}") from None
        return cls(model, xn, yn, d.get("metadata", {}))

    @classmethod
    def load(cls, path) -> "ModelFile":
        with open(path) as fh:
            return cls.loads(fh.read())


# -- run configuration ----------------------------------------------------------------


@dataclass
class DataConfig:
    has_header: bool = True
    x_cols: list | None = None
    y_cols: list | None = None
    normalize: bool = True


@dataclass
class RunConfig:
    """Everything ``train`` needs besides the data file."""

    architecture: list
    mode: str = REGRESSION
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    objective: str = "deep_bound"
    fixed: list = field(default_factory=list)
    chunks: int = 1

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if "architecture" not in d or not d["architecture"]:
            raise ConfigError("config needs a non-empty 'architecture' list")
        try:
            arch = []
            for entry in d["architecture"]:
                entry = dict(entry)
                hidden = entry.pop("hidden_dim", None)
                kernel = family_name(entry.pop("kernel", "eq"))
                arch.append(LayerSpec(kernel=kernel, output_dim=hidden, **entry))
            for spec in arch[:-1]:
                if spec.output_dim is None or spec.output_dim < 1:
                    raise ConfigError("every hidden layer needs a positive hidden_dim")
            mode = d.get("mode", REGRESSION)
            if mode not in (REGRESSION, AUTOENCODER):
                raise ConfigError(f"mode must be {REGRESSION!r} or {AUTOENCODER!r}, got {mode!r}")
            opt = OptimizerConfig(**(d.get("optimizer") or {}))
            data = DataConfig(**(d.get("data") or {}))
            objective = d.get("objective", "deep_bound")
            if objective not in ("deep_bound", "svi_bound", "collapsed_bound"):
                raise ConfigError(f"unsupported training objective {objective!r}")
            chunks = int(d.get("chunks", 1))
            if chunks < 1:
                raise ConfigError("chunks must be >= 1")
            fixed = [tuple(f) if isinstance(f, list) else f for f in d.get("fixed") or []]
            return cls(arch, mode, int(d.get("seed", 0)), opt, data, objective, fixed, chunks)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"invalid config: {e}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = yaml.safe_load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML/JSON: {e}") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "architecture": [{"hidden_dim": s.output_dim, "kernel": s.kernel, "m": s.m, "tied": s.tied}
                             for s in self.architecture],
            "mode": self.mode,
            "seed": self.seed,
            "optimizer": asdict(self.optimizer),
            "data": asdict(self.data),
            "objective": self.objective,
            "fixed": [list(f) if isinstance(f, tuple) else f for f in self.fixed],
            "chunks": self.chunks,
        }
