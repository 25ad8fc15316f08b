"""Model formulas: covariate terms, transforms and the twelve preset models."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Term",
    "ModelSpec",
    "ConfigError",
    "TRANSFORMS",
    "PRESETS",
    "preset",
    "apply_transform",
    "parse_model_config",
]

RESPONSES = ("centroids", "log_sizes")
KINDS = ("linear", "iid", "rw2")


class ConfigError(ValueError):
    """Invalid model or pipeline configuration."""


def _log(x):
    return np.log(np.where(x > 0, x, np.nan))


def _log1p(x):
    return np.log1p(np.where(x > -1, x, np.nan))


def _sqrt(x):
    return np.sqrt(np.where(x >= 0, x, np.nan))


TRANSFORMS = {
    "identity": lambda x: x,
    "log": _log,
    "log1p": _log1p,
    "sqrt": _sqrt,
    "exp_neg": lambda x: np.exp(-x),
}


def apply_transform(name: str, x) -> np.ndarray:
    """Apply a named transform; values outside its domain become NaN."""
    with np.errstate(all="ignore"):
        return TRANSFORMS[name](np.asarray(x, dtype=float))


@dataclass(frozen=True)
class Term:
    covariate: str
    transform: str = "identity"
    kind: str = "linear"
    n_bins: int = 25

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"unknown transform {self.transform!r}; choose from {sorted(TRANSFORMS)}")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown effect kind {self.kind!r}; choose from {KINDS}")
        if self.kind == "rw2" and self.n_bins < 5:
            raise ConfigError(f"rw2 needs at least 5 bins, got {self.n_bins}")

    @property
    def label(self) -> str:
        inner = self.covariate if self.transform == "identity" else f"{self.transform}({self.covariate})"
        return f"{self.kind}({inner})" if self.kind != "linear" else inner


@dataclass(frozen=True)
class ModelSpec:
    name: str
    response: str
    terms: tuple = field(default_factory=tuple)
    intercept: bool = True

    def __post_init__(self):
        if self.response not in RESPONSES:
            raise ConfigError(f"unknown response {self.response!r}; choose from {RESPONSES}")
        labels = [t.label for t in self.terms]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate terms in model {self.name}: {labels}")

    @property
    def covariates(self) -> list[str]:
        return sorted({t.covariate for t in self.terms})


_CATEGORICAL = (Term("landcover", "identity", "iid"), Term("geology", "identity", "iid"))
_PGA_RW2 = Term("pga", "identity", "rw2")
_PGA_LOG = Term("pga", "log", "linear")


def _spec(name, response, *terms):
    return ModelSpec(name, response, tuple(terms) + _CATEGORICAL)


# log(ksn) is evaluated as log(ksn + 1) so zero-steepness cells stay finite
PRESETS: dict[str, ModelSpec] = {
    s.name: s
    for s in (
        _spec("fit1a", "centroids", _PGA_RW2, Term("ksn", "log1p", "linear")),
        _spec("fit2a", "centroids", _PGA_RW2, Term("ksn", "sqrt", "rw2")),
        _spec("fit3a", "centroids", _PGA_RW2, Term("ksn", "log1p", "rw2")),
        _spec("fit4a", "centroids", _PGA_RW2, Term("dem", "identity", "linear")),
        _spec("fit5a", "centroids", _PGA_RW2, Term("ksn", "log1p", "rw2"), Term("rf2ch", "exp_neg", "linear")),
        _spec("fit6a", "centroids", _PGA_RW2, Term("ksn", "log1p", "rw2"), Term("fd2ch", "exp_neg", "linear")),
        _spec("fit1b", "log_sizes", _PGA_LOG, Term("ksn", "log1p", "linear")),
        _spec("fit2b", "log_sizes", _PGA_LOG, Term("ksn", "sqrt", "rw2")),
        _spec("fit3b", "log_sizes", _PGA_LOG, Term("ksn", "log1p", "rw2")),
        _spec("fit4b", "log_sizes", _PGA_LOG, Term("dem", "identity", "linear")),
        _spec("fit5b", "log_sizes", _PGA_LOG, Term("rf2ch", "identity", "linear")),
        _spec("fit6b", "log_sizes", _PGA_LOG, Term("fd2ch", "identity", "linear")),
    )
}


def preset(name: str) -> ModelSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}") from None


def _parse_term(value: str) -> Term:
    parts = value.split(":")
    if len(parts) not in (3, 4):
        raise ConfigError(f"term must be covariate:transform:kind[:n_bins], got {value!r}")
    kind = {"iid": "iid", "rw2": "rw2", "linear": "linear"}.get(parts[2], parts[2])
    n_bins = int(parts[3]) if len(parts) == 4 else 25
    return Term(parts[0], parts[1], kind, n_bins)


def parse_model_config(source) -> ModelSpec:
    """Parse a flat ``key=value`` model description.

    Keys: ``preset``, ``name``, ``response``, ``intercept`` and repeated
    ``term=covariate:transform:kind[:n_bins]``. A preset supplies defaults
    that explicit keys override; explicit terms replace the preset's terms.
    """
    text = Path(source).read_text() if isinstance(source, Path) else str(source)
    base: ModelSpec | None = None
    name = response = None
    intercept = True
    terms: list[Term] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            base = preset(value)
        elif key == "name":
            name = value
        elif key == "response":
            response = value
        elif key == "intercept":
            intercept = value.lower() in ("1", "true", "yes")
        elif key == "term":
            terms.append(_parse_term(value))
        else:
            raise ConfigError(f"line {lineno}: unknown model key {key!r}")
    if base is None and response is None:
        raise ConfigError("model config needs a preset or a response")
    return ModelSpec(
        name=name or (base.name if base else "custom"),
        response=response or base.response,
        terms=tuple(terms) if terms else (base.terms if base else ()),
        intercept=intercept,
    )
