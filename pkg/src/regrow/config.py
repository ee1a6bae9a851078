"""Run configuration: one flat key=value file drives every pipeline stage."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .synth import SynthConfig


@dataclass
class RunConfig:
    # preprocess
    knn_k: int = 8
    erratic_jump: float = 0.5
    erratic_mean_max: float = 3.0
    erratic_mean_min: float = 0.0
    split_fraction: float = 0.8
    holdout_fraction: float = 0.375
    seed: int = 0
    # training
    epochs: int = 100
    batch_size: int = 8
    lr0: float = 1e-3
    lr_decay: float = 0.5
    lr_step: int = 25
    # tucker
    tucker_ranks: tuple = (4, 3, 3)
    tucker_ridge: float = 1e-3
    tucker_sweeps: int = 100
    tucker_tol: float = 1e-6
    # clustering
    umap_neighbors: int = 15
    umap_min_dist: float = 0.1
    umap_epochs: int = 500
    cluster_ks: tuple = (3, 5, 10)
    # synthetic data
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> None:
        if not 0.0 < self.split_fraction <= 1.0:
            raise ValueError("split_fraction must lie in (0, 1]")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if len(self.tucker_ranks) != 3:
            raise ValueError("tucker_ranks needs 3 entries")
        self.synth.validate()


def _parse_value(kind, raw: str):
    if kind is tuple:
        return tuple(int(v) for v in raw.split(","))
    if kind is bool:
        return raw.lower() in ("1", "true", "yes")
    return kind(raw)


def load_config(path) -> RunConfig:
    """Parse the flat key=value run config; unknown keys are rejected.

    Synth keys use the ``synth.`` prefix (e.g. ``synth.n_fires=40``); '#'
    starts a comment.
    """
    cfg = RunConfig()
    top = {f.name: f.type for f in fields(cfg) if f.name != "synth"}
    top_kinds = {name: type(getattr(cfg, name)) for name in top}
    synth_kinds = {f.name: type(getattr(cfg.synth, f.name)) for f in fields(cfg.synth)}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            try:
                if key.startswith("synth."):
                    sub = key[6:]
                    if sub not in synth_kinds:
                        raise KeyError(key)
                    setattr(cfg.synth, sub, _parse_value(synth_kinds[sub], raw))
                else:
                    if key not in top_kinds:
                        raise KeyError(key)
                    setattr(cfg, key, _parse_value(top_kinds[key], raw))
            except KeyError:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}") from None
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {e}") from None
    cfg.validate()
    return cfg


def config_text(cfg: RunConfig) -> str:
    """Serialize a config back to the flat format (stable key order)."""
    lines = []
    for f in fields(cfg):
        if f.name == "synth":
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    for f in fields(cfg.synth):
        lines.append(f"synth.{f.name}={getattr(cfg.synth, f.name)}")
    return "\n".join(lines) + "\n"
