"""Run configuration: one JSON document, sectioned, strictly validated.

Unknown keys are rejected at every level.  Command-line overrides use
dotted paths (``model.hidden_dim=16``).  The resolved configuration is
written next to every stage's outputs.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .exceptions import ConfigError, InvalidInputError
from .matching import GeometryScaler, LossWeights
from .model import DEFAULT_TAU, SphereDETR
from .pipeline import SimulationPlan
from .propagation import SimulationConfig
from .scenes import DEFAULT_BOUNDS, DEFAULT_RADIUS_RANGE, SceneParams, material_table, material_table_default


@dataclass
class SimulationSection:
    room_size: list = field(default_factory=lambda: [6.5, 10.0, 4.0])
    frequency: float = 2.8e9
    tx_position: list = field(default_factory=lambda: [2.75, 4.5, 3.5])
    tx_power_dbm: float = 0.0
    rx_center: list = field(default_factory=lambda: [0.0, -5.0, 2.0])
    rx_shape: list = field(default_factory=lambda: [8, 8])
    rx_pitch: float | None = None
    max_reflections: int = 4
    max_ris_hits: int = 2
    noise_variance: float | None = None
    snr_db: float = 20.0
    wall_surfaces: list = field(default_factory=lambda: ["ris", "ris", "ris", "ris", "brick", "ceiling-board"])
    panel_size: float = 1.0

    def build(self) -> SimulationConfig:
        d = asdict(self)
        for k in ("room_size", "tx_position", "rx_center", "rx_shape", "wall_surfaces"):
            d[k] = tuple(d[k])
        return SimulationConfig(**d)


@dataclass
class SceneSection:
    n_spheres: int = 12
    bounds: list = field(default_factory=lambda: [list(b) for b in DEFAULT_BOUNDS])
    radius_range: list = field(default_factory=lambda: list(DEFAULT_RADIUS_RANGE))
    min_separation: float = 1.0
    materials: list = field(default_factory=lambda: [m.name for m in material_table_default()])
    candidates: int = 30

    def build(self) -> SceneParams:
        return SceneParams(self.n_spheres, tuple(tuple(b) for b in self.bounds), tuple(self.radius_range),
                           self.min_separation, material_table(list(self.materials)), self.candidates)


@dataclass
class CodebookSection:
    n_entries: int = 2
    realizations_per_panel: int = 5


@dataclass
class FeatureSection:
    # polarization features from noisy received samples instead of path sums
    measured: bool = False
    store_paths: bool = False


@dataclass
class ModelSection:
    hidden_dim: int = 32
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    ff_dim: int = 64
    n_queries: int = 16
    dtype: str = "float32"


@dataclass
class LossSection:
    l1: float = 5.0
    giou: float = 2.0
    cls: float = 1.0
    no_object: float = 0.1


@dataclass
class TrainingSection:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    grad_clip: float | None = None
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])


@dataclass
class EvalSection:
    tau: float = DEFAULT_TAU


@dataclass
class RunConfig:
    seed: int = 0
    n_scenes: int = 2000
    simulation: SimulationSection = field(default_factory=SimulationSection)
    scene: SceneSection = field(default_factory=SceneSection)
    codebook: CodebookSection = field(default_factory=CodebookSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # construction -----------------------------------------------------------

    @classmethod
    def from_dict(cls, d, path="") -> "RunConfig":
        return _from_dict(cls, d, path)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        cfg = cls.from_dict(data)
        cfg.validate()
        return cfg

    def to_dict(self):
        return asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())
        return path

    def with_overrides(self, overrides) -> "RunConfig":
        """Apply ``["section.key=value", ...]``; values parse as JSON when
        possible, otherwise as plain strings."""
        d = self.to_dict()
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown configuration section {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown configuration key {key!r}")
            node[parts[-1]] = value
        cfg = RunConfig.from_dict(d)
        cfg.validate()
        return cfg

    def validate(self):
        """Range checks across all sections, before any stage runs."""
        if self.n_scenes < 0:
            raise ConfigError("n_scenes must be >= 0")
        if not 0 <= self.eval.tau <= 1:
            raise ConfigError(f"eval.tau must lie in [0, 1], got {self.eval.tau}")
        if self.codebook.n_entries < 1 or self.codebook.realizations_per_panel < 1:
            raise ConfigError("codebook needs n_entries >= 1 and realizations_per_panel >= 1")
        t = self.training
        if t.learning_rate <= 0 or t.batch_size < 1 or t.epochs < 0 or t.weight_decay < 0:
            raise ConfigError("training: learning_rate > 0, batch_size >= 1, epochs >= 0, weight_decay >= 0")
        if len(t.split) != 3 or min(t.split) < 0 or sum(t.split) <= 0:
            raise ConfigError("training.split must be three non-negative fractions")
        if self.model.n_queries < self.scene.n_spheres:
            raise ConfigError(f"model.n_queries ({self.model.n_queries}) must be >= scene.n_spheres "
                              f"({self.scene.n_spheres})")
        try:
            self.simulation.build()
            self.scene.build()
            self.loss_weights()
            self.estimator()._torch_dtype()
            self.estimator().model_config(10 * self.codebook.n_entries, len(self.scene.materials) + 1)
        except (InvalidInputError, KeyError, TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None
        return self

    # builders ---------------------------------------------------------------

    def loss_weights(self):
        return LossWeights(self.loss.l1, self.loss.giou, self.loss.cls, self.loss.no_object)

    def scaler(self):
        return GeometryScaler(tuple(tuple(b) for b in self.scene.bounds), tuple(self.scene.radius_range))

    def plan(self) -> SimulationPlan:
        return SimulationPlan(sim=self.simulation.build(), n_entries=self.codebook.n_entries,
                              realizations_per_panel=self.codebook.realizations_per_panel,
                              max_reflections=self.simulation.max_reflections, measured=self.features.measured,
                              master_seed=self.seed)

    def estimator(self, **extra) -> SphereDETR:
        from .pipeline import derive_seed

        m, t, lw = self.model, self.training, self.loss
        return SphereDETR(hidden_dim=m.hidden_dim, encoder_layers=m.encoder_layers, decoder_layers=m.decoder_layers,
                          heads=m.heads, ff_dim=m.ff_dim, n_queries=m.n_queries,
                          n_classes=len(self.scene.materials) + 1, learning_rate=t.learning_rate,
                          weight_decay=t.weight_decay, batch_size=t.batch_size, epochs=t.epochs,
                          seed=derive_seed(self.seed, "init") % (2**63), l1_weight=lw.l1, giou_weight=lw.giou,
                          cls_weight=lw.cls, no_object_weight=lw.no_object,
                          bounds=tuple(tuple(b) for b in self.scene.bounds),
                          radius_range=tuple(self.scene.radius_range), tau=self.eval.tau,
                          grid=tuple(self.simulation.rx_shape), dtype=m.dtype, grad_clip=t.grad_clip, **extra)


def _from_dict(cls, d, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'configuration'} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigError(f"unknown configuration key(s){where}: {', '.join(unknown)}")
    obj = cls()
    updates = {}
    for name, value in d.items():
        current = getattr(obj, name)
        sub = f"{path}.{name}" if path else name
        if hasattr(current, "__dataclass_fields__"):
            updates[name] = _from_dict(type(current), value, sub)
        else:
            updates[name] = value
    return replace(obj, **updates)


def desk_preset() -> RunConfig:
    """Desk-scale learning run: 3 spheres, metal/glass/wood, two codebook
    entries, small model."""
    cfg = RunConfig()
    cfg.scene.n_spheres = 3
    cfg.scene.materials = ["metal", "glass", "wood"]
    cfg.codebook.n_entries = 2
    return cfg
