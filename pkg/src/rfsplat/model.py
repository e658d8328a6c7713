"""Set-prediction transformer mapping antenna feature maps to material-aware
spheres.

No convolutional backbone: each antenna is one token, projected linearly to
``hidden_dim`` and tagged with a fixed 2-D sinusoidal encoding of its grid
position.  A pre-norm encoder/decoder with N learned queries feeds a sigmoid
geometry head (normalized x, y, z, r) and a softmax class head over
``{no-object, material 1..L}``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch import nn

from .exceptions import ConfigError, InvalidInputError, TrainingDivergedError
from .features import FeatureMap, FeatureStandardizer
from .matching import NO_OBJECT, GeometryScaler, LossWeights, hungarian, matching_cost, torch_set_loss
from .scenes import DEFAULT_BOUNDS, SceneRecord

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.52


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 20
    n_classes: int = 4  # L materials + no-object
    hidden_dim: int = 32
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    ff_dim: int = 64
    n_queries: int = 16
    grid: tuple = (8, 8)

    def __post_init__(self):
        for name in ("in_channels", "hidden_dim", "heads", "ff_dim", "n_queries"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.encoder_layers < 0 or self.decoder_layers < 1:
            raise ConfigError("need >= 0 encoder and >= 1 decoder layers")
        if self.n_classes < 2:
            raise ConfigError("n_classes counts no-object plus at least one material")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.hidden_dim % 4:
            raise ConfigError("hidden_dim must be a multiple of 4 for the 2-D positional encoding")

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["grid"] = tuple(d.get("grid", (8, 8)))
        return cls(**d)


# full-scale reference architecture; desk-scale defaults above
FULL_SCALE = dict(hidden_dim=64, encoder_layers=4, decoder_layers=4, heads=8, ff_dim=512, n_queries=64)


def sinusoidal_2d(rows, cols, dim):
    """``(rows*cols, dim)`` fixed encoding; first half encodes the row,
    second half the column, each as interleaved sin/cos bands."""
    quarter = dim // 4
    freq = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))

    def band(pos):
        ang = pos[:, None] * freq[None, :]
        return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(len(pos), 2 * quarter)

    r, c = np.meshgrid(np.arange(rows, dtype=float), np.arange(cols, dtype=float), indexing="ij")
    return np.concatenate([band(r.ravel()), band(c.ravel())], axis=1)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, query, key, value):
        b, nq, d = query.shape
        nk = key.shape[1]
        h = self.heads
        q = self.q(query).view(b, nq, h, d // h).transpose(1, 2)
        k = self.k(key).view(b, nk, h, d // h).transpose(1, 2)
        v = self.v(value).view(b, nk, h, d // h).transpose(1, 2)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        return self.out((w @ v).transpose(1, 2).reshape(b, nq, d))


class FeedForward(nn.Module):
    def __init__(self, dim, ff_dim):
        super().__init__()
        self.lin1 = nn.Linear(dim, ff_dim)
        self.lin2 = nn.Linear(ff_dim, dim)

    def forward(self, x):
        # smooth activation keeps finite-difference checks clean
        return self.lin2(nn.functional.gelu(self.lin1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, dim, heads, ff_dim):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim)

    def forward(self, x, pos):
        y = self.norm1(x)
        x = x + self.attn(y + pos, y + pos, y)
        return x + self.ff(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, dim, heads, ff_dim):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim)

    def forward(self, t, qpos, memory, pos):
        y = self.norm1(t)
        t = t + self.self_attn(y + qpos, y + qpos, y)
        y = self.norm2(t)
        t = t + self.cross_attn(y + qpos, memory + pos, memory)
        return t + self.ff(self.norm3(t))


class SetTransformer(nn.Module):
    """Returns ``(geometry in [0,1]^4, class logits)`` of shapes
    ``(B, N, 4)`` and ``(B, N, L+1)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.input_proj = nn.Linear(cfg.in_channels, d)
        self.register_buffer("pos", torch.tensor(sinusoidal_2d(*cfg.grid, d), dtype=torch.float32))
        self.encoder = nn.ModuleList(EncoderLayer(d, cfg.heads, cfg.ff_dim) for _ in range(cfg.encoder_layers))
        self.enc_norm = nn.LayerNorm(d)
        self.query_pos = nn.Parameter(torch.randn(cfg.n_queries, d))
        self.decoder = nn.ModuleList(DecoderLayer(d, cfg.heads, cfg.ff_dim) for _ in range(cfg.decoder_layers))
        self.dec_norm = nn.LayerNorm(d)
        self.geo_hidden = nn.Linear(d, d)
        self.geo_out = nn.Linear(d, 4)
        self.cls_out = nn.Linear(d, cfg.n_classes)

    def forward(self, x):
        n_tokens = self.cfg.grid[0] * self.cfg.grid[1]
        if x.ndim != 3 or x.shape[1] != n_tokens or x.shape[2] != self.cfg.in_channels:
            raise InvalidInputError(
                f"expected input (B, {n_tokens}, {self.cfg.in_channels}), got {tuple(x.shape)}")
        pos = self.pos.to(x.dtype)[None]
        mem = self.input_proj(x)
        for layer in self.encoder:
            mem = layer(mem, pos)
        mem = self.enc_norm(mem)
        qpos = self.query_pos[None].expand(x.shape[0], -1, -1)
        t = torch.zeros_like(qpos)
        for layer in self.decoder:
            t = layer(t, qpos, mem, pos)
        t = self.dec_norm(t)
        geo = torch.sigmoid(self.geo_out(nn.functional.gelu(self.geo_hidden(t))))
        return geo, self.cls_out(t)


@dataclass
class Prediction:
    geometry: np.ndarray  # physical (x, y, z, r)
    normalized: np.ndarray
    class_probs: np.ndarray
    label: int
    confidence: float

    @property
    def center(self):
        return self.geometry[:3]

    @property
    def radius(self):
        return float(self.geometry[3])


@dataclass
class DetectionSet:
    predictions: list
    tau: float
    scene_id: int | None = None
    query_index: tuple = field(default=())

    def __len__(self):
        return len(self.predictions)

    def geometry(self):
        return np.array([p.geometry for p in self.predictions]).reshape(-1, 4)

    def labels(self):
        return np.array([p.label for p in self.predictions], dtype=np.int64)

    def confidences(self):
        return np.array([p.confidence for p in self.predictions])


def label_and_confidence(class_probs):
    """Argmax over material classes only; no-object excluded from both."""
    probs = np.asarray(class_probs)
    material = probs[..., NO_OBJECT + 1:]
    idx = np.argmax(material, axis=-1)
    return idx + NO_OBJECT + 1, np.take_along_axis(material, idx[..., None], axis=-1)[..., 0]


def filter_predictions(predictions, tau, scene_id=None) -> DetectionSet:
    keep = [i for i, p in enumerate(predictions) if p.confidence >= tau]
    return DetectionSet([predictions[i] for i in keep], float(tau), scene_id, tuple(keep))


def _as_feature_array(X):
    if isinstance(X, FeatureMap):
        X = [X]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], FeatureMap):
        X = np.stack([fm.grid for fm in X])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise InvalidInputError(f"expected feature maps (n, antennas, channels), got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("feature maps contain non-finite values")
    return X


def _as_targets(y):
    """List of ``(geometry (M, 4) physical, labels (M,))``."""
    out = []
    for item in y:
        if isinstance(item, SceneRecord):
            out.append((item.geometry(), item.labels()))
        else:
            geo, labels = item
            out.append((np.asarray(geo, float).reshape(-1, 4), np.asarray(labels, np.int64).reshape(-1)))
    return out


class SphereDETR(BaseEstimator):
    """Estimator wrapper: ``fit(X, y)`` on raw feature maps and scenes,
    ``predict`` returns N predictions per map, ``predict_and_filter``
    applies the confidence threshold."""

    def __init__(self, hidden_dim=32, encoder_layers=2, decoder_layers=2, heads=4, ff_dim=64, n_queries=16,
                 n_classes=None, learning_rate=1e-4, weight_decay=1e-4, batch_size=32, epochs=100, seed=0,
                 l1_weight=5.0, giou_weight=2.0, cls_weight=1.0, no_object_weight=0.1, bounds=DEFAULT_BOUNDS,
                 radius_range=(0.25, 0.5), tau=DEFAULT_TAU, grid=(8, 8), dtype="float32", grad_clip=None,
                 verbose=False):
        self.hidden_dim = hidden_dim
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.heads = heads
        self.ff_dim = ff_dim
        self.n_queries = n_queries
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.l1_weight = l1_weight
        self.giou_weight = giou_weight
        self.cls_weight = cls_weight
        self.no_object_weight = no_object_weight
        self.bounds = bounds
        self.radius_range = radius_range
        self.tau = tau
        self.grid = grid
        self.dtype = dtype
        self.grad_clip = grad_clip
        self.verbose = verbose

    # helpers --------------------------------------------------------------

    @property
    def loss_weights(self):
        return LossWeights(self.l1_weight, self.giou_weight, self.cls_weight, self.no_object_weight)

    @property
    def scaler(self):
        return GeometryScaler(tuple(tuple(b) for b in self.bounds), tuple(self.radius_range))

    def _torch_dtype(self):
        try:
            return {"float32": torch.float32, "float64": torch.float64}[self.dtype]
        except KeyError:
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}") from None

    def model_config(self, in_channels, n_classes):
        return ModelConfig(in_channels=int(in_channels), n_classes=int(n_classes), hidden_dim=self.hidden_dim,
                           encoder_layers=self.encoder_layers, decoder_layers=self.decoder_layers,
                           heads=self.heads, ff_dim=self.ff_dim, n_queries=self.n_queries,
                           grid=tuple(self.grid))

    def build(self, in_channels, n_classes):
        """Initialise the network deterministically from ``seed``."""
        self.config_ = self.model_config(in_channels, n_classes)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.module_ = SetTransformer(self.config_).to(self._torch_dtype())
        return self

    def _check_fitted(self):
        if not hasattr(self, "module_"):
            raise NotFittedError("SphereDETR is not fitted yet; call fit or load weights")

    def _prepare_targets(self, targets):
        n_classes = self.config_.n_classes
        dtype = self._torch_dtype()
        out = []
        for geo, labels in targets:
            if len(labels) and (labels.min() < 1 or labels.max() >= n_classes):
                raise InvalidInputError(f"labels must lie in 1..{n_classes - 1}")
            unit = self.scaler.normalize(geo) if len(geo) else np.zeros((0, 4))
            out.append((unit, labels, torch.tensor(unit, dtype=dtype), torch.tensor(labels, dtype=torch.long)))
        return out

    def batch_loss(self, xb, targets):
        """Mean set loss over a batch; matching is recomputed from the
        current outputs without gradient."""
        geo, logits = self.module_(xb)
        if not (torch.isfinite(geo).all() and torch.isfinite(logits).all()):
            raise TrainingDivergedError(f"non-finite network outputs (lr={self.learning_rate}); "
                                        "lower the learning rate or set grad_clip")
        probs = torch.softmax(logits, dim=-1).detach().numpy()
        geo_np = geo.detach().numpy()
        w, scaler = self.loss_weights, self.scaler
        total = 0.0
        parts = np.zeros(3)
        for b, (unit, labels, t_geo, t_lab) in enumerate(targets):
            m = hungarian(matching_cost(geo_np[b], probs[b], unit, labels, w, scaler))
            loss, comps = torch_set_loss(geo[b], logits[b], t_geo, t_lab, m, w, scaler)
            total = total + loss
            parts += [float(c.detach()) for c in comps]
        n = len(targets)
        return total / n, parts / n

    # estimator API --------------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None):
        X = _as_feature_array(X)
        targets = _as_targets(y)
        if len(targets) != len(X):
            raise InvalidInputError(f"{len(X)} feature maps but {len(targets)} targets")
        n_classes = self.n_classes
        if n_classes is None:
            n_classes = 1 + max([int(l.max()) for _, l in targets if len(l)] or [1])
        self.standardizer_ = FeatureStandardizer().fit(X)
        self.build(X.shape[2], n_classes)
        dtype = self._torch_dtype()
        Xt = torch.tensor(self.standardizer_.transform(X), dtype=dtype)
        prepared = self._prepare_targets(targets)
        val = None
        if X_val is not None:
            Xv = torch.tensor(self.standardizer_.transform(_as_feature_array(X_val)), dtype=dtype)
            val = (Xv, self._prepare_targets(_as_targets(y_val)))

        opt = torch.optim.AdamW(self.module_.parameters(), lr=self.learning_rate,
                                weight_decay=self.weight_decay)
        rng = np.random.default_rng(self.seed)
        self.history_ = []
        bs = max(1, int(self.batch_size))
        for epoch in range(int(self.epochs)):
            t0 = time.perf_counter()
            self.module_.train()
            order = rng.permutation(len(X))
            running, seen = 0.0, 0
            for start in range(0, len(order), bs):
                idx = order[start:start + bs]
                loss, _ = self.batch_loss(Xt[idx], [prepared[i] for i in idx])
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch starting {start} (lr={self.learning_rate})")
                opt.zero_grad()
                loss.backward()
                if self.grad_clip:
                    nn.utils.clip_grad_norm_(self.module_.parameters(), self.grad_clip)
                opt.step()
                running += float(loss.detach()) * len(idx)
                seen += len(idx)
            entry = {"epoch": epoch, "train_loss": running / max(seen, 1)}
            if val is not None:
                entry["val_loss"] = self.loss_on(*val)
            entry["seconds"] = time.perf_counter() - t0
            self.history_.append(entry)
            if self.verbose:
                log.info("epoch %d %s", epoch, " ".join(f"{k}={v:.5g}" for k, v in entry.items() if k != "epoch"))
        self.n_features_in_ = X.shape[2]
        return self

    @torch.no_grad()
    def loss_on(self, Xt, prepared, batch_size=256):
        self.module_.eval()
        total = 0.0
        for start in range(0, len(prepared), batch_size):
            chunk = prepared[start:start + batch_size]
            loss, _ = self.batch_loss(Xt[start:start + batch_size], chunk)
            total += float(loss) * len(chunk)
        return total / max(len(prepared), 1)

    def score(self, X, y):
        """Negative mean set loss (higher is better)."""
        self._check_fitted()
        Xt = torch.tensor(self.standardizer_.transform(_as_feature_array(X)), dtype=self._torch_dtype())
        return -self.loss_on(Xt, self._prepare_targets(_as_targets(y)))

    @torch.no_grad()
    def forward_raw(self, X, batch_size=256):
        """``(geometry normalized (n, N, 4), class probs (n, N, L+1))``."""
        self._check_fitted()
        X = _as_feature_array(X)
        Xt = torch.tensor(self.standardizer_.transform(X), dtype=self._torch_dtype())
        self.module_.eval()
        geos, probs = [], []
        for start in range(0, len(Xt), batch_size):
            g, logits = self.module_(Xt[start:start + batch_size])
            geos.append(g.double().numpy())
            probs.append(torch.softmax(logits.double(), dim=-1).numpy())
        return np.concatenate(geos), np.concatenate(probs)

    def predict(self, X):
        """N predictions per feature map (list of lists)."""
        geo, probs = self.forward_raw(X)
        phys = self.scaler.denormalize(geo)
        labels, conf = label_and_confidence(probs)
        return [[Prediction(phys[s, q], geo[s, q], probs[s, q], int(labels[s, q]), float(conf[s, q]))
                 for q in range(geo.shape[1])] for s in range(len(geo))]

    def predict_and_filter(self, X, tau=None, scene_ids=None):
        tau = self.tau if tau is None else tau
        preds = self.predict(X)
        ids = scene_ids if scene_ids is not None else [None] * len(preds)
        return [filter_predictions(p, tau, sid) for p, sid in zip(preds, ids)]

    def loss_curve(self):
        self._check_fitted()
        return [dict(e) for e in getattr(self, "history_", [])]


def moving_average(values, window=20):
    values = np.asarray(values, float)
    if len(values) < window:
        return values.copy()
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def grad_check(estimator: SphereDETR, X, y, h=1e-4, max_params=None, rng=None):
    """Worst relative error between reverse-mode and central finite
    differences of the total loss w.r.t. network parameters.

    Runs in float64 on a copy of the network; the Hungarian assignment is
    frozen at the base point.  ``X`` are standardized inputs ``(B, N_r,
    channels)``.  ``max_params`` optionally subsamples parameter entries.
    """
    import copy

    estimator._check_fitted()
    est = copy.deepcopy(estimator)
    est.dtype = "float64"
    est.module_ = est.module_.double()
    Xt = torch.tensor(np.asarray(X, float), dtype=torch.float64)
    prepared = est._prepare_targets(_as_targets(y))
    w, scaler = est.loss_weights, est.scaler

    with torch.no_grad():
        geo, logits = est.module_(Xt)
        probs = torch.softmax(logits, -1).numpy()
    matches = [hungarian(matching_cost(geo[b].numpy(), probs[b], unit, labels, w, scaler))
               for b, (unit, labels, _, _) in enumerate(prepared)]

    def loss_fn():
        g, lg = est.module_(Xt)
        total = 0.0
        for b, (_, _, tg, tl) in enumerate(prepared):
            total = total + torch_set_loss(g[b], lg[b], tg, tl, matches[b], w, scaler)[0]
        return total / len(prepared)

    est.module_.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    rng = np.random.default_rng(0) if rng is None else rng
    with torch.no_grad():
        for p in est.module_.parameters():
            flat = p.view(-1)
            grad = p.grad.view(-1).clone()
            idx = np.arange(flat.numel())
            if max_params is not None and len(idx) > max_params:
                idx = np.sort(rng.choice(len(idx), max_params, replace=False))
            for k in idx:
                old = float(flat[k])
                flat[k] = old + h
                up = float(loss_fn())
                flat[k] = old - h
                down = float(loss_fn())
                flat[k] = old
                fd = (up - down) / (2 * h)
                an = float(grad[k])
                denom = max(abs(an), abs(fd), 1e-6)
                worst = max(worst, abs(an - fd) / denom)
    return worst, float(loss.detach())
