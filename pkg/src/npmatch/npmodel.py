"""Neural-process classification head on top of a feature backbone.

Data flow for one forward pass::

    raw input --backbone--> features f (N, F)
    (f, y) --latent encoder--> r_i --mean--> r --heads--> q(z) = N(mu, var)
    (f, y) --deterministic encoder--> d_i --mean--> d
    z_1..z_T ~ q(z)                         (reparameterised)
    concat(f, z_t, d) --decoder g--> h --W--> softmax -> T class distributions

Set-valued inputs are processed in a canonical row order (a byte-wise sort
of the rows), so results are bit-identical under any permutation of the
input sets even though BLAS results depend on row position.
"""

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import kernels
from .divergence import VAR_FLOOR, DiagonalGaussian


@dataclass
class ModelConfig:
    n_classes: int
    input_kind: str = "vector"  # "vector" or "image"
    input_dim: int = 2  # vector width, or image side length
    image_channels: int = 1
    feature_dim: int = 64
    backbone_hidden: int = 64
    hidden_units: int = 16
    latent_dim: int = 16
    conv_channels: tuple = (8, 16)
    bank_capacity: int = 2560

    def __post_init__(self):
        if self.input_kind not in ("vector", "image"):
            raise ValueError(f"unknown input kind {self.input_kind!r}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        self.conv_channels = tuple(self.conv_channels)

    @property
    def input_shape(self):
        if self.input_kind == "vector":
            return (self.input_dim,)
        return (self.image_channels, self.input_dim, self.input_dim)


# -------------------------------------------------------------- parameters


def _dense(rng, fan_in, fan_out, gain=2.0):
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))


def _mlp(params, rng, prefix, widths):
    for k, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        params[f"{prefix}.w{k}"] = _dense(rng, a, b)
        params[f"{prefix}.b{k}"] = np.zeros((1, b))


def init_params(cfg, seed):
    """Fresh parameter dict (name -> Tensor), deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    F, M, L, C = cfg.feature_dim, cfg.hidden_units, cfg.latent_dim, cfg.n_classes
    p = {}
    if cfg.input_kind == "vector":
        _mlp(p, rng, "bb", [cfg.input_dim, cfg.backbone_hidden, F])
    else:
        chans = [cfg.image_channels, *cfg.conv_channels, F]
        for k, (a, b) in enumerate(zip(chans[:-1], chans[1:]), start=1):
            p[f"bb.c{k}"] = rng.normal(0.0, np.sqrt(2.0 / (a * 9)), size=(b, a, 3, 3))
            p[f"bb.cb{k}"] = np.zeros((1, b, 1, 1))
    _mlp(p, rng, "lat", [F + C, M, M])
    _mlp(p, rng, "det", [F + C, M, M])
    _mlp(p, rng, "mu", [M, M, L])
    _mlp(p, rng, "var", [M, M, L])
    _mlp(p, rng, "dec", [F + L + M, M, M])
    p["cls.W"] = rng.normal(0.0, np.sqrt(1.0 / M), size=(C, M))
    # small heads: start near the prior-like N(0, ~1/2) and an even classifier
    for name in ("mu.w2", "var.w2"):
        p[name] *= 0.1
    return {k: dc.Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def _layer(x, params, prefix, k, act=True):
    return dc.dense(x, params[f"{prefix}.w{k}"], params[f"{prefix}.b{k}"], relu=act)


# --------------------------------------------------------------- pieces


def backbone_forward(x, params, cfg):
    """Raw inputs (N, *input_shape) -> features (N, F)."""
    x = dc.as_tensor(x)
    if x.shape[1:] != cfg.input_shape:
        raise dc.ShapeError(f"input shape {x.shape[1:]} != {cfg.input_shape}")
    if cfg.input_kind == "vector":
        h = _layer(x, params, "bb", 1)
        return _layer(h, params, "bb", 2)
    h = x
    for k in range(1, len(cfg.conv_channels) + 2):
        h = dc.conv2d(h, params[f"bb.c{k}"], stride=2, pad=1) + params[f"bb.cb{k}"]
        h = dc.relu(h)
    return dc.global_avg_pool(h)


def canonical_order(rows):
    """Permutation sorting ``rows`` (2-D) by raw bytes; stable on ties."""
    a = np.ascontiguousarray(rows, dtype=np.float64)
    if a.shape[0] <= 1:
        return np.arange(a.shape[0])
    keys = a.view(np.dtype((np.void, a.shape[1] * a.itemsize))).ravel()
    return np.argsort(keys, kind="stable")


def encode_points(features, labels, params, path="latent", canonical=True):
    """Per-point representations MLP(concat(feature, label)), order preserved.

    ``labels`` are one-hot or probability vectors (N, C). With
    ``canonical=False`` rows are encoded in the given order, which is
    deterministic but not bit-identical across permutations.
    """
    features = dc.as_tensor(features)
    labels = dc.as_tensor(labels)
    if features.shape[0] != labels.shape[0]:
        raise ValueError(
            f"{features.shape[0]} features but {labels.shape[0]} labels"
        )
    prefix = {"latent": "lat", "deterministic": "det", "det": "det"}[path]
    n = features.shape[0]
    if n == 0:
        return dc.Tensor(np.zeros((0, params[f"{prefix}.w2"].shape[1])))
    xy = dc.concat_cols(features, labels)
    if not canonical:
        return _layer(_layer(xy, params, prefix, 1), params, prefix, 2, act=False)
    order = canonical_order(xy.data)
    identity = np.array_equal(order, np.arange(n))
    if not identity:
        xy = dc.take_rows(xy, order)
    h = _layer(xy, params, prefix, 1)
    r = _layer(h, params, prefix, 2, act=False)
    if not identity:
        r = dc.take_rows(r, np.argsort(order))
    return r


def aggregate(representations, canonical=True):
    """Order-invariant mean over rows -> (1, width)."""
    r = dc.as_tensor(representations)
    if r.shape[0] == 0:
        raise ValueError("cannot aggregate an empty set; use a memory-bank summary")
    if not canonical:
        return dc.mean_rows(r)
    order = canonical_order(r.data)
    if not np.array_equal(order, np.arange(r.shape[0])):
        r = dc.take_rows(r, order)
    return dc.mean_rows(r)


def latent_distribution(representation, params):
    """Mean/variance heads; variance squashed into [VAR_FLOOR, 1)."""
    r = dc.as_tensor(representation)
    mean = _layer(_layer(r, params, "mu", 1), params, "mu", 2, act=False)
    raw = _layer(_layer(r, params, "var", 1), params, "var", 2, act=False)
    var = dc.logistic(raw) * (1.0 - VAR_FLOOR) + VAR_FLOOR
    return DiagonalGaussian(mean, var)


def sample_latent(dist, T, seed):
    """T reparameterised draws (T, L): mean + sqrt(var) * eta."""
    if T < 1:
        raise ValueError("T must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mean = dc.as_tensor(dist.mean)
    var = dc.as_tensor(dist.variance)
    eta = rng.standard_normal((T, mean.data.size))
    return mean + dc.sqrt(var) * eta


def decode_logits(features, latents, det_rep, params):
    """Logits (T*N, C); row t*N + i pairs target i with latent t.

    The first decoder layer acts on concat(f_i, z_t, d). It is evaluated
    blockwise as f_i W_f + z_t W_z + d W_d, which is the same affine map
    without materialising the (T*N, F+L+M) input.
    """
    f = dc.as_tensor(features)
    z = dc.as_tensor(latents)
    d = dc.as_tensor(det_rep)
    n, T = f.shape[0], z.shape[0]
    w1 = params["dec.w1"]
    F, L = f.shape[1], z.shape[1]
    if w1.shape[0] != F + L + d.shape[1]:
        raise dc.ShapeError(f"decoder input width {F + L + d.shape[1]} != {w1.shape[0]}")
    wf = dc.take_rows(w1, np.arange(F))
    wz = dc.take_rows(w1, np.arange(F, F + L))
    wd = dc.take_rows(w1, np.arange(F + L, w1.shape[0]))
    per_target = f @ wf
    per_latent = z @ wz + dc.dense(d, wd, params["dec.b1"])
    h = dc.pair_relu(per_target, per_latent)
    h = _layer(h, params, "dec", 2)
    # no classifier bias
    return h @ dc.transpose(params["cls.W"])


def decode_classify(features, latents, det_rep, params):
    """T class-probability arrays, shape (T, N, C)."""
    logits = decode_logits(features, latents, det_rep, params)
    n, T = dc.as_tensor(features).shape[0], dc.as_tensor(latents).shape[0]
    return kernels.softmax_rows(logits.data).reshape(T, n, -1)


# ------------------------------------------------------------ memory bank


class MemoryBank:
    """Fixed-capacity FIFO of representation rows.

    Stored as a ring buffer; :meth:`contents` and :meth:`summary` always
    walk the rows oldest-first so the summary is reproducible.
    """

    def __init__(self, capacity, width):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.width = int(width)
        self._buf = np.zeros((self.capacity, self.width))
        self._start = 0
        self.size = 0
        self.pushed = 0

    @classmethod
    def with_random_vector(cls, capacity, width, seed):
        bank = cls(capacity, width)
        bank.push(np.random.default_rng(seed).standard_normal((1, width)))
        return bank

    def __len__(self):
        return self.size

    def push(self, rows):
        rows = np.asarray(rows.data if isinstance(rows, dc.Tensor) else rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.shape[0] == 0:
            return self
        if rows.shape[1] != self.width:
            raise ValueError(f"row width {rows.shape[1]} != bank width {self.width}")
        self.pushed += rows.shape[0]
        if rows.shape[0] >= self.capacity:
            self._buf[:] = rows[-self.capacity:]
            self._start = 0
            self.size = self.capacity
            return self
        n = rows.shape[0]
        end = (self._start + self.size) % self.capacity
        self._buf[(end + np.arange(n)) % self.capacity] = rows
        overflow = max(0, self.size + n - self.capacity)
        self.size = min(self.capacity, self.size + n)
        self._start = (self._start + overflow) % self.capacity
        return self

    def contents(self):
        end = self._start + self.size
        if end <= self.capacity:
            return self._buf[self._start:end].copy()
        return np.concatenate([self._buf[self._start:], self._buf[:end - self.capacity]])

    def summary(self):
        """Mean of the rows, summed oldest-first along each column."""
        if self.size == 0:
            raise ValueError("empty memory bank")
        cols = np.ascontiguousarray(self.contents().T)
        return (np.add.reduce(cols, axis=1) / self.size)[None, :]

    def state(self):
        return {
            "contents": self.contents().copy(),
            "capacity": self.capacity,
            "pushed": self.pushed,
        }

    @classmethod
    def from_state(cls, contents, capacity, pushed):
        contents = np.asarray(contents, dtype=np.float64)
        bank = cls(capacity, contents.shape[1])
        bank._buf[: contents.shape[0]] = contents
        bank.size = contents.shape[0]
        bank.pushed = int(pushed)
        return bank

    def copy(self):
        return MemoryBank.from_state(**self.state())


def memory_push(bank, representations):
    return bank.push(representations)


# ------------------------------------------------------------- prediction


@dataclass
class Prediction:
    probs: np.ndarray
    uncertainty: float
    members: np.ndarray = None


class PredictionBatch:
    """Averaged predictions for N points; indexable as a list of Prediction."""

    def __init__(self, members):
        members = np.asarray(members, dtype=np.float64)
        self.members = members  # (T, N, C)
        self.probs = members.mean(axis=0) if members.shape[1] else np.zeros((0, members.shape[2]))
        self.uncertainty = kernels.row_entropy(self.probs) if len(self.probs) else np.zeros(0)

    def __len__(self):
        return self.probs.shape[0]

    def __getitem__(self, i):
        return Prediction(self.probs[i], float(self.uncertainty[i]), self.members[:, i])

    @property
    def labels(self):
        return self.probs.argmax(axis=1)

    @property
    def confidence(self):
        return self.probs.max(axis=1)


def entropy(probs):
    return kernels.row_entropy(np.atleast_2d(probs))


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# ------------------------------------------------------------------ model


class NPModel:
    """Parameters plus the two memory banks."""

    def __init__(self, cfg, seed=0, params=None, latent_bank=None, det_bank=None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        M = cfg.hidden_units
        ss = np.random.SeedSequence([seed, 0xBA4C])
        s_lat, s_det = ss.spawn(2)
        self.latent_bank = latent_bank or MemoryBank.with_random_vector(
            cfg.bank_capacity, M, s_lat)
        self.det_bank = det_bank or MemoryBank.with_random_vector(
            cfg.bank_capacity, M, s_det)

    def with_params(self, arrays):
        """A view sharing the banks but using the given parameter values."""
        params = {k: dc.Tensor(np.asarray(v), name=k) for k, v in arrays.items()}
        return NPModel(self.cfg, params=params, latent_bank=self.latent_bank,
                       det_bank=self.det_bank)

    def param_arrays(self):
        return {k: t.data for k, t in self.params.items()}

    def features(self, x):
        return backbone_forward(x, self.params, self.cfg)

    def context_summaries(self, context=None):
        """(q(z), deterministic representation) from a context set or the banks."""
        if context is None:
            r = dc.Tensor(self.latent_bank.summary())
            d = dc.Tensor(self.det_bank.summary())
        else:
            feats, labels = context
            y = labels if np.ndim(labels) == 2 else one_hot(labels, self.cfg.n_classes)
            r = aggregate(encode_points(feats, y, self.params, "latent"))
            d = aggregate(encode_points(feats, y, self.params, "det"))
        return latent_distribution(r, self.params), d

    def predict(self, features, T=10, seed=0, context=None):
        """Averaged predictions over T latent draws.

        With ``context=None`` the model is in inference mode and summarises
        the memory banks; otherwise ``context=(features, labels)`` is encoded
        directly. Targets are evaluated in canonical row order.
        """
        f = np.asarray(features.data if isinstance(features, dc.Tensor) else features)
        C = self.cfg.n_classes
        if f.shape[0] == 0:
            return PredictionBatch(np.zeros((T, 0, C)))
        with dc.no_grad():
            dist, d = self.context_summaries(context)
            z = sample_latent(dist, T, seed)
            order = canonical_order(f)
            members = decode_classify(f[order], z, d, self.params)
        inverse = np.argsort(order)
        return PredictionBatch(members[:, inverse])

    def predict_inputs(self, x, T=10, seed=0, context=None, batch_size=1024):
        with dc.no_grad():
            parts = []
            for start in range(0, len(x), batch_size):
                parts.append(self.features(x[start:start + batch_size]).data)
        feats = np.concatenate(parts) if parts else np.zeros((0, self.cfg.feature_dim))
        return self.predict(feats, T=T, seed=seed, context=context)


def predict(features, model, T=10, seed=0, context=None):
    return model.predict(features, T=T, seed=seed, context=context)
