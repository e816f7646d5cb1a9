"""
The FENet network.

Data flow for one batch of 60-second RR epochs ``X`` (batch, 60)::

    branch r:  x -> conv(d1_r) -> BN -> ReLU -> conv(2) -> BN -> ReLU
                 -> conv(4) -> BN -> ReLU -> conv(8),  G_r = x + that
    H   = stack of G_r over branches                    (batch, |D|, 60)
    H'  = ReLU(BN(conv(H)))                              (batch, l, 60)
    H^  = three conv -> BN -> ReLU layers                (batch, 4, 60)
    head h: softmax(FC_h(dropout(flatten(H^))))          (batch, 2m+1, 2)

Only the bottom convolution of each branch is branch-specific. The upper
three layers of every branch use a single shared kernel (``shared.conv``).
Each branch layer keeps its own batch-norm parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from fenet import nn
from fenet.errors import ConfigError, FormatError, InvalidInputError

CHECKPOINT_MAGIC = "fenet-ckpt v1"
KERNEL_WIDTHS = (3, 5, 7)


def filter_frequency(d, freq_s: float = 1.0) -> float:
    """Centre frequency (Hz) picked up by a filter of dilation ``d``."""
    if d < 1 or freq_s <= 0:
        raise InvalidInputError("need d >= 1 and freq_s > 0")
    return freq_s / d


@dataclass(frozen=True)
class BranchConfig:
    dilations: tuple = (3, 2, 4, 8)
    width: int = 3
    freq_s: float = 1.0

    def __post_init__(self):
        d = tuple(int(v) for v in self.dilations)
        if len(d) != 4 or d[1:] != (2, 4, 8):
            raise ConfigError(f"branch dilations must be (d1, 2, 4, 8), got {d}")
        if d[0] < 3:
            raise ConfigError(f"d1 must be >= 3, got {d[0]}")
        if self.width not in KERNEL_WIDTHS:
            raise ConfigError(f"kernel width must be one of {KERNEL_WIDTHS}")
        object.__setattr__(self, "dilations", d)

    @property
    def frequencies(self):
        return tuple(filter_frequency(d, self.freq_s) for d in self.dilations)


@dataclass(frozen=True)
class FENetConfig:
    m: int = 1
    d1_values: tuple = (3, 4, 5, 6)
    upper_dilations: tuple = (2, 4, 8)
    width: int = 3
    n_extract: int = 1
    trunk_channels: tuple = (8, 8, 4)
    trunk_width: int = 3
    dropout: float = 0.5
    length: int = 60
    freq_s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "d1_values", tuple(int(v) for v in self.d1_values))
        object.__setattr__(self, "upper_dilations", tuple(int(v) for v in self.upper_dilations))
        object.__setattr__(self, "trunk_channels", tuple(int(v) for v in self.trunk_channels))
        if self.m < 0:
            raise ConfigError("m must be non-negative")
        if not self.d1_values:
            raise InvalidInputError("at least one branch is required")
        for d1 in self.d1_values:
            BranchConfig((d1, *self.upper_dilations), self.width, self.freq_s)
        if not 1 <= self.n_extract <= len(self.d1_values):
            raise ConfigError(
                f"extractor width l={self.n_extract} must lie in 1..{len(self.d1_values)}"
            )
        if len(self.trunk_channels) != 3 or min(self.trunk_channels) < 1:
            raise ConfigError("the classifier trunk has exactly three conv layers")
        if self.trunk_width % 2 == 0:
            raise ConfigError("trunk kernel width must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.length < 1:
            raise ConfigError("length must be positive")

    @property
    def n_heads(self) -> int:
        return 2 * self.m + 1

    @property
    def branches(self):
        return [BranchConfig((d1, *self.upper_dilations), self.width, self.freq_s)
                for d1 in self.d1_values]


def _param_shapes(cfg: FENetConfig):
    """Canonical (name, shape) order; checkpoints are written in this order."""
    w = cfg.width
    shapes = []
    for r in range(len(cfg.d1_values)):
        shapes += [(f"branch{r}.conv1.weight", (1, 1, w)), (f"branch{r}.conv1.bias", (1,))]
    shapes += [("shared.conv.weight", (1, 1, w)), ("shared.conv.bias", (1,))]
    for r in range(len(cfg.d1_values)):
        for k in (1, 2, 3):
            shapes += [(f"branch{r}.bn{k}.gamma", (1,)), (f"branch{r}.bn{k}.beta", (1,))]
    nd, ne = len(cfg.d1_values), cfg.n_extract
    shapes += [
        ("extract.conv.weight", (ne, nd, w)),
        ("extract.conv.bias", (ne,)),
        ("extract.bn.gamma", (ne,)),
        ("extract.bn.beta", (ne,)),
    ]
    c_in = ne
    for k, c_out in enumerate(cfg.trunk_channels, 1):
        shapes += [
            (f"trunk{k}.conv.weight", (c_out, c_in, cfg.trunk_width)),
            (f"trunk{k}.conv.bias", (c_out,)),
            (f"trunk{k}.bn.gamma", (c_out,)),
            (f"trunk{k}.bn.beta", (c_out,)),
        ]
        c_in = c_out
    flat = cfg.trunk_channels[-1] * cfg.length
    for h in range(cfg.n_heads):
        shapes += [(f"head{h}.weight", (2, flat)), (f"head{h}.bias", (2,))]
    return shapes


def _buffer_shapes(cfg: FENetConfig):
    shapes = []
    for name, shape in _param_shapes(cfg):
        if name.endswith(".gamma"):
            prefix = name[: -len(".gamma")]
            shapes += [(f"{prefix}.running_mean", shape), (f"{prefix}.running_var", shape)]
    return shapes


def init_params(cfg: FENetConfig, seed=0):
    """Uniform(+-1/sqrt(fan_in)) weights and biases; BN scale 1, shift 0."""
    rng = np.random.default_rng(seed)
    shapes = _param_shapes(cfg)
    lookup = dict(shapes)
    params = {}
    for name, shape in shapes:
        if name.endswith(".gamma"):
            params[name] = np.ones(shape)
        elif name.endswith(".beta"):
            params[name] = np.zeros(shape)
        else:
            layer = name.rsplit(".", 1)[0]
            fan_in = int(np.prod(lookup[f"{layer}.weight"][1:]))
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    buffers = {}
    for name, shape in _buffer_shapes(cfg):
        buffers[name] = np.zeros(shape) if name.endswith("mean") else np.ones(shape)
    return params, buffers


@dataclass
class _Block:
    """Saved state of one conv[-BN-ReLU] block, for the reverse pass."""

    inp: np.ndarray
    weight: str
    bias: str
    d: int
    bn: str | None = None
    bn_cache: tuple | None = None
    pre_relu: np.ndarray | None = None


@dataclass
class ForwardCache:
    branches: list = field(default_factory=list)
    extract: _Block | None = None
    trunk: list = field(default_factory=list)
    flat: np.ndarray | None = None
    dropout_mask: np.ndarray | None = None
    probs: np.ndarray | None = None

    def relu_pattern(self):
        """Sign pattern of every ReLU input; used to spot kinks inside finite-difference stencils."""
        blocks = [b for br in self.branches for b in br] + [self.extract] + self.trunk
        return [b.pre_relu > 0 for b in blocks if b.pre_relu is not None]


class FENet:
    def __init__(self, config: FENetConfig | None = None, seed=0, params=None, buffers=None):
        self.config = config or FENetConfig()
        if params is None:
            params, fresh_buffers = init_params(self.config, seed)
            buffers = fresh_buffers if buffers is None else buffers
        elif buffers is None:
            _, buffers = init_params(self.config, 0)
        expected = dict(_param_shapes(self.config))
        if set(params) != set(expected):
            raise ConfigError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if np.shape(params[name]) != shape:
                raise ConfigError(f"{name}: shape {np.shape(params[name])}, expected {shape}")
        self.params = {k: np.array(v, dtype=float) for k, v in params.items()}
        self.buffers = {k: np.array(v, dtype=float) for k, v in buffers.items()}
        self._bn_momentum = nn.BN_MOMENTUM

    # -- plumbing ---------------------------------------------------------

    def copy(self) -> "FENet":
        return FENet(self.config, params=self.params, buffers=self.buffers)

    def param_names(self):
        return [name for name, _ in _param_shapes(self.config)]

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def _block(self, x, weight, bias, d, bn, train):
        z = nn.conv1d_dilated(x, self.params[weight], self.params[bias], d)
        block = _Block(x, weight, bias, d)
        if bn is None:
            return z, block
        y, bn_cache = nn.batch_norm(
            z,
            self.params[f"{bn}.gamma"],
            self.params[f"{bn}.beta"],
            self.buffers[f"{bn}.running_mean"],
            self.buffers[f"{bn}.running_var"],
            train=train,
            momentum=self._bn_momentum,
        )
        block.bn, block.bn_cache, block.pre_relu = bn, bn_cache, y
        return nn.relu(y), block

    def _block_backward(self, g, block, grads):
        if block.bn is not None:
            g = nn.relu_backward(g, block.pre_relu)
            g, g_gamma, g_beta = nn.batch_norm_backward(g, block.bn_cache)
            grads[f"{block.bn}.gamma"] += g_gamma
            grads[f"{block.bn}.beta"] += g_beta
        gx, gw, gb = nn.conv1d_dilated_backward(g, block.inp, self.params[block.weight], block.d)
        grads[block.weight] += gw
        grads[block.bias] += gb
        return gx

    def _check_input(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        if single:
            X = X[None]
        if X.ndim != 2 or X.shape[1] != self.config.length:
            raise InvalidInputError(
                f"expected epochs of length {self.config.length}, got shape {X.shape}"
            )
        return X, single

    # -- forward pieces ---------------------------------------------------

    def _branch(self, x3, r, train):
        cfg = self.config
        d1 = cfg.d1_values[r]
        d2, d3, d4 = cfg.upper_dilations
        blocks = []
        h, b = self._block(x3, f"branch{r}.conv1.weight", f"branch{r}.conv1.bias", d1,
                           f"branch{r}.bn1", train)
        blocks.append(b)
        for k, d in ((2, d2), (3, d3)):
            h, b = self._block(h, "shared.conv.weight", "shared.conv.bias", d,
                               f"branch{r}.bn{k}", train)
            blocks.append(b)
        h, b = self._block(h, "shared.conv.weight", "shared.conv.bias", d4, None, train)
        blocks.append(b)
        return nn.residual_add(x3, h), blocks

    def forward(self, X, train: bool = False, rng=None):
        """Batched forward pass. Returns ``(probs, logits, cache)``; probs is (batch, heads, 2)."""
        cfg = self.config
        X, _ = self._check_input(X)
        x3 = X[:, None, :]
        cache = ForwardCache()
        rows = []
        for r in range(len(cfg.d1_values)):
            g, blocks = self._branch(x3, r, train)
            rows.append(g)
            cache.branches.append(blocks)
        H = nn.concat(rows, axis=1)
        h, cache.extract = self._block(H, "extract.conv.weight", "extract.conv.bias", 1,
                                       "extract.bn", train)
        for k in (1, 2, 3):
            h, b = self._block(h, f"trunk{k}.conv.weight", f"trunk{k}.conv.bias", 1,
                               f"trunk{k}.bn", train)
            cache.trunk.append(b)
        flat = h.reshape(h.shape[0], -1)
        dropped, cache.dropout_mask = nn.dropout(flat, cfg.dropout, train, rng)
        cache.flat = dropped
        logits = np.stack(
            [nn.fully_connected(dropped, self.params[f"head{i}.weight"], self.params[f"head{i}.bias"])
             for i in range(cfg.n_heads)],
            axis=1,
        )
        cache.probs = nn.softmax(logits, axis=-1)
        return cache.probs, logits, cache

    def backward(self, cache: ForwardCache, grad_logits):
        """Gradients of a scalar loss for every parameter, given d loss / d logits."""
        cfg = self.config
        grads = self.zero_grads()
        g_flat = np.zeros_like(cache.flat)
        for i in range(cfg.n_heads):
            gx, gw, gb = nn.fully_connected_backward(
                grad_logits[:, i, :], cache.flat, self.params[f"head{i}.weight"]
            )
            g_flat += gx
            grads[f"head{i}.weight"] += gw
            grads[f"head{i}.bias"] += gb
        g_flat = nn.dropout_backward(g_flat, cache.dropout_mask)
        g = g_flat.reshape(g_flat.shape[0], cfg.trunk_channels[-1], cfg.length)
        for block in reversed(cache.trunk):
            g = self._block_backward(g, block, grads)
        g_H = self._block_backward(g, cache.extract, grads)
        for r, blocks in enumerate(cache.branches):
            g_r = g_H[:, r:r + 1, :]
            g = g_r
            for block in reversed(blocks):
                g = self._block_backward(g, block, grads)
        # the residual path's input gradient is not needed: X is data
        return grads

    def recalibrate_bn(self, X, max_rows: int = 4096, seed=0):
        """Replace running BN statistics with the statistics of ``X`` under the current weights.

        Statistics come from one train-mode pass over (at most ``max_rows`` of)
        ``X``; nothing else changes.
        """
        X, _ = self._check_input(X)
        rng = np.random.default_rng(seed)
        if len(X) > max_rows:
            X = X[np.sort(rng.choice(len(X), max_rows, replace=False))]
        self._bn_momentum = 1.0
        try:
            self.forward(X, train=True, rng=rng)
        finally:
            self._bn_momentum = nn.BN_MOMENTUM

    # -- inference views --------------------------------------------------

    def branch_forward(self, x, r: int):
        """``G_d(x)`` for branch ``r`` at inference; ``x`` is one epoch or a batch."""
        X, single = self._check_input(x)
        g, _ = self._branch(X[:, None, :], r, train=False)
        return g[0, 0] if single else g[:, 0]

    def multi_branch(self, x):
        X, single = self._check_input(x)
        H = nn.concat(
            [self._branch(X[:, None, :], r, train=False)[0] for r in range(len(self.config.d1_values))],
            axis=1,
        )
        return H[0] if single else H

    def extract_features(self, H):
        H = np.asarray(H, dtype=float)
        single = H.ndim == 2
        Hb = H[None] if single else H
        if Hb.shape[1] != len(self.config.d1_values):
            raise InvalidInputError("feature map rows must match the number of branches")
        out, _ = self._block(Hb, "extract.conv.weight", "extract.conv.bias", 1, "extract.bn", False)
        return out[0] if single else out

    def classify(self, Hp, m: int | None = None):
        """Per-head ``(P(0), P(1))`` pairs from the extractor output."""
        cfg = self.config
        if m is not None and m != cfg.m:
            raise ConfigError(f"model has {cfg.n_heads} heads, cannot serve m={m}")
        Hp = np.asarray(Hp, dtype=float)
        single = Hp.ndim == 2
        h = Hp[None] if single else Hp
        for k in (1, 2, 3):
            h, _ = self._block(h, f"trunk{k}.conv.weight", f"trunk{k}.conv.bias", 1,
                               f"trunk{k}.bn", False)
        flat = h.reshape(h.shape[0], -1)
        logits = np.stack(
            [nn.fully_connected(flat, self.params[f"head{i}.weight"], self.params[f"head{i}.bias"])
             for i in range(cfg.n_heads)],
            axis=1,
        )
        probs = nn.softmax(logits, axis=-1)
        return probs[0] if single else probs

    def predict_proba(self, X, batch_size: int = 512):
        X, single = self._check_input(X)
        out = [self.forward(X[i:i + batch_size], train=False)[0] for i in range(0, len(X), batch_size)]
        probs = np.concatenate(out) if out else np.zeros((0, self.config.n_heads, 2))
        return probs[0] if single else probs

    def predict(self, X, m: int | None = None):
        """Hard labels ``a[i-m] .. a[i+m]`` per epoch; ties go to 0."""
        if m is not None and m != self.config.m:
            raise ConfigError(f"model has {self.config.n_heads} heads, cannot serve m={m}")
        return hard_labels(self.predict_proba(X))


def hard_labels(probs):
    probs = np.asarray(probs)
    return (probs[..., 1] > probs[..., 0]).astype(np.int8)


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

_CONFIG_KEYS = [
    "m", "d1_values", "upper_dilations", "width", "n_extract",
    "trunk_channels", "trunk_width", "dropout", "length", "freq_s",
]


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_checkpoint(model: FENet, path) -> None:
    cfg = asdict(model.config)
    lines = [CHECKPOINT_MAGIC]
    for key in _CONFIG_KEYS:
        value = cfg[key]
        if isinstance(value, (tuple, list)):
            lines.append(f"{key} {','.join(str(int(v)) for v in value)}")
        elif isinstance(value, float):
            lines.append(f"{key} {_fmt(value)}")
        else:
            lines.append(f"{key} {value}")
    blocks = [(n, model.params[n]) for n, _ in _param_shapes(model.config)]
    blocks += [(n, model.buffers[n]) for n, _ in _buffer_shapes(model.config)]
    lines.append(f"blocks {len(blocks)}")
    for name, arr in blocks:
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"{name} {shape} " + " ".join(_fmt(v) for v in arr.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_checkpoint(path) -> FENet:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise FormatError(f"not a {CHECKPOINT_MAGIC!r} checkpoint", 1)
    raw = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("blocks "):
        key, _, value = lines[i].partition(" ")
        if key not in _CONFIG_KEYS:
            raise FormatError(f"unknown config key {key!r}", i + 1)
        raw[key] = value.strip()
        i += 1
    if i >= len(lines):
        raise FormatError("missing parameter blocks")
    missing = set(_CONFIG_KEYS) - set(raw)
    if missing:
        raise FormatError(f"missing config keys {sorted(missing)}")
    kwargs = {}
    try:
        for key, value in raw.items():
            if key in ("d1_values", "upper_dilations", "trunk_channels"):
                kwargs[key] = tuple(int(v) for v in value.split(","))
            elif key in ("dropout", "freq_s"):
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        n_blocks = int(lines[i].split()[1])
    except (ValueError, IndexError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from None
    cfg = FENetConfig(**kwargs)
    start = i + 1
    arrays = {}
    for lineno in range(start, start + n_blocks):
        if lineno >= len(lines):
            raise FormatError("truncated checkpoint", lineno + 1)
        parts = lines[lineno].split()
        if len(parts) < 2:
            raise FormatError("malformed parameter block", lineno + 1)
        try:
            name, shape = parts[0], tuple(int(s) for s in parts[1].split("x"))
            values = np.array([float(v) for v in parts[2:]])
        except ValueError as exc:
            raise FormatError(str(exc), lineno + 1) from None
        if values.size != int(np.prod(shape)):
            raise FormatError(f"{name}: {values.size} values for shape {shape}", lineno + 1)
        arrays[name] = values.reshape(shape)
    param_names = [n for n, _ in _param_shapes(cfg)]
    buffer_names = [n for n, _ in _buffer_shapes(cfg)]
    if set(arrays) != set(param_names) | set(buffer_names):
        raise FormatError("parameter blocks do not match the stored configuration")
    return FENet(
        cfg,
        params={n: arrays[n] for n in param_names},
        buffers={n: arrays[n] for n in buffer_names},
    )

