"""ConvVitMamba forward graph.

patch (N,S,S,B) -> multiscale 3D-conv extractor -> 1×1 fusion to D channels
-> S·S tokens + learned positions -> pre-norm transformer encoder
-> gated token mixing -> mean pool -> two-layer head -> logits (N,K)
"""
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

import tensor_engine as te
from exceptions import ConfigurationError, DimensionError
from utils import setup_logging

logger = setup_logging()

# branch name -> kernel extents over (height, width, spectral depth)
MSFE_BRANCHES = (
    ("spatial", (3, 3, 1)),
    ("spectral", (1, 1, 3)),
    ("joint", (3, 3, 3)),
)

# FLOPs charged per element for pointwise work
POINTWISE_COST = {
    "add": 1,
    "mul": 1,
    "relu": 1,
    "scale": 1,
    "sigmoid": 4,
    "gelu": 8,
    "softmax": 3,
    "layernorm": 5,
}


@dataclass
class ModelConfig:
    patch_size: int = 9
    input_bands: int = 20
    ms_filters: int = 32
    embed_dim: int = 64
    heads: int = 4
    encoder_layers: int = 2
    mlp_ratio: int = 2
    mamba_expand: float = 2
    mamba_kernel: int = 3
    head_hidden: int = 128
    num_classes: int = 15
    use_msfe: bool = True
    use_vit: bool = True
    use_mamba: bool = True
    dropout: float = 0.1
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    @property
    def tokens(self):
        return self.patch_size * self.patch_size

    @property
    def expanded_dim(self):
        return int(round(self.mamba_expand * self.embed_dim))

    @property
    def fuse_in(self):
        if self.use_msfe:
            return len(MSFE_BRANCHES) * self.ms_filters * self.input_bands
        return self.input_bands

    def validate(self):
        if not (self.use_msfe or self.use_vit or self.use_mamba):
            raise ConfigurationError("at least one of use_msfe, use_vit, use_mamba must be enabled")
        if self.ms_filters <= 0:
            raise ConfigurationError(f"ms_filters must be positive, got {self.ms_filters}")
        if self.embed_dim <= 0 or self.heads <= 0 or self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        expanded = self.mamba_expand * self.embed_dim
        if expanded <= 0 or abs(expanded - round(expanded)) > 1e-9:
            raise ConfigurationError(f"mamba_expand·embed_dim = {expanded} is not a positive integer")
        if self.mamba_kernel < 1 or self.mamba_kernel % 2 == 0:
            raise ConfigurationError(f"mamba_kernel must be odd, got {self.mamba_kernel}")
        if self.patch_size < 1 or self.input_bands < 1 or self.num_classes < 1:
            raise ConfigurationError("patch_size, input_bands and num_classes must be positive")
        if self.encoder_layers < 0 or self.mlp_ratio < 1 or self.head_hidden < 1:
            raise ConfigurationError("encoder_layers, mlp_ratio and head_hidden are out of range")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"unknown model config key '{unknown[0]}'")
        return cls(**raw)

    def with_toggles(self, use_msfe, use_vit, use_mamba):
        raw = self.to_dict()
        raw.update(use_msfe=use_msfe, use_vit=use_vit, use_mamba=use_mamba)
        return ModelConfig(**raw)


# ---------------------------------------------------------------- parameters

def linear_params(fan_in, fan_out, bias=True):
    return fan_in * fan_out + (fan_out if bias else 0)


def parameter_shapes(config):
    """Ordered name -> shape for every tensor of the model."""
    shapes = {}
    d, f, e = config.embed_dim, config.ms_filters, config.expanded_dim
    if config.use_msfe:
        for branch, kernel in MSFE_BRANCHES:
            shapes[f"msfe.{branch}.conv1.w"] = (*kernel, 1, f)
            shapes[f"msfe.{branch}.conv1.b"] = (f,)
            shapes[f"msfe.{branch}.conv2.w"] = (*kernel, f, f)
            shapes[f"msfe.{branch}.conv2.b"] = (f,)
    shapes["fuse.w"] = (config.fuse_in, d)
    shapes["fuse.b"] = (d,)
    shapes["pos_embed"] = (config.tokens, d)
    if config.use_vit:
        hidden = config.mlp_ratio * d
        for layer in range(config.encoder_layers):
            prefix = f"vit.{layer}"
            for norm in ("ln1", "ln2"):
                shapes[f"{prefix}.{norm}.gamma"] = (d,)
                shapes[f"{prefix}.{norm}.beta"] = (d,)
            for proj in ("Wq", "Wk", "Wv", "Wo"):
                shapes[f"{prefix}.{proj}.w"] = (d, d)
                shapes[f"{prefix}.{proj}.b"] = (d,)
            shapes[f"{prefix}.mlp1.w"] = (d, hidden)
            shapes[f"{prefix}.mlp1.b"] = (hidden,)
            shapes[f"{prefix}.mlp2.w"] = (hidden, d)
            shapes[f"{prefix}.mlp2.b"] = (d,)
    if config.use_mamba:
        shapes["mamba.W_in"] = (d, 2 * e)
        shapes["mamba.conv_w"] = (config.mamba_kernel, e)
        shapes["mamba.conv_b"] = (e,)
        shapes["mamba.W_o"] = (e, d)
    shapes["head.fc1.w"] = (d, config.head_hidden)
    shapes["head.fc1.b"] = (config.head_hidden,)
    shapes["head.fc2.w"] = (config.head_hidden, config.num_classes)
    shapes["head.fc2.b"] = (config.num_classes,)
    return shapes


def _fans(name, shape):
    if len(shape) == 5:
        volume = shape[0] * shape[1] * shape[2]
        return volume * shape[3], volume * shape[4]
    if name == "mamba.conv_w":
        return shape[0], shape[0]
    return shape[0], shape[1]


def init_params(config, seed=0, dtype=te.DEFAULT_DTYPE):
    """Glorot-uniform weights; zero biases and positions; unit LayerNorm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif len(shape) == 1 or name == "pos_embed":
            data = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(name, shape)
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = te.Tensor(data, requires_grad=True, dtype=dtype, name=name)
    return params


def count_params(config):
    """Exact parameter count, derived from the architecture formulas."""
    d, f, e, k = config.embed_dim, config.ms_filters, config.expanded_dim, config.mamba_kernel
    total = 0
    if config.use_msfe:
        for _, kernel in MSFE_BRANCHES:
            volume = kernel[0] * kernel[1] * kernel[2]
            total += volume * 1 * f + f + volume * f * f + f
    total += linear_params(config.fuse_in, d)
    total += config.tokens * d
    if config.use_vit:
        hidden = config.mlp_ratio * d
        per_layer = 2 * 2 * d + 4 * linear_params(d, d) + linear_params(d, hidden) + linear_params(hidden, d)
        total += config.encoder_layers * per_layer
    if config.use_mamba:
        total += d * 2 * e + k * e + e + e * d
    total += linear_params(d, config.head_hidden) + linear_params(config.head_hidden, config.num_classes)
    return total


def matmul_macs(m, k, n):
    return m * k * n


def complexity_breakdown(config):
    """Per-stage (flops, macs) for one sample's forward pass."""
    t, b, d = config.tokens, config.input_bands, config.embed_dim
    f, e, k = config.ms_filters, config.expanded_dim, config.mamba_kernel
    stages = {}

    def charge(stage, macs=0, **pointwise):
        flops = 2 * macs + sum(POINTWISE_COST[op] * count for op, count in pointwise.items())
        prev = stages.get(stage, (0, 0))
        stages[stage] = (prev[0] + flops, prev[1] + macs)

    if config.use_msfe:
        cells = t * b
        for _, kernel in MSFE_BRANCHES:
            volume = kernel[0] * kernel[1] * kernel[2]
            charge("msfe", macs=cells * f * volume * 1, add=cells * f, relu=cells * f)
            charge("msfe", macs=cells * f * volume * f, add=cells * f, relu=cells * f)
    charge("fusion", macs=matmul_macs(t, config.fuse_in, d), add=t * d, relu=t * d)
    charge("tokenize", add=t * d)
    if config.use_vit:
        hidden = config.mlp_ratio * d
        heads = config.heads
        for _ in range(config.encoder_layers):
            charge("vit", layernorm=2 * t * d)
            charge("vit", macs=3 * matmul_macs(t, d, d), add=3 * t * d)
            charge("vit", macs=matmul_macs(t, d, t), scale=heads * t * t, softmax=heads * t * t)
            charge("vit", macs=matmul_macs(t, t, d))
            charge("vit", macs=matmul_macs(t, d, d), add=2 * t * d)
            charge("vit", macs=matmul_macs(t, d, hidden) + matmul_macs(t, hidden, d),
                   add=t * hidden + 2 * t * d, gelu=t * hidden)
    if config.use_mamba:
        charge("mamba", macs=matmul_macs(t, d, 2 * e))
        charge("mamba", macs=t * e * k, add=t * e)
        charge("mamba", gelu=t * e, sigmoid=t * e, mul=t * e)
        charge("mamba", macs=matmul_macs(t, e, d), add=t * d)
    h, classes = config.head_hidden, config.num_classes
    charge("head", add=t * d, scale=d)
    charge("head", macs=matmul_macs(1, d, h) + matmul_macs(1, h, classes), add=h + classes, gelu=h)
    return stages


def count_flops(config):
    """(FLOPs, MACs) per single-sample forward; FLOPs = 2·MACs + pointwise work."""
    stages = complexity_breakdown(config)
    return sum(v[0] for v in stages.values()), sum(v[1] for v in stages.values())


# ---------------------------------------------------------------- forward pieces

def msfe_forward(patch, params, config):
    """Three parallel two-layer conv3d branches, concatenated then fused to D channels.

    Args:
        patch (Tensor): (N, S, S, B, 1)

    Returns:
        Tensor: (N, S, S, D)
    """
    if config.ms_filters <= 0:
        raise ConfigurationError(f"ms_filters must be positive, got {config.ms_filters}")
    n, s, _, b, _ = patch.shape
    outputs = []
    for branch, _ in MSFE_BRANCHES:
        h = patch
        for layer in ("conv1", "conv2"):
            prefix = f"msfe.{branch}.{layer}"
            h = te.relu(te.conv3d(h, params[f"{prefix}.w"], params[f"{prefix}.b"], padding="same"))
        outputs.append(h)
    stacked = te.concat(outputs, axis=-1)
    flat = te.reshape(stacked, (n, s, s, b * stacked.shape[-1]))
    return te.relu(te.linear(flat, params["fuse.w"], params["fuse.b"]))


def feature_stage(patch, params, config):
    """MS_FE when enabled; otherwise the raw bands go straight through the 1×1 fusion."""
    if config.use_msfe:
        return msfe_forward(patch, params, config)
    n, s, _, b, _ = patch.shape
    flat = te.reshape(patch, (n, s, s, b))
    return te.relu(te.linear(flat, params["fuse.w"], params["fuse.b"]))


def tokenize(features, params, config, training=False, rng=None):
    """Row-major flatten of the S×S cells into T tokens plus learned positions."""
    n, s, s2, d = features.shape
    tokens = te.reshape(features, (n, s * s2, d))
    tokens = te.add(tokens, params["pos_embed"])
    return te.dropout(tokens, config.dropout, rng, training)


def scaled_dot_attention(q, k, v):
    """softmax(q·kᵀ/√d)·v over (..., T, d) operands; returns (context, weights)."""
    d = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = te.scale(te.bmm(q, te.transpose(k, axes)), 1.0 / math.sqrt(d))
    weights = te.softmax_lastaxis(scores)
    return te.bmm(weights, v), weights


def multi_head_attention(x, params, prefix, heads):
    n, t, d = x.shape
    head_dim = d // heads

    def split_heads(name):
        projected = te.linear(x, params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"])
        return te.transpose(te.reshape(projected, (n, t, heads, head_dim)), (0, 2, 1, 3))

    context, _ = scaled_dot_attention(split_heads("Wq"), split_heads("Wk"), split_heads("Wv"))
    merged = te.reshape(te.transpose(context, (0, 2, 1, 3)), (n, t, d))
    return te.linear(merged, params[f"{prefix}.Wo.w"], params[f"{prefix}.Wo.b"])


def vit_encoder(x, params, config):
    """L pre-norm blocks: x += MHSA(LN(x)); x += MLP(LN(x))."""
    if config.embed_dim % config.heads:
        raise ConfigurationError(f"embed_dim {config.embed_dim} is not divisible by heads {config.heads}")
    for layer in range(config.encoder_layers):
        prefix = f"vit.{layer}"
        h = te.layernorm(x, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"], config.ln_eps)
        x = te.add(x, multi_head_attention(h, params, prefix, config.heads))
        h = te.layernorm(x, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"], config.ln_eps)
        h = te.gelu(te.linear(h, params[f"{prefix}.mlp1.w"], params[f"{prefix}.mlp1.b"]))
        x = te.add(x, te.linear(h, params[f"{prefix}.mlp2.w"], params[f"{prefix}.mlp2.b"]))
    return x


def mamba_mix(x, params, config):
    """Gated token mixing: expand, depthwise token conv, GELU ⊙ σ gate, project, residual.

    [U | G] = x·W_in;  U_c = conv1d(U);  U_m = GELU(U_c) ⊙ σ(G);  y = x + U_m·W_o
    """
    e = config.expanded_dim
    u, g = te.split_last(te.matmul(x, params["mamba.W_in"]), (e, e))
    u_c = te.conv1d_tokens(u, params["mamba.conv_w"], params["mamba.conv_b"])
    u_m = te.mul(te.gelu(u_c), te.sigmoid(g))
    return te.add(x, te.matmul(u_m, params["mamba.W_o"]))


def head_forward(x, params, config, training=False, rng=None):
    pooled = te.mean(x, axis=1)
    h = te.gelu(te.linear(pooled, params["head.fc1.w"], params["head.fc1.b"]))
    h = te.dropout(h, config.dropout, rng, training)
    return te.linear(h, params["head.fc2.w"], params["head.fc2.b"])


def forward(patches, params, config, mode="eval", rng=None):
    """Logits (N, K) for a batch of (N, S, S, B) patches.

    Eval mode is deterministic; train mode draws dropout masks from ``rng``.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"unknown mode '{mode}'")
    dtype = params["fuse.w"].dtype
    x = patches if isinstance(patches, te.Tensor) else te.Tensor(patches, dtype=dtype)
    if x.dtype != dtype and not x.requires_grad:
        x = x.astype(dtype)
    expected = (config.patch_size, config.patch_size, config.input_bands)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise DimensionError(f"expected patches of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
    training = mode == "train"
    if training and rng is None:
        rng = np.random.default_rng(0)

    n = x.shape[0]
    h = feature_stage(te.reshape(x, (n, *expected, 1)), params, config)
    h = tokenize(h, params, config, training, rng)
    if config.use_vit:
        h = vit_encoder(h, params, config)
    if config.use_mamba:
        h = mamba_mix(h, params, config)
    return head_forward(h, params, config, training, rng)


def predict_classes(logits):
    """Argmax over classes as 1-based ids; ties resolve to the lowest id."""
    data = logits.data if isinstance(logits, te.Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1).astype(np.int64) + 1


def predict_patches(patches, params, config, batch_size=256):
    """Eval-mode class ids (1-based) for an (N, S, S, B) array, in input order."""
    preds = np.empty(len(patches), dtype=np.int64)
    with te.no_grad():
        for start in range(0, len(patches), batch_size):
            logits = forward(patches[start:start + batch_size], params, config, mode="eval")
            preds[start:start + batch_size] = predict_classes(logits)
    return preds
