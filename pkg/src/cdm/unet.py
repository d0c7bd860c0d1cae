"""U-Net denoiser: residual blocks over a downsample/upsample pyramid with
concatenation skips, plus every conditioning pathway the cascade needs
(timestep or continuous noise level, class label, upsampled low-resolution
image, augmentation truncation time).

Parameters are float32 by default; a float64 build is used by the gradient
check suites.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .tensor import Tensor

DISCRETE = "discrete"
CONTINUOUS = "continuous"

# scale applied to log(abar / (1 - abar)) before sinusoidal embedding, so
# continuous noise levels span a range comparable to discrete timesteps
LOGSNR_EMBED_SCALE = 100.0


@dataclass(frozen=True)
class ConditioningSpec:
    class_count: int = 0  # 0 = unconditional
    lowres_conditioning: bool = False
    aug_level_input: bool = False
    noise_conditioning: str = DISCRETE

    def validate(self) -> None:
        if self.class_count < 0:
            raise ValueError("class_count must be >= 0")
        if self.aug_level_input and not self.lowres_conditioning:
            raise ValueError("aug_level_input is only valid on super-resolution stages")
        if self.noise_conditioning not in (DISCRETE, CONTINUOUS):
            raise ValueError(f"unknown noise_conditioning '{self.noise_conditioning}'")


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int
    channel_multipliers: tuple[int, ...]
    res_blocks_per_resolution: int
    input_resolution: int
    dropout: float = 0.0
    use_attention_at: tuple[int, ...] = ()
    conditioning: ConditioningSpec = field(default_factory=ConditioningSpec)
    image_channels: int = 3
    learned_variances: bool = True

    def validate(self) -> None:
        k = len(self.channel_multipliers)
        if k < 1:
            raise ValueError("at least one channel multiplier required")
        if self.input_resolution % (1 << (k - 1)) != 0:
            raise ValueError(f"input resolution {self.input_resolution} not divisible "
                             f"by 2^{k - 1}")
        if any(self.base_channels * m < 1 for m in self.channel_multipliers):
            raise ValueError("channel counts must be >= 1")
        if self.res_blocks_per_resolution < 1:
            raise ValueError("res_blocks_per_resolution must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        self.conditioning.validate()

    @property
    def embed_dim(self) -> int:
        return 4 * self.base_channels


class ParamStore:
    """Flat named-parameter registry; names are unique and stable."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name '{name}'")
        t = Tensor(np.ascontiguousarray(array, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} "
                             f"extra={sorted(extra)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for '{k}': {arr.shape} vs {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=self.dtype)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())


def _kaiming(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int,
                 rng, stride: int = 1, zero_init: bool = False):
        scale = 0.0 if zero_init else 1.0
        self.w = store.add(f"{name}.w", scale * _kaiming(rng, (cout, cin, k, k), cin * k * k))
        self.b = store.add(f"{name}.b", np.zeros(cout))
        self.stride = stride
        self.padding = (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return tt.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Dense:
    def __init__(self, store: ParamStore, name: str, din: int, dout: int, rng,
                 zero_init: bool = False):
        scale = 0.0 if zero_init else 1.0
        self.w = store.add(f"{name}.w", scale * _kaiming(rng, (din, dout), din))
        self.b = store.add(f"{name}.b", np.zeros(dout))

    def __call__(self, x: Tensor) -> Tensor:
        return tt.linear(x, self.w, self.b)


class Norm:
    def __init__(self, store: ParamStore, name: str, channels: int):
        self.gamma = store.add(f"{name}.gamma", np.ones(channels))
        self.beta = store.add(f"{name}.beta", np.zeros(channels))
        self.groups = min(8, channels)

    def __call__(self, x: Tensor) -> Tensor:
        return tt.group_norm(x, self.gamma, self.beta, self.groups)


class ResBlock:
    """norm -> silu -> conv, twice, with the embedding projected in after the
    first conv and a 1x1 shortcut when channel counts change."""

    def __init__(self, store, name, cin, cout, emb_dim, dropout, rng):
        self.norm1 = Norm(store, f"{name}.norm1", cin)
        self.conv1 = Conv(store, f"{name}.conv1", cin, cout, 3, rng)
        self.emb_proj = Dense(store, f"{name}.emb_proj", emb_dim, cout, rng)
        self.norm2 = Norm(store, f"{name}.norm2", cout)
        self.conv2 = Conv(store, f"{name}.conv2", cout, cout, 3, rng)
        self.skip = Conv(store, f"{name}.skip", cin, cout, 1, rng) if cin != cout else None
        self.dropout = dropout

    def __call__(self, x, emb, train, rng):
        h = self.conv1(tt.silu(self.norm1(x)))
        h = tt.add_channel_vec(h, self.emb_proj(tt.silu(emb)))
        h = tt.silu(self.norm2(h))
        if train and self.dropout > 0.0:
            h = tt.dropout(h, self.dropout, rng)
        h = self.conv2(h)
        return tt.add(h, self.skip(x) if self.skip is not None else x)


class AttnBlock:
    """Single-head self-attention over spatial positions, residual."""

    def __init__(self, store, name, channels, rng):
        self.norm = Norm(store, f"{name}.norm", channels)
        self.qkv = Conv(store, f"{name}.qkv", channels, 3 * channels, 1, rng)
        self.proj = Conv(store, f"{name}.proj", channels, channels, 1, rng, zero_init=True)
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        qkv = self.qkv(self.norm(x))
        q = tt.reshape(tt.slice_axis(qkv, 1, 0, c), (n, c, h * w))
        k = tt.reshape(tt.slice_axis(qkv, 1, c, 2 * c), (n, c, h * w))
        v = tt.reshape(tt.slice_axis(qkv, 1, 2 * c, 3 * c), (n, c, h * w))
        attn = tt.bmm(tt.transpose(q, (0, 2, 1)), k)  # (n, hw, hw)
        attn = tt.softmax_last(attn * float(c ** -0.5))
        out = tt.bmm(v, tt.transpose(attn, (0, 2, 1)))  # (n, c, hw)
        out = self.proj(tt.reshape(out, (n, c, h, w)))
        return tt.add(x, out)


def sinusoidal_features(values: np.ndarray, dim: int, dtype) -> np.ndarray:
    """Classic sin/cos features over a geometric frequency ladder."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = np.asarray(values, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


class UNetModel:
    """The denoising network; owns a flat parameter store."""

    def __init__(self, config: UNetConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.store = ParamStore(dtype)
        rng = np.random.default_rng([seed, 0x5EED])
        store, cond = self.store, config.conditioning
        bc, emb_dim = config.base_channels, config.embed_dim

        self.time_mlp1 = Dense(store, "time.mlp1", emb_dim, emb_dim, rng)
        self.time_mlp2 = Dense(store, "time.mlp2", emb_dim, emb_dim, rng)
        if cond.aug_level_input:
            self.aug_mlp1 = Dense(store, "aug.mlp1", emb_dim, emb_dim, rng)
            self.aug_mlp2 = Dense(store, "aug.mlp2", emb_dim, emb_dim, rng)
        if cond.class_count:
            self.class_table = store.add(
                "class.table", 0.02 * rng.standard_normal((cond.class_count, emb_dim)))

        in_ch = config.image_channels * (2 if cond.lowres_conditioning else 1)
        self.in_conv = Conv(store, "in_conv", in_ch, bc, 3, rng)

        mults = config.channel_multipliers
        blocks = config.res_blocks_per_resolution
        attn_at = set(config.use_attention_at)
        dp = config.dropout

        def attn_maybe(name, ch, res):
            return AttnBlock(store, name, ch, rng) if res in attn_at else None

        self.down: list[tuple] = []
        skip_chans = [bc]
        ch, res = bc, config.input_resolution
        for k, mult in enumerate(mults):
            out = bc * mult
            for i in range(blocks):
                rb = ResBlock(store, f"down.{k}.block.{i}", ch, out, emb_dim, dp, rng)
                at = attn_maybe(f"down.{k}.attn.{i}", out, res)
                self.down.append(("block", rb, at))
                ch = out
                skip_chans.append(ch)
            if k != len(mults) - 1:
                self.down.append(("down", Conv(store, f"down.{k}.downsample", ch, ch, 3,
                                               rng, stride=2), None))
                skip_chans.append(ch)
                res //= 2

        self.mid1 = ResBlock(store, "mid.block1", ch, ch, emb_dim, dp, rng)
        self.mid_attn = attn_maybe("mid.attn", ch, res)
        self.mid2 = ResBlock(store, "mid.block2", ch, ch, emb_dim, dp, rng)

        self.up: list[tuple] = []
        for k in reversed(range(len(mults))):
            out = bc * mults[k]
            for i in range(blocks + 1):
                rb = ResBlock(store, f"up.{k}.block.{i}", ch + skip_chans.pop(), out,
                              emb_dim, dp, rng)
                at = attn_maybe(f"up.{k}.attn.{i}", out, res)
                self.up.append(("block", rb, at))
                ch = out
            if k != 0:
                self.up.append(("up", Conv(store, f"up.{k}.upsample", ch, ch, 3, rng), None))
                res *= 2
        assert not skip_chans

        self.out_norm = Norm(store, "out.norm", ch)
        self.eps_head = Conv(store, "out.eps_head", ch, config.image_channels, 3, rng,
                             zero_init=True)
        if config.learned_variances:
            self.v_head = Conv(store, "out.v_head", ch, config.image_channels, 3, rng,
                               zero_init=True)

    # -- conditioning ---------------------------------------------------------

    def _noise_embedding_input(self, noise_level) -> np.ndarray:
        values = np.atleast_1d(np.asarray(noise_level))
        if self.config.conditioning.noise_conditioning == DISCRETE:
            if not np.issubdtype(values.dtype, np.integer):
                raise ValueError("discrete noise conditioning expects integer timesteps")
            return values.astype(np.float64)
        values = values.astype(np.float64)
        if np.any(values <= 0.0) or np.any(values >= 1.0):
            raise ValueError("continuous noise conditioning expects alpha_bar in (0, 1)")
        return LOGSNR_EMBED_SCALE * np.log(values / (1.0 - values))

    def _embedding(self, n: int, noise_level, class_label, s) -> Tensor:
        cfg = self.config
        dt = self.store.dtype
        vals = self._noise_embedding_input(noise_level)
        if vals.shape[0] == 1 and n > 1:
            vals = np.repeat(vals, n)
        if vals.shape[0] != n:
            raise ValueError(f"noise_level batch size {vals.shape[0]} != {n}")
        feats = Tensor(sinusoidal_features(vals, cfg.embed_dim, dt))
        emb = self.time_mlp2(tt.silu(self.time_mlp1(feats)))

        if cfg.conditioning.aug_level_input:
            if s is None:
                raise ValueError("this model requires the augmentation level input s")
            s_arr = np.atleast_1d(np.asarray(s))
            if not np.issubdtype(s_arr.dtype, np.integer):
                raise ValueError("s must be integer-valued")
            if s_arr.shape[0] == 1 and n > 1:
                s_arr = np.repeat(s_arr, n)
            s_feats = Tensor(sinusoidal_features(s_arr.astype(np.float64), cfg.embed_dim, dt))
            emb = tt.add(emb, self.aug_mlp2(tt.silu(self.aug_mlp1(s_feats))))
        elif s is not None:
            raise ValueError("s given but this model has no augmentation level input")

        if cfg.conditioning.class_count:
            if class_label is None:
                raise ValueError("class_label required for a class-conditional model")
            labels = np.atleast_1d(np.asarray(class_label))
            if labels.shape[0] == 1 and n > 1:
                labels = np.repeat(labels, n)
            emb = tt.add(emb, tt.embedding(self.class_table, labels))
        elif class_label is not None:
            raise ValueError("class_label given but the model is unconditional")
        return emb

    # -- forward --------------------------------------------------------------

    def __call__(self, x_t, noise_level, class_label=None, lowres=None, s=None,
                 train: bool = False, rng: np.random.Generator | None = None):
        cfg = self.config
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=self.store.dtype))
        if x.ndim != 4:
            raise ValueError("x_t must be NCHW")
        n, c, h, w = x.shape
        if c != cfg.image_channels or h != cfg.input_resolution or w != cfg.input_resolution:
            raise ValueError(f"input shape {x.shape} does not match config "
                             f"({cfg.image_channels}, {cfg.input_resolution}^2)")
        if train and cfg.dropout > 0.0 and rng is None:
            raise ValueError("training forward with dropout needs an rng")

        if cfg.conditioning.lowres_conditioning:
            if lowres is None:
                raise ValueError("this super-resolution model requires a lowres input")
            z = lowres if isinstance(lowres, Tensor) else \
                Tensor(np.asarray(lowres, dtype=self.store.dtype))
            if z.shape[0] != n or z.shape[1] != cfg.image_channels:
                raise ValueError(f"lowres shape {z.shape} incompatible with input {x.shape}")
            if z.shape[2] != h:
                if h % z.shape[2] != 0:
                    raise ValueError("lowres resolution must divide the target resolution")
                z = tt.resize(z, h // z.shape[2], "bilinear")
            x = tt.concat([x, z], axis=1)
        elif lowres is not None:
            raise ValueError("lowres given but the model has no lowres conditioning")

        emb = self._embedding(n, noise_level, class_label, s)

        hcur = self.in_conv(x)
        stack = [hcur]
        for kind, layer, attn in self.down:
            if kind == "block":
                hcur = layer(hcur, emb, train, rng)
                if attn is not None:
                    hcur = attn(hcur)
            else:
                hcur = layer(hcur)
            stack.append(hcur)

        hcur = self.mid1(hcur, emb, train, rng)
        if self.mid_attn is not None:
            hcur = self.mid_attn(hcur)
        hcur = self.mid2(hcur, emb, train, rng)

        for kind, layer, attn in self.up:
            if kind == "block":
                hcur = layer(tt.concat([hcur, stack.pop()], axis=1), emb, train, rng)
                if attn is not None:
                    hcur = attn(hcur)
            else:
                hcur = tt.resize(hcur, 2, "nearest")
                hcur = layer(hcur)
        assert not stack

        hcur = tt.silu(self.out_norm(hcur))
        eps = self.eps_head(hcur)
        if not cfg.learned_variances:
            return eps, None
        return eps, tt.sigmoid(self.v_head(hcur))

    # -- parameter access ------------------------------------------------------

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.store.state_dict()

    def load_state_dict(self, state) -> None:
        self.store.load_state_dict(state)

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def param_count(self) -> int:
        return self.store.param_count()


def build_unet(config: UNetConfig, seed: int = 0, dtype=np.float32) -> UNetModel:
    """Construct and initialize a model; parameter count is a pure function
    of the config."""
    return UNetModel(config, seed=seed, dtype=dtype)


def forward(model: UNetModel, x_t, noise_level, class_label=None, lowres=None,
            s=None, train: bool = False, rng: np.random.Generator | None = None):
    return model(x_t, noise_level, class_label=class_label, lowres=lowres, s=s,
                 train=train, rng=rng)


def ema_update(ema_params: dict[str, np.ndarray], live_params: dict[str, Tensor],
               decay: float) -> dict[str, np.ndarray]:
    """ema <- decay * ema + (1 - decay) * live, elementwise and in place."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay {decay} outside [0, 1)")
    if set(ema_params) != set(live_params):
        raise ValueError("EMA/live parameter names differ")
    for name, ema in ema_params.items():
        live = live_params[name]
        live_arr = live.data if isinstance(live, Tensor) else np.asarray(live)
        if ema.shape != live_arr.shape:
            raise ValueError(f"shape mismatch for '{name}'")
        ema *= decay
        ema += (1.0 - decay) * live_arr
    return ema_params
