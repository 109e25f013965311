"""ResSeg encoder/decoder and the multi-phase fusion wirings.

Encoder (per phase branch)::

    conv1_1, conv1_2                      -> tap 0   (full resolution)
    stage k = 1..5: maxpool, 2 residual units -> tap k   (resolution / 2**k)

Decoder: one stream per tap. Stream 0 is a 3x3 conv; stream k is a chain of
k stride-2 deconvolutions whose widths halve down to ``decoder_width``. The
six full-resolution streams are concatenated and go through two 3x3 convs
and a channel softmax.

Fusion modes:

``single``  PV only.
``dmp``     PV and ART stacked as a 6-channel input to one encoder.
``mpf``     two complete networks whose probability maps are averaged.
``msf``     two encoders; taps concatenated before the shared decoder.
``pa_msf``  two encoders; taps fused by phase-attention blocks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
import numpy as np

from .attention import PaBlockParams, pa_block
from .errors import ConfigurationError, DimensionError, UsageError
from .substrate import functional as F
from .substrate.functional import RunningStats
from .substrate.tensor import Tensor, no_grad

FUSIONS = ("single", "dmp", "mpf", "msf", "pa_msf")
TWO_ENCODER = ("mpf", "msf", "pa_msf")
N_LEVELS = 6

PAPER_CHANNELS = (64, 128, 256, 512, 512, 512)
TINY_CHANNELS = (8, 16, 32, 32, 32, 32)


@dataclass(frozen=True)
class NetworkConfig:
    profile: str = "tiny"
    patch_size: int = 64
    stage_channels: tuple[int, ...] = TINY_CHANNELS
    fusion: str = "single"
    input_channels: int | None = None
    residual_skips: bool = True
    encoder_bn: bool = True
    fusion_levels: tuple[int, ...] = tuple(range(N_LEVELS))
    pa_kernel: int = 3
    eq3_as_printed: bool = False
    decoder_width: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "fusion_levels", tuple(sorted(int(v) for v in self.fusion_levels)))
        if self.input_channels is None:
            object.__setattr__(self, "input_channels", 6 if self.fusion == "dmp" else 3)
        self.validate()

    @classmethod
    def paper(cls, fusion: str = "single", **kw) -> "NetworkConfig":
        kw = {"patch_size": 224, "stage_channels": PAPER_CHANNELS, **kw}
        return cls(profile="paper", fusion=fusion, **kw)

    @classmethod
    def tiny(cls, fusion: str = "single", **kw) -> "NetworkConfig":
        kw = {"patch_size": 64, "stage_channels": TINY_CHANNELS, **kw}
        return cls(profile="tiny", fusion=fusion, **kw)

    def validate(self) -> None:
        if self.profile not in ("paper", "tiny", "custom"):
            raise ConfigurationError(f"unknown profile {self.profile!r}")
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if len(self.stage_channels) != N_LEVELS or min(self.stage_channels) < 1:
            raise ConfigurationError(f"need {N_LEVELS} positive stage widths, got {self.stage_channels}")
        if self.patch_size < 32 or self.patch_size % 32:
            raise ConfigurationError(f"patch_size {self.patch_size} must be a positive multiple of 32")
        if self.input_channels < 1:
            raise ConfigurationError("input_channels must be positive")
        if not set(self.fusion_levels) <= set(range(N_LEVELS)):
            raise ConfigurationError(f"fusion levels must lie in 0..5, got {self.fusion_levels}")
        if self.pa_kernel < 1 or self.pa_kernel % 2 == 0:
            raise ConfigurationError("pa_kernel must be odd")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.decoder_width is not None and self.decoder_width < 1:
            raise ConfigurationError("decoder_width must be positive")

    @property
    def stream_width(self) -> int:
        """Width of every full-resolution decoder stream (16 at paper scale)."""
        if self.decoder_width is not None:
            return self.decoder_width
        return max(1, round(16 * self.stage_channels[0] / 64))

    @property
    def head_width(self) -> int:
        return N_LEVELS * self.stream_width

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def fused(self, level: int) -> bool:
        return self.fusion in ("msf", "pa_msf") and level in self.fusion_levels

    def decoder_input_channels(self, level: int) -> int:
        c = self.stage_channels[level]
        return 2 * c if self.fused(level) else c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["fusion_levels"] = list(self.fusion_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        d["fusion_levels"] = tuple(d.get("fusion_levels", range(N_LEVELS)))
        return cls(**d)

    def with_(self, **kw) -> "NetworkConfig":
        if "fusion" in kw and "input_channels" not in kw:
            kw["input_channels"] = None
        return replace(self, **kw)


def stage_extents(config: NetworkConfig) -> list[int]:
    return [config.patch_size >> k for k in range(N_LEVELS)]


def stream_widths(config: NetworkConfig, level: int) -> list[int]:
    """Output widths of the deconvolutions in decoder stream ``level``."""
    d = config.stream_width
    return [d * 2 ** (level - 1 - i) for i in range(level)]


# -- parameter layout --------------------------------------------------------

@dataclass
class _Spec:
    """Ordered parameter shapes; drives both construction and counting."""

    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)
    fans: dict[str, int] = field(default_factory=dict)
    bns: dict[str, int] = field(default_factory=dict)

    def conv(self, name: str, cin: int, cout: int, k: int, bias: bool = True) -> None:
        self.shapes[f"{name}.weight"] = (cout, cin, k, k)
        self.fans[f"{name}.weight"] = cin * k * k
        if bias:
            self.shapes[f"{name}.bias"] = (cout,)

    def deconv(self, name: str, cin: int, cout: int, k: int = 4, bias: bool = True) -> None:
        self.shapes[f"{name}.weight"] = (cin, cout, k, k)
        self.fans[f"{name}.weight"] = cin * k * k
        if bias:
            self.shapes[f"{name}.bias"] = (cout,)

    def bn(self, name: str, c: int) -> None:
        self.shapes[f"{name}.gamma"] = (c,)
        self.shapes[f"{name}.beta"] = (c,)
        self.bns[name] = c


def _encoder_spec(spec: _Spec, prefix: str, config: NetworkConfig, cin: int) -> None:
    ch = config.stage_channels
    bn = config.encoder_bn
    # a conv feeding a batchnorm carries no bias: the shift would be cancelled
    spec.conv(f"{prefix}.conv1_1", cin, ch[0], 3, bias=not bn)
    if bn:
        spec.bn(f"{prefix}.conv1_1.bn", ch[0])
    spec.conv(f"{prefix}.conv1_2", ch[0], ch[0], 3, bias=not bn)
    if bn:
        spec.bn(f"{prefix}.conv1_2.bn", ch[0])
    for level in range(1, N_LEVELS):
        c_prev, c = ch[level - 1], ch[level]
        for unit in (1, 2):
            name = f"{prefix}.conv{level + 1}_x.unit{unit}"
            c_in = c_prev if unit == 1 else c
            spec.conv(f"{name}.a", c_in, c, 3, bias=not bn)
            if bn:
                spec.bn(f"{name}.a.bn", c)
            spec.conv(f"{name}.b", c, c, 3, bias=not bn)
            if bn:
                spec.bn(f"{name}.b.bn", c)
            if config.residual_skips and c_in != c:
                spec.conv(f"{name}.proj", c_in, c, 1)


def _decoder_spec(spec: _Spec, prefix: str, config: NetworkConfig) -> None:
    d = config.stream_width
    spec.conv(f"{prefix}.conv1_3", config.decoder_input_channels(0), d, 3, bias=False)
    spec.bn(f"{prefix}.conv1_3.bn", d)
    for level in range(1, N_LEVELS):
        cin = config.decoder_input_channels(level)
        for i, cout in enumerate(stream_widths(config, level)):
            spec.deconv(f"{prefix}.up{level}.{i}", cin, cout, bias=False)
            spec.bn(f"{prefix}.up{level}.{i}.bn", cout)
            cin = cout
    spec.conv(f"{prefix}.final.conv1", config.head_width, config.head_width, 3, bias=False)
    spec.bn(f"{prefix}.final.conv1.bn", config.head_width)
    spec.conv(f"{prefix}.final.conv2", config.head_width, 2, 3)


def _pa_spec(spec: _Spec, config: NetworkConfig) -> None:
    k = config.pa_kernel
    for level in config.fusion_levels:
        c = config.stage_channels[level]
        spec.conv(f"pa{level}.conv_pv", c, c, k)
        spec.conv(f"pa{level}.conv_art", c, c, k)


def _network_spec(config: NetworkConfig) -> _Spec:
    spec = _Spec()
    if config.fusion == "mpf":
        for phase in ("pv", "art"):
            _encoder_spec(spec, f"{phase}.enc", config, config.input_channels)
            _decoder_spec(spec, f"{phase}.dec", config)
        return spec
    if config.fusion in TWO_ENCODER:
        _encoder_spec(spec, "enc_pv", config, config.input_channels)
        _encoder_spec(spec, "enc_art", config, config.input_channels)
    else:
        _encoder_spec(spec, "enc", config, config.input_channels)
    if config.fusion == "pa_msf":
        _pa_spec(spec, config)
    _decoder_spec(spec, "dec", config)
    return spec


def closed_form_parameter_count(config: NetworkConfig) -> int:
    """Trainable scalar count written out per layer family, without building."""
    ch, d, cin = config.stage_channels, config.stream_width, config.input_channels
    bn = 2 if config.encoder_bn else 0

    def conv(a, b, k, bias=True):
        return a * b * k * k + (b if bias else 0)

    # encoder convs carry either a bias or a batchnorm (gamma, beta)
    per = 2 if config.encoder_bn else 1
    enc = cin * ch[0] * 9 + ch[0] * ch[0] * 9 + 2 * per * ch[0]
    for level in range(1, N_LEVELS):
        p, c = ch[level - 1], ch[level]
        enc += p * c * 9 + 3 * c * c * 9 + 4 * per * c
        if config.residual_skips and p != c:
            enc += conv(p, c, 1)

    dec = conv(config.decoder_input_channels(0), d, 3, bias=False) + 2 * d
    for level in range(1, N_LEVELS):
        widths = [config.decoder_input_channels(level)] + [d * 2 ** (level - 1 - i) for i in range(level)]
        dec += sum(a * b * 16 + 2 * b for a, b in zip(widths[:-1], widths[1:]))
    h = config.head_width
    dec += conv(h, h, 3, bias=False) + 2 * h + conv(h, 2, 3)

    if config.fusion == "mpf":
        return 2 * (enc + dec)
    n_enc = 2 if config.fusion in TWO_ENCODER else 1
    pa = 0
    if config.fusion == "pa_msf":
        pa = sum(2 * conv(ch[lv], ch[lv], config.pa_kernel) for lv in config.fusion_levels)
    return n_enc * enc + dec + pa


# -- model -------------------------------------------------------------------

class Model:
    """Parameters, batchnorm statistics and the forward wiring of one network."""

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor],
                 bn_stats: dict[str, RunningStats], seed: int):
        self.config = config
        self.params = params
        self.bn_stats = bn_stats
        self.seed = seed
        self.training = True
        # when a dict, encode/decode record intermediate shapes into it
        self.trace: dict | None = None

    # -- bookkeeping --
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def groups(self) -> dict[str, list[str]]:
        """Parameter names keyed by their layer (everything before the last dot)."""
        out: dict[str, list[str]] = {}
        for name in self.params:
            layer = name.rsplit(".", 1)[0]
            if layer.endswith(".bn"):
                layer = layer[:-3]
            out.setdefault(layer, []).append(name)
        return out

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- layer helpers --
    def _conv(self, name: str, x: Tensor, pad: int) -> Tensor:
        return F.conv2d(x, self.params[f"{name}.weight"], self.params.get(f"{name}.bias"), stride=1, pad=pad)

    def _bn(self, name: str, x: Tensor) -> Tensor:
        return F.batchnorm2d(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                             self.bn_stats[name], mode="train" if self.training else "eval")

    def _conv_bn_relu(self, name: str, x: Tensor, bn: bool = True) -> Tensor:
        y = self._conv(name, x, pad=1)
        if bn:
            y = self._bn(f"{name}.bn", y)
        return F.relu(y)

    def _residual_unit(self, name: str, x: Tensor) -> Tensor:
        bn = self.config.encoder_bn
        y = self._conv_bn_relu(f"{name}.a", x, bn)
        y = self._conv(f"{name}.b", y, pad=1)
        if bn:
            y = self._bn(f"{name}.b.bn", y)
        if self.config.residual_skips:
            skip = self._conv(f"{name}.proj", x, pad=0) if f"{name}.proj.weight" in self.params else x
            y = F.add(y, skip)
        return F.relu(y)

    def encode(self, prefix: str, x: Tensor) -> list[Tensor]:
        bn = self.config.encoder_bn
        h = self._conv_bn_relu(f"{prefix}.conv1_1", x, bn)
        h = self._conv_bn_relu(f"{prefix}.conv1_2", h, bn)
        taps = [h]
        for level in range(1, N_LEVELS):
            h = F.maxpool2d(h, 2, 2)
            h = self._residual_unit(f"{prefix}.conv{level + 1}_x.unit1", h)
            h = self._residual_unit(f"{prefix}.conv{level + 1}_x.unit2", h)
            taps.append(h)
        if self.trace is not None:
            self.trace.setdefault("encoder", {})[prefix] = [t.shape for t in taps]
        return taps

    def decode(self, prefix: str, taps: list[Tensor]) -> Tensor:
        streams = [self._conv_bn_relu(f"{prefix}.conv1_3", taps[0])]
        chains = [[streams[0].shape]]
        for level in range(1, N_LEVELS):
            h = taps[level]
            chain = []
            for i in range(level):
                name = f"{prefix}.up{level}.{i}"
                h = F.transposed_conv2d(h, self.params[f"{name}.weight"], self.params.get(f"{name}.bias"),
                                        stride=2, k=4, pad=1)
                h = F.relu(self._bn(f"{name}.bn", h))
                chain.append(h.shape)
            chains.append(chain)
            streams.append(h)
        h = F.concat(streams, axis=1)
        if self.trace is not None:
            self.trace["decoder_inputs"] = [t.shape for t in taps]
            self.trace["streams"] = [t.shape for t in streams]
            self.trace["stream_chains"] = chains
            self.trace["concat"] = h.shape
        h = self._conv_bn_relu(f"{prefix}.final.conv1", h)
        logits = self._conv(f"{prefix}.final.conv2", h, pad=1)
        if self.trace is not None:
            self.trace["final_conv"] = h.shape
            self.trace["logits"] = logits.shape
        return F.softmax(logits, axis=1)

    def pa_params(self, level: int) -> PaBlockParams:
        p = self.params
        return PaBlockParams(p[f"pa{level}.conv_pv.weight"], p[f"pa{level}.conv_pv.bias"],
                             p[f"pa{level}.conv_art.weight"], p[f"pa{level}.conv_art.bias"])

    def _as_input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.config.np_dtype))
        elif x.dtype != self.config.np_dtype and not x.requires_grad:
            x = Tensor(x.data.astype(self.config.np_dtype))
        return x

    def _check_input(self, x: Tensor, what: str) -> None:
        cfg = self.config
        want = cfg.input_channels // 2 if cfg.fusion == "dmp" else cfg.input_channels
        if x.ndim != 4 or x.shape[1] != want or x.shape[2] != x.shape[3] or x.shape[2] % 32:
            raise DimensionError(f"{what} patch must be B x {want} x S x S with S % 32 == 0, got {x.shape}")

    def branch_outputs(self, pv, art) -> tuple[Tensor, Tensor]:
        """Per-phase probability maps of an ``mpf`` model (before merging)."""
        if self.config.fusion != "mpf":
            raise UsageError("branch_outputs is only defined for fusion='mpf'")
        pv, art = self._as_input(pv), self._as_input(art)
        prob_pv = self.decode("pv.dec", self.encode("pv.enc", pv))
        prob_art = self.decode("art.dec", self.encode("art.enc", art))
        return prob_pv, prob_art

    def __call__(self, pv, art=None) -> Tensor:
        return forward(self, pv, art)

    def predict(self, pv: np.ndarray, art: np.ndarray | None = None, batch_size: int = 16) -> np.ndarray:
        """Eval-mode class probabilities for numpy batches, without recording a graph."""
        was_training = self.training
        self.eval()
        outs = []
        try:
            with no_grad():
                for s in range(0, pv.shape[0], batch_size):
                    a = None if art is None else art[s:s + batch_size]
                    outs.append(forward(self, pv[s:s + batch_size], a).data)
        finally:
            self.training = was_training
        return np.concatenate(outs, axis=0)


def build_network(config: NetworkConfig, seed: int = 0) -> Model:
    """Initialise every parameter from ``seed`` (He-normal weights, zero biases)."""
    config.validate()
    spec = _network_spec(config)
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype
    params: dict[str, Tensor] = {}
    for name, shape in spec.shapes.items():
        if name.endswith(".weight"):
            std = np.sqrt(2.0 / spec.fans[name])
            data = (rng.standard_normal(shape) * std).astype(dtype)
        elif name.endswith(".gamma"):
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    stats = {name: RunningStats.fresh(c, dtype) for name, c in spec.bns.items()}
    return Model(config, params, stats, seed)


def encoder_stage_outputs(model: Model, x, prefix: str | None = None) -> list[Tensor]:
    """The six encoder taps that feed the decoder streams."""
    if prefix is None:
        prefix = {"mpf": "pv.enc", "msf": "enc_pv", "pa_msf": "enc_pv"}.get(model.config.fusion, "enc")
    return model.encode(prefix, model._as_input(x))


def fuse_stage(pv_feat: Tensor, art_feat: Tensor, level: int, model: Model) -> Tensor:
    fusion = model.config.fusion
    if fusion not in ("msf", "pa_msf"):
        raise UsageError(f"fuse_stage is undefined for fusion={fusion!r}")
    if pv_feat.shape != art_feat.shape:
        raise DimensionError(f"phase features differ in shape: {pv_feat.shape} vs {art_feat.shape}")
    if fusion == "msf":
        return F.concat([pv_feat, art_feat], axis=1)
    return pa_block(pv_feat, art_feat, model.pa_params(level), eq3_as_printed=model.config.eq3_as_printed)


def mpf_merge(prob_pv: Tensor, prob_art: Tensor) -> Tensor:
    """Average of two probability maps (sum then halve)."""
    return F.mul(F.add(prob_pv, prob_art), 0.5)


def forward(model: Model, pv, art=None) -> Tensor:
    """Class probabilities ``B x 2 x H x W`` for one batch of 2.5D patches."""
    cfg = model.config
    pv = model._as_input(pv)
    model._check_input(pv, "pv")
    if cfg.fusion == "single":
        return model.decode("dec", model.encode("enc", pv))
    if art is None:
        raise UsageError(f"fusion={cfg.fusion!r} needs an arterial-phase patch")
    art = model._as_input(art)
    if art.shape != pv.shape:
        raise DimensionError(f"pv {pv.shape} and art {art.shape} patches differ")
    if cfg.fusion == "dmp":
        return model.decode("dec", model.encode("enc", F.concat([pv, art], axis=1)))
    if cfg.fusion == "mpf":
        return mpf_merge(*model.branch_outputs(pv, art))
    taps_pv = model.encode("enc_pv", pv)
    taps_art = model.encode("enc_art", art)
    taps = [fuse_stage(tp, ta, level, model) if cfg.fused(level) else tp
            for level, (tp, ta) in enumerate(zip(taps_pv, taps_art))]
    return model.decode("dec", taps)


def trace_shapes(model: Model, pv, art=None) -> dict:
    """Run one eval-mode forward and return the recorded intermediate shapes."""
    model.trace = {}
    try:
        with no_grad():
            was = model.training
            model.eval()
            out = forward(model, pv, art)
            model.training = was
        model.trace["output"] = out.shape
        model.trace["output_sum_range"] = (float(out.data.sum(axis=1).min()), float(out.data.sum(axis=1).max()))
        return model.trace
    finally:
        model.trace = None
