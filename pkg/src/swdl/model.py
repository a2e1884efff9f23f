"""SWDL network: shared encoder, DC and DelPU decoders, deep-supervision heads.

Strata are numbered 1..S from full resolution down. Stratum s works at
``patch / 2**(s-1)`` with ``channels[s-1]`` feature maps. Encoder stratum s
is a stride-2 downsampling conv (s > 1) followed by two 3x3x3 conv+relu
blocks, so ``y_E^s``, ``y_DC^s`` and ``y_DelPU^s`` share one shape and the
stratum difference from the previous iteration can be injected straight
into the input of encoder stratum s+1.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ArgumentError, StateError
from .losses import ds_weights_for
from .pyramid import DelpuConfig, delpu_upsample


@dataclass
class ModelConfig:
    strata: int = 5
    channels: tuple[int, ...] = (8, 16, 32, 64, 128)
    num_classes: int = 2
    in_channels: int = 1
    mu: float = 1.5
    T: int = 3
    xi: float = 1e-3
    # 'eq7': Dice on DC, CE on DelPU; 'swapped': the reverse assignment
    loss_assignment: str = "eq7"
    deep_supervision: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.strata < 2:
            raise ArgumentError("need at least 2 strata")
        if len(self.channels) != self.strata:
            raise ArgumentError(f"{self.strata} strata but {len(self.channels)} channel counts")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ArgumentError("channels must be strictly increasing")
        if self.T < 1:
            raise ArgumentError("T must be >= 1")
        if self.xi < 0:
            raise ArgumentError("xi must be >= 0")
        DelpuConfig(self.mu)

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        return cls(channels=(16, 32, 64, 128, 256), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class IterationOutput:
    dc_logits: Tensor
    delpu_logits: Tensor
    ds_outputs: list
    delta: dict
    encoder: list = field(default_factory=list)
    dc_features: dict = field(default_factory=dict)
    delpu_features: dict = field(default_factory=dict)


class SWDLNet:
    def __init__(self, cfg: ModelConfig, seed: int = 1337):
        self.cfg = cfg
        self.delpu = DelpuConfig(cfg.mu)
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        ch = cfg.channels
        S = cfg.strata
        for s in range(1, S + 1):
            c = ch[s - 1]
            if s > 1:
                self._conv(rng, f"enc{s}.down", ch[s - 2], c, 2)
            self._conv(rng, f"enc{s}.conv1", cfg.in_channels if s == 1 else c, c, 3)
            self._conv(rng, f"enc{s}.conv2", c, c, 3)
        for dec in ("dc", "lp"):
            for s in range(S - 1, 0, -1):
                c = ch[s - 1]
                if dec == "dc":
                    self._convT(rng, f"dc{s}.up", ch[s], c)
                else:
                    self._conv(rng, f"lp{s}.proj", ch[s], c, 1)
                self._conv(rng, f"{dec}{s}.skip", c, c, 1)
                self._conv(rng, f"{dec}{s}.conv1", c, c, 3)
                self._conv(rng, f"{dec}{s}.conv2", c, c, 3)
            self._conv(rng, f"{dec}.out", ch[0], cfg.num_classes, 1)
        for s in range(1, S + 1):
            self._conv(rng, f"ds{s}", ch[s - 1], cfg.num_classes, 1)

    # -- parameters --------------------------------------------------------

    def _conv(self, rng, name, cin, cout, k):
        fan_in = cin * k ** 3
        self.params[name + ".w"] = Parameter(ad.kaiming_uniform(rng, (cout, cin, k, k, k), fan_in), name + ".w")
        self.params[name + ".b"] = Parameter(np.zeros(cout), name + ".b")

    def _convT(self, rng, name, cin, cout):
        fan_in = cin
        self.params[name + ".w"] = Parameter(ad.kaiming_uniform(rng, (cin, cout, 2, 2, 2), fan_in), name + ".w")
        self.params[name + ".b"] = Parameter(np.zeros(cout), name + ".b")

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def state_blobs(self, with_momentum: bool = True) -> dict[str, np.ndarray]:
        blobs = {k: p.data for k, p in self.params.items()}
        if with_momentum:
            blobs.update({k + "#momentum": p.momentum for k, p in self.params.items()})
        return blobs

    def load_blobs(self, blobs: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in blobs:
                raise StateError(f"checkpoint is missing parameter {k}")
            if blobs[k].shape != p.data.shape:
                raise StateError(f"parameter {k}: checkpoint shape {blobs[k].shape} != {p.data.shape}")
            p.data = np.ascontiguousarray(blobs[k], dtype=p.data.dtype)
            mom = blobs.get(k + "#momentum")
            p.momentum = np.zeros_like(p.data) if mom is None else np.ascontiguousarray(mom, dtype=p.data.dtype)

    # -- building blocks -----------------------------------------------------

    def _c(self, name, x, stride=1, padding=0):
        return ad.conv3d(x, self.params[name + ".w"], self.params[name + ".b"], stride, padding)

    def _block(self, prefix, x):
        x = ad.relu(self._c(prefix + ".conv1", x, padding=1))
        return ad.relu(self._c(prefix + ".conv2", x, padding=1))

    def check_input(self, x: Tensor) -> None:
        f = 2 ** (self.cfg.strata - 1)
        if x.data.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ArgumentError(f"expected (N, {self.cfg.in_channels}, D, H, W) input, got {x.shape}")
        if any(n % f for n in x.shape[2:]):
            raise ArgumentError(f"spatial dims {x.shape[2:]} must be divisible by {f}")

    # -- forward passes --------------------------------------------------------

    def encoder_forward(self, x: Tensor, injections: dict | None = None, xi: float | None = None) -> list:
        """Per-stratum encoder features y_E^1..y_E^S.

        ``injections[s]`` (a stratum difference) is added, scaled by ``xi``,
        to y_E^s before it enters stratum s+1.
        """
        self.check_input(x)
        xi = self.cfg.xi if xi is None else xi
        feats = []
        with ad.op_scope("encoder"):
            h = self._block("enc1", x)
            feats.append(h)
            for s in range(2, self.cfg.strata + 1):
                if injections is not None and xi != 0:
                    delta = injections.get(s - 1)
                    if delta is None or delta.shape != h.shape:
                        got = None if delta is None else delta.shape
                        raise StateError(f"difference for stratum {s - 1} has shape {got}, expected {h.shape}")
                    h = h + Tensor(delta.data if isinstance(delta, Tensor) else delta) * xi
                h = self._c(f"enc{s}.down", h, stride=2)
                h = self._block(f"enc{s}", h)
                feats.append(h)
        return feats

    def dc_decoder_forward(self, feats: list):
        S = self.cfg.strata
        out = {S: feats[S - 1]}
        h = feats[S - 1]
        with ad.op_scope("dc_decoder"):
            for s in range(S - 1, 0, -1):
                up = ad.conv_transpose3d(h, self.params[f"dc{s}.up.w"], self.params[f"dc{s}.up.b"])
                h = self._block(f"dc{s}", up + self._c(f"dc{s}.skip", feats[s - 1]))
                out[s] = h
            logits = self._c("dc.out", h)
        return out, logits

    def delpu_decoder_forward(self, feats: list, mu: float | None = None):
        S = self.cfg.strata
        cfg = self.delpu if mu is None else DelpuConfig(mu, self.delpu.kernel)
        out = {S: feats[S - 1]}
        h = feats[S - 1]
        with ad.op_scope("delpu_decoder"):
            for s in range(S - 1, 0, -1):
                target = feats[s - 1].shape[2:]
                up = self._c(f"lp{s}.proj", delpu_upsample(h, target, cfg))
                h = self._block(f"lp{s}", up + self._c(f"lp{s}.skip", feats[s - 1]))
                out[s] = h
            logits = self._c("lp.out", h)
        return out, logits

    def ds_heads(self, dc_feats: dict, full_shape, rows: int | None = None) -> list:
        """Class-probability maps from every DC stratum, shallowest first."""
        heads = []
        with ad.op_scope("ds_heads"):
            for s in range(1, self.cfg.strata + 1):
                f = dc_feats[s]
                if rows is not None and rows != f.shape[0]:
                    f = ad.take(f, 0, rows)
                z = ad.resample(self._c(f"ds{s}", f), full_shape)
                heads.append(ad.softmax_channel(z))
        return heads

    def forward_train_iteration(self, x: Tensor, p: int, prev_delta: dict | None = None,
                                ds_rows: int | None = None) -> IterationOutput:
        if not 1 <= p <= self.cfg.T:
            raise ArgumentError(f"iteration {p} outside 1..{self.cfg.T}")
        if (p > 1) != (prev_delta is not None):
            raise ArgumentError("a previous difference is required exactly when p > 1")
        feats = self.encoder_forward(x, prev_delta if p > 1 else None)
        dc_feats, dc_logits = self.dc_decoder_forward(feats)
        lp_feats, lp_logits = self.delpu_decoder_forward(feats)
        heads = self.ds_heads(dc_feats, x.shape[2:], ds_rows) if self.cfg.deep_supervision else []
        delta = compute_differences(dc_feats, lp_feats, self.cfg.strata)
        return IterationOutput(dc_logits, lp_logits, heads, delta, feats, dc_feats, lp_feats)

    def infer(self, x) -> np.ndarray:
        """Encoder + DC decoder + softmax, without recording a graph."""
        with ad.no_grad():
            x = x if isinstance(x, Tensor) else Tensor(x)
            feats = self.encoder_forward(x, None)
            _, logits = self.dc_decoder_forward(feats)
            return ad.softmax_channel(logits).data


def compute_differences(dc_feats: dict, delpu_feats: dict, strata: int) -> dict:
    """Detached stratum differences y_DC^s - y_DelPU^s for s = 1..S-1."""
    delta = {}
    for s in range(1, strata):
        a, b = dc_feats[s], delpu_feats[s]
        if a.shape != b.shape:
            raise StateError(f"stratum {s}: DC shape {a.shape} != DelPU shape {b.shape}")
        delta[s] = Tensor(a.data - b.data, dtype=a.data.dtype)
    return delta


def default_ds_weights(cfg: ModelConfig) -> tuple[float, ...]:
    return ds_weights_for(cfg.strata)
