"""Day-ahead forecasting architectures built from dense layers.

A per-hour subnetwork maps lagged load/temperature bundles and calendar codes
to one hourly forecast. 24 chained subnetworks produce the daily curve: for
hour h, the trailing h-1 slots of the recent-load window are the model's own
outputs for hours 1..h-1, so gradients from any hour flow back through every
earlier hour. An optional residual stage (plain stack with periodic averaging
shortcuts, or a densely merged two-path variant) refines the 24-hour curve;
every multi-input merge node averages its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .data import DEFAULT_MONTH_LAGS, DayBatch, DayInput, day_batch
from .nn import DenseLayer, ShapeError, dense_backward, dense_forward

DAY_WIDTH = 24
HIDDEN_WIDTH = 10   # ordinary hidden layers in the per-hour subnetwork
CAL_WIDTH = 5       # season/weekday encoder layers
BLOCK_HIDDEN = 20   # residual block hidden layer

RESIDUAL_STAGES = ("none", "resnet", "resnetplus")
MODEL_ACTIVATIONS = ("selu", "relu")


@dataclass
class ModelSpec:
    """Architecture descriptor; everything needed to rebuild a model skeleton."""

    residual_stage: str = "resnetplus"
    num_layers: int = 10              # resnetplus: main-path length
    num_blocks: int = 30              # resnet: block count
    inner_shortcut_every: int = 5     # resnet: 0 disables mid-level shortcuts
    outer_shortcut: bool = True       # resnet: average the input into the output
    share_weights: bool = False       # share hidden layers across the 24 hours
    month_lags: int = 6
    activation: str = "selu"

    def __post_init__(self):
        if self.residual_stage not in RESIDUAL_STAGES:
            raise ValueError(f"residual_stage must be one of {RESIDUAL_STAGES}")
        if self.activation not in MODEL_ACTIVATIONS:
            raise ValueError(f"activation must be one of {MODEL_ACTIVATIONS}")
        if self.month_lags < 1:
            raise ValueError("month_lags must be >= 1")
        if self.residual_stage == "resnet":
            if self.num_blocks < 1:
                raise ValueError("num_blocks must be >= 1")
            if self.inner_shortcut_every < 0:
                raise ValueError("inner_shortcut_every must be >= 0")
            if self.inner_shortcut_every and self.num_blocks % self.inner_shortcut_every:
                raise ValueError("num_blocks must be divisible by inner_shortcut_every")
        if self.residual_stage == "resnetplus" and self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")

    def descriptor(self) -> dict:
        return asdict(self)

    @classmethod
    def from_descriptor(cls, desc: dict) -> "ModelSpec":
        return cls(**desc)


def _subnet_layout(month_lags: int):
    return (
        ("month", 2 * month_lags, HIDDEN_WIDTH),
        ("week", 8, HIDDEN_WIDTH),
        ("day", 14, HIDDEN_WIDTH),
        ("hour", 24, HIDDEN_WIDTH),
        ("cal_fc1", 6, CAL_WIDTH),
        ("cal_fc2", 6, CAL_WIDTH),
        ("fc1", HIDDEN_WIDTH + CAL_WIDTH, HIDDEN_WIDTH),
        ("fc2", 3 * HIDDEN_WIDTH + CAL_WIDTH + 2, HIDDEN_WIDTH),
        ("pre_out", 2 * HIDDEN_WIDTH + 1, HIDDEN_WIDTH),
    )


def _drop(x: np.ndarray, drop) -> tuple[np.ndarray, np.ndarray]:
    # inverted dropout with the mask pre-scaled by 1/(1-p); backward reuses it
    p, rng = drop
    smask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * smask, smask


def _acc(grads: dict, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value


class BasicStructure:
    """24 per-hour subnetworks with autoregressive chaining.

    Per hour: the three [load, temperature] lag pairs each feed a width-10
    layer; the recent-load window feeds a width-10 layer whose output joins one
    season/weekday encoding in fc1; the three lag-pair layers, the other
    season/weekday encoding, and the holiday flags join in fc2; [fc1, fc2, t_h]
    feed a final width-10 layer and a linear scalar head. With share_weights
    the hidden layers are common to all hours and only the scalar heads stay
    per-hour.
    """

    def __init__(self, month_lags: int = DEFAULT_MONTH_LAGS, share_weights: bool = False,
                 activation: str = "selu", rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.month_lags = month_lags
        self.share_weights = share_weights
        self.activation = activation
        layout = _subnet_layout(month_lags)
        self._hidden_names = tuple(name for name, _, _ in layout)
        if share_weights:
            shared = {name: DenseLayer.init(i, o, activation, rng) for name, i, o in layout}
            self.hours = [dict(shared, out=DenseLayer.init(HIDDEN_WIDTH, 1, "identity", rng))
                          for _ in range(DAY_WIDTH)]
        else:
            self.hours = []
            for _ in range(DAY_WIDTH):
                layers = {name: DenseLayer.init(i, o, activation, rng) for name, i, o in layout}
                layers["out"] = DenseLayer.init(HIDDEN_WIDTH, 1, "identity", rng)
                self.hours.append(layers)

    def named_layers(self):
        if self.share_weights:
            for name in self._hidden_names:
                yield f"shared.{name}", self.hours[0][name]
            for k in range(DAY_WIDTH):
                yield f"h{k:02d}.out", self.hours[k]["out"]
        else:
            for k in range(DAY_WIDTH):
                for name in self._hidden_names + ("out",):
                    yield f"h{k:02d}.{name}", self.hours[k][name]

    def _key(self, k: int, name: str) -> str:
        if self.share_weights and name != "out":
            return f"shared.{name}"
        return f"h{k:02d}.{name}"

    def _forward_hour(self, k: int, feats, x_hour: np.ndarray, drop):
        layers = self.hours[k]
        cache: dict = {}

        def run(name, x):
            out, c = dense_forward(layers[name], x)
            smask = None
            if drop is not None:
                out, smask = _drop(out, drop)
            cache[name] = (c, smask)
            return out

        a_m = run("month", feats.pair_month)
        a_w = run("week", feats.pair_week)
        a_d = run("day", feats.pair_day)
        a_h = run("hour", x_hour)
        a_c1 = run("cal_fc1", feats.cal_sw)
        a_c2 = run("cal_fc2", feats.cal_sw)
        a_f1 = run("fc1", np.concatenate([a_h, a_c1], axis=1))
        a_f2 = run("fc2", np.concatenate([a_m, a_w, a_d, a_c2, feats.cal_h], axis=1))
        a_p = run("pre_out", np.concatenate([a_f1, a_f2, feats.t_h], axis=1))
        out, c_out = dense_forward(layers["out"], a_p)  # no dropout on the output layer
        cache["out"] = (c_out, None)
        return out, cache

    def _backward_hour(self, k: int, cache: dict, g: np.ndarray, grads: dict, prefix: str):
        layers = self.hours[k]

        def back(name, upstream):
            c, smask = cache[name]
            if smask is not None:
                upstream = upstream * smask
            dx, lg = dense_backward(layers[name], c, upstream)
            key = prefix + self._key(k, name)
            _acc(grads, key + ".w", lg.weights)
            _acc(grads, key + ".b", lg.biases)
            return dx

        d_ap = back("out", g)
        d_xp = back("pre_out", d_ap)
        d_x1 = back("fc1", d_xp[:, :HIDDEN_WIDTH])
        d_x2 = back("fc2", d_xp[:, HIDDEN_WIDTH:2 * HIDDEN_WIDTH])
        back("cal_fc1", d_x1[:, HIDDEN_WIDTH:])
        back("cal_fc2", d_x2[:, 3 * HIDDEN_WIDTH:3 * HIDDEN_WIDTH + CAL_WIDTH])
        back("month", d_x2[:, :HIDDEN_WIDTH])
        back("week", d_x2[:, HIDDEN_WIDTH:2 * HIDDEN_WIDTH])
        back("day", d_x2[:, 2 * HIDDEN_WIDTH:3 * HIDDEN_WIDTH])
        return back("hour", d_x1[:, :HIDDEN_WIDTH])

    def forward_day(self, batch: DayBatch, drop=None):
        """Chained forecast of all 24 hours; returns ((n, 24) loads, caches)."""
        n = batch.n
        out = np.zeros((n, DAY_WIDTH))
        caches = []
        for k in range(DAY_WIDTH):
            feats = batch.hours[k]
            x_hour = feats.l_hour
            if k:
                x_hour = x_hour.copy()
                x_hour[:, -k:] = out[:, :k]  # live outputs replace target-day slots
            o, cache = self._forward_hour(k, feats, x_hour, drop)
            out[:, k] = o[:, 0]
            caches.append(cache)
        return out, caches

    def backward_day(self, caches, d_out: np.ndarray, grads: dict, prefix: str = "basic.") -> None:
        """Accumulate parameter gradients for an upstream (n, 24) gradient.

        Hours run in reverse so each hour's gradient already includes the
        contributions flowing back from later hours' recent-load windows.
        """
        gL = np.array(d_out, dtype=np.float64)
        for k in range(DAY_WIDTH - 1, -1, -1):
            d_xhour = self._backward_hour(k, caches[k], gL[:, k:k + 1], grads, prefix)
            if k:
                gL[:, :k] += d_xhour[:, -k:]


# --- residual stages -----------------------------------------------------------

@dataclass
class ResidualBlock:
    """x + F(x): a hidden layer and a linear layer back to the input width."""

    layer1: DenseLayer
    layer2: DenseLayer

    @classmethod
    def init(cls, rng, activation: str = "selu", width: int = DAY_WIDTH,
             hidden: int = BLOCK_HIDDEN) -> "ResidualBlock":
        return cls(DenseLayer.init(width, hidden, activation, rng),
                   DenseLayer.init(hidden, width, "identity", rng))


def residual_block_forward(block: ResidualBlock, x, drop=None):
    h, c1 = dense_forward(block.layer1, x)
    smask = None
    if drop is not None:
        h, smask = _drop(h, drop)
    f, c2 = dense_forward(block.layer2, h)
    return x + f, (c1, c2, smask)


def residual_block_backward(block: ResidualBlock, cache, g, grads=None, prefix: str = ""):
    c1, c2, smask = cache
    dh, lg2 = dense_backward(block.layer2, c2, g)
    if smask is not None:
        dh = dh * smask
    dx_chain, lg1 = dense_backward(block.layer1, c1, dh)
    if grads is not None:
        _acc(grads, prefix + ".l1.w", lg1.weights)
        _acc(grads, prefix + ".l1.b", lg1.biases)
        _acc(grads, prefix + ".l2.w", lg2.weights)
        _acc(grads, prefix + ".l2.b", lg2.biases)
    return g + dx_chain


@dataclass
class ResNetStage:
    """Block stack with averaging shortcuts: every `every` blocks the group
    entry is averaged into the group exit, and with `outer` the stage input is
    averaged into the stage output. Zero-weighted blocks make it an identity.
    """

    blocks: list
    every: int
    outer: bool

    @classmethod
    def init(cls, num_blocks: int, every: int, outer: bool, activation: str, rng) -> "ResNetStage":
        if every and num_blocks % every:
            raise ValueError("num_blocks must be divisible by inner_shortcut_every")
        return cls([ResidualBlock.init(rng, activation) for _ in range(num_blocks)], every, outer)

    def named_blocks(self):
        for i, b in enumerate(self.blocks):
            yield f"b{i:02d}", b


def resnet_forward(stage: ResNetStage, x0, drop=None):
    v = np.asarray(x0, dtype=np.float64)
    caches = []
    if stage.every:
        for start in range(0, len(stage.blocks), stage.every):
            entry = v
            for i in range(start, start + stage.every):
                v, c = residual_block_forward(stage.blocks[i], v, drop)
                caches.append(c)
            v = 0.5 * (v + entry)
    else:
        for block in stage.blocks:
            v, c = residual_block_forward(block, v, drop)
            caches.append(c)
    out = 0.5 * (v + x0) if stage.outer else v
    return out, caches


def resnet_backward(stage: ResNetStage, caches, g, grads: dict, prefix: str = "resnet."):
    g = np.asarray(g, dtype=np.float64)
    if stage.outer:
        dv = 0.5 * g
        dx0 = 0.5 * g
    else:
        dv = g
        dx0 = np.zeros_like(g)
    nb = len(stage.blocks)
    if stage.every:
        for start in range(nb - stage.every, -1, -stage.every):
            d_entry = 0.5 * dv
            dv = 0.5 * dv
            for i in range(start + stage.every - 1, start - 1, -1):
                dv = residual_block_backward(stage.blocks[i], caches[i], dv, grads, f"{prefix}b{i:02d}")
            dv = dv + d_entry
    else:
        for i in range(nb - 1, -1, -1):
            dv = residual_block_backward(stage.blocks[i], caches[i], dv, grads, f"{prefix}b{i:02d}")
    return dx0 + dv


@dataclass
class ResNetPlusStage:
    """Two block paths with dense averaging merges.

    Side block 1 reads the stage input; every later side block reads the first
    main block's output. Merge l averages main and side outputs. Main block l
    (l >= 2) reads the average of all previous merges plus the stage input, so
    its fan-in is l. The stage output is the last merge. Zero-weighted blocks
    make it an identity.
    """

    main: list
    side: list

    @classmethod
    def init(cls, num_layers: int, activation: str, rng) -> "ResNetPlusStage":
        return cls([ResidualBlock.init(rng, activation) for _ in range(num_layers)],
                   [ResidualBlock.init(rng, activation) for _ in range(num_layers)])

    def named_blocks(self):
        for i, b in enumerate(self.main):
            yield f"main{i:02d}", b
        for i, b in enumerate(self.side):
            yield f"side{i:02d}", b


def resnetplus_forward(stage: ResNetPlusStage, x0, drop=None):
    x0 = np.asarray(x0, dtype=np.float64)
    n_layers = len(stage.main)
    mcaches, scaches, fanins = [], [], []
    merges = []
    run_sum = x0.copy()  # x0 plus all merge outputs so far

    m_out, c = residual_block_forward(stage.main[0], x0, drop)
    mcaches.append(c)
    fanins.append(1)
    m_first = m_out
    s_out, sc = residual_block_forward(stage.side[0], x0, drop)
    scaches.append(sc)
    merges.append(0.5 * (m_out + s_out))
    for l in range(1, n_layers):
        run_sum += merges[l - 1]
        fanins.append(l + 1)
        m_in = run_sum / (l + 1)
        m_out, c = residual_block_forward(stage.main[l], m_in, drop)
        mcaches.append(c)
        s_out, sc = residual_block_forward(stage.side[l], m_first, drop)
        scaches.append(sc)
        merges.append(0.5 * (m_out + s_out))
    return merges[-1], (mcaches, scaches, fanins)


def resnetplus_backward(stage: ResNetPlusStage, cache, g, grads: dict, prefix: str = "rnp."):
    mcaches, scaches, _ = cache
    n_layers = len(stage.main)
    g = np.asarray(g, dtype=np.float64)
    d_merge = [np.zeros_like(g) for _ in range(n_layers)]
    d_main_out = [np.zeros_like(g) for _ in range(n_layers)]
    d_merge[-1] = d_merge[-1] + g
    dx0 = np.zeros_like(g)
    for l in range(n_layers - 1, -1, -1):
        d_m = d_main_out[l] + 0.5 * d_merge[l]
        d_s = 0.5 * d_merge[l]
        d_side_in = residual_block_backward(stage.side[l], scaches[l], d_s, grads, f"{prefix}side{l:02d}")
        if l == 0:
            dx0 += d_side_in
        else:
            d_main_out[0] += d_side_in  # side blocks after the first read main block 1
        d_m_in = residual_block_backward(stage.main[l], mcaches[l], d_m, grads, f"{prefix}main{l:02d}")
        if l == 0:
            dx0 += d_m_in
        else:
            share = d_m_in / (l + 1)
            dx0 += share
            for j in range(l):
                d_merge[j] += share
    return dx0


# --- full model ------------------------------------------------------------------

class ForecastModel:
    """Basic structure plus an optional residual stage."""

    def __init__(self, spec: ModelSpec, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.spec = spec
        self.basic = BasicStructure(spec.month_lags, spec.share_weights, spec.activation, rng)
        if spec.residual_stage == "resnet":
            self.stage = ResNetStage.init(spec.num_blocks, spec.inner_shortcut_every,
                                          spec.outer_shortcut, spec.activation, rng)
        elif spec.residual_stage == "resnetplus":
            self.stage = ResNetPlusStage.init(spec.num_layers, spec.activation, rng)
        else:
            self.stage = None

    def _named_layers(self):
        for name, layer in self.basic.named_layers():
            yield f"basic.{name}", layer
        if isinstance(self.stage, ResNetStage):
            for name, block in self.stage.named_blocks():
                yield f"resnet.{name}.l1", block.layer1
                yield f"resnet.{name}.l2", block.layer2
        elif isinstance(self.stage, ResNetPlusStage):
            for name, block in self.stage.named_blocks():
                yield f"rnp.{name}.l1", block.layer1
                yield f"rnp.{name}.l2", block.layer2

    def params(self) -> dict:
        """Live name -> array views; mutating them updates the model."""
        out = {}
        for name, layer in self._named_layers():
            out[name + ".w"] = layer.weights
            out[name + ".b"] = layer.biases
        return out

    def params_copy(self) -> dict:
        return {k: v.copy() for k, v in self.params().items()}

    def set_params(self, new: dict) -> None:
        cur = self.params()
        if set(cur) != set(new):
            raise ShapeError("parameter names do not match this architecture")
        for key, arr in cur.items():
            val = np.asarray(new[key], dtype=np.float64)
            if val.shape != arr.shape:
                raise ShapeError(f"shape mismatch for {key!r}: {val.shape} != {arr.shape}")
            arr[...] = val

    def descriptor(self) -> dict:
        return self.spec.descriptor()

    @classmethod
    def from_descriptor(cls, desc: dict, rng=None) -> "ForecastModel":
        return cls(ModelSpec.from_descriptor(desc), rng)

    def forward_day(self, batch: DayBatch, dropout_p: float = 0.0, rng=None, need_cache: bool = True):
        drop = None
        if dropout_p:
            if not 0.0 < dropout_p < 1.0:
                raise ValueError(f"dropout_p must be in (0, 1), got {dropout_p}")
            if rng is None:
                raise ValueError("dropout requires an rng")
            drop = (float(dropout_p), rng)
        curve, bcache = self.basic.forward_day(batch, drop)
        if self.stage is None:
            out, scache = curve, None
        elif isinstance(self.stage, ResNetStage):
            out, scache = resnet_forward(self.stage, curve, drop)
        else:
            out, scache = resnetplus_forward(self.stage, curve, drop)
        return out, ((bcache, scache) if need_cache else None)

    def backward_day(self, cache, d_out) -> dict:
        bcache, scache = cache
        grads: dict = {}
        if self.stage is None:
            d_curve = np.asarray(d_out, dtype=np.float64)
        elif isinstance(self.stage, ResNetStage):
            d_curve = resnet_backward(self.stage, scache, d_out, grads)
        else:
            d_curve = resnetplus_backward(self.stage, scache, d_out, grads)
        self.basic.backward_day(bcache, d_curve, grads)
        return grads

    def predict_day(self, batch: DayBatch) -> np.ndarray:
        return self.forward_day(batch, need_cache=False)[0]


def basic_forward_day(basic: BasicStructure, day):
    """Chained 24-hour forecast for one DayInput or a DayBatch."""
    if isinstance(day, DayInput):
        out, _ = basic.forward_day(day_batch([day]))
        return out[0]
    out, _ = basic.forward_day(day)
    return out


def full_model_forward(model: ForecastModel, day) -> np.ndarray:
    """Point forecast for one DayInput or a DayBatch (dropout off)."""
    if isinstance(day, DayInput):
        return model.predict_day(day_batch([day]))[0]
    return model.predict_day(day)
