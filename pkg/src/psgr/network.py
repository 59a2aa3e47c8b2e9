"""Miniature encoder-decoder with a coarse branch and graph reasoning.

Three conv/BN/ReLU encoder stages (channels 8/16/32) with 2x max-pool
downsampling, a bottleneck at 1/8 resolution where the coarse branch and
the reasoning module sit, and a mirrored bilinear-upsampling decoder
with skip connections. The coarse probabilities gate uncertainty
selection (values only; the selection path carries no gradient) and
receive deep supervision after upsampling to the input size.
"""

import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import ops
from .autodiff import Var
from .errors import PstnFormatError, ShapeError, ValidationError
from .reasoner import PsgrConfig, PsgrModule, init_params as psgr_init_params
from .tensor import DTYPES, Rng, derive_seed, parse_pstn, pstn_bytes

BN_MOMENTUM = 0.1


@dataclass
class NetConfig:
    n_classes: int = 2
    in_channels: int = 1
    enc_channels: tuple = (8, 16, 32)
    coarse_mid: int = 32
    psgr: Optional[PsgrConfig] = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValidationError(f"n_classes must be >= 2, got {self.n_classes}")
        if len(self.enc_channels) != 3:
            raise ValidationError("the toy backbone uses exactly 3 encoder stages")


@dataclass
class LossConfig:
    lam: float = 0.5          # auxiliary supervision weight
    dice_epsilon: float = 1e-5

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")


def one_hot(mask, n_classes, dtype=np.float32):
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() >= n_classes:
        raise ValidationError(f"mask labels outside [0, {n_classes})")
    out = np.zeros(mask.shape + (n_classes,), dtype=dtype)
    np.put_along_axis(out, mask[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def seg_loss(probs, target_onehot, n_classes, dice_eps=1e-5):
    """Pixel loss (BCE for 2 classes, cross-entropy above) plus Dice."""
    pixel = (ops.bce_loss(probs, target_onehot) if n_classes == 2
             else ops.cross_entropy(probs, target_onehot))
    return ops.add(pixel, ops.dice_loss(probs, target_onehot, eps=dice_eps))


def total_loss(main_probs, coarse_probs, target_onehot, cfg, n_classes):
    """main + lambda * coarse; the coarse map must already be upsampled."""
    if main_probs.data.shape != np.asarray(target_onehot).shape:
        raise ShapeError(f"total_loss: main {main_probs.data.shape} vs target "
                         f"{np.asarray(target_onehot).shape}")
    if coarse_probs.data.shape != main_probs.data.shape:
        raise ShapeError("total_loss: coarse prediction must be upsampled to the "
                         f"input size, got {coarse_probs.data.shape}")
    main = seg_loss(main_probs, target_onehot, n_classes, cfg.dice_epsilon)
    coarse = seg_loss(coarse_probs, target_onehot, n_classes, cfg.dice_epsilon)
    return ops.add(main, ops.scale(coarse, cfg.lam)), main, coarse


class SegNet:
    """Toy backbone + coarse branch + optional reasoning module."""

    def __init__(self, cfg, seed=0, dtype="f32", params=None, bn_state=None):
        self.cfg = cfg
        self.seed = int(seed)
        self.dtype = dtype
        np_dtype = DTYPES[dtype]
        self.params = {}
        self.bn_state = {}
        if params is None:
            self._init_params(np_dtype)
        else:
            self.params = {k: Var(np.array(v, dtype=np_dtype), requires_grad=True,
                                  name=k) for k, v in params.items()}
        if bn_state is not None:
            self.bn_state = {k: {kk: np.array(vv, dtype=np_dtype)
                                 for kk, vv in v.items()} for k, v in bn_state.items()}
        self.psgr = None
        if cfg.psgr is not None:
            c_feat = cfg.enc_channels[-1]
            psgr_params = {k: v for k, v in self.params.items()
                           if k.startswith("psgr_")}
            self.psgr = PsgrModule(c_feat, cfg.psgr,
                                   {k[len("psgr_"):]: v for k, v in psgr_params.items()})

    # -- initialization ----------------------------------------------------

    def _param_rng(self, name):
        return Rng(derive_seed(self.seed, f"init/{name}"))

    def _add_conv(self, name, k, cin, cout, np_dtype, zero=False):
        if zero:
            w = np.zeros((k * k * cin, cout), dtype=np_dtype)
        else:
            std = np.sqrt(2.0 / (k * k * cin))
            w = (self._param_rng(f"{name}_w").normal((k * k * cin, cout))
                 * std).astype(np_dtype)
        self.params[f"{name}_w"] = Var(w, requires_grad=True, name=f"{name}_w")
        self.params[f"{name}_b"] = Var(np.zeros(cout, dtype=np_dtype),
                                       requires_grad=True, name=f"{name}_b")

    def _add_bn(self, name, c, np_dtype):
        self.params[f"{name}_gamma"] = Var(np.ones(c, dtype=np_dtype),
                                           requires_grad=True, name=f"{name}_gamma")
        self.params[f"{name}_beta"] = Var(np.zeros(c, dtype=np_dtype),
                                          requires_grad=True, name=f"{name}_beta")
        self.bn_state[name] = {"mean": np.zeros(c, dtype=np_dtype),
                               "var": np.ones(c, dtype=np_dtype)}

    def _init_params(self, np_dtype):
        cfg = self.cfg
        c1, c2, c3 = cfg.enc_channels
        cin = cfg.in_channels
        self._add_conv("enc1", 3, cin, c1, np_dtype)
        self._add_bn("enc1_bn", c1, np_dtype)
        self._add_conv("enc2", 3, c1, c2, np_dtype)
        self._add_bn("enc2_bn", c2, np_dtype)
        self._add_conv("enc3", 3, c2, c3, np_dtype)
        self._add_bn("enc3_bn", c3, np_dtype)
        self._add_conv("bott", 3, c3, c3, np_dtype)
        self._add_bn("bott_bn", c3, np_dtype)
        self._add_conv("coarse1", 3, c3, cfg.coarse_mid, np_dtype)
        self._add_bn("coarse1_bn", cfg.coarse_mid, np_dtype)
        self._add_conv("coarse2", 1, cfg.coarse_mid, cfg.n_classes, np_dtype)
        if cfg.psgr is not None:
            rng = self._param_rng("psgr")
            for k, v in psgr_init_params(c3, cfg.psgr, rng, np_dtype).items():
                self.params[f"psgr_{k}"] = Var(v, requires_grad=True, name=f"psgr_{k}")
        self._add_conv("dec3", 3, c3 + c3, c2, np_dtype)
        self._add_bn("dec3_bn", c2, np_dtype)
        self._add_conv("dec2", 3, c2 + c2, c1, np_dtype)
        self._add_bn("dec2_bn", c1, np_dtype)
        self._add_conv("dec1", 3, c1 + c1, c1, np_dtype)
        self._add_bn("dec1_bn", c1, np_dtype)
        self._add_conv("head", 1, c1, cfg.n_classes, np_dtype)

    # -- forward -----------------------------------------------------------

    def _bn(self, name, x, training):
        gamma = self.params[f"{name}_gamma"]
        beta = self.params[f"{name}_beta"]
        state = self.bn_state[name]
        if training:
            y, mu, var = ops.batchnorm_train(x, gamma, beta)
            state["mean"] = ((1.0 - BN_MOMENTUM) * state["mean"]
                             + BN_MOMENTUM * mu.astype(state["mean"].dtype))
            state["var"] = ((1.0 - BN_MOMENTUM) * state["var"]
                            + BN_MOMENTUM * var.astype(state["var"].dtype))
            return y
        return ops.batchnorm_eval(x, gamma, beta, state["mean"], state["var"])

    def _stage(self, name, x, training, ksize=3):
        p = self.params
        y = ops.conv2d(x, p[f"{name}_w"], p[f"{name}_b"], ksize=ksize)
        return ops.relu(self._bn(f"{name}_bn", y, training))

    def forward(self, x, training=False):
        """x: (B, H, W, in_channels) -> (main logits, coarse logits, traces).

        Coarse logits live at 1/8 of the input resolution; traces hold
        the per-sample reasoning structure (empty when disabled).
        """
        x = x if isinstance(x, Var) else Var(np.asarray(x, DTYPES[self.dtype]))
        if x.data.ndim != 4 or x.data.shape[-1] != self.cfg.in_channels:
            raise ShapeError(f"forward: expected (B, H, W, {self.cfg.in_channels}), "
                             f"got {x.data.shape}")
        if x.data.shape[1] % 8 or x.data.shape[2] % 8:
            raise ShapeError("forward: spatial dims must be multiples of 8")

        e1 = self._stage("enc1", x, training)
        e2 = self._stage("enc2", ops.maxpool2(e1), training)
        e3 = self._stage("enc3", ops.maxpool2(e2), training)
        bott = self._stage("bott", ops.maxpool2(e3), training)

        cmid = self._stage("coarse1", bott, training)
        coarse_logits = ops.conv2d(cmid, self.params["coarse2_w"],
                                   self.params["coarse2_b"], ksize=1)

        traces = []
        feat = bott
        if self.psgr is not None:
            probs = ops.softmax(coarse_logits).data  # selection is stop-gradient
            feat, traces = self.psgr.forward_batch(feat, probs)

        d3 = self._stage("dec3", ops.concat_channels(
            [ops.upsample_bilinear(feat, 2), e3]), training)
        d2 = self._stage("dec2", ops.concat_channels(
            [ops.upsample_bilinear(d3, 2), e2]), training)
        d1 = self._stage("dec1", ops.concat_channels(
            [ops.upsample_bilinear(d2, 2), e1]), training)
        main_logits = ops.conv2d(d1, self.params["head_w"], self.params["head_b"],
                                 ksize=1)
        return main_logits, coarse_logits, traces

    def predict(self, x):
        """Class mask (B, H, W) from an eval-mode forward pass."""
        main_logits, _, _ = self.forward(x, training=False)
        return np.argmax(main_logits.data, axis=-1).astype(np.uint8)

    def param_arrays(self):
        return {k: np.array(v.data) for k, v in self.params.items()}


# ---------------------------------------------------------------------------
# checkpoints: length-prefixed JSON manifest + concatenated PSTN tensors

CKPT_VERSION = 1


def _config_to_dict(cfg):
    d = asdict(cfg)
    if cfg.psgr is not None:
        d["psgr"] = asdict(cfg.psgr)
    d["enc_channels"] = list(cfg.enc_channels)
    return d


def _config_from_dict(d):
    d = dict(d)
    if d.get("psgr") is not None:
        d["psgr"] = PsgrConfig(**d["psgr"])
    d["enc_channels"] = tuple(d["enc_channels"])
    return NetConfig(**d)


def save_checkpoint(path, net, extra=None):
    """Write parameters and BN state; identical nets produce identical bytes."""
    entries = {}
    blob = bytearray()
    tensors = dict(sorted(net.param_arrays().items()))
    for name, state in sorted(net.bn_state.items()):
        tensors[f"bn_state/{name}/mean"] = state["mean"]
        tensors[f"bn_state/{name}/var"] = state["var"]
    for name, arr in tensors.items():
        raw = pstn_bytes(arr)
        entries[name] = {"offset": len(blob), "length": len(raw),
                         "shape": list(arr.shape), "dtype": str(arr.dtype)}
        blob.extend(raw)
    manifest = {
        "format": "psgr-checkpoint",
        "version": CKPT_VERSION,
        "seed": net.seed,
        "dtype": net.dtype,
        "config": _config_to_dict(net.cfg),
        "tensors": entries,
    }
    if extra:
        manifest["extra"] = extra
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        fh.write(bytes(blob))


def load_checkpoint(path):
    """Rebuild a SegNet (and the manifest) from a checkpoint file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise PstnFormatError(f"{path}: truncated checkpoint")
    (mlen,) = struct.unpack("<Q", raw[:8])
    try:
        manifest = json.loads(raw[8:8 + mlen])
    except ValueError as exc:
        raise PstnFormatError(f"{path}: bad manifest ({exc})") from None
    if manifest.get("format") != "psgr-checkpoint":
        raise PstnFormatError(f"{path}: not a checkpoint file")
    if manifest.get("version") != CKPT_VERSION:
        raise PstnFormatError(f"{path}: unsupported checkpoint version")
    blob = raw[8 + mlen:]
    tensors = {}
    for name, entry in manifest["tensors"].items():
        chunk = blob[entry["offset"]:entry["offset"] + entry["length"]]
        tensors[name] = parse_pstn(chunk)
    params = {k: v for k, v in tensors.items() if not k.startswith("bn_state/")}
    bn_state = {}
    for k, v in tensors.items():
        if k.startswith("bn_state/"):
            _, bn_name, stat = k.split("/")
            bn_state.setdefault(bn_name, {})[stat] = v
    cfg = _config_from_dict(manifest["config"])
    net = SegNet(cfg, seed=manifest["seed"], dtype=manifest["dtype"],
                 params=params, bn_state=bn_state)
    return net, manifest
