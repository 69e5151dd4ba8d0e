"""Architecture assembly: encoder, optional gated latent cell, optional
decoder, and the variant wiring that routes the latent to the
hypersphere branch and/or the decoder.

Three families are provided.  ``small_image`` (32x32 inputs) and
``large_image`` (64x64 ingestion-resized inputs) follow the reference
layer lists exactly; ``tiny_image`` (16x16) is a proportionally scaled
stack for fast synthetic experiments.  Spatial size is reduced only by
pooling (encoder) and recovered only by stride-2 deconvolutions
(decoder), so kernels use same-padding k//2 throughout.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ContractError, Rng, ShapeError, Tape, Tensor
from .layers import (
    LEAKY_SLOPE,
    BatchNormState,
    LayerParams,
    batchnorm,
    conv2d,
    deconv2d,
    init_params,
    linear,
    maxpool2d,
)
from .losses import VARIANT_TERMS
from .lstm import GATE_ABLATIONS, LstmCellParams, lstm_step
from . import autodiff as ad
from . import checkpoint as ckpt

FAMILIES = ("small_image", "large_image", "tiny_image")

# variant -> (has_lstm, has_decoder); loss terms live in losses.VARIANT_TERMS
VARIANT_WIRING = {
    "cae": (False, True),
    "dsvdd": (False, False),
    "iaead": (False, True),
    "dsvdd_kl": (False, False),
    "dlsvdd": (True, False),
    "dlsvdd_kl": (True, False),
    "iae_kl": (False, True),
    "iae_lstm": (True, True),
    "iae_lstm_kl": (True, True),
}

VARIANTS = tuple(sorted(VARIANT_WIRING))


@dataclass
class ArchitectureSpec:
    family: str
    in_channels: int
    input_hw: tuple[int, int]
    latent_dim: int                       # dimension of the scored latent
    encoder_layers: list                  # ("conv", s_in, s_out, k)
    lstm_dims: tuple[int, int]            # flattened conv latent in/out
    linear_dims: tuple[int, int] | None   # projection after the cell
    decoder_layers: list                  # ("deconv", s_in, s_out, k)
    decoder_strides: list
    decoder_head: tuple[int, int, int]    # reshape of the scored latent

    def to_manifest(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        return d

    @classmethod
    def from_manifest(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        d["input_hw"] = tuple(d["input_hw"])
        d["lstm_dims"] = tuple(d["lstm_dims"])
        if d.get("linear_dims") is not None:
            d["linear_dims"] = tuple(d["linear_dims"])
        d["decoder_head"] = tuple(d["decoder_head"])
        d["encoder_layers"] = [tuple(t) for t in d["encoder_layers"]]
        d["decoder_layers"] = [tuple(t) for t in d["decoder_layers"]]
        return cls(**d)


def small_image_spec(in_channels: int) -> ArchitectureSpec:
    if in_channels not in (1, 3):
        raise ShapeError(f"small_image supports 1 or 3 channels, got {in_channels}")
    return ArchitectureSpec(
        family="small_image",
        in_channels=in_channels,
        input_hw=(32, 32),
        latent_dim=128,
        encoder_layers=[("conv", in_channels, 32, 5), ("conv", 32, 64, 5),
                        ("conv", 64, 128, 5)],
        lstm_dims=(2048, 2048),
        linear_dims=(2048, 128),
        decoder_layers=[("deconv", 8, 128, 5), ("deconv", 128, 64, 5),
                        ("deconv", 64, 32, 5), ("deconv", 32, in_channels, 5)],
        decoder_strides=[1, 2, 2, 2],
        decoder_head=(8, 4, 4),
    )


def large_image_spec() -> ArchitectureSpec:
    return ArchitectureSpec(
        family="large_image",
        in_channels=3,
        input_hw=(64, 64),
        latent_dim=4096,
        encoder_layers=[("conv", 3, 96, 3), ("conv", 96, 128, 3),
                        ("conv", 128, 256, 3), ("conv", 256, 256, 3)],
        lstm_dims=(4096, 4096),
        linear_dims=None,
        decoder_layers=[("deconv", 256, 256, 3), ("deconv", 256, 128, 3),
                        ("deconv", 128, 96, 3), ("deconv", 96, 3, 3)],
        decoder_strides=[2, 2, 2, 2],
        decoder_head=(256, 4, 4),
    )


def tiny_image_spec(in_channels: int = 1) -> ArchitectureSpec:
    return ArchitectureSpec(
        family="tiny_image",
        in_channels=in_channels,
        input_hw=(16, 16),
        latent_dim=32,
        encoder_layers=[("conv", in_channels, 8, 5), ("conv", 8, 16, 5),
                        ("conv", 16, 32, 5)],
        lstm_dims=(128, 128),
        linear_dims=(128, 32),
        decoder_layers=[("deconv", 8, 32, 5), ("deconv", 32, 16, 5),
                        ("deconv", 16, 8, 5), ("deconv", 8, in_channels, 5)],
        decoder_strides=[1, 2, 2, 2],
        decoder_head=(8, 2, 2),
    )


def spec_for_family(family: str, in_channels: int) -> ArchitectureSpec:
    if family == "small_image":
        return small_image_spec(in_channels)
    if family == "large_image":
        if in_channels != 3:
            raise ShapeError("large_image is fixed at 3 input channels")
        return large_image_spec()
    if family == "tiny_image":
        return tiny_image_spec(in_channels)
    raise ShapeError(f"unknown family {family!r}; one of {FAMILIES}")


@dataclass
class VariantConfig:
    variant: str = "iae_lstm_kl"
    boundary: str = "hard"
    gate_ablation: str = "none"
    kl_mode: str = "batch_moments"
    bias_free: bool = False

    def __post_init__(self):
        if self.variant not in VARIANT_WIRING:
            raise ContractError(
                f"unknown variant {self.variant!r}; one of {VARIANTS}"
            )
        if self.boundary not in ("soft", "hard"):
            raise ContractError(f"boundary must be soft|hard, got {self.boundary!r}")
        if self.gate_ablation not in GATE_ABLATIONS:
            raise ContractError(
                f"unknown gate ablation {self.gate_ablation!r}; one of {GATE_ABLATIONS}"
            )
        if self.gate_ablation != "none" and not self.has_lstm:
            raise ContractError(
                f"gate ablation {self.gate_ablation!r} needs a variant with the cell"
            )

    @property
    def has_lstm(self) -> bool:
        return VARIANT_WIRING[self.variant][0]

    @property
    def has_decoder(self) -> bool:
        return VARIANT_WIRING[self.variant][1]

    @property
    def has_svdd(self) -> bool:
        return VARIANT_TERMS[self.variant][0]

    @property
    def has_kl(self) -> bool:
        return VARIANT_TERMS[self.variant][1]

    @property
    def score_kind(self) -> str:
        # reconstruction scoring only for the plain autoencoder baseline
        return "reconstruction" if self.variant == "cae" else "distance"

    def to_manifest(self) -> dict:
        return asdict(self)

    @classmethod
    def from_manifest(cls, d: dict) -> "VariantConfig":
        return cls(**d)


@dataclass
class ForwardResult:
    z: Tensor
    z_hat: Tensor
    x_hat: Tensor | None
    gates: object | None


@dataclass
class ModelParams:
    spec: ArchitectureSpec
    variant: VariantConfig
    encoder: list[LayerParams]
    encoder_bn: list[BatchNormState]
    lstm: LstmCellParams | None
    latent: LayerParams | None
    decoder: list[LayerParams] | None
    decoder_bn: list[BatchNormState] | None
    dtype: object = np.float32

    # --- parameter plumbing ------------------------------------------------

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays in a stable order (checkpoint / optimizer keys)."""
        out: dict[str, np.ndarray] = {}
        for i, (lp, bn) in enumerate(zip(self.encoder, self.encoder_bn)):
            out[f"enc{i}.weight"] = lp.weight
            if lp.bias is not None:
                out[f"enc{i}.bias"] = lp.bias
            out[f"enc{i}.bn.gamma"] = bn.gamma
            out[f"enc{i}.bn.beta"] = bn.beta
        if self.lstm is not None:
            for nm in ("w_input", "w_output", "w_forget", "w_candidate",
                       "b_input", "b_output", "b_forget", "b_candidate"):
                out[f"lstm.{nm}"] = getattr(self.lstm, nm)
        if self.latent is not None:
            out["latent.weight"] = self.latent.weight
            if self.latent.bias is not None:
                out["latent.bias"] = self.latent.bias
        if self.decoder is not None:
            for i, lp in enumerate(self.decoder):
                out[f"dec{i}.weight"] = lp.weight
                if lp.bias is not None:
                    out[f"dec{i}.bias"] = lp.bias
                if i < len(self.decoder) - 1:
                    bn = self.decoder_bn[i]
                    out[f"dec{i}.bn.gamma"] = bn.gamma
                    out[f"dec{i}.bn.beta"] = bn.beta
        return out

    def set_array(self, name: str, value: np.ndarray):
        """Replace one named parameter array (used by the optimizer)."""
        parts = name.split(".")
        if parts[0].startswith("enc"):
            idx = int(parts[0][3:])
            if parts[1] == "bn":
                setattr(self.encoder_bn[idx], parts[2], value)
            elif parts[1] == "weight":
                self.encoder[idx].weight = value
            else:
                self.encoder[idx].bias = value
        elif parts[0] == "lstm":
            setattr(self.lstm, parts[1], value)
        elif parts[0] == "latent":
            if parts[1] == "weight":
                self.latent.weight = value
            else:
                self.latent.bias = value
        elif parts[0].startswith("dec"):
            idx = int(parts[0][3:])
            if parts[1] == "bn":
                setattr(self.decoder_bn[idx], parts[2], value)
            elif parts[1] == "weight":
                self.decoder[idx].weight = value
            else:
                self.decoder[idx].bias = value
        else:
            raise KeyError(name)

    def trainable_names(self) -> list[str]:
        """bias_free freezes conv/linear biases and batch-norm shift."""
        names = list(self.named_arrays())
        if not self.variant.bias_free:
            return names
        return [n for n in names if not (n.endswith(".bias") or n.endswith(".beta"))]

    def decay_weight_names(self) -> list[str]:
        """Weight matrices covered by the decay term (no biases, no BN)."""
        keep = (".weight", ".w_input", ".w_output", ".w_forget", ".w_candidate")
        return [n for n in self.named_arrays() if n.endswith(keep) and ".bn." not in n]

    def running_stats(self) -> dict[str, np.ndarray]:
        out = {}
        for i, bn in enumerate(self.encoder_bn):
            out[f"enc{i}.bn.running_mean"] = bn.running_mean
            out[f"enc{i}.bn.running_var"] = bn.running_var
        if self.decoder_bn is not None:
            for i, bn in enumerate(self.decoder_bn):
                out[f"dec{i}.bn.running_mean"] = bn.running_mean
                out[f"dec{i}.bn.running_var"] = bn.running_var
        return out


def _check_pool_chain(hw, n_pools, family):
    h, w = hw
    for stage in range(n_pools):
        if h % 2 or w % 2:
            raise ShapeError(
                f"{family}: spatial dims {h}x{w} are odd at pooling stage {stage}"
            )
        h, w = h // 2, w // 2
    return h, w


def build(spec: ArchitectureSpec, vc: VariantConfig, rng: Rng, dtype=np.float32) -> ModelParams:
    """Initialize a shape-checked parameter set for (spec, variant)."""
    if spec.family not in FAMILIES:
        raise ShapeError(f"unknown family {spec.family!r}")
    if spec.family == "large_image" and spec.in_channels != 3:
        raise ShapeError("large_image is fixed at 3 input channels")
    h, w = _check_pool_chain(spec.input_hw, len(spec.encoder_layers), spec.family)
    flat = spec.encoder_layers[-1][2] * h * w
    if flat != spec.lstm_dims[0]:
        raise ShapeError(
            f"encoder yields {flat}-dim latent but cell expects {spec.lstm_dims[0]}"
        )
    if spec.linear_dims is not None and spec.linear_dims[1] != spec.latent_dim:
        raise ShapeError("projection output must equal latent_dim")
    if int(np.prod(spec.decoder_head)) != spec.latent_dim:
        raise ShapeError("decoder head shape must repack latent_dim exactly")

    with_bias = not vc.bias_free
    encoder, encoder_bn = [], []
    r_enc = rng.child("encoder")
    for i, layer in enumerate(spec.encoder_layers):
        k = layer[3]
        encoder.append(
            init_params(layer, r_enc.child(i), dtype=dtype, with_bias=with_bias,
                        stride=1, padding=k // 2)
        )
        encoder_bn.append(BatchNormState.create(layer[2], dtype=dtype))

    lstm = None
    if vc.has_lstm:
        lstm = LstmCellParams.create(*spec.lstm_dims, rng.child("lstm"), dtype=dtype)

    latent = None
    if spec.linear_dims is not None:
        latent = init_params(("linear", *spec.linear_dims), rng.child("latent"),
                             dtype=dtype, with_bias=with_bias)

    decoder = decoder_bn = None
    if vc.has_decoder:
        decoder, decoder_bn = [], []
        r_dec = rng.child("decoder")
        hw_in = spec.decoder_head[1]
        for i, (layer, stride) in enumerate(zip(spec.decoder_layers, spec.decoder_strides)):
            k = layer[3]
            out_pad = 1 if stride == 2 else 0
            decoder.append(
                init_params(layer, r_dec.child(i), dtype=dtype, with_bias=with_bias,
                            stride=stride, padding=k // 2, output_padding=out_pad)
            )
            hw_in = (hw_in - 1) * stride - 2 * (k // 2) + k + out_pad
            if i < len(spec.decoder_layers) - 1:
                decoder_bn.append(BatchNormState.create(layer[2], dtype=dtype))
        if hw_in != spec.input_hw[0]:
            raise ShapeError(
                f"decoder reconstructs {hw_in}px, input is {spec.input_hw[0]}px"
            )
        if spec.decoder_layers[0][1] != spec.decoder_head[0]:
            raise ShapeError("first decoder layer must consume the head channels")
        if spec.decoder_layers[-1][2] != spec.in_channels:
            raise ShapeError("last decoder layer must emit the input channels")

    return ModelParams(
        spec=spec, variant=vc, encoder=encoder, encoder_bn=encoder_bn,
        lstm=lstm, latent=latent, decoder=decoder, decoder_bn=decoder_bn,
        dtype=dtype,
    )


def bind_leaves(model: ModelParams, tape: Tape) -> dict[str, Tensor]:
    """One leaf per trainable array; gradients land on these."""
    return {name: tape.leaf(arr) for name, arr in model.named_arrays().items()}


def forward(
    x,
    model: ModelParams,
    vc: VariantConfig | None = None,
    mode: str = "train",
    tape: Tape | None = None,
    leaves: dict[str, Tensor] | None = None,
) -> ForwardResult:
    """Run encoder -> (cell) -> (projection) -> (decoder).

    ``x`` may be an ndarray (a fresh tape is created unless given) or an
    existing graph Tensor.  Returns the conv latent z, the scored latent
    z_hat, the reconstruction (None for decoder-less variants) and the
    gate activations (None for variants without the cell).
    """
    vc = vc or model.variant
    spec = model.spec
    if isinstance(x, Tensor):
        ten_x = x
        tape = x.tape
    else:
        x = np.asarray(x, dtype=model.dtype)
        tape = tape or Tape()
        ten_x = tape.leaf(x)
    n = ten_x.data.shape[0]
    expected = (n, spec.in_channels, *spec.input_hw)
    if ten_x.data.shape != expected:
        raise ShapeError(f"input shape {ten_x.data.shape}, expected {expected}")
    if leaves is None:
        leaves = bind_leaves(model, tape)

    def p(name, default=None):
        return leaves.get(name, default)

    h = ten_x
    for i, lp in enumerate(model.encoder):
        h = conv2d(h, p(f"enc{i}.weight"), p(f"enc{i}.bias"),
                   stride=lp.stride, padding=lp.padding)
        h = batchnorm(h, p(f"enc{i}.bn.gamma"), p(f"enc{i}.bn.beta"),
                      model.encoder_bn[i], mode=mode)
        h = ad.leaky_relu(h, LEAKY_SLOPE)
        h = maxpool2d(h, 2, 2)
    z = ad.reshape(h, (n, spec.lstm_dims[0]))

    gates = None
    zh = z
    if vc.has_lstm:
        lstm_leaves = {nm.split(".", 1)[1]: leaves[nm]
                       for nm in leaves if nm.startswith("lstm.")}
        zh, gates = lstm_step(zh, model.lstm, ablation=vc.gate_ablation,
                              leaves=lstm_leaves)
    if model.latent is not None:
        zh = linear(zh, p("latent.weight"), p("latent.bias"))

    x_hat = None
    if vc.has_decoder:
        d = ad.reshape(zh, (n, *spec.decoder_head))
        last = len(model.decoder) - 1
        for i, lp in enumerate(model.decoder):
            d = deconv2d(d, p(f"dec{i}.weight"), p(f"dec{i}.bias"),
                         stride=lp.stride, padding=lp.padding,
                         output_padding=lp.output_padding)
            if i < last:
                d = batchnorm(d, p(f"dec{i}.bn.gamma"), p(f"dec{i}.bn.beta"),
                              model.decoder_bn[i], mode=mode)
                d = ad.leaky_relu(d, LEAKY_SLOPE)
        x_hat = ad.sigmoid(d)

    return ForwardResult(z=z, z_hat=zh, x_hat=x_hat, gates=gates)


# ---------------------------------------------------------------------------
# checkpoint glue

def save_model(path, model: ModelParams, extra: dict[str, np.ndarray] | None = None,
               manifest_extra: dict | None = None):
    tensors = dict(model.named_arrays())
    tensors.update(model.running_stats())
    if extra:
        tensors.update(extra)
    manifest = {
        "schema": "model-checkpoint",
        "architecture": model.spec.to_manifest(),
        "variant": model.variant.to_manifest(),
        "dtype": np.dtype(model.dtype).name,
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    ckpt.write_tensors(path, tensors, manifest)


def load_model(path) -> tuple[ModelParams, dict[str, np.ndarray], dict]:
    """Rebuild a model from a checkpoint; returns (model, extra_tensors,
    manifest).  Extra tensors are entries that are not model parameters
    (e.g. the hypersphere center)."""
    tensors, manifest = ckpt.read_tensors(path)
    if manifest is None or manifest.get("schema") != "model-checkpoint":
        raise ckpt.CheckpointError(f"{path} is not a model checkpoint")
    spec = ArchitectureSpec.from_manifest(manifest["architecture"])
    vc = VariantConfig.from_manifest(manifest["variant"])
    dtype = np.dtype(manifest["dtype"])
    model = build(spec, vc, Rng(0), dtype=dtype)
    consumed = set()
    for name in model.named_arrays():
        model.set_array(name, tensors[name].astype(dtype, copy=True))
        consumed.add(name)
    consumed.update(model.running_stats())
    for i, bn in enumerate(model.encoder_bn):
        bn.running_mean = tensors[f"enc{i}.bn.running_mean"].astype(dtype, copy=True)
        bn.running_var = tensors[f"enc{i}.bn.running_var"].astype(dtype, copy=True)
    if model.decoder_bn is not None:
        for i, bn in enumerate(model.decoder_bn):
            bn.running_mean = tensors[f"dec{i}.bn.running_mean"].astype(dtype, copy=True)
            bn.running_var = tensors[f"dec{i}.bn.running_var"].astype(dtype, copy=True)
    extra = {k: v for k, v in tensors.items() if k not in consumed}
    return model, extra, manifest
