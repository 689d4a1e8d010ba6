"""Small classifier architectures with per-layer feature taps.

Two preset families: a shallow MLP (17 hidden units, the substitute variant
uses 32) and a 1-D CNN with three tappable depths (layer1 after the conv
block, layer2 after the first hidden dense, layer3 at the penultimate
features). Parameters are Glorot-uniform, deterministic per seed.

Checkpoints are a one-line JSON header followed by a little-endian float32
blob whose byte length the header declares.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = 1


class NetError(Exception):
    pass


class CheckpointError(NetError):
    """Bad checkpoint file: version mismatch or corrupt blob."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind in {dense, conv1d, relu, flatten, maxpool1d}.

    dims by kind: dense (in, out); conv1d (in_channels, out_channels,
    kernel); maxpool1d (width,); relu/flatten ().
    A tap_id labels the activation *after* this layer for feature taps.
    """

    kind: str
    dims: tuple[int, ...] = ()
    tap_id: str | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims), "tap_id": self.tap_id}

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        return LayerSpec(d["kind"], tuple(d["dims"]), d.get("tap_id"))


_KINDS = ("dense", "conv1d", "relu", "flatten", "maxpool1d")


def _propagate_shape(shape: tuple[int, ...], layer: LayerSpec) -> tuple[int, ...]:
    """Shape of one sample (no batch axis) after `layer`."""
    if layer.kind == "dense":
        din, dout = layer.dims
        if shape != (din,):
            raise NetError(f"dense({din},{dout}) cannot follow shape {shape}")
        return (dout,)
    if layer.kind == "conv1d":
        cin, cout, k = layer.dims
        if len(shape) != 2 or shape[0] != cin or shape[1] < k:
            raise NetError(f"conv1d{layer.dims} cannot follow shape {shape}")
        return (cout, shape[1] - k + 1)
    if layer.kind == "relu":
        return shape
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    if layer.kind == "maxpool1d":
        (width,) = layer.dims
        if len(shape) != 2 or shape[1] % width != 0:
            raise NetError(f"maxpool1d({width}) cannot follow shape {shape}")
        return (shape[0], shape[1] // width)
    raise NetError(f"unknown layer kind {layer.kind!r} (expected one of {_KINDS})")


@dataclass
class Network:
    """Ordered layers plus their parameter tensors.

    Immutable during inference; training mutates `params` in place and
    needs exclusive access.
    """

    layers: list[LayerSpec]
    params: dict[int, tuple[ad.Tensor, ad.Tensor]]  # layer index -> (weight, bias)
    input_shape: tuple[int, ...]
    class_count: int
    seed: int
    metadata: dict = field(default_factory=dict)

    def parameters(self) -> list[ad.Tensor]:
        out = []
        for w, b in self.params.values():
            out.extend((w, b))
        return out

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def tap_ids(self) -> list[str]:
        return [ly.tap_id for ly in self.layers if ly.tap_id is not None]

    def penultimate_tap(self) -> str:
        """Tap feeding the final dense layer directly."""
        if self.layers[-1].kind != "dense":
            raise NetError("network does not end in a dense layer")
        tap = self.layers[-2].tap_id
        if tap is None:
            raise NetError("no tap_id on the penultimate activation")
        return tap

    def layers_after_tap(self, tap_id: str) -> list[LayerSpec]:
        for i, ly in enumerate(self.layers):
            if ly.tap_id == tap_id:
                return self.layers[i + 1 :]
        raise NetError(f"unknown tap {tap_id!r}")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def build(arch: list[LayerSpec], seed: int, input_shape: tuple[int, ...], class_count: int) -> Network:
    """Construct a network with Glorot-uniform parameters, deterministic per seed."""
    if class_count < 2:
        raise NetError(f"class_count must be >= 2, got {class_count}")
    taps = [ly.tap_id for ly in arch if ly.tap_id is not None]
    if len(taps) != len(set(taps)):
        raise NetError(f"duplicate tap_id in architecture: {taps}")

    shape = tuple(int(s) for s in input_shape)
    rng = np.random.default_rng(seed)
    params: dict[int, tuple[ad.Tensor, ad.Tensor]] = {}
    for i, layer in enumerate(arch):
        shape = _propagate_shape(shape, layer)
        if layer.kind == "dense":
            din, dout = layer.dims
            bound = np.sqrt(6.0 / (din + dout))
            w = rng.uniform(-bound, bound, size=(din, dout)).astype(np.float32)
            b = np.zeros(dout, dtype=np.float32)
            params[i] = (ad.Tensor(w, requires_grad=True), ad.Tensor(b, requires_grad=True))
        elif layer.kind == "conv1d":
            cin, cout, k = layer.dims
            fan_in, fan_out = cin * k, cout * k
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(cout, cin, k)).astype(np.float32)
            b = np.zeros(cout, dtype=np.float32)
            params[i] = (ad.Tensor(w, requires_grad=True), ad.Tensor(b, requires_grad=True))
    if shape != (class_count,):
        raise NetError(f"architecture output shape {shape} != ({class_count},)")
    return Network(list(arch), params, tuple(int(s) for s in input_shape), class_count, seed)


# ---------------------------------------------------------------------------
# presets


def mlp_arch(input_dim: int, hidden: int, class_count: int) -> list[LayerSpec]:
    """ANN preset: one hidden layer (17 nodes by default use); tap 'penultimate'."""
    return [
        LayerSpec("dense", (input_dim, hidden)),
        LayerSpec("relu", (), tap_id="penultimate"),
        LayerSpec("dense", (hidden, class_count)),
    ]


def cnn_arch(channels: int, length: int, class_count: int, conv_out: int = 8, kernel: int = 9,
             pool: int = 4, hidden1: int = 32, hidden2: int = 16) -> list[LayerSpec]:
    """1-D CNN preset with taps layer1/layer2/layer3 (layer3 is penultimate)."""
    conv_len = (length - kernel + 1) // pool
    if (length - kernel + 1) % pool != 0:
        raise NetError(f"cnn preset: (length - kernel + 1) = {length - kernel + 1} not divisible by pool {pool}")
    return [
        LayerSpec("conv1d", (channels, conv_out, kernel)),
        LayerSpec("relu", ()),
        LayerSpec("maxpool1d", (pool,), tap_id="layer1"),
        LayerSpec("flatten", ()),
        LayerSpec("dense", (conv_out * conv_len, hidden1)),
        LayerSpec("relu", (), tap_id="layer2"),
        LayerSpec("dense", (hidden1, hidden2)),
        LayerSpec("relu", (), tap_id="layer3"),
        LayerSpec("dense", (hidden2, class_count)),
    ]


def build_mlp(input_shape: tuple[int, ...], class_count: int, hidden: int = 17, seed: int = 0) -> Network:
    input_dim = int(np.prod(input_shape))
    arch = [LayerSpec("flatten", ())] + mlp_arch(input_dim, hidden, class_count)
    return build(arch, seed, input_shape, class_count)


def build_cnn(input_shape: tuple[int, int], class_count: int, seed: int = 0, **kwargs) -> Network:
    channels, length = input_shape
    return build(cnn_arch(channels, length, class_count, **kwargs), seed, input_shape, class_count)


# ---------------------------------------------------------------------------
# forward passes


def _apply(layer: LayerSpec, w_b, x: ad.Tensor) -> ad.Tensor:
    if layer.kind == "dense":
        w, b = w_b
        return ad.add(ad.matmul(x, w), b)
    if layer.kind == "conv1d":
        w, b = w_b
        return ad.add(ad.conv1d(x, w), ad.reshape(b, (1, b.size, 1)))
    if layer.kind == "relu":
        return ad.relu(x)
    if layer.kind == "flatten":
        return ad.reshape(x, (x.shape[0], -1))
    if layer.kind == "maxpool1d":
        return ad.maxpool1d(x, layer.dims[0])
    raise NetError(f"unknown layer kind {layer.kind!r}")


def forward_collect(net: Network, x: ad.Tensor, tap_ids: tuple[str, ...] = ()) -> tuple[ad.Tensor, dict]:
    """One forward pass; returns (logits, raw activation per requested tap)."""
    unknown = set(tap_ids) - set(net.tap_ids())
    if unknown:
        raise NetError(f"unknown tap(s) {sorted(unknown)}; network has {net.tap_ids()}")
    if x.data.ndim != len(net.input_shape) + 1 or x.shape[1:] != net.input_shape:
        raise NetError(f"input shape {x.shape} does not match (batch,)+{net.input_shape}")
    feats: dict[str, ad.Tensor] = {}
    h = x
    for i, layer in enumerate(net.layers):
        h = _apply(layer, net.params.get(i), h)
        if layer.tap_id is not None and layer.tap_id in tap_ids:
            feats[layer.tap_id] = h
    return h, feats


def forward_logits(net: Network, x: ad.Tensor) -> ad.Tensor:
    logits, _ = forward_collect(net, x)
    return logits


def features_at(net: Network, x: ad.Tensor, tap_id: str) -> ad.Tensor:
    """Flattened, row-wise L2-normalized features at `tap_id`.

    Rows come back unit-norm (cosine similarity reduces to a dot product);
    an exactly zero activation row stays zero.
    """
    _, feats = forward_collect(net, x, (tap_id,))
    return normalize_rows(feats[tap_id])


def normalize_rows(h: ad.Tensor) -> ad.Tensor:
    flat = ad.reshape(h, (h.shape[0], -1))
    norm = ad.clamp(ad.l2norm(flat, axis=1, keepdims=True), 1e-12, None)
    return ad.div(flat, norm)


# ---------------------------------------------------------------------------
# checkpoints


def save(net: Network, path) -> None:
    blob = b"".join(p.data.astype("<f4").tobytes() for p in net.parameters())
    header = {
        "version": CHECKPOINT_VERSION,
        "architecture": [ly.to_dict() for ly in net.layers],
        "input_shape": list(net.input_shape),
        "class_count": net.class_count,
        "seed": net.seed,
        "metadata": net.metadata,
        "blob_bytes": len(blob),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def load(path) -> Network:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {CHECKPOINT_VERSION}")
    if len(blob) != header["blob_bytes"]:
        raise CheckpointError(f"corrupt blob: {len(blob)} bytes, header declares {header['blob_bytes']}")

    arch = [LayerSpec.from_dict(d) for d in header["architecture"]]
    net = build(arch, header["seed"], tuple(header["input_shape"]), header["class_count"])
    net.metadata = header.get("metadata", {})
    flat = np.frombuffer(blob, dtype="<f4")
    if flat.size != sum(p.size for p in net.parameters()):
        raise CheckpointError("corrupt blob: parameter count mismatch")
    offset = 0
    for p in net.parameters():
        p.data = flat[offset : offset + p.size].reshape(p.data.shape).astype(np.float32)
        offset += p.size
    return net
