"""Layers, models and the small model zoo.

Only linear and conv2d weight matrices are prunable; biases and batchnorm
affine parameters never are. When pruning is attached, every prunable layer
forwards through its soft-pruned surrogate instead of the raw weights.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import pruning
from .autograd import Tensor


def he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    kind = "?"
    name = ""

    def parameters(self):
        """(local name, tensor) pairs of learnable parameters."""
        return []

    def buffers(self):
        """(local name, array) pairs of non-learnable state."""
        return []

    def prunable_names(self):
        return []

    def forward(self, x, training):
        raise NotImplementedError


def _effective_weight(layer):
    p = layer.pruned
    if p is None or p.mode == "off":
        return layer.weight
    if p.mode == "soft":
        v = pruning.soft_prune(p.w, p.tau, p.temp, variant=p.grad_variant)
        p.last_v = v
        return v
    mask = p.mask if p.mask is not None else np.ones_like(p.w.data)
    return ag.mul(p.w, Tensor(mask.astype(p.w.data.dtype)))


class Linear(Layer):
    kind = "linear"

    def __init__(self, name, in_features, out_features, rng, dtype, bias=True):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(
            he_uniform(rng, (in_features, out_features), in_features, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None
        self.pruned = None

    def parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def prunable_names(self):
        return ["weight"]

    def forward(self, x, training):
        y = ag.matmul(x, _effective_weight(self))
        if self.bias is not None:
            y = ag.add(y, self.bias)
        return y


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, name, in_ch, out_ch, kernel, rng, dtype, stride=1, padding=0, bias=True):
        self.name = name
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(
            he_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None
        self.pruned = None

    def parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def prunable_names(self):
        return ["weight"]

    def forward(self, x, training):
        y = ag.conv2d(x, _effective_weight(self), stride=self.stride, padding=self.padding)
        if self.bias is not None:
            y = ag.add(y, ag.reshape(self.bias, (1, self.bias.size, 1, 1)))
        return y


class BatchNorm2d(Layer):
    kind = "batchnorm2d"

    def __init__(self, name, channels, dtype, momentum=0.1, eps=1e-5):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, training):
        return ag.batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training,
            momentum=self.momentum,
            eps=self.eps,
        )


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name):
        self.name = name

    def forward(self, x, training):
        return ag.relu(x)


class AvgPool2d(Layer):
    kind = "avgpool"

    def __init__(self, name, kernel):
        self.name = name
        self.kernel = kernel

    def forward(self, x, training):
        return ag.avgpool2d(x, self.kernel)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, name):
        self.name = name

    def forward(self, x, training):
        return ag.flatten(x)


class ResidualBlock(Layer):
    """Two 3x3 conv+bn stages with an identity skip and post-add relu."""

    kind = "residual-block"

    def __init__(self, name, channels, rng, dtype):
        self.name = name
        self.conv1 = Conv2d(f"{name}.conv1", channels, channels, 3, rng, dtype, padding=1, bias=False)
        self.bn1 = BatchNorm2d(f"{name}.bn1", channels, dtype)
        self.conv2 = Conv2d(f"{name}.conv2", channels, channels, 3, rng, dtype, padding=1, bias=False)
        self.bn2 = BatchNorm2d(f"{name}.bn2", channels, dtype)
        self.identity_skip = True

    def children(self):
        return [self.conv1, self.bn1, self.conv2, self.bn2]

    def forward(self, x, training):
        y = self.bn1.forward(self.conv1.forward(x, training), training)
        y = ag.relu(y)
        y = self.bn2.forward(self.conv2.forward(y, training), training)
        return ag.relu(ag.add(y, x))


class Model:
    """Ordered layer container with a stable prunable-parameter registry."""

    def __init__(self, name, layers, input_shape, classes, dtype=ag.DEFAULT_DTYPE):
        self.name = name
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.classes = classes
        self.dtype = np.dtype(dtype)
        self.registry = {}

    def iter_layers(self):
        """Depth-first (name, layer) pairs with residual blocks flattened."""
        for layer in self.layers:
            if isinstance(layer, ResidualBlock):
                yield layer.name, layer
                for child in layer.children():
                    yield child.name, child
            else:
                yield layer.name, layer

    def parameters(self):
        out = []
        for lname, layer in self.iter_layers():
            for pname, tensor in layer.parameters():
                out.append((f"{lname}.{pname}", tensor))
        return out

    def named_buffers(self):
        out = []
        for lname, layer in self.iter_layers():
            for bname, arr in layer.buffers():
                out.append((f"{lname}.{bname}", arr))
        return out

    def prunable_layers(self):
        """(name, layer) pairs whose weight may be pruned."""
        return [
            (lname, layer)
            for lname, layer in self.iter_layers()
            if layer.prunable_names()
        ]

    def zero_grad(self):
        for _, tensor in self.parameters():
            tensor.zero_grad()
        for p in self.registry.values():
            p.tau.zero_grad()

    def forward(self, x, training=False):
        x = ag.astensor(x)
        if len(self.input_shape) == 3 and x.ndim == 2:
            c, h, w = self.input_shape
            if x.shape[1] != c * h * w:
                raise ag.ShapeError(
                    f"model {self.name}: batch feature size {x.shape[1]} does not match input {self.input_shape}"
                )
            x = ag.reshape(x, (x.shape[0], c, h, w))
        elif len(self.input_shape) == 1 and x.ndim != 2:
            raise ag.ShapeError(f"model {self.name}: expected flat batches, got shape {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    # -- pruning wiring ----------------------------------------------------

    def attach_pruning(
        self,
        temp_scale,
        tau_init=0.0,
        exempt=(),
        grad_variant="approx",
        temps=None,
    ):
        """Wrap every non-exempt prunable weight with a threshold and width.

        Temperatures default to ``temp_scale * var(|w|)`` computed from the
        current weights and stay fixed afterwards; ``temps`` overrides them
        (used when restoring a checkpoint).
        """
        exempt = set(exempt)
        unknown = exempt - {lname for lname, _ in self.prunable_layers()}
        if unknown:
            raise ValueError(f"exempt layers not in model: {sorted(unknown)}")
        self.registry = {}
        for lname, layer in self.prunable_layers():
            if lname in exempt:
                layer.pruned = None
                continue
            temp = (
                temps[lname]
                if temps is not None
                else pruning.layer_temperature(layer.weight.data, temp_scale)
            )
            param = pruning.PrunableParam(
                name=lname,
                w=layer.weight,
                tau=Tensor(np.asarray(tau_init, dtype=np.float64), requires_grad=True),
                temp=temp,
                grad_variant=grad_variant,
            )
            layer.pruned = param
            self.registry[lname] = param
        return self.registry

    def set_prune_mode(self, mode):
        for p in self.registry.values():
            if mode not in pruning.PRUNE_MODES:
                raise ValueError(f"unknown prune mode {mode!r}")
            p.mode = mode

    def detach_pruning(self):
        for _, layer in self.prunable_layers():
            layer.pruned = None
        self.registry = {}


def forward(model, batch, training=False):
    """Module-level forward: logits for a batch tensor or array."""
    return model.forward(batch, training=training)


def l2_penalty(model):
    """Sum of squared prunable weights as a tape scalar."""
    return _penalty(model, ag.square)


def l1_penalty(model):
    """Sum of absolute prunable weights as a tape scalar."""
    return _penalty(model, ag.absval)


def _penalty(model, elementwise):
    registry = model.registry
    if registry:
        weights = [p.w for p in registry.values()]
    else:
        weights = [layer.weight for _, layer in model.prunable_layers()]
    total = None
    for w in weights:
        term = ag.sum(elementwise(w))
        total = term if total is None else ag.add(total, term)
    return total if total is not None else Tensor(0.0)


# ---------------------------------------------------------------------------
# model zoo

MODEL_NAMES = ("mlp3", "convbn6", "resnet-lite")


def build(name, input_shape, classes=10, seed=0, dtype=ag.DEFAULT_DTYPE):
    """Construct an initialized zoo model.

    ``input_shape`` is (features,) for mlp3 and (channels, H, W) for the
    conv models; conv models also accept flat batches whose feature count
    matches the image size.
    """
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    if name == "mlp3":
        return _build_mlp3(input_shape, classes, rng, dtype)
    if name == "convbn6":
        return _build_convbn6(input_shape, classes, rng, dtype)
    if name == "resnet-lite":
        return _build_resnet_lite(input_shape, classes, rng, dtype)
    raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")


def _build_mlp3(input_shape, classes, rng, dtype):
    in_features = int(np.prod(input_shape))
    layers = [
        Linear("fc1", in_features, 300, rng, dtype),
        ReLU("relu1"),
        Linear("fc2", 300, 100, rng, dtype),
        ReLU("relu2"),
        Linear("fc3", 100, classes, rng, dtype),
    ]
    return Model("mlp3", layers, (in_features,), classes, dtype)


def _build_convbn6(input_shape, classes, rng, dtype):
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise ValueError(f"convbn6 needs spatial dims divisible by 4, got {input_shape}")
    widths = [(c, 8), (8, 16), (16, 16), (16, 32), (32, 32), (32, 32)]
    layers = []
    for i, (ci, co) in enumerate(widths, start=1):
        layers.append(Conv2d(f"conv{i}", ci, co, 3, rng, dtype, padding=1, bias=False))
        layers.append(BatchNorm2d(f"bn{i}", co, dtype))
        layers.append(ReLU(f"relu{i}"))
        if i in (2, 4):
            layers.append(AvgPool2d(f"pool{i}", 2))
    layers.append(AvgPool2d("gap", h // 4))
    layers.append(Flatten("flat"))
    layers.append(Linear("fc", 32, classes, rng, dtype))
    return Model("convbn6", layers, (c, h, w), classes, dtype)


def _build_resnet_lite(input_shape, classes, rng, dtype):
    c, h, w = input_shape
    layers = [
        Conv2d("conv_in", c, 16, 3, rng, dtype, padding=1, bias=False),
        BatchNorm2d("bn_in", 16, dtype),
        ReLU("relu_in"),
        ResidualBlock("block1", 16, rng, dtype),
        ResidualBlock("block2", 16, rng, dtype),
        ResidualBlock("block3", 16, rng, dtype),
        AvgPool2d("gap", h),
        Flatten("flat"),
        Linear("fc", 16, classes, rng, dtype),
    ]
    return Model("resnet-lite", layers, (c, h, w), classes, dtype)
