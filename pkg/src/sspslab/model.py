"""Small MLP encoder/projector with exact analytic gradients.

The joint-embedding model is encoder -> (optional) projector -> (optional)
head; every stage is a plain MLP. Hidden layers use ReLU, optionally
preceded by per-batch feature standardization (BatchNorm stand-in with
eps=1e-5 and no learned affine, so there is no train/eval mode state).
Setting ``normalize_output`` l2-normalizes output rows, with the exact
normalization Jacobian applied on the way back.

Parameters are float64 throughout; forwards are pure and caches make
backward reentrant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STANDARDIZE_EPS = 1e-5


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]
    activation: str = "relu"
    standardize_hidden: bool = False
    normalize_output: bool = False

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ValueError("an MLP needs at least an input and an output dim")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError("layer dims must be positive")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def dim_in(self) -> int:
        return self.layer_dims[0]

    @property
    def dim_out(self) -> int:
        return self.layer_dims[-1]


@dataclass
class Mlp:
    """Weights + biases for one MLP; W[l] has shape (in, out)."""

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator) -> "Mlp":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, seeded."""
        weights, biases = [], []
        for din, dout in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
            limit = 1.0 / np.sqrt(din)
            weights.append(rng.uniform(-limit, limit, size=(din, dout)))
            biases.append(rng.uniform(-limit, limit, size=dout))
        return cls(spec=spec, weights=weights, biases=biases)

    def copy(self) -> "Mlp":
        return Mlp(
            spec=self.spec,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        """Run a (B, dim_in) batch; returns output and a backward cache."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.spec.dim_in:
            raise ValueError(
                f"input dim {x.shape[1]} does not match spec dim {self.spec.dim_in}"
            )
        cache: dict = {"inputs": [], "relu_masks": [], "std": []}
        a = x
        last = self.spec.n_layers - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            cache["inputs"].append(a)
            h = a @ w + b
            if l == last:
                a = h
                break
            if self.spec.standardize_hidden:
                mu = h.mean(axis=0)
                var = h.var(axis=0)
                inv_std = 1.0 / np.sqrt(var + STANDARDIZE_EPS)
                h = (h - mu) * inv_std
                cache["std"].append((inv_std, h))
            else:
                cache["std"].append(None)
            mask = h > 0.0
            cache["relu_masks"].append(mask)
            a = h * mask
        if self.spec.normalize_output:
            norms = np.linalg.norm(a, axis=1, keepdims=True)
            if np.any(norms == 0.0):
                raise FloatingPointError("cannot l2-normalize a zero output row")
            out = a / norms
            cache["norm"] = (out, norms)
            a = out
        cache["squeeze"] = squeeze
        return (a[0] if squeeze else a), cache

    def backward(self, cache: dict, grad_out: np.ndarray):
        """Backprop; returns ([(dW, db) per layer], grad wrt the input batch)."""
        g = np.asarray(grad_out, dtype=np.float64)
        if cache["squeeze"] and g.ndim == 1:
            g = g[None, :]
        if self.spec.normalize_output:
            out, norms = cache["norm"]
            g = (g - (g * out).sum(axis=1, keepdims=True) * out) / norms
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * self.spec.n_layers
        last = self.spec.n_layers - 1
        for l in range(last, -1, -1):
            if l < last:
                g = g * cache["relu_masks"][l]
                std = cache["std"][l]
                if std is not None:
                    inv_std, h_std = std
                    g = inv_std * (
                        g - g.mean(axis=0) - h_std * (g * h_std).mean(axis=0)
                    )
            a = cache["inputs"][l]
            grads[l] = (a.T @ g, g.sum(axis=0))
            g = g @ self.weights[l].T
        if cache["squeeze"]:
            g = g[0]
        return grads, g


@dataclass
class ModelParams:
    """Student (or teacher) weights: encoder theta and projector/head phi."""

    encoder: Mlp
    projector: Mlp | None = None
    head: Mlp | None = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            encoder=self.encoder.copy(),
            projector=self.projector.copy() if self.projector else None,
            head=self.head.copy() if self.head else None,
        )

    def modules(self) -> list[tuple[str, Mlp]]:
        out = [("encoder", self.encoder)]
        if self.projector is not None:
            out.append(("projector", self.projector))
        if self.head is not None:
            out.append(("head", self.head))
        return out

    def arrays(self):
        """Flat (name, array) view over every parameter tensor."""
        for mod_name, mlp in self.modules():
            for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                yield f"{mod_name}.{l}.W", w
                yield f"{mod_name}.{l}.b", b


def init_model(
    encoder_spec: MlpSpec,
    projector_spec: MlpSpec | None,
    rng: np.random.Generator,
    head_spec: MlpSpec | None = None,
) -> ModelParams:
    encoder = Mlp.init(encoder_spec, rng)
    projector = Mlp.init(projector_spec, rng) if projector_spec else None
    head = Mlp.init(head_spec, rng) if head_spec else None
    if projector and projector.spec.dim_in != encoder.spec.dim_out:
        raise ValueError("projector input dim must match encoder output dim")
    if head:
        feed = projector or encoder
        if head.spec.dim_in != feed.spec.dim_out:
            raise ValueError("head input dim must match the stage before it")
    return ModelParams(encoder=encoder, projector=projector, head=head)


def forward(params: ModelParams, x: np.ndarray):
    """Full pass: representations y, embeddings z, and the backward cache.

    Without a projector the embeddings alias the representations (z is y).
    """
    y, enc_cache = params.encoder.forward(x)
    caches = {"encoder": enc_cache, "projector": None, "head": None}
    z = y
    if params.projector is not None:
        z, caches["projector"] = params.projector.forward(z)
    if params.head is not None:
        z, caches["head"] = params.head.forward(z)
    return y, z, caches


def backward(params: ModelParams, caches: dict, grad_z: np.ndarray, grad_y: np.ndarray | None = None):
    """Parameter gradients for output cotangents (grad_z on z, grad_y on y).

    Returns {"encoder": [(dW, db)...], "projector": ..., "head": ...} with
    None for absent modules.
    """
    grads = {"encoder": None, "projector": None, "head": None}
    g = np.asarray(grad_z, dtype=np.float64)
    if params.head is not None:
        grads["head"], g = params.head.backward(caches["head"], g)
    if params.projector is not None:
        grads["projector"], g = params.projector.backward(caches["projector"], g)
    if grad_y is not None:
        g = g + np.asarray(grad_y, dtype=np.float64)
    grads["encoder"], g_in = params.encoder.backward(caches["encoder"], g)
    return grads, g_in


def zero_grads_like(params: ModelParams) -> dict:
    out = {"encoder": None, "projector": None, "head": None}
    for name, mlp in params.modules():
        out[name] = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(mlp.weights, mlp.biases)]
    return out


def add_grads(total: dict, extra: dict) -> dict:
    for key in ("encoder", "projector", "head"):
        if extra.get(key) is None:
            continue
        if total.get(key) is None:
            total[key] = [(dw.copy(), db.copy()) for dw, db in extra[key]]
        else:
            total[key] = [
                (tw + dw, tb + db)
                for (tw, tb), (dw, db) in zip(total[key], extra[key])
            ]
    return total


def ema_update(teacher: ModelParams, student: ModelParams, m: float) -> ModelParams:
    """theta' <- m * theta' + (1 - m) * theta, in place on the teacher."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    for (t_name, t_mlp), (s_name, s_mlp) in zip(teacher.modules(), student.modules()):
        if t_name != s_name:
            raise ValueError("teacher/student module structure mismatch")
        for tw, sw in zip(t_mlp.weights, s_mlp.weights):
            tw *= m
            tw += (1.0 - m) * sw
        for tb, sb in zip(t_mlp.biases, s_mlp.biases):
            tb *= m
            tb += (1.0 - m) * sb
    return teacher


def average_checkpoints(checkpoints: list[ModelParams]) -> ModelParams:
    """Elementwise arithmetic mean of a non-empty, shape-consistent list."""
    if not checkpoints:
        raise ValueError("cannot average an empty checkpoint list")
    avg = checkpoints[0].copy()
    names = [name for name, _ in avg.arrays()]
    for other in checkpoints[1:]:
        other_names = [name for name, _ in other.arrays()]
        if other_names != names:
            raise ValueError("checkpoint structure mismatch")
        for (_, acc), (_, arr) in zip(avg.arrays(), other.arrays()):
            acc += arr
    scale = 1.0 / len(checkpoints)
    for _, acc in avg.arrays():
        acc *= scale
    return avg


# ---------------------------------------------------------------------------
# Checkpoint file format (version 1)
#
#   line 1: b"sspslab-ckpt v1\n"
#   line 2: one JSON object: {"specs": {...}, "arrays": [[name, [shape...]], ...]}
#   then the raw little-endian float64 bytes of each array, in listed order.
#
# Raw bytes round-trip bit-exactly and carry no timestamps.
# ---------------------------------------------------------------------------

_MAGIC = b"sspslab-ckpt v1\n"


def _spec_to_dict(spec: MlpSpec | None):
    if spec is None:
        return None
    return {
        "layer_dims": list(spec.layer_dims),
        "activation": spec.activation,
        "standardize_hidden": spec.standardize_hidden,
        "normalize_output": spec.normalize_output,
    }


def _spec_from_dict(d) -> MlpSpec | None:
    if d is None:
        return None
    return MlpSpec(
        layer_dims=tuple(d["layer_dims"]),
        activation=d["activation"],
        standardize_hidden=d["standardize_hidden"],
        normalize_output=d["normalize_output"],
    )


def save_checkpoint(params: ModelParams, path) -> None:
    import json

    arrays = list(params.arrays())
    header = {
        "specs": {
            "encoder": _spec_to_dict(params.encoder.spec),
            "projector": _spec_to_dict(params.projector.spec) if params.projector else None,
            "head": _spec_to_dict(params.head.spec) if params.head else None,
        },
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    import json

    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic {magic!r})")
        header = json.loads(fh.readline().decode("ascii"))
        data = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError("truncated checkpoint file")
            data[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)

    def build(mod_name: str, spec_dict) -> Mlp | None:
        spec = _spec_from_dict(spec_dict)
        if spec is None:
            return None
        weights, biases = [], []
        for l in range(spec.n_layers):
            weights.append(data[f"{mod_name}.{l}.W"].copy())
            biases.append(data[f"{mod_name}.{l}.b"].copy())
        return Mlp(spec=spec, weights=weights, biases=biases)

    specs = header["specs"]
    return ModelParams(
        encoder=build("encoder", specs["encoder"]),
        projector=build("projector", specs["projector"]),
        head=build("head", specs["head"]),
    )
