"""Flow model: an ordered layer stack over a base density.

Exact log-density via the change of variables, seeded sampling through the
layer inverses, and per-example parameter gradients by reverse-mode
accumulation. All trainable scalars live in one canonical flat layout
(layer order, weights before biases within a layer, row-major), which is
what clipping, noising and serialization operate on.
"""

from __future__ import annotations

import json

import numpy as np

from ..errors import (NonFiniteInputError, NumericalOverflowError,
                      TrainingInstabilityError)
from .bases import SphericalGaussian, base_from_descriptor
from .layers import LAYER_TYPES, ActNormLayer, MadeLayer, ReversalLayer

FORMAT_VERSION = 1


class FlowModel:
    def __init__(self, layers, base):
        self.layers = list(layers)
        self.base = base
        self.dim = base.dim
        for layer in self.layers:
            if layer.dim != self.dim:
                raise NonFiniteInputError(
                    f"layer dimension {layer.dim} != model dimension {self.dim}")
        self._build_layout()

    def _build_layout(self):
        self._slices = []  # per layer: list of (start, end, shape)
        offset = 0
        for layer in self.layers:
            entries = []
            for tensor in layer.param_tensors():
                size = tensor.size
                entries.append((offset, offset + size, tensor.shape))
                offset += size
            self._slices.append(entries)
        self.n_params = offset

    # -- parameter layout ---------------------------------------------------

    def get_flat(self) -> np.ndarray:
        out = np.empty(self.n_params)
        for layer, entries in zip(self.layers, self._slices):
            for tensor, (start, end, _) in zip(layer.param_tensors(), entries):
                out[start:end] = tensor.ravel()
        return out

    def set_flat(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise NonFiniteInputError(
                f"expected {self.n_params} parameters, got {flat.shape}")
        for layer, entries in zip(self.layers, self._slices):
            tensors = [flat[start:end].reshape(shape).copy()
                       for start, end, shape in entries]
            layer.set_param_tensors(tensors)

    def project_params(self):
        """Re-apply per-layer constraints (actnorm scale floor) after an
        unconstrained parameter update."""
        for layer in self.layers:
            if isinstance(layer, ActNormLayer):
                layer.project()

    # -- density, sampling --------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        if pts.shape[1] != self.dim:
            raise NonFiniteInputError(
                f"input dimension {pts.shape[1]} != model dimension {self.dim}")
        if not np.all(np.isfinite(pts)):
            raise NonFiniteInputError("input contains non-finite values")
        return pts, single

    def log_prob(self, x):
        """Exact log-density; accepts one point (D,) or a batch (n, D)."""
        pts, single = self._check_input(x)
        z = pts
        total = np.zeros(pts.shape[0])
        for i, layer in enumerate(self.layers):
            z, ld = layer.forward(z)
            if not (np.all(np.isfinite(z)) and np.all(np.isfinite(ld))):
                raise NumericalOverflowError(
                    f"non-finite values after layer {i}", layer_index=i)
            total += ld
        out = self.base.log_prob(z) + total
        return float(out[0]) if single else out

    def transform_to_base(self, x) -> np.ndarray:
        """Image of x under the layer stack (the point whose base density
        enters log_prob). Useful for fitting a data-dependent base: at the
        identity initialization this is exactly the stack's net permutation."""
        pts, single = self._check_input(x)
        z = pts
        for layer in self.layers:
            z, _ = layer.forward(z)
        return z[0] if single else z

    def sample(self, n: int, seed) -> np.ndarray:
        if n < 1:
            raise NonFiniteInputError("n must be >= 1")
        rng = np.random.default_rng(seed)
        z = self.base.sample(n, rng)
        for layer in reversed(self.layers):
            z, _ = layer.inverse(z)
        return z

    def nll(self, batch) -> float:
        """Mean negative log-likelihood of a batch."""
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        if batch.shape[0] == 0:
            raise NonFiniteInputError("empty batch")
        return float(-np.mean(self.log_prob(batch)))

    # -- gradients ----------------------------------------------------------

    def nll_and_grads(self, x):
        """Per-example loss -log p(x) and its gradients in the flat layout.

        Returns (losses (m,), grads (m, P)).
        """
        losses, pieces = self._backward_pieces(x)
        m = losses.shape[0]
        grads = np.empty((m, self.n_params))
        for layer, p, entries in zip(self.layers, pieces, self._slices):
            for g, (start, end, _) in zip(layer.pieces_per_example(p),
                                          entries):
                grads[:, start:end] = g.reshape(m, -1)

        if not np.all(np.isfinite(grads)):
            bad = np.flatnonzero(~np.isfinite(grads).all(axis=0))[0]
            for idx, entries in enumerate(self._slices):
                if entries and entries[0][0] <= bad < entries[-1][1]:
                    raise TrainingInstabilityError(
                        f"non-finite gradient in layer {idx}", layer_index=idx)
            raise TrainingInstabilityError("non-finite gradient")
        return losses, grads

    def per_example_grad(self, x) -> np.ndarray:
        """Gradient of -log p at each input; (P,) for one point, else (m, P)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        _, grads = self.nll_and_grads(np.atleast_2d(x))
        return grads[0] if single else grads

    def _backward_pieces(self, x):
        """Shared forward/backward sweep for the gradient paths."""
        pts, _ = self._check_input(x)
        m = pts.shape[0]
        z = pts
        total = np.zeros(m)
        caches = []
        for layer in self.layers:
            z, ld, cache = layer.forward_cache(z)
            caches.append(cache)
            total += ld
        losses = -(self.base.log_prob(z) + total)
        du = -self.base.grad_log_prob(z)
        dld = -np.ones(m)
        pieces = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            du, pieces[i] = self.layers[i].backward_pieces(caches[i], du, dld)
        return losses, pieces

    def clipped_grad_sum(self, x, clip_norm: float):
        """Sum over the batch of per-example loss gradients clipped to l2
        norm ``clip_norm``, computed without materializing the (m, P)
        gradient matrix.

        Returns (losses (m,), summed gradient (P,), per-example norms (m,)).
        """
        losses, pieces = self._backward_pieces(x)
        m = losses.shape[0]
        sq = np.zeros(m)
        for layer, p in zip(self.layers, pieces):
            sq = sq + layer.pieces_sq_norms(p)
        norms = np.sqrt(sq)
        factors = 1.0 / np.maximum(1.0, norms / clip_norm)
        out = np.zeros(self.n_params)
        for layer, p, entries in zip(self.layers, pieces, self._slices):
            for tensor, (start, end, _) in zip(
                    layer.pieces_weighted_sum(p, factors), entries):
                out[start:end] = tensor.ravel()
        if not (np.all(np.isfinite(out)) and np.all(np.isfinite(norms))):
            raise TrainingInstabilityError("non-finite gradient in batch")
        return losses, out, norms

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "format_version": FORMAT_VERSION,
            "dim": self.dim,
            "layers": [layer.descriptor() for layer in self.layers],
            "base": self.base.descriptor(),
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "FlowModel":
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise NonFiniteInputError(
                f"unsupported model format {doc.get('format_version')}")
        layers = [LAYER_TYPES[d["type"]].from_descriptor(d)
                  for d in doc["layers"]]
        return cls(layers, base_from_descriptor(doc["base"]))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "FlowModel":
        with open(path) as fh:
            return cls.from_json(fh.read())


def nll_loss(model: FlowModel, batch) -> float:
    return model.nll(batch)


def build_maf(dim: int, n_blocks: int = 5, hidden: int = 64,
              actnorm: bool = False, s_max: float = 5.0,
              base=None, seed=0) -> FlowModel:
    """Stack of [masked-autoregressive, reversal, optional actnorm] blocks
    over a spherical Gaussian (or supplied) base."""
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(n_blocks):
        layers.append(MadeLayer(dim, hidden, s_max=s_max, rng=rng))
        layers.append(ReversalLayer(dim))
        if actnorm:
            layers.append(ActNormLayer(dim))
    return FlowModel(layers, base if base is not None else SphericalGaussian(dim))
