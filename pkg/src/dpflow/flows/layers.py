"""Invertible layers: masked autoregressive nets, feature normalization,
order reversal.

All layers share one convention: ``forward`` maps data toward the base
distribution (the density-evaluation direction) and returns the batch image
together with log|det d(out)/d(in)| per example; ``inverse`` runs the
sampling direction. ``forward_cache``/``backward`` implement reverse-mode
accumulation of per-example parameter gradients.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError

ACTNORM_SCALE_FLOOR = 1e-6


def made_degrees(dim: int, hidden: int):
    """Sequential degree assignment: input i gets degree i+1, hidden units
    cycle over [1, dim-1] (degree 0 when dim == 1, i.e. no input feeds)."""
    deg_in = np.arange(1, dim + 1)
    deg_hidden = np.arange(hidden) % max(1, dim - 1) + min(1, dim - 1)
    return deg_in, deg_hidden


def made_masks(dim: int, hidden: int):
    """Binary masks enforcing strict autoregressivity.

    A unit of degree d reads units of degree <= d; outputs read strictly
    lower degrees, so output i depends only on inputs 0..i-1.
    """
    deg_in, deg_h = made_degrees(dim, hidden)
    m1 = (deg_in[None, :] <= deg_h[:, None]).astype(float)   # (H, D)
    m2 = (deg_h[None, :] <= deg_h[:, None]).astype(float)    # (H, H)
    m_out = (deg_h[None, :] < deg_in[:, None]).astype(float)  # (D, H)
    return m1, m2, m_out


class MadeLayer:
    """One masked autoregressive transform.

    Density direction: u_i = (x_i - mu_i(x_<i)) * exp(-alpha_i(x_<i)) with
    log|det| = -sum_i alpha_i. The shift and log-scale heads share a two-layer
    ReLU trunk; the log-scale output is squashed to [-s_max, s_max] via
    s_max * tanh(raw / s_max).
    """

    tensor_names = ("W1", "W2", "Wm", "Wa", "b1", "b2", "bm", "ba")

    def __init__(self, dim: int, hidden: int, s_max: float = 5.0, rng=None):
        if dim < 1 or hidden < 1:
            raise ConfigurationError("dim and hidden must be positive")
        if s_max <= 0:
            raise ConfigurationError("s_max must be positive")
        self.dim = dim
        self.hidden = hidden
        self.s_max = float(s_max)
        self.m1, self.m2, self.m_out = made_masks(dim, hidden)
        rng = np.random.default_rng(rng)
        # Fan-in scaled trunk; zeroed heads make the layer start as the
        # identity map, which keeps early noisy training stable.
        self.W1 = rng.standard_normal((hidden, dim)) / np.sqrt(dim + 1) * self.m1
        self.W2 = rng.standard_normal((hidden, hidden)) / np.sqrt(hidden + 1) * self.m2
        self.Wm = np.zeros((dim, hidden))
        self.Wa = np.zeros((dim, hidden))
        self.b1 = np.zeros(hidden)
        self.b2 = np.zeros(hidden)
        self.bm = np.zeros(dim)
        self.ba = np.zeros(dim)

    def param_tensors(self):
        return [self.W1, self.W2, self.Wm, self.Wa,
                self.b1, self.b2, self.bm, self.ba]

    def set_param_tensors(self, tensors):
        for name, value in zip(self.tensor_names, tensors):
            setattr(self, name, np.asarray(value, dtype=float))

    def _heads(self, x):
        """Shift and squashed log-scale for a batch, with trunk intermediates."""
        z1 = x @ (self.W1 * self.m1).T + self.b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ (self.W2 * self.m2).T + self.b2
        h2 = np.maximum(z2, 0.0)
        mu = h2 @ (self.Wm * self.m_out).T + self.bm
        raw = h2 @ (self.Wa * self.m_out).T + self.ba
        alpha = self.s_max * np.tanh(raw / self.s_max)
        return mu, alpha, (z1 > 0.0, h1, z2 > 0.0, h2)

    def forward(self, x):
        mu, alpha, _ = self._heads(x)
        u = (x - mu) * np.exp(-alpha)
        return u, -alpha.sum(axis=1)

    def forward_cache(self, x):
        mu, alpha, (r1, h1, r2, h2) = self._heads(x)
        eneg = np.exp(-alpha)
        u = (x - mu) * eneg
        cache = (x, r1, h1, r2, h2, alpha, eneg, u)
        return u, -alpha.sum(axis=1), cache

    def backward_pieces(self, cache, du, dld):
        """Reverse step keeping only the (m, width) factors of each
        parameter gradient; every per-example weight gradient is the masked
        outer product of one factor with one cached activation."""
        x, r1, h1, r2, h2, alpha, eneg, u = cache
        dalpha = -du * u - dld[:, None]
        dmu = -du * eneg
        draw = dalpha * (1.0 - (alpha / self.s_max) ** 2)
        dh2 = dmu @ (self.Wm * self.m_out) + draw @ (self.Wa * self.m_out)
        dz2 = dh2 * r2
        dh1 = dz2 @ (self.W2 * self.m2)
        dz1 = dh1 * r1
        dx = du * eneg + dz1 @ (self.W1 * self.m1)
        return dx, (x, h1, h2, dz1, dz2, dmu, draw)

    # (output factor, input activation, mask) for each weight tensor, in
    # canonical order; biases reuse the output factors.
    def _factor_triples(self, pieces):
        x, h1, h2, dz1, dz2, dmu, draw = pieces
        return [(dz1, x, self.m1), (dz2, h1, self.m2),
                (dmu, h2, self.m_out), (draw, h2, self.m_out)]

    def backward(self, cache, du, dld):
        """Per-example gradients given upstream du = dL/du and
        dld = dL/d(logdet). Returns (dx, grads in tensor order)."""
        dx, pieces = self.backward_pieces(cache, du, dld)
        return dx, self.pieces_per_example(pieces)

    def pieces_per_example(self, pieces):
        _, _, _, dz1, dz2, dmu, draw = pieces
        grads = [np.einsum("mo,mi->moi", out, act) * mask
                 for out, act, mask in self._factor_triples(pieces)]
        grads.extend([dz1, dz2, dmu, draw])
        return grads

    def pieces_sq_norms(self, pieces):
        """Per-example squared gradient norm over this layer's parameters.

        For a masked outer product, sum_{oi} (out_o act_i M_oi)^2 reduces to
        a single matrix product since M is binary.
        """
        _, _, _, dz1, dz2, dmu, draw = pieces
        total = np.zeros(dz1.shape[0])
        for out, act, mask in self._factor_triples(pieces):
            total += np.sum(out * out * ((act * act) @ mask.T), axis=1)
        for factor in (dz1, dz2, dmu, draw):  # bias gradients
            total += np.sum(factor * factor, axis=1)
        return total

    def pieces_weighted_sum(self, pieces, weights):
        """sum_m weights[m] * grad_m per tensor, without materializing the
        per-example gradients."""
        _, _, _, dz1, dz2, dmu, draw = pieces
        sums = [((out * weights[:, None]).T @ act) * mask
                for out, act, mask in self._factor_triples(pieces)]
        sums.extend(weights @ factor for factor in (dz1, dz2, dmu, draw))
        return sums

    def inverse(self, u):
        """Sequential inversion: coordinate i needs only coordinates < i,
        which are final after pass i."""
        x = np.array(u, dtype=float)
        for i in range(self.dim):
            mu, alpha, _ = self._heads(x)
            x[:, i] = u[:, i] * np.exp(alpha[:, i]) + mu[:, i]
        mu, alpha, _ = self._heads(x)
        return x, alpha.sum(axis=1)

    def descriptor(self):
        return {
            "type": "made", "dim": self.dim, "hidden": self.hidden,
            "s_max": self.s_max,
            "params": {name: getattr(self, name).tolist()
                       for name in self.tensor_names},
        }

    @classmethod
    def from_descriptor(cls, desc):
        layer = cls(desc["dim"], desc["hidden"], desc["s_max"], rng=0)
        layer.set_param_tensors([desc["params"][n] for n in cls.tensor_names])
        return layer


class ActNormLayer:
    """Per-feature affine map (x - b) / w with a strictly positive scale."""

    tensor_names = ("w", "b")

    def __init__(self, dim: int, w=None, b=None):
        self.dim = dim
        self.w = np.ones(dim) if w is None else np.asarray(w, dtype=float)
        self.b = np.zeros(dim) if b is None else np.asarray(b, dtype=float)
        self._check_scale()

    def _check_scale(self):
        if np.any(self.w < ACTNORM_SCALE_FLOOR):
            raise ConfigurationError(
                f"actnorm scale below floor {ACTNORM_SCALE_FLOOR}")

    def param_tensors(self):
        return [self.w, self.b]

    def set_param_tensors(self, tensors):
        self.w = np.asarray(tensors[0], dtype=float)
        self.b = np.asarray(tensors[1], dtype=float)

    def project(self):
        """Clamp the scale back to its floor after an unconstrained update."""
        np.maximum(self.w, ACTNORM_SCALE_FLOOR, out=self.w)

    def forward(self, x):
        self._check_scale()
        y = (x - self.b) / self.w
        ld = -np.sum(np.log(self.w))
        return y, np.full(x.shape[0], ld)

    def forward_cache(self, x):
        y, ld = self.forward(x)
        return y, ld, y

    def backward_pieces(self, cache, du, dld):
        y = cache
        dx = du / self.w
        dw = -(du * y + dld[:, None]) / self.w
        db = -du / self.w
        return dx, (dw, db)

    def backward(self, cache, du, dld):
        dx, pieces = self.backward_pieces(cache, du, dld)
        return dx, list(pieces)

    def pieces_per_example(self, pieces):
        return list(pieces)

    def pieces_sq_norms(self, pieces):
        dw, db = pieces
        return np.sum(dw * dw + db * db, axis=1)

    def pieces_weighted_sum(self, pieces, weights):
        dw, db = pieces
        return [weights @ dw, weights @ db]

    def inverse(self, u):
        self._check_scale()
        return u * self.w + self.b, np.full(u.shape[0], np.sum(np.log(self.w)))

    def descriptor(self):
        return {"type": "actnorm", "dim": self.dim,
                "params": {"w": self.w.tolist(), "b": self.b.tolist()}}

    @classmethod
    def from_descriptor(cls, desc):
        return cls(desc["dim"], desc["params"]["w"], desc["params"]["b"])


class ReversalLayer:
    """Fixed coordinate flip i -> D-1-i; volume preserving."""

    tensor_names = ()

    def __init__(self, dim: int):
        self.dim = dim

    def param_tensors(self):
        return []

    def set_param_tensors(self, tensors):
        pass

    def forward(self, x):
        return x[:, ::-1], np.zeros(x.shape[0])

    def forward_cache(self, x):
        return x[:, ::-1], np.zeros(x.shape[0]), None

    def backward_pieces(self, cache, du, dld):
        return du[:, ::-1], ()

    def backward(self, cache, du, dld):
        return du[:, ::-1], []

    def pieces_per_example(self, pieces):
        return []

    def pieces_sq_norms(self, pieces):
        return 0.0

    def pieces_weighted_sum(self, pieces, weights):
        return []

    def inverse(self, u):
        return u[:, ::-1], np.zeros(u.shape[0])

    def descriptor(self):
        return {"type": "reversal", "dim": self.dim}

    @classmethod
    def from_descriptor(cls, desc):
        return cls(desc["dim"])


LAYER_TYPES = {"made": MadeLayer, "actnorm": ActNormLayer,
               "reversal": ReversalLayer}
