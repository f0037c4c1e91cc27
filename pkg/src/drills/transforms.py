"""Input-space transformations: the pseudo-reversible pair and a RevNet.

Both transforms map R^d to R^d and expose the same surface:

``forward(X)``
    z = g(x) for the pseudo-reversible pair, the block composition for RevNet.
``pseudo_inverse(Z)``
    h(z), or the exact algebraic inverse for RevNet.
``pseudo_inverse_jacobian(Z)``
    (N, d, d) array whose column i is the derivative of the reconstruction
    with respect to z_i.
``directional_derivatives(X, G)``
    s_i = <J_i(g(x)), grad f(x)> for every sample.

plus the engine hooks ``param_vars`` / ``trace`` used by the losses.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .tensor_core import DimensionError, Mlp, Var


class TransformKind(str, enum.Enum):
    PRNN = "prnn"
    REVNET = "revnet"


def _as_batch(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != d:
        raise DimensionError(f"expected vectors of length {d}, got {x.shape[-1]}")
    return (x[None], True) if x.ndim == 1 else (x, False)


def default_prnn_layers(d: int) -> list[int]:
    hidden = 2 if d == 2 else 4
    return [d] + [10 * d] * hidden + [d]


@dataclass
class Prnn:
    """Pair of same-shaped networks g (x -> z) and h (z -> x_hat)."""

    g: Mlp
    h: Mlp

    kind = TransformKind.PRNN

    def __post_init__(self):
        if self.g.layer_sizes != self.h.layer_sizes:
            raise DimensionError("g and h must share one architecture")
        if self.g.d_in != self.g.d_out:
            raise DimensionError("g and h must map R^d to R^d")

    @classmethod
    def create(cls, d: int, rng: np.random.Generator, layer_sizes=None) -> "Prnn":
        sizes = list(layer_sizes) if layer_sizes is not None else default_prnn_layers(d)
        if sizes[0] != d or sizes[-1] != d:
            raise DimensionError(f"layer sizes {sizes} do not map R^{d} to itself")
        return cls(Mlp.glorot(sizes, rng), Mlp.glorot(sizes, rng))

    @property
    def d(self) -> int:
        return self.g.d_in

    @property
    def layer_sizes(self) -> list[int]:
        return list(self.g.layer_sizes)

    def architecture(self) -> dict:
        return {"layer_sizes": self.layer_sizes}

    @property
    def n_params(self) -> int:
        return 2 * self.g.n_params

    def params(self) -> np.ndarray:
        return tc.flatten([self.g, self.h])

    def with_params(self, theta) -> "Prnn":
        g, h = tc.unflatten(theta, [self.g.layer_sizes, self.h.layer_sizes])
        return Prnn(g, h)

    def forward(self, x) -> np.ndarray:
        xb, single = _as_batch(x, self.d)
        z = tc.mlp_forward(self.g, xb)
        return z[0] if single else z

    def pseudo_inverse(self, z) -> np.ndarray:
        zb, single = _as_batch(z, self.d)
        xh = tc.mlp_forward(self.h, zb)
        return xh[0] if single else xh

    def pseudo_inverse_jacobian(self, z) -> np.ndarray:
        return tc.mlp_input_jacobian(self.h, z)

    def jacobian_at_inputs(self, x) -> np.ndarray:
        """Jacobian of h at z = g(x)."""
        return self.pseudo_inverse_jacobian(self.forward(x))

    def directional_derivatives(self, x, grads) -> np.ndarray:
        xb, single = _as_batch(x, self.d)
        gb = np.atleast_2d(np.asarray(grads, dtype=np.float64))
        s = tc.mlp_vjp(self.h, tc.mlp_forward(self.g, xb), gb)
        return s[0] if single else s

    # -- engine hooks -------------------------------------------------------

    def param_vars(self) -> list[Var]:
        gw, gb = tc.mlp_vars(self.g)
        hw, hb = tc.mlp_vars(self.h)
        return gw + gb + hw + hb

    def trace(self, pvars, X, G, jacobian_mode: str = "reverse") -> tuple[Var, Var]:
        """Reconstruction h(g(X)) and s = G^T J_h(g(X)) as engine graphs.

        ``jacobian_mode="forward"`` pushes d tangents through h and contracts
        with G; ``"reverse"`` evaluates the single pullback G^T J_h, which is
        cheaper by a factor of about d.  Both give the same values.
        """
        n = len(self.g.weights)
        gw, gb, hw, hb = pvars[:n], pvars[n:2 * n], pvars[2 * n:3 * n], pvars[3 * n:]
        z, _ = tc.mlp_forward_var(gw, gb, X)
        xhat, acts = tc.mlp_forward_var(hw, hb, z)
        if jacobian_mode == "reverse":
            s = tc.mlp_vjp_var(hw, acts, G)
        elif jacobian_mode == "forward":
            seeds = np.broadcast_to(np.eye(self.d), (X.shape[0], self.d, self.d))
            cols = tc.mlp_tangents_var(hw, acts, seeds)  # (N, i, :) = J_i
            s = tc.vsum(cols * np.asarray(G)[:, None, :], axis=-1)
        else:
            raise ValueError(f"unknown jacobian_mode {jacobian_mode!r}")
        return xhat, s


class RevNet:
    """Reversible residual network on a zero-padded even-dimensional state.

    The state is split into halves (u, v).  Block k updates

        u <- u + step * tanh(v K1^T + b1) K2
        v <- v + step * tanh(u L1^T + b2) L2

    (row-vector convention; K1, K2, L1, L2 have shape (width, d_pad / 2)),
    and the inverse undoes the blocks in reverse order.
    """

    kind = TransformKind.REVNET
    _names = ("K1", "b1", "K2", "L1", "b2", "L2")

    def __init__(self, d: int, num_blocks: int = 10, step_size: float = 0.25,
                 width: int | None = None, blocks: list[dict] | None = None):
        self.d = int(d)
        self.d_padded = self.d + (self.d % 2)
        self.half = self.d_padded // 2
        self.num_blocks = int(num_blocks)
        self.step_size = float(step_size)
        self.width = int(width) if width is not None else self.d_padded
        if blocks is None:
            blocks = [self._zero_block() for _ in range(self.num_blocks)]
        if len(blocks) != self.num_blocks:
            raise DimensionError(f"{len(blocks)} blocks given, {self.num_blocks} declared")
        self.blocks = blocks
        for blk in blocks:
            for name, ref in self._zero_block().items():
                if blk[name].shape != ref.shape:
                    raise DimensionError(f"block parameter {name} has shape {blk[name].shape}, expected {ref.shape}")

    def _zero_block(self) -> dict:
        w, h = self.width, self.half
        return {"K1": np.zeros((w, h)), "b1": np.zeros(w), "K2": np.zeros((w, h)),
                "L1": np.zeros((w, h)), "b2": np.zeros(w), "L2": np.zeros((w, h))}

    @classmethod
    def create(cls, d: int, rng: np.random.Generator, num_blocks: int = 10,
               step_size: float = 0.25, width: int | None = None) -> "RevNet":
        net = cls(d, num_blocks, step_size, width)
        lim = np.sqrt(6.0 / (net.width + net.half))
        for blk in net.blocks:
            for name in ("K1", "K2", "L1", "L2"):
                blk[name] = rng.uniform(-lim, lim, size=blk[name].shape)
        return net

    def architecture(self) -> dict:
        return {"d": self.d, "num_blocks": self.num_blocks, "step_size": self.step_size, "width": self.width}

    @property
    def n_params(self) -> int:
        return self.num_blocks * (4 * self.width * self.half + 2 * self.width)

    def params(self) -> np.ndarray:
        return np.concatenate([self.blocks[k][n].ravel() for k in range(self.num_blocks) for n in self._names])

    def with_params(self, theta) -> "RevNet":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_params:
            raise DimensionError(f"parameter vector has {theta.size} entries, architecture needs {self.n_params}")
        blocks, pos = [], 0
        for _ in range(self.num_blocks):
            blk = {}
            for name, ref in self._zero_block().items():
                blk[name] = theta[pos:pos + ref.size].reshape(ref.shape).copy()
                pos += ref.size
            blocks.append(blk)
        return RevNet(self.d, self.num_blocks, self.step_size, self.width, blocks)

    def _pad(self, xb: np.ndarray) -> np.ndarray:
        if xb.shape[-1] == self.d_padded:
            return xb
        if xb.shape[-1] != self.d:
            raise DimensionError(f"expected vectors of length {self.d} or {self.d_padded}, got {xb.shape[-1]}")
        return np.concatenate([xb, np.zeros(xb.shape[:-1] + (self.d_padded - self.d,))], axis=-1)

    def forward(self, x, full: bool = False) -> np.ndarray:
        """Block composition of the padded input.

        With ``full=True`` the padded state is returned, which
        :meth:`pseudo_inverse` maps back exactly even for odd d.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = self._pad(x[None] if single else x)
        u, v = xb[:, :self.half], xb[:, self.half:]
        hs = self.step_size
        for blk in self.blocks:
            u = u + hs * np.tanh(v @ blk["K1"].T + blk["b1"]) @ blk["K2"]
            v = v + hs * np.tanh(u @ blk["L1"].T + blk["b2"]) @ blk["L2"]
        z = np.concatenate([u, v], axis=1)
        tc.check_finite(z, "RevNet output")
        if not full:
            z = z[:, :self.d]
        return z[0] if single else z

    def pseudo_inverse(self, z) -> np.ndarray:
        """Exact inverse; a length-d input is padded with zero first."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zb = self._pad(z[None] if single else z)
        u, v = zb[:, :self.half], zb[:, self.half:]
        hs = self.step_size
        for blk in reversed(self.blocks):
            v = v - hs * np.tanh(u @ blk["L1"].T + blk["b2"]) @ blk["L2"]
            u = u - hs * np.tanh(v @ blk["K1"].T + blk["b1"]) @ blk["K2"]
        x = np.concatenate([u, v], axis=1)[:, :self.d]
        return x[0] if single else x

    def pseudo_inverse_jacobian(self, z) -> np.ndarray:
        """Jacobian of the inverse map, padded row and column dropped."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zb = self._pad(z[None] if single else z)
        cols = self._inverse_tangents_var([Var(p) for p in self._leaf_arrays()], Var(zb)).value
        jac = np.swapaxes(cols, -1, -2)[:, :self.d, :self.d]
        return jac[0] if single else jac

    def jacobian_at_inputs(self, x) -> np.ndarray:
        """Jacobian of the inverse at the padded state z = forward(x)."""
        return self.pseudo_inverse_jacobian(self.forward(x, full=True))

    def directional_derivatives(self, x, grads) -> np.ndarray:
        xb, single = _as_batch(x, self.d)
        jac = self.jacobian_at_inputs(xb)
        s = np.einsum("nji,nj->ni", jac, np.atleast_2d(grads))
        return s[0] if single else s

    # -- engine hooks -------------------------------------------------------

    def _leaf_arrays(self) -> list[np.ndarray]:
        return [blk[n] for blk in self.blocks for n in self._names]

    def param_vars(self) -> list[Var]:
        return [Var(a) for a in self._leaf_arrays()]

    def _blocks_of(self, pvars):
        k = len(self._names)
        return [dict(zip(self._names, pvars[i * k:(i + 1) * k])) for i in range(self.num_blocks)]

    def _forward_var(self, pvars, xpad) -> Var:
        u, v = tc.as_var(xpad[:, :self.half]), tc.as_var(xpad[:, self.half:])
        hs = self.step_size
        for blk in self._blocks_of(pvars):
            u = u + tc.scale(tc.tanh(v @ blk["K1"].T + blk["b1"]) @ blk["K2"], hs)
            v = v + tc.scale(tc.tanh(u @ blk["L1"].T + blk["b2"]) @ blk["L2"], hs)
        return tc.concat([u, v], axis=1)

    def _inverse_tangents_var(self, pvars, z: Var) -> Var:
        """Tangents of the inverse map at z, seeded with the identity.

        Returns (N, D, D) with entry [n, i, :] the i-th Jacobian column.
        """
        n, D, h = z.shape[0], self.d_padded, self.half
        u, v = z[:, :h], z[:, h:]
        seeds = np.broadcast_to(np.eye(D), (n, D, D))
        tu, tv = Var(seeds[:, :, :h]), Var(seeds[:, :, h:])
        hs = self.step_size
        for blk in reversed(self._blocks_of(pvars)):
            a = tc.tanh(u @ blk["L1"].T + blk["b2"])
            v = v - tc.scale(a @ blk["L2"], hs)
            tv = tv - tc.scale(((tu @ blk["L1"].T) * tc.expand_dims(1.0 - tc.square(a), 1)) @ blk["L2"], hs)
            b = tc.tanh(v @ blk["K1"].T + blk["b1"])
            u = u - tc.scale(b @ blk["K2"], hs)
            tu = tu - tc.scale(((tv @ blk["K1"].T) * tc.expand_dims(1.0 - tc.square(b), 1)) @ blk["K2"], hs)
        return tc.concat([tu, tv], axis=-1)

    def trace(self, pvars, X, G, jacobian_mode: str = "forward") -> tuple[None, Var]:
        """No reconstruction term (exactly invertible) and s = G^T J_inv(z)."""
        xpad = self._pad(np.asarray(X, dtype=np.float64))
        z = self._forward_var(pvars, xpad)
        cols = self._inverse_tangents_var(pvars, z)
        gpad = self._pad(np.asarray(G, dtype=np.float64))
        s = tc.vsum(cols * gpad[:, None, :], axis=-1)
        return None, s[:, :self.d]


Transform = Prnn | RevNet
