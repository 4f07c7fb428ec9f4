"""Small recurrent actor-critic network in numpy with hand-written backprop.

Architecture: 3x3 valid convolution + ReLU over the RGB window, a dense
ReLU layer fed by the conv features and a one-hot heading, a GRU cell, and
two linear read-outs (action logits, state value). All parameters live in
one flat float64 vector; named views index into it.

GRU update (gate order z, r, n in the stacked weight matrices)::

    z  = sigmoid(x Wx_z + h Wh_z + b_z)
    r  = sigmoid(x Wx_r + h Wh_r + b_r)
    n  = tanh(x Wx_n + (r * h) Wh_n + b_n)
    h' = (1 - z) * n + z * h
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class ArchSpec:
    n_actions: int
    window: int = 15
    in_channels: int = 3
    conv_channels: int = 6
    kernel: int = 3
    hidden: int = 64
    recurrent: int = 64
    n_headings: int = 4

    def __post_init__(self):
        if self.kernel > self.window:
            raise ValueError("kernel larger than observation window")
        for name in ("n_actions", "window", "in_channels", "conv_channels", "kernel", "hidden", "recurrent"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def conv_side(self) -> int:
        return self.window - self.kernel + 1

    @property
    def conv_features(self) -> int:
        return self.conv_side**2 * self.conv_channels

    @property
    def input_size(self) -> int:
        return self.window * self.window * self.in_channels

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        k2c = self.kernel * self.kernel * self.in_channels
        R = self.recurrent
        return [
            ("conv_w", (k2c, self.conv_channels)),
            ("conv_b", (self.conv_channels,)),
            ("fc_w", (self.conv_features + self.n_headings, self.hidden)),
            ("fc_b", (self.hidden,)),
            ("gru_wx", (self.hidden, 3 * R)),
            ("gru_wh", (R, 3 * R)),
            ("gru_b", (3 * R,)),
            ("pi_w", (R, self.n_actions)),
            ("pi_b", (self.n_actions,)),
            ("v_w", (R,)),
            ("v_b", (1,)),
        ]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def to_dict(self) -> dict:
        return asdict(self)


def _im2col_index(spec: ArchSpec) -> np.ndarray:
    """Index array (P, k*k*C) gathering conv patches from a flat (W, W, C) input."""
    W, k, C, S = spec.window, spec.kernel, spec.in_channels, spec.conv_side
    out = np.empty((S * S, k * k * C), dtype=np.intp)
    for i in range(S):
        for j in range(S):
            cols = [((i + di) * W + (j + dj)) * C + c for di in range(k) for dj in range(k) for c in range(C)]
            out[i * S + j] = cols
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ActorCritic:
    """Flat-parameter network. ``params`` is updated in place by optimizers."""

    def __init__(self, spec: ArchSpec, params: np.ndarray | None = None, rng: np.random.Generator | None = None):
        self.spec = spec
        if params is None:
            params = self.init_params(spec, rng if rng is not None else np.random.default_rng(0))
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got {params.shape}")
        self.params = params.copy()
        self._p = self.views()
        self._idx = _im2col_index(spec)

    def set_params(self, flat: np.ndarray) -> None:
        """Overwrite parameters in place (keeps cached views valid)."""
        self.params[...] = flat

    @staticmethod
    def init_params(spec: ArchSpec, rng: np.random.Generator) -> np.ndarray:
        chunks = []
        R = spec.recurrent
        for name, shape in spec.shapes():
            if name == "conv_w":
                a = rng.normal(0.0, np.sqrt(2.0 / shape[0]), shape)
            elif name == "fc_w":
                a = rng.normal(0.0, np.sqrt(2.0 / shape[0]), shape)
            elif name in ("gru_wx", "gru_wh"):
                a = rng.uniform(-1.0, 1.0, shape) / np.sqrt(R)
            elif name == "pi_w":
                a = rng.normal(0.0, 0.01, shape)
            elif name == "v_w":
                a = rng.normal(0.0, 0.01, shape)
            else:
                a = np.zeros(shape)
            chunks.append(a.ravel())
        return np.concatenate(chunks)

    def views(self, flat: np.ndarray | None = None) -> dict[str, np.ndarray]:
        flat = self.params if flat is None else flat
        out, k = {}, 0
        for name, shape in self.spec.shapes():
            size = int(np.prod(shape))
            out[name] = flat[k : k + size].reshape(shape)
            k += size
        return out

    def initial_state(self, batch: int | None = None) -> np.ndarray:
        shape = (self.spec.recurrent,) if batch is None else (batch, self.spec.recurrent)
        return np.zeros(shape)

    # -- single-step inference ---------------------------------------------

    def step(self, x: np.ndarray, heading: int, h: np.ndarray):
        """One forward step for a single observation.

        ``x`` is the flat (W*W*C,) float input. Returns (logits, value, h').
        """
        p = self._p
        s = self.spec
        R = s.recurrent
        conv = x[self._idx] @ p["conv_w"] + p["conv_b"]
        np.maximum(conv, 0.0, out=conv)
        fc_w = p["fc_w"]
        a1 = conv.ravel() @ fc_w[: s.conv_features] + fc_w[s.conv_features + heading] + p["fc_b"]
        np.maximum(a1, 0.0, out=a1)
        gx = a1 @ p["gru_wx"] + p["gru_b"]
        wh = p["gru_wh"]
        gh = h @ wh[:, : 2 * R]
        z = _sigmoid(gx[:R] + gh[:R])
        r = _sigmoid(gx[R : 2 * R] + gh[R:])
        n = np.tanh(gx[2 * R :] + (r * h) @ wh[:, 2 * R :])
        h_new = (1.0 - z) * n + z * h
        logits = h_new @ p["pi_w"] + p["pi_b"]
        value = float(h_new @ p["v_w"] + p["v_b"][0])
        return logits, value, h_new

    # -- sequence forward / backward -----------------------------------------

    def forward_sequence(self, x: np.ndarray, headings: np.ndarray, chunk: int = 512):
        """Forward a (T, K, D) batch of K sequences, zero initial state.

        Returns (logits (T, K, A), values (T, K), cache).
        """
        s = self.spec
        p = self._p
        T, K, D = x.shape
        R = s.recurrent
        M = T * K
        xf = x.reshape(M, D)
        hf = headings.reshape(M)
        P = s.conv_side**2
        conv = np.empty((M, P * s.conv_channels))
        for lo in range(0, M, chunk):
            pre = xf[lo : lo + chunk][:, self._idx] @ p["conv_w"] + p["conv_b"]
            conv[lo : lo + chunk] = np.maximum(pre, 0.0).reshape(pre.shape[0], -1)
        fc_w = p["fc_w"]
        a1 = conv @ fc_w[: s.conv_features] + fc_w[s.conv_features + hf] + p["fc_b"]
        np.maximum(a1, 0.0, out=a1)
        gx = (a1 @ p["gru_wx"] + p["gru_b"]).reshape(T, K, 3 * R)
        wh = p["gru_wh"]
        wh_zr, wh_n = wh[:, : 2 * R], wh[:, 2 * R :]
        hs = np.empty((T, K, R))
        zs, rs, ns = np.empty_like(hs), np.empty_like(hs), np.empty_like(hs)
        h = np.zeros((K, R))
        for t in range(T):
            gh = h @ wh_zr
            z = _sigmoid(gx[t, :, :R] + gh[:, :R])
            r = _sigmoid(gx[t, :, R : 2 * R] + gh[:, R:])
            n = np.tanh(gx[t, :, 2 * R :] + (r * h) @ wh_n)
            h = (1.0 - z) * n + z * h
            zs[t], rs[t], ns[t], hs[t] = z, r, n, h
        hflat = hs.reshape(M, R)
        logits = hflat @ p["pi_w"] + p["pi_b"]
        values = hflat @ p["v_w"] + p["v_b"][0]
        cache = dict(xf=xf, hf=hf, conv=conv, a1=a1, zs=zs, rs=rs, ns=ns, hs=hs, chunk=chunk)
        return logits.reshape(T, K, -1), values.reshape(T, K), cache

    def backward_sequence(self, dlogits: np.ndarray, dvalues: np.ndarray, cache: dict) -> np.ndarray:
        """Gradient of a scalar loss w.r.t. the flat parameters.

        ``dlogits`` (T, K, A) and ``dvalues`` (T, K) are the loss gradients
        with respect to the forward outputs.
        """
        s = self.spec
        p = self._p
        grad = np.zeros_like(self.params)
        g = self.views(grad)
        T, K, A = dlogits.shape
        R = s.recurrent
        M = T * K
        hs = cache["hs"]
        hflat = hs.reshape(M, R)
        dl = dlogits.reshape(M, A)
        dv = dvalues.reshape(M)

        g["pi_w"][...] = hflat.T @ dl
        g["pi_b"][...] = dl.sum(0)
        g["v_w"][...] = hflat.T @ dv
        g["v_b"][...] = dv.sum()
        dhs = (dl @ p["pi_w"].T + dv[:, None] * p["v_w"][None, :]).reshape(T, K, R)

        wh = p["gru_wh"]
        wh_zr, wh_n = wh[:, : 2 * R], wh[:, 2 * R :]
        dwh = np.zeros_like(wh)
        dgx = np.empty((T, K, 3 * R))
        zs, rs, ns = cache["zs"], cache["rs"], cache["ns"]
        dh_next = np.zeros((K, R))
        for t in range(T - 1, -1, -1):
            h_prev = hs[t - 1] if t > 0 else np.zeros((K, R))
            z, r, n = zs[t], rs[t], ns[t]
            dh = dhs[t] + dh_next
            dn = dh * (1.0 - z)
            dz = dh * (h_prev - n)
            dh_prev = dh * z
            dan = dn * (1.0 - n * n)
            rh = r * h_prev
            dwh[:, 2 * R :] += rh.T @ dan
            drh = dan @ wh_n.T
            dr = drh * h_prev
            dh_prev += drh * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            dzr = np.concatenate([daz, dar], axis=1)
            dwh[:, : 2 * R] += h_prev.T @ dzr
            dh_prev += dzr @ wh_zr.T
            dgx[t, :, : 2 * R] = dzr
            dgx[t, :, 2 * R :] = dan
            dh_next = dh_prev
        g["gru_wh"][...] = dwh

        a1 = cache["a1"]
        dgx = dgx.reshape(M, 3 * R)
        g["gru_wx"][...] = a1.T @ dgx
        g["gru_b"][...] = dgx.sum(0)
        da1 = (dgx @ p["gru_wx"].T) * (a1 > 0.0)

        conv = cache["conv"]
        Fc = s.conv_features
        g["fc_w"][:Fc] = conv.T @ da1
        onehot = np.zeros((M, s.n_headings))
        onehot[np.arange(M), cache["hf"]] = 1.0
        g["fc_w"][Fc:] = onehot.T @ da1
        g["fc_b"][...] = da1.sum(0)

        dconv = (da1 @ p["fc_w"][:Fc].T) * (conv > 0.0)
        C = s.conv_channels
        dconv = dconv.reshape(M, -1, C)
        xf = cache["xf"]
        chunk = cache["chunk"]
        k2c = self._idx.shape[1]
        dcw = np.zeros((k2c, C))
        for lo in range(0, M, chunk):
            patches = xf[lo : lo + chunk][:, self._idx].reshape(-1, k2c)
            dcw += patches.T @ dconv[lo : lo + chunk].reshape(-1, C)
        g["conv_w"][...] = dcw
        g["conv_b"][...] = dconv.sum((0, 1))
        return grad


class Adam:
    def __init__(self, n: int, lr: float = 4e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
