"""Networks, policy heads, gradient utilities and the checkpoint format.

Everything runs in float64 on the CPU. Differentiation is delegated to
``torch.autograd``; the gradient penalty differentiates through a first-pass
input gradient built with ``create_graph=True``.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

DTYPE = torch.float64
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % (2 ** 63))
    return g


class Mlp(nn.Module):
    """Fully connected network, ReLU on hidden layers, linear output."""

    def __init__(self, widths: Sequence[int], generator: torch.Generator | None = None):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = tuple(int(w) for w in widths)
        self.layers = nn.ModuleList(
            nn.Linear(i, o, dtype=DTYPE) for i, o in zip(self.widths[:-1], self.widths[1:]))
        if generator is not None:
            self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator):
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.uniform_(-bound, bound, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers[:-1]:
            x = torch.relu(layer(x))
        return self.layers[-1](x)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def forward(net: nn.Module, inputs) -> torch.Tensor:
    with torch.no_grad():
        return net(as_tensor(inputs))


def grad_params(net: nn.Module, loss: torch.Tensor, create_graph: bool = False) -> list[torch.Tensor]:
    """Exact reverse-mode gradient of a scalar loss w.r.t. every parameter of ``net``.

    Parameters the loss does not depend on get an exact zero.
    """
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    params = list(net.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True, create_graph=create_graph,
                                retain_graph=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def input_gradient_penalty(net: nn.Module, points: torch.Tensor) -> torch.Tensor:
    """Mean of ``(||grad_x net(x)||_2 - 1)^2`` over rows of ``points``, differentiable in the parameters.

    A row with exactly zero input gradient contributes the constant 1 (its value)
    with a zero subgradient, which sidesteps the square root's singularity.
    """
    points = points.detach().requires_grad_(True)
    out = net(points)
    if out.dim() > 1 and out.shape[-1] != 1:
        raise ValueError("gradient penalty needs a scalar-output network")
    (g,) = torch.autograd.grad(out.sum(), points, create_graph=True)
    sq = (g * g).sum(dim=-1)
    nonzero = sq > 0
    norm = torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq)))
    per_row = torch.where(nonzero, (norm - 1.0) ** 2, torch.ones_like(sq) + 0.0 * sq)
    return per_row.mean()


def grad_input_penalty(net: nn.Module, points) -> tuple[float, list[torch.Tensor]]:
    pen = input_gradient_penalty(net, as_tensor(points).reshape(-1, net.widths[0]))
    return float(pen.detach()), grad_params(net, pen)


# ---------------------------------------------------------------------------
# policy heads


def _squash_log_det(u: torch.Tensor) -> torch.Tensor:
    # log(1 - tanh(u)^2) in the softplus form
    return 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))


class GaussianPolicyHead(nn.Module):
    """Diagonal Gaussian with state-dependent log-std, optionally tanh-squashed onto a box."""

    discrete = False

    def __init__(self, in_dim: int, action_dim: int, hidden: Sequence[int], low, high,
                 generator: torch.Generator | None = None, squash: bool = True):
        super().__init__()
        self.action_dim = action_dim
        self.trunk = Mlp([in_dim, *hidden, 2 * action_dim], generator)
        low = torch.as_tensor(np.asarray(low, dtype=np.float64))
        high = torch.as_tensor(np.asarray(high, dtype=np.float64))
        self.register_buffer("center", (high + low) / 2)
        self.register_buffer("scale", (high - low) / 2)
        self.squash = squash

    def dist_params(self, x: torch.Tensor):
        out = self.trunk(x)
        mean, log_std = out[..., :self.action_dim], out[..., self.action_dim:]
        return mean, torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)

    def _log_prob_pre(self, u, mean, log_std):
        z = (u - mean) * torch.exp(-log_std)
        lp = -0.5 * z * z - log_std - HALF_LOG_2PI
        if self.squash:
            lp = lp - _squash_log_det(u) - torch.log(self.scale)
        return lp.sum(dim=-1)

    def sample(self, x: torch.Tensor, generator: torch.Generator | None = None, noise=None):
        """Reparameterised draw; returns ``(action, log_density)``."""
        mean, log_std = self.dist_params(x)
        if noise is None:
            noise = torch.randn(mean.shape, generator=generator, dtype=DTYPE)
        u = mean + torch.exp(log_std) * noise
        a = self.center + self.scale * torch.tanh(u) if self.squash else u
        return a, self._log_prob_pre(u, mean, log_std)

    def log_prob(self, x: torch.Tensor, a: torch.Tensor, clip: float = 1e-6) -> torch.Tensor:
        mean, log_std = self.dist_params(x)
        if self.squash:
            y = torch.clamp((a - self.center) / self.scale, -1.0 + clip, 1.0 - clip)
            u = torch.atanh(y)
        else:
            u = a
        return self._log_prob_pre(u, mean, log_std)

    def mode(self, x: torch.Tensor) -> torch.Tensor:
        mean, _ = self.dist_params(x)
        return self.center + self.scale * torch.tanh(mean) if self.squash else mean

    def log_std(self, x: torch.Tensor) -> torch.Tensor:
        return self.dist_params(x)[1]


class CategoricalPolicyHead(nn.Module):
    """Softmax policy over ``n_actions`` discrete actions."""

    discrete = True

    def __init__(self, in_dim: int, n_actions: int, hidden: Sequence[int],
                 generator: torch.Generator | None = None):
        super().__init__()
        self.n_actions = n_actions
        self.trunk = Mlp([in_dim, *hidden, n_actions], generator)

    def log_probs(self, x: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.trunk(x), dim=-1)

    def sample(self, x: torch.Tensor, generator: torch.Generator | None = None, noise=None):
        logp = self.log_probs(x)
        if noise is None:
            noise = torch.rand(logp.shape[:-1], generator=generator, dtype=DTYPE)
        cdf = torch.cumsum(torch.exp(logp), dim=-1)
        a = torch.clamp((noise.unsqueeze(-1) >= cdf).sum(dim=-1), max=self.n_actions - 1)
        return a, logp.gather(-1, a.unsqueeze(-1)).squeeze(-1)

    def log_prob(self, x: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        idx = a.reshape(a.shape[0], -1)[:, 0].round().long()
        return self.log_probs(x).gather(-1, idx.unsqueeze(-1)).squeeze(-1)

    def mode(self, x: torch.Tensor) -> torch.Tensor:
        return self.log_probs(x).argmax(dim=-1)


def policy_sample_logp(head, augmented_state, seed: int):
    x = as_tensor(augmented_state)
    single = x.dim() == 1
    if single:
        x = x.unsqueeze(0)
    with torch.no_grad():
        a, lp = head.sample(x, make_generator(seed))
    return (a[0], lp[0]) if single else (a, lp)


# ---------------------------------------------------------------------------
# optimisation


def make_adam(params: Iterable[torch.nn.Parameter], lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(list(params), lr=lr, betas=(0.9, 0.999), eps=1e-8, foreach=True)


def adam_step(opt: torch.optim.Adam, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor]):
    """Apply one bias-corrected Adam update with externally computed gradients."""
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        p.grad = g.detach().clone()
    opt.step()
    for p in params:
        p.grad = None


def descend(net: nn.Module, opt: torch.optim.Adam, loss: torch.Tensor):
    adam_step(opt, list(net.parameters()), grad_params(net, loss))


def soft_update(target: nn.Module, online: nn.Module, rho: float):
    """``target <- rho * target + (1 - rho) * online`` elementwise."""
    with torch.no_grad():
        for pt, po in zip(target.parameters(), online.parameters()):
            pt.mul_(rho).add_(po, alpha=1.0 - rho)


def flat_params(net: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1) for p in net.parameters()]).numpy().copy()


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic "IDRLCKPT" | u32 version | u32 n_sections
#   per section: u32 name_len | name (utf-8) | u32 ndim | u32 dims[ndim] | f64 data (little-endian)

CKPT_MAGIC = b"IDRLCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def module_state(prefix: str, module: nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().numpy().astype(np.float64)
            for k, v in module.state_dict().items()}


def optimizer_state(prefix: str, opt: torch.optim.Adam) -> dict[str, np.ndarray]:
    out = {}
    for i, p in enumerate(opt.param_groups[0]["params"]):
        st = opt.state.get(p)
        if not st:
            continue
        out[f"{prefix}.{i}.step"] = np.array([float(st["step"])])
        out[f"{prefix}.{i}.exp_avg"] = st["exp_avg"].numpy().astype(np.float64)
        out[f"{prefix}.{i}.exp_avg_sq"] = st["exp_avg_sq"].numpy().astype(np.float64)
    return out


def load_module_state(prefix: str, module: nn.Module, sections: Mapping[str, np.ndarray]):
    sd = {}
    for k, v in module.state_dict().items():
        key = f"{prefix}.{k}"
        if key not in sections:
            raise CheckpointError(f"checkpoint lacks section {key!r}")
        arr = sections[key]
        if tuple(arr.shape) != tuple(v.shape):
            raise CheckpointError(f"section {key!r} has shape {arr.shape}, expected {tuple(v.shape)}")
        sd[k] = torch.as_tensor(arr, dtype=v.dtype)
    module.load_state_dict(sd)


def load_optimizer_state(prefix: str, opt: torch.optim.Adam, sections: Mapping[str, np.ndarray]):
    for i, p in enumerate(opt.param_groups[0]["params"]):
        key = f"{prefix}.{i}.step"
        if key not in sections:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(sections[key][0])),
            "exp_avg": torch.as_tensor(sections[f"{prefix}.{i}.exp_avg"]).reshape(p.shape).clone(),
            "exp_avg_sq": torch.as_tensor(sections[f"{prefix}.{i}.exp_avg_sq"]).reshape(p.shape).clone(),
        }


def encode_checkpoint(sections: Mapping[str, np.ndarray]) -> bytes:
    buf = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(sections))]
    for name in sorted(sections):
        arr = np.ascontiguousarray(np.asarray(sections[name], dtype="<f8"))
        raw = name.encode("utf-8")
        buf.append(struct.pack("<I", len(raw)) + raw)
        buf.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.append(arr.tobytes())
    return b"".join(buf)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("checkpoint truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(8) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise CheckpointError("trailing bytes after last checkpoint section")
    return out


def save_checkpoint(path, sections: Mapping[str, np.ndarray]):
    Path(path).write_bytes(encode_checkpoint(sections))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
