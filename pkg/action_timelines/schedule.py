import math
from dataclasses import dataclass
from typing import Union

import torch

from .exceptions import InvalidValueError, ShapeMismatchError

__all__ = [
    "NoiseSchedule",
    "build_cosine_schedule",
    "build_linear_schedule",
    "build_schedule",
    "corrupt",
    "invert_corrupt",
]

MAX_BETA = 0.999

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """The cumulative signal-retention sequence ᾱ_0 … ᾱ_T.

    ``alpha_bar`` is a float64 tensor of length ``total_steps + 1`` with
    ``alpha_bar[0] == 1``. Index -1 is reserved for the terminal DDIM target
    and always reads as exactly 1.
    """

    total_steps: int
    alpha_bar: torch.Tensor
    offset: float = 0.008
    kind: str = "cosine"

    @property
    def betas(self) -> torch.Tensor:
        """β_t = 1 − ᾱ_t/ᾱ_{t−1} for t = 1 … T"""
        return 1.0 - self.alpha_bar[1:] / self.alpha_bar[:-1]

    def check_timestep(self, t: Timestep, allow_terminal: bool = False) -> None:
        low = -1 if allow_terminal else 0
        values = t.reshape(-1) if isinstance(t, torch.Tensor) else torch.tensor([int(t)])
        if values.numel() == 0:
            return
        if int(values.min()) < low or int(values.max()) > self.total_steps:
            raise InvalidValueError("timestep {} outside [{}, {}]".format(values.tolist(), low, self.total_steps))

    def alpha_bar_at(self, t: int) -> float:
        """ᾱ_t as a python float, with ᾱ_{-1} defined as 1"""
        self.check_timestep(t, allow_terminal=True)
        if t < 0:
            return 1.0
        return float(self.alpha_bar[t])

    def gather(self, t: Timestep, like: torch.Tensor) -> torch.Tensor:
        """ᾱ for one timestep per leading element of ``like``, broadcastable against it"""
        if not isinstance(t, torch.Tensor):
            return torch.tensor(self.alpha_bar_at(t), dtype=like.dtype)
        self.check_timestep(t, allow_terminal=True)
        padded = torch.cat([self.alpha_bar, self.alpha_bar.new_ones(1)])
        values = padded[t.long()].to(like.dtype)  # index -1 hits the appended 1
        return values.reshape(values.shape + (1,) * (like.dim() - values.dim()))


def build_cosine_schedule(total_steps: int, offset: float = 0.008) -> NoiseSchedule:
    """Build the cosine ᾱ schedule

    ᾱ_t = f(t)/f(0) with f(t) = cos²(((t/T + s)/(1 + s))·π/2), after which every
    β_t is clipped to 0.999 and ᾱ recumulated as the product of (1 − β).

    Args:
        total_steps (int): T, the number of diffusion steps
        offset (float, optional): s, the small offset shaping the curve near t=0. Defaults to 0.008.

    Raises:
        InvalidValueError: If T < 1 or s outside (0, 1)

    Returns:
        NoiseSchedule: The schedule
    """
    if int(total_steps) != total_steps or total_steps < 1:
        raise InvalidValueError("total_steps must be a positive integer, got {}".format(total_steps))
    if not 0 < offset < 1:
        raise InvalidValueError("offset must lie in (0, 1), got {}".format(offset))
    steps = torch.arange(total_steps + 1, dtype=torch.float64)
    f_t = torch.cos(((steps / total_steps + offset) / (1.0 + offset)) * (math.pi / 2)) ** 2
    betas = torch.clip(1.0 - f_t[1:] / f_t[:-1], 0.0, MAX_BETA)
    alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)])
    return NoiseSchedule(int(total_steps), alpha_bar, offset, "cosine")


def build_linear_schedule(total_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a linear-β schedule scaled to ``total_steps``"""
    if int(total_steps) != total_steps or total_steps < 1:
        raise InvalidValueError("total_steps must be a positive integer, got {}".format(total_steps))
    ratio = 1000.0 / total_steps
    betas = torch.linspace(beta_start * ratio, min(beta_end * ratio, MAX_BETA), total_steps, dtype=torch.float64)
    alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)])
    return NoiseSchedule(int(total_steps), alpha_bar, 0.0, "linear")


def build_schedule(kind: str, total_steps: int, offset: float = 0.008) -> NoiseSchedule:
    if kind == "cosine":
        return build_cosine_schedule(total_steps, offset)
    if kind == "linear":
        return build_linear_schedule(total_steps)
    raise InvalidValueError("unknown schedule kind {!r}".format(kind))


def corrupt(z0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward noising z_t = √ᾱ_t·z0 + √(1 − ᾱ_t)·eps

    Args:
        z0 (torch.Tensor): Clean signal-space proposals
        t (int | torch.Tensor): A timestep in [0, T], or one per leading element of z0
        eps (torch.Tensor): Standard-normal noise shaped like z0
        sched (NoiseSchedule): The schedule

    Raises:
        InvalidValueError: If t is out of range
        ShapeMismatchError: If z0 and eps differ in shape

    Returns:
        torch.Tensor: The noisy signal z_t
    """
    sched.check_timestep(t)
    if z0.shape != eps.shape:
        raise ShapeMismatchError("z0 {} and eps {} differ in shape".format(tuple(z0.shape), tuple(eps.shape)))
    alpha_bar = sched.gather(t, z0)
    return alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * eps


def invert_corrupt(zt: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Recover z0 = (z_t − √(1 − ᾱ_t)·eps)/√ᾱ_t given the noise that produced z_t"""
    sched.check_timestep(t)
    if zt.shape != eps.shape:
        raise ShapeMismatchError("zt {} and eps {} differ in shape".format(tuple(zt.shape), tuple(eps.shape)))
    alpha_bar = sched.gather(t, zt)
    return (zt - (1.0 - alpha_bar).sqrt() * eps) / alpha_bar.sqrt()
