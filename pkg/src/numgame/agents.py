"""Sender and receiver agents for the token channel and the sketch channel.

All agents of one game share a single :class:`Encoder` instance: it embeds the
sender's image, every receiver candidate, and (sketch channel) the rendered
sketch itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import kernels
from .diffcore import check_finite, straight_through_sample
from .errors import EmptyCandidates, ShapeMismatch

TERMINATOR = 0
DEFAULT_EMBED = 64
# stroke half-width at the reference 64 px canvas, scaled with the canvas
SIGMA_PX_AT_64 = 1.5


def to_input(canvases) -> torch.Tensor:
    """(N, S, S) rasters with 1 = white to a (N, 1, S, S) float tensor with ink = 1."""
    x = torch.as_tensor(np.asarray(canvases) if not torch.is_tensor(canvases) else canvases)
    x = x.to(torch.float32)
    if x.dim() == 2:
        x = x[None]
    return (1.0 - x)[:, None]


class Encoder(nn.Module):
    """Convolutional image encoder shared by every agent of a game.

    Three conv blocks (16/32/64 channels; the first a 5x5 stride-2 stem), each
    with batch normalisation, ReLU and 2x2 max-pooling. Features are averaged
    over space, then pass a hidden ReLU layer and a final affine map to
    ``dim``. The hidden layer lets classes sit in general position, which
    dot-product scoring needs to single out a middle numerosity. Batch
    statistics matter here: dot images of equal ink area differ little in raw
    features, and normalising over the batch magnifies what does differ.
    """

    def __init__(self, side: int = 64, dim: int = DEFAULT_EMBED, hidden: int = 64):
        super().__init__()
        if side % 16:
            raise ShapeMismatch(f"canvas side must be a multiple of 16, got {side}")
        self.side = side
        self.dim = dim
        self.features = nn.Sequential(
            nn.Conv2d(1, 16, 5, stride=2, padding=2),
            nn.BatchNorm2d(16),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.BatchNorm2d(32),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        self.head = nn.Sequential(nn.Linear(64, hidden), nn.ReLU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != self.side or x.shape[3] != self.side:
            raise ShapeMismatch(f"expected (N, 1, {self.side}, {self.side}) input, got {tuple(x.shape)}")
        return self.head(self.features(x).mean(dim=(2, 3)))

    def encode(self, canvases) -> torch.Tensor:
        """Embed raw canvases (values in [0, 1], 1 = white)."""
        return self(to_input(canvases))


# --------------------------------------------------------------------------
# token channel


@dataclass
class Message:
    """A batch of token sequences.

    ``onehot`` carries the straight-through gradient in training mode; ``probs``
    (training mode only) holds the un-noised per-position token distribution
    used for the expected-length relaxation.
    """

    tokens: torch.Tensor  # (B, L) int64
    onehot: torch.Tensor  # (B, L, V)
    eff_len: torch.Tensor  # (B,) int64
    vocab: int
    use_terminator: bool
    probs: Optional[torch.Tensor] = None

    @property
    def max_len(self) -> int:
        return int(self.tokens.shape[1])

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


def effective_length(tokens: torch.Tensor, use_terminator: bool = True) -> torch.Tensor:
    """Number of tokens before the first terminator (``L`` if none)."""
    tokens = torch.as_tensor(tokens)
    if tokens.dim() == 1:
        tokens = tokens[None]
    L = tokens.shape[1]
    if not use_terminator:
        return torch.full((tokens.shape[0],), L, dtype=torch.long)
    is_term = tokens == TERMINATOR
    pos = torch.arange(L).expand_as(tokens)
    return torch.where(is_term, pos, torch.full_like(pos, L)).min(dim=1).values


def message_from_tokens(tokens, vocab: int, use_terminator: bool = True) -> Message:
    tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens[None]
    if tokens.min() < 0 or tokens.max() >= vocab:
        raise ValueError(f"tokens must lie in [0, {vocab})")
    onehot = nn.functional.one_hot(tokens, vocab).to(torch.float32)
    return Message(tokens, onehot, effective_length(tokens, use_terminator), vocab, use_terminator)


class DiscreteSender(nn.Module):
    def __init__(self, dim: int, vocab: int, max_len: int, hidden: int = 128, use_terminator: bool = True):
        super().__init__()
        self.vocab = vocab
        self.max_len = max_len
        self.use_terminator = use_terminator
        self.init_h = nn.Linear(dim, hidden)
        self.start = nn.Parameter(torch.zeros(hidden))
        self.token_embed = nn.Linear(vocab, hidden, bias=False)
        self.cell = nn.LSTMCell(hidden, hidden)
        self.out = nn.Linear(hidden, vocab)
        self.register_buffer("first_mask", torch.arange(vocab) == TERMINATOR, persistent=False)

    def forward(self, e: torch.Tensor, train: bool = False, tau: float = 1.0,
                generator: Optional[torch.Generator] = None) -> Message:
        h = torch.tanh(self.init_h(e))
        c = torch.zeros_like(h)
        inp = self.start.expand(e.shape[0], -1)
        onehots, probs, tokens = [], [], []
        for t in range(self.max_len):
            h, c = self.cell(inp, (h, c))
            logits = self.out(h)
            if t == 0 and self.use_terminator:
                # every message carries at least one symbol
                logits = logits.masked_fill(self.first_mask, float("-inf"))
            if train:
                sample, _ = straight_through_sample(logits, tau, generator)
                probs.append(torch.softmax(logits, dim=-1))
            else:
                sample = nn.functional.one_hot(logits.argmax(dim=-1), self.vocab).to(logits.dtype)
            onehots.append(sample)
            tokens.append(sample.detach().argmax(dim=-1))
            inp = self.token_embed(sample)
        tok = torch.stack(tokens, dim=1)
        return Message(
            tokens=tok,
            onehot=torch.stack(onehots, dim=1),
            eff_len=effective_length(tok, self.use_terminator),
            vocab=self.vocab,
            use_terminator=self.use_terminator,
            probs=torch.stack(probs, dim=1) if train else None,
        )


class DiscreteReceiver(nn.Module):
    """Reads a message with an LSTM; the state right after the terminator (or
    after the last token) is projected into embedding space and scored against
    each candidate by a scaled dot product."""

    def __init__(self, dim: int, vocab: int, hidden: int = 128):
        super().__init__()
        self.dim = dim
        self.token_embed = nn.Linear(vocab, hidden, bias=False)
        self.cell = nn.LSTMCell(hidden, hidden)
        self.proj = nn.Linear(hidden, dim)

    @staticmethod
    def stop_weights(msg: Message) -> torch.Tensor:
        """(B, L) one-hot of the read position, built from the message one-hots.

        Position t is read when token t is the first terminator; the last
        position when there is none. Computed as products of the (straight-
        through) one-hots, the forward value is exact while the gradient also
        reaches the sender's decision of where to stop.
        """
        B, L = msg.tokens.shape
        if not msg.use_terminator:
            return nn.functional.one_hot(torch.full((B,), L - 1), L).to(msg.onehot.dtype)
        term = msg.onehot[:, :, 0]
        alive = torch.cumprod(torch.cat([torch.ones_like(term[:, :1]), 1.0 - term[:, :-1]], dim=1), dim=1)
        return torch.cat([alive[:, :-1] * term[:, :-1], alive[:, -1:]], dim=1)

    def forward(self, msg: Message, candidates: torch.Tensor) -> torch.Tensor:
        if candidates.dim() != 3 or candidates.shape[1] < 1:
            raise EmptyCandidates("receiver needs a (B, C, d) candidate tensor with C >= 1")
        B, L = msg.tokens.shape
        h = candidates.new_zeros(B, self.cell.hidden_size)
        c = torch.zeros_like(h)
        states = []
        for t in range(L):
            h, c = self.cell(self.token_embed(msg.onehot[:, t]), (h, c))
            states.append(h)
        states = torch.stack(states, dim=1)
        final = (self.stop_weights(msg)[:, :, None] * states).sum(dim=1)
        query = self.proj(final)
        return torch.einsum("bd,bcd->bc", query, candidates) / math.sqrt(self.dim)


# --------------------------------------------------------------------------
# sketch channel


class _SegmentField(torch.autograd.Function):
    @staticmethod
    def forward(ctx, segs_px, side):
        segs = segs_px.detach().cpu().numpy()
        d2, arg, tpar = kernels.segment_field(segs, side)
        ctx.save_for_backward(segs_px)
        ctx.arg = arg
        ctx.tpar = tpar
        return torch.from_numpy(d2).to(segs_px.dtype)

    @staticmethod
    def backward(ctx, grad):
        (segs_px,) = ctx.saved_tensors
        g = kernels.segment_field_grad(
            segs_px.detach().cpu().numpy(), ctx.arg, ctx.tpar, grad.detach().cpu().numpy()
        )
        return torch.from_numpy(g).to(segs_px.dtype), None


def stroke_sigma(side: int) -> float:
    return SIGMA_PX_AT_64 * side / 64.0


def rasterize(strokes: torch.Tensor, side: int, sigma: Optional[float] = None) -> torch.Tensor:
    """Render straight strokes onto a white canvas.

    Args:
        strokes: ``(K, 4)`` or ``(B, K, 4)`` endpoints ``(x0, y0, x1, y1)`` in
            normalised canvas coordinates; clamped to [0, 1].
        side: output side in pixels.
        sigma: Gaussian stroke width in pixels (default 1.5 px per 64 px).

    Returns:
        ``(S, S)`` or ``(B, S, S)`` canvas, ``1 - max_k exp(-d_k^2 / 2 sigma^2)``,
        differentiable w.r.t. every endpoint.
    """
    single = strokes.dim() == 2
    if single:
        strokes = strokes[None]
    if strokes.dim() != 3 or strokes.shape[-1] != 4:
        raise ShapeMismatch(f"strokes must be (B, K, 4), got {tuple(strokes.shape)}")
    sigma = stroke_sigma(side) if sigma is None else sigma
    segs = strokes.clamp(0.0, 1.0).to(torch.float64) * side
    d2 = _SegmentField.apply(segs, int(side))
    canvas = (1.0 - torch.exp(-d2 / (2.0 * sigma * sigma))).to(strokes.dtype)
    return canvas[0] if single else canvas


class SketchSender(nn.Module):
    """Maps an embedding to ``K`` strokes with coordinates in (0, 1)."""

    def __init__(self, dim: int, strokes: int = 5, hidden: int = 128):
        super().__init__()
        self.strokes = strokes
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, 4 * strokes))

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(e)).view(e.shape[0], self.strokes, 4)


def similarity_scores(query: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
    """Scaled dot products between ``(B, d)`` queries and ``(B, C, d)`` candidates."""
    if candidates.dim() != 3 or candidates.shape[1] < 1:
        raise EmptyCandidates("need a (B, C, d) candidate tensor with C >= 1")
    if query.shape[-1] != candidates.shape[-1]:
        raise ShapeMismatch("query and candidate embeddings differ in dimension")
    return torch.einsum("bd,bcd->bc", query, candidates) / math.sqrt(query.shape[-1])


# --------------------------------------------------------------------------
# agent pairs


class DiscreteAgents(nn.Module):
    channel = "discrete"

    def __init__(self, side: int = 64, dim: int = DEFAULT_EMBED, vocab: int = 3, max_len: int = 5,
                 use_terminator: bool = True, hidden: int = 128):
        super().__init__()
        self.encoder = Encoder(side, dim)
        self.sender = DiscreteSender(dim, vocab, max_len, hidden, use_terminator)
        self.receiver = DiscreteReceiver(dim, vocab, hidden)

    def encode(self, canvases) -> torch.Tensor:
        return self.encoder.encode(canvases)

    def send(self, e, train=False, tau=1.0, generator=None) -> Message:
        return self.sender(e, train=train, tau=tau, generator=generator)

    def receive(self, msg: Message, candidates: torch.Tensor) -> torch.Tensor:
        return self.receiver(msg, candidates)

    def play(self, sender_x, cand_x, train=False, tau=1.0, generator=None):
        """One batched round: inputs are (B, 1, S, S) and (B, C, 1, S, S) tensors."""
        B, C = cand_x.shape[:2]
        emb = self.encoder(torch.cat([sender_x, cand_x.flatten(0, 1)], dim=0))
        e_send, e_cand = emb[:B], emb[B:].view(B, C, -1)
        msg = self.send(e_send, train=train, tau=tau, generator=generator)
        return check_finite(self.receive(msg, e_cand), "receiver scores"), msg


class SketchAgents(nn.Module):
    channel = "sketch"

    def __init__(self, side: int = 64, dim: int = DEFAULT_EMBED, strokes: int = 5,
                 sigma: Optional[float] = None, hidden: int = 128):
        super().__init__()
        self.side = side
        self.sigma = stroke_sigma(side) if sigma is None else sigma
        self.encoder = Encoder(side, dim)
        self.sender = SketchSender(dim, strokes, hidden)

    def encode(self, canvases) -> torch.Tensor:
        return self.encoder.encode(canvases)

    def send(self, e: torch.Tensor) -> torch.Tensor:
        return self.sender(e)

    def draw(self, strokes: torch.Tensor) -> torch.Tensor:
        return rasterize(strokes, self.side, self.sigma)

    def receive(self, sketch: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
        """Score ``(B, S, S)`` sketches against ``(B, C, d)`` candidate embeddings."""
        if sketch.shape[-1] != self.side:
            raise ShapeMismatch(f"sketch side {sketch.shape[-1]} != canvas side {self.side}")
        return similarity_scores(self.encoder(to_input(sketch)), candidates)

    def play(self, sender_x, cand_x, train=False, tau=1.0, generator=None):
        B, C = cand_x.shape[:2]
        emb = self.encoder(torch.cat([sender_x, cand_x.flatten(0, 1)], dim=0))
        e_send, e_cand = emb[:B], emb[B:].view(B, C, -1)
        strokes = self.send(e_send)
        sketch = self.draw(strokes)
        return self.receive(sketch, e_cand), strokes
