"""The referential game: episode assembly, losses, training and evaluation."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import metrics
from .agents import DiscreteAgents, Message, SketchAgents, to_input
from .diffcore import make_optimizer
from .errors import DivergenceDetected, InsufficientClasses, InsufficientInstances
from .stimuli import Dataset, DotImage
from .transcript import Transcript

log = logging.getLogger(__name__)

EVAL_STREAM = 7919


DEFAULT_LR = {"discrete": 5e-4, "sketch": 1e-3}


@dataclass
class GameConfig:
    channel: str = "discrete"  # discrete | sketch
    classes: List[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    candidates: int = 5
    vocab: int = 3
    max_len: int = 5
    variable_length: bool = False  # token 0 terminates the message when True
    strokes: int = 5
    thickness: float = 1.5 / 64  # stroke sigma in normalised canvas units
    margin: float = 1.0
    length_coef: float = 0.0
    entropy_coef: float = 0.05  # bonus on the sender's per-token entropy (discrete, training only)
    tau_start: float = 2.0
    tau_end: float = 0.5
    lr: Optional[float] = None  # None: 5e-4 for discrete, 1e-3 for sketch
    lr_decay: str = "cosine"  # cosine | none; cosine anneals to lr_floor * lr
    lr_floor: float = 0.05
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 60
    episodes_per_epoch: Optional[int] = 600  # None: one pass over the training images
    seed: int = 0
    condition: str = "diff"  # same | diff
    embed_dim: int = 64
    hidden: int = 128
    eval_episodes: int = 500

    def __post_init__(self):
        self.classes = [int(c) for c in self.classes]
        if self.episodes_per_epoch is not None and self.episodes_per_epoch < 1:
            raise ValueError("episodes_per_epoch must be >= 1 (or None)")
        if self.channel not in ("discrete", "sketch"):
            raise ValueError(f"unknown channel {self.channel!r}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.channel]
        if self.condition not in ("same", "diff"):
            raise ValueError(f"unknown condition {self.condition!r}")
        if self.entropy_coef < 0:
            raise ValueError("entropy_coef must be >= 0")
        if self.length_coef < 0:
            raise ValueError("length_coef must be >= 0")
        if self.lr_decay not in ("cosine", "none"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.candidates < 2:
            raise InsufficientClasses("need at least 2 candidates")
        if self.candidates > len(self.classes):
            raise InsufficientClasses(
                f"{self.candidates} candidates but only {len(self.classes)} classes"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for ``epoch``: constant, or cosine from lr to lr * lr_floor."""
        if self.lr_decay == "none" or self.epochs <= 1:
            return self.lr
        frac = min(epoch, self.epochs - 1) / (self.epochs - 1)
        return self.lr * (self.lr_floor + (1 - self.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac)))

    def tau(self, epoch: int) -> float:
        if self.epochs <= 1:
            return self.tau_end
        return self.tau_start + (self.tau_end - self.tau_start) * epoch / (self.epochs - 1)


def candidate_count(classes: Sequence[int]) -> int:
    return min(5, len(classes))


# --------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    sender_image: DotImage
    candidates: List[DotImage]
    target_index: int
    condition: str

    @property
    def target(self) -> DotImage:
        return self.candidates[self.target_index]


class ImageBank:
    """All images of one split, stacked once into a network-ready tensor.

    Several datasets can be merged (e.g. training classes plus a dataset of
    novel numerosities); each class must come from exactly one of them.
    """

    def __init__(self, datasets: Sequence[Dataset], split: str = "test"):
        self.images: Dict[int, List[DotImage]] = {}
        self.pools: Dict[int, np.ndarray] = {}  # class -> instance ids usable in this split
        self.offset: Dict[int, int] = {}
        canvases = []
        for ds in datasets:
            for c in ds.classes:
                if c in self.images:
                    continue
                imgs = ds.images[c]
                if split == "all":
                    ids = np.arange(len(imgs))
                else:
                    ids = ds.train_idx[c] if split == "train" else ds.test_idx[c]
                    if len(ids) == 0:  # class kept whole for training
                        ids = np.arange(len(imgs))
                self.images[c] = imgs
                self.pools[c] = np.asarray(ids, dtype=np.int64)
                self.offset[c] = len(canvases)
                canvases.extend(img.canvas for img in imgs)
        self.side = int(canvases[0].shape[0])
        self.tensor = to_input(np.stack(canvases))

    def rows(self, cls: np.ndarray, inst: np.ndarray) -> np.ndarray:
        off = np.array([self.offset[int(c)] for c in np.ravel(cls)]).reshape(np.shape(cls))
        return off + inst

    def sample(self, cls: Sequence[int], condition: str, C: int, rng: np.random.Generator,
               target_classes: Optional[Sequence[int]] = None,
               sender_inst: Optional[Sequence[int]] = None):
        """Draw a batch of episodes as index arrays.

        Returns ``(sender_cls, sender_inst, cand_cls, cand_inst, target_index)``
        where the candidate arrays are ``(B, C)``.
        """
        classes = [int(c) for c in cls]
        if len(classes) < C:
            raise InsufficientClasses(f"need {C} distinct classes, have {len(classes)}")
        for c in classes:
            if c not in self.pools or len(self.pools[c]) == 0:
                raise InsufficientInstances(f"class {c} has no images in this split")
        if target_classes is None:
            raise ValueError("target_classes is required")
        B = len(target_classes)
        s_cls = np.asarray(target_classes, dtype=np.int64)
        s_inst = np.zeros(B, dtype=np.int64)
        c_cls = np.zeros((B, C), dtype=np.int64)
        c_inst = np.zeros((B, C), dtype=np.int64)
        tgt = np.zeros(B, dtype=np.int64)
        for b in range(B):
            t = int(s_cls[b])
            pool = self.pools[t]
            if sender_inst is not None:
                i = int(sender_inst[b])
            else:
                i = int(pool[rng.integers(len(pool))])
            others = [c for c in classes if c != t]
            distract = rng.choice(others, size=C - 1, replace=False)
            order = rng.permutation(C)
            chosen = np.concatenate([[t], distract])[order]
            for j, c in enumerate(chosen):
                c = int(c)
                if c == t:
                    tgt[b] = j
                    if condition == "same":
                        c_inst[b, j] = i
                    else:
                        alt = pool[pool != i]
                        if len(alt) == 0:
                            raise InsufficientInstances(f"class {t} needs >= 2 instances for the diff condition")
                        c_inst[b, j] = int(alt[rng.integers(len(alt))])
                else:
                    p = self.pools[c]
                    c_inst[b, j] = int(p[rng.integers(len(p))])
                c_cls[b, j] = c
            s_inst[b] = i
        return s_cls, s_inst, c_cls, c_inst, tgt

    def tensors(self, s_cls, s_inst, c_cls, c_inst):
        sx = self.tensor[self.rows(s_cls, s_inst)]
        cx = self.tensor[self.rows(c_cls, c_inst).reshape(-1)].view(*c_cls.shape, *self.tensor.shape[1:])
        return sx, cx


def assemble_episode(dataset: Dataset, condition: str, classes: Sequence[int], C: int,
                     rng: np.random.Generator, split: str = "test",
                     target_class: Optional[int] = None) -> Episode:
    """One game round: a sender image plus ``C`` candidates of distinct numerosities.

    The target class is uniform over ``classes`` unless given. Distractor
    classes are drawn without replacement and the candidate order is a
    uniform permutation.
    """
    if len(classes) < C:
        raise InsufficientClasses(f"need {C} distinct classes, have {len(classes)}")
    bank = _bank_for(dataset, split)
    t = int(target_class) if target_class is not None else int(rng.choice(list(classes)))
    s_cls, s_inst, c_cls, c_inst, tgt = bank.sample(classes, condition, C, rng, target_classes=[t])
    imgs = bank.images
    return Episode(
        sender_image=imgs[int(s_cls[0])][int(s_inst[0])],
        candidates=[imgs[int(c)][int(i)] for c, i in zip(c_cls[0], c_inst[0])],
        target_index=int(tgt[0]),
        condition=condition,
    )


def _bank_for(dataset, split):
    # small cache so repeated single-episode assembly does not restack images
    key = (id(dataset), split)
    cache = _bank_for.__dict__.setdefault("cache", {})
    if key not in cache:
        cache.clear()
        cache[key] = ImageBank([dataset], split)
    return cache[key]


# --------------------------------------------------------------------------
# losses


def hinge_loss(scores: torch.Tensor, target, margin: float = 1.0) -> torch.Tensor:
    """Multi-class hinge: sum over j != target of max(0, margin - s_target + s_j).

    Accepts a single score vector with an int target, or ``(B, C)`` scores with
    ``(B,)`` targets (returns per-episode losses).
    """
    if margin <= 0:
        raise ValueError("margin must be > 0")
    single = scores.dim() == 1
    s = scores[None] if single else scores
    t = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    if t.numel() != s.shape[0]:
        raise IndexError("one target per score row is required")
    if (t < 0).any() or (t >= s.shape[1]).any():
        raise IndexError(f"target index out of range for {s.shape[1]} candidates")
    st = s.gather(1, t[:, None])
    viol = (margin - st + s).clamp_min(0.0)
    mask = torch.ones_like(s, dtype=torch.bool).scatter_(1, t[:, None], False)
    out = (viol * mask).sum(dim=1)
    return out[0] if single else out


def expected_length(msg: Message) -> torch.Tensor:
    """Relaxed message length: sum_t prod_{s<=t} (1 - p_s(terminator))."""
    if msg.probs is None or not msg.use_terminator:
        return msg.eff_len.to(torch.float32)
    alive = torch.cumprod(1.0 - msg.probs[:, :, 0], dim=1)
    return alive.sum(dim=1)


def sender_entropy(msg: Message) -> torch.Tensor:
    """Mean per-position entropy (nats) of the sender's token distributions, per message."""
    if msg.probs is None:
        raise ValueError("sender entropy needs a training-mode message")
    p = msg.probs
    return -(p * torch.log(p.clamp_min(1e-12))).sum(dim=-1).mean(dim=1)


def length_penalty(msg: Message, coef: float) -> torch.Tensor:
    """``coef * length`` per message.

    Training-mode messages use the expected length, so the gradient reaches the
    sender through its terminator probabilities; otherwise the effective length.
    """
    if coef < 0:
        raise ValueError("coefficient must be >= 0")
    if coef == 0:
        return torch.zeros(len(msg))
    return coef * expected_length(msg)


# --------------------------------------------------------------------------
# agents


def build_agents(config: GameConfig, side: int):
    torch.manual_seed(config.seed)
    if config.channel == "discrete":
        return DiscreteAgents(side, config.embed_dim, config.vocab, config.max_len,
                              use_terminator=config.variable_length, hidden=config.hidden)
    return SketchAgents(side, config.embed_dim, config.strokes, sigma=config.thickness * side,
                        hidden=config.hidden)


def _records(agents, config, epoch, phase, s_cls, s_inst, c_cls, scores, out) -> List[dict]:
    pred = scores.argmax(dim=1).numpy()
    recs = []
    for b in range(len(s_cls)):
        pn = int(c_cls[b, pred[b]])
        r = {
            "epoch": int(epoch),
            "phase": phase,
            "sender_n": int(s_cls[b]),
            "sender_i": int(s_inst[b]),
            "predicted_n": pn,
            "correct": bool(pn == int(s_cls[b])),
        }
        if config.channel == "discrete":
            toks = [int(x) for x in out.tokens[b]]
            r["tokens"] = toks
            r["eff_len"] = int(out.eff_len[b])
            r["key"] = metrics.message_key(toks, config.variable_length)
        else:
            s = out[b].tolist()
            r["strokes"] = s
            r["eff_len"] = round(_ink_length(s, agents.side), 6)
        recs.append(r)
    return recs


def _ink_length(strokes, side) -> float:
    return float(sum(math.hypot((x1 - x0) * side, (y1 - y0) * side) for x0, y0, x1, y1 in strokes))


def play_batch(agents, bank: ImageBank, config: GameConfig, s_cls, s_inst, c_cls, c_inst,
               train=False, tau=1.0, generator=None):
    sx, cx = bank.tensors(s_cls, s_inst, c_cls, c_inst)
    return agents.play(sx, cx, train=train, tau=tau, generator=generator)


def evaluate(agents, datasets, classes: Sequence[int], condition: str, C: int, episodes: int,
             rng: np.random.Generator, config: Optional[GameConfig] = None, split: str = "test",
             epoch: int = -1, phase: str = "eval", batch_size: int = 250) -> Transcript:
    """Deterministic-sender transcript over ``episodes`` rounds.

    Target classes are balanced: the episode list cycles through ``classes``
    and is shuffled once.
    """
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    bank = datasets if isinstance(datasets, ImageBank) else ImageBank(datasets, split)
    config = config or GameConfig(channel=agents.channel, classes=list(classes), candidates=C,
                                  condition=condition)
    classes = [int(c) for c in classes]
    targets = np.resize(np.asarray(classes), episodes)
    targets = targets[rng.permutation(episodes)]
    t = Transcript(agents.channel, use_terminator=config.variable_length, side=bank.side)
    was_training = agents.training
    agents.eval()
    with torch.no_grad():
        for lo in range(0, episodes, batch_size):
            idx = bank.sample(classes, condition, C, rng, target_classes=targets[lo:lo + batch_size])
            s_cls, s_inst, c_cls, c_inst, _ = idx
            scores, out = play_batch(agents, bank, config, *idx[:4])
            t.extend(_records(agents, config, epoch, phase, s_cls, s_inst, c_cls, scores, out))
    agents.train(was_training)
    return t


def epoch_metrics(t: Transcript, config: GameConfig, epoch: int) -> dict:
    """Accuracy, H(N|M) and mean length of one evaluation transcript.

    Sketch transcripts are discretised with k = number of classes before the
    entropy is taken; their "length" is total ink length in pixels.
    """
    if t.channel == "sketch":
        k = len(set(r["sender_n"] for r in t.records))
        rng = np.random.default_rng([config.seed, epoch, EVAL_STREAM])
        model = metrics.cluster_sketches(metrics.sketch_canvases(t), k, rng)
        keyed = metrics.attach_cluster_keys(t, model)
    else:
        keyed = t
    return {
        "epoch": int(epoch),
        "accuracy": metrics.accuracy(t),
        "cond_entropy": metrics.conditional_entropy(metrics.CodeTable.from_transcript(keyed)),
        "mean_len": metrics.mean_length(t),
    }


@dataclass
class TrainResult:
    agents: object
    transcript: Transcript
    history: List[dict]
    config: GameConfig
    bank: ImageBank = None


def epoch_order(n: int, episodes: Optional[int], rng: np.random.Generator) -> np.ndarray:
    """Sender indices for one epoch: shuffled passes over ``n`` images, cut to ``episodes``.

    A fixed episode count keeps the number of updates equal across datasets of
    different size while class frequencies follow the dataset.
    """
    if episodes is None:
        return rng.permutation(n)
    passes = -(-episodes // n)
    return np.concatenate([rng.permutation(n) for _ in range(passes)])[:episodes]


def train(config: GameConfig, dataset: Dataset, log_every: int = 1, eval_classes=None) -> TrainResult:
    """Run the episode -> message -> choice -> hinge loss -> update loop.

    One epoch shows every training image to the sender once, in a fresh random
    order, each with freshly drawn candidates. After each epoch the agents are
    evaluated (eval mode) on the held-out split.

    Raises:
        DivergenceDetected: the loss became non-finite; ``checkpoint`` holds the
            state dict from the end of the last completed epoch.
    """
    missing = [c for c in config.classes if c not in dataset.images]
    if missing:
        raise InsufficientClasses(f"dataset lacks classes {missing}")
    rng = np.random.default_rng([config.seed, 1])
    gen = torch.Generator().manual_seed(config.seed)
    agents = build_agents(config, dataset.spec.canvas_side)
    opt = make_optimizer(agents.parameters(), config.lr, config.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda e: config.lr_at(e) / config.lr)
    train_bank = ImageBank([dataset], "train")
    test_bank = ImageBank([dataset], "test")
    C = config.candidates
    senders = [(c, int(i)) for c in config.classes for i in train_bank.pools[c]]
    transcript = Transcript(config.channel, use_terminator=config.variable_length, side=train_bank.side)
    history: List[dict] = []
    good_state = copy.deepcopy(agents.state_dict())
    for epoch in range(config.epochs):
        tau = config.tau(epoch)
        agents.train()
        order = epoch_order(len(senders), config.episodes_per_epoch, rng)
        for lo in range(0, len(order), config.batch_size):
            chunk = [senders[k] for k in order[lo:lo + config.batch_size]]
            idx = train_bank.sample(config.classes, config.condition, C, rng,
                                    target_classes=[c for c, _ in chunk],
                                    sender_inst=[i for _, i in chunk])
            scores, out = play_batch(agents, train_bank, config, *idx[:4], train=True, tau=tau,
                                     generator=gen)
            loss = hinge_loss(scores, torch.as_tensor(idx[4]), config.margin)
            if config.channel == "discrete" and config.length_coef > 0:
                loss = loss + length_penalty(out, config.length_coef)
            if config.channel == "discrete" and config.entropy_coef > 0:
                loss = loss - config.entropy_coef * sender_entropy(out)
            loss = loss.mean()
            if not torch.isfinite(loss):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}", checkpoint=good_state, epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
        good_state = copy.deepcopy(agents.state_dict())
        eval_rng = np.random.default_rng([config.seed, EVAL_STREAM])
        t = evaluate(agents, test_bank, eval_classes or config.classes, config.condition, C,
                     config.eval_episodes, eval_rng, config=config, epoch=epoch)
        transcript.extend(t.records)
        row = epoch_metrics(t, config, epoch)
        row["loss"] = float(loss.detach())
        history.append(row)
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            log.info("epoch %d tau=%.2f loss=%.3f acc=%.3f H=%.3f len=%.2f", epoch, tau, row["loss"],
                     row["accuracy"], row["cond_entropy"], row["mean_len"])
    return TrainResult(agents, transcript, history, config, test_bank)
