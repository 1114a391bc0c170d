"""Trainable conditional sequence model shared by the query and response tasks.

The reference implementation is a featurized bigram: next-token logits are the
sum of a previous-token row and the mean of input-bag rows. It is the smallest
trainable model whose outputs depend on the conditioning input, which makes the
joint-training dynamics observable at desk scale. Stronger generators plug in
behind the same interface.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Dialogue, flatten_context, tokenize

BOS_ID = 0
EOS_ID = 1
UNK_ID = 2

BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"

QUERY_PROMPT = "translate dialogue context to query:"
RESPONSE_PROMPT = "generate system response based on knowledge and dialogue context:"

CHECKPOINT_VERSION = 1


class NonFiniteGradientError(RuntimeError):
    """A batch produced a non-finite gradient; the message names the example."""


def task_prompt(task: str) -> list[str]:
    """Tokenized task prompt prepended to the model input."""
    if task == "query":
        return tokenize(QUERY_PROMPT)
    if task == "response":
        return tokenize(RESPONSE_PROMPT)
    raise ValueError(f"unknown task {task!r}")


def query_input(dialogue: Dialogue) -> list[str]:
    return task_prompt("query") + tokenize(flatten_context(dialogue))


def response_input(dialogue: Dialogue, knowledge_text: str) -> list[str]:
    return task_prompt("response") + tokenize(knowledge_text) + tokenize(flatten_context(dialogue))


class Vocab:
    """Token <-> id bijection with reserved BOS/EOS/UNK ids."""

    RESERVED = (BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:3]) != self.RESERVED:
            raise ValueError(f"vocab must start with reserved tokens {self.RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocab tokens must be unique")
        self.tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def build(cls, token_lists) -> "Vocab":
        content = sorted({tok for toks in token_lists for tok in toks} - set(cls.RESERVED))
        return cls(list(cls.RESERVED) + content)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        return self.tokens[token_id]

    def encode(self, tokens: list[str]) -> list[int]:
        return [self._ids.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class WeightedExample:
    input_tokens: list[str]
    output_tokens: list[str]
    weight: float
    example_id: str = ""


class AdamW:
    """Decoupled weight-decay Adam with an optional linear learning-rate decay."""

    def __init__(
        self,
        lr: float = 0.05,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        total_steps: int | None = None,
    ):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.lr
        remaining = max(self.total_steps - self.t, 0)
        return self.lr * remaining / self.total_steps

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        lr_t = self.current_lr()
        self.t += 1
        b1, b2 = self.betas
        for name in sorted(params):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            params[name] -= lr_t * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * params[name])

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "total_steps": self.total_steps,
            "m": {k: arr.ravel().tolist() for k, arr in sorted(self.m.items())},
            "v": {k: arr.ravel().tolist() for k, arr in sorted(self.v.items())},
        }

    @classmethod
    def from_state_dict(cls, state: dict, shapes: dict[str, tuple[int, ...]]) -> "AdamW":
        opt = cls(
            lr=state["lr"],
            betas=tuple(state["betas"]),
            eps=state["eps"],
            weight_decay=state["weight_decay"],
            total_steps=state["total_steps"],
        )
        opt.t = state["t"]
        opt.m = {k: np.array(vals, dtype=np.float64).reshape(shapes[k]) for k, vals in state["m"].items()}
        opt.v = {k: np.array(vals, dtype=np.float64).reshape(shapes[k]) for k, vals in state["v"].items()}
        return opt


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


class CondSeqModel:
    """Interface for conditional sequence distributions p(output | input)."""

    def log_prob(self, input_tokens: list[str], output_tokens: list[str]) -> float:
        raise NotImplementedError

    def beam_search(
        self, input_tokens: list[str], beam_size: int = 4, max_len: int = 128
    ) -> list[tuple[list[str], float]]:
        raise NotImplementedError

    def apply_gradients(self, batch: list[WeightedExample], optimizer: AdamW) -> None:
        raise NotImplementedError


class FBGModel(CondSeqModel):
    """Featurized bigram: logits(next) = U[prev] + mean over input-bag rows of V.

    Zero initialization gives a uniform next-token distribution. All state is
    two dense |V| x |V| float64 matrices.
    """

    def __init__(self, vocab: Vocab, seed: int = 0):
        self.vocab = vocab
        self.seed = seed
        n = len(vocab)
        self.U = np.zeros((n, n), dtype=np.float64)
        self.V = np.zeros((n, n), dtype=np.float64)
        # rank of each id under token-string order, for lexicographic tie-breaks
        order = sorted(range(n), key=lambda i: vocab.tokens[i])
        self._lex_rank = np.empty(n, dtype=np.int64)
        for rank, token_id in enumerate(order):
            self._lex_rank[token_id] = rank

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"U": self.U, "V": self.V}

    def _bag_ids(self, input_ids: list[int]) -> list[int]:
        return input_ids if input_ids else [UNK_ID]

    def _bag_vector(self, input_ids: list[int]) -> np.ndarray:
        bag = self._bag_ids(input_ids)
        return self.V[bag].mean(axis=0)

    def _check_output(self, output_tokens: list[str]) -> None:
        if not output_tokens or output_tokens[-1] != EOS_TOKEN:
            raise ValueError("output must end with the EOS token")

    def _step_logprobs(self, out_ids: list[int], bag_vec: np.ndarray) -> np.ndarray:
        prev = [BOS_ID] + out_ids[:-1]
        logits = self.U[prev] + bag_vec
        logp = _log_softmax(logits)
        return logp[np.arange(len(out_ids)), out_ids]

    def log_prob(self, input_tokens: list[str], output_tokens: list[str]) -> float:
        self._check_output(output_tokens)
        out_ids = self.vocab.encode(output_tokens)
        bag_vec = self._bag_vector(self.vocab.encode(input_tokens))
        return float(self._step_logprobs(out_ids, bag_vec).sum())

    def sequence_log_prob(self, input_tokens: list[str], output_tokens: list[str]) -> float:
        """log_prob of an output given as plain tokens, EOS appended internally."""
        return self.log_prob(input_tokens, list(output_tokens) + [EOS_TOKEN])

    # -- decoding ---------------------------------------------------------

    def beam_search(
        self, input_tokens: list[str], beam_size: int = 4, max_len: int = 128
    ) -> list[tuple[list[str], float]]:
        """Beam search over summed token log-probs, no length normalization.

        Hypotheses finish at EOS, or at max_len without the EOS factor, and the
        control tokens BOS/UNK are masked out of generation. Returns up to
        beam_size finished hypotheses sorted by total logprob, ties broken by
        lexicographic token order. The live frontier keeps 2x beam_size
        candidates so prefixes with strong terminations are not lost to
        boundary pruning (the usual production safeguard around EOS).
        """
        if beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        bag_vec = self._bag_vector(self.vocab.encode(input_tokens))
        live: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
        finished: list[tuple[float, tuple[int, ...]]] = []
        buffer_width = 2 * beam_size

        def lex_key(seq: tuple[int, ...]) -> tuple[int, ...]:
            return tuple(int(self._lex_rank[i]) for i in seq)

        for _ in range(max_len):
            prev = [seq[-1] if seq else BOS_ID for _, seq in live]
            logits = self.U[prev] + bag_vec
            logp = _log_softmax(logits)
            scores = np.array([s for s, _ in live])[:, None] + logp  # (n_live, |V|)

            for i, (_, seq) in enumerate(live):
                finished.append((float(scores[i, EOS_ID]), seq))
            finished.sort(key=lambda item: (-item[0], lex_key(item[1])))
            del finished[beam_size:]

            live = self._prune_live(scores, live, buffer_width, lex_key)
            if len(finished) == beam_size and (not live or live[0][0] <= finished[-1][0]):
                live = []
                break
        finished.extend(live)  # survivors hit max_len; no EOS factor
        finished.sort(key=lambda item: (-item[0], lex_key(item[1])))
        return [
            (self.vocab.decode(list(seq)), score) for score, seq in finished[:beam_size]
        ]

    def _prune_live(self, scores, live, width, lex_key):
        flat = scores.copy()
        flat[:, (BOS_ID, EOS_ID, UNK_ID)] = -np.inf
        flat = flat.ravel()
        k = min(width, int(np.isfinite(flat).sum()))
        if k <= 0:
            return []
        neg = -flat
        kth = np.partition(neg, k - 1)[k - 1]
        better = np.nonzero(neg < kth)[0]
        boundary = np.nonzero(neg == kth)[0]
        need = k - better.size
        n_vocab = scores.shape[1]
        if boundary.size > need:
            tied = sorted(
                boundary.tolist(),
                key=lambda f: lex_key(live[f // n_vocab][1] + (f % n_vocab,)),
            )
            chosen = np.array(tied[:need], dtype=np.int64)
        else:
            chosen = boundary
        out = []
        for f in np.concatenate([better, chosen]).tolist():
            i, tok = divmod(f, n_vocab)
            out.append((float(flat[f]), live[i][1] + (tok,)))
        out.sort(key=lambda item: (-item[0], lex_key(item[1])))
        return out

    # -- training ---------------------------------------------------------

    def _accumulate_seq_grad(
        self,
        input_tokens: list[str],
        output_tokens: list[str],
        scale: float,
        d_u: np.ndarray,
        d_v: np.ndarray,
    ) -> float:
        """Add scale * d log_prob / d params into (d_u, d_v); returns the log_prob."""
        self._check_output(output_tokens)
        out_ids = self.vocab.encode(output_tokens)
        bag = self._bag_ids(self.vocab.encode(input_tokens))
        bag_vec = self.V[bag].mean(axis=0)
        prev = [BOS_ID] + out_ids[:-1]
        logits = self.U[prev] + bag_vec
        logp = _log_softmax(logits)
        rows = np.arange(len(out_ids))
        total = float(logp[rows, out_ids].sum())

        grad = -np.exp(logp)
        grad[rows, out_ids] += 1.0
        grad *= scale
        np.add.at(d_u, prev, grad)
        g_sum = grad.sum(axis=0)
        counts: dict[int, int] = {}
        for tok_id in bag:
            counts[tok_id] = counts.get(tok_id, 0) + 1
        for tok_id in sorted(counts):
            d_v[tok_id] += (counts[tok_id] / len(bag)) * g_sum
        return total

    def log_prob_grad(
        self, input_tokens: list[str], output_tokens: list[str]
    ) -> tuple[float, dict[str, np.ndarray]]:
        d_u = np.zeros_like(self.U)
        d_v = np.zeros_like(self.V)
        lp = self._accumulate_seq_grad(input_tokens, output_tokens, 1.0, d_u, d_v)
        return lp, {"U": d_u, "V": d_v}

    def weighted_nll_grads(self, batch: list[WeightedExample]) -> dict[str, np.ndarray]:
        """Gradient of sum_i weight_i * (-log_prob_i), accumulated in batch order."""
        d_u = np.zeros_like(self.U)
        d_v = np.zeros_like(self.V)
        for ex in batch:
            if ex.weight == 0.0:
                continue
            lp = self._accumulate_seq_grad(
                ex.input_tokens, list(ex.output_tokens) + [EOS_TOKEN], -ex.weight, d_u, d_v
            )
            if not math.isfinite(lp) or not math.isfinite(ex.weight):
                raise NonFiniteGradientError(f"non-finite gradient for example {ex.example_id!r}")
        return {"U": d_u, "V": d_v}

    def apply_gradients(self, batch: list[WeightedExample], optimizer: AdamW) -> None:
        """One AdamW step on the weighted-NLL gradient; a zero-weight batch is a no-op."""
        if not batch or all(ex.weight == 0.0 for ex in batch):
            return
        grads = self.weighted_nll_grads(batch)
        self.apply_grads(grads, optimizer)

    def apply_grads(self, grads: dict[str, np.ndarray], optimizer: AdamW) -> None:
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        optimizer.step(self.params, grads)

    # -- serialization ----------------------------------------------------

    def to_dict(self, optimizer: AdamW | None = None, extra: dict | None = None) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "model_type": "fbg",
            "vocab": self.vocab.tokens,
            "rng_seed": self.seed,
            "shapes": {"U": list(self.U.shape), "V": list(self.V.shape)},
            "params": {"U": self.U.ravel().tolist(), "V": self.V.ravel().tolist()},
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "extra": extra or {},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> tuple["FBGModel", AdamW | None, dict]:
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {payload.get('version')!r}")
        vocab = Vocab(payload["vocab"])
        model = cls(vocab, seed=payload.get("rng_seed", 0))
        shapes = {k: tuple(v) for k, v in payload["shapes"].items()}
        model.U = np.array(payload["params"]["U"], dtype=np.float64).reshape(shapes["U"])
        model.V = np.array(payload["params"]["V"], dtype=np.float64).reshape(shapes["V"])
        optimizer = None
        if payload.get("optimizer") is not None:
            optimizer = AdamW.from_state_dict(payload["optimizer"], shapes)
        return model, optimizer, payload.get("extra", {})


def save_checkpoint(
    model: FBGModel, path: str | Path, optimizer: AdamW | None = None, extra: dict | None = None
) -> None:
    Path(path).write_text(json.dumps(model.to_dict(optimizer, extra)), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[FBGModel, AdamW | None, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return FBGModel.from_dict(payload)
