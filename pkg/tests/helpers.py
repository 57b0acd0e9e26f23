"""Small hand-built LMs with fully predictable outputs."""

import torch
from torch import nn

from speechsum.lm import ChatTemplate, FrozenLM


class _Holder(nn.Module):
    def __init__(self, emb):
        super().__init__()
        self.emb = emb


class ScriptedLM(FrozenLM):
    """One-hot embeddings (dim == vocab); logits are ``embeds @ transition``.

    With one-hot inputs the next-token logits depend only on the last token,
    so ``transition[a]`` is the logit row emitted after token ``a``. Hidden
    state of layer ``l`` is ``l * embeds``.
    """

    def __init__(self, transition: torch.Tensor, depth: int = 2):
        v = transition.shape[0]
        emb = nn.Embedding(v, v)
        with torch.no_grad():
            emb.weight.copy_(torch.eye(v))
        self.transition = transition.to(torch.float32)
        self._freeze(_Holder(emb))
        self.embedder = emb
        self.vocab_size = v
        self.dim = v
        self.depth = depth
        self.lm_id = "scripted"
        self.tokenizer = None

    def _run(self, embeds):
        logits = embeds @ self.transition.to(embeds.dtype)
        return logits, [(l + 1) * embeds for l in range(self.depth)]


def uniform_lm(vocab: int = 4, depth: int = 2) -> ScriptedLM:
    return ScriptedLM(torch.zeros(vocab, vocab), depth)


def cycling_lm(a: int, b: int, vocab: int = 4) -> ScriptedLM:
    """After ``a`` emit ``b``, after anything else emit ``a``."""
    t = torch.zeros(vocab, vocab)
    t[:, a] = 5.0
    t[a, a] = 0.0
    t[a, b] = 5.0
    return ScriptedLM(t)


def plain_template(eos: int = 0, prefix=(1,), assistant=(2,)) -> ChatTemplate:
    return ChatTemplate(system_prefix=list(prefix), user_prefix=[], assistant_prefix=list(assistant), eos_id=eos)


class ConstTokens(nn.Module):
    """Encoder stand-in returning fixed prompt embeddings regardless of the audio."""

    def __init__(self, tokens):
        super().__init__()
        self.tokens = nn.Parameter(tokens.clone())

    def forward(self, wave):
        from speechsum.encoder import AudioTokenSequence

        return AudioTokenSequence(self.tokens, 12.5)
