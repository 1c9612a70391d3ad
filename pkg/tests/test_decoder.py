"""Prompt rendering, nucleus sampling semantics, and generation loop
behavior (stop token, determinism, length limits)."""

import numpy as np
import pytest
import torch

from textcode import decoder as DEC
from textcode.data import CODE, NL, ROLE_CODE, ROLE_DOC, ROLE_SIG


def test_prompt_validation():
    with pytest.raises(DEC.DecodeError):
        DEC.Prompt(description="   ", signature="def f():")
    with pytest.raises(DEC.DecodeError):
        DEC.DecodeConfig(temperature=0.0)
    with pytest.raises(DEC.DecodeError):
        DEC.DecodeConfig(nucleus_p=0.0)
    with pytest.raises(DEC.DecodeError):
        DEC.DecodeConfig(num_samples=0)


def test_render_prompt_pangu(toy_vocab):
    p = DEC.Prompt(description="Add one.", signature="def f(x):")
    r = DEC.render_prompt(p, toy_vocab)
    assert r.text == "[descr] Add one. [python] def f(x):"
    assert r.ids.tolist() == toy_vocab.encode(r.text)
    assert r.prefix_len == len(r.ids)
    assert r.modality[0] == NL  # [descr]
    assert r.modality[(r.roles == ROLE_DOC)].max() == NL
    assert (r.modality[r.roles == ROLE_SIG] == CODE).all()


def test_render_prompt_pycodegpt(toy_vocab):
    p = DEC.Prompt(description="Add one.", signature="def f(x):", style="pycodegpt")
    r = DEC.render_prompt(p, toy_vocab)
    assert r.text == "[sos] def f(x): [descr] Add one. [python]"
    assert r.ids.tolist() == toy_vocab.encode(r.text)


def test_render_prompt_with_prepended_code(toy_vocab):
    p = DEC.Prompt(
        description="Add one.", signature="def f(x):",
        prepended_code="[new_line] [indent] y = x + 1",
    )
    r = DEC.render_prompt(p, toy_vocab)
    assert r.text.endswith("def f(x): [new_line] [indent] y = x + 1")
    assert (r.roles[-3:] == ROLE_CODE).all()


def test_render_prompt_unknown_style(toy_vocab):
    with pytest.raises(DEC.DecodeError):
        DEC.render_prompt(
            DEC.Prompt(description="D.", signature="def f():", style="gpt"), toy_vocab
        )


def test_nucleus_set_minimal_mass():
    probs = np.array([0.4, 0.3, 0.2, 0.1])
    assert DEC.nucleus_set(probs, 0.5).tolist() == [0, 1]
    assert DEC.nucleus_set(probs, 0.4).tolist() == [0]  # boundary included
    assert DEC.nucleus_set(probs, 0.71).tolist() == [0, 1, 2]
    assert DEC.nucleus_set(probs, 1.0).tolist() == [0, 1, 2, 3]


def test_nucleus_set_tie_break_by_id():
    probs = np.array([0.25, 0.25, 0.25, 0.25])
    assert DEC.nucleus_set(probs, 0.5).tolist() == [0, 1]


def test_sample_next_greedy():
    logits = np.array([0.0, 5.0, 1.0])
    cfg = DEC.DecodeConfig(greedy=True)
    assert DEC.sample_next(logits, cfg, None) == 1


def test_sample_next_respects_nucleus():
    logits = np.array([10.0, 9.0, -50.0, -50.0])
    cfg = DEC.DecodeConfig(nucleus_p=0.8, temperature=1.0)
    rng = np.random.default_rng(0)
    draws = {DEC.sample_next(logits, cfg, rng) for _ in range(200)}
    assert draws <= {0, 1}
    assert draws == {0, 1}  # both survive the cutoff


def test_sample_next_rejects_nonfinite():
    with pytest.raises(DEC.DecodeError):
        DEC.sample_next(np.array([np.nan, 0.0]), DEC.DecodeConfig(), None)


def test_sample_rng_streams_differ():
    a = DEC.sample_rng(0, "toy/01", 0).random(4).tolist()
    b = DEC.sample_rng(0, "toy/01", 1).random(4).tolist()
    c = DEC.sample_rng(0, "toy/02", 0).random(4).tolist()
    d = DEC.sample_rng(0, "toy/01", 0).random(4).tolist()
    assert a == d
    assert a != b and a != c


class _ScriptedModel:
    """Fake model emitting a fixed id sequence, then [eoc]."""

    def __init__(self, script, vocab_size, context=64):
        from textcode.model import ModelConfig

        self.cfg = ModelConfig(layers=2, model_dim=32, ffn_dim=32, heads=2,
                               context=context, vocab_size=vocab_size)
        self.script = script
        self.calls = 0

    def eval(self):
        return self

    def parameters(self):
        return iter([torch.zeros(1)])

    def __call__(self, ids, modality, position_ids, attn_allowed, target_modality):
        b, L = ids.shape
        logits = torch.zeros(b, L, self.cfg.vocab_size)
        step = self.calls
        self.calls += 1
        target = self.script[step] if step < len(self.script) else 4  # [eoc] id
        logits[:, -1, target] = 10.0
        return logits


def test_generate_stops_at_eoc_and_excludes_it(toy_vocab):
    eoc = toy_vocab.token_id("[eoc]")
    script = toy_vocab.encode("return x") + [eoc]
    model = _ScriptedModel(script, toy_vocab.size)
    prompt = DEC.Prompt(description="Do it.", signature="def f(x):")
    cfg = DEC.DecodeConfig(greedy=True, max_new_tokens=32)
    (comp,) = DEC.generate(model, prompt, toy_vocab, cfg)
    assert comp.stopped
    assert eoc not in comp.token_ids
    assert comp.marker_text == "return x"


def test_generate_respects_max_new_tokens(toy_vocab):
    never_stop = toy_vocab.encode("x") * 100
    model = _ScriptedModel(never_stop, toy_vocab.size)
    cfg = DEC.DecodeConfig(greedy=True, max_new_tokens=5)
    prompt = DEC.Prompt(description="Loop.", signature="def f():")
    (comp,) = DEC.generate(model, prompt, toy_vocab, cfg)
    assert not comp.stopped
    assert len(comp.token_ids) == 5


def test_generate_stops_at_context_limit(toy_vocab):
    model = _ScriptedModel(toy_vocab.encode("x") * 100, toy_vocab.size, context=24)
    cfg = DEC.DecodeConfig(greedy=True, max_new_tokens=100)
    prompt = DEC.Prompt(description="Long.", signature="def f():")
    (comp,) = DEC.generate(model, prompt, toy_vocab, cfg)
    rendered = DEC.render_prompt(prompt, toy_vocab)
    assert rendered.prefix_len + len(comp.token_ids) == 24


def test_generate_prompt_too_long_raises(toy_vocab):
    model = _ScriptedModel([], toy_vocab.size, context=4)
    prompt = DEC.Prompt(description="A very long description.", signature="def f():")
    with pytest.raises(DEC.DecodeError):
        DEC.generate(model, prompt, toy_vocab, DEC.DecodeConfig(greedy=True))


def test_generate_sampled_deterministic(tiny_model, toy_vocab):
    prompt = DEC.Prompt(description="Map the input through rule 3.",
                        signature="def fn03(x):")
    cfg = DEC.DecodeConfig(num_samples=3, seed=11, max_new_tokens=8)
    a = DEC.generate(tiny_model, prompt, toy_vocab, cfg, task_id="toy/03")
    b = DEC.generate(tiny_model, prompt, toy_vocab, cfg, task_id="toy/03")
    assert [c.token_ids for c in a] == [c.token_ids for c in b]
    assert len({tuple(c.token_ids) for c in a}) > 1  # samples differ from each other
