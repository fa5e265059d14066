"""Builds a deterministic tiny GPT-2-style checkpoint for the bridge tests.

No hub access is available here, so the "small checkpoint" is constructed
locally: a byte-level BPE tokenizer trained on a synthetic factual corpus and
a 2-layer model trained for a few hundred steps until its continuations are
confidently peaked (so counterfactual tests have real margins to work with).
Everything is seeded; the checkpoint is byte-reproducible.
"""

import numpy as np
import pytest
import torch

FACTS = [
    "the louvre is in paris .",
    "the museum is in paris .",
    "the tower is in rome .",
    "koalas live in australia .",
    "pandas live in china .",
    "the cat sat on the mat .",
    "the dog sat on the rug .",
    "she is a professor of chemistry .",
    "he is a professor of biology .",
    "the river flows to the sea .",
]


def build_checkpoint(out_dir: str) -> None:
    from tokenizers import Tokenizer, decoders, models, pre_tokenizers, trainers
    from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

    corpus = [fact for fact in FACTS for _ in range(12)]
    tok = Tokenizer(models.BPE(unk_token=None))
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()
    trainer = trainers.BpeTrainer(
        vocab_size=420,
        special_tokens=["<|eos|>"],
        initial_alphabet=pre_tokenizers.ByteLevel.alphabet(),
        show_progress=False,
    )
    tok.train_from_iterator(corpus, trainer)
    fast = PreTrainedTokenizerFast(tokenizer_object=tok, eos_token="<|eos|>", bos_token="<|eos|>")

    torch.manual_seed(0)
    config = GPT2Config(
        vocab_size=len(fast),
        n_positions=64,
        n_embd=32,
        n_layer=2,
        n_head=2,
        bos_token_id=fast.eos_token_id,
        eos_token_id=fast.eos_token_id,
    )
    model = GPT2LMHeadModel(config)

    eos = fast.eos_token_id
    seqs = [[eos] + fast(s, add_special_tokens=False)["input_ids"] + [eos] for s in FACTS]
    width = max(len(s) for s in seqs)
    batch = torch.full((len(seqs), width), eos, dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.long)
    for i, seq in enumerate(seqs):
        batch[i, : len(seq)] = torch.tensor(seq)
        mask[i, : len(seq)] = 1
    labels = batch.clone()
    labels[mask == 0] = -100

    torch.manual_seed(1)
    optimizer = torch.optim.Adam(model.parameters(), lr=3e-3)
    model.train()
    for _ in range(250):
        loss = model(batch, attention_mask=mask, labels=labels).loss
        loss.backward()
        optimizer.step()
        optimizer.zero_grad()
    model.eval()
    model.save_pretrained(out_dir)
    fast.save_pretrained(out_dir)


@pytest.fixture(scope="session")
def checkpoint(tmp_path_factory) -> str:
    path = tmp_path_factory.mktemp("tiny_ck")
    build_checkpoint(str(path))
    return str(path)


@pytest.fixture(scope="session")
def steer_vector_file(tmp_path_factory) -> str:
    rng = np.random.default_rng(7)
    path = tmp_path_factory.mktemp("steer") / "vec.npy"
    np.save(path, rng.normal(size=32).astype(np.float32) * 0.5)
    return str(path)
