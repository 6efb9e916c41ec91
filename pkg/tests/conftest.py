import pytest

from pmpd import cli, quant, tinylm


@pytest.fixture(scope="session")
def small_model():
    """Cheap 2-layer model for unit tests."""
    cfg = tinylm.ModelConfig(n_layers=2, n_heads=2, d_model=64, d_ff=128,
                             max_context=128)
    return tinylm.ModelVariants.from_random(cfg, quant.PrecisionSet((4, 3, 2)), seed=7)


@pytest.fixture(scope="session")
def toy_model():
    """The desk-scale experiment model: 4 layers, d_model 128, 4 heads, vocab 257."""
    cfg = tinylm.ModelConfig(n_layers=4, n_heads=4, d_model=128, d_ff=256,
                             max_context=256)
    return tinylm.ModelVariants.from_random(cfg, quant.PrecisionSet((4, 3, 2)), seed=11)


@pytest.fixture(scope="session")
def corpus_prompts():
    tok = tinylm.ByteTokenizer()
    lines = cli.load_prompt_lines(None)
    return [tok.encode(line)[:48] for line in lines]
