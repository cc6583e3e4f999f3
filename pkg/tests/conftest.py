import pytest

from ldae.corpus import GenerationConfig, GrammarValidator, generate_corpus
from ldae.embeddings import encode_corpus
from ldae.lexicon import build_lexicon


@pytest.fixture(scope="session")
def lexicon():
    return build_lexicon()


@pytest.fixture(scope="session")
def validator(lexicon):
    return GrammarValidator(lexicon)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(GenerationConfig(n_ped=300, n_bg=300, seed=0))


@pytest.fixture(scope="session")
def small_knowledge(small_corpus):
    return encode_corpus(small_corpus, 64, master_seed=0)
