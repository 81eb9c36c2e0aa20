import pytest

from mutual_eend.corpus import load_split
from mutual_eend.simulate import CorpusConfig, generate_corpus
from mutual_eend.training import TrainConfig

TINY_CORPUS = CorpusConfig(n_train=6, n_eval=3, min_duration=6.0, max_duration=9.0, seed=11)


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    return generate_corpus(TINY_CORPUS, tmp_path_factory.mktemp("tiny") / "corpus")


@pytest.fixture(scope="session")
def tiny_sessions(tiny_corpus_dir):
    return load_split(tiny_corpus_dir, "train"), load_split(tiny_corpus_dir, "eval")


@pytest.fixture
def tiny_cfg():
    return TrainConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, epochs=3, distill_epochs=3,
                       finetune_epochs=2, batch_size=4, chunk_frames=40, warmup_steps=10,
                       finetune_warmup_steps=5, val_fraction=0.2, seed=3)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def criterion(request):
    """``criterion(name, passed, detail)`` records one acceptance verdict."""
    def record(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        request.config.acceptance_lines.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
