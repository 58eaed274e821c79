import pytest
from hypothesis import HealthCheck, settings

from gaptext.model import ModelConfig, init_model
from gaptext.records import synth_generate
from gaptext.textgen import to_structured_string
from gaptext.tokenizer import build_vocab, encode

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, name): acceptance criterion, summarized at the end")
    config.stash[_RESULTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    num, name = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    item.config.stash[_RESULTS][num] = f"criterion {num:>2} {status}  {name}" + (f"  [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for num in sorted(results):
            terminalreporter.write_line(results[num])


@pytest.fixture(scope="session")
def small_records():
    return synth_generate(40, seed=5)


@pytest.fixture(scope="session")
def small_corpus(small_records):
    return [to_structured_string(r) for r in small_records]


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocab([a.text for a in small_corpus], 200)


@pytest.fixture(scope="session")
def small_seqs(small_corpus, small_vocab):
    return [encode(small_vocab, a.text, 48) for a in small_corpus]


def tiny_model(flavor="encoder", **kw):
    base = dict(flavor=flavor, d_model=16, n_layers=2, n_heads=2, d_ff=32, vocab_size=40, max_len=48,
                init_std=0.3)
    base.update(kw)
    return init_model(ModelConfig(**base))
